//! Procedural talking "faces" with a known audio-to-mouth relationship.
//!
//! Each identity is a cartoon head (ellipse skin, eyes, brows, nose, lips) with its own
//! geometry and colors. A per-sequence envelope `e(t)` in `[0, 1]` drives both the audio
//! and the mouth: the tone's pitch and loudness rise with `e`, and the inner-lip gap is
//! `aperture_min + aperture_span * e`. Mouth motion is an identity-independent additive
//! displacement, so identity removal maps equal envelopes to equal shapes.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::align::CanonicalAnchors;
use super::dataset::{DatasetWriter, Manifest, SequenceExtras, Split, SyntheticInfo};
use super::mfcc::{MfccConfig, MfccExtractor, Waveform};
use super::{Frame, LandmarkSet, TrainingSample, NUM_LANDMARKS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvelopeKind {
    /// Smoothly interpolated random key values.
    Random,
    Sinusoidal { frequency_hz: f64 },
    Constant { level: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub identities: usize,
    pub sequences_per_identity: usize,
    /// Trailing sequences of each identity assigned to the test split.
    pub test_sequences_per_identity: usize,
    pub length: usize,
    pub image_size: usize,
    pub fps: f64,
    pub sample_rate: u32,
    pub seed: u64,
    pub envelope: EnvelopeKind,
    pub aperture_min: f32,
    pub aperture_span: f32,
    /// Scales how far identities deviate from the canonical face; 0 gives identical faces.
    pub identity_variation: f64,
    /// Amplitude of the per-identity skin and background texture.
    #[serde(default)]
    pub texture: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            identities: 20,
            sequences_per_identity: 3,
            test_sequences_per_identity: 1,
            length: 16,
            image_size: 128,
            fps: 25.0,
            sample_rate: 16000,
            seed: 0,
            envelope: EnvelopeKind::Random,
            aperture_min: 0.0,
            aperture_span: 0.2,
            identity_variation: 1.0,
            texture: 0.25,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 {
            return Err(Error::Config("synthetic dataset needs at least one identity".into()));
        }
        if self.length < 1 {
            return Err(Error::Config("sequence length T must be at least 1".into()));
        }
        if self.sequences_per_identity == 0 || self.test_sequences_per_identity > self.sequences_per_identity {
            return Err(Error::Config("invalid sequence counts per identity".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image size must be at least 16".into()));
        }
        if self.sample_rate < 8000 || self.fps <= 0.0 {
            return Err(Error::Config("sample rate must be >= 8 kHz and fps positive".into()));
        }
        Ok(())
    }

    pub fn aperture(&self, envelope: f32) -> f32 {
        self.aperture_min + self.aperture_span * envelope
    }
}

type Rgb = [f64; 3];

/// Geometry and colors of one synthetic identity, normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    pub head_center: [f64; 2],
    pub head_radii: [f64; 2],
    pub right_eye: [f64; 2],
    pub left_eye: [f64; 2],
    pub eye_radii: [f64; 2],
    pub nose_tip: [f64; 2],
    pub mouth_center: [f64; 2],
    pub mouth_half_width: f64,
    pub lip_thickness: f64,
    pub background: Rgb,
    pub skin: Rgb,
    pub feature: Rgb,
    pub lip: Rgb,
    pub mouth_inside: Rgb,
    pub teeth: Rgb,
    /// Fixed pixel texture on skin and background; 0 renders flat colors.
    pub texture_amplitude: f64,
    pub texture_seed: u64,
}

impl IdentityParams {
    /// The face whose eye centers and nose tip sit exactly on the alignment anchors.
    pub fn canonical() -> Self {
        let a = CanonicalAnchors::default();
        Self {
            head_center: [0.5, 0.5],
            head_radii: [0.36, 0.42],
            right_eye: a.right_eye,
            left_eye: a.left_eye,
            eye_radii: [0.06, 0.03],
            nose_tip: a.nose_tip,
            mouth_center: [0.5, 0.72],
            mouth_half_width: 0.13,
            lip_thickness: 0.03,
            background: [-0.2, 0.1, 0.4],
            skin: [0.7, 0.35, 0.1],
            feature: [-0.8, -0.8, -0.7],
            lip: [0.5, -0.5, -0.4],
            mouth_inside: [-0.7, -0.9, -0.9],
            teeth: [0.95, 0.95, 0.9],
            texture_amplitude: 0.0,
            texture_seed: 0,
        }
    }

    pub fn random(rng: &mut impl Rng, variation: f64) -> Self {
        let base = Self::canonical();
        let mut j = |scale: f64| variation * scale * (rng.gen::<f64>() * 2.0 - 1.0);
        let shift = [j(0.03), j(0.03)];
        let eye_gap = j(0.025);
        let mut color = |c: Rgb, s: f64| -> Rgb {
            [
                (c[0] + j(s)).clamp(-0.95, 0.95),
                (c[1] + j(s)).clamp(-0.95, 0.95),
                (c[2] + j(s)).clamp(-0.95, 0.95),
            ]
        };
        let background = color(base.background, 0.5);
        let skin = color(base.skin, 0.25);
        let feature = color(base.feature, 0.1);
        let lip = color(base.lip, 0.2);
        let mouth_inside = base.mouth_inside;
        let teeth = base.teeth;
        let mut j = |scale: f64| variation * scale * (rng.gen::<f64>() * 2.0 - 1.0);
        Self {
            head_center: [base.head_center[0] + shift[0], base.head_center[1] + shift[1]],
            head_radii: [base.head_radii[0] + j(0.03), base.head_radii[1] + j(0.03)],
            right_eye: [base.right_eye[0] + shift[0] - eye_gap, base.right_eye[1] + shift[1] + j(0.01)],
            left_eye: [base.left_eye[0] + shift[0] + eye_gap, base.left_eye[1] + shift[1] + j(0.01)],
            eye_radii: [base.eye_radii[0] + j(0.01), base.eye_radii[1] + j(0.008)],
            nose_tip: [base.nose_tip[0] + shift[0] + j(0.01), base.nose_tip[1] + shift[1] + j(0.015)],
            mouth_center: [base.mouth_center[0] + shift[0] + j(0.01), base.mouth_center[1] + shift[1] + j(0.015)],
            mouth_half_width: base.mouth_half_width + j(0.02),
            lip_thickness: base.lip_thickness + j(0.008),
            background,
            skin,
            feature,
            lip,
            mouth_inside,
            teeth,
            texture_amplitude: 0.0,
            texture_seed: 0,
        }
    }

    /// The 68-point shape for a given inner-lip aperture.
    pub fn landmarks(&self, aperture: f32) -> LandmarkSet {
        let ap = aperture as f64;
        let mut pts = [[0.0f64; 2]; NUM_LANDMARKS];
        let [cx, cy] = self.head_center;
        let [rx, ry] = self.head_radii;
        for (i, p) in pts.iter_mut().enumerate().take(17) {
            let theta = PI - PI * i as f64 / 16.0;
            *p = [cx + rx * theta.cos(), cy + ry * theta.sin()];
        }
        let [erx, ery] = self.eye_radii;
        for (start, eye) in [(17, self.right_eye), (22, self.left_eye)] {
            for k in 0..5 {
                let u = k as f64 / 4.0 * 2.0 - 1.0;
                pts[start + k] = [eye[0] + 1.2 * erx * u, eye[1] - 2.2 * ery - 0.6 * ery * (1.0 - u * u)];
            }
        }
        let bridge_top = (self.right_eye[1] + self.left_eye[1]) / 2.0;
        for k in 0..4 {
            let f = k as f64 / 3.0;
            pts[27 + k] = [self.nose_tip[0], bridge_top + f * (self.nose_tip[1] - bridge_top)];
        }
        for k in 0..5 {
            pts[31 + k] = [self.nose_tip[0] + (k as f64 - 2.0) * 0.018, self.nose_tip[1] + 0.03];
        }
        let eye_angles = [180.0f64, 120.0, 60.0, 0.0, 300.0, 240.0];
        for (start, eye) in [(36, self.right_eye), (42, self.left_eye)] {
            for (k, deg) in eye_angles.iter().enumerate() {
                let a = deg.to_radians();
                pts[start + k] = [eye[0] + erx * a.cos(), eye[1] - ery * a.sin()];
            }
        }
        let [mx, my] = self.mouth_center;
        let mw = self.mouth_half_width;
        let lt = self.lip_thickness;
        for k in 0..12 {
            let a = (180.0 - 30.0 * k as f64).to_radians();
            let s = a.sin();
            // Upper lip moves up and lower lip down by half the aperture at the lip center.
            let y = my - s * (lt + ap / 2.0);
            pts[48 + k] = [mx + mw * a.cos(), y];
        }
        let inner_x = [-0.6, -0.3, 0.0, 0.3, 0.6, 0.3, 0.0, -0.3];
        let inner_dir = [0.0, -1.0, -1.0, -1.0, 0.0, 1.0, 1.0, 1.0];
        for k in 0..8 {
            pts[60 + k] = [mx + inner_x[k] * mw, my + inner_dir[k] * ap / 2.0];
        }
        let mut out = [[0.0f32; 2]; NUM_LANDMARKS];
        for (o, p) in out.iter_mut().zip(pts.iter()) {
            *o = [p[0] as f32, p[1] as f32];
        }
        LandmarkSet::new(out)
    }

    /// Renders the face for `shape` with 4x4 supersampling.
    pub fn render(&self, shape: &LandmarkSet, size: usize) -> Frame {
        const SS: usize = 4;
        let pts: Vec<[f64; 2]> = shape.points.iter().map(|p| [p[0] as f64, p[1] as f64]).collect();
        let outer: Vec<[f64; 2]> = pts[48..60].to_vec();
        let inner: Vec<[f64; 2]> = pts[60..68].to_vec();
        let right_brow = centroid(&pts[17..22]);
        let left_brow = centroid(&pts[22..27]);
        let right_eye = centroid(&pts[36..42]);
        let left_eye = centroid(&pts[42..48]);
        let nostrils = centroid(&pts[31..36]);
        let inner_top = (pts[61][1] + pts[62][1] + pts[63][1]) / 3.0;
        let inner_bottom = (pts[65][1] + pts[66][1] + pts[67][1]) / 3.0;
        let teeth_line = inner_top + 0.3 * (inner_bottom - inner_top).max(0.0);
        let [erx, ery] = self.eye_radii;

        let color_at = |x: f64, y: f64| -> Rgb {
            if in_polygon(&inner, x, y) {
                return if y < teeth_line { self.teeth } else { self.mouth_inside };
            }
            if in_polygon(&outer, x, y) {
                return self.lip;
            }
            if in_ellipse(right_eye, [erx, ery], x, y) || in_ellipse(left_eye, [erx, ery], x, y) {
                return self.feature;
            }
            let brow = [1.3 * erx, 0.35 * ery];
            if in_ellipse(right_brow, brow, x, y) || in_ellipse(left_brow, brow, x, y) {
                return self.feature;
            }
            if in_ellipse(nostrils, [0.045, 0.015], x, y) {
                return mix(self.skin, self.feature, 0.5);
            }
            let base = if in_ellipse(self.head_center, self.head_radii, x, y) { self.skin } else { self.background };
            let t = self.texture(x, y);
            [base[0] + t, base[1] + t, base[2] + t]
        };

        let mut data = Vec::with_capacity(size * size * 3);
        let inv = 1.0 / (size * SS) as f64;
        for py in 0..size {
            for px in 0..size {
                let mut acc = [0.0; 3];
                for sy in 0..SS {
                    for sx in 0..SS {
                        let x = ((px * SS + sx) as f64 + 0.5) * inv;
                        let y = ((py * SS + sy) as f64 + 0.5) * inv;
                        let c = color_at(x, y);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                data.extend(acc.iter().map(|v| (v / (SS * SS) as f64).clamp(-1.0, 1.0) as f32));
            }
        }
        Frame::new(size, size, data).expect("rendered values are clamped")
    }
}

impl IdentityParams {
    /// Value noise on a 48 x 48 grid of normalized coordinates.
    fn texture(&self, x: f64, y: f64) -> f64 {
        if self.texture_amplitude == 0.0 {
            return 0.0;
        }
        let cell = |v: f64| (v * TEXTURE_GRID).floor().clamp(0.0, TEXTURE_GRID - 1.0) as u64;
        let mut h = self.texture_seed ^ (cell(x) << 32) ^ cell(y);
        // splitmix64 finalizer
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
        let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
        self.texture_amplitude * (2.0 * unit - 1.0)
    }
}

const TEXTURE_GRID: f64 = 48.0;

fn centroid(pts: &[[f64; 2]]) -> [f64; 2] {
    let n = pts.len() as f64;
    let s = pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
    [s[0] / n, s[1] / n]
}

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] * (1.0 - t) + b[0] * t, a[1] * (1.0 - t) + b[1] * t, a[2] * (1.0 - t) + b[2] * t]
}

fn in_ellipse(center: [f64; 2], radii: [f64; 2], x: f64, y: f64) -> bool {
    let dx = (x - center[0]) / radii[0];
    let dy = (y - center[1]) / radii[1];
    dx * dx + dy * dy <= 1.0
}

fn in_polygon(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (poly[i][0], poly[i][1]);
        let (xj, yj) = (poly[j][0], poly[j][1]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// A continuous envelope `e(t)` in `[0, 1]`.
#[derive(Debug, Clone)]
pub enum Envelope {
    Keys { keys: Vec<f64>, spacing: f64 },
    Sine { frequency_hz: f64, phase: f64 },
    Constant(f64),
}

impl Envelope {
    pub fn sample(kind: EnvelopeKind, duration: f64, rng: &mut impl Rng) -> Self {
        match kind {
            EnvelopeKind::Random => {
                let spacing = 0.12;
                let n = (duration / spacing).ceil() as usize + 2;
                Envelope::Keys { keys: (0..n).map(|_| rng.gen::<f64>()).collect(), spacing }
            }
            EnvelopeKind::Sinusoidal { frequency_hz } => {
                Envelope::Sine { frequency_hz, phase: rng.gen::<f64>() * 2.0 * PI }
            }
            EnvelopeKind::Constant { level } => Envelope::Constant(level.clamp(0.0, 1.0)),
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        match self {
            Envelope::Keys { keys, spacing } => {
                let u = (t / spacing).max(0.0);
                let i = (u.floor() as usize).min(keys.len() - 2);
                let f = (u - i as f64).clamp(0.0, 1.0);
                let w = 0.5 - 0.5 * (PI * f).cos();
                keys[i] * (1.0 - w) + keys[i + 1] * w
            }
            Envelope::Sine { frequency_hz, phase } => 0.5 + 0.5 * (2.0 * PI * frequency_hz * t + phase).sin(),
            Envelope::Constant(level) => *level,
        }
    }
}

const PITCH_LOW_HZ: f64 = 180.0;
const PITCH_HIGH_HZ: f64 = 1400.0;

/// Audio whose pitch and loudness follow the envelope, plus a little noise.
pub fn synthesize_audio(envelope: &Envelope, duration: f64, sample_rate: u32, rng: &mut impl Rng) -> Waveform {
    let n = (duration * sample_rate as f64).round() as usize;
    let dt = 1.0 / sample_rate as f64;
    let mut phase = 0.0;
    let samples = (0..n)
        .map(|i| {
            let e = envelope.at(i as f64 * dt);
            let freq = PITCH_LOW_HZ + (PITCH_HIGH_HZ - PITCH_LOW_HZ) * e;
            phase += 2.0 * PI * freq * dt;
            let amp = 0.2 + 0.4 * e;
            let noise = 0.004 * (rng.gen::<f64>() * 2.0 - 1.0);
            (amp * (phase.sin() + 0.4 * (2.0 * phase).sin()) / 1.4 + noise) as f32
        })
        .collect();
    Waveform::mono(samples, sample_rate)
}

/// Envelope value at the center of each video frame.
pub fn frame_envelope(envelope: &Envelope, length: usize, fps: f64) -> Vec<f32> {
    (0..length).map(|i| envelope.at((i as f64 + 0.5) / fps) as f32).collect()
}

/// Landmarks and frames of one identity following a per-frame envelope.
pub fn render_sequence(
    identity: &IdentityParams,
    envelope: &[f32],
    config: &SyntheticConfig,
) -> (Vec<LandmarkSet>, Vec<Frame>) {
    envelope
        .iter()
        .map(|&e| {
            let shape = identity.landmarks(config.aperture(e));
            let frame = identity.render(&shape, config.image_size);
            (shape, frame)
        })
        .unzip()
}

/// Renders the dataset described by `config` into `out`.
pub fn generate_synthetic_dataset(config: &SyntheticConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mfcc = MfccConfig::default();
    let extractor = MfccExtractor::new(&mfcc, config.sample_rate)?;
    let mut writer = DatasetWriter::create(out, config.fps, config.image_size, Some(config.sample_rate), mfcc)?;
    let duration = config.length as f64 / config.fps;
    for ident in 0..config.identities {
        let identity_id = format!("id{ident:03}");
        let mut params = IdentityParams::random(&mut rng, config.identity_variation);
        params.texture_amplitude = config.texture;
        params.texture_seed = rng.gen();
        let example_landmarks = params.landmarks(config.aperture_min);
        let example_frame = params.render(&example_landmarks, config.image_size);
        writer.write_example(&identity_id, &example_frame, &example_landmarks)?;
        for seq in 0..config.sequences_per_identity {
            let envelope = Envelope::sample(config.envelope, duration, &mut rng);
            let waveform = synthesize_audio(&envelope, duration, config.sample_rate, &mut rng);
            let env = frame_envelope(&envelope, config.length, config.fps);
            let aperture: Vec<f32> = env.iter().map(|&e| config.aperture(e)).collect();
            let (landmarks, frames) = render_sequence(&params, &env, config);
            let audio = (0..config.length)
                .map(|i| extractor.extract(&waveform, i, config.fps).map(|x| x.chunk))
                .collect::<Result<Vec<_>>>()?;
            let name = format!("seq{seq:03}");
            let split = if seq + config.test_sequences_per_identity >= config.sequences_per_identity {
                Split::Test
            } else {
                Split::Train
            };
            let sample = TrainingSample {
                id: format!("{identity_id}/{name}"),
                identity_id: identity_id.clone(),
                audio,
                landmarks,
                frames,
                example_frame: example_frame.clone(),
                example_landmarks,
            };
            let extras = SequenceExtras { envelope: Some(env), aperture: Some(aperture), waveform: Some(&waveform) };
            writer.write_sample(&sample, &name, split, extras)?;
        }
    }
    writer.finish(Some(SyntheticInfo {
        seed: config.seed,
        aperture_min: config.aperture_min,
        aperture_span: config.aperture_span,
        mapping: "aperture = aperture_min + aperture_span * envelope".into(),
    }))
}
