//! Cascade inference (audio to landmarks to frames) and held-out evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::atnet::AtNet;
use crate::checkpoint::file_hash;
use crate::landmark_space::PcaBasis;
use crate::media::dataset::{frame_file_name, read_frame, read_landmarks, write_frame, write_landmarks, Dataset, Split};
use crate::media::mfcc::{MfccConfig, MfccExtractor, Waveform};
use crate::media::{Frame, LandmarkSet, MfccChunk};
use crate::metrics::{sequence_metrics, summarize, EvalReport, LandmarkSource, LmdOptions, SequenceMetrics};
use crate::probe::LandmarkProbe;
use crate::trainer::{load_atnet, load_vgnet};
use crate::vgnet::{Generated, VgNet};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct InferenceRequest {
    pub audio_path: PathBuf,
    pub example_image_path: PathBuf,
    pub example_landmarks_path: PathBuf,
    pub basis_path: PathBuf,
    pub atnet_ckpt: PathBuf,
    pub vgnet_ckpt: PathBuf,
    pub output_dir: PathBuf,
    pub dump_attention: bool,
    pub fps: f64,
    pub mfcc: MfccConfig,
}

/// Written to `metadata.json`; holds nothing that varies between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceMetadata {
    pub fps: f64,
    pub frames: usize,
    pub atnet_hash: String,
    pub vgnet_hash: String,
    pub basis_hash: String,
}

#[derive(Debug, Clone)]
pub struct InferenceSummary {
    pub metadata: InferenceMetadata,
    /// Generated frames per second of wall time, cascade only.
    pub throughput_fps: f64,
}

/// AT-net then VG-net on one audio track.
pub fn cascade(
    atnet: &AtNet,
    basis: &PcaBasis,
    vgnet: &VgNet,
    audio: &[MfccChunk],
    example_frame: &Frame,
    example_landmarks: &LandmarkSet,
) -> Result<(Vec<LandmarkSet>, Generated)> {
    let landmarks = atnet.predict_landmarks(audio, example_landmarks, basis)?;
    let generated = vgnet.generate(&landmarks, example_frame, example_landmarks)?;
    Ok((landmarks, generated))
}

fn attention_frame(a: &crate::vgnet::AttentionMap) -> Result<Frame> {
    let data = a.values.iter().flat_map(|&v| {
        let u = 2.0 * v - 1.0;
        [u, u, u]
    });
    Frame::new(a.height, a.width, data.collect())
}

pub fn infer(request: &InferenceRequest) -> Result<InferenceSummary> {
    let basis = PcaBasis::load(&request.basis_path)?;
    let (_, atnet) = load_atnet(&request.atnet_ckpt, &basis)?;
    let (_, vgnet) = load_vgnet(&request.vgnet_ckpt)?;
    let wave = Waveform::read_wav(&request.audio_path)?;
    let extractor = MfccExtractor::new(&request.mfcc, wave.sample_rate)?;
    let count = wave.frame_count(request.fps);
    if count == 0 {
        return Err(Error::Data(format!(
            "{}: audio of {:.3} s is shorter than one frame at {} fps",
            request.audio_path.display(),
            wave.duration_secs(),
            request.fps
        )));
    }
    let audio: Vec<MfccChunk> = (0..count).map(|i| extractor.extract(&wave, i, request.fps).map(|e| e.chunk)).collect::<Result<_>>()?;
    let example_frame = read_frame(&request.example_image_path)?;
    let example_landmarks = *read_landmarks(&request.example_landmarks_path, "example")?
        .first()
        .ok_or_else(|| Error::Data("example landmark file is empty".into()))?;

    let start = Instant::now();
    let (landmarks, generated) = cascade(&atnet, &basis, &vgnet, &audio, &example_frame, &example_landmarks)?;
    let throughput_fps = count as f64 / start.elapsed().as_secs_f64().max(1e-9);
    info!("generated {count} frames at {throughput_fps:.2} frames/s");

    let out = &request.output_dir;
    fs::create_dir_all(out.join("frames"))?;
    for (i, f) in generated.frames.iter().enumerate() {
        write_frame(&out.join("frames").join(frame_file_name(i)), f)?;
    }
    if request.dump_attention {
        fs::create_dir_all(out.join("attention"))?;
        fs::create_dir_all(out.join("motion"))?;
        for (i, (a, m)) in generated.attentions.iter().zip(&generated.motions).enumerate() {
            write_frame(&out.join("attention").join(frame_file_name(i)), &attention_frame(a)?)?;
            write_frame(&out.join("motion").join(frame_file_name(i)), &Frame::new(m.height, m.width, m.values.clone())?)?;
        }
    }
    write_landmarks(&out.join("landmarks.lmk"), &landmarks)?;
    let metadata = InferenceMetadata {
        fps: request.fps,
        frames: count,
        atnet_hash: file_hash(&request.atnet_ckpt)?,
        vgnet_hash: file_hash(&request.vgnet_ckpt)?,
        basis_hash: basis.hash(),
    };
    fs::write(out.join("metadata.json"), serde_json::to_string_pretty(&metadata)?)?;
    Ok(InferenceSummary { metadata, throughput_fps })
}

/// Landmark source for evaluation in predicted mode.
pub type Predictor<'a> = (&'a AtNet, &'a PcaBasis);

/// Evaluates VG-net on the test split with ground-truth or AT-net landmarks. LMD compares
/// probe readings of generated frames against probe readings of the real frames.
pub fn evaluate(
    dataset: &Dataset,
    vgnet: &VgNet,
    predictor: Option<Predictor<'_>>,
    probe: &LandmarkProbe,
    mode: LandmarkSource,
    lmd: &LmdOptions,
) -> Result<(EvalReport, Vec<SequenceMetrics>)> {
    evaluate_with(dataset, vgnet, predictor, probe, mode, lmd, |_, l| l)
}

fn evaluate_with(
    dataset: &Dataset,
    vgnet: &VgNet,
    predictor: Option<Predictor<'_>>,
    probe: &LandmarkProbe,
    mode: LandmarkSource,
    lmd: &LmdOptions,
    mut perturb: impl FnMut(usize, Vec<LandmarkSet>) -> Vec<LandmarkSet>,
) -> Result<(EvalReport, Vec<SequenceMetrics>)> {
    let refs = dataset.samples(Some(Split::Test));
    if refs.is_empty() {
        return Err(Error::Data("dataset has no test split".into()));
    }
    let mut rows = Vec::with_capacity(refs.len());
    for (i, r) in refs.iter().enumerate() {
        let s = dataset.read_sample(r)?;
        let landmarks = match mode {
            LandmarkSource::GtLandmarks => s.landmarks.clone(),
            LandmarkSource::PredictedLandmarks => {
                let (atnet, basis) = predictor.ok_or_else(|| Error::Config("predicted-landmarks mode needs an AT-net and basis".into()))?;
                atnet.predict_landmarks(&s.audio, &s.example_landmarks, basis)?
            }
        };
        let landmarks = perturb(i, landmarks);
        let generated = vgnet.generate(&landmarks, &s.example_frame, &s.example_landmarks)?;
        let gen_lm = probe.read(&generated.frames)?;
        let ref_lm = probe.read(&s.frames)?;
        rows.push(sequence_metrics(&s.id, &generated.frames, &s.frames, &gen_lm, &ref_lm, lmd)?);
    }
    Ok((summarize(&rows, mode), rows))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    /// Noise standard deviation in pixels of the model's frame.
    pub sigma: f64,
    pub report: EvalReport,
}

/// Re-evaluates with i.i.d. Gaussian noise on every input landmark coordinate.
/// Every sigma reuses the same unit-normal draws, scaled.
pub fn noise_sweep(
    dataset: &Dataset,
    vgnet: &VgNet,
    probe: &LandmarkProbe,
    sigmas: &[f64],
    seed: u64,
    lmd: &LmdOptions,
) -> Result<Vec<SweepRow>> {
    let size = vgnet.config().image_size as f64;
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        if !(sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
        }
        let scale = (sigma / size) as f32;
        let (report, _) = evaluate_with(dataset, vgnet, None, probe, LandmarkSource::GtLandmarks, lmd, |i, lms| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            lms.into_iter()
                .map(|mut p| {
                    for pt in p.points.iter_mut() {
                        for c in pt.iter_mut() {
                            let z: f32 = StandardNormal.sample(&mut rng);
                            *c += scale * z;
                        }
                    }
                    p
                })
                .collect()
        })?;
        rows.push(SweepRow { sigma, report });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("sigma,psnr,ssim,lmd\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.sigma, r.report.psnr, r.report.ssim, r.report.lmd));
    }
    out
}

/// Writes `report.json` and `sequences.csv` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport, rows: &[SequenceMetrics]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join("sequences.csv"), crate::metrics::rows_to_csv(rows))?;
    Ok(())
}

/// Mean attention inside and outside the mouth bounding box of the driving landmarks,
/// over every test frame. The box is padded by `pad` pixels.
pub fn attention_localization(dataset: &Dataset, vgnet: &VgNet, pad: f64) -> Result<(f64, f64)> {
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for r in dataset.samples(Some(Split::Test)) {
        let s = dataset.read_sample(&r)?;
        let g = vgnet.generate(&s.landmarks, &s.example_frame, &s.example_landmarks)?;
        for (a, lm) in g.attentions.iter().zip(&s.landmarks) {
            let (w, h) = (a.width as f64, a.height as f64);
            let mouth = &lm.points[crate::media::layout::MOUTH];
            let x0 = mouth.iter().map(|p| p[0] as f64).fold(f64::INFINITY, f64::min) * w - pad;
            let x1 = mouth.iter().map(|p| p[0] as f64).fold(f64::NEG_INFINITY, f64::max) * w + pad;
            let y0 = mouth.iter().map(|p| p[1] as f64).fold(f64::INFINITY, f64::min) * h - pad;
            let y1 = mouth.iter().map(|p| p[1] as f64).fold(f64::NEG_INFINITY, f64::max) * h + pad;
            for y in 0..a.height {
                for x in 0..a.width {
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let v = a.values[y * a.width + x] as f64;
                    if cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1 {
                        inside += v;
                        n_in += 1;
                    } else {
                        outside += v;
                        n_out += 1;
                    }
                }
            }
        }
    }
    if n_in == 0 || n_out == 0 {
        return Err(Error::Data("mouth box is empty or covers the whole frame".into()));
    }
    Ok((inside / n_in as f64, outside / n_out as f64))
}
