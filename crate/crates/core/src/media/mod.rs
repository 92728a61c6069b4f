//! Audio, landmark and frame data: feature extraction, face alignment, the synthetic
//! corpus generator and the on-disk dataset format.

pub mod align;
pub mod dataset;
pub mod ingest;
pub mod layout;
pub mod mfcc;
pub mod synth;

use crate::{Error, Result};
use image::RgbImage;

/// Time steps (10 ms windows) in one MFCC chunk.
pub const MFCC_STEPS: usize = 28;
/// Cepstral coefficients kept per window after dropping the first one.
pub const MFCC_COEFFS: usize = 12;
pub const NUM_LANDMARKS: usize = 68;
/// Length of a flattened landmark set.
pub const LANDMARK_DIM: usize = NUM_LANDMARKS * 2;

/// A 28 x 12 block of mel cepstral coefficients paired with one video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccChunk {
    values: Vec<f32>,
}

impl MfccChunk {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != MFCC_STEPS * MFCC_COEFFS {
            return Err(Error::Shape(format!(
                "mfcc chunk needs {}x{} values, got {}",
                MFCC_STEPS,
                MFCC_COEFFS,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("mfcc chunk contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn get(&self, step: usize, coeff: usize) -> f32 {
        self.values[step * MFCC_COEFFS + coeff]
    }

    pub fn row(&self, step: usize) -> &[f32] {
        &self.values[step * MFCC_COEFFS..(step + 1) * MFCC_COEFFS]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }
}

/// 68 facial points in normalized image coordinates.
///
/// Coordinates of measured shapes lie in `[0, 1]`. Shapes produced by PCA reconstruction
/// may leave the unit box; they are clipped when written to disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkSet {
    pub points: [[f32; 2]; NUM_LANDMARKS],
}

impl LandmarkSet {
    pub fn new(points: [[f32; 2]; NUM_LANDMARKS]) -> Self {
        Self { points }
    }

    pub fn from_flat(flat: &[f32]) -> Result<Self> {
        if flat.len() != LANDMARK_DIM {
            return Err(Error::Shape(format!(
                "landmark set needs {LANDMARK_DIM} values, got {}",
                flat.len()
            )));
        }
        let mut points = [[0.0; 2]; NUM_LANDMARKS];
        for (i, p) in points.iter_mut().enumerate() {
            *p = [flat[2 * i], flat[2 * i + 1]];
        }
        Ok(Self { points })
    }

    pub fn from_flat_f64(flat: &[f64]) -> Result<Self> {
        let v: Vec<f32> = flat.iter().map(|&x| x as f32).collect();
        Self::from_flat(&v)
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn flatten_f64(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0] as f64, p[1] as f64]).collect()
    }

    pub fn is_in_unit_box(&self) -> bool {
        self.points
            .iter()
            .all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Data("landmark set contains non-finite coordinates".into()));
        }
        if !self.is_in_unit_box() {
            return Err(Error::Data("landmark coordinates outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn clamped(&self) -> Self {
        let mut out = *self;
        for p in out.points.iter_mut() {
            p[0] = p[0].clamp(0.0, 1.0);
            p[1] = p[1].clamp(0.0, 1.0);
        }
        out
    }

    /// Mean of a subset of points.
    pub fn centroid(&self, indices: &[usize]) -> [f32; 2] {
        let n = indices.len().max(1) as f32;
        let (sx, sy) = indices
            .iter()
            .fold((0.0, 0.0), |(sx, sy), &i| (sx + self.points[i][0], sy + self.points[i][1]));
        [sx / n, sy / n]
    }
}

/// An RGB image stored row-major, channel-last, with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "frame {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < -1.0 || *v > 1.0) {
            return Err(Error::Data("frame values must be finite and within [-1, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, data: vec![value.clamp(-1.0, 1.0); height * width * 3] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Values in channel-first order, as fed to the networks.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }

    /// Inverse of [`Frame::to_chw`]; values are clamped into `[-1, 1]`.
    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        let plane = height * width;
        if chw.len() != plane * 3 {
            return Err(Error::Shape(format!(
                "expected {} channel-first values, got {}",
                plane * 3,
                chw.len()
            )));
        }
        let mut data = vec![0.0; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                data[i * 3 + c] = chw[c * plane + i].clamp(-1.0, 1.0);
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| u8_to_unit(v)).collect();
        Self { height: img.height() as usize, width: img.width() as usize, data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|&v| unit_to_u8(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }
}

/// `[-1, 1]` to 8-bit with round-to-nearest; the round trip error is at most `0.5 / 127.5`.
pub fn unit_to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn u8_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// One aligned training sequence plus the identity's reference image.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub id: String,
    pub identity_id: String,
    pub audio: Vec<MfccChunk>,
    pub landmarks: Vec<LandmarkSet>,
    pub frames: Vec<Frame>,
    pub example_frame: Frame,
    pub example_landmarks: LandmarkSet,
}

impl TrainingSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t == 0 {
            return Err(Error::sample(&self.id, "sequence is empty"));
        }
        if self.audio.len() != t || self.landmarks.len() != t {
            return Err(Error::sample(
                &self.id,
                format!(
                    "stream lengths differ: audio {}, landmarks {}, frames {}",
                    self.audio.len(),
                    self.landmarks.len(),
                    t
                ),
            ));
        }
        if self.frames.iter().any(|f| !f.same_shape(&self.example_frame)) {
            return Err(Error::sample(&self.id, "frame sizes differ from the example frame"));
        }
        Ok(())
    }
}
