//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<identity>/example.png           reference frame of the identity
//! <root>/<identity>/example.lmk           its landmarks (T = 1)
//! <root>/<identity>/<sequence>/audio.mfcc u32 LE header (T, 28, 12) + f32 LE values
//! <root>/<identity>/<sequence>/landmarks.lmk  u32 LE header (T, 68, 2) + f32 LE values
//! <root>/<identity>/<sequence>/frames/000000.png ...
//! <root>/<identity>/<sequence>/audio.wav  optional source waveform
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mfcc::{MfccConfig, Waveform};
use super::{Frame, LandmarkSet, MfccChunk, TrainingSample, LANDMARK_DIM, MFCC_COEFFS, MFCC_STEPS, NUM_LANDMARKS};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub name: String,
    pub length: usize,
    pub split: Split,
    #[serde(default)]
    pub has_audio: bool,
    /// Per-frame audio envelope of synthetic sequences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<Vec<f32>>,
    /// Per-frame mouth aperture of synthetic sequences, normalized units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aperture: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityEntry {
    pub id: String,
    pub sequences: Vec<SequenceEntry>,
}

/// Ground truth of the synthetic generator: `aperture = aperture_min + aperture_span * envelope`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInfo {
    pub seed: u64,
    pub aperture_min: f32,
    pub aperture_span: f32,
    pub mapping: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub fps: f64,
    pub image_size: usize,
    /// Common sequence length, when all sequences share one.
    pub sequence_length: Option<usize>,
    pub sample_rate: Option<u32>,
    pub mfcc: MfccConfig,
    pub identities: Vec<IdentityEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticInfo>,
}

/// Address of one sequence in a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub identity: String,
    pub sequence: String,
}

impl SampleRef {
    pub fn id(&self) -> String {
        format!("{}/{}", self.identity, self.sequence)
    }
}

fn write_block(path: &Path, dims: [u32; 3], values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + values.len() * 4);
    for d in dims {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_block(path: &Path, inner: [u32; 2], sample_id: &str) -> Result<(usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if bytes.len() < 12 {
        return Err(Error::sample(sample_id, format!("{name}: truncated header")));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (t, a, b) = (dim(0), dim(1), dim(2));
    if [a, b] != inner {
        return Err(Error::sample(
            sample_id,
            format!("{name}: header ({t}, {a}, {b}) does not match (T, {}, {})", inner[0], inner[1]),
        ));
    }
    let count = t as usize * a as usize * b as usize;
    if bytes.len() != 12 + count * 4 {
        return Err(Error::sample(
            sample_id,
            format!("{name}: truncated, expected {} bytes of data, found {}", count * 4, bytes.len() - 12),
        ));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((t as usize, values))
}

/// Writes landmark sets as a `.lmk` block, clipping coordinates into the unit box.
pub fn write_landmarks(path: &Path, shapes: &[LandmarkSet]) -> Result<()> {
    let flat: Vec<f32> = shapes.iter().flat_map(|s| s.clamped().flatten()).collect();
    write_block(path, [shapes.len() as u32, NUM_LANDMARKS as u32, 2], &flat)
}

pub fn read_landmarks(path: &Path, sample_id: &str) -> Result<Vec<LandmarkSet>> {
    let (_, values) = read_block(path, [NUM_LANDMARKS as u32, 2], sample_id)?;
    values.chunks_exact(LANDMARK_DIM).map(LandmarkSet::from_flat).collect()
}

pub fn write_mfcc(path: &Path, chunks: &[MfccChunk]) -> Result<()> {
    let flat: Vec<f32> = chunks.iter().flat_map(|c| c.as_slice().iter().copied()).collect();
    write_block(path, [chunks.len() as u32, MFCC_STEPS as u32, MFCC_COEFFS as u32], &flat)
}

pub fn read_mfcc(path: &Path, sample_id: &str) -> Result<Vec<MfccChunk>> {
    let (_, values) = read_block(path, [MFCC_STEPS as u32, MFCC_COEFFS as u32], sample_id)?;
    values
        .chunks_exact(MFCC_STEPS * MFCC_COEFFS)
        .map(|c| MfccChunk::new(c.to_vec()))
        .collect()
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    frame.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)?.to_rgb8();
    Ok(Frame::from_rgb8(&img))
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Extra per-sequence payload stored alongside a sample.
#[derive(Debug, Default, Clone)]
pub struct SequenceExtras<'a> {
    pub envelope: Option<Vec<f32>>,
    pub aperture: Option<Vec<f32>>,
    pub waveform: Option<&'a Waveform>,
}

/// Incremental dataset writer; the manifest is written by [`DatasetWriter::finish`].
pub struct DatasetWriter {
    root: PathBuf,
    manifest: Manifest,
}

impl DatasetWriter {
    pub fn create(root: &Path, fps: f64, image_size: usize, sample_rate: Option<u32>, mfcc: MfccConfig) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: Manifest {
                schema_version: SCHEMA_VERSION,
                fps,
                image_size,
                sequence_length: None,
                sample_rate,
                mfcc,
                identities: Vec::new(),
                synthetic: None,
            },
        })
    }

    fn identity_mut(&mut self, id: &str) -> &mut IdentityEntry {
        if let Some(pos) = self.manifest.identities.iter().position(|e| e.id == id) {
            &mut self.manifest.identities[pos]
        } else {
            self.manifest.identities.push(IdentityEntry { id: id.to_string(), sequences: Vec::new() });
            self.manifest.identities.last_mut().unwrap()
        }
    }

    pub fn write_example(&mut self, identity: &str, frame: &Frame, landmarks: &LandmarkSet) -> Result<()> {
        if frame.height() != self.manifest.image_size || frame.width() != self.manifest.image_size {
            return Err(Error::Shape(format!(
                "example frame is {}x{}, dataset is {}",
                frame.height(),
                frame.width(),
                self.manifest.image_size
            )));
        }
        let dir = self.root.join(identity);
        fs::create_dir_all(&dir)?;
        write_frame(&dir.join("example.png"), frame)?;
        write_landmarks(&dir.join("example.lmk"), std::slice::from_ref(landmarks))?;
        self.identity_mut(identity);
        Ok(())
    }

    pub fn write_sample(
        &mut self,
        sample: &TrainingSample,
        sequence: &str,
        split: Split,
        extras: SequenceExtras<'_>,
    ) -> Result<()> {
        sample.validate()?;
        let size = self.manifest.image_size;
        if sample.example_frame.height() != size || sample.example_frame.width() != size {
            return Err(Error::sample(&sample.id, format!("frames are not {size}x{size}")));
        }
        let identity_dir = self.root.join(&sample.identity_id);
        if !identity_dir.join("example.png").exists() {
            self.write_example(&sample.identity_id.clone(), &sample.example_frame, &sample.example_landmarks)?;
        }
        let dir = identity_dir.join(sequence);
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir)?;
        write_mfcc(&dir.join("audio.mfcc"), &sample.audio)?;
        write_landmarks(&dir.join("landmarks.lmk"), &sample.landmarks)?;
        for (i, f) in sample.frames.iter().enumerate() {
            write_frame(&frames_dir.join(frame_file_name(i)), f)?;
        }
        if let Some(w) = extras.waveform {
            w.write_wav(&dir.join("audio.wav"))?;
        }
        let entry = SequenceEntry {
            name: sequence.to_string(),
            length: sample.len(),
            split,
            has_audio: extras.waveform.is_some(),
            envelope: extras.envelope,
            aperture: extras.aperture,
        };
        self.identity_mut(&sample.identity_id.clone()).sequences.push(entry);
        Ok(())
    }

    pub fn finish(mut self, synthetic: Option<SyntheticInfo>) -> Result<Manifest> {
        self.manifest.synthetic = synthetic;
        let lengths: Vec<usize> = self
            .manifest
            .identities
            .iter()
            .flat_map(|i| i.sequences.iter().map(|s| s.length))
            .collect();
        self.manifest.sequence_length = match lengths.first() {
            Some(&t) if lengths.iter().all(|&l| l == t) => Some(t),
            _ => None,
        };
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.root.join("manifest.json"), json)?;
        Ok(self.manifest)
    }
}

/// Writes a whole dataset at once. Sequence names are taken from the part of each sample
/// id after the last `/`.
pub fn write_dataset(
    path: &Path,
    fps: f64,
    image_size: usize,
    samples: &[(TrainingSample, Split)],
) -> Result<Manifest> {
    let mut writer = DatasetWriter::create(path, fps, image_size, None, MfccConfig::default())?;
    for (sample, split) in samples {
        let name = sample.id.rsplit('/').next().unwrap_or(&sample.id).to_string();
        writer.write_sample(sample, &name, *split, SequenceExtras::default())?;
    }
    writer.finish(None)
}

/// Read-only view of a dataset directory. Safe to share between reader threads.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join("manifest.json"))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found, expected: SCHEMA_VERSION });
        }
        let manifest: Manifest = serde_json::from_value(value)?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Sequences in manifest order, optionally restricted to one split.
    pub fn samples(&self, split: Option<Split>) -> Vec<SampleRef> {
        self.manifest
            .identities
            .iter()
            .flat_map(|ident| {
                ident
                    .sequences
                    .iter()
                    .filter(move |s| split.is_none_or(|sp| s.split == sp))
                    .map(move |s| SampleRef { identity: ident.id.clone(), sequence: s.name.clone() })
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples(None).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry(&self, sample: &SampleRef) -> Result<&SequenceEntry> {
        self.manifest
            .identities
            .iter()
            .find(|i| i.id == sample.identity)
            .and_then(|i| i.sequences.iter().find(|s| s.name == sample.sequence))
            .ok_or_else(|| Error::sample(sample.id(), "not listed in the manifest"))
    }

    pub fn read_example(&self, identity: &str) -> Result<(Frame, LandmarkSet)> {
        let dir = self.root.join(identity);
        let frame = read_frame(&dir.join("example.png"))?;
        let shapes = read_landmarks(&dir.join("example.lmk"), identity)?;
        let shape = shapes
            .first()
            .copied()
            .ok_or_else(|| Error::sample(identity, "example.lmk holds no landmark set"))?;
        Ok((frame, shape))
    }

    pub fn read_sample(&self, sample: &SampleRef) -> Result<TrainingSample> {
        let id = sample.id();
        let entry = self.entry(sample)?;
        let dir = self.root.join(&sample.identity).join(&sample.sequence);
        let audio = read_mfcc(&dir.join("audio.mfcc"), &id)?;
        let landmarks = read_landmarks(&dir.join("landmarks.lmk"), &id)?;
        let mut frames = Vec::with_capacity(entry.length);
        for i in 0..entry.length {
            let path = dir.join("frames").join(frame_file_name(i));
            if !path.exists() {
                return Err(Error::sample(&id, format!("missing frame {}", frame_file_name(i))));
            }
            frames.push(read_frame(&path)?);
        }
        if audio.len() != entry.length || landmarks.len() != entry.length {
            return Err(Error::sample(
                &id,
                format!(
                    "truncated sample: manifest length {}, audio {}, landmarks {}",
                    entry.length,
                    audio.len(),
                    landmarks.len()
                ),
            ));
        }
        let (example_frame, example_landmarks) = self.read_example(&sample.identity)?;
        let out = TrainingSample {
            id,
            identity_id: sample.identity.clone(),
            audio,
            landmarks,
            frames,
            example_frame,
            example_landmarks,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn read_waveform(&self, sample: &SampleRef) -> Result<Option<Waveform>> {
        let path = self.root.join(&sample.identity).join(&sample.sequence).join("audio.wav");
        if path.exists() {
            Ok(Some(Waveform::read_wav(&path)?))
        } else {
            Ok(None)
        }
    }

    pub fn iter(&self, split: Option<Split>) -> impl Iterator<Item = Result<TrainingSample>> + '_ {
        self.samples(split).into_iter().map(move |s| self.read_sample(&s))
    }

    pub fn load_all(&self, split: Option<Split>) -> Result<Vec<TrainingSample>> {
        self.iter(split).collect()
    }
}
