//! Ingestion of recorded sequences with precomputed landmarks.
//!
//! Input layout: `<input>/<identity>/<sequence>/` holding `audio.wav` (mono), a `frames/`
//! directory of images already at the target frame rate, and `landmarks.lmk` with one
//! landmark set per frame in normalized raw-image coordinates. Directories are visited in
//! name order. Each identity's example is the first frame of its first sequence; the last
//! sequence of an identity with two or more goes to the test split.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use super::align::{align_face, AlignConfig};
use super::dataset::{read_landmarks, DatasetWriter, SequenceExtras, Split};
use super::mfcc::{MfccConfig, MfccExtractor, Waveform};
use super::{Frame, LandmarkSet, TrainingSample};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct IngestConfig {
    pub fps: f64,
    pub image_size: usize,
    pub mfcc: MfccConfig,
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn name_of(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

struct Aligned {
    frames: Vec<Frame>,
    landmarks: Vec<LandmarkSet>,
}

fn align_sequence(dir: &Path, id: &str, align: &AlignConfig) -> Result<Aligned> {
    let paths = frame_paths(&dir.join("frames"))?;
    let raw_landmarks = read_landmarks(&dir.join("landmarks.lmk"), id)?;
    if paths.is_empty() {
        return Err(Error::sample(id, "no frames"));
    }
    if paths.len() != raw_landmarks.len() {
        return Err(Error::sample(id, format!("{} frames but {} landmark sets", paths.len(), raw_landmarks.len())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    let mut landmarks = Vec::with_capacity(paths.len());
    for (path, lm) in paths.iter().zip(&raw_landmarks) {
        let img = image::open(path)?.to_rgb8();
        let (f, l) = align_face(&img, lm, align, id)?;
        frames.push(f);
        landmarks.push(l);
    }
    Ok(Aligned { frames, landmarks })
}

/// Aligns every sequence under `input` and writes a dataset to `output`.
pub fn preprocess(input: &Path, output: &Path, config: &IngestConfig) -> Result<usize> {
    if !(config.fps > 0.0) || config.image_size == 0 {
        return Err(Error::Config("fps and image size must be positive".into()));
    }
    let align = AlignConfig { output_size: config.image_size, ..AlignConfig::default() };
    let identities = sorted_dirs(input)?;
    if identities.is_empty() {
        return Err(Error::Data(format!("{}: no identity directories", input.display())));
    }
    let mut writer: Option<DatasetWriter> = None;
    let mut written = 0;
    for ident_dir in identities {
        let identity = name_of(&ident_dir);
        let sequences = sorted_dirs(&ident_dir)?;
        if sequences.is_empty() {
            warn!("{identity}: no sequences, skipped");
            continue;
        }
        let mut example: Option<(Frame, LandmarkSet)> = None;
        let n = sequences.len();
        for (j, seq_dir) in sequences.iter().enumerate() {
            let sequence = name_of(seq_dir);
            let id = format!("{identity}/{sequence}");
            let wave = Waveform::read_wav(&seq_dir.join("audio.wav"))?;
            let extractor = MfccExtractor::new(&config.mfcc, wave.sample_rate)?;
            let aligned = align_sequence(seq_dir, &id, &align)?;
            let t = aligned.frames.len();
            let audio = (0..t)
                .map(|i| extractor.extract(&wave, i, config.fps).map(|e| e.chunk))
                .collect::<Result<Vec<_>>>()?;
            let (example_frame, example_landmarks) =
                example.get_or_insert_with(|| (aligned.frames[0].clone(), aligned.landmarks[0])).clone();
            let sample = TrainingSample {
                id: id.clone(),
                identity_id: identity.clone(),
                audio,
                landmarks: aligned.landmarks,
                frames: aligned.frames,
                example_frame,
                example_landmarks,
            };
            let w = match writer.as_mut() {
                Some(w) => w,
                None => writer.insert(DatasetWriter::create(
                    output,
                    config.fps,
                    config.image_size,
                    Some(wave.sample_rate),
                    config.mfcc.clone(),
                )?),
            };
            let split = if n >= 2 && j == n - 1 { Split::Test } else { Split::Train };
            w.write_sample(&sample, &sequence, split, SequenceExtras { waveform: Some(&wave), ..Default::default() })?;
            written += 1;
            info!("{id}: {t} frames");
        }
    }
    let writer = writer.ok_or_else(|| Error::Data(format!("{}: no sequences found", input.display())))?;
    writer.finish(None)?;
    Ok(written)
}
