//! MFCC features for one video frame: a 280 ms audio segment centered on the frame,
//! analysed in 28 windows spaced 10 ms apart.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{MfccChunk, MFCC_COEFFS, MFCC_STEPS};
use crate::{Error, Result};

/// Interleaved PCM samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub channels: u16,
}

impl Waveform {
    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate, channels: 1 }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.channels.max(1) as f64 / self.sample_rate as f64
    }

    /// Number of whole video frames covered by the audio at `fps`.
    pub fn frame_count(&self, fps: f64) -> usize {
        let per_channel = self.samples.len() / self.channels.max(1) as usize;
        ((per_channel as f64 * fps / self.sample_rate as f64) + 1e-9).floor() as usize
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        let samples: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / scale))
                    .collect::<std::result::Result<_, _>>()?
            }
        };
        Ok(Self { samples, sample_rate: spec.sample_rate, channels: spec.channels })
    }

    /// Writes 32-bit float WAV, which keeps the samples bit-exact.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: self.channels,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample(s)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub segment_ms: f64,
    pub hop_ms: f64,
    pub window_ms: f64,
    pub num_filters: usize,
    /// Coefficients computed per window before the first is dropped.
    pub num_cepstra: usize,
    pub pre_emphasis: f64,
    pub low_hz: f64,
    /// Upper filterbank edge; Nyquist when absent.
    pub high_hz: Option<f64>,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            segment_ms: 280.0,
            hop_ms: 10.0,
            window_ms: 25.0,
            num_filters: 26,
            num_cepstra: 13,
            pre_emphasis: 0.97,
            low_hz: 0.0,
            high_hz: None,
            log_floor: 1e-10,
        }
    }
}

/// A chunk plus whether any part of its analysis windows fell outside the audio and was
/// filled with silence.
#[derive(Debug, Clone)]
pub struct MfccExtraction {
    pub chunk: MfccChunk,
    pub padded: bool,
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Feature extractor with a precomputed FFT plan and filterbank for one sample rate.
pub struct MfccExtractor {
    config: MfccConfig,
    sample_rate: u32,
    window_len: usize,
    hop_len: usize,
    segment_len: usize,
    nfft: usize,
    hamming: Vec<f64>,
    filterbank: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MfccExtractor {
    pub fn new(config: &MfccConfig, sample_rate: u32) -> Result<Self> {
        if sample_rate < 8000 {
            return Err(Error::Config(format!("sample rate {sample_rate} Hz is below 8 kHz")));
        }
        if config.num_cepstra != MFCC_COEFFS + 1 {
            return Err(Error::Config(format!(
                "num_cepstra must be {} so that {} remain after dropping the first",
                MFCC_COEFFS + 1,
                MFCC_COEFFS
            )));
        }
        let sr = sample_rate as f64;
        let hop_len = (config.hop_ms * sr / 1000.0).round() as usize;
        let window_len = (config.window_ms * sr / 1000.0).round() as usize;
        let segment_len = (config.segment_ms * sr / 1000.0).round() as usize;
        if hop_len == 0 || window_len == 0 || segment_len != hop_len * MFCC_STEPS {
            return Err(Error::Config(format!(
                "segment of {} ms with {} ms hop must give exactly {} windows",
                config.segment_ms, config.hop_ms, MFCC_STEPS
            )));
        }
        let nfft = window_len.next_power_of_two();
        let hamming = (0..window_len)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (window_len as f64 - 1.0)).cos())
            .collect();
        let high = config.high_hz.unwrap_or(sr / 2.0);
        let filterbank = mel_filterbank(config.num_filters, nfft, sr, config.low_hz, high);
        let fft = FftPlanner::new().plan_fft_forward(nfft);
        Ok(Self {
            config: config.clone(),
            sample_rate,
            window_len,
            hop_len,
            segment_len,
            nfft,
            hamming,
            filterbank,
            fft,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Features for video frame `frame_index`. The segment is centered on the middle of
    /// the frame's display interval, `(frame_index + 0.5) / fps`.
    pub fn extract(&self, wave: &Waveform, frame_index: usize, fps: f64) -> Result<MfccExtraction> {
        if wave.channels != 1 {
            return Err(Error::Data(format!(
                "mfcc extraction needs mono audio, got {} channels",
                wave.channels
            )));
        }
        if wave.sample_rate != self.sample_rate {
            return Err(Error::Config(format!(
                "extractor built for {} Hz, waveform is {} Hz",
                self.sample_rate, wave.sample_rate
            )));
        }
        if fps <= 0.0 {
            return Err(Error::Config("fps must be positive".into()));
        }
        let center = (frame_index as f64 + 0.5) / fps * self.sample_rate as f64;
        let seg_start = center.round() as i64 - (self.segment_len / 2) as i64;
        let n = wave.samples.len() as i64;
        let mut padded = false;
        let mut sample = |i: i64| -> f64 {
            if i < 0 || i >= n {
                padded = true;
                0.0
            } else {
                wave.samples[i as usize] as f64
            }
        };

        let mut values = Vec::with_capacity(MFCC_STEPS * MFCC_COEFFS);
        let mut buf = vec![Complex::new(0.0, 0.0); self.nfft];
        for step in 0..MFCC_STEPS {
            // Window `step` is centered on the middle of its 10 ms hop.
            let win_start = seg_start + (step * self.hop_len) as i64 + (self.hop_len / 2) as i64
                - (self.window_len / 2) as i64;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for k in 0..self.window_len {
                let idx = win_start + k as i64;
                let emphasized = sample(idx) - self.config.pre_emphasis * sample(idx - 1);
                buf[k] = Complex::new(emphasized * self.hamming[k], 0.0);
            }
            self.fft.process(&mut buf);
            let power: Vec<f64> = buf[..self.nfft / 2 + 1]
                .iter()
                .map(|c| c.norm_sqr() / self.nfft as f64)
                .collect();
            let log_energies: Vec<f64> = self
                .filterbank
                .iter()
                .map(|filter| {
                    let e: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
                    e.max(self.config.log_floor).ln()
                })
                .collect();
            let cepstra = dct_ortho(&log_energies, self.config.num_cepstra);
            values.extend(cepstra[1..].iter().map(|&c| c as f32));
        }
        Ok(MfccExtraction { chunk: MfccChunk::new(values)?, padded })
    }

    /// Chunks for every whole frame of the waveform.
    pub fn extract_all(&self, wave: &Waveform, fps: f64) -> Result<Vec<MfccExtraction>> {
        (0..wave.frame_count(fps)).map(|i| self.extract(wave, i, fps)).collect()
    }
}

/// One-shot convenience over [`MfccExtractor`].
pub fn extract_mfcc(
    wave: &Waveform,
    frame_index: usize,
    video_fps: f64,
    config: &MfccConfig,
) -> Result<MfccExtraction> {
    if wave.channels != 1 {
        return Err(Error::Data(format!(
            "mfcc extraction needs mono audio, got {} channels",
            wave.channels
        )));
    }
    MfccExtractor::new(config, wave.sample_rate)?.extract(wave, frame_index, video_fps)
}

/// Triangular filters on integer FFT bins, equally spaced on the mel scale.
fn mel_filterbank(num_filters: usize, nfft: usize, sr: f64, low: f64, high: f64) -> Vec<Vec<f64>> {
    let (mel_lo, mel_hi) = (hz_to_mel(low), hz_to_mel(high));
    let bins: Vec<usize> = (0..num_filters + 2)
        .map(|i| {
            let mel = mel_lo + (mel_hi - mel_lo) * i as f64 / (num_filters + 1) as f64;
            ((nfft + 1) as f64 * mel_to_hz(mel) / sr).floor() as usize
        })
        .collect();
    let n_bins = nfft / 2 + 1;
    (0..num_filters)
        .map(|m| {
            let (left, center, right) = (bins[m], bins[m + 1], bins[m + 2]);
            let mut filter = vec![0.0; n_bins];
            for (k, w) in filter.iter_mut().enumerate().take(n_bins) {
                if k >= left && k < center {
                    *w = (k - left) as f64 / (center - left) as f64;
                } else if k >= center && k < right {
                    *w = (right - k) as f64 / (right - center) as f64;
                }
            }
            filter
        })
        .collect()
}

/// Orthonormal DCT-II, first `count` coefficients.
fn dct_ortho(x: &[f64], count: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..count)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .sum();
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * scale
        })
        .collect()
}
