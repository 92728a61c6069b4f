//! Audio transformation network: MFCC chunks plus the example shape's PCA coefficients
//! to a sequence of PCA coefficients.
//!
//! Per step, an LSTM consumes `[f_audio(a_t), f_lmark(h_p)]` and a dense decoder maps its
//! hidden state to `h_t`. The condition vector is re-injected at every step and there is
//! no output feedback, so the network is causal in the audio.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::landmark_space::{PcaBasis, PcaCoeffs};
use crate::media::{LandmarkSet, MfccChunk, MFCC_COEFFS, MFCC_STEPS};
use crate::nn::{leaky_relu, Conv2d, Linear, LstmCell, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtNetConfig {
    /// PCA components predicted per frame.
    pub k: usize,
    pub conv_channels: usize,
    pub audio_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
}

impl Default for AtNetConfig {
    fn default() -> Self {
        Self { k: crate::landmark_space::DEFAULT_COMPONENTS, conv_channels: 32, audio_dim: 256, cond_dim: 128, hidden: 256 }
    }
}

/// Fixed input/output scaling measured on the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtNetScaling {
    pub audio_mean: Vec<f32>,
    pub audio_std: Vec<f32>,
    pub cond_scale: Vec<f32>,
    pub target_scale: Vec<f32>,
}

impl AtNetScaling {
    pub fn identity(k: usize) -> Self {
        Self {
            audio_mean: vec![0.0; MFCC_COEFFS],
            audio_std: vec![1.0; MFCC_COEFFS],
            cond_scale: vec![1.0; k],
            target_scale: vec![1.0; k],
        }
    }

    /// Per-coefficient statistics of the audio and per-component spread of conditions
    /// and targets.
    pub fn fit(audio: &[&MfccChunk], conditions: &[PcaCoeffs], targets: &[PcaCoeffs], k: usize) -> Self {
        let mut sum = vec![0.0f64; MFCC_COEFFS];
        let mut sq = vec![0.0f64; MFCC_COEFFS];
        let mut n = 0.0;
        for chunk in audio {
            for s in 0..MFCC_STEPS {
                for (c, v) in chunk.row(s).iter().enumerate() {
                    sum[c] += *v as f64;
                    sq[c] += (*v as f64).powi(2);
                }
                n += 1.0;
            }
        }
        let n = f64::max(n, 1.0);
        let audio_mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let audio_std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| ((q / n - (s / n).powi(2)).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        let rms = |set: &[PcaCoeffs]| -> Vec<f32> {
            (0..k)
                .map(|j| {
                    let m = set.len().max(1) as f64;
                    let r = (set.iter().map(|h| h.values[j].powi(2)).sum::<f64>() / m).sqrt();
                    r.max(1e-4) as f32
                })
                .collect()
        };
        Self { audio_mean, audio_std, cond_scale: rms(conditions), target_scale: rms(targets) }
    }
}

pub struct AtNet {
    config: AtNetConfig,
    scaling: AtNetScaling,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    audio_fc: Linear,
    lmark_fc: Linear,
    lstm: LstmCell,
    decoder: Linear,
    dtype: DType,
    device: Device,
}

impl AtNet {
    pub fn new(config: &AtNetConfig, store: &mut ParamStore) -> Result<Self> {
        if config.k == 0 {
            return Err(Error::Config("AT-net needs k >= 1".into()));
        }
        let c = config.conv_channels;
        Ok(Self {
            conv1: Conv2d::new(store, "atnet.audio.conv1", 1, c, 3, 1, 1)?,
            conv2: Conv2d::new(store, "atnet.audio.conv2", c, c, 3, 2, 1)?,
            conv3: Conv2d::new(store, "atnet.audio.conv3", c, c, 3, 2, 1)?,
            audio_fc: Linear::new(store, "atnet.audio.fc", c * 7 * 3, config.audio_dim)?,
            lmark_fc: Linear::new(store, "atnet.lmark.fc", config.k, config.cond_dim)?,
            lstm: LstmCell::new(store, "atnet.lstm", config.audio_dim + config.cond_dim, config.hidden)?,
            decoder: Linear::new(store, "atnet.decoder", config.hidden, config.k)?,
            scaling: AtNetScaling::identity(config.k),
            config: config.clone(),
            dtype: store.dtype(),
            device: store.device().clone(),
        })
    }

    pub fn config(&self) -> &AtNetConfig {
        &self.config
    }

    pub fn scaling(&self) -> &AtNetScaling {
        &self.scaling
    }

    pub fn set_scaling(&mut self, scaling: AtNetScaling) -> Result<()> {
        if scaling.cond_scale.len() != self.config.k || scaling.target_scale.len() != self.config.k {
            return Err(Error::Shape("scaling does not match k".into()));
        }
        self.scaling = scaling;
        Ok(())
    }

    fn vector(&self, v: &[f32]) -> Result<Tensor> {
        Ok(Tensor::from_vec(v.to_vec(), v.len(), &self.device)?.to_dtype(self.dtype)?)
    }

    /// `(N, 28, 12)` chunks to `(N, audio_dim)`.
    fn encode_audio(&self, audio: &Tensor) -> Result<Tensor> {
        let n = audio.dim(0)?;
        let mean = self.vector(&self.scaling.audio_mean)?;
        let std = self.vector(&self.scaling.audio_std)?;
        let x = audio.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let x = x.reshape((n, 1, MFCC_STEPS, MFCC_COEFFS))?;
        let x = leaky_relu(&self.conv1.forward(&x)?)?;
        let x = leaky_relu(&self.conv2.forward(&x)?)?;
        let x = leaky_relu(&self.conv3.forward(&x)?)?;
        let x = x.flatten_from(1)?;
        leaky_relu(&self.audio_fc.forward(&x)?)
    }

    /// `audio` is `(B, T, 28, 12)`, `example` is `(B, k)`; returns `(B, T, k)`.
    pub fn forward(&self, audio: &Tensor, example: &Tensor) -> Result<Tensor> {
        let (b, t, s, c) = audio.dims4()?;
        if t == 0 {
            return Err(Error::Shape("AT-net needs at least one audio chunk".into()));
        }
        if (s, c) != (MFCC_STEPS, MFCC_COEFFS) {
            return Err(Error::Shape(format!("audio chunks must be {MFCC_STEPS}x{MFCC_COEFFS}, got {s}x{c}")));
        }
        if example.dims() != [b, self.config.k] {
            return Err(Error::Shape(format!("example coefficients must be ({b}, {}), got {:?}", self.config.k, example.dims())));
        }
        let feats = self.encode_audio(&audio.reshape((b * t, s, c))?)?.reshape((b, t, self.config.audio_dim))?;
        let cond_scale = self.vector(&self.scaling.cond_scale)?;
        let cond = leaky_relu(&self.lmark_fc.forward(&example.broadcast_div(&cond_scale)?)?)?;
        let target_scale = self.vector(&self.scaling.target_scale)?;
        let mut state = self.lstm.zero_state(b, audio)?;
        let mut outputs = Vec::with_capacity(t);
        for step in 0..t {
            let a_t = feats.narrow(1, step, 1)?.squeeze(1)?;
            let x = Tensor::cat(&[&a_t, &cond], 1)?;
            state = self.lstm.step(&x, &state)?;
            outputs.push(self.decoder.forward(&state.h)?.broadcast_mul(&target_scale)?);
        }
        Ok(Tensor::stack(&outputs, 1)?)
    }

    /// Coefficient sequence for one audio track and example.
    pub fn predict_coeffs(&self, audio: &[MfccChunk], example: &PcaCoeffs) -> Result<Vec<PcaCoeffs>> {
        if audio.is_empty() {
            return Err(Error::Shape("AT-net needs at least one audio chunk".into()));
        }
        if example.len() != self.config.k {
            return Err(Error::Shape(format!("example has {} coefficients, AT-net expects {}", example.len(), self.config.k)));
        }
        let a = audio_tensor(&[audio], self.dtype, &self.device)?;
        let e = coeffs_tensor(&[std::slice::from_ref(example)], self.dtype, &self.device)?.squeeze(1)?;
        let out = self.forward(&a, &e)?.squeeze(0)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(out.into_iter().map(|values| PcaCoeffs { values }).collect())
    }

    /// Full landmark prediction: project the example, run the network on the audio,
    /// reconstruct each step with the boost weights and re-add the example's identity.
    pub fn predict_landmarks(&self, audio: &[MfccChunk], example: &LandmarkSet, basis: &PcaBasis) -> Result<Vec<LandmarkSet>> {
        if basis.k() != self.config.k {
            return Err(Error::Config(format!("basis has {} components, AT-net was built for {}", basis.k(), self.config.k)));
        }
        let h_p = basis.project(example);
        self.predict_coeffs(audio, &h_p)?
            .iter()
            .map(|h| Ok(basis.restore_identity(&basis.reconstruct(h)?, example)))
            .collect()
    }
}

/// `(B, T, 28, 12)` tensor from equally long chunk sequences.
pub fn audio_tensor(batch: &[&[MfccChunk]], dtype: DType, device: &Device) -> Result<Tensor> {
    let t = batch.first().map(|s| s.len()).unwrap_or(0);
    if batch.iter().any(|s| s.len() != t) {
        return Err(Error::Shape("audio sequences in a batch differ in length".into()));
    }
    let data: Vec<f32> = batch.iter().flat_map(|s| s.iter().flat_map(|c| c.as_slice().iter().copied())).collect();
    Ok(Tensor::from_vec(data, (batch.len(), t, MFCC_STEPS, MFCC_COEFFS), device)?.to_dtype(dtype)?)
}

/// `(B, T, k)` tensor from equally long coefficient sequences.
pub fn coeffs_tensor(batch: &[&[PcaCoeffs]], dtype: DType, device: &Device) -> Result<Tensor> {
    let t = batch.first().map(|s| s.len()).unwrap_or(0);
    let k = batch.first().and_then(|s| s.first()).map(|h| h.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(batch.len() * t * k);
    for seq in batch {
        if seq.len() != t {
            return Err(Error::Shape("coefficient sequences in a batch differ in length".into()));
        }
        for h in seq.iter() {
            if h.len() != k {
                return Err(Error::Shape("coefficient vectors differ in length".into()));
            }
            data.extend(h.values.iter().map(|&v| v as f32));
        }
    }
    Ok(Tensor::from_vec(data, (batch.len(), t, k), device)?.to_dtype(dtype)?)
}

/// Mean squared error over all coefficients and steps.
pub fn atnet_loss(predicted: &Tensor, target: &Tensor) -> Result<Tensor> {
    if predicted.dims() != target.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", predicted.dims(), target.dims())));
    }
    Ok((predicted - target)?.sqr()?.mean_all()?)
}

/// [`atnet_loss`] on plain coefficient sequences.
pub fn atnet_loss_values(predicted: &[PcaCoeffs], target: &[PcaCoeffs]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::Shape(format!("{} predicted steps vs {} target steps", predicted.len(), target.len())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in predicted.iter().zip(target) {
        if p.len() != t.len() {
            return Err(Error::Shape("coefficient vectors differ in length".into()));
        }
        sum += p.values.iter().zip(&t.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        n += p.len();
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
