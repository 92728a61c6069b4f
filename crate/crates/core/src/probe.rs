//! Landmark probe: a small regression CNN that reads landmarks off frames.
//!
//! Generated videos carry no landmarks of their own, so LMD on generated frames compares
//! probe readings of the generated frames against probe readings of the real ones.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::media::{Frame, LandmarkSet, LANDMARK_DIM};
use crate::nn::{frames_to_tensor, leaky_relu, Conv2d, Linear, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub image_size: usize,
    pub channels: usize,
    pub hidden: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { image_size: 128, channels: 32, hidden: 256 }
    }
}

pub struct LandmarkProbe {
    config: ProbeConfig,
    convs: [Conv2d; 4],
    fc: Linear,
    out: Linear,
    mean: Vec<f32>,
    dtype: DType,
    device: Device,
}

impl LandmarkProbe {
    pub fn new(config: &ProbeConfig, store: &mut ParamStore) -> Result<Self> {
        let (s, c) = (config.image_size, config.channels);
        if s < 16 || s % 16 != 0 || c < 4 || c % 4 != 0 {
            return Err(Error::Config(format!("probe needs size % 16 == 0 and channels % 4 == 0, got {s}, {c}")));
        }
        let side = s / 16;
        Ok(Self {
            convs: [
                Conv2d::new(store, "probe.conv1", 3, c / 4, 3, 2, 1)?,
                Conv2d::new(store, "probe.conv2", c / 4, c / 2, 3, 2, 1)?,
                Conv2d::new(store, "probe.conv3", c / 2, c, 3, 2, 1)?,
                Conv2d::new(store, "probe.conv4", c, c, 3, 2, 1)?,
            ],
            fc: Linear::new(store, "probe.fc", c * side * side, config.hidden)?,
            out: Linear::new(store, "probe.out", config.hidden, LANDMARK_DIM)?,
            mean: vec![0.5; LANDMARK_DIM],
            config: config.clone(),
            dtype: store.dtype(),
            device: store.device().clone(),
        })
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    /// Offset added to every prediction, normally the training-set mean shape.
    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn set_mean(&mut self, mean: Vec<f32>) -> Result<()> {
        if mean.len() != LANDMARK_DIM {
            return Err(Error::Shape(format!("probe mean needs {LANDMARK_DIM} values, got {}", mean.len())));
        }
        self.mean = mean;
        Ok(())
    }

    /// `(N,3,S,S)` frames to `(N,136)` landmarks.
    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        let mut x = frames.clone();
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?)?;
        }
        let x = leaky_relu(&self.fc.forward(&x.flatten_from(1)?)?)?;
        let mean = Tensor::from_vec(self.mean.clone(), LANDMARK_DIM, &self.device)?.to_dtype(self.dtype)?;
        Ok(self.out.forward(&x)?.broadcast_add(&mean)?)
    }

    pub fn read(&self, frames: &[Frame]) -> Result<Vec<LandmarkSet>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(16) {
            let refs: Vec<&Frame> = chunk.iter().collect();
            let t = self.forward(&frames_to_tensor(&refs, self.dtype, &self.device)?)?;
            for row in t.to_dtype(DType::F32)?.to_vec2::<f32>()? {
                out.push(LandmarkSet::from_flat(&row)?);
            }
        }
        Ok(out)
    }
}
