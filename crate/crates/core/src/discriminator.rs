//! Regression-based sequence discriminator.
//!
//! One LSTM trunk reads `[f_lmark(p_p), f_img(v_t)]` per frame. A dense head regresses a
//! landmark residual on top of `p_p` for every frame and a second head emits a realism
//! logit; the sequence score is the sigmoid of the mean logit.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::media::{layout, LandmarkSet, LANDMARK_DIM, NUM_LANDMARKS};
use crate::nn::{leaky_relu, sigmoid, Conv2d, Linear, LstmCell, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub channels: usize,
    pub feature_dim: usize,
    pub hidden: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { image_size: 128, channels: 128, feature_dim: 256, hidden: 256 }
    }
}

/// Both branches of one pass. `logits` is `(N, T)`, `score` is `(N,)`.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub regressed: Vec<Tensor>,
    pub logits: Tensor,
    pub score: Tensor,
}

impl DiscOutput {
    /// Mean logit per sequence, the argument of the score sigmoid.
    pub fn mean_logit(&self) -> Result<Tensor> {
        Ok(self.logits.mean(1)?)
    }
}

pub struct Discriminator {
    config: DiscriminatorConfig,
    img: [Conv2d; 4],
    img_fc: Linear,
    lmark_fc: Linear,
    lstm: LstmCell,
    regression_head: Linear,
    score_head: Linear,
}

impl Discriminator {
    pub fn new(config: &DiscriminatorConfig, store: &mut ParamStore) -> Result<Self> {
        let (s, c) = (config.image_size, config.channels);
        if s < 16 || s % 16 != 0 || c < 4 || c % 4 != 0 {
            return Err(Error::Config(format!("discriminator needs size % 16 == 0 and channels % 4 == 0, got {s}, {c}")));
        }
        let side = s / 16;
        Ok(Self {
            img: [
                Conv2d::new(store, "disc.img.conv1", 3, c / 4, 3, 2, 1)?,
                Conv2d::new(store, "disc.img.conv2", c / 4, c / 2, 3, 2, 1)?,
                Conv2d::new(store, "disc.img.conv3", c / 2, c, 3, 2, 1)?,
                Conv2d::new(store, "disc.img.conv4", c, c, 3, 2, 1)?,
            ],
            img_fc: Linear::new(store, "disc.img.fc", c * side * side, config.feature_dim)?,
            lmark_fc: Linear::new(store, "disc.lmark.fc", LANDMARK_DIM, config.feature_dim)?,
            lstm: LstmCell::new(store, "disc.lstm", 2 * config.feature_dim, config.hidden)?,
            regression_head: Linear::new(store, "disc.regression", config.hidden, LANDMARK_DIM)?,
            score_head: Linear::new(store, "disc.score", config.hidden, 1)?,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// `example_landmarks (N,136)`, `frames` T tensors `(N,3,S,S)`.
    pub fn forward(&self, example_landmarks: &Tensor, frames: &[Tensor]) -> Result<DiscOutput> {
        if frames.is_empty() {
            return Err(Error::Shape("discriminator needs at least one frame".into()));
        }
        let n = example_landmarks.dim(0)?;
        let cond = leaky_relu(&self.lmark_fc.forward(example_landmarks)?)?;
        let mut state = self.lstm.zero_state(n, example_landmarks)?;
        let mut regressed = Vec::with_capacity(frames.len());
        let mut logits = Vec::with_capacity(frames.len());
        for v in frames {
            let s = self.config.image_size;
            if v.dims() != [n, 3, s, s] {
                return Err(Error::Shape(format!("discriminator frame {:?}, expected ({n}, 3, {s}, {s})", v.dims())));
            }
            let mut x = v.clone();
            for conv in &self.img {
                x = leaky_relu(&conv.forward(&x)?)?;
            }
            let f_img = leaky_relu(&self.img_fc.forward(&x.flatten_from(1)?)?)?;
            state = self.lstm.step(&Tensor::cat(&[&cond, &f_img], 1)?, &state)?;
            regressed.push((example_landmarks + self.regression_head.forward(&state.h)?)?);
            logits.push(self.score_head.forward(&state.h)?);
        }
        let logits = Tensor::cat(&logits, 1)?;
        let score = sigmoid(&logits.mean(1)?)?;
        Ok(DiscOutput { regressed, logits, score })
    }
}

/// Per-point regression weights: `mouth_weight` on the 20 mouth points, 1 elsewhere.
pub fn lip_mask(mouth_weight: f64) -> Vec<f64> {
    (0..NUM_LANDMARKS).map(|i| if layout::MOUTH.contains(&i) { mouth_weight } else { 1.0 }).collect()
}

/// The mask expanded to both coordinates of every point.
pub fn lip_mask_tensor(mask: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
    if mask.len() != NUM_LANDMARKS {
        return Err(Error::Shape(format!("lip mask needs {NUM_LANDMARKS} weights, got {}", mask.len())));
    }
    let flat: Vec<f32> = mask.iter().flat_map(|&w| [w as f32, w as f32]).collect();
    Ok(Tensor::from_vec(flat, LANDMARK_DIM, device)?.to_dtype(dtype)?)
}

/// `sum_t sum_i M_i |p̂_ti - p_ti|^2 / T` on landmark sets.
pub fn disc_regression_loss(regressed: &[LandmarkSet], target: &[LandmarkSet], mask: &[f64]) -> Result<f64> {
    if regressed.len() != target.len() {
        return Err(Error::Shape(format!("{} regressed frames vs {} targets", regressed.len(), target.len())));
    }
    if mask.len() != NUM_LANDMARKS {
        return Err(Error::Shape(format!("lip mask needs {NUM_LANDMARKS} weights, got {}", mask.len())));
    }
    if regressed.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (r, t) in regressed.iter().zip(target) {
        for (i, w) in mask.iter().enumerate() {
            let dx = r.points[i][0] as f64 - t.points[i][0] as f64;
            let dy = r.points[i][1] as f64 - t.points[i][1] as f64;
            total += w * (dx * dx + dy * dy);
        }
    }
    Ok(total / regressed.len() as f64)
}

/// Tensor form of [`disc_regression_loss`], averaged over the batch as well.
pub fn disc_regression_loss_tensor(regressed: &[Tensor], target: &[Tensor], mask: &Tensor) -> Result<Tensor> {
    if regressed.len() != target.len() || regressed.is_empty() {
        return Err(Error::Shape(format!("{} regressed frames vs {} targets", regressed.len(), target.len())));
    }
    let mut terms = Vec::with_capacity(regressed.len());
    for (r, t) in regressed.iter().zip(target) {
        terms.push((r - t)?.sqr()?.broadcast_mul(mask)?.sum(1)?);
    }
    Ok(Tensor::stack(&terms, 0)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_offset() {
        let a = LandmarkSet::new([[0.0; 2]; NUM_LANDMARKS]);
        let mut b = a;
        b.points[5] = [3.0, 4.0];
        assert_eq!(disc_regression_loss(&[b], &[a], &lip_mask(1.0)).unwrap(), 25.0);
    }

    #[test]
    fn mask_marks_mouth() {
        let m = lip_mask(3.0);
        assert_eq!(m.iter().filter(|&&w| w == 3.0).count(), 20);
        assert_eq!(m[47], 1.0);
        assert_eq!(m[48], 3.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let a = LandmarkSet::new([[0.5; 2]; NUM_LANDMARKS]);
        assert!(disc_regression_loss(&[a, a], &[a], &lip_mask(1.0)).is_err());
    }
}
