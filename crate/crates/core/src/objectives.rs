//! Generator and discriminator objectives.
//!
//! The pixel loss weights every pixel's L1 residual by `(detach(alpha) + beta)` and is
//! averaged over frames, pixels and channels. Adversarial terms are written with softplus
//! on the mean sequence logit, which equals `-log s` / `-log(1 - s)` without the overflow.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::discriminator::{disc_regression_loss_tensor, DiscOutput};
use crate::media::Frame;
use crate::nn::softplus;
use crate::vgnet::AttentionMap;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Base pixel weight added to the detached attention.
    pub beta: f64,
    /// Weight of the pixel loss in the generator objective.
    pub lambda: f64,
    /// Regression weight of the mouth points; other points weigh 1.
    pub mouth_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 0.5, lambda: 10.0, mouth_weight: 3.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.lambda >= 0.0 && self.mouth_weight > 0.0) {
            return Err(Error::Config("beta and lambda must be >= 0 and the mouth weight > 0".into()));
        }
        Ok(())
    }
}

fn check_pairs(generated: &[Tensor], target: &[Tensor]) -> Result<()> {
    if generated.len() != target.len() || generated.is_empty() {
        return Err(Error::Shape(format!("{} generated frames vs {} targets", generated.len(), target.len())));
    }
    for (g, t) in generated.iter().zip(target) {
        if g.dims() != t.dims() {
            return Err(Error::Shape(format!("generated {:?} vs target {:?}", g.dims(), t.dims())));
        }
    }
    Ok(())
}

/// Attention-weighted L1. `attentions` are `(N,1,H,W)` and enter only as constants.
pub fn pixel_loss(generated: &[Tensor], target: &[Tensor], attentions: &[Tensor], beta: f64) -> Result<Tensor> {
    check_pairs(generated, target)?;
    if attentions.len() != generated.len() {
        return Err(Error::Shape(format!("{} attention maps for {} frames", attentions.len(), generated.len())));
    }
    let mut terms = Vec::with_capacity(generated.len());
    for ((g, t), a) in generated.iter().zip(target).zip(attentions) {
        let (n, _, h, w) = g.dims4()?;
        if a.dims() != [n, 1, h, w] {
            return Err(Error::Shape(format!("attention {:?} does not match frame {:?}", a.dims(), g.dims())));
        }
        let weight = (a.detach() + beta)?;
        terms.push((t - g)?.abs()?.broadcast_mul(&weight)?.flatten_all()?);
    }
    Ok(Tensor::cat(&terms, 0)?.mean_all()?)
}

/// Unweighted L1 averaged the same way as [`pixel_loss`].
pub fn l1_loss(generated: &[Tensor], target: &[Tensor]) -> Result<Tensor> {
    check_pairs(generated, target)?;
    let terms: Vec<Tensor> = generated.iter().zip(target).map(|(g, t)| (t - g)?.abs()?.flatten_all()).collect::<candle_core::Result<_>>()?;
    Ok(Tensor::cat(&terms, 0)?.mean_all()?)
}

/// [`pixel_loss`] on frames, for a single sequence.
pub fn pixel_loss_frames(generated: &[Frame], target: &[Frame], attentions: &[AttentionMap], beta: f64) -> Result<f64> {
    if generated.len() != target.len() || generated.len() != attentions.len() {
        return Err(Error::Shape("pixel loss inputs differ in length".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((g, t), a) in generated.iter().zip(target).zip(attentions) {
        if !g.same_shape(t) || a.height != g.height() || a.width != g.width() {
            return Err(Error::Shape("pixel loss inputs differ in size".into()));
        }
        for (i, (x, y)) in g.as_slice().iter().zip(t.as_slice()).enumerate() {
            sum += (*y as f64 - *x as f64).abs() * (a.values[i / 3] as f64 + beta);
        }
        count += g.as_slice().len();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Loss components of one alternation step.
#[derive(Debug, Clone)]
pub struct GanLosses {
    /// `-log s_real - log(1 - s_fake)`, batch mean.
    pub adv_d: Tensor,
    /// Non-saturating `-log s_fake`, batch mean.
    pub adv_g: Tensor,
    pub reg_real: Option<Tensor>,
    pub reg_fake: Tensor,
}

impl GanLosses {
    /// Adversarial terms plus both regression terms.
    pub fn discriminator_total(&self) -> Result<Tensor> {
        let reg_real = self.reg_real.as_ref().ok_or_else(|| Error::Shape("discriminator loss needs the real pass".into()))?;
        Ok(((&self.adv_d + &self.reg_fake)? + reg_real)?)
    }

    /// Non-saturating adversarial term plus the regression loss on the fake pass.
    pub fn generator_adv(&self) -> Result<Tensor> {
        Ok((&self.adv_g + &self.reg_fake)?)
    }
}

/// Assembles the adversarial and regression terms. `real` may be omitted for the
/// generator step; `targets` are the ground-truth landmarks `(N,136)` per frame.
pub fn gan_losses(real: Option<&DiscOutput>, fake: &DiscOutput, targets: &[Tensor], mask: &Tensor) -> Result<GanLosses> {
    let z_fake = fake.mean_logit()?;
    let reg_fake = disc_regression_loss_tensor(&fake.regressed, targets, mask)?;
    let adv_g = softplus(&z_fake.neg()?)?.mean_all()?;
    let (adv_d, reg_real) = match real {
        Some(real) => {
            let z_real = real.mean_logit()?;
            let adv = (softplus(&z_real.neg()?)?.mean_all()? + softplus(&z_fake)?.mean_all()?)?;
            (adv, Some(disc_regression_loss_tensor(&real.regressed, targets, mask)?))
        }
        None => (softplus(&z_fake)?.mean_all()?, None),
    };
    Ok(GanLosses { adv_d, adv_g, reg_real, reg_fake })
}

/// `generator_adv + lambda * pixel`.
pub fn full_objective(pixel: &Tensor, generator_adv: &Tensor, config: &LossConfig) -> Result<Tensor> {
    Ok((generator_adv + (pixel * config.lambda)?)?)
}

/// Scalar form of [`full_objective`].
pub fn full_objective_value(pixel: f64, generator_adv: f64, config: &LossConfig) -> f64 {
    generator_adv + config.lambda * pixel
}
