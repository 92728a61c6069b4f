//! Checks shared by the integration tests and the acceptance target. Each one panics on a
//! violation and returns the worst discrepancy it saw.

use candle_core::{DType, Device, Tensor};
use tempfile::tempdir;

use super::{rel_close, Lcg};
use talkface_core::discriminator::{disc_regression_loss, lip_mask, lip_mask_tensor, DiscOutput, Discriminator, DiscriminatorConfig};
use talkface_core::landmark_space::{fit_basis, PcaBasis, PcaCoeffs};
use talkface_core::media::dataset::{Dataset, Split};
use talkface_core::media::synth::{generate_synthetic_dataset, SyntheticConfig};
use talkface_core::media::{Frame, LandmarkSet, LANDMARK_DIM, NUM_LANDMARKS};
use talkface_core::metrics::{lmd, psnr, ssim, LmdOptions};
use talkface_core::nn::ParamStore;
use talkface_core::objectives::{full_objective, gan_losses, pixel_loss, LossConfig};
use talkface_core::trainer::{GanTrainer, TrainConfig, VgBatch};
use talkface_core::vgnet::{composite, composite_tensor, AttentionMap, MotionFrame, VgNet, VgNetConfig};

pub const INSTANCES: u64 = 100;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

pub fn random_frame(rng: &mut Lcg, h: usize, w: usize) -> Frame {
    Frame::new(h, w, (0..h * w * 3).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
}

pub fn random_shape(rng: &mut Lcg) -> LandmarkSet {
    let flat: Vec<f32> = (0..LANDMARK_DIM).map(|_| rng.uniform(0.1, 0.9) as f32).collect();
    LandmarkSet::from_flat(&flat).unwrap()
}

fn pairs(shape: &LandmarkSet) -> Vec<[f64; 2]> {
    shape.points.iter().map(|p| [p[0] as f64, p[1] as f64]).collect()
}

/// Channel-last f64 buffer to an `(1,C,H,W)` tensor.
fn chw_tensor(values: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    let mut chw = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                chw[k * h * w + y * w + x] = values[(y * w + x) * c + k];
            }
        }
    }
    Tensor::from_vec(chw, (1, c, h, w), &Device::Cpu).unwrap()
}

fn tensor_hwc(t: &Tensor) -> Vec<f64> {
    let (_, c, h, w) = t.dims4().unwrap();
    let chw: Vec<f64> = t.flatten_all().unwrap().to_vec1().unwrap();
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                out[(y * w + x) * c + k] = chw[k * h * w + y * w + x];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------------------
// Equations against the plain-vector references.

pub fn compositing() -> f64 {
    let mut rng = Lcg::new(1);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let (h, w) = (1 + (i % 5) as usize, 1 + (i % 7) as usize);
        let alpha: Vec<f64> = (0..h * w).map(|_| rng.uniform(0.0, 1.0)).collect();
        let motion: Vec<f64> = (0..h * w * 3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let base: Vec<f64> = (0..h * w * 3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let want = super::composite(&alpha, &motion, &base);

        let got = composite_tensor(&chw_tensor(&alpha, 1, h, w), &chw_tensor(&motion, 3, h, w), &chw_tensor(&base, 3, h, w)).unwrap();
        for (g, e) in tensor_hwc(&got).iter().zip(&want) {
            assert!(rel_close(*g, *e, 1e-6), "tensor composite {g} vs {e}");
            worst = worst.max(rel_err(*g, *e));
        }

        let frame = composite(
            &AttentionMap { height: h, width: w, values: alpha.iter().map(|&v| v as f32).collect() },
            &MotionFrame { height: h, width: w, values: motion.iter().map(|&v| v as f32).collect() },
            &Frame::new(h, w, base.iter().map(|&v| v as f32).collect()).unwrap(),
        )
        .unwrap();
        let narrow = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
        let want32 = super::composite(&narrow(&alpha), &narrow(&motion), &narrow(&base));
        for (g, e) in frame.as_slice().iter().zip(&want32) {
            assert!((*g as f64 - e).abs() <= 1e-6 * e.abs().max(1.0), "frame composite {g} vs {e}");
        }
    }
    worst
}

pub fn pixel_weighting() -> f64 {
    let mut rng = Lcg::new(2);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let (t, h, w) = (1 + (i % 3) as usize, 2 + (i % 4) as usize, 1 + (i % 5) as usize);
        let beta = rng.uniform(0.0, 1.0);
        let gen: Vec<Vec<f64>> = (0..t).map(|_| (0..h * w * 3).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let tgt: Vec<Vec<f64>> = (0..t).map(|_| (0..h * w * 3).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let alpha: Vec<Vec<f64>> = (0..t).map(|_| (0..h * w).map(|_| rng.uniform(0.0, 1.0)).collect()).collect();
        let want = super::pixel_loss(&gen, &tgt, &alpha, beta);
        let to_t = |v: &Vec<Vec<f64>>, c| v.iter().map(|f| chw_tensor(f, c, h, w)).collect::<Vec<_>>();
        let got = pixel_loss(&to_t(&gen, 3), &to_t(&tgt, 3), &to_t(&alpha, 1), beta).unwrap().to_scalar::<f64>().unwrap();
        assert!(rel_close(got, want, 1e-6), "pixel loss {got} vs {want}");
        worst = worst.max(rel_err(got, want));
    }
    worst
}

pub fn landmark_regression() -> f64 {
    let mut rng = Lcg::new(3);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let t = 1 + (i % 6) as usize;
        let mask = lip_mask(rng.uniform(0.5, 5.0));
        let regressed: Vec<LandmarkSet> = (0..t).map(|_| random_shape(&mut rng)).collect();
        let target: Vec<LandmarkSet> = (0..t).map(|_| random_shape(&mut rng)).collect();
        let want = super::regression_loss(
            &regressed.iter().map(pairs).collect::<Vec<_>>(),
            &target.iter().map(pairs).collect::<Vec<_>>(),
            &mask,
        );
        let got = disc_regression_loss(&regressed, &target, &mask).unwrap();
        assert!(rel_close(got, want, 1e-6), "regression {got} vs {want}");
        worst = worst.max(rel_err(got, want));
    }
    worst
}

pub fn generator_objective() -> f64 {
    let dev = Device::Cpu;
    let mut rng = Lcg::new(4);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let t = 1 + (i % 4) as usize;
        let (h, w) = (2, 3);
        let config = LossConfig { beta: rng.uniform(0.0, 1.0), lambda: rng.uniform(0.0, 20.0), mouth_weight: rng.uniform(1.0, 4.0) };
        let logits: Vec<f64> = (0..t).map(|_| rng.uniform(-4.0, 4.0)).collect();
        let regressed: Vec<LandmarkSet> = (0..t).map(|_| random_shape(&mut rng)).collect();
        let target: Vec<LandmarkSet> = (0..t).map(|_| random_shape(&mut rng)).collect();
        let gen: Vec<Vec<f64>> = (0..t).map(|_| (0..h * w * 3).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let tgt: Vec<Vec<f64>> = (0..t).map(|_| (0..h * w * 3).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let alpha: Vec<Vec<f64>> = (0..t).map(|_| (0..h * w).map(|_| rng.uniform(0.0, 1.0)).collect()).collect();

        let mean_logit = logits.iter().sum::<f64>() / t as f64;
        let s_fake = 1.0 / (1.0 + (-mean_logit).exp());
        let mask = lip_mask(config.mouth_weight);
        let reg = super::regression_loss(
            &regressed.iter().map(pairs).collect::<Vec<_>>(),
            &target.iter().map(pairs).collect::<Vec<_>>(),
            &mask,
        );
        let pix = super::pixel_loss(&gen, &tgt, &alpha, config.beta);
        let want = super::generator_objective(s_fake, reg, pix, config.lambda);

        let shape_t = |s: &LandmarkSet| Tensor::from_vec(s.flatten_f64(), (1, LANDMARK_DIM), &dev).unwrap();
        let fake = DiscOutput {
            regressed: regressed.iter().map(shape_t).collect(),
            logits: Tensor::from_vec(logits.clone(), (1, t), &dev).unwrap(),
            score: Tensor::new(&[s_fake], &dev).unwrap(),
        };
        let targets: Vec<Tensor> = target.iter().map(shape_t).collect();
        let mask_t = lip_mask_tensor(&mask, DType::F64, &dev).unwrap();
        let adv = gan_losses(None, &fake, &targets, &mask_t).unwrap().generator_adv().unwrap();
        let to_t = |v: &Vec<Vec<f64>>, c| v.iter().map(|f| chw_tensor(f, c, h, w)).collect::<Vec<_>>();
        let pix_t = pixel_loss(&to_t(&gen, 3), &to_t(&tgt, 3), &to_t(&alpha, 1), config.beta).unwrap();
        let got = full_objective(&pix_t, &adv, &config).unwrap().to_scalar::<f64>().unwrap();
        // Landmarks pass through f32 storage on both sides, so only summation order differs.
        assert!(rel_close(got, want, 1e-6), "objective {got} vs {want}");
        worst = worst.max(rel_err(got, want));
    }
    worst
}

/// Orthonormal rows by Gram-Schmidt on random vectors.
fn random_orthonormal(rng: &mut Lcg, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        rows.push(v.iter().map(|a| a / norm).collect());
    }
    rows
}

pub fn reconstruction() -> f64 {
    let mut rng = Lcg::new(5);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let k = 1 + (i % 20) as usize;
        let mean: Vec<f64> = (0..LANDMARK_DIM).map(|_| rng.uniform(0.2, 0.8)).collect();
        let components = random_orthonormal(&mut rng, k, LANDMARK_DIM);
        let eigenvalues: Vec<f64> = (0..k).map(|j| 1.0 / (j + 1) as f64).collect();
        let boost: Vec<f64> = (0..k).map(|_| rng.uniform(0.5, 2.0)).collect();
        let h: Vec<f64> = (0..k).map(|_| rng.uniform(-0.3, 0.3)).collect();
        let want = super::reconstruct(&mean, &components, &boost, &h);
        let basis = PcaBasis::from_parts(mean, components, eigenvalues, boost).unwrap();
        for (g, e) in basis.reconstruct_flat(&h).iter().zip(&want) {
            assert!(rel_close(*g, *e, 1e-9), "reconstruct {g} vs {e}");
            worst = worst.max(rel_err(*g, *e));
        }
        let shape = basis.reconstruct(&PcaCoeffs { values: h.clone() }).unwrap();
        for (g, e) in shape.flatten_f64().iter().zip(&want) {
            assert!((g - e).abs() <= 1e-6 * e.abs().max(1.0));
        }
    }
    worst
}

// ---------------------------------------------------------------------------------------
// PCA.

pub fn sample_shapes(rng: &mut Lcg, n: usize) -> Vec<LandmarkSet> {
    // A few latent directions plus small isotropic noise so the spectrum is well separated.
    let dirs: Vec<Vec<f64>> = (0..4).map(|_| (0..LANDMARK_DIM).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
    let scales = [0.05, 0.03, 0.015, 0.008];
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let flat: Vec<f32> = (0..LANDMARK_DIM)
                .map(|d| {
                    let v = 0.5 + (0..4).map(|j| scales[j] * z[j] * dirs[j][d]).sum::<f64>() + rng.uniform(-1e-3, 1e-3);
                    v as f32
                })
                .collect();
            LandmarkSet::from_flat(&flat).unwrap()
        })
        .collect()
}

/// Worst eigenvalue relative error against Jacobi.
pub fn pca_against_jacobi() -> f64 {
    let mut rng = Lcg::new(6);
    let shapes = sample_shapes(&mut rng, 300);
    let k = 6;
    let basis = fit_basis(&shapes, k).unwrap();
    let rows: Vec<Vec<f64>> = shapes.iter().map(|s| s.flatten_f64()).collect();
    let (mean, cov) = super::covariance(&rows);
    let (values, vectors) = super::jacobi_eigen(&cov);

    for (g, e) in basis.mean().iter().zip(&mean) {
        assert!((g - e).abs() < 1e-9);
    }
    let mut worst = 0.0f64;
    for j in 0..k {
        assert!(rel_close(basis.eigenvalues()[j], values[j], 1e-6), "eigenvalue {j}: {} vs {}", basis.eigenvalues()[j], values[j]);
        worst = worst.max(rel_err(basis.eigenvalues()[j], values[j]));
        // Eigenvectors agree up to sign.
        let dot: f64 = basis.components()[j].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-6, "component {j} overlap {dot}");
    }
    assert!(basis.orthonormality_error() < 1e-9);
    worst
}

pub struct PcaProperties {
    pub orthonormality: f64,
    pub round_trip: f64,
    pub truncation: f64,
}

pub fn pca_properties() -> PcaProperties {
    let mut rng = Lcg::new(7);
    let shapes = sample_shapes(&mut rng, 300);
    let rows: Vec<Vec<f64>> = shapes.iter().map(|s| s.flatten_f64()).collect();
    let full = fit_basis(&shapes, LANDMARK_DIM).unwrap();
    let mut out = PcaProperties { orthonormality: full.orthonormality_error(), round_trip: 0.0, truncation: 0.0 };
    for x in &rows {
        let back = full.reconstruct_flat(&full.project_flat(x));
        out.round_trip = out.round_trip.max(back.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    assert!(out.round_trip <= 1e-6, "full-rank round trip off by {}", out.round_trip);
    // Mean squared residual after keeping k components equals the discarded eigenvalue mass.
    for k in [1, 3, 4, 10, 40] {
        let basis = fit_basis(&shapes, k).unwrap();
        out.orthonormality = out.orthonormality.max(basis.orthonormality_error());
        let residual = rows
            .iter()
            .map(|x| basis.reconstruct_flat(&basis.project_flat(x)).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / rows.len() as f64;
        let discarded: f64 = full.eigenvalues()[k..].iter().sum();
        assert!(rel_close(residual, discarded, 1e-6), "k {k}: residual {residual} vs discarded {discarded}");
        out.truncation = out.truncation.max(rel_err(residual, discarded));
    }
    assert!(out.orthonormality <= 1e-6, "orthonormality {}", out.orthonormality);
    out
}

// ---------------------------------------------------------------------------------------
// Metrics.

pub struct MetricFidelity {
    pub ssim: f64,
    pub psnr: f64,
    pub translation: f64,
    pub raw_offset: f64,
}

pub fn metric_fidelity() -> MetricFidelity {
    let mut rng = Lcg::new(9);
    let mut out = MetricFidelity { ssim: 0.0, psnr: 0.0, translation: 0.0, raw_offset: 0.0 };
    for (h, w) in [(11, 11), (16, 16), (24, 17), (32, 32)] {
        let a = random_frame(&mut rng, h, w);
        // A correlated second frame so SSIM is far from both 0 and 1.
        let noise = random_frame(&mut rng, h, w);
        let b = Frame::new(h, w, a.as_slice().iter().zip(noise.as_slice()).map(|(x, n)| (0.8 * x + 0.2 * n).clamp(-1.0, 1.0)).collect()).unwrap();
        let (got, want) = (ssim(&a, &b).unwrap(), super::ssim(a.as_slice(), b.as_slice(), h, w));
        assert!((got - want).abs() < 1e-6, "ssim {h}x{w}: {got} vs {want}");
        out.ssim = out.ssim.max((got - want).abs());
        let (got, want) = (psnr(&a, &b).unwrap(), super::psnr(a.as_slice(), b.as_slice()));
        assert!((got - want).abs() < 1e-6, "psnr {h}x{w}: {got} vs {want}");
        out.psnr = out.psnr.max((got - want).abs());
    }
    let a = random_frame(&mut rng, 16, 16);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    assert!(psnr(&a, &a).unwrap().is_infinite());

    // Coordinates on a 2^-12 grid, so the shifted values below are exact in f32.
    let mut rng = Lcg::new(10);
    let grid = |rng: &mut Lcg| {
        let flat: Vec<f32> = (0..LANDMARK_DIM).map(|_| (rng.uniform(0.1, 0.8) * 4096.0).round() as f32 / 4096.0).collect();
        LandmarkSet::from_flat(&flat).unwrap()
    };
    let reference: Vec<LandmarkSet> = (0..5).map(|_| grid(&mut rng)).collect();
    let predicted: Vec<LandmarkSet> = (0..5).map(|_| grid(&mut rng)).collect();
    let aligned = LmdOptions::default();
    let base = lmd(&predicted, &reference, &aligned).unwrap();
    let shifted: Vec<LandmarkSet> = predicted
        .iter()
        .map(|s| {
            let mut p = s.points;
            p.iter_mut().for_each(|q| {
                q[0] += 0.0625;
                q[1] -= 0.03125;
            });
            LandmarkSet::new(p)
        })
        .collect();
    let moved = lmd(&shifted, &reference, &aligned).unwrap();
    out.translation = (base - moved).abs();
    assert!(out.translation < 1e-9, "{base} vs {moved}");
    assert!(base > 0.0);

    // Every point moved by (3, 4) canonical pixels.
    let mut rng = Lcg::new(11);
    let reference = vec![random_shape(&mut rng)];
    let mut p = reference[0].points;
    for q in p.iter_mut().take(NUM_LANDMARKS) {
        q[0] += 3.0 / 128.0;
        q[1] += 4.0 / 128.0;
    }
    let raw = LmdOptions { align_centroid: false, ..LmdOptions::default() };
    out.raw_offset = lmd(&[LandmarkSet::new(p)], &reference, &raw).unwrap();
    assert!((out.raw_offset - 5.0).abs() < 1e-5, "raw offset distance {}", out.raw_offset);
    let centered = lmd(&[LandmarkSet::new(p)], &reference, &aligned).unwrap();
    assert!(centered < 1e-5);
    out
}

// ---------------------------------------------------------------------------------------
// Gradient flow on a 16x16 toy generator in f64.

const TOY_SIZE: usize = 16;
const TOY_T: usize = 2;

struct Toy {
    store: ParamStore,
    net: VgNet,
    disc: Discriminator,
    landmarks: Vec<Tensor>,
    targets: Vec<Tensor>,
    example_image: Tensor,
    example_landmarks: Tensor,
    config: LossConfig,
}

fn toy() -> Toy {
    let dev = Device::Cpu;
    let mut store = ParamStore::new(5, 0.2, DType::F64);
    let config = VgNetConfig { image_size: TOY_SIZE, channels: 4, attention_bias: 0.5, ..VgNetConfig::default() };
    let net = VgNet::new(&config, &mut store).unwrap();
    let mut disc_store = ParamStore::new(6, 0.2, DType::F64);
    let disc = Discriminator::new(&DiscriminatorConfig { image_size: TOY_SIZE, channels: 4, feature_dim: 6, hidden: 5 }, &mut disc_store).unwrap();
    let mut rng = Lcg::new(12);
    let mut uniform = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.uniform(lo, hi)).collect::<Vec<f64>>();
    let frame = |v: Vec<f64>| Tensor::from_vec(v, (1, 3, TOY_SIZE, TOY_SIZE), &dev).unwrap();
    let shape = |v: Vec<f64>| Tensor::from_vec(v, (1, LANDMARK_DIM), &dev).unwrap();
    let landmarks = (0..TOY_T).map(|_| shape(uniform(LANDMARK_DIM, 0.2, 0.8))).collect();
    let targets = (0..TOY_T).map(|_| frame(uniform(3 * TOY_SIZE * TOY_SIZE, -1.0, 1.0))).collect();
    let example_image = frame(uniform(3 * TOY_SIZE * TOY_SIZE, -1.0, 1.0));
    let example_landmarks = shape(uniform(LANDMARK_DIM, 0.2, 0.8));
    Toy {
        store,
        net,
        disc,
        landmarks,
        targets,
        example_image,
        example_landmarks,
        config: LossConfig { beta: 0.5, lambda: 10.0, mouth_weight: 3.0 },
    }
}

impl Toy {
    /// Generator objective. `weights` pins the pixel weighting to given attention maps, which
    /// is what a detached weighting means to a finite-difference probe.
    fn objective(&self, weights: Option<&[Tensor]>) -> Tensor {
        let out = self.net.forward(&self.landmarks, &self.example_image, &self.example_landmarks).unwrap();
        let weights = weights.unwrap_or(out.attentions.as_ref().unwrap());
        let pix = pixel_loss(&out.frames, &self.targets, weights, self.config.beta).unwrap();
        let fake = self.disc.forward(&self.example_landmarks, &out.frames).unwrap();
        let mask = lip_mask_tensor(&lip_mask(self.config.mouth_weight), DType::F64, &Device::Cpu).unwrap();
        let adv = gan_losses(None, &fake, &self.landmarks, &mask).unwrap().generator_adv().unwrap();
        full_objective(&pix, &adv, &self.config).unwrap()
    }

    fn attention_params(&self) -> Vec<String> {
        self.store.names().filter(|n| n.starts_with("vgnet.attention")).cloned().collect()
    }
}

fn grad_norm(grads: &candle_core::backprop::GradStore, store: &ParamStore, name: &str) -> f64 {
    match grads.get(store.get(name).unwrap().as_tensor()) {
        Some(g) => g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(),
        None => 0.0,
    }
}

/// Returns the summed gradient magnitude on the attention head through (weighting, compositing).
pub fn detachment() -> (f64, f64) {
    let toy = toy();
    let out = toy.net.forward(&toy.landmarks, &toy.example_image, &toy.example_landmarks).unwrap();
    let attentions = out.attentions.as_ref().unwrap();
    let names = toy.attention_params();
    assert!(!names.is_empty());

    // Weighting path only: frames rebuilt from a detached attention, weights from the live one.
    let frames: Vec<Tensor> = attentions
        .iter()
        .zip(&out.motions)
        .map(|(a, m)| composite_tensor(&a.detach(), m, &toy.example_image).unwrap())
        .collect();
    let weighted = pixel_loss(&frames, &toy.targets, attentions, toy.config.beta).unwrap();
    let grads = weighted.backward().unwrap();
    let mut through_weights = 0.0;
    for name in &names {
        let g = grad_norm(&grads, &toy.store, name);
        assert_eq!(g, 0.0, "{name} receives gradient through the weights");
        through_weights += g;
    }

    // Compositing path: the same loss on the real frames moves the attention head.
    let composed = pixel_loss(&out.frames, &toy.targets, attentions, toy.config.beta).unwrap();
    let grads = composed.backward().unwrap();
    let through_compositing: f64 = names.iter().map(|n| grad_norm(&grads, &toy.store, n)).sum();
    assert!(through_compositing > 0.0, "attention head gets no gradient through compositing");
    (through_weights, through_compositing)
}

/// Returns (entries checked, worst relative error).
pub fn finite_differences() -> (usize, f64) {
    let toy = toy();
    let grads = toy.objective(None).backward().unwrap();
    let out = toy.net.forward(&toy.landmarks, &toy.example_image, &toy.example_landmarks).unwrap();
    let pinned: Vec<Tensor> = out.attentions.unwrap().iter().map(|a| a.detach()).collect();
    let mut rng = Lcg::new(13);
    let (mut checked, mut worst) = (0, 0.0f64);
    let names: Vec<String> = toy.store.names().cloned().collect();
    for name in names.iter().filter(|n| {
        n.starts_with("vgnet.attention") || n.starts_with("vgnet.motion") || n.starts_with("vgnet.img.conv1") || n.starts_with("vgnet.lmark.conv3") || n.starts_with("vgnet.crnn") || n.starts_with("vgnet.decode2")
    }) {
        let var = toy.store.get(name).unwrap();
        let original: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let shape = var.as_tensor().shape().clone();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; original.len()],
        };
        for _ in 0..4 {
            let i = (rng.next_u64() % original.len() as u64) as usize;
            let eps = 1e-6;
            let eval = |delta: f64| {
                let mut v = original.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
                toy.objective(Some(&pinned)).to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            var.set(&Tensor::from_vec(original.clone(), shape.clone(), &Device::Cpu).unwrap()).unwrap();
            let a = analytic[i];
            // Below 1e-5 the rounding error of the difference quotient (about 1e-9 here) exceeds
            // the 1e-3 relative budget.
            if a.abs().max(numeric.abs()) < 1e-5 {
                continue;
            }
            assert!((a - numeric).abs() <= 1e-3 * a.abs().max(numeric.abs()), "{name}[{i}]: analytic {a} vs numeric {numeric}");
            worst = worst.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    assert!(checked >= 10, "only {checked} entries had a measurable gradient");
    (checked, worst)
}

// ---------------------------------------------------------------------------------------
// Discriminator contracts.

pub fn zero_weight_heads() {
    let mut store = ParamStore::new(3, 0.2, DType::F32);
    let disc = Discriminator::new(&DiscriminatorConfig { image_size: 16, channels: 4, feature_dim: 8, hidden: 6 }, &mut store).unwrap();
    let heads: Vec<String> = store.names().filter(|n| n.starts_with("disc.regression") || n.starts_with("disc.score")).cloned().collect();
    assert_eq!(heads.len(), 4);
    for name in &heads {
        store.zero_out(name).unwrap();
    }
    let dev = Device::Cpu;
    let example = Tensor::rand(0f32, 1f32, (2, LANDMARK_DIM), &dev).unwrap();
    let frames: Vec<Tensor> = (0..3).map(|_| Tensor::rand(-1f32, 1f32, (2, 3, 16, 16), &dev).unwrap()).collect();
    let out = disc.forward(&example, &frames).unwrap();
    assert_eq!(out.score.to_vec1::<f32>().unwrap(), vec![0.5, 0.5]);
    let want = example.to_vec2::<f32>().unwrap();
    for r in &out.regressed {
        assert_eq!(r.to_vec2::<f32>().unwrap(), want);
    }
}

/// Small model settings for contract checks on 16x16 frames.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        fan_in_init: true,
        batch_size: 2,
        epochs: 1000,
        crop_length: 3,
        checkpoint_every: 0,
        vg_channels: 8,
        disc_channels: 4,
        disc_feature_dim: 8,
        disc_hidden: 8,
        at_conv_channels: 4,
        at_audio_dim: 16,
        at_cond_dim: 8,
        at_hidden: 16,
        probe_channels: 4,
        probe_hidden: 16,
        ..TrainConfig::default()
    }
}

pub fn tiny_dataset(dir: &std::path::Path) -> Dataset {
    let config = SyntheticConfig { identities: 3, sequences_per_identity: 2, length: 6, image_size: 16, ..SyntheticConfig::default() };
    generate_synthetic_dataset(&config, dir).unwrap();
    Dataset::open(dir).unwrap()
}

pub fn tiny_batch(ds: &Dataset, len: usize) -> VgBatch {
    let samples = ds.load_all(Some(Split::Train)).unwrap();
    let refs: Vec<_> = samples.iter().take(2).map(|s| (s, 0)).collect();
    VgBatch::from_samples(&refs, len, DType::F32).unwrap()
}

/// Each optimizer step touches only its own network, bit for bit.
pub fn freeze() {
    let dir = tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let mut trainer = GanTrainer::new(&tiny_config(), 16, DType::F32).unwrap();
    let b = tiny_batch(&ds, 3);

    let disc_before = trainer.disc_store.as_ref().unwrap().snapshot().unwrap();
    let gen_before = trainer.gen_store.snapshot().unwrap();
    let out = trainer.generate(&b).unwrap();
    trainer.generator_step(&b, &out).unwrap();
    assert_eq!(trainer.disc_store.as_ref().unwrap().snapshot().unwrap(), disc_before);
    assert_ne!(trainer.gen_store.snapshot().unwrap(), gen_before);

    let gen_before = trainer.gen_store.snapshot().unwrap();
    let out = trainer.generate(&b).unwrap();
    trainer.discriminator_step(&b, &out).unwrap();
    assert_eq!(trainer.gen_store.snapshot().unwrap(), gen_before);
    assert_ne!(trainer.disc_store.as_ref().unwrap().snapshot().unwrap(), disc_before);
}
