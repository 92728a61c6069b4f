//! Training loops. AT-net and VG-net are trained separately; VG-net sees ground-truth
//! landmarks and alternates one discriminator step with one generator step.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::AdamW;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::atnet::{atnet_loss, audio_tensor, coeffs_tensor, AtNet, AtNetConfig, AtNetScaling};
use crate::checkpoint::Checkpoint;
use crate::discriminator::{lip_mask, lip_mask_tensor, Discriminator, DiscriminatorConfig};
use crate::landmark_space::{PcaBasis, PcaCoeffs};
use crate::media::dataset::{Dataset, Split};
use crate::media::{TrainingSample, LANDMARK_DIM};
use crate::metrics::{EvalReport, LandmarkSource, LmdOptions};
use crate::nn::{adam_step, frames_to_tensor, landmarks_to_tensor, ParamStore};
use crate::objectives::{full_objective, gan_losses, l1_loss, pixel_loss, LossConfig};
use crate::probe::{LandmarkProbe, ProbeConfig};
use crate::vgnet::{VgNet, VgNetConfig, VgNetOutput};
use crate::{Error, Result};

pub const ATNET_KIND: &str = "atnet";
pub const VGNET_KIND: &str = "vgnet";
pub const DISC_KIND: &str = "disc";
pub const PROBE_KIND: &str = "probe";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Atnet,
    Vgnet,
    Probe,
}

/// Flat training configuration; every field can be set from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub init_std: f64,
    /// Scale each weight's std by its fan-in instead of using `init_std`.
    pub fan_in_init: bool,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Wall-clock cap; runs that hit it are not reproducible step for step.
    pub budget_minutes: Option<f64>,
    pub seed: u64,
    /// Frames per VG-net training window; 0 uses whole sequences.
    pub crop_length: usize,
    pub checkpoint_every: usize,
    pub dma: bool,
    pub mmcrnn: bool,
    pub dal: bool,
    pub rd: bool,
    pub atvg_p: bool,
    pub attention_bias: f64,
    pub beta: f64,
    pub lambda: f64,
    pub mouth_weight: f64,
    /// Landmarks enter the regression loss multiplied by this factor. 1 keeps normalized units.
    pub regression_scale: f64,
    pub vg_channels: usize,
    pub disc_channels: usize,
    pub disc_feature_dim: usize,
    pub disc_hidden: usize,
    pub at_conv_channels: usize,
    pub at_audio_dim: usize,
    pub at_cond_dim: usize,
    pub at_hidden: usize,
    pub probe_channels: usize,
    pub probe_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Atnet,
            learning_rate: 2e-4,
            init_std: 0.2,
            fan_in_init: false,
            batch_size: 4,
            epochs: 10,
            max_steps: None,
            budget_minutes: None,
            seed: 0,
            crop_length: 8,
            checkpoint_every: 200,
            dma: true,
            mmcrnn: true,
            dal: true,
            rd: true,
            atvg_p: false,
            attention_bias: 3.0,
            beta: 0.5,
            lambda: 10.0,
            mouth_weight: 3.0,
            regression_scale: 1.0,
            vg_channels: 128,
            disc_channels: 64,
            disc_feature_dim: 256,
            disc_hidden: 256,
            at_conv_channels: 32,
            at_audio_dim: 256,
            at_cond_dim: 128,
            at_hidden: 256,
            probe_channels: 32,
            probe_hidden: 256,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::Config("init std must be >= 0".into()));
        }
        if !(self.regression_scale > 0.0) {
            return Err(Error::Config("regression scale must be positive".into()));
        }
        self.loss().validate()
    }

    /// Fresh parameter store for this configuration.
    pub fn param_store(&self, seed: u64, dtype: DType) -> ParamStore {
        if self.fan_in_init {
            ParamStore::fan_in(seed, dtype)
        } else {
            ParamStore::new(seed, self.init_std, dtype)
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { beta: self.beta, lambda: self.lambda, mouth_weight: self.mouth_weight }
    }

    pub fn atnet(&self, k: usize) -> AtNetConfig {
        AtNetConfig {
            k,
            conv_channels: self.at_conv_channels,
            audio_dim: self.at_audio_dim,
            cond_dim: self.at_cond_dim,
            hidden: self.at_hidden,
        }
    }

    pub fn vgnet(&self, image_size: usize) -> VgNetConfig {
        VgNetConfig {
            image_size,
            channels: self.vg_channels,
            dma: self.dma,
            mmcrnn: self.mmcrnn,
            atvg_p: self.atvg_p,
            attention_bias: self.attention_bias,
            ..Default::default()
        }
    }

    pub fn discriminator(&self, image_size: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            image_size,
            channels: self.disc_channels,
            feature_dim: self.disc_feature_dim,
            hidden: self.disc_hidden,
        }
    }

    pub fn probe(&self, image_size: usize) -> ProbeConfig {
        ProbeConfig { image_size, channels: self.probe_channels, hidden: self.probe_hidden }
    }

    /// Applies a comma-separated list of features to switch off (`dma,mmcrnn,dal,rd`), or
    /// `atvg_p` to switch that variant on.
    pub fn apply_ablation(&mut self, list: &str) -> Result<()> {
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "dma" => self.dma = false,
                "mmcrnn" => self.mmcrnn = false,
                "dal" => self.dal = false,
                "rd" => self.rd = false,
                "atvg_p" | "atvg-p" => self.atvg_p = true,
                "baseline" => {
                    self.dma = false;
                    self.mmcrnn = false;
                    self.dal = false;
                    self.rd = false;
                }
                other => return Err(Error::Config(format!("unknown ablation {other}"))),
            }
        }
        Ok(())
    }
}

/// Appends JSON lines to the training log.
pub struct TrainLog {
    file: fs::File,
}

impl TrainLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { file: fs::File::create(path)? })
    }

    pub fn write(&mut self, value: &serde_json::Value) -> Result<()> {
        writeln!(self.file, "{value}")?;
        Ok(())
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: usize,
    pub final_loss: f64,
    pub stopped_by_budget: bool,
}

struct StepBudget {
    max_steps: Option<usize>,
    deadline: Option<(Instant, f64)>,
}

impl StepBudget {
    fn new(config: &TrainConfig) -> Self {
        Self { max_steps: config.max_steps, deadline: config.budget_minutes.map(|m| (Instant::now(), m * 60.0)) }
    }

    fn steps_exhausted(&self, step: usize) -> bool {
        self.max_steps.is_some_and(|m| step >= m)
    }

    fn time_exhausted(&self) -> bool {
        self.deadline.is_some_and(|(start, secs)| start.elapsed().as_secs_f64() >= secs)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(step: usize, values: &[f64], last_good: &Option<PathBuf>) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step, last_good: last_good.clone() });
    }
    Ok(())
}

fn batch_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c_0000_0001)
}

// ---------------------------------------------------------------------------------------
// AT-net

/// AT-net inputs and identity-removed targets of one sequence.
#[derive(Debug, Clone)]
pub struct AtNetSample {
    pub id: String,
    pub audio: Vec<crate::media::MfccChunk>,
    pub condition: PcaCoeffs,
    pub targets: Vec<PcaCoeffs>,
}

impl AtNetSample {
    pub fn new(sample: &TrainingSample, basis: &PcaBasis) -> Self {
        let removed = basis.remove_identity(&sample.landmarks, &sample.example_landmarks);
        Self {
            id: sample.id.clone(),
            audio: sample.audio.clone(),
            condition: basis.project(&sample.example_landmarks),
            targets: removed.iter().map(|s| basis.project(s)).collect(),
        }
    }
}

fn atnet_batch(samples: &[&AtNetSample], dtype: DType) -> Result<(Tensor, Tensor, Tensor)> {
    let t = samples.iter().map(|s| s.audio.len()).min().unwrap_or(0);
    let audio: Vec<&[crate::media::MfccChunk]> = samples.iter().map(|s| &s.audio[..t]).collect();
    let conds: Vec<&[PcaCoeffs]> = samples.iter().map(|s| std::slice::from_ref(&s.condition)).collect();
    let targets: Vec<&[PcaCoeffs]> = samples.iter().map(|s| &s.targets[..t]).collect();
    let dev = Device::Cpu;
    Ok((audio_tensor(&audio, dtype, &dev)?, coeffs_tensor(&conds, dtype, &dev)?.squeeze(1)?, coeffs_tensor(&targets, dtype, &dev)?))
}

/// Builds an AT-net whose input/output scaling is measured on `samples`.
pub fn build_atnet(config: &TrainConfig, k: usize, samples: &[AtNetSample], dtype: DType) -> Result<(ParamStore, AtNet)> {
    let mut store = config.param_store(config.seed, dtype);
    let mut net = AtNet::new(&config.atnet(k), &mut store)?;
    let chunks: Vec<&crate::media::MfccChunk> = samples.iter().flat_map(|s| s.audio.iter()).collect();
    let conds: Vec<PcaCoeffs> = samples.iter().map(|s| s.condition.clone()).collect();
    let targets: Vec<PcaCoeffs> = samples.iter().flat_map(|s| s.targets.iter().cloned()).collect();
    net.set_scaling(AtNetScaling::fit(&chunks, &conds, &targets, k))?;
    Ok((store, net))
}

fn save_atnet(path: &Path, net: &AtNet, store: &ParamStore, basis: &PcaBasis) -> Result<String> {
    let ck = Checkpoint::from_store(
        ATNET_KIND,
        serde_json::to_value(net.config())?,
        Some(basis.hash()),
        serde_json::to_value(net.scaling())?,
        store,
    )?;
    ck.save(path)
}

/// Loads an AT-net checkpoint, refusing one trained against a different basis.
pub fn load_atnet(path: &Path, basis: &PcaBasis) -> Result<(ParamStore, AtNet)> {
    let ck = Checkpoint::load(path, ATNET_KIND)?;
    ck.require_basis(&basis.hash())?;
    let config: AtNetConfig = serde_json::from_value(ck.header.config.clone())?;
    let mut store = ParamStore::from_tensors(ck.tensors, DType::F32);
    let mut net = AtNet::new(&config, &mut store)?;
    net.set_scaling(serde_json::from_value(ck.header.extra)?)?;
    Ok((store, net))
}

pub fn train_atnet(dataset: &Dataset, basis: &PcaBasis, config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let train: Vec<AtNetSample> = dataset.iter(Some(Split::Train)).map(|s| s.map(|s| AtNetSample::new(&s, basis))).collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let (store, net) = build_atnet(config, basis.k(), &train, DType::F32)?;
    let mut opt = store.adam(config.learning_rate)?;
    let log_path = out_dir.join("atnet_log.jsonl");
    let mut log = TrainLog::create(&log_path)?;
    let ckpt = out_dir.join("atnet.ckpt");
    let budget = StepBudget::new(config);
    let mut rng = batch_rng(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (mut step, mut last_loss, mut last_good, mut by_budget) = (0usize, f64::NAN, None, false);
    'outer: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0;
        for chunk in order.chunks(config.batch_size) {
            if budget.steps_exhausted(step) {
                break 'outer;
            }
            if budget.time_exhausted() {
                by_budget = true;
                break 'outer;
            }
            let batch: Vec<&AtNetSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (audio, cond, target) = atnet_batch(&batch, DType::F32)?;
            let loss = atnet_loss(&net.forward(&audio, &cond)?, &target)?;
            let value = scalar(&loss)?;
            check_finite(step, &[value], &last_good)?;
            adam_step(&mut opt, &loss)?;
            step += 1;
            last_loss = value;
            epoch_sum += value;
            epoch_batches += 1;
            log.write(&json!({"step": step, "epoch": epoch, "loss": value}))?;
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                save_atnet(&ckpt, &net, &store, basis)?;
                last_good = Some(ckpt.clone());
            }
        }
        if epoch_batches > 0 {
            let mean = epoch_sum / epoch_batches as f64;
            log.write(&json!({"epoch_end": epoch, "mean_loss": mean}))?;
            info!("atnet epoch {epoch}: mean loss {mean:.6}");
        }
    }
    save_atnet(&ckpt, &net, &store, basis)?;
    Ok(TrainOutcome { checkpoint: ckpt, log: log_path, steps: step, final_loss: last_loss, stopped_by_budget: by_budget })
}

/// Held-out quality of an AT-net.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtNetValidation {
    /// Coefficient MSE of the network.
    pub mse: f64,
    /// Coefficient MSE of predicting the training-target mean everywhere.
    pub baseline_mse: f64,
    /// Pearson correlation of predicted mouth aperture against the manifest envelope,
    /// pooled over all held-out frames (synthetic datasets only).
    pub aperture_r: Option<f64>,
}

pub fn validate_atnet(dataset: &Dataset, basis: &PcaBasis, net: &AtNet) -> Result<AtNetValidation> {
    let train: Vec<AtNetSample> = dataset.iter(Some(Split::Train)).map(|s| s.map(|s| AtNetSample::new(&s, basis))).collect::<Result<_>>()?;
    let k = basis.k();
    let mut mean = vec![0.0; k];
    let mut n = 0.0;
    for h in train.iter().flat_map(|s| s.targets.iter()) {
        for (m, v) in mean.iter_mut().zip(&h.values) {
            *m += v;
        }
        n += 1.0;
    }
    mean.iter_mut().for_each(|m| *m /= f64::max(n, 1.0));
    let (mut se, mut base_se, mut count) = (0.0, 0.0, 0usize);
    let (mut pred_ap, mut env) = (Vec::new(), Vec::new());
    for sref in dataset.samples(Some(Split::Test)) {
        let sample = dataset.read_sample(&sref)?;
        let s = AtNetSample::new(&sample, basis);
        let pred = net.predict_coeffs(&s.audio, &s.condition)?;
        for (p, t) in pred.iter().zip(&s.targets) {
            for j in 0..k {
                se += (p.values[j] - t.values[j]).powi(2);
                base_se += (mean[j] - t.values[j]).powi(2);
            }
            count += k;
        }
        if let Some(e) = &dataset.entry(&sref)?.envelope {
            let shapes = net.predict_landmarks(&s.audio, &sample.example_landmarks, basis)?;
            pred_ap.extend(shapes.iter().map(|p| crate::media::layout::mouth_aperture(p) as f64));
            env.extend(e.iter().map(|&v| v as f64));
        }
    }
    if count == 0 {
        return Err(Error::Data("test split is empty".into()));
    }
    Ok(AtNetValidation {
        mse: se / count as f64,
        baseline_mse: base_se / count as f64,
        aperture_r: (!env.is_empty()).then(|| crate::metrics::pearson(&pred_ap, &env)),
    })
}

// ---------------------------------------------------------------------------------------
// VG-net

/// Tensors of one VG-net training batch.
#[derive(Debug, Clone)]
pub struct VgBatch {
    /// Ground-truth landmarks `(N,136)` per frame.
    pub landmarks: Vec<Tensor>,
    /// Target frames `(N,3,S,S)` per frame.
    pub targets: Vec<Tensor>,
    pub example_image: Tensor,
    pub example_landmarks: Tensor,
}

impl VgBatch {
    /// Windows `[start, start + len)` of each sample.
    pub fn from_samples(samples: &[(&TrainingSample, usize)], len: usize, dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let mut landmarks = Vec::with_capacity(len);
        let mut targets = Vec::with_capacity(len);
        for t in 0..len {
            let lms: Vec<_> = samples.iter().map(|(s, st)| &s.landmarks[st + t]).collect();
            let frs: Vec<_> = samples.iter().map(|(s, st)| &s.frames[st + t]).collect();
            landmarks.push(landmarks_to_tensor(&lms, dtype, &dev)?);
            targets.push(frames_to_tensor(&frs, dtype, &dev)?);
        }
        let ex_img: Vec<_> = samples.iter().map(|(s, _)| &s.example_frame).collect();
        let ex_lm: Vec<_> = samples.iter().map(|(s, _)| &s.example_landmarks).collect();
        Ok(Self {
            landmarks,
            targets,
            example_image: frames_to_tensor(&ex_img, dtype, &dev)?,
            example_landmarks: landmarks_to_tensor(&ex_lm, dtype, &dev)?,
        })
    }
}

/// Loss values of one alternation step; adversarial entries are absent without a discriminator.
#[derive(Debug, Clone, Serialize)]
pub struct StepLosses {
    pub step: usize,
    pub l_pix: f64,
    pub adv_g: Option<f64>,
    pub adv_d: Option<f64>,
    pub reg_real: Option<f64>,
    pub reg_fake: Option<f64>,
}

/// Generator, optional discriminator and their optimizers.
pub struct GanTrainer {
    pub config: TrainConfig,
    pub gen_store: ParamStore,
    pub vgnet: VgNet,
    pub disc_store: Option<ParamStore>,
    pub disc: Option<Discriminator>,
    gen_opt: AdamW,
    disc_opt: Option<AdamW>,
    mask: Tensor,
}

impl GanTrainer {
    pub fn new(config: &TrainConfig, image_size: usize, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut gen_store = config.param_store(config.seed, dtype);
        let vgnet = VgNet::new(&config.vgnet(image_size), &mut gen_store)?;
        let gen_opt = gen_store.adam(config.learning_rate)?;
        let (disc_store, disc, disc_opt) = if config.rd {
            let mut store = config.param_store(config.seed.wrapping_add(1), dtype);
            let disc = Discriminator::new(&config.discriminator(image_size), &mut store)?;
            let opt = store.adam(config.learning_rate)?;
            (Some(store), Some(disc), Some(opt))
        } else {
            (None, None, None)
        };
        let mask = (lip_mask_tensor(&lip_mask(config.mouth_weight), dtype, &Device::Cpu)? * config.regression_scale.powi(2))?;
        Ok(Self { config: config.clone(), gen_store, vgnet, disc_store, disc, gen_opt, disc_opt, mask })
    }

    pub fn generate(&self, batch: &VgBatch) -> Result<VgNetOutput> {
        self.vgnet.forward(&batch.landmarks, &batch.example_image, &batch.example_landmarks)
    }

    /// Pixel term under the configured weighting.
    pub fn pixel_term(&self, out: &VgNetOutput, batch: &VgBatch) -> Result<Tensor> {
        if !self.config.dal {
            return l1_loss(&out.frames, &batch.targets);
        }
        match &out.attentions {
            Some(a) => pixel_loss(&out.frames, &batch.targets, a, self.config.beta),
            None => {
                let zeros: Vec<Tensor> = out
                    .frames
                    .iter()
                    .map(|f| -> Result<Tensor> {
                        let (n, _, h, w) = f.dims4()?;
                        Ok(Tensor::zeros((n, 1, h, w), f.dtype(), f.device())?)
                    })
                    .collect::<Result<_>>()?;
                pixel_loss(&out.frames, &batch.targets, &zeros, self.config.beta)
            }
        }
    }

    /// One discriminator update against the detached fake. Returns (adv_d, reg_real, reg_fake).
    pub fn discriminator_step(&mut self, batch: &VgBatch, out: &VgNetOutput) -> Result<Option<(f64, f64, f64)>> {
        let (Some(disc), Some(opt)) = (&self.disc, &mut self.disc_opt) else {
            return Ok(None);
        };
        let fake: Vec<Tensor> = out.frames.iter().map(|f| f.detach()).collect();
        let real = disc.forward(&batch.example_landmarks, &batch.targets)?;
        let fake = disc.forward(&batch.example_landmarks, &fake)?;
        let losses = gan_losses(Some(&real), &fake, &batch.landmarks, &self.mask)?;
        let total = losses.discriminator_total()?;
        let values = (scalar(&losses.adv_d)?, scalar(losses.reg_real.as_ref().unwrap())?, scalar(&losses.reg_fake)?);
        adam_step(opt, &total)?;
        Ok(Some(values))
    }

    /// One generator update; only generator parameters are stepped.
    /// Returns (total, l_pix, adv_g) where `adv_g` includes the regression term.
    pub fn generator_step(&mut self, batch: &VgBatch, out: &VgNetOutput) -> Result<(f64, f64, Option<f64>)> {
        let pix = self.pixel_term(out, batch)?;
        let (total, adv) = match &self.disc {
            Some(disc) => {
                let fake = disc.forward(&batch.example_landmarks, &out.frames)?;
                let g = gan_losses(None, &fake, &batch.landmarks, &self.mask)?.generator_adv()?;
                (full_objective(&pix, &g, &self.config.loss())?, Some(scalar(&g)?))
            }
            None => ((&pix * self.config.lambda)?, None),
        };
        let values = (scalar(&total)?, scalar(&pix)?, adv);
        adam_step(&mut self.gen_opt, &total)?;
        Ok(values)
    }

    /// Discriminator step then generator step on one shared generator pass.
    pub fn train_step(&mut self, batch: &VgBatch, step: usize) -> Result<(StepLosses, f64)> {
        let out = self.generate(batch)?;
        let d = self.discriminator_step(batch, &out)?;
        let (total, l_pix, adv_g) = self.generator_step(batch, &out)?;
        Ok((
            StepLosses {
                step,
                l_pix,
                adv_g,
                adv_d: d.map(|v| v.0),
                reg_real: d.map(|v| v.1),
                reg_fake: d.map(|v| v.2),
            },
            total,
        ))
    }

    pub fn save(&self, out_dir: &Path, basis_hash: Option<String>) -> Result<PathBuf> {
        let path = out_dir.join("vgnet.ckpt");
        Checkpoint::from_store(VGNET_KIND, serde_json::to_value(self.vgnet.config())?, basis_hash.clone(), json!(null), &self.gen_store)?
            .save(&path)?;
        if let (Some(disc), Some(store)) = (&self.disc, &self.disc_store) {
            Checkpoint::from_store(DISC_KIND, serde_json::to_value(disc.config())?, basis_hash, json!(null), store)?
                .save(&out_dir.join("disc.ckpt"))?;
        }
        Ok(path)
    }
}

pub fn load_vgnet(path: &Path) -> Result<(ParamStore, VgNet)> {
    let ck = Checkpoint::load(path, VGNET_KIND)?;
    let config: VgNetConfig = serde_json::from_value(ck.header.config.clone())?;
    let mut store = ParamStore::from_tensors(ck.tensors, DType::F32);
    let net = VgNet::new(&config, &mut store)?;
    Ok((store, net))
}

pub fn load_discriminator(path: &Path) -> Result<(ParamStore, Discriminator)> {
    let ck = Checkpoint::load(path, DISC_KIND)?;
    let config: DiscriminatorConfig = serde_json::from_value(ck.header.config.clone())?;
    let mut store = ParamStore::from_tensors(ck.tensors, DType::F32);
    let net = Discriminator::new(&config, &mut store)?;
    Ok((store, net))
}

/// Random training windows: each epoch visits every sequence once in shuffled order.
fn windows(samples: &[TrainingSample], crop: usize, order: &[usize], rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    order
        .iter()
        .map(|&i| {
            let len = samples[i].len();
            let w = if crop == 0 { len } else { crop.min(len) };
            (i, rng.gen_range(0..=len - w))
        })
        .collect()
}

fn window_len(samples: &[TrainingSample], batch: &[(usize, usize)], crop: usize) -> usize {
    batch
        .iter()
        .map(|&(i, st)| {
            let len = samples[i].len() - st;
            if crop == 0 {
                len
            } else {
                crop.min(len)
            }
        })
        .min()
        .unwrap_or(0)
}

pub fn train_vgnet(dataset: &Dataset, config: &TrainConfig, out_dir: &Path, basis_hash: Option<String>) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let train = dataset.load_all(Some(Split::Train))?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut trainer = GanTrainer::new(config, dataset.manifest().image_size, DType::F32)?;
    info!(
        "vgnet: {} generator parameters, {} discriminator parameters",
        trainer.gen_store.num_params(),
        trainer.disc_store.as_ref().map_or(0, |s| s.num_params())
    );
    let log_path = out_dir.join("vgnet_log.jsonl");
    let mut log = TrainLog::create(&log_path)?;
    let budget = StepBudget::new(config);
    let mut rng = batch_rng(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (mut step, mut last_loss, mut last_good, mut by_budget) = (0usize, f64::NAN, None, false);
    'outer: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let wins = windows(&train, config.crop_length, &order, &mut rng);
        for chunk in wins.chunks(config.batch_size) {
            if budget.steps_exhausted(step) {
                break 'outer;
            }
            if budget.time_exhausted() {
                by_budget = true;
                break 'outer;
            }
            let len = window_len(&train, chunk, config.crop_length);
            let refs: Vec<(&TrainingSample, usize)> = chunk.iter().map(|&(i, st)| (&train[i], st)).collect();
            let batch = VgBatch::from_samples(&refs, len, DType::F32)?;
            let (losses, total) = trainer.train_step(&batch, step + 1)?;
            let values = [Some(total), Some(losses.l_pix), losses.adv_g, losses.adv_d, losses.reg_real, losses.reg_fake];
            check_finite(step + 1, &values.iter().flatten().copied().collect::<Vec<_>>(), &last_good)?;
            step += 1;
            last_loss = total;
            let mut entry = serde_json::to_value(&losses)?;
            entry["epoch"] = json!(epoch);
            log.write(&entry)?;
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                last_good = Some(trainer.save(out_dir, basis_hash.clone())?);
                info!("vgnet step {step}: l_pix {:.5}", losses.l_pix);
            }
        }
    }
    let checkpoint = trainer.save(out_dir, basis_hash)?;
    if step == 0 {
        warn!("vgnet training ran zero steps");
    }
    Ok(TrainOutcome { checkpoint, log: log_path, steps: step, final_loss: last_loss, stopped_by_budget: by_budget })
}

// ---------------------------------------------------------------------------------------
// Landmark probe

pub fn load_probe(path: &Path) -> Result<(ParamStore, LandmarkProbe)> {
    let ck = Checkpoint::load(path, PROBE_KIND)?;
    let config: ProbeConfig = serde_json::from_value(ck.header.config.clone())?;
    let mut store = ParamStore::from_tensors(ck.tensors, DType::F32);
    let mut probe = LandmarkProbe::new(&config, &mut store)?;
    probe.set_mean(serde_json::from_value(ck.header.extra)?)?;
    Ok((store, probe))
}

/// Fits the landmark probe on every training frame (and the identity examples).
pub fn train_probe(dataset: &Dataset, config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let train = dataset.load_all(Some(Split::Train))?;
    let mut pairs = Vec::new();
    for s in &train {
        pairs.extend(s.frames.iter().zip(&s.landmarks));
        pairs.push((&s.example_frame, &s.example_landmarks));
    }
    if pairs.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut mean = vec![0.0f32; LANDMARK_DIM];
    for (_, l) in &pairs {
        for (m, v) in mean.iter_mut().zip(l.flatten()) {
            *m += v / pairs.len() as f32;
        }
    }
    let mut store = config.param_store(config.seed, DType::F32);
    let mut probe = LandmarkProbe::new(&config.probe(dataset.manifest().image_size), &mut store)?;
    probe.set_mean(mean.clone())?;
    let mut opt = store.adam(config.learning_rate)?;
    let mask = lip_mask_tensor(&lip_mask(config.mouth_weight), DType::F32, &Device::Cpu)?;
    let log_path = out_dir.join("probe_log.jsonl");
    let mut log = TrainLog::create(&log_path)?;
    let budget = StepBudget::new(config);
    let mut rng = batch_rng(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let batch_size = config.batch_size.max(8);
    let (mut step, mut last_loss, mut by_budget) = (0usize, f64::NAN, false);
    'outer: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            if budget.steps_exhausted(step) {
                break 'outer;
            }
            if budget.time_exhausted() {
                by_budget = true;
                break 'outer;
            }
            let frames: Vec<_> = chunk.iter().map(|&i| pairs[i].0).collect();
            let lms: Vec<_> = chunk.iter().map(|&i| pairs[i].1).collect();
            let x = frames_to_tensor(&frames, DType::F32, &Device::Cpu)?;
            let y = landmarks_to_tensor(&lms, DType::F32, &Device::Cpu)?;
            let loss = (probe.forward(&x)? - y)?.sqr()?.broadcast_mul(&mask)?.mean_all()?;
            let value = scalar(&loss)?;
            check_finite(step, &[value], &None)?;
            adam_step(&mut opt, &loss)?;
            step += 1;
            last_loss = value;
            log.write(&json!({"step": step, "epoch": epoch, "loss": value}))?;
        }
    }
    let path = out_dir.join("probe.ckpt");
    Checkpoint::from_store(PROBE_KIND, serde_json::to_value(probe.config())?, None, serde_json::to_value(&mean)?, &store)?.save(&path)?;
    Ok(TrainOutcome { checkpoint: path, log: log_path, steps: step, final_loss: last_loss, stopped_by_budget: by_budget })
}

// ---------------------------------------------------------------------------------------
// Ablations

pub const ABLATION_VARIANTS: [&str; 7] = ["full", "w/o DMA", "w/o MMCRNN", "w/o DAL", "w/o RD", "baseline", "atvg_p"];

/// Training configuration of a named ablation variant.
pub fn ablation_config(base: &TrainConfig, variant: &str) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    cfg.dma = true;
    cfg.mmcrnn = true;
    cfg.dal = true;
    cfg.rd = true;
    cfg.atvg_p = false;
    match variant {
        "full" => {}
        "w/o DMA" => cfg.dma = false,
        "w/o MMCRNN" => cfg.mmcrnn = false,
        "w/o DAL" => cfg.dal = false,
        "w/o RD" => cfg.rd = false,
        "baseline" => cfg.apply_ablation("baseline")?,
        "atvg_p" => cfg.atvg_p = true,
        other => return Err(Error::Config(format!("unknown ablation variant {other}"))),
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub dma: bool,
    pub mmcrnn: bool,
    pub dal: bool,
    pub rd: bool,
    pub atvg_p: bool,
    pub steps: usize,
    pub report: EvalReport,
}

/// Trains every variant with the same budget and evaluates it on ground-truth landmarks.
pub fn ablation_matrix(dataset: &Dataset, base: &TrainConfig, probe: &LandmarkProbe, lmd: &LmdOptions, out_dir: &Path) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ABLATION_VARIANTS.len());
    for (i, variant) in ABLATION_VARIANTS.iter().enumerate() {
        let mut cfg = ablation_config(base, variant)?;
        cfg.stage = Stage::Vgnet;
        let dir = out_dir.join(format!("variant{i}"));
        info!("ablation: training {variant}");
        let outcome = train_vgnet(dataset, &cfg, &dir, None)?;
        let (_, net) = load_vgnet(&outcome.checkpoint)?;
        let (report, _) = crate::inference::evaluate(dataset, &net, None, probe, LandmarkSource::GtLandmarks, lmd)?;
        rows.push(AblationRow {
            variant: variant.to_string(),
            dma: cfg.dma,
            mmcrnn: cfg.mmcrnn,
            dal: cfg.dal,
            rd: cfg.rd,
            atvg_p: cfg.atvg_p,
            steps: outcome.steps,
            report,
        });
    }
    Ok(rows)
}
