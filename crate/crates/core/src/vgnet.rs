//! Visual generation network: landmark sequence plus one example image to video.
//!
//! Per frame, image and landmark features are fused at 1/16 resolution, run through a
//! convolutional-recurrent trunk, upsampled to 1/4 resolution and blended with the
//! example image feature under a landmark attention gate. A decoder then produces an
//! attention map and a motion image which are composited over the example image.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::media::{Frame, LandmarkSet, NUM_LANDMARKS};
use crate::nn::{frames_to_tensor, landmarks_to_tensor, leaky_relu, sigmoid, tensor_to_frames};
use crate::nn::{Conv2d, ConvGruCell, ConvTranspose2d, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VgNetConfig {
    /// Square frame size; must be a multiple of 16.
    pub image_size: usize,
    /// Channels of the image feature, the landmark feature and the recurrent trunk.
    pub channels: usize,
    /// Heatmap blob width in normalized units (2 px on a 64 px map).
    pub heatmap_sigma: f64,
    /// Attention/motion compositing; when off the frame is the motion head's output.
    pub dma: bool,
    /// Recurrent trunk; when off a per-frame conv pair of equal size replaces it.
    pub mmcrnn: bool,
    /// Composite over the previously generated frame instead of the example image.
    pub atvg_p: bool,
    /// Initial bias of the attention head. A positive value starts with the motion head
    /// painting most of the frame, so it learns before the example takes over.
    #[serde(default)]
    pub attention_bias: f64,
}

impl Default for VgNetConfig {
    fn default() -> Self {
        Self { image_size: 128, channels: 128, heatmap_sigma: 2.0 / 64.0, dma: true, mmcrnn: true, atvg_p: false, attention_bias: 0.0 }
    }
}

impl VgNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!("image size {} must be a positive multiple of 16", self.image_size)));
        }
        if self.channels < 4 || self.channels % 4 != 0 {
            return Err(Error::Config(format!("channel count {} must be a multiple of 4", self.channels)));
        }
        if self.heatmap_sigma <= 0.0 {
            return Err(Error::Config("heatmap sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel compositing weight `alpha` in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// Per-pixel color motion in (-1, 1), channel-last like [`Frame`].
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFrame {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// `alpha * motion + (1 - alpha) * example`, alpha shared by the three channels.
pub fn composite(alpha: &AttentionMap, motion: &MotionFrame, example: &Frame) -> Result<Frame> {
    let (h, w) = (example.height(), example.width());
    if alpha.height != h || alpha.width != w || motion.height != h || motion.width != w {
        return Err(Error::Shape(format!(
            "composite needs equal sizes: alpha {}x{}, motion {}x{}, image {h}x{w}",
            alpha.height, alpha.width, motion.height, motion.width
        )));
    }
    if alpha.values.len() != h * w || motion.values.len() != h * w * 3 {
        return Err(Error::Shape("attention or motion buffer has the wrong length".into()));
    }
    let base = example.as_slice();
    let data = (0..h * w * 3)
        .map(|i| {
            let a = alpha.values[i / 3];
            a * motion.values[i] + (1.0 - a) * base[i]
        })
        .collect();
    Frame::new(h, w, data)
}

/// Tensor form of [`composite`]: `alpha (N,1,H,W)`, `motion` and `base (N,3,H,W)`.
pub fn composite_tensor(alpha: &Tensor, motion: &Tensor, base: &Tensor) -> Result<Tensor> {
    if motion.dims() != base.dims() {
        return Err(Error::Shape(format!("motion {:?} vs image {:?}", motion.dims(), base.dims())));
    }
    let (n, _, h, w) = motion.dims4()?;
    if alpha.dims() != [n, 1, h, w] {
        return Err(Error::Shape(format!("attention {:?} does not match image {:?}", alpha.dims(), motion.dims())));
    }
    let keep = (alpha.ones_like()? - alpha)?;
    Ok((motion.broadcast_mul(alpha)? + base.broadcast_mul(&keep)?)?)
}

/// Feature-level blend: `crnn * att + mid * (1 - att)` with `att (N,1,h,w)`.
pub fn blend_features(crnn: &Tensor, att: &Tensor, mid: &Tensor) -> Result<Tensor> {
    let keep = (att.ones_like()? - att)?;
    Ok((crnn.broadcast_mul(att)? + mid.broadcast_mul(&keep)?)?)
}

/// Encoded example image and landmarks, shared by every frame of a sequence.
#[derive(Debug, Clone)]
pub struct ExampleEncoding {
    pub image: Tensor,
    /// Image feature at 1/4 resolution (the blend partner).
    pub mid: Tensor,
    /// Image feature at 1/16 resolution.
    pub deep: Tensor,
    pub landmarks: Tensor,
}

/// Fused per-frame inputs of the trunk.
#[derive(Debug, Clone)]
pub struct Fused {
    /// `concat(image feature, landmark feature difference)` with `2C` channels.
    pub deep: Tensor,
    /// Landmark attention gate, upsampled to the 1/4 stage.
    pub gate: Tensor,
}

/// All streams of one forward pass, each holding T tensors.
#[derive(Debug, Clone)]
pub struct VgNetOutput {
    pub frames: Vec<Tensor>,
    /// Absent when compositing is disabled.
    pub attentions: Option<Vec<Tensor>>,
    pub motions: Vec<Tensor>,
}

/// Frame-level result of [`VgNet::generate`].
#[derive(Debug, Clone)]
pub struct Generated {
    pub frames: Vec<Frame>,
    pub attentions: Vec<AttentionMap>,
    pub motions: Vec<MotionFrame>,
}

enum Trunk {
    Recurrent(ConvGruCell),
    PerFrame(Conv2d, Conv2d),
}

struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.b.forward(&leaky_relu(&self.a.forward(x)?)?)?;
        Ok((x + y)?)
    }
}

pub struct VgNet {
    config: VgNetConfig,
    img: [Conv2d; 4],
    lmark: [Conv2d; 3],
    gate: Conv2d,
    fusion: Conv2d,
    trunk: Trunk,
    res: [ResBlock; 2],
    up: [ConvTranspose2d; 2],
    decode: [ConvTranspose2d; 2],
    attention_head: Conv2d,
    motion_head: Conv2d,
    dtype: DType,
    device: Device,
}

impl VgNet {
    pub fn new(config: &VgNetConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let trunk = if config.mmcrnn {
            Trunk::Recurrent(ConvGruCell::new(store, "vgnet.crnn", c, c)?)
        } else {
            Trunk::PerFrame(
                Conv2d::new(store, "vgnet.frame_trunk.a", c, 3 * c, 3, 1, 1)?,
                Conv2d::new(store, "vgnet.frame_trunk.b", 3 * c, c, 3, 1, 1)?,
            )
        };
        let res = |store: &mut ParamStore, i: usize| -> Result<ResBlock> {
            Ok(ResBlock {
                a: Conv2d::new(store, &format!("vgnet.res{i}.a"), c, c, 3, 1, 1)?,
                b: Conv2d::new(store, &format!("vgnet.res{i}.b"), c, c, 3, 1, 1)?,
            })
        };
        Ok(Self {
            img: [
                Conv2d::new(store, "vgnet.img.conv1", 3, c / 4, 3, 2, 1)?,
                Conv2d::new(store, "vgnet.img.conv2", c / 4, c, 3, 2, 1)?,
                Conv2d::new(store, "vgnet.img.conv3", c, c, 3, 2, 1)?,
                Conv2d::new(store, "vgnet.img.conv4", c, c, 3, 2, 1)?,
            ],
            lmark: [
                Conv2d::new(store, "vgnet.lmark.conv1", NUM_LANDMARKS, c / 2, 3, 2, 1)?,
                Conv2d::new(store, "vgnet.lmark.conv2", c / 2, c, 3, 2, 1)?,
                Conv2d::new(store, "vgnet.lmark.conv3", c, c, 3, 2, 1)?,
            ],
            gate: Conv2d::new(store, "vgnet.gate", 2 * c, 1, 1, 1, 0)?,
            fusion: Conv2d::new(store, "vgnet.fusion", 2 * c, c, 3, 1, 1)?,
            trunk,
            res: [res(store, 1)?, res(store, 2)?],
            up: [
                ConvTranspose2d::upsample2(store, "vgnet.up1", c, c)?,
                ConvTranspose2d::upsample2(store, "vgnet.up2", c, c)?,
            ],
            decode: [
                ConvTranspose2d::upsample2(store, "vgnet.decode1", c, c / 2)?,
                ConvTranspose2d::upsample2(store, "vgnet.decode2", c / 2, c / 4)?,
            ],
            attention_head: Conv2d::with_bias(store, "vgnet.attention", [c / 4, 1, 3], 1, 1, config.attention_bias as f32)?,
            motion_head: Conv2d::new(store, "vgnet.motion", c / 4, 3, 3, 1, 1)?,
            config: config.clone(),
            dtype: store.dtype(),
            device: store.device().clone(),
        })
    }

    pub fn config(&self) -> &VgNetConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Gaussian heatmaps `(N, 68, S/2, S/2)` for flattened landmarks `(N, 136)`.
    pub fn heatmaps(&self, landmarks: &Tensor) -> Result<Tensor> {
        let n = landmarks.dim(0)?;
        let size = self.config.image_size / 2;
        let sigma = self.config.heatmap_sigma.max(1.0 / size as f64);
        let grid: Vec<f32> = (0..size).map(|i| ((i as f64 + 0.5) / size as f64) as f32).collect();
        let grid = Tensor::from_vec(grid, size, &self.device)?.to_dtype(landmarks.dtype())?;
        let pts = landmarks.reshape((n, NUM_LANDMARKS, 2))?;
        let scale = -1.0 / (2.0 * sigma * sigma);
        let axis = |coord: usize| -> Result<Tensor> {
            let c = pts.narrow(2, coord, 1)?;
            Ok((grid.reshape((1, 1, size))?.broadcast_sub(&c)?.sqr()? * scale)?.exp()?)
        };
        let gx = axis(0)?.reshape((n, NUM_LANDMARKS, 1, size))?;
        let gy = axis(1)?.reshape((n, NUM_LANDMARKS, size, 1))?;
        Ok(gy.broadcast_mul(&gx)?)
    }

    fn encode_landmarks(&self, landmarks: &Tensor) -> Result<Tensor> {
        let mut x = self.heatmaps(landmarks)?;
        for conv in &self.lmark {
            x = leaky_relu(&conv.forward(&x)?)?;
        }
        Ok(x)
    }

    /// `image (N,3,S,S)`, `landmarks (N,136)`.
    pub fn encode_example(&self, image: &Tensor, landmarks: &Tensor) -> Result<ExampleEncoding> {
        let s = self.config.image_size;
        let (_, c, h, w) = image.dims4()?;
        if (c, h, w) != (3, s, s) {
            return Err(Error::Shape(format!("example image must be 3x{s}x{s}, got {c}x{h}x{w}")));
        }
        let x1 = leaky_relu(&self.img[0].forward(image)?)?;
        let mid = leaky_relu(&self.img[1].forward(&x1)?)?;
        let x3 = leaky_relu(&self.img[2].forward(&mid)?)?;
        let deep = leaky_relu(&self.img[3].forward(&x3)?)?;
        Ok(ExampleEncoding { image: image.clone(), mid, deep, landmarks: self.encode_landmarks(landmarks)? })
    }

    /// Fusion for one frame given an encoded example.
    pub fn fuse(&self, example: &ExampleEncoding, current: &Tensor) -> Result<Fused> {
        let lm_t = self.encode_landmarks(current)?;
        let diff = (&lm_t - &example.landmarks)?;
        let deep = Tensor::cat(&[&example.deep, &diff], 1)?;
        let logits = self.gate.forward(&Tensor::cat(&[&lm_t, &example.landmarks], 1)?)?;
        let (_, _, h, w) = example.mid.dims4()?;
        let gate = sigmoid(&logits)?.upsample_nearest2d(h, w)?;
        Ok(Fused { deep, gate })
    }

    /// One-off fusion from raw inputs.
    pub fn fuse_features(&self, example_image: &Tensor, example_landmarks: &Tensor, current: &Tensor) -> Result<Fused> {
        self.fuse(&self.encode_example(example_image, example_landmarks)?, current)
    }

    /// Trunk output at the 1/4 stage for each fused frame, before blending.
    pub fn crnn_features(&self, fused: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut state: Option<Tensor> = None;
        let mut out = Vec::with_capacity(fused.len());
        for v in fused {
            let x = leaky_relu(&self.fusion.forward(v)?)?;
            let mut y = match &self.trunk {
                Trunk::Recurrent(cell) => {
                    let h = match &state {
                        Some(h) => h.clone(),
                        None => cell.zero_state(&x)?,
                    };
                    let h = cell.step(&x, &h)?;
                    state = Some(h.clone());
                    h
                }
                Trunk::PerFrame(a, b) => leaky_relu(&b.forward(&leaky_relu(&a.forward(&x)?)?)?)?,
            };
            for block in &self.res {
                y = block.forward(&y)?;
            }
            for up in &self.up {
                y = leaky_relu(&up.forward(&y)?)?;
            }
            out.push(y);
        }
        Ok(out)
    }

    /// Trunk plus the gated blend with the example's mid-level feature.
    pub fn crnn_blend(&self, fused: &[Tensor], gates: &[Tensor], mid: &Tensor) -> Result<Vec<Tensor>> {
        if fused.len() != gates.len() {
            return Err(Error::Shape(format!("{} fused frames vs {} gates", fused.len(), gates.len())));
        }
        self.crnn_features(fused)?.iter().zip(gates).map(|(f, g)| blend_features(f, g, mid)).collect()
    }

    /// Attention (sigmoid) and motion (tanh) heads on a blended feature.
    pub fn heads(&self, blended: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut y = blended.clone();
        for d in &self.decode {
            y = leaky_relu(&d.forward(&y)?)?;
        }
        Ok((sigmoid(&self.attention_head.forward(&y)?)?, self.motion_head.forward(&y)?.tanh()?))
    }

    /// `landmarks` holds T tensors `(N,136)`; images are `(N,3,S,S)`.
    pub fn forward(&self, landmarks: &[Tensor], example_image: &Tensor, example_landmarks: &Tensor) -> Result<VgNetOutput> {
        if landmarks.is_empty() {
            return Err(Error::Shape("VG-net needs at least one landmark frame".into()));
        }
        let example = self.encode_example(example_image, example_landmarks)?;
        let fused: Vec<Fused> = landmarks.iter().map(|p| self.fuse(&example, p)).collect::<Result<_>>()?;
        let deep: Vec<Tensor> = fused.iter().map(|f| f.deep.clone()).collect();
        let gates: Vec<Tensor> = fused.iter().map(|f| f.gate.clone()).collect();
        let blended = self.crnn_blend(&deep, &gates, &example.mid)?;
        let mut frames = Vec::with_capacity(blended.len());
        let mut attentions = Vec::with_capacity(blended.len());
        let mut motions = Vec::with_capacity(blended.len());
        let mut base = example_image.clone();
        for b in &blended {
            let (alpha, motion) = self.heads(b)?;
            let frame = if self.config.dma { composite_tensor(&alpha, &motion, &base)? } else { motion.clone() };
            if self.config.atvg_p {
                base = frame.clone();
            }
            frames.push(frame);
            attentions.push(alpha);
            motions.push(motion);
        }
        Ok(VgNetOutput { frames, attentions: self.config.dma.then_some(attentions), motions })
    }

    /// Runs one sequence through the network and converts every stream to domain types.
    pub fn generate(&self, landmarks: &[LandmarkSet], example_image: &Frame, example_landmarks: &LandmarkSet) -> Result<Generated> {
        let s = self.config.image_size;
        if example_image.height() != s || example_image.width() != s {
            return Err(Error::Shape(format!(
                "example image is {}x{}, network expects {s}x{s}",
                example_image.height(),
                example_image.width()
            )));
        }
        let lms: Vec<Tensor> = landmarks
            .iter()
            .map(|p| landmarks_to_tensor(&[p], self.dtype, &self.device))
            .collect::<Result<_>>()?;
        let img = frames_to_tensor(&[example_image], self.dtype, &self.device)?;
        let ex = landmarks_to_tensor(&[example_landmarks], self.dtype, &self.device)?;
        let out = self.forward(&lms, &img, &ex)?;
        let frames = tensor_to_frames(&Tensor::cat(&out.frames, 0)?)?;
        let motions = tensor_to_frames(&Tensor::cat(&out.motions, 0)?)?
            .into_iter()
            .map(|f| MotionFrame { height: s, width: s, values: f.as_slice().to_vec() })
            .collect();
        let attentions = match &out.attentions {
            Some(a) => Tensor::cat(a, 0)?
                .to_dtype(DType::F32)?
                .flatten_from(1)?
                .to_vec2::<f32>()?
                .into_iter()
                .map(|values| AttentionMap { height: s, width: s, values })
                .collect(),
            None => vec![AttentionMap { height: s, width: s, values: vec![0.0; s * s] }; landmarks.len()],
        };
        Ok(Generated { frames, attentions, motions })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::synth::IdentityParams;

    fn small(dma: bool, mmcrnn: bool) -> (ParamStore, VgNet) {
        let mut store = ParamStore::new(5, 0.05, DType::F32);
        let cfg = VgNetConfig { image_size: 16, channels: 8, dma, mmcrnn, ..Default::default() };
        let net = VgNet::new(&cfg, &mut store).unwrap();
        (store, net)
    }

    #[test]
    fn composite_scalar_case() {
        let a = AttentionMap { height: 1, width: 1, values: vec![0.25] };
        let m = MotionFrame { height: 1, width: 1, values: vec![0.8; 3] };
        let out = composite(&a, &m, &Frame::filled(1, 1, 0.4)).unwrap();
        for v in out.as_slice() {
            assert!((v - 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn composite_rejects_mismatch() {
        let a = AttentionMap { height: 2, width: 1, values: vec![0.5; 2] };
        let m = MotionFrame { height: 1, width: 1, values: vec![0.0; 3] };
        assert!(composite(&a, &m, &Frame::filled(1, 1, 0.0)).is_err());
    }

    #[test]
    fn equal_landmarks_zero_the_difference() {
        let (_, net) = small(true, true);
        let shape = IdentityParams::canonical().landmarks(0.05);
        let lm = landmarks_to_tensor(&[&shape], DType::F32, &Device::Cpu).unwrap();
        let img = frames_to_tensor(&[&Frame::filled(16, 16, 0.1)], DType::F32, &Device::Cpu).unwrap();
        let fused = net.fuse_features(&img, &lm, &lm).unwrap();
        assert_eq!(fused.deep.dim(1).unwrap(), 16);
        let diff = fused.deep.narrow(1, 8, 8).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn output_streams_match_length_and_ranges() {
        for (dma, mmcrnn) in [(true, true), (false, true), (true, false)] {
            let (_, net) = small(dma, mmcrnn);
            let id = IdentityParams::canonical();
            let lms: Vec<LandmarkSet> = (0..3).map(|t| id.landmarks(0.03 * t as f32)).collect();
            let ex = id.landmarks(0.0);
            let img = id.render(&ex, 16);
            let g = net.generate(&lms, &img, &ex).unwrap();
            assert_eq!((g.frames.len(), g.attentions.len(), g.motions.len()), (3, 3, 3));
            for a in &g.attentions {
                assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn swapping_earlier_frames_changes_the_last_output() {
        let (_, net) = small(true, true);
        let id = IdentityParams::canonical();
        let ex = id.landmarks(0.0);
        let img = id.render(&ex, 16);
        let (a, b, c) = (id.landmarks(0.02), id.landmarks(0.12), id.landmarks(0.06));
        let forward = net.generate(&[a, b, c], &img, &ex).unwrap();
        let swapped = net.generate(&[b, a, c], &img, &ex).unwrap();
        assert_ne!(forward.frames[2], swapped.frames[2]);
    }
}
