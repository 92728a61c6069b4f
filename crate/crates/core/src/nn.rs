//! Small layer library on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`], which draws initial weights from a seeded
//! normal distribution (candle's own CPU RNG cannot be seeded) or takes them from a
//! loaded checkpoint.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::media::Frame;
use crate::{Error, Result};

pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Named trainable tensors of one network.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    init_std: f64,
    fan_in: bool,
    rng: ChaCha8Rng,
    vars: BTreeMap<String, Var>,
    preset: Option<TensorMap>,
}

impl ParamStore {
    /// Fresh parameters: weights ~ N(0, init_std), biases zero.
    pub fn new(seed: u64, init_std: f64, dtype: DType) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            init_std,
            fan_in: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vars: BTreeMap::new(),
            preset: None,
        }
    }

    /// Fresh parameters with weight std `sqrt(2 / fan_in)`, where the fan-in is the
    /// product of every dimension after the first.
    pub fn fan_in(seed: u64, dtype: DType) -> Self {
        Self { fan_in: true, ..Self::new(seed, 1.0, dtype) }
    }

    /// Parameters taken from `tensors`; every requested name must be present.
    pub fn from_tensors(tensors: TensorMap, dtype: DType) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            init_std: 0.0,
            fan_in: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            vars: BTreeMap::new(),
            preset: Some(tensors),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn create(&mut self, name: &str, shape: &[usize], fill: Option<f32>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let numel: usize = shape.iter().product();
        let values: Vec<f32> = match &self.preset {
            Some(preset) => {
                let (s, v) = preset
                    .get(name)
                    .ok_or_else(|| Error::Data(format!("checkpoint has no tensor {name}")))?;
                if s.as_slice() != shape {
                    return Err(Error::Shape(format!("tensor {name}: checkpoint shape {s:?}, model shape {shape:?}")));
                }
                v.clone()
            }
            None if fill.is_some() => vec![fill.unwrap_or(0.0); numel],
            None if self.init_std == 0.0 => vec![0.0; numel],
            None => {
                let std = if self.fan_in {
                    (2.0 / shape[1..].iter().product::<usize>().max(1) as f64).sqrt()
                } else {
                    self.init_std
                };
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..numel).map(|_| normal.sample(&mut self.rng) as f32).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.create(name, shape, None)
    }

    pub fn bias(&mut self, name: &str, len: usize) -> Result<Tensor> {
        self.create(name, &[len], Some(0.0))
    }

    /// Bias starting at `value` instead of zero; checkpoint values still take precedence.
    pub fn bias_filled(&mut self, name: &str, len: usize, value: f32) -> Result<Tensor> {
        self.create(name, &[len], Some(value))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place (shared by every layer holding it).
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.vars.get(name).ok_or_else(|| Error::Config(format!("no parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn zero_out(&self, name: &str) -> Result<()> {
        let var = self.vars.get(name).ok_or_else(|| Error::Config(format!("no parameter {name}")))?;
        var.set(&var.zeros_like()?)?;
        Ok(())
    }

    /// Current values as f32, for checkpoints and bitwise comparisons.
    pub fn to_map(&self) -> Result<TensorMap> {
        self.vars
            .iter()
            .map(|(name, var)| {
                let t = var.as_tensor();
                let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Ok((name.clone(), (t.dims().to_vec(), values)))
            })
            .collect()
    }

    /// Exact copy of every parameter in its native dtype, as f64.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .map(|(name, var)| Ok((name.clone(), var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)))
            .collect()
    }

    pub fn adam(&self, lr: f64) -> Result<AdamW> {
        let params = ParamsAdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        Ok(AdamW::new(self.vars(), params)?)
    }
}

/// One optimizer step; gradients for variables outside the optimizer are ignored.
pub fn adam_step(opt: &mut AdamW, loss: &Tensor) -> Result<()> {
    opt.backward_step(loss)?;
    Ok(())
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

/// Fused op; the backward pass uses `s (1 - s)` and stays finite for saturated inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// `log(1 + exp(x))`, stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self { w: store.weight(&format!("{name}.weight"), &[out_dim, in_dim])?, b: store.bias(&format!("{name}.bias"), out_dim)? })
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, in_dim))?.matmul(&self.w.t()?)?.broadcast_add(&self.b)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.b.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    w: Tensor,
    b: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::with_bias(store, name, [in_ch, out_ch, kernel], stride, padding, 0.0)
    }

    /// Like [`Conv2d::new`] with every fresh bias set to `bias`. `dims` is
    /// `[in_ch, out_ch, kernel]`.
    pub fn with_bias(store: &mut ParamStore, name: &str, dims: [usize; 3], stride: usize, padding: usize, bias: f32) -> Result<Self> {
        let [in_ch, out_ch, kernel] = dims;
        Ok(Self {
            w: store.weight(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel])?,
            b: store.bias_filled(&format!("{name}.bias"), out_ch, bias)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.w, self.padding, self.stride, 1, 1)?;
        let c = self.b.dim(0)?;
        Ok(y.broadcast_add(&self.b.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    w: Tensor,
    b: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    /// A 4x4 stride-2 padding-1 transposed convolution doubles the spatial size.
    pub fn upsample2(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            w: store.weight(&format!("{name}.weight"), &[in_ch, out_ch, 4, 4])?,
            b: store.bias(&format!("{name}.bias"), out_ch)?,
            stride: 2,
            padding: 1,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.w, self.padding, 0, self.stride, 1)?;
        let c = self.b.dim(0)?;
        Ok(y.broadcast_add(&self.b.reshape((1, c, 1, 1))?)?)
    }
}

/// Standard LSTM cell with gate order (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct LstmCell {
    input: Linear,
    recurrent: Linear,
    hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(store, &format!("{name}.ih"), in_dim, 4 * hidden)?,
            recurrent: Linear::new(store, &format!("{name}.hh"), hidden, 4 * hidden)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, batch: usize, like: &Tensor) -> Result<LstmState> {
        let z = Tensor::zeros((batch, self.hidden), like.dtype(), like.device())?;
        Ok(LstmState { h: z.clone(), c: z })
    }

    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<LstmState> {
        let gates = (self.input.forward(x)? + self.recurrent.forward(&state.h)?)?;
        let chunks = gates.chunk(4, D::Minus1)?;
        let i = sigmoid(&chunks[0])?;
        let f = sigmoid(&chunks[1])?;
        let g = chunks[2].tanh()?;
        let o = sigmoid(&chunks[3])?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok(LstmState { h, c })
    }
}

/// Convolutional GRU cell over feature maps.
#[derive(Debug, Clone)]
pub struct ConvGruCell {
    gates: Conv2d,
    candidate: Conv2d,
    hidden: usize,
}

impl ConvGruCell {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            gates: Conv2d::new(store, &format!("{name}.gates"), in_ch + hidden, 2 * hidden, 3, 1, 1)?,
            candidate: Conv2d::new(store, &format!("{name}.candidate"), in_ch + hidden, hidden, 3, 1, 1)?,
            hidden,
        })
    }

    pub fn zero_state(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        Ok(Tensor::zeros((b, self.hidden, h, w), x.dtype(), x.device())?)
    }

    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let xh = Tensor::cat(&[x, h], 1)?;
        let gates = sigmoid(&self.gates.forward(&xh)?)?;
        let z = gates.narrow(1, 0, self.hidden)?;
        let r = gates.narrow(1, self.hidden, self.hidden)?;
        let xrh = Tensor::cat(&[x, &(r * h)?], 1)?;
        let cand = self.candidate.forward(&xrh)?.tanh()?;
        let keep = (z.ones_like()? - &z)?;
        Ok(((keep * h)? + (z * cand)?)?)
    }
}

/// Frames as an `(N, 3, H, W)` tensor.
pub fn frames_to_tensor(frames: &[&Frame], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| Error::Shape("no frames".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
    for f in frames {
        if f.height() != h || f.width() != w {
            return Err(Error::Shape("frames differ in size".into()));
        }
        data.extend(f.to_chw());
    }
    Ok(Tensor::from_vec(data, (frames.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Inverse of [`frames_to_tensor`] for an `(N, 3, H, W)` tensor.
pub fn tensor_to_frames(t: &Tensor) -> Result<Vec<Frame>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    (0..n).map(|i| Frame::from_chw(h, w, &flat[i * 3 * h * w..(i + 1) * 3 * h * w])).collect()
}

/// Flattened landmark sets as an `(N, 136)` tensor.
pub fn landmarks_to_tensor(sets: &[&crate::media::LandmarkSet], dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = sets.iter().flat_map(|s| s.flatten()).collect();
    Ok(Tensor::from_vec(data, (sets.len(), crate::media::LANDMARK_DIM), device)?.to_dtype(dtype)?)
}
