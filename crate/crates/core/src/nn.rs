//! Parameter storage and the small set of layers the networks are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels;

/// How a forward pass treats parameters and normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated, gradients tracked.
    Train,
    /// Running statistics, gradients tracked.
    Eval,
    /// Running statistics, parameters detached from the graph.
    Frozen,
}

impl Mode {
    fn weight(self, v: &Var) -> Tensor {
        match self {
            Mode::Frozen => v.as_tensor().detach(),
            _ => v.as_tensor().clone(),
        }
    }
}

/// Named trainable parameters plus non-trainable buffers of one network.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param(&mut self, name: &str, init: Tensor) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let v = Var::from_tensor(&init)?;
        self.params.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn buffer(&mut self, name: &str, init: Tensor) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::invalid(format!("duplicate buffer `{name}`")));
        }
        let v = Var::from_tensor(&init)?;
        self.buffers.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Every parameter and buffer, keyed `param/<name>` or `buffer/<name>`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let p = self
            .params
            .iter()
            .map(|(k, v)| (format!("param/{k}"), v.as_tensor().clone()));
        let b = self
            .buffers
            .iter()
            .map(|(k, v)| (format!("buffer/{k}"), v.as_tensor().clone()));
        p.chain(b).collect()
    }

    /// Overwrites parameters and buffers from `named_tensors`-style entries.
    /// Names and shapes must match exactly.
    pub fn load_named(&self, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        let mut seen = 0;
        for (kind, map) in [("param", &self.params), ("buffer", &self.buffers)] {
            for (k, v) in map {
                let key = format!("{kind}/{k}");
                let t = entries
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
                if t.dims() != v.dims() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for `{key}`: {:?} vs {:?}",
                        t.dims(),
                        v.dims()
                    )));
                }
                v.set(&t.to_dtype(v.dtype())?)?;
                seen += 1;
            }
        }
        if entries.len() != expected || seen != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                entries.len()
            )));
        }
        Ok(())
    }

    /// FNV-1a hash over all parameter bytes, for change detection in tests.
    pub fn fingerprint(&self) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (k, v) in &self.params {
            for b in k.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for x in v.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                for b in x.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        Ok(h)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// He-uniform, suited to rectified activations.
    He,
    Zeros,
}

#[derive(Debug, Clone)]
pub struct Conv {
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let shape = [cout, cin, k, k];
        let w = match init {
            Init::He => uniform(rng, &shape, (6.0 / (cin * k * k) as f64).sqrt())?,
            Init::Zeros => Tensor::zeros(&shape[..], DType::F32, &Device::Cpu)?,
        };
        Ok(Self {
            w: store.param(&format!("{name}.w"), w)?,
            b: store.param(&format!("{name}.b"), Tensor::zeros(cout, DType::F32, &Device::Cpu)?)?,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(kernels::conv2d_bias(
            x,
            &mode.weight(&self.w),
            &mode.weight(&self.b),
            self.stride,
            self.pad,
        )?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
        din: usize,
        dout: usize,
    ) -> Result<Self> {
        let w = uniform(rng, &[dout, din], (3.0 / din as f64).sqrt())?;
        Ok(Self {
            w: store.param(&format!("{name}.w"), w)?,
            b: store.param(&format!("{name}.b"), Tensor::zeros(dout, DType::F32, &Device::Cpu)?)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = x.matmul(&mode.weight(&self.w).t()?)?;
        Ok(y.broadcast_add(&mode.weight(&self.b))?)
    }
}

/// Bias-free classifier whose logits are scaled cosine similarities between
/// the (already normalized) input and each class weight.
#[derive(Debug, Clone)]
pub struct CosineHead {
    w: Var,
    scale: f64,
}

impl CosineHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
        din: usize,
        classes: usize,
        scale: f64,
    ) -> Result<Self> {
        let w = uniform(rng, &[classes, din], 1.0)?;
        Ok(Self {
            w: store.param(&format!("{name}.w"), w)?,
            scale,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = l2_normalize(&mode.weight(&self.w))?;
        Ok((x.matmul(&w.t()?)? * self.scale)?)
    }
}

/// Batch normalization over `(B, H, W)` per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let ones = Tensor::ones(c, DType::F32, &Device::Cpu)?;
        let zeros = Tensor::zeros(c, DType::F32, &Device::Cpu)?;
        Ok(Self {
            gamma: store.param(&format!("{name}.gamma"), ones.clone())?,
            beta: store.param(&format!("{name}.beta"), zeros.clone())?,
            running_mean: store.buffer(&format!("{name}.running_mean"), zeros)?,
            running_var: store.buffer(&format!("{name}.running_var"), ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if mode == Mode::Train {
            let (mean, var) = kernels::batch_stats(&x.detach())?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = self.running_mean.as_tensor().to_vec1::<f32>()?;
            let rv = self.running_var.as_tensor().to_vec1::<f32>()?;
            let rm: Vec<f32> = rm.iter().zip(&mean).map(|(&r, &v)| ((1.0 - m) * r as f64 + m * v) as f32).collect();
            let rv: Vec<f32> = rv
                .iter()
                .zip(&var)
                .map(|(&r, &v)| ((1.0 - m) * r as f64 + m * unbiased * v) as f32)
                .collect();
            self.running_mean.set(&Tensor::from_vec(rm, c, x.device())?)?;
            self.running_var.set(&Tensor::from_vec(rv, c, x.device())?)?;
            let g = mode.weight(&self.gamma).to_dtype(x.dtype())?;
            let bta = mode.weight(&self.beta).to_dtype(x.dtype())?;
            return Ok(kernels::batch_norm_train(x, &g, &bta, self.eps)?);
        }
        let mean = self.running_mean.as_tensor().detach().reshape((1, c, 1, 1))?;
        let var = self.running_var.as_tensor().detach().reshape((1, c, 1, 1))?;
        let xn = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let g = mode.weight(&self.gamma).reshape((1, c, 1, 1))?;
        let bta = mode.weight(&self.beta).reshape((1, c, 1, 1))?;
        Ok(xn.broadcast_mul(&g)?.broadcast_add(&bta)?)
    }
}

/// `x + conv(relu(bn(conv(x))))`, followed by a rectifier.
#[derive(Debug, Clone)]
pub struct ResBlock {
    c1: Conv,
    bn: BatchNorm,
    c2: Conv,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, c: usize) -> Result<Self> {
        Ok(Self {
            c1: Conv::new(store, &format!("{name}.c1"), rng, c, c, 3, 1, Init::He)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c)?,
            c2: Conv::new(store, &format!("{name}.c2"), rng, c, c, 3, 1, Init::He)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn.forward(&self.c1.forward(x, mode)?, mode)?;
        let h = relu(&h)?;
        let h = self.c2.forward(&h, mode)?;
        relu(&(x + h)?)
    }
}

pub const LEAK: f64 = 0.2;

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::leaky_relu(x, 0.0)?)
}

pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::leaky_relu(x, LEAK)?)
}

/// Bilinear x2 upsampling.
pub fn up2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(kernels::resize_bilinear(x, 2 * h, 2 * w)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Row-wise L2 normalization of a `(B, D)` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}
