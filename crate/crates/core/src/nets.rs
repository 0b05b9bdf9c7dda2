//! The trainable networks: flow estimators, the U-Net generator with warp
//! attention on its skips, the two-scale discriminator and the identity
//! embedder.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::domain::downsample_tensor;
use crate::error::{Error, Result};
use crate::nn::{
    l2_normalize, lrelu, relu, sigmoid, up2, BatchNorm, Conv, CosineHead, Init, Linear, Mode, ParamStore, ResBlock,
};
use crate::warp::{bilinear_warp, hflip, resize_flow};

fn check_input(x: &Tensor, resolution: usize, what: &str) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != 3 || h != resolution || w != resolution {
        return Err(Error::invalid(format!(
            "{what} expects (B, 3, {resolution}, {resolution}), got {:?}",
            x.dims()
        )));
    }
    Ok(())
}

fn check_resolution(resolution: usize) -> Result<()> {
    if resolution < 16 || resolution % 16 != 0 {
        return Err(Error::invalid("network resolution must be a multiple of 16"));
    }
    Ok(())
}

/// Two 3x3 convolutions, the first optionally strided, each with a leaky rectifier.
#[derive(Debug, Clone)]
struct DoubleConv {
    a: Conv,
    b: Conv,
}

impl DoubleConv {
    fn new(s: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            a: Conv::new(s, &format!("{name}.a"), rng, cin, cout, 3, stride, Init::He)?,
            b: Conv::new(s, &format!("{name}.b"), rng, cout, cout, 3, 1, Init::He)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        lrelu(&self.b.forward(&lrelu(&self.a.forward(x, mode)?)?, mode)?)
    }
}

const FLOW_CH: [usize; 4] = [16, 32, 48, 64];

/// Single-image flow estimator: a 4-level strided encoder and a decoder that
/// refines the flow residually at every level, starting from zero.
#[derive(Debug, Clone)]
pub struct FlowEstimator {
    pub store: ParamStore,
    resolution: usize,
    enc: Vec<DoubleConv>,
    reduce: Vec<Conv>,
    fuse: Vec<Conv>,
    pred: Vec<Conv>,
}

impl FlowEstimator {
    pub fn new(resolution: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_resolution(resolution)?;
        let mut s = ParamStore::new();
        let mut enc = Vec::new();
        let mut cin = 3;
        for (i, &c) in FLOW_CH.iter().enumerate() {
            enc.push(DoubleConv::new(&mut s, &format!("enc{i}"), rng, cin, c, 2)?);
            cin = c;
        }
        let mut reduce = Vec::new();
        let mut fuse = Vec::new();
        let mut pred = vec![Conv::new(&mut s, "pred3", rng, FLOW_CH[3], 2, 3, 1, Init::Zeros)?];
        for l in (0..3).rev() {
            let c = FLOW_CH[l];
            reduce.push(Conv::new(&mut s, &format!("reduce{l}"), rng, FLOW_CH[l + 1], c, 3, 1, Init::He)?);
            fuse.push(Conv::new(&mut s, &format!("fuse{l}"), rng, 2 * c + 2, c, 3, 1, Init::He)?);
            pred.push(Conv::new(&mut s, &format!("pred{l}"), rng, c, 2, 3, 1, Init::Zeros)?);
        }
        Ok(Self {
            store: s,
            resolution,
            enc,
            reduce,
            fuse,
            pred,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// `(B, 3, H, W)` image batch to a `(B, 2, H, W)` flow batch.
    pub fn forward(&self, img: &Tensor, mode: Mode) -> Result<Tensor> {
        check_input(img, self.resolution, "flow estimator")?;
        let mut feats = Vec::with_capacity(4);
        let mut x = img.clone();
        for e in &self.enc {
            x = e.forward(&x, mode)?;
            feats.push(x.clone());
        }
        let mut d = feats[3].clone();
        let mut flow = self.pred[0].forward(&d, mode)?;
        for (k, l) in (0..3).rev().enumerate() {
            let up = up2(&lrelu(&self.reduce[k].forward(&d, mode)?)?)?;
            let fup = (up2(&flow)? * 2.0)?;
            let cat = Tensor::cat(&[&feats[l], &up, &fup], 1)?;
            d = lrelu(&self.fuse[k].forward(&cat, mode)?)?;
            flow = (fup + self.pred[k + 1].forward(&d, mode)?)?;
        }
        Ok((up2(&flow)? * 2.0)?)
    }
}

/// Output of the warp attention module at one skip level.
#[derive(Debug, Clone)]
pub struct WamOutput {
    /// `A * (f_w ++ hflip(f_w))`, `2C` channels.
    pub features: Tensor,
    /// Gate in `(0, 1)` with the same shape as `features`.
    pub attention: Tensor,
}

/// Warp attention on one skip connection.
#[derive(Debug, Clone)]
pub struct WarpAttention {
    conv: Conv,
    bn: BatchNorm,
    res: ResBlock,
    out: Conv,
}

impl WarpAttention {
    pub fn new(s: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(s, &format!("{name}.conv"), rng, 2 * c, c, 3, 1, Init::He)?,
            bn: BatchNorm::new(s, &format!("{name}.bn"), c)?,
            res: ResBlock::new(s, &format!("{name}.res"), rng, c)?,
            out: Conv::new(s, &format!("{name}.out"), rng, c, 2 * c, 1, 1, Init::He)?,
        })
    }

    /// Resizes `flow` to the feature grid, warps `f` with it and concatenates
    /// the horizontal mirror.
    pub fn warped_pair(f: &Tensor, flow: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = f.dims4()?;
        let fl = resize_flow(flow, h, w)?;
        let fw = bilinear_warp(f, &fl)?.data;
        let flipped = hflip(&fw)?;
        Ok(Tensor::cat(&[&fw, &flipped], 1)?)
    }

    pub fn attention(&self, pair: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn.forward(&self.conv.forward(pair, mode)?, mode)?;
        let h = relu(&h)?;
        let h = self.res.forward(&h, mode)?;
        sigmoid(&self.out.forward(&h, mode)?)
    }

    pub fn forward(&self, f: &Tensor, flow: &Tensor, mode: Mode) -> Result<WamOutput> {
        let pair = Self::warped_pair(f, flow)?;
        let attention = self.attention(&pair, mode)?;
        Ok(WamOutput {
            features: (&attention * &pair)?,
            attention,
        })
    }
}

const GEN_CH: [usize; 5] = [16, 32, 48, 64, 64];

/// Synthesized image plus the attention gates of every warped skip.
#[derive(Debug, Clone)]
pub struct GenOutput {
    pub image: Tensor,
    /// Shallow to deep: levels 1, 2, 3.
    pub attention: Vec<Tensor>,
}

/// U-Net generator; skips 1..=3 pass through warp attention, skip 0 is plain.
#[derive(Debug, Clone)]
pub struct Generator {
    pub store: ParamStore,
    resolution: usize,
    enc: Vec<DoubleConv>,
    wam: Vec<WarpAttention>,
    reduce: Vec<Conv>,
    fuse: Vec<Conv>,
    head: Conv,
}

impl Generator {
    pub fn new(resolution: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_resolution(resolution)?;
        let mut s = ParamStore::new();
        let mut enc = Vec::new();
        let mut cin = 3;
        for (i, &c) in GEN_CH.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            enc.push(DoubleConv::new(&mut s, &format!("enc{i}"), rng, cin, c, stride)?);
            cin = c;
        }
        let wam = (1..=3)
            .map(|l| WarpAttention::new(&mut s, &format!("wam{l}"), rng, GEN_CH[l]))
            .collect::<Result<Vec<_>>>()?;
        let mut reduce = Vec::new();
        let mut fuse = Vec::new();
        for l in (0..4).rev() {
            let c = GEN_CH[l];
            let skip = if l == 0 { c } else { 2 * c };
            reduce.push(Conv::new(&mut s, &format!("reduce{l}"), rng, GEN_CH[l + 1], c, 3, 1, Init::He)?);
            fuse.push(Conv::new(&mut s, &format!("fuse{l}"), rng, c + skip, c, 3, 1, Init::He)?);
        }
        let head = Conv::new(&mut s, "head", rng, GEN_CH[0], 3, 3, 1, Init::He)?;
        Ok(Self {
            store: s,
            resolution,
            enc,
            wam,
            reduce,
            fuse,
            head,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Frontalizes a `(B, 3, H, W)` batch given the forward flow `(B, 2, H, W)`.
    pub fn forward(&self, img: &Tensor, flow: &Tensor, mode: Mode) -> Result<GenOutput> {
        check_input(img, self.resolution, "generator")?;
        let (fb, fc, fh, fw) = flow.dims4()?;
        if fb != img.dim(0)? || fc != 2 || fh != self.resolution || fw != self.resolution {
            return Err(Error::invalid(format!("generator flow has shape {:?}", flow.dims())));
        }
        let mut feats = Vec::with_capacity(5);
        let mut x = img.clone();
        for e in &self.enc {
            x = e.forward(&x, mode)?;
            feats.push(x.clone());
        }
        let mut skips = vec![feats[0].clone()];
        let mut attention = Vec::with_capacity(3);
        for (l, wam) in self.wam.iter().enumerate() {
            let out = wam.forward(&feats[l + 1], flow, mode)?;
            skips.push(out.features);
            attention.push(out.attention);
        }
        let mut d = feats[4].clone();
        for (k, l) in (0..4).rev().enumerate() {
            let up = up2(&lrelu(&self.reduce[k].forward(&d, mode)?)?)?;
            let cat = Tensor::cat(&[&up, &skips[l]], 1)?;
            d = lrelu(&self.fuse[k].forward(&cat, mode)?)?;
        }
        Ok(GenOutput {
            image: sigmoid(&self.head.forward(&d, mode)?)?,
            attention,
        })
    }
}

#[derive(Debug, Clone)]
struct Critic {
    c1: Conv,
    c2: Conv,
    c3: Conv,
}

impl Critic {
    fn new(s: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            c1: Conv::new(s, &format!("{name}.c1"), rng, 3, 16, 3, 2, Init::He)?,
            c2: Conv::new(s, &format!("{name}.c2"), rng, 16, 32, 3, 2, Init::He)?,
            c3: Conv::new(s, &format!("{name}.c3"), rng, 32, 1, 3, 1, Init::He)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = lrelu(&self.c1.forward(x, mode)?)?;
        let h = lrelu(&self.c2.forward(&h, mode)?)?;
        self.c3.forward(&h, mode)
    }
}

/// Patch critics at full and half resolution; scores are logits.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub store: ParamStore,
    resolution: usize,
    full: Critic,
    half: Critic,
}

impl Discriminator {
    pub fn new(resolution: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_resolution(resolution)?;
        let mut s = ParamStore::new();
        let full = Critic::new(&mut s, "full", rng)?;
        let half = Critic::new(&mut s, "half", rng)?;
        Ok(Self {
            store: s,
            resolution,
            full,
            half,
        })
    }

    /// Score maps `[(B, 1, H/4, W/4), (B, 1, H/8, W/8)]`.
    pub fn forward(&self, img: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        check_input(img, self.resolution, "discriminator")?;
        let small = downsample_tensor(img, 2)?;
        Ok(vec![self.full.forward(img, mode)?, self.half.forward(&small, mode)?])
    }
}

pub const EMBED_DIM: usize = 64;
const EMBED_CH: [usize; 4] = [16, 32, 48, 64];
/// Logit scale of the cosine classifier heads.
const COS_SCALE: f64 = 16.0;

/// Normalized identity features.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub pool: Tensor,
    pub fc2: Tensor,
}

/// Small convolutional identity network with cosine classifier heads used
/// only while it is being trained.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub store: ParamStore,
    resolution: usize,
    classes: usize,
    convs: Vec<(Conv, BatchNorm)>,
    last: (Conv, BatchNorm),
    fc2: Linear,
    head_pool: CosineHead,
    head_fc2: CosineHead,
}

impl Embedder {
    pub fn new(resolution: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_resolution(resolution)?;
        if classes < 2 {
            return Err(Error::invalid("embedder needs at least 2 classes"));
        }
        let mut s = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in EMBED_CH.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let conv = Conv::new(&mut s, &format!("conv{i}"), rng, cin, c, 3, stride, Init::He)?;
            convs.push((conv, BatchNorm::new(&mut s, &format!("bn{i}"), c)?));
            cin = c;
        }
        let last = (
            Conv::new(&mut s, "conv4", rng, cin, EMBED_DIM, 3, 1, Init::He)?,
            BatchNorm::new(&mut s, "bn4", EMBED_DIM)?,
        );
        let fc2 = Linear::new(&mut s, "fc2", rng, EMBED_DIM, EMBED_DIM)?;
        let head_pool = CosineHead::new(&mut s, "head_pool", rng, EMBED_DIM, classes, COS_SCALE)?;
        let head_fc2 = CosineHead::new(&mut s, "head_fc2", rng, EMBED_DIM, classes, COS_SCALE)?;
        Ok(Self {
            store: s,
            resolution,
            classes,
            convs,
            last,
            fc2,
            head_pool,
            head_fc2,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn raw(&self, img: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        check_input(img, self.resolution, "embedder")?;
        let mut x = img.clone();
        for (c, bn) in &self.convs {
            x = lrelu(&bn.forward(&c.forward(&x, mode)?, mode)?)?;
        }
        // Pooled before the activation so embeddings are centred.
        let x = self.last.1.forward(&self.last.0.forward(&x, mode)?, mode)?;
        let pool = x.mean(3)?.mean(2)?;
        let fc2 = self.fc2.forward(&pool, mode)?;
        Ok((pool, fc2))
    }

    pub fn forward(&self, img: &Tensor, mode: Mode) -> Result<Embedding> {
        let (pool, fc2) = self.raw(img, mode)?;
        Ok(Embedding {
            pool: l2_normalize(&pool)?,
            fc2: l2_normalize(&fc2)?,
        })
    }

    /// Cosine-classifier logits from both feature taps.
    pub fn logits(&self, img: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let e = self.forward(img, mode)?;
        Ok((
            self.head_pool.forward(&e.pool, mode)?,
            self.head_fc2.forward(&e.fc2, mode)?,
        ))
    }
}
