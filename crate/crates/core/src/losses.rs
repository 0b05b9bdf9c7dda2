//! Training objectives. Every loss takes batched `(B, C, H, W)` tensors and
//! returns a scalar tensor so it can be differentiated.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::domain::downsample_tensor;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nets::{Discriminator, Embedder};
use crate::nn::Mode;

/// Multi-scale masked L1. Both images are multiplied by the mask before
/// average pooling, so masked-out pixels cannot affect the value; each scale
/// is normalized by its pooled mask mass. Returns the sum and the per-scale
/// terms.
pub fn masked_multiscale_l1(a: &Tensor, b: &Tensor, mask: &Tensor, scales: usize) -> Result<(Tensor, Vec<Tensor>)> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!("loss inputs differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let c = a.dim(1)? as f64;
    let am = a.broadcast_mul(mask)?;
    let bm = b.broadcast_mul(mask)?;
    let mut terms = Vec::with_capacity(scales);
    for s in 0..scales {
        let f = 1usize << s;
        let (da, db, dm) = if f == 1 {
            (am.clone(), bm.clone(), mask.clone())
        } else {
            (downsample_tensor(&am, f)?, downsample_tensor(&bm, f)?, downsample_tensor(mask, f)?)
        };
        let num = (da - db)?.abs()?.sum_all()?;
        let den = (dm.sum_all()? * c)?.maximum(1e-8)?;
        terms.push(num.div(&den)?);
    }
    let total = terms.iter().skip(1).try_fold(terms[0].clone(), |acc, t| acc + t)?;
    Ok((total, terms))
}

/// Multi-scale masked L1 between the synthesized and target frontal views.
pub fn pixel_loss(synth: &Tensor, target: &Tensor, mask: &Tensor, scales: usize) -> Result<Tensor> {
    Ok(masked_multiscale_l1(synth, target, mask, scales)?.0)
}

/// Same measure as [`pixel_loss`] between the back-warped synthesis and the
/// input profile.
pub fn illum_preserve_loss(warped: &Tensor, profile: &Tensor, mask: &Tensor, scales: usize) -> Result<Tensor> {
    Ok(masked_multiscale_l1(warped, profile, mask, scales)?.0)
}

/// Fixed convolutional pyramid with five tap points. The default weights are
/// seeded random filters whose taps each sum to zero, so flat regions give
/// zero response.
#[derive(Debug, Clone)]
pub struct PerceptualBackbone {
    layers: Vec<(Tensor, Tensor, usize)>,
    pub weights: Vec<f64>,
}

const BACKBONE_CH: [usize; 5] = [8, 16, 32, 32, 32];

impl PerceptualBackbone {
    pub fn seeded(seed: u64, weights: Vec<f64>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7065_7263);
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, &c) in BACKBONE_CH.iter().enumerate() {
            let k = cin * 9;
            let mut w = vec![0f32; c * k];
            for o in 0..c {
                let row = &mut w[o * k..(o + 1) * k];
                for v in row.iter_mut() {
                    *v = rng.gen_range(-1.0f32..1.0);
                }
                let mean = row.iter().sum::<f32>() / k as f32;
                let mut norm = 0f32;
                for v in row.iter_mut() {
                    *v -= mean;
                    norm += *v * *v;
                }
                let scale = (2.0f32).sqrt() / norm.sqrt().max(1e-6);
                row.iter_mut().for_each(|v| *v *= scale);
            }
            let w = Tensor::from_vec(w, (c, cin, 3, 3), &Device::Cpu)?;
            let b = Tensor::zeros(c, DType::F32, &Device::Cpu)?;
            layers.push((w, b, if i == 0 { 1 } else { 2 }));
            cin = c;
        }
        Self::from_layers(layers, weights)
    }

    /// Ingestion hook for externally trained filters: five `(weight, bias,
    /// stride)` layers applied in sequence with a rectifier in between.
    pub fn from_layers(layers: Vec<(Tensor, Tensor, usize)>, weights: Vec<f64>) -> Result<Self> {
        if layers.len() != 5 || weights.len() != 5 {
            return Err(Error::invalid("perceptual backbone needs exactly 5 taps and 5 weights"));
        }
        let mut cin = 3;
        for (w, b, s) in &layers {
            let (co, ci, kh, kw) = w.dims4()?;
            if ci != cin || kh != kw || kh % 2 == 0 || b.dims() != [co] || *s == 0 {
                return Err(Error::invalid("perceptual backbone layer shapes are inconsistent"));
            }
            cin = co;
        }
        let layers = layers
            .into_iter()
            .map(|(w, b, s)| Ok((w.to_dtype(DType::F32)?.detach(), b.to_dtype(DType::F32)?.detach(), s)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, weights })
    }

    /// Pre-activation outputs of the first `n` layers.
    pub fn taps(&self, x: &Tensor, n: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(n);
        let mut h = x.clone();
        for (i, (w, b, s)) in self.layers.iter().take(n).enumerate() {
            if i > 0 {
                h = kernels::leaky_relu(&h, 0.0)?;
            }
            let pad = w.dim(2)? / 2;
            h = kernels::conv2d_bias(&h, &w.to_dtype(x.dtype())?, &b.to_dtype(x.dtype())?, *s, pad)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// `sum_i w_i * mean|phi_i(a) - phi_i(b)|`.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let n = a.dim(0)?;
        let both = Tensor::cat(&[a, b], 0)?;
        let taps = self.taps(&both, 5)?;
        let mut total = Tensor::zeros((), a.dtype(), a.device())?;
        for (t, &w) in taps.iter().zip(&self.weights) {
            let d = (t.narrow(0, 0, n)? - t.narrow(0, n, n)?)?.abs()?.mean_all()?;
            total = (total + (d * w)?)?;
        }
        Ok(total)
    }
}

/// Square crops around facial parts. `boxes[k][b]` is the top-left corner of
/// region `k` in batch item `b`, or `None` when the region could not be
/// placed for that item.
#[derive(Debug, Clone, PartialEq)]
pub struct Regions {
    pub size: usize,
    pub boxes: Vec<Vec<Option<[usize; 2]>>>,
}

impl Regions {
    pub fn none() -> Self {
        Self {
            size: 0,
            boxes: Vec::new(),
        }
    }

    /// Boxes of side `size` centred on each group's landmark centroid and
    /// shifted to lie inside an `h x w` image. `groups[k][b]` lists the
    /// landmark points of group `k` for item `b`.
    pub fn from_centroids(groups: &[Vec<Vec<[f32; 2]>>], size: usize, h: usize, w: usize) -> Self {
        let boxes = groups
            .iter()
            .map(|per_item| {
                per_item
                    .iter()
                    .map(|pts| {
                        if pts.is_empty() || size == 0 || size > h || size > w {
                            return None;
                        }
                        let n = pts.len() as f32;
                        let cx = pts.iter().map(|p| p[0]).sum::<f32>() / n;
                        let cy = pts.iter().map(|p| p[1]).sum::<f32>() / n;
                        if !cx.is_finite() || !cy.is_finite() {
                            return None;
                        }
                        let half = size as f32 / 2.0;
                        let x0 = (cx - half).round().clamp(0.0, (w - size) as f32) as usize;
                        let y0 = (cy - half).round().clamp(0.0, (h - size) as f32) as usize;
                        Some([x0, y0])
                    })
                    .collect()
            })
            .collect();
        Self { size, boxes }
    }
}

/// Perceptual distance over the whole (masked) image plus the mean of the
/// same distance over the facial-region crops. Returns the loss and the number
/// of regions skipped because at least one item had no valid box.
pub fn perceptual_loss(
    backbone: &PerceptualBackbone,
    synth: &Tensor,
    target: &Tensor,
    mask: &Tensor,
    regions: &Regions,
) -> Result<(Tensor, usize)> {
    let a = synth.broadcast_mul(mask)?;
    let b = target.broadcast_mul(mask)?;
    let full = backbone.distance(&a, &b)?;
    let mut region_terms = Vec::new();
    let mut skipped = 0;
    for per_item in &regions.boxes {
        if regions.size == 0 || per_item.len() != a.dim(0)? || per_item.iter().any(|b| b.is_none()) {
            skipped += 1;
            continue;
        }
        let crop = |t: &Tensor| -> Result<Tensor> {
            let parts = per_item
                .iter()
                .enumerate()
                .map(|(i, bx)| {
                    let [x0, y0] = bx.unwrap();
                    Ok(t.narrow(0, i, 1)?.narrow(2, y0, regions.size)?.narrow(3, x0, regions.size)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::cat(&parts, 0)?)
        };
        region_terms.push(backbone.distance(&crop(&a)?, &crop(&b)?)?);
    }
    if region_terms.is_empty() {
        return Ok((full, skipped));
    }
    let n = region_terms.len() as f64;
    let sum = region_terms.iter().skip(1).try_fold(region_terms[0].clone(), |acc, t| acc + t)?;
    Ok(((full + (sum / n)?)?, skipped))
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    // max(x, 0) + log(1 + exp(-|x|))
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Non-saturating logistic losses averaged over both critic scales:
/// `d = E[softplus(-D(real))] + E[softplus(D(fake))]`, `g = E[softplus(-D(fake))]`.
pub fn adversarial_from_scores(real: &[Tensor], fake_for_d: &[Tensor], fake_for_g: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if real.len() != fake_for_d.len() || real.len() != fake_for_g.len() || real.is_empty() {
        return Err(Error::invalid("critic score lists must be non-empty and aligned"));
    }
    let n = real.len() as f64;
    let mut d = Tensor::zeros((), real[0].dtype(), real[0].device())?;
    let mut g = d.clone();
    for ((r, fd), fg) in real.iter().zip(fake_for_d).zip(fake_for_g) {
        d = (d + (softplus(&r.neg()?)?.mean_all()? + softplus(fd)?.mean_all()?)?)?;
        g = (g + softplus(&fg.neg()?)?.mean_all()?)?;
    }
    Ok(((d / n)?, (g / n)?))
}

/// `(d_loss, g_loss)`; the discriminator term sees `fake` detached, the
/// generator term sees the critic's parameters frozen.
pub fn adversarial_losses(d: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let sr = d.forward(real, Mode::Eval)?;
    let sfd = d.forward(&fake.detach(), Mode::Eval)?;
    let sfg = d.forward(fake, Mode::Frozen)?;
    adversarial_from_scores(&sr, &sfd, &sfg)
}

/// `||fc2(x) - fc2(t)||_1 + ||pool(x) - pool(t)||_1`, averaged over the batch.
pub fn identity_loss_single(e: &Embedder, x: &Tensor, target: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)? as f64;
    let ex = e.forward(x, Mode::Frozen)?;
    let et = e.forward(&target.detach(), Mode::Frozen)?;
    let d = ((ex.fc2 - et.fc2)?.abs()?.sum_all()? + (ex.pool - et.pool)?.abs()?.sum_all()?)?;
    Ok((d / n)?)
}

/// Identity loss on both the raw synthesis and the filtered synthesis.
pub fn identity_loss(e: &Embedder, synth: &Tensor, filtered: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((identity_loss_single(e, synth, target)? + identity_loss_single(e, filtered, target)?)?)
}

/// Mean of `||flow(q) - (p - q)||_2` with `flow(q)` sampled bilinearly at `q`.
/// `dst` holds the points `q` where the flow is read, `src` the points `p`
/// they should map to; both are `B * N` points, item-major.
pub fn landmark_flow_loss(flow: &Tensor, src: &[[f32; 2]], dst: &[[f32; 2]]) -> Result<Tensor> {
    let (b, c, h, w) = flow.dims4()?;
    if c != 2 {
        return Err(Error::invalid("flow needs 2 channels"));
    }
    if src.len() != dst.len() || src.is_empty() || src.len() % b != 0 {
        return Err(Error::invalid("landmark sets must be non-empty, aligned and split evenly over the batch"));
    }
    let oob = |p: &[f32; 2]| !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f32 && p[1] <= (h - 1) as f32);
    if src.iter().chain(dst).any(oob) {
        return Err(Error::invalid("landmark out of bounds"));
    }
    let n = src.len() / b;
    let pts: Vec<[f64; 2]> = dst.iter().map(|q| [q[0] as f64, q[1] as f64]).collect();
    let sampled = kernels::sample_points(flow, pts, n)?;
    let mut target = vec![0f64; b * 2 * n];
    for bi in 0..b {
        for k in 0..n {
            let (p, q) = (src[bi * n + k], dst[bi * n + k]);
            target[(bi * 2) * n + k] = (p[0] - q[0]) as f64;
            target[(bi * 2 + 1) * n + k] = (p[1] - q[1]) as f64;
        }
    }
    let target = Tensor::from_vec(target, (b, 2, n), flow.device())?.to_dtype(flow.dtype())?;
    let err = (sampled - target)?.sqr()?.sum(1)?;
    Ok((err + 1e-12)?.sqrt()?.mean_all()?)
}

/// Feature taps used by the sampling-correctness loss.
const SC_TAPS: usize = 2;
const SC_EPS: f64 = 1e-6;

/// `1 - masked mean cosine similarity` between backbone features of
/// `W(src, flow)` and `dst`, averaged over the first two taps. Both images are
/// masked before feature extraction.
pub fn sampling_correctness_loss(
    backbone: &PerceptualBackbone,
    src: &Tensor,
    dst: &Tensor,
    flow: &Tensor,
    mask: &Tensor,
) -> Result<Tensor> {
    let warped = kernels::warp(src, flow)?;
    let a = warped.broadcast_mul(mask)?;
    let b = dst.broadcast_mul(mask)?;
    let n = a.dim(0)?;
    let taps = backbone.taps(&Tensor::cat(&[&a, &b], 0)?, SC_TAPS)?;
    let mut total = Tensor::zeros((), src.dtype(), src.device())?;
    for t in &taps {
        let fa = t.narrow(0, 0, n)?;
        let fb = t.narrow(0, n, n)?;
        let dot = (&fa * &fb)?.sum_keepdim(1)?;
        let na = fa.sqr()?.sum_keepdim(1)?;
        let nb = fb.sqr()?.sum_keepdim(1)?;
        let cos = ((dot + SC_EPS)? / ((na + SC_EPS)? * (nb + SC_EPS)?)?.sqrt()?)?;
        let factor = mask.dim(2)? / t.dim(2)?;
        let m = if factor == 1 { mask.clone() } else { downsample_tensor(mask, factor)? };
        let den = m.sum_all()?.maximum(1e-8)?;
        total = (total + (cos * m)?.sum_all()?.div(&den)?)?;
    }
    Ok(((total / taps.len() as f64)?.neg()? + 1.0)?)
}

/// `mean|d/dx flow| + mean|d/dy flow|`, summed over the two channels.
pub fn flow_regularization(flow: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = flow.dims4()?;
    let mut total = Tensor::zeros((), flow.dtype(), flow.device())?;
    if w > 1 {
        let dx = (flow.narrow(3, 1, w - 1)? - flow.narrow(3, 0, w - 1)?)?.abs()?.sum_all()?;
        total = (total + (dx / (b * h * (w - 1)) as f64)?)?;
    }
    if h > 1 {
        let dy = (flow.narrow(2, 1, h - 1)? - flow.narrow(2, 0, h - 1)?)?.abs()?.sum_all()?;
        total = (total + (dy / (b * (h - 1) * w) as f64)?)?;
    }
    Ok(total)
}

/// Scalar summary of one training step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pixel: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub illum_preserve: f64,
    pub identity: f64,
    pub total: f64,
    pub pixel_scales: Vec<f64>,
    pub illum_scales: Vec<f64>,
    pub d_loss: f64,
    pub skipped_regions: usize,
}

impl LossReport {
    pub fn components(&self) -> [f64; 5] {
        [self.pixel, self.perceptual, self.adversarial, self.illum_preserve, self.identity]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().chain([&self.total, &self.d_loss]).all(|v| v.is_finite())
    }

    /// One JSON-lines record with exactly the logged keys.
    pub fn to_json_line(&self, step: u64) -> String {
        serde_json::json!({
            "step": step,
            "pixel": self.pixel,
            "perceptual": self.perceptual,
            "adversarial": self.adversarial,
            "illum_preserve": self.illum_preserve,
            "identity": self.identity,
            "total": self.total,
        })
        .to_string()
    }
}

/// Builds a report whose total is the lambda-weighted sum of the components.
pub fn total_loss(components: [f64; 5], cfg: &Config) -> LossReport {
    let total = components.iter().zip(&cfg.lambdas).map(|(c, l)| c * l).sum();
    LossReport {
        pixel: components[0],
        perceptual: components[1],
        adversarial: components[2],
        illum_preserve: components[3],
        identity: components[4],
        total,
        ..LossReport::default()
    }
}

/// The differentiable counterpart of [`total_loss`].
pub fn weighted_sum(terms: &[Tensor; 5], lambdas: &[f64; 5]) -> Result<Tensor> {
    let mut total = Tensor::zeros((), terms[0].dtype(), terms[0].device())?;
    for (t, &l) in terms.iter().zip(lambdas) {
        if l != 0.0 {
            total = (total + (t * l)?)?;
        }
    }
    Ok(total)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(v: Vec<f32>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn constant_offset_gives_scales_times_delta() {
        let a = Tensor::full(0.3f32, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let b = Tensor::full(0.4f32, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let m = Tensor::ones((2, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!((s(&pixel_loss(&a, &b, &m, 3).unwrap()) - 0.3).abs() < 1e-6);
        assert_eq!(s(&pixel_loss(&a, &a, &m, 3).unwrap()), 0.0);
    }

    #[test]
    fn total_loss_matches_weighted_sum() {
        let cfg = Config::default();
        assert!((total_loss([1.0; 5], &cfg).total - 22.1).abs() < 1e-12);
        assert_eq!(total_loss([0.0; 5], &cfg).total, 0.0);
    }

    #[test]
    fn landmark_loss_pythagorean() {
        let flow = Tensor::zeros((1, 2, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let l = landmark_flow_loss(&flow, &[[5.0, 6.0]], &[[2.0, 2.0]]).unwrap();
        assert!((s(&l) - 5.0).abs() < 1e-5);
        assert!(landmark_flow_loss(&flow, &[[9.0, 6.0]], &[[2.0, 2.0]]).is_err());
    }

    #[test]
    fn tv_of_unit_ramp_is_one() {
        let mut v = vec![0f32; 2 * 16];
        for y in 0..4 {
            for x in 0..4 {
                v[y * 4 + x] = x as f32;
            }
        }
        assert!((s(&flow_regularization(&t4(v, (1, 2, 4, 4))).unwrap()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sampling_correctness_is_zero_for_matching_warp() {
        let bb = PerceptualBackbone::seeded(0, vec![1.0, 0.5, 0.25, 0.25, 0.125]).unwrap();
        let src = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let flow = Tensor::rand(-2f32, 2.0, (2, 2, 16, 16), &Device::Cpu).unwrap();
        let dst = kernels::warp(&src, &flow).unwrap();
        let m = Tensor::ones((2, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let l = sampling_correctness_loss(&bb, &src, &dst, &flow, &m).unwrap();
        assert!(s(&l).abs() < 1e-5);
    }

    #[test]
    fn adversarial_at_half_probability() {
        let z = vec![Tensor::zeros((2, 1, 4, 4), DType::F32, &Device::Cpu).unwrap(); 2];
        let (d, g) = adversarial_from_scores(&z, &z, &z).unwrap();
        assert!((s(&d) - 2.0 * 2f64.ln()).abs() < 1e-6);
        assert!((s(&g) - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn regions_are_shifted_inside_and_skipped_when_empty() {
        let groups = vec![vec![vec![[1.0, 1.0]]], vec![vec![]]];
        let r = Regions::from_centroids(&groups, 16, 64, 64);
        assert_eq!(r.boxes[0][0], Some([0, 0]));
        assert_eq!(r.boxes[1][0], None);
    }

    #[test]
    fn json_line_has_exactly_the_logged_keys() {
        let rep = total_loss([1.0, 2.0, 3.0, 4.0, 5.0], &Config::default());
        let v: serde_json::Value = serde_json::from_str(&rep.to_json_line(3)).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["adversarial", "identity", "illum_preserve", "perceptual", "pixel", "step", "total"]
        );
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(24))]
        #[test]
        fn masked_pixels_never_change_the_loss(seed in 0u64..1000, hq in 1usize..6, wq in 1usize..6, scales in 1usize..4) {
            let (h, w) = (4 * hq, 4 * wq);
            use rand::{Rng, SeedableRng};
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut v = |n: usize| (0..n).map(|_| r.gen_range(0f32..1.0)).collect::<Vec<_>>();
            let a = t4(v(3 * h * w), (1, 3, h, w));
            let b = t4(v(3 * h * w), (1, 3, h, w));
            let noise = t4(v(3 * h * w), (1, 3, h, w));
            let m: Vec<f32> = v(h * w).into_iter().map(|x| f32::from(x > 0.4)).collect();
            let inv = t4(m.iter().map(|x| 1.0 - x).collect(), (1, 1, h, w));
            let m = t4(m, (1, 1, h, w));
            let shift = |x: &Tensor| (x + noise.broadcast_mul(&inv).unwrap()).unwrap();
            let before = s(&masked_multiscale_l1(&a, &b, &m, scales).unwrap().0);
            let after = s(&masked_multiscale_l1(&shift(&a), &b, &m, scales).unwrap().0);
            proptest::prop_assert_eq!(before, after);
            proptest::prop_assert!(before >= 0.0);
        }
    }
}
