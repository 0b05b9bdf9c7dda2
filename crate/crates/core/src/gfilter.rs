//! Differentiable per-channel guided filter built on integral-image box sums.

use candle_core::{DType, Tensor};

use crate::domain::Image;
use crate::error::{Error, Result};
use crate::gradcheck::{max_fd_deviation, FD_STEP};
use crate::kernels::{box_count, box_sum};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidedFilterParams {
    pub radius: usize,
    pub eps: f64,
}

impl GuidedFilterParams {
    pub fn new(radius: usize, eps: f64) -> Result<Self> {
        if radius == 0 {
            return Err(Error::invalid("guided filter radius must be >= 1"));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::invalid("guided filter eps must be > 0"));
        }
        Ok(Self { radius, eps })
    }

    /// Radius of a quarter of the resolution.
    pub fn for_resolution(resolution: usize, eps: f64) -> Result<Self> {
        Self::new((resolution / 4).max(1), eps)
    }
}

fn batched(t: &Tensor) -> Result<(Tensor, bool)> {
    match t.rank() {
        3 => Ok((t.unsqueeze(0)?, true)),
        4 => Ok((t.clone(), false)),
        r => Err(Error::invalid(format!("expected rank 3 or 4 tensor, got {r}"))),
    }
}

/// Per-window linear coefficients `(a, b)` with `q = a * g + b`.
///
/// Computed in `f64` and returned as `(B, C, H, W)` `f64` tensors.
pub fn coefficients(input: &Tensor, guide: &Tensor, params: GuidedFilterParams) -> Result<(Tensor, Tensor)> {
    let (p, _) = batched(input)?;
    let (g, _) = batched(guide)?;
    if p.dims() != g.dims() {
        return Err(Error::invalid(format!(
            "guided filter input {:?} and guide {:?} differ",
            p.dims(),
            g.dims()
        )));
    }
    let (_, _, h, w) = p.dims4()?;
    let p = p.to_dtype(DType::F64)?;
    let g = g.to_dtype(DType::F64)?;
    let n = box_count(h, w, params.radius, DType::F64, p.device())?;
    let mean = |t: &Tensor| -> Result<Tensor> { Ok(box_sum(t, params.radius)?.broadcast_div(&n)?) };
    let mg = mean(&g)?;
    let mp = mean(&p)?;
    let cov = (mean(&(&g * &p)?)? - (&mg * &mp)?)?;
    let var = (mean(&g.sqr()?)? - mg.sqr()?)?;
    let a = (cov / (var + params.eps)?)?;
    let b = (mp - (&a * &mg)?)?;
    Ok((a, b))
}

/// Guided filter on raw tensors, `(C, H, W)` or `(B, C, H, W)`; each channel
/// of `input` is filtered with the same channel of `guide`. Output keeps the
/// input's dtype and rank.
pub fn guided_filter_tensor(input: &Tensor, guide: &Tensor, params: GuidedFilterParams) -> Result<Tensor> {
    let (a, b) = coefficients(input, guide, params)?;
    let (g, squeeze) = batched(guide)?;
    let (_, _, h, w) = g.dims4()?;
    let n = box_count(h, w, params.radius, DType::F64, g.device())?;
    let ma = box_sum(&a, params.radius)?.broadcast_div(&n)?;
    let mb = box_sum(&b, params.radius)?.broadcast_div(&n)?;
    let out = ((ma * g.to_dtype(DType::F64)?)? + mb)?.to_dtype(input.dtype())?;
    Ok(if squeeze { out.squeeze(0)? } else { out })
}

/// Filters `input` so that it follows the local structure of `guide`.
pub fn guided_filter(input: &Image, guide: &Image, params: GuidedFilterParams) -> Result<Image> {
    Image::new_unchecked(guided_filter_tensor(input.tensor(), guide.tensor(), params)?)
}

/// Which argument of the guided filter a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterArg {
    Input,
    Guide,
}

/// Max deviation between the analytic gradient and central finite
/// differences (step `1e-3`) for inputs up to 8x8.
pub fn gfilter_grad_check(
    input: &Tensor,
    guide: &Tensor,
    params: GuidedFilterParams,
    wrt: FilterArg,
) -> Result<f64> {
    let (_, _, h, w) = batched(input)?.0.dims4()?;
    if h > 8 || w > 8 {
        return Err(Error::invalid("gradient checks are limited to 8x8 inputs"));
    }
    let idx = match wrt {
        FilterArg::Input => 0,
        FilterArg::Guide => 1,
    };
    max_fd_deviation(
        &[input.clone(), guide.clone()],
        idx,
        FD_STEP,
        |ts| guided_filter_tensor(&ts[0], &ts[1], params),
        |_| false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen::<f64>()).collect()
    }

    fn t(v: Vec<f64>, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v, (c, h, w), &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    /// Nested-loop reference over truncated windows.
    fn oracle(p: &[f64], g: &[f64], h: usize, w: usize, r: usize, eps: f64) -> Vec<f64> {
        let win = |y: usize, x: usize| {
            let ys = y.saturating_sub(r)..(y + r + 1).min(h);
            let xs = x.saturating_sub(r)..(x + r + 1).min(w);
            ys.flat_map(move |yy| xs.clone().map(move |xx| yy * w + xx))
        };
        let mut a = vec![0.0; h * w];
        let mut b = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let idx: Vec<usize> = win(y, x).collect();
                let n = idx.len() as f64;
                let mg = idx.iter().map(|&i| g[i]).sum::<f64>() / n;
                let mp = idx.iter().map(|&i| p[i]).sum::<f64>() / n;
                let cov = idx.iter().map(|&i| (g[i] - mg) * (p[i] - mp)).sum::<f64>() / n;
                let var = idx.iter().map(|&i| (g[i] - mg).powi(2)).sum::<f64>() / n;
                a[y * w + x] = cov / (var + eps);
                b[y * w + x] = mp - a[y * w + x] * mg;
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let idx: Vec<usize> = win(y, x).collect();
                let n = idx.len() as f64;
                let ma = idx.iter().map(|&i| a[i]).sum::<f64>() / n;
                let mb = idx.iter().map(|&i| b[i]).sum::<f64>() / n;
                out[y * w + x] = ma * g[y * w + x] + mb;
            }
        }
        out
    }

    #[test]
    fn matches_windowed_oracle_8x8() {
        let p = rand_vec(1, 64);
        let g = rand_vec(2, 64);
        let prm = GuidedFilterParams::new(2, 1e-2).unwrap();
        let out = vals(&guided_filter_tensor(&t(p.clone(), 1, 8, 8), &t(g.clone(), 1, 8, 8), prm).unwrap());
        for (a, b) in out.iter().zip(oracle(&p, &g, 8, 8, 2, 1e-2)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn self_guided_with_tiny_eps_is_identity() {
        let q = rand_vec(3, 3 * 64);
        let prm = GuidedFilterParams::new(2, 1e-9).unwrap();
        let qt = t(q.clone(), 3, 8, 8);
        let out = vals(&guided_filter_tensor(&qt, &qt, prm).unwrap());
        for (a, b) in out.iter().zip(&q) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_input_is_preserved() {
        let g = rand_vec(4, 3 * 64);
        let prm = GuidedFilterParams::new(3, 1e-2).unwrap();
        let out = vals(&guided_filter_tensor(&t(vec![0.37; 192], 3, 8, 8), &t(g, 3, 8, 8), prm).unwrap());
        assert!(out.iter().all(|v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn resolution_mismatch_is_invalid_argument() {
        let prm = GuidedFilterParams::new(1, 1e-2).unwrap();
        let r = guided_filter_tensor(&t(vec![0.0; 16], 1, 4, 4), &t(vec![0.0; 32], 1, 4, 8), prm);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn params_validation() {
        assert!(GuidedFilterParams::new(0, 1e-2).is_err());
        assert!(GuidedFilterParams::new(1, 0.0).is_err());
        assert_eq!(GuidedFilterParams::for_resolution(64, 1e-2).unwrap().radius, 16);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = t(rand_vec(5, 36), 1, 6, 6);
        let g = t(rand_vec(6, 36), 1, 6, 6);
        let prm = GuidedFilterParams::new(1, 1e-2).unwrap();
        assert!(gfilter_grad_check(&p, &g, prm, FilterArg::Input).unwrap() < 1e-4);
        assert!(gfilter_grad_check(&p, &g, prm, FilterArg::Guide).unwrap() < 1e-4);
        let c = t(vec![0.5; 36], 1, 6, 6);
        assert!(gfilter_grad_check(&c, &g, prm, FilterArg::Guide).unwrap() < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn fast_path_equals_oracle(h in 1usize..=16, w in 1usize..=16, r in 1usize..5, seed in 0u64..10_000) {
            let p = rand_vec(seed, h * w);
            let g = rand_vec(seed + 77, h * w);
            let prm = GuidedFilterParams::new(r, 1e-2).unwrap();
            let out = vals(&guided_filter_tensor(&t(p.clone(), 1, h, w), &t(g.clone(), 1, h, w), prm).unwrap());
            for (a, b) in out.iter().zip(oracle(&p, &g, h, w, r, 1e-2)) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn slope_is_within_unit_interval_for_positively_related_inputs(seed in 0u64..10_000, s in 0.0f64..1.0) {
            // p = s * g + noise-free offset has cov = s * var, so a in [0, s].
            let g = rand_vec(seed, 64);
            let p: Vec<f64> = g.iter().map(|v| s * v + 0.1).collect();
            let prm = GuidedFilterParams::new(2, 1e-2).unwrap();
            let (a, _) = coefficients(&t(p, 1, 8, 8), &t(g, 1, 8, 8), prm).unwrap();
            for v in vals(&a) {
                prop_assert!((-1e-9..=1.0 + 1e-9).contains(&v));
            }
        }

        #[test]
        fn shift_commutes_on_interior(seed in 0u64..10_000, shift in 1usize..3) {
            let (h, w, r) = (12usize, 12usize, 1usize);
            let p = rand_vec(seed, h * w);
            let g = rand_vec(seed + 5, h * w);
            let sh = |v: &[f64]| -> Vec<f64> {
                (0..h * w).map(|i| { let (y, x) = (i / w, i % w); v[y * w + (x + shift).min(w - 1)] }).collect()
            };
            let prm = GuidedFilterParams::new(r, 1e-2).unwrap();
            let a = vals(&guided_filter_tensor(&t(sh(&p), 1, h, w), &t(sh(&g), 1, h, w), prm).unwrap());
            let b = vals(&guided_filter_tensor(&t(p, 1, h, w), &t(g, 1, h, w), prm).unwrap());
            let margin = 2 * r + shift;
            for y in margin..h - margin {
                for x in margin..w - margin - shift {
                    prop_assert!((a[y * w + x] - b[y * w + x + shift]).abs() < 1e-6);
                }
            }
        }
    }
}
