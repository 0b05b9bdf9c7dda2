//! Value types shared across the crate: images, masks, flow fields,
//! landmark sets and paired samples.
//!
//! Images are channels-first `(3, H, W)` `f32` tensors with values in `[0, 1]`.
//! Flow fields are `(2, H, W)`: channel 0 is `dx`, channel 1 is `dy`, in
//! pixels, and output pixel `(x, y)` reads its source at `(x + dx, y + dy)`.

use std::fmt;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Tolerance for ground-truth flows to agree with landmark correspondences.
pub const FLOW_LANDMARK_TOL: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Image {
    data: Tensor,
}

impl Image {
    /// Wraps a `(3, H, W)` tensor, checking range and size invariants.
    pub fn new(data: Tensor) -> Result<Self> {
        let img = Self::new_unchecked(data)?;
        if let Some(v) = img.violations().into_iter().next() {
            return Err(Error::invalid(format!("image: {v}")));
        }
        Ok(img)
    }

    /// Wraps a `(3, H, W)` tensor checking only its shape.
    pub fn new_unchecked(data: Tensor) -> Result<Self> {
        let (c, _, _) = data.dims3()?;
        if c != 3 {
            return Err(Error::invalid(format!("image needs 3 channels, got {c}")));
        }
        Ok(Self {
            data: data.to_dtype(DType::F32)?,
        })
    }

    /// Builds an image from interleaved row-major RGB values.
    pub fn from_hwc(h: usize, w: usize, rgb: &[f32]) -> Result<Self> {
        if rgb.len() != h * w * 3 {
            return Err(Error::invalid("rgb buffer length does not match h*w*3"));
        }
        let t = Tensor::from_slice(rgb, (h, w, 3), &Device::Cpu)?.permute((2, 0, 1))?;
        Self::new(t.contiguous()?)
    }

    pub fn constant(h: usize, w: usize, value: f32) -> Result<Self> {
        Self::new(Tensor::full(value, (3, h, w), &Device::Cpu)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn to_hwc(&self) -> Result<Vec<f32>> {
        Ok(self.data.permute((1, 2, 0))?.flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn to_rgb8(&self) -> Result<Vec<u8>> {
        Ok(self
            .to_hwc()?
            .into_iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect())
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let vals = match self.data.flatten_all().and_then(|t| t.to_vec1::<f32>()) {
            Ok(v) => v,
            Err(_) => return vec![Violation::ImageNotFinite],
        };
        if vals.iter().any(|v| !v.is_finite()) {
            out.push(Violation::ImageNotFinite);
        } else if vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
            out.push(Violation::ImageOutOfRange);
        }
        if self.height() % 4 != 0 || self.width() % 4 != 0 {
            out.push(Violation::ResolutionNotMultipleOf4);
        }
        out
    }
}

/// Average-pool downsampling by a power-of-two factor.
pub fn downsample(img: &Image, factor: usize) -> Result<Image> {
    let t = downsample_tensor(&img.data.unsqueeze(0)?, factor)?.squeeze(0)?;
    Image::new_unchecked(t)
}

/// Average-pool downsampling of a `(B, C, H, W)` tensor.
pub fn downsample_tensor(t: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::invalid(format!("factor {factor} is not a power of two")));
    }
    let (_, _, h, w) = t.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "factor {factor} does not divide {h}x{w}"
        )));
    }
    if factor == 1 {
        return Ok(t.clone());
    }
    Ok(t.avg_pool2d(factor)?)
}

/// Binary face mask, `(1, H, W)` with values in `{0, 1}`.
#[derive(Debug, Clone)]
pub struct Mask {
    data: Tensor,
}

impl Mask {
    pub fn new(data: Tensor) -> Result<Self> {
        let (c, _, _) = data.dims3()?;
        if c != 1 {
            return Err(Error::invalid("mask must have one channel"));
        }
        Ok(Self {
            data: data.to_dtype(DType::F32)?,
        })
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let v: Vec<f32> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| if f(y, x) { 1.0 } else { 0.0 })
            .collect();
        Self::new(Tensor::from_vec(v, (1, h, w), &Device::Cpu)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn count(&self) -> Result<f32> {
        Ok(self.data.sum_all()?.to_scalar::<f32>()?)
    }

    pub fn values(&self) -> Result<Vec<f32>> {
        Ok(self.data.flatten_all()?.to_vec1::<f32>()?)
    }
}

/// Per-pixel displacement field, `(2, H, W)`.
#[derive(Debug, Clone)]
pub struct FlowField {
    data: Tensor,
}

impl FlowField {
    /// Wraps a `(2, H, W)` tensor, clamping `|dx| <= W` and `|dy| <= H`.
    pub fn new(data: Tensor) -> Result<Self> {
        let (c, h, w) = data.dims3()?;
        if c != 2 {
            return Err(Error::invalid("flow needs 2 channels"));
        }
        let data = data.to_dtype(DType::F32)?;
        let vals = data.flatten_all()?.to_vec1::<f32>()?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("flow contains non-finite values"));
        }
        let dx = data.get(0)?.clamp(-(w as f32), w as f32)?;
        let dy = data.get(1)?.clamp(-(h as f32), h as f32)?;
        Ok(Self {
            data: Tensor::stack(&[dx, dy], 0)?,
        })
    }

    /// Wraps without clamping or finiteness checks; `validate_sample` reports
    /// any problems.
    pub fn new_unchecked(data: Tensor) -> Result<Self> {
        let (c, _, _) = data.dims3()?;
        if c != 2 {
            return Err(Error::invalid("flow needs 2 channels"));
        }
        Ok(Self {
            data: data.to_dtype(DType::F32)?,
        })
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Self::new(Tensor::zeros((2, h, w), DType::F32, &Device::Cpu)?)
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> [f32; 2]) -> Result<Self> {
        let mut v = vec![0f32; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                let [dx, dy] = f(y, x);
                v[y * w + x] = dx;
                v[h * w + y * w + x] = dy;
            }
        }
        Self::new(Tensor::from_vec(v, (2, h, w), &Device::Cpu)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn to_planes(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        Ok((
            self.data.get(0)?.flatten_all()?.to_vec1::<f32>()?,
            self.data.get(1)?.flatten_all()?.to_vec1::<f32>()?,
        ))
    }

    /// Bilinear read of the displacement at a fractional position (clamped).
    pub fn sample_at(&self, x: f64, y: f64) -> Result<[f64; 2]> {
        let (dx, dy) = self.to_planes()?;
        let (h, w) = (self.height(), self.width());
        Ok([
            bilinear_at(&dx, h, w, x, y),
            bilinear_at(&dy, h, w, x, y),
        ])
    }
}

/// Clamped bilinear interpolation of a single row-major plane.
pub fn bilinear_at(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let cx = x.clamp(0.0, (w - 1) as f64);
    let cy = y.clamp(0.0, (h - 1) as f64);
    let x0 = (cx.floor() as usize).min(w - 1);
    let y0 = (cy.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = cx - x0 as f64;
    let ay = cy - y0 as f64;
    let at = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
    (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x1)) + ay * ((1.0 - ax) * at(y1, x0) + ax * at(y1, x1))
}

/// Landmark coordinates in pixels, index-aligned with the paired view.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<[f32; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f32; 2]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn in_bounds(&self, h: usize, w: usize) -> bool {
        self.points.iter().all(|&[x, y]| {
            x.is_finite()
                && y.is_finite()
                && x >= 0.0
                && y >= 0.0
                && x <= (w - 1) as f32
                && y <= (h - 1) as f32
        })
    }
}

/// One side of a pair: image, face mask and landmarks.
#[derive(Debug, Clone)]
pub struct View {
    pub image: Image,
    pub mask: Mask,
    pub landmarks: LandmarkSet,
}

/// A profile/frontal record of one identity.
#[derive(Debug, Clone)]
pub struct Sample {
    pub profile: View,
    pub frontal: View,
    pub identity_id: u32,
    pub pose_deg: i32,
    pub illum_id: u32,
    pub gt_forward_flow: Option<FlowField>,
    pub gt_reverse_flow: Option<FlowField>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Profile,
    Frontal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    Forward,
    Reverse,
}

/// A broken invariant found by [`validate_sample`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ImageNotFinite,
    ImageOutOfRange,
    ResolutionNotMultipleOf4,
    ViewSizeMismatch,
    MaskSizeMismatch(Side),
    MaskNotBinary(Side),
    MaskEmpty(Side),
    LandmarkOutOfBounds(Side),
    LandmarkCountMismatch,
    FlowSizeMismatch(FlowKind),
    FlowNotFinite(FlowKind),
    FlowOutOfRange(FlowKind),
    FlowLandmarkMismatch { kind: FlowKind, max_err: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Violation::ImageNotFinite => "image not finite",
            Violation::ImageOutOfRange => "image values outside [0,1]",
            Violation::ResolutionNotMultipleOf4 => "resolution not a multiple of 4",
            Violation::ViewSizeMismatch => "profile/frontal size mismatch",
            Violation::MaskSizeMismatch(_) => "mask size mismatch",
            Violation::MaskNotBinary(_) => "mask not binary",
            Violation::MaskEmpty(_) => "mask empty",
            Violation::LandmarkOutOfBounds(_) => "landmark out of bounds",
            Violation::LandmarkCountMismatch => "landmark count mismatch",
            Violation::FlowSizeMismatch(_) => "flow size mismatch",
            Violation::FlowNotFinite(_) => "flow not finite",
            Violation::FlowOutOfRange(_) => "flow out of range",
            Violation::FlowLandmarkMismatch { .. } => "flow/landmark mismatch",
        };
        f.write_str(s)
    }
}

fn view_violations(view: &View, side: Side, out: &mut Vec<Violation>) {
    out.extend(view.image.violations());
    let (h, w) = (view.image.height(), view.image.width());
    if view.mask.height() != h || view.mask.width() != w {
        out.push(Violation::MaskSizeMismatch(side));
    } else if let Ok(vals) = view.mask.values() {
        if vals.iter().any(|&v| v != 0.0 && v != 1.0) {
            out.push(Violation::MaskNotBinary(side));
        }
        if !vals.iter().any(|&v| v == 1.0) {
            out.push(Violation::MaskEmpty(side));
        }
    }
    if !view.landmarks.in_bounds(h, w) {
        out.push(Violation::LandmarkOutOfBounds(side));
    }
}

fn flow_violations(
    flow: &FlowField,
    kind: FlowKind,
    at: &LandmarkSet,
    to: &LandmarkSet,
    out: &mut Vec<Violation>,
) {
    let (h, w) = (flow.height(), flow.width());
    let Ok((dx, dy)) = flow.to_planes() else {
        out.push(Violation::FlowNotFinite(kind));
        return;
    };
    if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
        out.push(Violation::FlowNotFinite(kind));
        return;
    }
    if dx.iter().any(|v| v.abs() > w as f32) || dy.iter().any(|v| v.abs() > h as f32) {
        out.push(Violation::FlowOutOfRange(kind));
    }
    if at.len() != to.len() {
        return;
    }
    let mut max_err = 0f64;
    for (a, b) in at.points.iter().zip(&to.points) {
        let (x, y) = (a[0] as f64, a[1] as f64);
        let fx = bilinear_at(&dx, h, w, x, y);
        let fy = bilinear_at(&dy, h, w, x, y);
        let ex = fx - (b[0] as f64 - x);
        let ey = fy - (b[1] as f64 - y);
        max_err = max_err.max((ex * ex + ey * ey).sqrt());
    }
    if max_err > FLOW_LANDMARK_TOL {
        out.push(Violation::FlowLandmarkMismatch { kind, max_err });
    }
}

/// Checks every sample invariant and reports the broken ones; an empty list
/// means the sample is well formed.
pub fn validate_sample(s: &Sample) -> Vec<Violation> {
    let mut out = Vec::new();
    view_violations(&s.profile, Side::Profile, &mut out);
    view_violations(&s.frontal, Side::Frontal, &mut out);
    let (h, w) = (s.frontal.image.height(), s.frontal.image.width());
    if s.profile.image.height() != h || s.profile.image.width() != w {
        out.push(Violation::ViewSizeMismatch);
    }
    if s.profile.landmarks.len() != s.frontal.landmarks.len() {
        out.push(Violation::LandmarkCountMismatch);
    }
    // Forward flow lives on the frontal grid and points into the profile.
    if let Some(f) = &s.gt_forward_flow {
        if f.height() != h || f.width() != w {
            out.push(Violation::FlowSizeMismatch(FlowKind::Forward));
        } else {
            flow_violations(f, FlowKind::Forward, &s.frontal.landmarks, &s.profile.landmarks, &mut out);
        }
    }
    if let Some(f) = &s.gt_reverse_flow {
        if f.height() != h || f.width() != w {
            out.push(Violation::FlowSizeMismatch(FlowKind::Reverse));
        } else {
            flow_violations(f, FlowKind::Reverse, &s.profile.landmarks, &s.frontal.landmarks, &mut out);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..h * w * 3).map(|_| rng.gen::<f32>()).collect();
        Image::from_hwc(h, w, &v).unwrap()
    }

    /// Explicit nested-loop block mean.
    fn block_mean_oracle(img: &Image, f: usize) -> Vec<f32> {
        let (h, w) = (img.height(), img.width());
        let hwc = img.to_hwc().unwrap();
        let mut out = Vec::new();
        for c in 0..3 {
            for by in 0..h / f {
                for bx in 0..w / f {
                    let mut acc = 0f64;
                    for y in by * f..(by + 1) * f {
                        for x in bx * f..(bx + 1) * f {
                            acc += hwc[(y * w + x) * 3 + c] as f64;
                        }
                    }
                    out.push((acc / (f * f) as f64) as f32);
                }
            }
        }
        out
    }

    fn flat(img: &Image) -> Vec<f32> {
        img.tensor().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn downsample_constant_stays_constant() {
        let img = Image::constant(8, 8, 0.3).unwrap();
        let d = downsample(&img, 2).unwrap();
        assert_eq!((d.height(), d.width()), (4, 4));
        assert!(flat(&d).iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn downsample_striped_blocks_average_to_half() {
        let v: Vec<f32> = (0..8)
            .flat_map(|y| (0..8).flat_map(move |_| [(y % 2) as f32; 3]))
            .collect();
        let img = Image::from_hwc(8, 8, &v).unwrap();
        assert!(flat(&downsample(&img, 2).unwrap()).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn downsample_matches_block_mean_oracle() {
        let img = random_image(8, 8, 3);
        let got = flat(&downsample(&img, 4).unwrap());
        for (a, b) in got.iter().zip(block_mean_oracle(&img, 4)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn downsample_rejects_bad_factor() {
        let img = Image::constant(12, 12, 0.5).unwrap();
        assert!(matches!(downsample(&img, 8), Err(Error::InvalidArgument(_))));
        assert!(matches!(downsample(&img, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn downsample_composes() {
        for seed in 0..5 {
            let img = random_image(16, 16, seed);
            let twice = downsample(&downsample(&img, 2).unwrap(), 2).unwrap();
            let once = downsample(&img, 4).unwrap();
            for (a, b) in flat(&twice).iter().zip(flat(&once)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn image_rejects_out_of_range_and_bad_size() {
        let t = Tensor::full(1.5f32, (3, 4, 4), &Device::Cpu).unwrap();
        assert!(Image::new(t).is_err());
        let t = Tensor::full(0.5f32, (3, 6, 4), &Device::Cpu).unwrap();
        assert!(Image::new(t).is_err());
    }

    #[test]
    fn flow_is_clamped_at_creation() {
        let t = Tensor::full(100f32, (2, 4, 8), &Device::Cpu).unwrap();
        let f = FlowField::new(t).unwrap();
        let (dx, dy) = f.to_planes().unwrap();
        assert!(dx.iter().all(|&v| v == 8.0));
        assert!(dy.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn bilinear_at_interpolates() {
        let plane = [1.0f32, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_at(&plane, 2, 2, 0.5, 0.5), 2.5);
        assert_eq!(bilinear_at(&plane, 2, 2, -3.0, 0.0), 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x: f64 = rng.gen_range(0.0..1.0);
        assert!((bilinear_at(&plane, 2, 2, x, 0.0) - (1.0 + x)).abs() < 1e-12);
    }
}
