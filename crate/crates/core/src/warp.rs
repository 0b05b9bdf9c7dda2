//! Bilinear warping, horizontal flips, flow resizing, flow color coding and
//! Middlebury `.flo` files.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::domain::{FlowField, Image};
use crate::error::{Error, Result};
use crate::gradcheck::{max_fd_deviation, FD_STEP};
use crate::kernels;

/// Warped tensor plus a map of which output pixels sampled inside the source.
#[derive(Debug, Clone)]
pub struct WarpOutput {
    pub data: Tensor,
    pub in_bounds: Tensor,
}

fn as_batched(t: &Tensor) -> Result<(Tensor, bool)> {
    match t.rank() {
        3 => Ok((t.unsqueeze(0)?, true)),
        4 => Ok((t.clone(), false)),
        r => Err(Error::invalid(format!("expected rank 3 or 4 tensor, got {r}"))),
    }
}

/// Reads `src` at `(x + dx, y + dy)` for every output pixel.
///
/// Accepts `(C, H, W)` with a `(2, H, W)` flow or the batched equivalents.
/// Sample coordinates are clamped to the border before interpolation.
/// Differentiable with respect to both `src` and `flow`.
pub fn bilinear_warp(src: &Tensor, flow: &Tensor) -> Result<WarpOutput> {
    let (s, squeeze) = as_batched(src)?;
    let (f, _) = as_batched(flow)?;
    let (b, _, h, w) = s.dims4()?;
    let (fb, fc, fh, fw) = f.dims4()?;
    if fc != 2 || fb != b || fh != h || fw != w {
        return Err(Error::invalid(format!(
            "flow shape {:?} does not match source {:?}",
            f.dims(),
            s.dims()
        )));
    }
    let data = kernels::warp(&s, &f)?;
    let in_bounds = kernels::warp_in_bounds(&f)?;
    if squeeze {
        Ok(WarpOutput {
            data: data.squeeze(0)?,
            in_bounds: in_bounds.squeeze(0)?,
        })
    } else {
        Ok(WarpOutput { data, in_bounds })
    }
}

pub fn warp_image(img: &Image, flow: &FlowField) -> Result<Image> {
    Image::new_unchecked(bilinear_warp(img.tensor(), flow.tensor())?.data)
}

/// Reverses the last (x) axis.
pub fn hflip(t: &Tensor) -> Result<Tensor> {
    if t.rank() == 0 {
        return Err(Error::invalid("cannot flip a scalar"));
    }
    Ok(crate::kernels::hflip(t)?)
}

/// Bilinearly resizes a `(B, 2, H, W)` flow and rescales its displacements to
/// the new pixel grid.
pub fn resize_flow(flow: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, c, fh, fw) = flow.dims4()?;
    if c != 2 {
        return Err(Error::invalid("flow needs 2 channels"));
    }
    if fh == h && fw == w {
        return Ok(flow.clone());
    }
    let r = kernels::resize_bilinear(flow, h, w)?;
    let dx = (r.narrow(1, 0, 1)? * (w as f64 / fw as f64))?;
    let dy = (r.narrow(1, 1, 1)? * (h as f64 / fh as f64))?;
    Ok(Tensor::cat(&[dx, dy], 1)?)
}

/// Which argument of [`bilinear_warp`] a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Source,
    Flow,
}

/// Max deviation between the analytic warp gradient and central finite
/// differences (step `1e-3`). For `GradTarget::Flow`, elements whose sample
/// coordinate lies within one step of an integer lattice line or of the
/// clamping border are excluded, since the bilinear kernel has kinks there.
pub fn warp_grad_check(src: &Tensor, flow: &Tensor, target: GradTarget) -> Result<f64> {
    let (s, _) = as_batched(src)?;
    let (f, _) = as_batched(flow)?;
    let (_, _, h, w) = s.dims4()?;
    if h > 8 || w > 8 {
        return Err(Error::invalid("gradient checks are limited to 8x8 inputs"));
    }
    let run = |ts: &[Tensor]| -> Result<Tensor> { Ok(bilinear_warp(&ts[0], &ts[1])?.data) };
    match target {
        GradTarget::Source => max_fd_deviation(&[s, f], 0, FD_STEP, run, |_| false),
        GradTarget::Flow => {
            let fv = f.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let hw = h * w;
            let skip = move |i: usize| {
                let ch = (i / hw) % 2;
                let p = i % hw;
                let (base, size) = if ch == 0 {
                    ((p % w) as f64, w)
                } else {
                    ((p / w) as f64, h)
                };
                let s = base + fv[i];
                let lo = s - 2.0 * FD_STEP;
                let hi = s + 2.0 * FD_STEP;
                lo.floor() != hi.floor() || lo <= 0.0 || hi >= (size - 1) as f64
            };
            max_fd_deviation(&[s, f], 1, FD_STEP, run, skip)
        }
    }
}

/// Default saturation magnitude for flow coloring: 20% of the image width.
pub fn default_max_mag(width: usize) -> f64 {
    0.2 * width as f64
}

/// HSV to RGB with `h` in degrees.
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Color-codes a flow field: hue is the displacement direction
/// `atan2(dy, dx)`, saturation is `min(|v| / max_mag, 1)`, value is 1.
/// Zero motion is white.
pub fn flow_to_color(flow: &FlowField, max_mag: f64) -> Result<Image> {
    if max_mag.is_nan() || max_mag <= 0.0 {
        return Err(Error::invalid("max_mag must be > 0"));
    }
    let (dx, dy) = flow.to_planes()?;
    let (h, w) = (flow.height(), flow.width());
    let mut rgb = Vec::with_capacity(h * w * 3);
    for (&x, &y) in dx.iter().zip(&dy) {
        let (x, y) = (x as f64, y as f64);
        let mag = (x * x + y * y).sqrt();
        let hue = y.atan2(x).to_degrees().rem_euclid(360.0);
        let sat = (mag / max_mag).min(1.0);
        rgb.extend(hsv_to_rgb(hue, sat, 1.0).map(|c| c.clamp(0.0, 1.0) as f32));
    }
    let t = Tensor::from_vec(rgb, (h, w, 3), &Device::Cpu)?.permute((2, 0, 1))?;
    Image::new_unchecked(t.contiguous()?)
}

const FLO_MAGIC: &[u8; 4] = b"PIEH";

/// Writes a Middlebury `.flo` file: `PIEH`, `i32` width, `i32` height, then
/// row-major little-endian `f32` `(dx, dy)` pairs.
pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let (dx, dy) = flow.to_planes()?;
    let (h, w) = (flow.height(), flow.width());
    let mut buf = Vec::with_capacity(12 + 8 * h * w);
    buf.extend_from_slice(FLO_MAGIC);
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    for (x, y) in dx.iter().zip(&dy) {
        buf.extend_from_slice(&x.to_le_bytes());
        buf.extend_from_slice(&y.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Ingestion {
        path: path.to_path_buf(),
        msg: m.to_string(),
    };
    if buf.len() < 12 || &buf[..4] != FLO_MAGIC {
        return Err(bad("missing PIEH magic"));
    }
    let w = i32::from_le_bytes(buf[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(buf[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(bad("non-positive dimensions"));
    }
    let (w, h) = (w as usize, h as usize);
    if buf.len() != 12 + 8 * w * h {
        return Err(bad("payload size does not match header"));
    }
    let mut planes = vec![0f32; 2 * h * w];
    for (i, chunk) in buf[12..].chunks_exact(8).enumerate() {
        planes[i] = f32::from_le_bytes(chunk[..4].try_into().unwrap());
        planes[h * w + i] = f32::from_le_bytes(chunk[4..].try_into().unwrap());
    }
    FlowField::new(Tensor::from_vec(planes, (2, h, w), &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(v: &[f64], h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v.to_vec(), (1, h, w), &Device::Cpu).unwrap()
    }

    fn flow_const(h: usize, w: usize, dx: f64, dy: f64) -> Tensor {
        let mut v = vec![dx; h * w];
        v.extend(vec![dy; h * w]);
        Tensor::from_vec(v, (2, h, w), &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    /// Direct per-pixel reference: clamp the sample point, then blend the
    /// four neighbours.
    fn oracle(src: &[f64], flow: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let sx = (x as f64 + flow[i]).clamp(0.0, (w - 1) as f64);
                    let sy = (y as f64 + flow[h * w + i]).clamp(0.0, (h - 1) as f64);
                    let (fx, fy) = (sx.floor(), sy.floor());
                    let mut acc = 0.0;
                    for (yy, wy) in [(fy, 1.0 - (sy - fy)), (fy + 1.0, sy - fy)] {
                        for (xx, wx) in [(fx, 1.0 - (sx - fx)), (fx + 1.0, sx - fx)] {
                            if wx * wy == 0.0 {
                                continue;
                            }
                            let yi = (yy as usize).min(h - 1);
                            let xi = (xx as usize).min(w - 1);
                            acc += wx * wy * src[ch * h * w + yi * w + xi];
                        }
                    }
                    out[ch * h * w + i] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn zero_flow_is_identity() {
        let src = t2(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let out = bilinear_warp(&src, &flow_const(2, 2, 0.0, 0.0)).unwrap();
        assert_eq!(vals(&out.data), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            out.in_bounds.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![1.0; 4]
        );
    }

    #[test]
    fn half_pixel_sample_blends_four_neighbours() {
        let src = t2(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let flow = Tensor::from_vec(
            vec![0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0],
            (2, 2, 2),
            &Device::Cpu,
        )
        .unwrap();
        let out = bilinear_warp(&src, &flow).unwrap();
        assert_eq!(vals(&out.data)[0], 2.5);
    }

    #[test]
    fn out_of_range_sample_is_clamped_and_flagged() {
        let src = t2(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let flow = Tensor::from_vec(
            vec![-1.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            (2, 2, 2),
            &Device::Cpu,
        )
        .unwrap();
        let out = bilinear_warp(&src, &flow).unwrap();
        assert_eq!(vals(&out.data)[0], 1.0);
        let ib = out.in_bounds.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(ib, vec![0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_invalid_argument() {
        let src = t2(&[0.0; 6], 2, 3);
        let r = bilinear_warp(&src, &flow_const(2, 2, 0.0, 0.0));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn hflip_reverses_x_only() {
        let ramp = Tensor::from_vec((0..12).map(|v| v as f64).collect::<Vec<_>>(), (1, 3, 4), &Device::Cpu)
            .unwrap();
        let f = hflip(&ramp).unwrap();
        assert_eq!(&vals(&f)[..4], &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(vals(&hflip(&f).unwrap()), vals(&ramp));
        let sym = t2(&[1.0, 2.0, 2.0, 1.0], 1, 4);
        assert_eq!(vals(&hflip(&sym).unwrap()), vals(&sym));
    }

    #[test]
    fn resize_flow_rescales_displacements() {
        let f = flow_const(8, 8, 2.0, -4.0).unsqueeze(0).unwrap();
        let r = resize_flow(&f, 4, 2).unwrap();
        let v = vals(&r);
        assert!(v[..8].iter().all(|&x| (x - 0.5).abs() < 1e-12));
        assert!(v[8..].iter().all(|&y| (y + 2.0).abs() < 1e-12));
    }

    #[test]
    fn grad_check_source_and_flow() {
        let src = Tensor::from_vec(
            (0..16).map(|i| ((i * 7) % 11) as f64 / 11.0).collect::<Vec<_>>(),
            (1, 4, 4),
            &Device::Cpu,
        )
        .unwrap();
        let flow = Tensor::from_vec(
            (0..32).map(|i| ((i as f64) * 0.731).sin() * 0.9 + 0.13).collect::<Vec<_>>(),
            (2, 4, 4),
            &Device::Cpu,
        )
        .unwrap();
        assert!(warp_grad_check(&src, &flow, GradTarget::Source).unwrap() < 1e-4);
        assert!(warp_grad_check(&src, &flow, GradTarget::Flow).unwrap() < 1e-4);
    }

    #[test]
    fn zero_flow_colors_white() {
        let img = flow_to_color(&FlowField::zeros(4, 4).unwrap(), 3.0).unwrap();
        assert!(img.to_rgb8().unwrap().iter().all(|&v| v == 255));
    }

    #[test]
    fn saturated_rightward_flow_is_red() {
        let f = FlowField::from_fn(8, 8, |_, _| [5.0, 0.0]).unwrap();
        let rgb = flow_to_color(&f, 5.0).unwrap().to_rgb8().unwrap();
        assert_eq!(&rgb[..3], &[255, 0, 0]);
    }

    #[test]
    fn downward_half_flow_is_half_saturated_hue_90() {
        let f = FlowField::from_fn(8, 8, |_, _| [0.0, 2.5]).unwrap();
        let rgb = flow_to_color(&f, 5.0).unwrap().to_rgb8().unwrap();
        // HSV(90, 0.5, 1): chroma 0.5, secondary 0.25, offset 0.5.
        assert_eq!(&rgb[..3], &[191, 255, 128]);
    }

    #[test]
    fn flo_roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.flo");
        let f = FlowField::from_fn(3, 5, |y, x| [x as f32 * 0.5, -(y as f32)]).unwrap();
        write_flo(&p, &f).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
        assert_eq!(i32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        // second pixel of the first row: (0.5, 0.0)
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 0.5);
        let back = read_flo(&p).unwrap();
        assert_eq!(back.to_planes().unwrap(), f.to_planes().unwrap());
        std::fs::write(&p, b"nope").unwrap();
        assert!(read_flo(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn warp_matches_oracle_and_is_linear(
            h in 1usize..10, w in 1usize..10, seed in 0u64..1000,
            a in -2.0f64..2.0, b in -2.0f64..2.0,
        ) {
            let n = h * w;
            let gen = |k: u64, scale: f64, len: usize| -> Vec<f64> {
                (0..len).map(|i| (((i as u64 * 2654435761 + k * 97 + seed * 31) % 1000) as f64 / 1000.0 - 0.5) * scale).collect()
            };
            let x = gen(1, 1.0, 2 * n);
            let y = gen(2, 1.0, 2 * n);
            let fl = gen(3, 6.0, 2 * n);
            let xt = Tensor::from_vec(x.clone(), (2, h, w), &Device::Cpu).unwrap();
            let yt = Tensor::from_vec(y, (2, h, w), &Device::Cpu).unwrap();
            let ft = Tensor::from_vec(fl.clone(), (2, h, w), &Device::Cpu).unwrap();
            let got = vals(&bilinear_warp(&xt, &ft).unwrap().data);
            for (g, o) in got.iter().zip(oracle(&x, &fl, 2, h, w)) {
                prop_assert!((g - o).abs() < 1e-9);
            }
            let mix = ((&xt * a).unwrap() + (&yt * b).unwrap()).unwrap();
            let lhs = vals(&bilinear_warp(&mix, &ft).unwrap().data);
            let rx = vals(&bilinear_warp(&xt, &ft).unwrap().data);
            let ry = vals(&bilinear_warp(&yt, &ft).unwrap().data);
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (a * rx[i] + b * ry[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn hflip_is_an_involution(h in 1usize..6, w in 1usize..9) {
            let t = Tensor::from_vec((0..h * w).map(|i| i as f64).collect::<Vec<_>>(), (1, h, w), &Device::Cpu).unwrap();
            prop_assert_eq!(vals(&hflip(&hflip(&t).unwrap()).unwrap()), vals(&t));
        }
    }
}
