//! CPU kernels with hand-written backward passes, exposed to candle as custom ops.
//!
//! Every kernel is generic over `f32`/`f64`: training runs in `f32`, gradient
//! checks run in `f64`. Inputs are made contiguous by the public wrappers.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

type CResult<T> = candle_core::Result<T>;

pub(crate) trait Real: WithDType + Float {
    /// `C = alpha * A * B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n`, `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

fn slice<'a, T: Real>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

fn host_vec<T: Real>(t: &Tensor) -> CResult<Vec<T>> {
    t.contiguous()?.flatten_all()?.to_vec1::<T>()
}

fn dims4(l: &Layout) -> CResult<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

macro_rules! dispatch {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
            dt => candle_core::bail!("unsupported dtype {dt:?}"),
        }
    };
}

// ---------------------------------------------------------------- conv2d

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2d {
    pub stride: usize,
    pub pad: usize,
}

struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> CResult<Self> {
        let (b, cin, h, wi) = (x[0], x[1], x[2], x[3]);
        let (cout, cin2, kh, kw) = (w[0], w[1], w[2], w[3]);
        if cin != cin2 {
            candle_core::bail!("conv2d channel mismatch: input {cin}, kernel {cin2}");
        }
        if h + 2 * pad < kh || wi + 2 * pad < kw {
            candle_core::bail!("conv2d kernel larger than padded input");
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wi + 2 * pad - kw) / stride + 1;
        Ok(Self {
            b,
            cin,
            h,
            w: wi,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `[lo, hi)` whose input column for tap `kx` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = p.saturating_sub(kx).div_ceil(s);
        let last = self.w + p;
        let hi = if last <= kx { 0 } else { ((last - kx - 1) / s + 1).min(self.wo) };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let n = self.n();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if lo < hi {
                            let x0 = lo * self.stride + kx - self.pad;
                            if self.stride == 1 {
                                out_row[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                            } else {
                                for (o, ix) in out_row[lo..hi].iter_mut().zip((x0..).step_by(self.stride)) {
                                    *o = src[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let n = self.n();
        for ci in 0..self.cin {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    let x0 = lo * self.stride + kx - self.pad;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let s_row = &src[oy * self.wo + lo..oy * self.wo + hi];
                        if self.stride == 1 {
                            for (d, &v) in dst[x0..x0 + hi - lo].iter_mut().zip(s_row) {
                                *d += v;
                            }
                        } else {
                            for (ix, &v) in (x0..).step_by(self.stride).zip(s_row) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_fwd<T: Real>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (k, n) = (g.k(), g.n());
    let mut out = vec![T::zero(); g.b * g.cout * n];
    let mut cols = vec![T::zero(); k * n];
    let in_sz = g.cin * g.h * g.w;
    for bi in 0..g.b {
        g.im2col(&x[bi * in_sz..(bi + 1) * in_sz], &mut cols);
        let dst = &mut out[bi * g.cout * n..(bi + 1) * g.cout * n];
        // SAFETY: buffers sized by the geometry above.
        unsafe {
            T::gemm(
                g.cout,
                k,
                n,
                w.as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                T::zero(),
                dst.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    out
}

/// Row-major `rows x cols` matrix into its `cols x rows` transpose, in tiles.
fn transpose<T: Real>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

fn conv_bwd<T: Real>(g: &ConvGeom, x: &[T], w: &[T], gy: &[T]) -> (Vec<T>, Vec<T>) {
    let (k, n) = (g.k(), g.n());
    let in_sz = g.cin * g.h * g.w;
    let mut gx = vec![T::zero(); g.b * in_sz];
    let mut gw = vec![T::zero(); g.cout * k];
    let mut cols = vec![T::zero(); k * n];
    let mut cols_t = vec![T::zero(); k * n];
    let mut gcols = vec![T::zero(); k * n];
    for bi in 0..g.b {
        let gyb = &gy[bi * g.cout * n..(bi + 1) * g.cout * n];
        g.im2col(&x[bi * in_sz..(bi + 1) * in_sz], &mut cols);
        // A contiguous transpose keeps the weight-gradient product cache friendly.
        transpose(&cols, k, n, &mut cols_t);
        // SAFETY: buffers sized by the geometry above.
        unsafe {
            // gw += gy_b (cout x n) * cols^T (n x k)
            T::gemm(
                g.cout,
                n,
                k,
                gyb.as_ptr(),
                n as isize,
                1,
                cols_t.as_ptr(),
                k as isize,
                1,
                T::one(),
                gw.as_mut_ptr(),
                k as isize,
                1,
            );
            // gcols = w^T (k x cout) * gy_b (cout x n)
            T::gemm(
                k,
                g.cout,
                n,
                w.as_ptr(),
                1,
                k as isize,
                gyb.as_ptr(),
                n as isize,
                1,
                T::zero(),
                gcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        g.col2im(&gcols, &mut gx[bi * in_sz..(bi + 1) * in_sz]);
    }
    (gx, gw)
}

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let g = ConvGeom::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        fn run<T: Real>(
            g: &ConvGeom,
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
        ) -> CResult<CpuStorage> {
            Ok(T::to_cpu_storage_owned(conv_fwd(
                g,
                slice::<T>(s1, l1)?,
                slice::<T>(s2, l2)?,
            )))
        }
        let out = dispatch!(s1.dtype(), run(&g, s1, l1, s2, l2))?;
        Ok((out, Shape::from((g.b, g.cout, g.ho, g.wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let g = ConvGeom::new(x.dims(), w.dims(), self.stride, self.pad)?;
        fn run<T: Real>(
            g: &ConvGeom,
            x: &Tensor,
            w: &Tensor,
            grad: &Tensor,
        ) -> CResult<(Tensor, Tensor)> {
            let (gx, gw) = conv_bwd(g, &host_vec::<T>(x)?, &host_vec::<T>(w)?, &host_vec(grad)?);
            Ok((
                Tensor::from_vec(gx, x.shape(), x.device())?,
                Tensor::from_vec(gw, w.shape(), w.device())?,
            ))
        }
        let (gx, gw) = dispatch!(x.dtype(), run(&g, x, w, grad))?;
        Ok((Some(gx), Some(gw)))
    }
}

/// 2-D convolution (cross-correlation) with zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> CResult<Tensor> {
    x.contiguous()?
        .apply_op2(&w.contiguous()?, Conv2d { stride, pad })
}

/// Convolution followed by a per-channel bias, fused so the bias gradient is a
/// plain channel sum.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dBias {
    pub stride: usize,
    pub pad: usize,
}

impl CustomOp3 for Conv2dBias {
    fn name(&self) -> &'static str {
        "im2col-conv2d-bias"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let g = ConvGeom::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        if l3.dims() != [g.cout] {
            candle_core::bail!("conv2d bias must have shape ({},), got {:?}", g.cout, l3.dims());
        }
        fn run<T: Real>(
            g: &ConvGeom,
            (s1, l1): (&CpuStorage, &Layout),
            (s2, l2): (&CpuStorage, &Layout),
            (s3, l3): (&CpuStorage, &Layout),
        ) -> CResult<CpuStorage> {
            let mut out = conv_fwd(g, slice::<T>(s1, l1)?, slice::<T>(s2, l2)?);
            let bias = slice::<T>(s3, l3)?;
            let n = g.n();
            for (i, plane) in out.chunks_mut(n).enumerate() {
                let b = bias[i % g.cout];
                plane.iter_mut().for_each(|v| *v = *v + b);
            }
            Ok(T::to_cpu_storage_owned(out))
        }
        let out = dispatch!(s1.dtype(), run(&g, (s1, l1), (s2, l2), (s3, l3)))?;
        Ok((out, Shape::from((g.b, g.cout, g.ho, g.wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = ConvGeom::new(x.dims(), w.dims(), self.stride, self.pad)?;
        fn run<T: Real>(
            g: &ConvGeom,
            x: &Tensor,
            w: &Tensor,
            b: &Tensor,
            grad: &Tensor,
        ) -> CResult<(Tensor, Tensor, Tensor)> {
            let gy = host_vec::<T>(grad)?;
            let (gx, gw) = conv_bwd(g, &host_vec::<T>(x)?, &host_vec::<T>(w)?, &gy);
            let mut gb = vec![T::zero(); g.cout];
            for (i, plane) in gy.chunks(g.n()).enumerate() {
                gb[i % g.cout] = gb[i % g.cout] + plane.iter().fold(T::zero(), |a, &v| a + v);
            }
            Ok((
                Tensor::from_vec(gx, x.shape(), x.device())?,
                Tensor::from_vec(gw, w.shape(), w.device())?,
                Tensor::from_vec(gb, b.shape(), b.device())?,
            ))
        }
        let (gx, gw, gb) = dispatch!(x.dtype(), run(&g, x, w, b, grad))?;
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// 2-D convolution with zero padding plus a per-output-channel bias.
pub fn conv2d_bias(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> CResult<Tensor> {
    x.contiguous()?
        .apply_op3(&w.contiguous()?, &b.contiguous()?, Conv2dBias { stride, pad })
}

// ---------------------------------------------------------------- bilinear warp

/// Clamped sampling position along one axis: lower index, upper index,
/// interpolation weight and whether the unclamped coordinate was in range.
#[inline]
fn axis_sample<T: Real>(coord: T, size: usize) -> (usize, usize, T, bool) {
    let hi = T::from_f64((size - 1) as f64);
    let inside = coord >= T::zero() && coord <= hi;
    let c = Float::min(Float::max(coord, T::zero()), hi);
    let i0 = WithDType::to_f64(Float::floor(c)) as usize;
    let i0 = i0.min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, c - T::from_f64(i0 as f64), inside)
}

pub(crate) struct Warp;

fn warp_fwd<T: Real>(src: &[T], flow: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); b * c * hw];
    for bi in 0..b {
        let fx = &flow[(bi * 2) * hw..(bi * 2 + 1) * hw];
        let fy = &flow[(bi * 2 + 1) * hw..(bi * 2 + 2) * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (x0, x1, ax, _) = axis_sample(T::from_f64(x as f64) + fx[p], w);
                let (y0, y1, ay, _) = axis_sample(T::from_f64(y as f64) + fy[p], h);
                let w00 = (T::one() - ax) * (T::one() - ay);
                let w01 = ax * (T::one() - ay);
                let w10 = (T::one() - ax) * ay;
                let w11 = ax * ay;
                for ci in 0..c {
                    let s = &src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    out[(bi * c + ci) * hw + p] = w00 * s[y0 * w + x0]
                        + w01 * s[y0 * w + x1]
                        + w10 * s[y1 * w + x0]
                        + w11 * s[y1 * w + x1];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn warp_bwd<T: Real>(
    src: &[T],
    flow: &[T],
    grad: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let mut gsrc = vec![T::zero(); b * c * hw];
    let mut gflow = vec![T::zero(); b * 2 * hw];
    for bi in 0..b {
        let fo = bi * 2 * hw;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (x0, x1, ax, inx) = axis_sample(T::from_f64(x as f64) + flow[fo + p], w);
                let (y0, y1, ay, iny) = axis_sample(T::from_f64(y as f64) + flow[fo + hw + p], h);
                let w00 = (T::one() - ax) * (T::one() - ay);
                let w01 = ax * (T::one() - ay);
                let w10 = (T::one() - ax) * ay;
                let w11 = ax * ay;
                let mut gx = T::zero();
                let mut gy = T::zero();
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    let g = grad[base + p];
                    let s = &src[base..base + hw];
                    let (s00, s01, s10, s11) =
                        (s[y0 * w + x0], s[y0 * w + x1], s[y1 * w + x0], s[y1 * w + x1]);
                    gx += g * ((T::one() - ay) * (s01 - s00) + ay * (s11 - s10));
                    gy += g * ((T::one() - ax) * (s10 - s00) + ax * (s11 - s01));
                    let gs = &mut gsrc[base..base + hw];
                    gs[y0 * w + x0] += g * w00;
                    gs[y0 * w + x1] += g * w01;
                    gs[y1 * w + x0] += g * w10;
                    gs[y1 * w + x1] += g * w11;
                }
                if inx {
                    gflow[fo + p] = gx;
                }
                if iny {
                    gflow[fo + hw + p] = gy;
                }
            }
        }
    }
    (gsrc, gflow)
}

impl CustomOp2 for Warp {
    fn name(&self) -> &'static str {
        "bilinear-warp"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1)?;
        fn run<T: Real>(
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
            d: (usize, usize, usize, usize),
        ) -> CResult<CpuStorage> {
            let (b, c, h, w) = d;
            Ok(T::to_cpu_storage_owned(warp_fwd(
                slice::<T>(s1, l1)?,
                slice::<T>(s2, l2)?,
                b,
                c,
                h,
                w,
            )))
        }
        let out = dispatch!(s1.dtype(), run(s1, l1, s2, l2, (b, c, h, w)))?;
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        src: &Tensor,
        flow: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = src.dims4()?;
        fn run<T: Real>(
            src: &Tensor,
            flow: &Tensor,
            grad: &Tensor,
            d: (usize, usize, usize, usize),
        ) -> CResult<(Tensor, Tensor)> {
            let (b, c, h, w) = d;
            let (gs, gf) = warp_bwd(
                &host_vec::<T>(src)?,
                &host_vec::<T>(flow)?,
                &host_vec::<T>(grad)?,
                b,
                c,
                h,
                w,
            );
            Ok((
                Tensor::from_vec(gs, src.shape(), src.device())?,
                Tensor::from_vec(gf, flow.shape(), flow.device())?,
            ))
        }
        let (gs, gf) = dispatch!(src.dtype(), run(src, flow, grad, (b, c, h, w)))?;
        Ok((Some(gs), Some(gf)))
    }
}

/// Backward bilinear sampling with border clamping; `flow` is `(B, 2, H, W)`.
pub fn warp(src: &Tensor, flow: &Tensor) -> CResult<Tensor> {
    src.contiguous()?.apply_op2(&flow.contiguous()?, Warp)
}

/// 1 where the unclamped sample point of each output pixel lies inside the
/// source grid, else 0. Shape `(B, 1, H, W)`.
pub fn warp_in_bounds(flow: &Tensor) -> CResult<Tensor> {
    let (b, _, h, w) = flow.dims4()?;
    let f = flow.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let hw = h * w;
    let mut out = vec![0f32; b * hw];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = x as f64 + f[bi * 2 * hw + p];
                let sy = y as f64 + f[(bi * 2 + 1) * hw + p];
                let ok = (0.0..=(w - 1) as f64).contains(&sx) && (0.0..=(h - 1) as f64).contains(&sy);
                out[bi * hw + p] = if ok { 1.0 } else { 0.0 };
            }
        }
    }
    Tensor::from_vec(out, (b, 1, h, w), flow.device())
}

// ---------------------------------------------------------------- resize

/// Half-pixel-centred bilinear resize (no antialiasing).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Resize {
    pub out_h: usize,
    pub out_w: usize,
}

fn resize_taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = (s.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Applies 1-D taps along the last axis of `rows` rows of length `inp`.
fn taps_rows<T: Real>(src: &[T], rows: usize, inp: usize, taps: &[(usize, usize, f64)], dst: &mut [T]) {
    let out = taps.len();
    let tw: Vec<(usize, usize, T, T)> = taps
        .iter()
        .map(|&(a, b, t)| (a, b, T::from_f64(1.0 - t), T::from_f64(t)))
        .collect();
    for r in 0..rows {
        let s = &src[r * inp..(r + 1) * inp];
        for (d, &(a, b, wa, wb)) in dst[r * out..(r + 1) * out].iter_mut().zip(&tw) {
            *d = s[a] * wa + s[b] * wb;
        }
    }
}

/// Adjoint of [`taps_rows`]: scatters `out`-long rows back onto `inp`-long rows.
fn taps_rows_adj<T: Real>(g: &[T], rows: usize, inp: usize, taps: &[(usize, usize, f64)], dst: &mut [T]) {
    let out = taps.len();
    let tw: Vec<(usize, usize, T, T)> = taps
        .iter()
        .map(|&(a, b, t)| (a, b, T::from_f64(1.0 - t), T::from_f64(t)))
        .collect();
    for r in 0..rows {
        let d = &mut dst[r * inp..(r + 1) * inp];
        for (&v, &(a, b, wa, wb)) in g[r * out..(r + 1) * out].iter().zip(&tw) {
            d[a] = d[a] + v * wa;
            d[b] = d[b] + v * wb;
        }
    }
}

/// Applies 1-D taps across rows of a `inp x w` plane.
fn taps_cols<T: Real>(src: &[T], w: usize, taps: &[(usize, usize, f64)], dst: &mut [T]) {
    for (oy, &(a, b, t)) in taps.iter().enumerate() {
        let (wa, wb) = (T::from_f64(1.0 - t), T::from_f64(t));
        let (ra, rb) = (&src[a * w..(a + 1) * w], &src[b * w..(b + 1) * w]);
        for ((d, &x0), &x1) in dst[oy * w..(oy + 1) * w].iter_mut().zip(ra).zip(rb) {
            *d = x0 * wa + x1 * wb;
        }
    }
}

fn taps_cols_adj<T: Real>(g: &[T], w: usize, taps: &[(usize, usize, f64)], dst: &mut [T]) {
    for (oy, &(a, b, t)) in taps.iter().enumerate() {
        let (wa, wb) = (T::from_f64(1.0 - t), T::from_f64(t));
        let row = &g[oy * w..(oy + 1) * w];
        for (d, &v) in dst[a * w..(a + 1) * w].iter_mut().zip(row) {
            *d = *d + v * wa;
        }
        for (d, &v) in dst[b * w..(b + 1) * w].iter_mut().zip(row) {
            *d = *d + v * wb;
        }
    }
}

impl Resize {
    fn fwd<T: Real>(&self, x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = (self.out_h, self.out_w);
        let ty = resize_taps(oh, h);
        let tx = resize_taps(ow, w);
        let mut tmp = vec![T::zero(); planes * h * ow];
        taps_rows(x, planes * h, w, &tx, &mut tmp);
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            taps_cols(&tmp[p * h * ow..(p + 1) * h * ow], ow, &ty, &mut out[p * oh * ow..(p + 1) * oh * ow]);
        }
        out
    }

    fn bwd<T: Real>(&self, g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = (self.out_h, self.out_w);
        let ty = resize_taps(oh, h);
        let tx = resize_taps(ow, w);
        let mut tmp = vec![T::zero(); planes * h * ow];
        for p in 0..planes {
            taps_cols_adj(&g[p * oh * ow..(p + 1) * oh * ow], ow, &ty, &mut tmp[p * h * ow..(p + 1) * h * ow]);
        }
        let mut out = vec![T::zero(); planes * h * w];
        taps_rows_adj(&tmp, planes * h, w, &tx, &mut out);
        out
    }
}

impl CustomOp1 for Resize {
    fn name(&self) -> &'static str {
        "bilinear-resize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l)?;
        fn run<T: Real>(
            op: &Resize,
            s: &CpuStorage,
            l: &Layout,
            d: (usize, usize, usize),
        ) -> CResult<CpuStorage> {
            Ok(T::to_cpu_storage_owned(op.fwd(slice::<T>(s, l)?, d.0, d.1, d.2)))
        }
        let out = dispatch!(s.dtype(), run(self, s, l, (b * c, h, w)))?;
        Ok((out, Shape::from((b, c, self.out_h, self.out_w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        fn run<T: Real>(
            op: &Resize,
            arg: &Tensor,
            grad: &Tensor,
            d: (usize, usize, usize),
        ) -> CResult<Tensor> {
            let g = op.bwd(&host_vec::<T>(grad)?, d.0, d.1, d.2);
            Tensor::from_vec(g, arg.shape(), arg.device())
        }
        Ok(Some(dispatch!(arg.dtype(), run(self, arg, grad, (b * c, h, w)))?))
    }
}

pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> CResult<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    x.contiguous()?.apply_op1(Resize { out_h, out_w })
}

// ---------------------------------------------------------------- box sum

/// Sum over the `(2r+1)^2` window centred at each pixel, truncated at the
/// image border. The operator is symmetric, so its adjoint is itself.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BoxSum {
    pub radius: usize,
}

fn box_sum_planes<T: Real>(x: &[T], planes: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * h * w];
    let sw = w + 1;
    let mut integral = vec![0f64; (h + 1) * sw];
    for p in 0..planes {
        let s = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let mut row = 0f64;
            for xx in 0..w {
                row += s[y * w + xx].to_f64();
                integral[(y + 1) * sw + xx + 1] = integral[y * sw + xx + 1] + row;
            }
        }
        let d = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let y1 = y.saturating_sub(r);
            let y2 = (y + r).min(h - 1) + 1;
            for xx in 0..w {
                let x1 = xx.saturating_sub(r);
                let x2 = (xx + r).min(w - 1) + 1;
                let v = integral[y2 * sw + x2] - integral[y1 * sw + x2] - integral[y2 * sw + x1]
                    + integral[y1 * sw + x1];
                d[y * w + xx] = T::from_f64(v);
            }
        }
    }
    out
}

impl CustomOp1 for BoxSum {
    fn name(&self) -> &'static str {
        "box-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l)?;
        fn run<T: Real>(
            s: &CpuStorage,
            l: &Layout,
            d: (usize, usize, usize, usize),
        ) -> CResult<CpuStorage> {
            Ok(T::to_cpu_storage_owned(box_sum_planes(
                slice::<T>(s, l)?,
                d.0,
                d.1,
                d.2,
                d.3,
            )))
        }
        let out = dispatch!(s.dtype(), run(s, l, (b * c, h, w, self.radius)))?;
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(box_sum(grad, self.radius)?))
    }
}

pub fn box_sum(x: &Tensor, radius: usize) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(BoxSum { radius })
}

/// Number of pixels inside each truncated window, shape `(1, 1, H, W)`.
pub fn box_count(h: usize, w: usize, radius: usize, dtype: DType, dev: &candle_core::Device) -> CResult<Tensor> {
    let count = |i: usize, n: usize| ((i + radius).min(n - 1) + 1 - i.saturating_sub(radius)) as f64;
    let v: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |x| count(y, h) * count(x, w)))
        .collect();
    Tensor::from_vec(v, (1, 1, h, w), dev)?.to_dtype(dtype)
}

// ---------------------------------------------------------------- point sampling

/// Bilinear read of a `(B, C, H, W)` tensor at `N` fixed points per batch item.
/// Points are `(x, y)` pixel coordinates, clamped to the grid. Output `(B, C, N)`.
#[derive(Debug, Clone)]
pub(crate) struct PointSample {
    pub points: Vec<[f64; 2]>,
    pub n: usize,
}

impl PointSample {
    fn taps(&self, bi: usize, k: usize, h: usize, w: usize) -> [(usize, f64); 4] {
        let [px, py] = self.points[bi * self.n + k];
        let (x0, x1, ax, _) = axis_sample(px, w);
        let (y0, y1, ay, _) = axis_sample(py, h);
        [
            (y0 * w + x0, (1.0 - ax) * (1.0 - ay)),
            (y0 * w + x1, ax * (1.0 - ay)),
            (y1 * w + x0, (1.0 - ax) * ay),
            (y1 * w + x1, ax * ay),
        ]
    }
}

impl CustomOp1 for PointSample {
    fn name(&self) -> &'static str {
        "point-sample"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l)?;
        fn run<T: Real>(
            op: &PointSample,
            s: &CpuStorage,
            l: &Layout,
            d: (usize, usize, usize, usize),
        ) -> CResult<CpuStorage> {
            let (b, c, h, w) = d;
            let x = slice::<T>(s, l)?;
            let mut out = vec![T::zero(); b * c * op.n];
            for bi in 0..b {
                for k in 0..op.n {
                    let taps = op.taps(bi, k, h, w);
                    for ci in 0..c {
                        let plane = &x[(bi * c + ci) * h * w..];
                        let mut v = T::zero();
                        for (idx, wt) in taps {
                            v += plane[idx] * T::from_f64(wt);
                        }
                        out[(bi * c + ci) * op.n + k] = v;
                    }
                }
            }
            Ok(T::to_cpu_storage_owned(out))
        }
        let out = dispatch!(s.dtype(), run(self, s, l, (b, c, h, w)))?;
        Ok((out, Shape::from((b, c, self.n))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        fn run<T: Real>(
            op: &PointSample,
            arg: &Tensor,
            grad: &Tensor,
            d: (usize, usize, usize, usize),
        ) -> CResult<Tensor> {
            let (b, c, h, w) = d;
            let g = host_vec::<T>(grad)?;
            let mut out = vec![T::zero(); b * c * h * w];
            for bi in 0..b {
                for k in 0..op.n {
                    let taps = op.taps(bi, k, h, w);
                    for ci in 0..c {
                        let gv = g[(bi * c + ci) * op.n + k];
                        let plane = &mut out[(bi * c + ci) * h * w..];
                        for (idx, wt) in taps {
                            plane[idx] += gv * T::from_f64(wt);
                        }
                    }
                }
            }
            Tensor::from_vec(out, arg.shape(), arg.device())
        }
        Ok(Some(dispatch!(arg.dtype(), run(self, arg, grad, (b, c, h, w)))?))
    }
}

pub fn sample_points(x: &Tensor, points: Vec<[f64; 2]>, per_item: usize) -> CResult<Tensor> {
    let b = x.dim(0)?;
    if points.len() != b * per_item {
        candle_core::bail!("expected {} points, got {}", b * per_item, points.len());
    }
    x.contiguous()?.apply_op1(PointSample {
        points,
        n: per_item,
    })
}

// ---------------------------------------------------------------- flip

/// Mirror along the last axis; its own adjoint.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HFlip;

fn hflip_rows<T: Real>(x: &[T], w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(w) {
        out.extend(row.iter().rev());
    }
    out
}

impl CustomOp1 for HFlip {
    fn name(&self) -> &'static str {
        "hflip"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let w = *l.dims().last().unwrap_or(&1);
        fn run<T: Real>(s: &CpuStorage, l: &Layout, w: usize) -> CResult<CpuStorage> {
            Ok(T::to_cpu_storage_owned(hflip_rows(slice::<T>(s, l)?, w)))
        }
        let out = dispatch!(s.dtype(), run(s, l, w))?;
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(hflip(grad)?))
    }
}

/// Reverses the last axis.
pub fn hflip(x: &Tensor) -> CResult<Tensor> {
    if x.rank() == 0 {
        candle_core::bail!("hflip needs at least one axis");
    }
    x.contiguous()?.apply_op1(HFlip)
}

// ---------------------------------------------------------------- batch norm

/// Training-mode batch normalization over `(B, H, W)` per channel with
/// batch statistics, affine parameters `gamma` and `beta`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BatchNormTrain {
    pub eps: f64,
}

/// Per-channel biased mean and variance of a `(B, C, N)` layout.
fn channel_stats<T: Real>(x: &[T], b: usize, c: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x[(bi * c + ci) * n..(bi * c + ci + 1) * n];
            let (s, q) = plane.iter().fold((0f64, 0f64), |(s, q), &v| {
                let v = v.to_f64();
                (s + v, q + v * v)
            });
            mean[ci] += s;
            sq[ci] += q;
        }
    }
    let cnt = (b * n) as f64;
    let var = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, &q)| {
            *m /= cnt;
            (q / cnt - *m * *m).max(0.0)
        })
        .collect();
    (mean, var)
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1)?;
        if l2.dims() != [c] || l3.dims() != [c] {
            candle_core::bail!("batch norm affine parameters must have shape ({c},)");
        }
        fn run<T: Real>(
            eps: f64,
            (s1, l1): (&CpuStorage, &Layout),
            (s2, l2): (&CpuStorage, &Layout),
            (s3, l3): (&CpuStorage, &Layout),
            (b, c, n): (usize, usize, usize),
        ) -> CResult<CpuStorage> {
            let x = slice::<T>(s1, l1)?;
            let gamma = slice::<T>(s2, l2)?;
            let beta = slice::<T>(s3, l3)?;
            let (mean, var) = channel_stats(x, b, c, n);
            let mut out = vec![T::zero(); x.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    let scale = T::from_f64(gamma[ci].to_f64() * inv);
                    let shift = T::from_f64(beta[ci].to_f64() - mean[ci] * gamma[ci].to_f64() * inv);
                    let o = (bi * c + ci) * n;
                    for (d, &v) in out[o..o + n].iter_mut().zip(&x[o..o + n]) {
                        *d = v * scale + shift;
                    }
                }
            }
            Ok(T::to_cpu_storage_owned(out))
        }
        let out = dispatch!(s1.dtype(), run(self.eps, (s1, l1), (s2, l2), (s3, l3), (b, c, h * w)))?;
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        fn run<T: Real>(
            eps: f64,
            x: &Tensor,
            gamma: &Tensor,
            beta: &Tensor,
            grad: &Tensor,
            (b, c, n): (usize, usize, usize),
        ) -> CResult<(Tensor, Tensor, Tensor)> {
            let xv = host_vec::<T>(x)?;
            let gv = host_vec::<T>(grad)?;
            let gam = host_vec::<T>(gamma)?;
            let (mean, var) = channel_stats(&xv, b, c, n);
            let cnt = (b * n) as f64;
            let mut dbeta = vec![0f64; c];
            let mut dgamma = vec![0f64; c];
            for bi in 0..b {
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    let o = (bi * c + ci) * n;
                    for (&xv, &g) in xv[o..o + n].iter().zip(&gv[o..o + n]) {
                        let g = g.to_f64();
                        dbeta[ci] += g;
                        dgamma[ci] += g * (xv.to_f64() - mean[ci]) * inv;
                    }
                }
            }
            let mut dx = vec![T::zero(); xv.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    let k = gam[ci].to_f64() * inv;
                    let (mg, mgx) = (dbeta[ci] / cnt, dgamma[ci] / cnt);
                    let o = (bi * c + ci) * n;
                    for ((d, &xv), &g) in dx[o..o + n].iter_mut().zip(&xv[o..o + n]).zip(&gv[o..o + n]) {
                        let xh = (xv.to_f64() - mean[ci]) * inv;
                        *d = T::from_f64(k * (g.to_f64() - mg - xh * mgx));
                    }
                }
            }
            let to = |v: Vec<f64>, like: &Tensor| -> CResult<Tensor> {
                Tensor::from_vec(v.into_iter().map(T::from_f64).collect::<Vec<T>>(), like.shape(), like.device())
            };
            Ok((Tensor::from_vec(dx, x.shape(), x.device())?, to(dgamma, gamma)?, to(dbeta, beta)?))
        }
        let (dx, dg, db) = dispatch!(x.dtype(), run(self.eps, x, gamma, beta, grad, (b, c, h * w)))?;
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Batch-statistics normalization with affine parameters; see [`BatchNormTrain`].
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> CResult<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormTrain { eps })
}

/// Per-channel biased batch mean and variance of a `(B, C, H, W)` tensor, as `f64`.
pub fn batch_stats(x: &Tensor) -> CResult<(Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    fn run<T: Real>(x: &Tensor, d: (usize, usize, usize)) -> CResult<(Vec<f64>, Vec<f64>)> {
        Ok(channel_stats(&host_vec::<T>(x)?, d.0, d.1, d.2))
    }
    dispatch!(x.dtype(), run(x, (b, c, h * w)))
}

// ---------------------------------------------------------------- activations

#[derive(Debug, Clone, Copy)]
pub(crate) struct LeakyRelu {
    pub slope: f64,
}

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Real>(slope: f64, s: &CpuStorage, l: &Layout) -> CResult<CpuStorage> {
            let k = T::from_f64(slope);
            let v: Vec<T> = slice::<T>(s, l)?
                .iter()
                .map(|&x| if x > T::zero() { x } else { x * k })
                .collect();
            Ok(T::to_cpu_storage_owned(v))
        }
        let out = dispatch!(s.dtype(), run(self.slope, s, l))?;
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        fn run<T: Real>(slope: f64, arg: &Tensor, grad: &Tensor) -> CResult<Tensor> {
            let k = T::from_f64(slope);
            let x = host_vec::<T>(arg)?;
            let g = host_vec::<T>(grad)?;
            let v: Vec<T> = x
                .iter()
                .zip(&g)
                .map(|(&x, &g)| if x > T::zero() { g } else { g * k })
                .collect();
            Tensor::from_vec(v, arg.shape(), arg.device())
        }
        Ok(Some(dispatch!(arg.dtype(), run(self.slope, arg, grad))?))
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu { slope })
}
