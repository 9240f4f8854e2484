//! 2-D convolution as a candle custom op.
//!
//! Forward and both gradients are lowered to im2col + GEMM. The stock CPU
//! backward in candle goes through a direct transposed convolution that is
//! several times slower than the forward pass; on a single core that
//! dominates training time.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

use crate::{Error, Result};

trait Elem: Copy + Default + std::ops::AddAssign + 'static {
    /// `c = alpha·a·b + beta·c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
    fn zero() -> Self;
    fn one() -> Self;
}

impl Elem for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: callers size every buffer for the stated (m, k, n) and strides.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
}

impl Elem for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: callers size every buffer for the stated (m, k, n) and strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Elem>(g: &Geometry, x: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Elem>(g: &Geometry, col: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c_in {
        let xc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Elem>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.batch * g.c_out * plane];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        let ob = &mut out[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        T::gemm(
            g.c_out,
            patch,
            plane,
            w,
            patch as isize,
            1,
            src,
            plane as isize,
            1,
            T::zero(),
            ob,
            plane as isize,
            1,
        );
    }
    out
}

fn grad_input<T: Elem>(g: &Geometry, dy: &[T], w: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut dx = vec![T::zero(); g.batch * g.c_in * g.h * g.w];
    let mut col = vec![T::zero(); patch * plane];
    for b in 0..g.batch {
        let dyb = &dy[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        // col = wᵀ · dy_b, shape (patch, plane)
        T::gemm(
            patch,
            g.c_out,
            plane,
            w,
            1,
            patch as isize,
            dyb,
            plane as isize,
            1,
            T::zero(),
            &mut col,
            plane as isize,
            1,
        );
        let dxb = &mut dx[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        if g.is_pointwise() {
            dxb.copy_from_slice(&col);
        } else {
            col2im_add(g, &col, dxb);
        }
    }
    dx
}

fn grad_kernel<T: Elem>(g: &Geometry, x: &[T], dy: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut dw = vec![T::zero(); g.c_out * patch];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        let dyb = &dy[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        // dw += dy_b · colᵀ, shape (c_out, patch)
        T::gemm(
            g.c_out,
            plane,
            patch,
            dyb,
            plane as isize,
            1,
            src,
            1,
            plane as isize,
            T::one(),
            &mut dw,
            patch as isize,
            1,
        );
    }
    dw
}

fn contiguous<'a, T>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("conv2d expects contiguous inputs"),
    }
}

enum Kind {
    Forward,
    GradInput,
    GradKernel,
}

struct ConvKernel {
    geom: Geometry,
    kind: Kind,
}

impl CustomOp2 for ConvKernel {
    fn name(&self) -> &'static str {
        match self.kind {
            Kind::Forward => "conv2d-im2col",
            Kind::GradInput => "conv2d-grad-input",
            Kind::GradKernel => "conv2d-grad-kernel",
        }
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.geom;
        let shape: Shape = match self.kind {
            Kind::Forward => (g.batch, g.c_out, g.out_h(), g.out_w()).into(),
            Kind::GradInput => (g.batch, g.c_in, g.h, g.w).into(),
            Kind::GradKernel => (g.c_out, g.c_in, g.kh, g.kw).into(),
        };
        macro_rules! run {
            ($a:expr, $b:expr, $variant:ident) => {{
                let a = contiguous($a, l1)?;
                let b = contiguous($b, l2)?;
                let out = match self.kind {
                    Kind::Forward => forward(g, a, b),
                    Kind::GradInput => grad_input(g, a, b),
                    Kind::GradKernel => grad_kernel(g, a, b),
                };
                Ok((CpuStorage::$variant(out), shape))
            }};
        }
        match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => run!(a, b, F32),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => run!(a, b, F64),
            _ => candle_core::bail!("conv2d supports f32 and f64 with matching dtypes"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = if x.track_op() {
            Some(grad.apply_op2_no_bwd(
                w,
                &ConvKernel {
                    geom: self.geom,
                    kind: Kind::GradInput,
                },
            )?)
        } else {
            None
        };
        let dw = if w.track_op() {
            Some(x.apply_op2_no_bwd(
                &grad,
                &ConvKernel {
                    geom: self.geom,
                    kind: Kind::GradKernel,
                },
            )?)
        } else {
            None
        };
        Ok((dx, dw))
    }
}

/// Zero-padded convolution of `x: (B, C, H, W)` with `w: (O, C, kh, kw)`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (batch, c_in, h, wd) = x.dims4()?;
    let (c_out, wc, kh, kw) = w.dims4()?;
    if wc != c_in {
        return Err(Error::shape(format!(
            "conv2d: input has {c_in} channels, kernel expects {wc}"
        )));
    }
    if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::shape(format!(
            "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} does not fit {h}x{wd}"
        )));
    }
    let geom = Geometry {
        batch,
        c_in,
        h,
        w: wd,
        c_out,
        kh,
        kw,
        stride,
        pad,
    };
    let x = x.contiguous()?;
    let w = w.contiguous()?;
    Ok(x.apply_op2(
        &w,
        ConvKernel {
            geom,
            kind: Kind::Forward,
        },
    )?)
}
