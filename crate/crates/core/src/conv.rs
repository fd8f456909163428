//! Grouped 2-D convolution via per-group patch matrices.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CvsError, Result};
use crate::tensor::{Element, Shape, Tensor4D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(kh, kw)`
    pub kernel: (usize, usize),
    pub stride: usize,
    /// Zero padding `(rows, cols)` on each side.
    pub padding: (usize, usize),
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square kernel with "same" padding for odd sizes.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding: (kernel / 2, kernel / 2),
            groups: 1,
            has_bias: false,
        }
    }

    pub fn with_kernel(mut self, kh: usize, kw: usize) -> Self {
        self.kernel = (kh, kw);
        self.padding = (kh / 2, kw / 2);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_per_group(), self.kernel.0, self.kernel.1)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let ConvSpec { in_channels, out_channels, kernel, stride, groups, .. } = *self;
        if in_channels == 0 || out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 || stride == 0 {
            return Err(CvsError::arg("conv2d", format!("non-positive size in {self:?}")));
        }
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(CvsError::arg(
                "conv2d",
                format!("channels {in_channels}->{out_channels} not divisible by groups {groups}"),
            ));
        }
        Ok(())
    }

    /// Output `(h, w)` for an input of `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |size: usize, pad: usize, k: usize| -> Option<usize> {
            let padded = size + 2 * pad;
            (padded >= k).then(|| (padded - k) / self.stride + 1)
        };
        match (out(h, self.padding.0, self.kernel.0), out(w, self.padding.1, self.kernel.1)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(CvsError::shape(
                "conv2d",
                format!("kernel {:?} does not fit {h}x{w} with padding {:?}", self.kernel, self.padding),
            )),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let (oh, ow) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels, oh, ow))
    }

    /// Multiply-accumulates for one batch item at the given input size.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((self.out_channels * self.in_per_group() * self.kernel.0 * self.kernel.1 * oh * ow) as u64)
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.has_bias { self.out_channels } else { 0 }
    }
}

fn check_operands<T: Element>(
    x: &Tensor4D<T>,
    w: &Tensor4D<T>,
    b: Option<&Tensor4D<T>>,
    spec: &ConvSpec,
) -> Result<Shape> {
    spec.validate()?;
    let xs = x.shape();
    if xs.c != spec.in_channels {
        return Err(CvsError::shape(
            "conv2d",
            format!("input has {} channels, spec expects {}", xs.c, spec.in_channels),
        ));
    }
    if w.shape() != spec.weight_shape() {
        return Err(CvsError::shape(
            "conv2d",
            format!("weight shape {} but spec needs {}", w.shape(), spec.weight_shape()),
        ));
    }
    if let Some(b) = b {
        if b.len() != spec.out_channels {
            return Err(CvsError::shape(
                "conv2d",
                format!("bias has {} values for {} outputs", b.len(), spec.out_channels),
            ));
        }
    }
    spec.output_shape(xs)
}

struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
}

impl Geometry {
    fn new(xs: Shape, out: Shape, spec: &ConvSpec) -> Self {
        Geometry {
            h: xs.h,
            w: xs.w,
            oh: out.h,
            ow: out.w,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            stride: spec.stride,
            ph: spec.padding.0,
            pw: spec.padding.1,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }

    /// Rows `ci*kh*kw + ki*kw + kj`, columns `oy*ow + ox`, for `cin` channels
    /// starting at channel `c0` of one batch item.
    fn im2col<T: Element>(&self, item: &[T], c0: usize, cin: usize, col: &mut [T]) {
        let plane = self.h * self.w;
        let npos = self.oh * self.ow;
        for ci in 0..cin {
            let src = &item[(c0 + ci) * plane..(c0 + ci + 1) * plane];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * npos..(row + 1) * npos];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.ph as isize;
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pw as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters-adds patch columns back into the item.
    fn col2im<T: Element>(&self, col: &[T], c0: usize, cin: usize, item: &mut [T]) {
        let plane = self.h * self.w;
        let npos = self.oh * self.ow;
        for ci in 0..cin {
            let dst = &mut item[(c0 + ci) * plane..(c0 + ci + 1) * plane];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[row * npos..(row + 1) * npos];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pw as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst_row[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor4D<T>,
    w: &Tensor4D<T>,
    b: Option<&Tensor4D<T>>,
    spec: &ConvSpec,
) -> Result<Tensor4D<T>> {
    let out_shape = check_operands(x, w, b, spec)?;
    let geo = Geometry::new(x.shape(), out_shape, spec);
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let krows = cin_g * geo.kh * geo.kw;
    let npos = geo.oh * geo.ow;
    let mut out = Tensor4D::zeros(out_shape);
    let item_in = x.shape().item();
    let item_out = out_shape.item();
    if item_out == 0 {
        return Ok(out);
    }
    let weights = w.data();
    out.data_mut().par_chunks_mut(item_out).enumerate().for_each(|(n, dst)| {
        let item = &x.data()[n * item_in..(n + 1) * item_in];
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); krows * npos] };
        for g in 0..spec.groups {
            let wg = &weights[g * cout_g * krows..(g + 1) * cout_g * krows];
            let cols: &[T] = if geo.is_pointwise() {
                &item[g * cin_g * npos..(g + 1) * cin_g * npos]
            } else {
                geo.im2col(item, g * cin_g, cin_g, &mut col);
                &col
            };
            let og = &mut dst[g * cout_g * npos..(g + 1) * cout_g * npos];
            T::gemm(cout_g, krows, npos, wg, false, cols, false, og, false);
        }
        if let Some(b) = b {
            for (co, &bias) in b.data().iter().enumerate() {
                dst[co * npos..(co + 1) * npos].iter_mut().for_each(|v| *v += bias);
            }
        }
    });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor4D<T>>,
    pub dw: Option<Tensor4D<T>>,
    pub db: Option<Tensor4D<T>>,
}

/// Gradients of a convolution given the upstream gradient `gout`.
///
/// Per-item weight-gradient partials are reduced in batch order, so results
/// do not depend on the worker count.
pub fn conv2d_backward<T: Element>(
    x: &Tensor4D<T>,
    w: &Tensor4D<T>,
    spec: &ConvSpec,
    gout: &Tensor4D<T>,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<ConvGrads<T>> {
    let out_shape = check_operands(x, w, None, spec)?;
    if gout.shape() != out_shape {
        return Err(CvsError::shape(
            "conv2d_backward",
            format!("upstream gradient {} vs output {out_shape}", gout.shape()),
        ));
    }
    let geo = Geometry::new(x.shape(), out_shape, spec);
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let krows = cin_g * geo.kh * geo.kw;
    let npos = geo.oh * geo.ow;
    let item_in = x.shape().item();
    let item_out = out_shape.item();
    let wlen = w.len();
    let weights = w.data();

    let mut dx = need_dx.then(|| Tensor4D::zeros(x.shape()));
    let per_item = |n: usize, dx_item: Option<&mut [T]>| -> Option<Vec<T>> {
        let item = &x.data()[n * item_in..(n + 1) * item_in];
        let g_item = &gout.data()[n * item_out..(n + 1) * item_out];
        let mut col = vec![T::zero(); krows * npos];
        let mut dw_part = need_dw.then(|| vec![T::zero(); wlen]);
        let mut dx_item = dx_item;
        for g in 0..spec.groups {
            let gg = &g_item[g * cout_g * npos..(g + 1) * cout_g * npos];
            if let Some(dw_part) = dw_part.as_mut() {
                let cols: &[T] = if geo.is_pointwise() {
                    &item[g * cin_g * npos..(g + 1) * cin_g * npos]
                } else {
                    geo.im2col(item, g * cin_g, cin_g, &mut col);
                    &col
                };
                let dwg = &mut dw_part[g * cout_g * krows..(g + 1) * cout_g * krows];
                T::gemm(cout_g, npos, krows, gg, false, cols, true, dwg, false);
            }
            if let Some(dx_item) = dx_item.as_deref_mut() {
                let wg = &weights[g * cout_g * krows..(g + 1) * cout_g * krows];
                if geo.is_pointwise() {
                    let dst = &mut dx_item[g * cin_g * npos..(g + 1) * cin_g * npos];
                    T::gemm(cin_g, cout_g, npos, wg, true, gg, false, dst, true);
                } else {
                    T::gemm(krows, cout_g, npos, wg, true, gg, false, &mut col, false);
                    geo.col2im(&col, g * cin_g, cin_g, dx_item);
                }
            }
        }
        dw_part
    };

    let partials: Vec<Option<Vec<T>>> = match dx.as_mut() {
        Some(dx) => dx
            .data_mut()
            .par_chunks_mut(item_in)
            .enumerate()
            .map(|(n, dst)| per_item(n, Some(dst)))
            .collect(),
        None if need_dw => (0..x.shape().n).into_par_iter().map(|n| per_item(n, None)).collect(),
        None => Vec::new(),
    };

    let dw = if need_dw {
        let mut acc = vec![T::zero(); wlen];
        for part in partials.into_iter().flatten() {
            acc.iter_mut().zip(part).for_each(|(a, p)| *a += p);
        }
        Some(Tensor4D::from_vec(w.shape(), acc)?)
    } else {
        None
    };

    let db = if need_db {
        let mut acc = vec![T::zero(); spec.out_channels];
        for n in 0..out_shape.n {
            for (co, a) in acc.iter_mut().enumerate() {
                *a += gout.plane(n, co).iter().copied().sum::<T>();
            }
        }
        Some(Tensor4D::from_vec(spec.bias_shape(), acc)?)
    } else {
        None
    };
    Ok(ConvGrads { dx, dw, db })
}
