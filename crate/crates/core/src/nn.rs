//! Minimal 3D layers with hand-written reverse-mode gradients.
//!
//! Activations are `[C, D, H, W]` arrays for a single sample. Convolutions go
//! through an im2col buffer and a GEMM so the heavy lifting lands in
//! `matrixmultiply` for both `f32` and `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{
    Array1, Array2, Array4, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn, LinalgScalar, ScalarOperand,
};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use crate::error::{MagError, Result};

/// Floating point scalar usable by every layer and loss in the crate.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// Uniform in `[-bound, bound]` with `bound = sqrt(gain / fan_in)`.
    pub fn uniform<R: Rng + ?Sized>(
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let bound = (gain / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| F::from_f64_lossy(rng.random_range(-bound..=bound)))
            .collect();
        Self::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    fn mat(&self) -> ArrayView2<'_, F> {
        self.value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d parameter")
    }

    fn vec(&self) -> ndarray::ArrayView1<'_, F> {
        self.value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-d parameter")
    }
}

/// Anything that owns named parameters.
pub trait Parameterized<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>));

    fn zero_grad(&mut self)
    where
        F: Real,
    {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize
    where
        F: Real,
    {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn dims<F>(x: &Array4<F>) -> (usize, [usize; 3]) {
    let s = x.shape();
    (s[0], [s[1], s[2], s[3]])
}

fn as_mat<F: Real>(x: &Array4<F>) -> ArrayView2<'_, F> {
    let (c, [d, h, w]) = dims(x);
    x.view()
        .into_shape_with_order((c, d * h * w))
        .expect("contiguous activation")
}

fn to_vol<F: Real>(m: Array2<F>, sp: [usize; 3]) -> Array4<F> {
    let c = m.nrows();
    m.into_shape_with_order((c, sp[0], sp[1], sp[2]))
        .expect("contiguous matrix")
}

/// Output extent of a kernel-3, padding-1 convolution.
pub fn conv_out_len(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// Range of output positions `o` for which `o * stride + k - 1` is inside `[0, n)`.
fn valid_range(n: usize, out: usize, stride: usize, k: usize) -> (usize, usize) {
    let lo = usize::from(k == 0);
    // o * stride + k - 1 <= n - 1  =>  o <= (n - k) / stride
    let hi = if n + 1 > k {
        ((n - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<F: Real>(x: &Array4<F>, stride: usize, out: [usize; 3]) -> Array2<F> {
    let (c, [d, h, w]) = dims(x);
    let n = out[0] * out[1] * out[2];
    let src = x.as_slice().expect("contiguous input");
    let mut cols = Array2::<F>::zeros((c * 27, n));
    let dst = cols.as_slice_mut().expect("fresh buffer");
    for ci in 0..c {
        for kd in 0..3 {
            let (z0, z1) = valid_range(d, out[0], stride, kd);
            for kh in 0..3 {
                let (y0, y1) = valid_range(h, out[1], stride, kh);
                for kw in 0..3 {
                    let (x0, x1) = valid_range(w, out[2], stride, kw);
                    let row = ((ci * 3 + kd) * 3 + kh) * 3 + kw;
                    let row_slice = &mut dst[row * n..(row + 1) * n];
                    for oz in z0..z1 {
                        let iz = oz * stride + kd - 1;
                        for oy in y0..y1 {
                            let iy = oy * stride + kh - 1;
                            let src_base = ((ci * d + iz) * h + iy) * w;
                            let dst_base = (oz * out[1] + oy) * out[2];
                            if stride == 1 {
                                let ix0 = x0 + kw - 1;
                                row_slice[dst_base + x0..dst_base + x1].copy_from_slice(
                                    &src[src_base + ix0..src_base + ix0 + (x1 - x0)],
                                );
                            } else {
                                for ox in x0..x1 {
                                    row_slice[dst_base + ox] = src[src_base + ox * stride + kw - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Real>(
    cols: &Array2<F>,
    c: usize,
    sp: [usize; 3],
    stride: usize,
    out: [usize; 3],
) -> Array4<F> {
    let [d, h, w] = sp;
    let n = out[0] * out[1] * out[2];
    let mut x = Array4::<F>::zeros((c, d, h, w));
    let dst = x.as_slice_mut().expect("fresh buffer");
    let src = cols.as_slice().expect("contiguous cols");
    for ci in 0..c {
        for kd in 0..3 {
            let (z0, z1) = valid_range(d, out[0], stride, kd);
            for kh in 0..3 {
                let (y0, y1) = valid_range(h, out[1], stride, kh);
                for kw in 0..3 {
                    let (x0, x1) = valid_range(w, out[2], stride, kw);
                    let row = ((ci * 3 + kd) * 3 + kh) * 3 + kw;
                    let row_slice = &src[row * n..(row + 1) * n];
                    for oz in z0..z1 {
                        let iz = oz * stride + kd - 1;
                        for oy in y0..y1 {
                            let iy = oy * stride + kh - 1;
                            let dst_base = ((ci * d + iz) * h + iy) * w;
                            let src_base = (oz * out[1] + oy) * out[2];
                            for ox in x0..x1 {
                                dst[dst_base + ox * stride + kw - 1] += row_slice[src_base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_bias<F: Real>(y: &mut Array2<F>, bias: ndarray::ArrayView1<'_, F>) {
    for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
}

fn accumulate_bias_grad<F: Real>(grad: &mut ArrayD<F>, dy: &ArrayView2<'_, F>) {
    let sums: Array1<F> = dy.sum_axis(Axis(1));
    let mut g = grad
        .view_mut()
        .into_dimensionality::<Ix1>()
        .expect("1-d bias");
    g += &sums;
}

fn accumulate_weight_grad<F: Real>(
    grad: &mut ArrayD<F>,
    a: &ArrayView2<'_, F>,
    b_t: ArrayView2<'_, F>,
) {
    let mut g = grad
        .view_mut()
        .into_dimensionality::<Ix2>()
        .expect("2-d weight");
    general_mat_mul(F::one(), a, &b_t, F::one(), &mut g);
}

/// Kernel-3, padding-1 3D convolution with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<F> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `[out, in * 27]`
    pub weight: Param<F>,
    pub bias: Param<F>,
}

#[derive(Debug)]
pub struct Conv3dCache<F> {
    cols: Array2<F>,
    in_spatial: [usize; 3],
    out_spatial: [usize; 3],
}

impl<F: Real> Conv3d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * 27;
        Self {
            in_channels,
            out_channels,
            stride,
            weight: Param::uniform(&[out_channels, fan_in], fan_in, gain, rng),
            bias: Param::zeros(&[out_channels]),
        }
    }

    fn check(&self, x: &Array4<F>) -> Result<()> {
        if x.shape()[0] != self.in_channels {
            return Err(MagError::Dimension(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.shape()[0]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<(Array4<F>, Conv3dCache<F>)> {
        self.check(x)?;
        let (_, sp) = dims(x);
        let out = sp.map(|n| conv_out_len(n, self.stride));
        let cols = im2col(x, self.stride, out);
        let mut y = Array2::<F>::zeros((self.out_channels, cols.ncols()));
        general_mat_mul(F::one(), &self.weight.mat(), &cols, F::zero(), &mut y);
        add_bias(&mut y, self.bias.vec());
        let cache = Conv3dCache {
            cols,
            in_spatial: sp,
            out_spatial: out,
        };
        Ok((to_vol(y, out), cache))
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `input_grad` is set.
    pub fn backward(
        &mut self,
        cache: &Conv3dCache<F>,
        dy: &Array4<F>,
        input_grad: bool,
    ) -> Option<Array4<F>> {
        let dy2 = as_mat(dy);
        accumulate_weight_grad(&mut self.weight.grad, &dy2, cache.cols.t());
        accumulate_bias_grad(&mut self.bias.grad, &dy2);
        if !input_grad {
            return None;
        }
        let mut dcols = Array2::<F>::zeros(cache.cols.raw_dim());
        general_mat_mul(
            F::one(),
            &self.weight.mat().t(),
            &dy2,
            F::zero(),
            &mut dcols,
        );
        Some(col2im(
            &dcols,
            self.in_channels,
            cache.in_spatial,
            self.stride,
            cache.out_spatial,
        ))
    }
}

impl<F: Real> Parameterized<F> for Conv3d<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// 1x1x1 convolution: a per-voxel linear map across channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointwise<F> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out, in]`
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Real> Pointwise<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: Param::uniform(&[out_channels, in_channels], in_channels, gain, rng),
            bias: Param::zeros(&[out_channels]),
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>> {
        if x.shape()[0] != self.in_channels {
            return Err(MagError::Dimension(format!(
                "pointwise layer expects {} channels, got {}",
                self.in_channels,
                x.shape()[0]
            )));
        }
        let (_, sp) = dims(x);
        let x2 = as_mat(x);
        let mut y = Array2::<F>::zeros((self.out_channels, x2.ncols()));
        general_mat_mul(F::one(), &self.weight.mat(), &x2, F::zero(), &mut y);
        add_bias(&mut y, self.bias.vec());
        Ok(to_vol(y, sp))
    }

    /// `input` is the tensor that was passed to [`Pointwise::forward`].
    pub fn backward(&mut self, input: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
        let dy2 = as_mat(dy);
        let x2 = as_mat(input);
        accumulate_weight_grad(&mut self.weight.grad, &dy2, x2.t());
        accumulate_bias_grad(&mut self.bias.grad, &dy2);
        let mut dx = Array2::<F>::zeros((self.in_channels, dy2.ncols()));
        general_mat_mul(F::one(), &self.weight.mat().t(), &dy2, F::zero(), &mut dx);
        let (_, sp) = dims(dy);
        to_vol(dx, sp)
    }
}

impl<F: Real> Parameterized<F> for Pointwise<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Kernel-2, stride-2 transposed convolution (exact 2x upsampling).
#[derive(Debug, Clone, PartialEq)]
pub struct UpConv<F> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out * 8, in]`, rows ordered `(out, kd, kh, kw)`.
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Real> UpConv<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: Param::uniform(&[out_channels * 8, in_channels], in_channels, gain, rng),
            bias: Param::zeros(&[out_channels]),
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let (c, [d, h, w]) = dims(x);
        if c != self.in_channels {
            return Err(MagError::Dimension(format!(
                "upsampling layer expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let x2 = as_mat(x);
        let n = x2.ncols();
        let mut z = Array2::<F>::zeros((self.out_channels * 8, n));
        general_mat_mul(F::one(), &self.weight.mat(), &x2, F::zero(), &mut z);
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let mut y = Array4::<F>::zeros((self.out_channels, od, oh, ow));
        let zs = z.as_slice().expect("fresh");
        let ys = y.as_slice_mut().expect("fresh");
        let bias = self.bias.vec();
        for co in 0..self.out_channels {
            let b = bias[co];
            for k in 0..8 {
                let (a, bb, cc) = (k >> 2, (k >> 1) & 1, k & 1);
                let zrow = &zs[(co * 8 + k) * n..(co * 8 + k + 1) * n];
                for iz in 0..d {
                    for iy in 0..h {
                        let ybase = ((co * od + 2 * iz + a) * oh + 2 * iy + bb) * ow + cc;
                        let zbase = (iz * h + iy) * w;
                        for ix in 0..w {
                            ys[ybase + 2 * ix] = zrow[zbase + ix] + b;
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// `input` is the tensor that was passed to [`UpConv::forward`].
    pub fn backward(&mut self, input: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
        let (_, [d, h, w]) = dims(input);
        let n = d * h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let od = 2 * d;
        let mut dz = Array2::<F>::zeros((self.out_channels * 8, n));
        {
            let dys = dy.as_slice().expect("contiguous gradient");
            let dzs = dz.as_slice_mut().expect("fresh");
            for co in 0..self.out_channels {
                for k in 0..8 {
                    let (a, bb, cc) = (k >> 2, (k >> 1) & 1, k & 1);
                    let zrow = &mut dzs[(co * 8 + k) * n..(co * 8 + k + 1) * n];
                    for iz in 0..d {
                        for iy in 0..h {
                            let ybase = ((co * od + 2 * iz + a) * oh + 2 * iy + bb) * ow + cc;
                            let zbase = (iz * h + iy) * w;
                            for ix in 0..w {
                                zrow[zbase + ix] = dys[ybase + 2 * ix];
                            }
                        }
                    }
                }
            }
        }
        let x2 = as_mat(input);
        accumulate_weight_grad(&mut self.weight.grad, &dz.view(), x2.t());
        let dy2 = as_mat(dy);
        accumulate_bias_grad(&mut self.bias.grad, &dy2);
        let mut dx = Array2::<F>::zeros((self.in_channels, n));
        general_mat_mul(F::one(), &self.weight.mat().t(), &dz, F::zero(), &mut dx);
        to_vol(dx, [d, h, w])
    }
}

impl<F: Real> Parameterized<F> for UpConv<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub fn relu_inplace<F: Real>(x: &mut Array4<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Masks `dy` by the post-activation output `y` of a ReLU.
pub fn relu_backward<F: Real>(y: &Array4<F>, dy: &mut Array4<F>) {
    ndarray::Zip::from(dy).and(y).for_each(|g, &v| {
        if v <= F::zero() {
            *g = F::zero();
        }
    });
}

/// Channel-wise concatenation of two volumes with equal spatial extent.
pub fn concat_channels<F: Real>(a: &Array4<F>, b: &Array4<F>) -> Result<Array4<F>> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(MagError::Dimension(format!(
            "cannot concatenate {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("shapes checked"))
}

/// Splits a gradient produced by [`concat_channels`] back into its parts.
pub fn split_channels<F: Real>(g: &Array4<F>, first: usize) -> (Array4<F>, Array4<F>) {
    let (a, b) = g.view().split_at(Axis(0), first);
    (a.to_owned(), b.to_owned())
}
