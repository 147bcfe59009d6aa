//! Minimal CPU layers with hand-written backward passes.
//!
//! Activations are NCHW `Array4`s in standard layout. Convolutions lower to
//! im2col + GEMM; every layer keeps what its backward pass needs in an
//! explicit cache instead of a tape.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{
    Array1, Array2, Array4, ArrayD, ArrayView2, Axis, IxDyn, LinalgScalar, ScalarOperand,
};
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Floating types the engine runs on: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + Debug
    + Default
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors. Layers hold `ParamId`s into it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<ArrayD<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, tensor: ArrayD<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.tensors[id.0]
    }

    pub fn replace(&mut self, id: ParamId, tensor: ArrayD<T>) {
        self.tensors[id.0] = tensor;
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<T>> {
        self.tensors.iter_mut()
    }

    pub fn zeros_like(&self) -> Grads<T> {
        Grads(
            self.tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| U::from_f64(v.to_f64())))
                .collect(),
        }
    }

    /// Flat copy of every scalar in store order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, values: &[T]) {
        assert_eq!(values.len(), self.num_scalars(), "flat parameter length");
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            for (dst, &src) in t.iter_mut().zip(&values[offset..offset + n]) {
                *dst = src;
            }
            offset += n;
        }
    }
}

/// Gradients laid out exactly like the owning [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T>(pub Vec<ArrayD<T>>);

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.0[id.0]
    }

    pub fn flatten(&self) -> Vec<T> {
        self.0.iter().flat_map(|t| t.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_height: usize,
    out_width: usize,
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Array2<T> {
    let k = g.kernel;
    let plane = g.out_height * g.out_width;
    let mut cols = Array2::<T>::zeros((g.channels * k * k, plane));
    let buf = cols.as_slice_mut().expect("standard layout");
    for c in 0..g.channels {
        let src_plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut buf[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &src_plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst_row = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &Array2<T>, g: &Geometry, dx: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_height * g.out_width;
    let buf = cols.as_slice().expect("standard layout");
    for c in 0..g.channels {
        let dst_plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &buf[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row =
                        &mut dst_plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let src_row = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Square-kernel 2D convolution with zero padding.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct ConvCache<T> {
    cols: Vec<Array2<T>>,
    geometry: Geometry,
}

impl Conv2d {
    /// He-normal weights scaled by `gain`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("finite std");
        let weight =
            ArrayD::from_shape_fn(IxDyn(&[out_channels, in_channels, kernel, kernel]), |_| {
                T::from_f64(normal.sample(rng))
            });
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = store.add(
            format!("{name}.bias"),
            ArrayD::zeros(IxDyn(&[out_channels])),
        );
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn output_hw(&self, height: usize, width: usize) -> (usize, usize) {
        (
            (height + 2 * self.padding - self.kernel) / self.stride + 1,
            (width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn weight_matrix<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> ArrayView2<'a, T> {
        store
            .get(self.weight)
            .view()
            .into_shape_with_order((
                self.out_channels,
                self.in_channels * self.kernel * self.kernel,
            ))
            .expect("conv weight is contiguous")
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
    ) -> (Array4<T>, ConvCache<T>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_hw(h, w);
        let geometry = Geometry {
            channels: c,
            height: h,
            width: w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            out_height: oh,
            out_width: ow,
        };
        let wmat = self.weight_matrix(store);
        let bias = store.get(self.bias);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array4::<T>::zeros((n, self.out_channels, oh, ow));
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let sample = &xs[i * c * h * w..(i + 1) * c * h * w];
            let col = im2col(sample, &geometry);
            let mut out_i = out
                .index_axis_mut(Axis(0), i)
                .into_shape_with_order((self.out_channels, oh * ow))
                .expect("contiguous output");
            general_mat_mul(T::one(), &wmat, &col, T::zero(), &mut out_i);
            for (mut row, &b) in out_i.outer_iter_mut().zip(bias.iter()) {
                row.mapv_inplace(|v| v + b);
            }
            cols.push(col);
        }
        (out, ConvCache { cols, geometry })
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &ConvCache<T>,
        dout: &Array4<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<Array4<T>> {
        let g = &cache.geometry;
        let n = cache.cols.len();
        let plane = g.out_height * g.out_width;
        let kk = self.in_channels * self.kernel * self.kernel;
        let wmat = self.weight_matrix(store);
        let dout = dout.as_standard_layout();
        {
            let mut dw = grads
                .get_mut(self.weight)
                .view_mut()
                .into_shape_with_order((self.out_channels, kk))
                .expect("contiguous grad");
            for i in 0..n {
                let d_i = dout
                    .index_axis(Axis(0), i)
                    .into_shape_with_order((self.out_channels, plane))
                    .expect("contiguous dout");
                general_mat_mul(T::one(), &d_i, &cache.cols[i].t(), T::one(), &mut dw);
            }
        }
        {
            let db = grads.get_mut(self.bias);
            for i in 0..n {
                for (o, plane_grad) in dout.index_axis(Axis(0), i).outer_iter().enumerate() {
                    db[o] += plane_grad.sum();
                }
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dx = Array4::<T>::zeros((n, g.channels, g.height, g.width));
        let mut dcols = Array2::<T>::zeros((kk, plane));
        let per = g.channels * g.height * g.width;
        let dxs = dx.as_slice_mut().expect("standard layout");
        for i in 0..n {
            let d_i = dout
                .index_axis(Axis(0), i)
                .into_shape_with_order((self.out_channels, plane))
                .expect("contiguous dout");
            general_mat_mul(T::one(), &wmat.t(), &d_i, T::zero(), &mut dcols);
            col2im(&dcols, g, &mut dxs[i * per..(i + 1) * per]);
        }
        Some(dx)
    }
}

/// 1x1 classifier whose per-class arithmetic does not depend on the number
/// of classes: every logit plane is `bias + sum_c w[k, c] * x[c]` accumulated
/// in channel order. Growing the class count therefore leaves existing logit
/// planes bit-identical.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
}

impl ClassifierHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, (1.0 / in_channels as f64).sqrt()).expect("finite std");
        let weight = ArrayD::from_shape_fn(IxDyn(&[num_classes, in_channels]), |_| {
            T::from_f64(normal.sample(rng))
        });
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[num_classes])));
        Self {
            weight,
            bias,
            in_channels,
        }
    }

    pub fn num_classes<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }

    fn weight_matrix<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> ArrayView2<'a, T> {
        let k = self.num_classes(store);
        store
            .get(self.weight)
            .view()
            .into_shape_with_order((k, self.in_channels))
            .expect("head weight is contiguous")
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "head input channels");
        let wmat = self.weight_matrix(store);
        let bias = store.get(self.bias);
        let k = wmat.nrows();
        let plane = h * w;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array4::<T>::zeros((n, k, h, w));
        let os = out.as_slice_mut().expect("standard layout");
        for i in 0..n {
            for class in 0..k {
                let dst = &mut os[(i * k + class) * plane..(i * k + class + 1) * plane];
                dst.fill(bias[class]);
                for ch in 0..c {
                    let wk = wmat[[class, ch]];
                    let src = &xs[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wk * s;
                    }
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
        dlogits: &Array4<T>,
        grads: &mut Grads<T>,
    ) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let wmat = self.weight_matrix(store);
        let k = wmat.nrows();
        let plane = h * w;
        let x = x.as_standard_layout();
        let dl = dlogits.as_standard_layout();
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        {
            let mut dw = grads
                .get_mut(self.weight)
                .view_mut()
                .into_shape_with_order((k, c))
                .expect("contiguous grad");
            for i in 0..n {
                let x_i = x
                    .index_axis(Axis(0), i)
                    .into_shape_with_order((c, plane))
                    .expect("contiguous");
                let d_i = dl
                    .index_axis(Axis(0), i)
                    .into_shape_with_order((k, plane))
                    .expect("contiguous");
                general_mat_mul(T::one(), &d_i, &x_i.t(), T::one(), &mut dw);
                let mut dx_i = dx
                    .index_axis_mut(Axis(0), i)
                    .into_shape_with_order((c, plane))
                    .expect("contiguous");
                general_mat_mul(T::one(), &wmat.t(), &d_i, T::zero(), &mut dx_i);
            }
        }
        let db = grads.get_mut(self.bias);
        for i in 0..n {
            for (class, plane_grad) in dl.index_axis(Axis(0), i).outer_iter().enumerate() {
                db[class] += plane_grad.sum();
            }
        }
        dx
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| v.max(T::zero()));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace<T: Scalar>(grad: &mut Array4<T>, relu_out: &Array4<T>) {
    ndarray::Zip::from(grad).and(relu_out).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

pub fn upsample2x<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<T>::zeros((n, c, 2 * h, 2 * w));
    for ((i, ch, y, xx), v) in out.indexed_iter_mut() {
        *v = x[[i, ch, y / 2, xx / 2]];
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block.
pub fn upsample2x_backward<T: Scalar>(grad: &Array4<T>) -> Array4<T> {
    let (n, c, h2, w2) = grad.dim();
    let mut out = Array4::<T>::zeros((n, c, h2 / 2, w2 / 2));
    for ((i, ch, y, x), &g) in grad.indexed_iter() {
        out[[i, ch, y / 2, x / 2]] += g;
    }
    out
}

pub fn bias_vector<T: Scalar>(store: &ParamStore<T>, id: ParamId) -> Array1<T> {
    store
        .get(id)
        .view()
        .into_dimensionality()
        .expect("bias is 1-D")
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(
        x: &Array4<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        Array4::from_shape_fn((n, o, oh, ow), |(i, oc, y, xx)| {
            let mut acc = b[[oc]];
            for ic in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        let ix = (xx * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w[[oc, ic, ky, kx]] * x[[i, ic, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride) in &[(3, 1), (3, 2), (1, 1), (1, 2)] {
            let mut store = ParamStore::<f64>::default();
            let conv = Conv2d::new(&mut store, "c", 2, 3, k, stride, 1.0, &mut rng);
            store
                .get_mut(conv.bias)
                .mapv_inplace(|_| rng.gen_range(-1.0..1.0));
            let x = Array4::from_shape_fn((2, 2, 6, 5), |_| rng.gen_range(-1.0..1.0));
            let (y, _) = conv.forward(&store, &x);
            let expected = naive_conv(
                &x,
                store.get(conv.weight),
                store.get(conv.bias),
                stride,
                k / 2,
            );
            assert_eq!(y.dim(), expected.dim());
            for (a, b) in y.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::default();
        let conv = Conv2d::new(&mut store, "c", 2, 2, 3, 2, 1.0, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 5, 4), |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = conv.forward(&store, &x);
        let probe = Array4::from_shape_fn(y.raw_dim(), |_| rng.gen_range(-1.0..1.0));
        let loss = |s: &ParamStore<f64>, x: &Array4<f64>| (conv.forward(s, x).0 * &probe).sum();
        let mut grads = store.zeros_like();
        let dx = conv
            .backward(&store, &cache, &probe, &mut grads, true)
            .unwrap();
        let eps = 1e-6;
        let flat = store.flatten();
        let analytic = grads.flatten();
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += eps;
            let mut minus = flat.clone();
            minus[i] -= eps;
            let mut sp = store.clone();
            sp.assign_flat(&plus);
            let mut sm = store.clone();
            sm.assign_flat(&minus);
            let numeric = (loss(&sp, &x) - loss(&sm, &x)) / (2.0 * eps);
            assert!((numeric - analytic[i]).abs() < 1e-6, "param {i}");
        }
        for idx in [[0, 0, 0, 0], [0, 1, 2, 3], [0, 0, 4, 1]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let numeric = (loss(&store, &xp) - loss(&store, &xm)) / (2.0 * eps);
            assert!((numeric - dx[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array4::from_shape_fn((1, 2, 3, 3), |_| rng.gen_range(-1.0f64..1.0));
        let g = Array4::from_shape_fn((1, 2, 6, 6), |_| rng.gen_range(-1.0f64..1.0));
        let lhs = (upsample2x(&x) * &g).sum();
        let rhs = (&x * &upsample2x_backward(&g)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
