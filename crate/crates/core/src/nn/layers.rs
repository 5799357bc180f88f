use ndarray::linalg::general_mat_mul;
use ndarray::{Array4, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{join, Layer, Param, Real, Tensor};

fn contiguous<T: Real>(x: &Tensor<T>) -> std::borrow::Cow<'_, [T]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

fn take_cache<T: Real>(cache: &mut Option<Tensor<T>>, layer: &str) -> Tensor<T> {
    cache
        .take()
        .unwrap_or_else(|| panic!("{layer}: backward called without forward_train"))
}

/// 2-D convolution with zero padding.
pub struct Conv2d<T: Real> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    k: usize,
    s: usize,
    p: usize,
}

impl Geometry {
    /// Valid output columns for kernel offset `kx`: `ox` with `0 <= ox*s + kx - p < w`.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.p.saturating_sub(kx).div_ceil(self.s);
        let hi_excl = if self.w + self.p > kx {
            ((self.w + self.p - kx - 1) / self.s + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi_excl), hi_excl)
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let howo = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * howo..(row + 1) * howo];
                let (lo, hi) = g.ox_range(kx);
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if g.s == 1 {
                        let start = lo + kx - g.p;
                        line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, v) in line.iter_mut().enumerate().take(hi).skip(lo) {
                            *v = src[ox * g.s + kx - g.p];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let howo = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * howo..(row + 1) * howo];
                let (lo, hi) = g.ox_range(kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in lo..hi {
                        dst[ox * g.s + kx - g.p] += line[ox];
                    }
                }
            }
        }
    }
}

impl<T: Real> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[out_ch, in_ch, k, k]), |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        });
        Self {
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            weight: Param::new(w),
            bias: Param::new(ArrayD::zeros(IxDyn(&[out_ch]))),
            input: None,
        }
    }

    /// Spatial output size for an `h` × `w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn geometry(&self, c: usize, h: usize, w: usize) -> Geometry {
        assert_eq!(c, self.in_ch, "conv expects {} input channels, got {c}", self.in_ch);
        assert!(
            h + 2 * self.pad >= self.k && w + 2 * self.pad >= self.k,
            "input {h}x{w} smaller than kernel"
        );
        let (ho, wo) = self.output_hw(h, w);
        Geometry {
            c,
            h,
            w,
            ho,
            wo,
            k: self.k,
            s: self.stride,
            p: self.pad,
        }
    }

    fn ckk(&self) -> usize {
        self.in_ch * self.k * self.k
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dim();
        let g = self.geometry(c, h, w);
        let howo = g.ho * g.wo;
        let ckk = self.ckk();
        let xs = contiguous(x);
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_ch, ckk))
            .expect("weight layout");
        let bias = self.bias.value.as_slice().expect("bias layout");
        let mut y = Array4::<T>::zeros((n, self.out_ch, g.ho, g.wo));
        let mut cols = vec![T::zero(); ckk * howo];
        for i in 0..n {
            im2col(&xs[i * c * h * w..(i + 1) * c * h * w], &g, &mut cols);
            let colv = ArrayView2::from_shape((ckk, howo), &cols).expect("cols");
            let mut yv = y
                .index_axis_mut(Axis(0), i)
                .into_shape_with_order((self.out_ch, howo))
                .expect("output layout");
            for (mut row, b) in yv.rows_mut().into_iter().zip(bias) {
                row.fill(*b);
            }
            general_mat_mul(T::one(), &wmat, &colv, T::one(), &mut yv);
        }
        y
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.forward(x);
        self.input = Some(x.as_standard_layout().into_owned());
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = take_cache(&mut self.input, "conv");
        let (n, c, h, w) = x.dim();
        let g = self.geometry(c, h, w);
        let howo = g.ho * g.wo;
        let ckk = self.ckk();
        assert_eq!(dy.dim(), (n, self.out_ch, g.ho, g.wo), "conv backward: gradient shape");
        let dys = contiguous(dy);
        let xs = x.as_slice().expect("cached input is contiguous");
        let frozen = self.weight.frozen;
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_ch, ckk))
            .expect("weight layout")
            .to_owned();
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        let mut cols = vec![T::zero(); ckk * howo];
        let mut dcols = vec![T::zero(); ckk * howo];
        for i in 0..n {
            let dyv = ArrayView2::from_shape((self.out_ch, howo), &dys[i * self.out_ch * howo..(i + 1) * self.out_ch * howo]).expect("dy");
            if !frozen {
                im2col(&xs[i * c * h * w..(i + 1) * c * h * w], &g, &mut cols);
                let colv = ArrayView2::from_shape((ckk, howo), &cols).expect("cols");
                let mut dw = self
                    .weight
                    .grad
                    .view_mut()
                    .into_shape_with_order((self.out_ch, ckk))
                    .expect("grad layout");
                general_mat_mul(T::one(), &dyv, &colv.t(), T::one(), &mut dw);
                let db = self.bias.grad.as_slice_mut().expect("bias grad");
                for (o, row) in dyv.rows().into_iter().enumerate() {
                    db[o] += row.sum();
                }
            }
            let mut dcv = ArrayViewMut2::from_shape((ckk, howo), &mut dcols).expect("dcols");
            general_mat_mul(T::one(), &wmat.t(), &dyv, T::zero(), &mut dcv);
            let dxs = dx.as_slice_mut().expect("dx contiguous");
            col2im(&dcols, &g, &mut dxs[i * c * h * w..(i + 1) * c * h * w]);
        }
        dx
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}

/// Per-sample, per-channel normalization with a learned affine.
pub struct InstanceNorm<T: Real> {
    pub channels: usize,
    pub eps: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> InstanceNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            gamma: Param::new(ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            input: None,
        }
    }

    /// Mean and `1/sqrt(var + eps)` of one plane, accumulated in f64.
    fn stats(&self, plane: &[T]) -> (T, T) {
        let n = plane.len() as f64;
        let mean = plane.iter().map(|v| v.f64()).sum::<f64>() / n;
        let var = plane.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
        (T::of(mean), T::of(1.0 / (var + self.eps).sqrt()))
    }
}

impl<T: Real> Layer<T> for InstanceNorm<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "instance norm channel count");
        let mut y = x.as_standard_layout().into_owned();
        let hw = h * w;
        let gamma = self.gamma.value.as_slice().expect("gamma");
        let beta = self.beta.value.as_slice().expect("beta");
        let ys = y.as_slice_mut().expect("contiguous");
        for i in 0..n {
            for ch in 0..c {
                let plane = &mut ys[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                let (mean, inv) = self.stats(plane);
                let (g, b) = (gamma[ch], beta[ch]);
                for v in plane.iter_mut() {
                    *v = g * ((*v - mean) * inv) + b;
                }
            }
        }
        y
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.forward(x);
        self.input = Some(x.as_standard_layout().into_owned());
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = take_cache(&mut self.input, "instance norm");
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let nf = T::of(hw as f64);
        let dys = contiguous(dy);
        let xs = x.as_slice().expect("contiguous");
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().expect("contiguous");
        let gamma = self.gamma.value.as_slice().expect("gamma").to_vec();
        let frozen = self.gamma.frozen;
        for i in 0..n {
            for (ch, &g) in gamma.iter().enumerate() {
                let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                let xp = &xs[range.clone()];
                let dp = &dys[range.clone()];
                let (mean, inv) = self.stats(xp);
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for (xv, dv) in xp.iter().zip(dp) {
                    let xhat = (*xv - mean) * inv;
                    sum_d += *dv;
                    sum_dx += *dv * xhat;
                }
                if !frozen {
                    self.gamma.grad.as_slice_mut().expect("grad")[ch] += sum_dx;
                    self.beta.grad.as_slice_mut().expect("grad")[ch] += sum_d;
                }
                // with dxhat = g * dy: dx = inv/N * (N dxhat - sum dxhat - xhat sum(dxhat xhat))
                let scale = g * inv / nf;
                for ((o, xv), dv) in dxs[range].iter_mut().zip(xp).zip(dp) {
                    let xhat = (*xv - mean) * inv;
                    *o = scale * (nf * *dv - sum_d - xhat * sum_dx);
                }
            }
        }
        dx
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}

/// Elementwise activation with its derivative written in terms of the input.
macro_rules! activation {
    ($name:ident, $label:literal, |$x:ident| $f:expr, |$xd:ident| $df:expr) => {
        #[derive(Default)]
        pub struct $name<T: Real> {
            input: Option<Tensor<T>>,
        }

        impl<T: Real> $name<T> {
            pub fn new() -> Self {
                Self { input: None }
            }

            #[inline]
            pub fn apply($x: T) -> T {
                $f
            }

            #[inline]
            pub fn derivative($xd: T) -> T {
                $df
            }
        }

        impl<T: Real> Layer<T> for $name<T> {
            fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
                x.mapv(Self::apply)
            }

            fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
                let y = self.forward(x);
                self.input = Some(x.clone());
                y
            }

            fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
                let x = take_cache(&mut self.input, $label);
                let mut dx = dy.as_standard_layout().into_owned();
                ndarray::Zip::from(&mut dx)
                    .and(&x)
                    .for_each(|d, &v| *d *= Self::derivative(v));
                dx
            }

            fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}

            fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}

            fn clear_cache(&mut self) {
                self.input = None;
            }
        }
    };
}

activation!(Relu, "relu", |x| x.max(T::zero()), |x| if x > T::zero() {
    T::one()
} else {
    T::zero()
});

activation!(
    LeakyRelu,
    "leaky relu",
    |x| if x > T::zero() { x } else { T::of(0.2) * x },
    |x| if x > T::zero() { T::one() } else { T::of(0.2) }
);

activation!(
    Sigmoid,
    "sigmoid",
    |x| {
        if x >= T::zero() {
            T::one() / (T::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (T::one() + e)
        }
    },
    |x| {
        let s = Sigmoid::<T>::apply(x);
        s * (T::one() - s)
    }
);

// (tanh + 1) / 2: a tanh head rescaled to [0, 1]
activation!(Tanh01, "tanh01", |x| (x.tanh() + T::one()) * T::of(0.5), |x| {
    let t = x.tanh();
    (T::one() - t * t) * T::of(0.5)
});

/// Nearest-neighbour 2× upsampling.
#[derive(Default)]
pub struct Upsample2;

impl<T: Real> Layer<T> for Upsample2 {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dim();
        Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(i, ch, y, xx)| x[[i, ch, y / 2, xx / 2]])
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        Layer::<T>::forward(self, x)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c, h2, w2) = dy.dim();
        let mut dx = Array4::<T>::zeros((n, c, h2 / 2, w2 / 2));
        for ((i, ch, y, x), v) in dy.indexed_iter() {
            dx[[i, ch, y / 2, x / 2]] += *v;
        }
        dx
    }

    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}

    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}

    fn clear_cache(&mut self) {}
}

/// 2×2 mean pooling; odd trailing rows/columns are dropped.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dim();
    let q = T::of(0.25);
    Array4::from_shape_fn((n, c, h / 2, w / 2), |(i, ch, y, xx)| {
        (x[[i, ch, 2 * y, 2 * xx]] + x[[i, ch, 2 * y, 2 * xx + 1]] + x[[i, ch, 2 * y + 1, 2 * xx]] + x[[i, ch, 2 * y + 1, 2 * xx + 1]]) * q
    })
}

pub fn avg_pool2_backward<T: Real>(dy: &Tensor<T>, input_hw: (usize, usize)) -> Tensor<T> {
    let (n, c, _, _) = dy.dim();
    let q = T::of(0.25);
    Array4::from_shape_fn((n, c, input_hw.0, input_hw.1), |(i, ch, y, x)| {
        if y / 2 < dy.dim().2 && x / 2 < dy.dim().3 {
            dy[[i, ch, y / 2, x / 2]] * q
        } else {
            T::zero()
        }
    })
}

#[derive(Default)]
pub struct AvgPool2 {
    input_hw: Option<(usize, usize)>,
}

impl<T: Real> Layer<T> for AvgPool2 {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        avg_pool2(x)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input_hw = Some((x.dim().2, x.dim().3));
        avg_pool2(x)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let hw = self.input_hw.take().expect("avg pool: backward called without forward_train");
        avg_pool2_backward(dy, hw)
    }

    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}

    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}

    fn clear_cache(&mut self) {
        self.input_hw = None;
    }
}

/// Named chain of layers.
#[derive(Default)]
pub struct Sequential<T: Real> {
    pub layers: Vec<(String, Box<dyn Layer<T>>)>,
}

impl<T: Real> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer<T> + 'static) -> &mut Self {
        self.layers.push((name.into(), Box::new(layer)));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Real> Layer<T> for Sequential<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for (_, l) in &self.layers {
            h = l.forward(&h);
        }
        h
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for (_, l) in &mut self.layers {
            h = l.forward_train(&h);
        }
        h
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        for (_, l) in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (name, l) in &self.layers {
            l.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (name, l) in &mut self.layers {
            l.visit_mut(&join(prefix, name), f);
        }
    }

    fn clear_cache(&mut self) {
        for (_, l) in &mut self.layers {
            l.clear_cache();
        }
    }
}

/// conv3-IN-ReLU-conv3-IN plus identity skip.
pub struct ResBlock<T: Real> {
    body: Sequential<T>,
}

impl<T: Real> ResBlock<T> {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let mut body = Sequential::new();
        body.push("conv1", Conv2d::new(channels, channels, 3, 1, 1, rng))
            .push("norm1", InstanceNorm::new(channels))
            .push("act", Relu::new())
            .push("conv2", Conv2d::new(channels, channels, 3, 1, 1, rng))
            .push("norm2", InstanceNorm::new(channels));
        Self { body }
    }
}

impl<T: Real> Layer<T> for ResBlock<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.body.forward(x) + x
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.body.forward_train(x) + x
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        self.body.backward(dy) + dy
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.body.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.body.visit_mut(prefix, f)
    }

    fn clear_cache(&mut self) {
        self.body.clear_cache()
    }
}
