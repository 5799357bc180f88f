//! A small CPU network engine: NCHW tensors, layers with hand-written
//! backward passes, the four network families, Adam and a parameter
//! container file.
//!
//! Layers cache only their input during `forward_train`; `backward` recomputes
//! whatever else it needs. Parameter gradients accumulate until `zero_grad`.

mod layers;
mod nets;
mod optim;
mod store;

use std::fmt::Debug;

use ndarray::{Array4, ArrayD, Axis};

pub use layers::{
    avg_pool2, avg_pool2_backward, AvgPool2, Conv2d, InstanceNorm, LeakyRelu, Relu, ResBlock, Sequential, Sigmoid, Tanh01, Upsample2,
};
pub use nets::{build_da_net, build_discriminator, build_mask_net, build_transform_net, NetConfig, NetFamily, Network};
pub use optim::{Adam, AdamConfig};
pub use store::{load_params, read_container, save_params, write_container, Container, ParameterStore, StoredTensor};

pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Batch × channels × height × width, standard layout.
pub type Tensor<T> = Array4<T>;

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    /// Frozen parameters receive no gradient and are skipped by the optimizer.
    pub frozen: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            frozen: false,
        }
    }
}

pub trait Layer<T: Real>: Send + Sync {
    /// Pure evaluation; safe to call concurrently.
    fn forward(&self, x: &Tensor<T>) -> Tensor<T>;
    /// Evaluation that remembers what `backward` needs.
    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T>;
    /// Gradient w.r.t. the input of the last `forward_train`; accumulates
    /// parameter gradients.
    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T>;
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
    /// Drops cached activations.
    fn clear_cache(&mut self);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Helpers available on every layer.
pub trait LayerExt<T: Real>: Layer<T> {
    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.grad.fill(T::zero()));
    }

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, _| out.push(n.to_string()));
        out
    }

    fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| {
            if !p.frozen {
                out.push(n.to_string())
            }
        });
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.len());
        n
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.visit_mut("", &mut |_, p| p.frozen = frozen);
    }

    fn store(&self) -> ParameterStore {
        let mut s = ParameterStore::default();
        self.visit("", &mut |n, p| s.insert_param(n, p));
        s
    }

    /// Copies values (and frozen flags) from `store`; every parameter must be
    /// present with a matching shape.
    fn load_store(&mut self, store: &ParameterStore) -> crate::Result<()> {
        let mut err = None;
        self.visit_mut("", &mut |n, p| {
            if err.is_some() {
                return;
            }
            match store.get(n) {
                Some(t) if t.shape == p.value.shape() => match t.to_array::<T>() {
                    Ok(a) => {
                        p.value = a;
                        p.frozen = t.frozen;
                    }
                    Err(e) => err = Some(e),
                },
                Some(t) => {
                    err = Some(crate::Error::Incompatible(format!(
                        "parameter {n}: stored shape {:?}, network expects {:?}",
                        t.shape,
                        p.value.shape()
                    )))
                }
                None => err = Some(crate::Error::Incompatible(format!("parameter {n} missing from store"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

impl<T: Real, L: Layer<T> + ?Sized> LayerExt<T> for L {}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views)
        .expect("channel concat: batch and spatial dims must agree")
        .as_standard_layout()
        .into_owned()
}

/// Splits a channel-axis gradient back into pieces of the given widths.
pub fn split_channels<T: Real>(x: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let mut out = Vec::with_capacity(widths.len());
    let mut start = 0;
    for &w in widths {
        out.push(x.slice(ndarray::s![.., start..start + w, .., ..]).to_owned());
        start += w;
    }
    assert_eq!(start, x.dim().1, "split widths do not cover all channels");
    out
}

pub fn cast<A: Real, B: Real>(x: &Tensor<A>) -> Tensor<B> {
    x.mapv(|v| B::of(v.f64()))
}

pub mod gradcheck;
