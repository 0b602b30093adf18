//! Layers with explicit forward caches and exact backward passes.
//!
//! Every layer's gradient has the same type as the layer itself, so
//! accumulation, optimizer state and checkpointing all walk the same
//! named-tensor list.

mod attention;
mod block;
mod linear;
mod norm;

pub use attention::{Attention, AttentionCache};
pub use block::{DecoderBlock, DecoderBlockCache, EncoderBlock, EncoderBlockCache, Mlp, MlpCache};
pub use linear::Linear;
pub use norm::{LayerNorm, LayerNormCache};

use ndarray::{Array, Array1, Array2, Dimension};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Named view over every trainable tensor of a module, in a fixed order.
pub trait Params<F: Scalar> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [F])>);

    fn named(&self) -> Vec<(String, &[F])> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, s)| s.len()).sum()
    }

    /// Same structure with every value set to zero.
    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut g = self.clone();
        for (_, s) in g.named_mut() {
            s.fill(F::zero());
        }
        g
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for ((_, dst), (_, src)) in self.named_mut().into_iter().zip(other.named()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, factor: F) {
        for (_, s) in self.named_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn slice_of<F: Scalar, D: Dimension>(a: &Array<F, D>) -> &[F] {
    a.as_slice().expect("parameters are kept in standard layout")
}

pub(crate) fn slice_of_mut<F: Scalar, D: Dimension>(a: &mut Array<F, D>) -> &mut [F] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<F: Scalar, R: Rng + ?Sized>(rng: &mut R, std: f64) -> F {
    let dist = Normal::new(0.0, std).expect("valid std");
    loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            return F::of(v);
        }
    }
}

pub const INIT_STD: f64 = 0.02;

pub fn trunc_normal_matrix<F: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || trunc_normal(rng, INIT_STD))
}

pub fn trunc_normal_vector<F: Scalar, R: Rng + ?Sized>(rng: &mut R, len: usize) -> Array1<F> {
    Array1::from_shape_simple_fn(len, || trunc_normal(rng, INIT_STD))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let (c, a, half) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5));
    x.mapv(|v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<F: Scalar>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let (c, a, half, three) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5), F::of(3.0));
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let t = (c * (v + a * v * v * v)).tanh();
        let dt = (F::one() - t * t) * c * (F::one() + three * a * v * v);
        *d *= half * (F::one() + t) + half * v * dt;
    });
    dx
}
