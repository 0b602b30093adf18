use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{join, slice_of, slice_of_mut, trunc_normal_matrix, Params};
use crate::scalar::Scalar;

/// `y = x W + b` with `W` stored as (in, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: trunc_normal_matrix(rng, input, output),
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<F>, dy: &Array2<F>, grad: &mut Self) -> Array2<F> {
        general_mat_mul(F::one(), &x.t(), dy, F::one(), &mut grad.weight);
        if let Some(gb) = grad.bias.as_mut() {
            *gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight.t())
    }
}

impl<F: Scalar> Params<F> for Linear<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        out.push((join(prefix, "weight"), slice_of(&self.weight)));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), slice_of(b)));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [F])>) {
        out.push((join(prefix, "weight"), slice_of_mut(&mut self.weight)));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), slice_of_mut(b)));
        }
    }
}
