use ndarray::{Array1, Array2, Axis, Zip};

use super::{join, slice_of, slice_of_mut, Params};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let d = F::of(x.ncols() as f64);
        let eps = F::of(LN_EPS);
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        Zip::from(xhat.rows_mut()).and(&mut rstd).for_each(|mut row, r| {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / d;
            *r = F::one() / (var + eps).sqrt();
            let rv = *r;
            row.mapv_inplace(|v| v * rv);
        });
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: &Array2<F>, grad: &mut Self) -> Array2<F> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = F::of(dy.ncols() as f64);
        let mut dx = dy * &self.gamma;
        Zip::from(dx.rows_mut())
            .and(cache.xhat.rows())
            .and(&cache.rstd)
            .for_each(|mut g, xh, &r| {
                let mean_g = g.sum() / d;
                let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
                Zip::from(&mut g)
                    .and(&xh)
                    .for_each(|gv, &xv| *gv = r * (*gv - mean_g - xv * mean_gx));
            });
        dx
    }
}

impl<F: Scalar> Params<F> for LayerNorm<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        out.push((join(prefix, "gamma"), slice_of(&self.gamma)));
        out.push((join(prefix, "beta"), slice_of(&self.beta)));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [F])>) {
        out.push((join(prefix, "gamma"), slice_of_mut(&mut self.gamma)));
        out.push((join(prefix, "beta"), slice_of_mut(&mut self.beta)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{assert_close, numeric_grad};
    use crate::nn::trunc_normal_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalises_rows() {
        let ln = LayerNorm::<f64>::new(4);
        let x = ndarray::array![[1.0, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0]];
        let (y, _) = ln.forward(&x);
        assert!(y.row(0).sum().abs() < 1e-12);
        assert!((y.row(0).mapv(|v| v * v).sum() / 4.0 - 1.0).abs() < 1e-5);
        assert!(y.row(1).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ln = LayerNorm::<f64>::new(5);
        ln.gamma += &(trunc_normal_matrix::<f64, _>(&mut rng, 1, 5).row(0).to_owned() * 20.0);
        let x = trunc_normal_matrix::<f64, _>(&mut rng, 3, 5) * 50.0;
        let w = trunc_normal_matrix::<f64, _>(&mut rng, 3, 5) * 50.0;
        let loss = |l: &LayerNorm<f64>| (l.forward(&x).0 * &w).sum();
        let (_, cache) = ln.forward(&x);
        let mut grad = ln.zeroed();
        let dx = ln.backward(&cache, &w, &mut grad);
        for (t, (_, g)) in grad.named().iter().enumerate() {
            for (i, &gv) in g.iter().enumerate() {
                assert_close(gv, numeric_grad(&ln, t, i, 1e-5, loss), 1e-6, "layernorm");
            }
        }
        let h = 1e-5;
        for idx in [(0, 0), (1, 3), (2, 4)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = ((ln.forward(&xp).0 * &w).sum() - (ln.forward(&xm).0 * &w).sum()) / (2.0 * h);
            assert_close(dx[idx], num, 1e-5, "layernorm dx");
        }
    }
}
