use super::{read_array, write_array, FlatParams};
use ndarray::{Array1, Array2, Axis};

/// Layer normalization over the last axis of `(n, d)` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LnGrads {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).expect("d > 0");
        let mut xhat = x.clone();
        for (mut row, m) in xhat.rows_mut().into_iter().zip(mean.iter()) {
            row.mapv_inplace(|v| v - m);
        }
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter()) {
            row.mapv_inplace(|v| v * s);
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            row *= &self.gamma;
            row += &self.beta;
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache, dy: &Array2<f64>) -> (Array2<f64>, LnGrads) {
        let d = dy.ncols() as f64;
        let grads = LnGrads {
            gamma: (dy * &cache.xhat).sum_axis(Axis(0)),
            beta: dy.sum_axis(Axis(0)),
        };
        // dxhat = dy * gamma; per row:
        // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut dxhat = dy.clone();
        for mut row in dxhat.rows_mut() {
            row *= &self.gamma;
        }
        let m1 = dxhat.sum_axis(Axis(1)) / d;
        let m2 = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
        let mut dx = dxhat;
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            let (a, b, s) = (m1[i], m2[i], cache.inv_std[i]);
            for (j, v) in row.iter_mut().enumerate() {
                *v = s * (*v - a - cache.xhat[[i, j]] * b);
            }
        }
        (dx, grads)
    }

    pub fn zeros_like_grads(&self) -> LnGrads {
        LnGrads {
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
        }
    }
}

impl LnGrads {
    pub fn accumulate(&mut self, other: &LnGrads) {
        self.gamma += &other.gamma;
        self.beta += &other.beta;
    }

    pub fn scale(&mut self, s: f64) {
        self.gamma *= s;
        self.beta *= s;
    }
}

impl FlatParams for LayerNorm {
    fn param_len(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        write_array(&self.gamma, out);
        write_array(&self.beta, out);
    }

    fn read_params(&mut self, data: &mut &[f64]) {
        read_array(&mut self.gamma, data);
        read_array(&mut self.beta, data);
    }
}

impl FlatParams for LnGrads {
    fn param_len(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        write_array(&self.gamma, out);
        write_array(&self.beta, out);
    }

    fn read_params(&mut self, data: &mut &[f64]) {
        read_array(&mut self.gamma, data);
        read_array(&mut self.beta, data);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{input_grad_check, param_grad_check};
    use crate::nn::params_to_vec;
    use crate::seed::stream_rng;
    use rand::Rng;

    #[test]
    fn normalizes_rows() {
        let mut rng = stream_rng(0, "nn/ln");
        let x = Array2::from_shape_fn((4, 8), |_| rng.random::<f64>() * 3.0 - 1.0);
        let ln = LayerNorm::new(8);
        let (y, _) = ln.forward(&x);
        for row in y.rows() {
            let mean: f64 = row.mean().unwrap();
            let var: f64 = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream_rng(1, "nn/ln2");
        let x = Array2::from_shape_fn((3, 6), |_| rng.random::<f64>() * 2.0 - 1.0);
        let mut ln = LayerNorm::new(6);
        // Non-trivial gamma/beta so their gradients are exercised.
        ln.gamma
            .iter_mut()
            .for_each(|v| *v = 0.5 + rng.random::<f64>());
        ln.beta.iter_mut().for_each(|v| *v = rng.random::<f64>());
        let target = Array2::from_shape_fn((3, 6), |_| rng.random::<f64>());
        let loss_of = |y: &Array2<f64>| -> f64 {
            y.iter()
                .zip(target.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                * 0.5
        };
        let (y, cache) = ln.forward(&x);
        let dy = &y - &target;
        let (dx, grads) = ln.backward(&cache, &dy);
        let analytic = params_to_vec(&grads);
        let worst = param_grad_check(&mut ln, &analytic, 1e-6, |m| loss_of(&m.forward(&x).0));
        assert!(worst < 1e-6, "param grad err {worst}");
        let mut flat_x: Vec<f64> = x.iter().copied().collect();
        let flat_dx: Vec<f64> = dx.iter().copied().collect();
        let worst = input_grad_check(&mut flat_x, &flat_dx, 1e-6, |vals| {
            let xi = Array2::from_shape_vec((3, 6), vals.to_vec()).unwrap();
            loss_of(&ln.forward(&xi).0)
        });
        assert!(worst < 1e-6, "input grad err {worst}");
    }
}
