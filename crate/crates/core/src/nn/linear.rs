use super::{read_array, write_array, FlatParams};
use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Affine map on row vectors: `y = x W + b`, `W` is `(input, output)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(input: usize, output: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std is a literal");
        Self {
            w: Array2::from_shape_fn((input, output), |_| normal.sample(rng)),
            b: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> (Array2<f64>, LinearGrads) {
        let dx = dy.dot(&self.w.t());
        let grads = LinearGrads {
            w: x.t().dot(dy),
            b: dy.sum_axis(ndarray::Axis(0)),
        };
        (dx, grads)
    }

    pub fn zeros_like_grads(&self) -> LinearGrads {
        LinearGrads {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearGrads {
    pub fn accumulate(&mut self, other: &LinearGrads) {
        self.w += &other.w;
        self.b += &other.b;
    }

    pub fn scale(&mut self, s: f64) {
        self.w *= s;
        self.b *= s;
    }
}

impl FlatParams for Linear {
    fn param_len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        write_array(&self.w, out);
        write_array(&self.b, out);
    }

    fn read_params(&mut self, data: &mut &[f64]) {
        read_array(&mut self.w, data);
        read_array(&mut self.b, data);
    }
}

impl FlatParams for LinearGrads {
    fn param_len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        write_array(&self.w, out);
        write_array(&self.b, out);
    }

    fn read_params(&mut self, data: &mut &[f64]) {
        read_array(&mut self.w, data);
        read_array(&mut self.b, data);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::param_grad_check;
    use crate::nn::{params_from_vec, params_to_vec};
    use crate::seed::stream_rng;
    use ndarray::Array2;
    use rand::Rng;

    fn sq_loss(y: &Array2<f64>) -> f64 {
        y.iter().map(|v| v * v).sum::<f64>() * 0.5
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream_rng(0, "nn/linear");
        let mut lin = Linear::new(5, 4, 0.5, &mut rng);
        let x = Array2::from_shape_fn((3, 5), |_| rng.random::<f64>() - 0.5);
        let y = lin.forward(&x);
        // d(sq_loss)/dy = y.
        let (dx, grads) = lin.backward(&x, &y);
        let analytic = params_to_vec(&grads);
        let worst = param_grad_check(&mut lin, &analytic, 1e-5, |m| sq_loss(&m.forward(&x)));
        assert!(worst < 1e-7, "param grad err {worst}");
        let mut flat_x: Vec<f64> = x.iter().copied().collect();
        let flat_dx: Vec<f64> = dx.iter().copied().collect();
        let worst = crate::nn::testutil::input_grad_check(&mut flat_x, &flat_dx, 1e-5, |vals| {
            let xi = Array2::from_shape_vec((3, 5), vals.to_vec()).unwrap();
            sq_loss(&lin.forward(&xi))
        });
        assert!(worst < 1e-7, "input grad err {worst}");
    }

    #[test]
    fn flat_params_roundtrip() {
        let mut rng = stream_rng(1, "nn/linear2");
        let mut lin = Linear::new(3, 2, 0.5, &mut rng);
        let flat = params_to_vec(&lin);
        assert_eq!(flat.len(), 3 * 2 + 2);
        let mut other = Linear::new(3, 2, 0.5, &mut rng);
        params_from_vec(&mut other, &flat).unwrap();
        assert_eq!(lin, other);
        // Mismatched length is rejected.
        assert!(params_from_vec(&mut lin, &flat[1..]).is_err());
    }
}
