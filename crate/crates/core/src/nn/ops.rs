//! Elementwise activations and small tensor ops shared by the models.

use ndarray::{Array2, Array3, Axis};

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Derivative in terms of the output `s = sigmoid(x)`.
pub fn sigmoid_grad_from_out(s: f64) -> f64 {
    s * (1.0 - s)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh approximation; smooth everywhere, which keeps central-difference
/// checks on the full model well behaved.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax, shifted by the row max for stability.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Nearest-neighbor 2x upsample of `(h, w, c)`.
pub fn upsample_nearest2(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    Array3::from_shape_fn((2 * h, 2 * w, c), |(i, j, ch)| x[[i / 2, j / 2, ch]])
}

/// Adjoint of [`upsample_nearest2`]: each source cell collects its 2x2 block.
pub fn upsample_nearest2_adjoint(dy: &Array3<f64>) -> Array3<f64> {
    let (h2, w2, c) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array3::zeros((h, w, c));
    for i in 0..h2 {
        for j in 0..w2 {
            for ch in 0..c {
                out[[i / 2, j / 2, ch]] += dy[[i, j, ch]];
            }
        }
    }
    out
}

/// Mean of per-row cross-entropy given logits rows and target indices.
pub fn cross_entropy_mean(logits: &Array2<f64>, targets: &[usize]) -> f64 {
    assert_eq!(logits.nrows(), targets.len());
    let logp = log_softmax_rows(logits);
    let mut sum = 0.0;
    for (row, &t) in logp.axis_iter(Axis(0)).zip(targets) {
        sum -= row[t];
    }
    sum / targets.len() as f64
}

/// Gradient of [`cross_entropy_mean`] in the logits: `(softmax - onehot) / n`.
pub fn cross_entropy_grad(logits: &Array2<f64>, targets: &[usize]) -> Array2<f64> {
    let n = targets.len() as f64;
    let mut grad = softmax_rows(logits);
    for (i, &t) in targets.iter().enumerate() {
        grad[[i, t]] -= 1.0;
    }
    grad.mapv_inplace(|v| v / n);
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        for k in -20..=20 {
            let x = k as f64 * 0.3;
            let eps = 1e-6;
            let num = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((gelu_grad(x) - num).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_handle_large_logits() {
        let x = Array2::from_shape_vec((2, 3), vec![1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0])
            .unwrap();
        let s = softmax_rows(&x);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite()));
        }
        let lp = log_softmax_rows(&x);
        for (a, b) in s.iter().zip(lp.iter()) {
            assert!((a.ln() - b).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_vocab() {
        let vocab = 128;
        let logits = Array2::from_elem((10, vocab), 3.7);
        let targets: Vec<usize> = (0..10).map(|i| i * 11 % vocab).collect();
        let ce = cross_entropy_mean(&logits, &targets);
        assert!((ce - (vocab as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let mut rng = stream_rng(3, "nn/ce");
        let logits = Array2::from_shape_fn((4, 7), |_| rng.random::<f64>() * 2.0 - 1.0);
        let targets = vec![0usize, 3, 6, 2];
        let grad = cross_entropy_grad(&logits, &targets);
        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..7 {
                let mut p = logits.clone();
                p[[i, j]] += eps;
                let mut m = logits.clone();
                m[[i, j]] -= eps;
                let num =
                    (cross_entropy_mean(&p, &targets) - cross_entropy_mean(&m, &targets))
                        / (2.0 * eps);
                assert!((grad[[i, j]] - num).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn upsample_adjoint_inner_product() {
        let mut rng = stream_rng(4, "nn/up");
        let x = ndarray::Array3::from_shape_fn((3, 5, 2), |_| rng.random::<f64>() - 0.5);
        let u = ndarray::Array3::from_shape_fn((6, 10, 2), |_| rng.random::<f64>() - 0.5);
        let fx = upsample_nearest2(&x);
        let bu = upsample_nearest2_adjoint(&u);
        let lhs: f64 = fx.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(bu.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
