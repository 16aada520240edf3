//! Discrete tokenizer: a convolutional autoencoder with a vector-quantized
//! bottleneck. The encoder maps pixels to a grid of code vectors at 1/4
//! resolution, quantization snaps each to its nearest codebook entry, and
//! the decoder reconstructs pixels from the quantized grid.

use crate::error::{Error, Result};
use crate::nn::ops::{
    relu, relu_grad, sigmoid, sigmoid_grad_from_out, upsample_nearest2, upsample_nearest2_adjoint,
};
use crate::nn::{Conv2d, ConvGrads, FlatParams};
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Token ids on the token grid, row-major `(rows, cols)`.
pub type TokenGrid = Array2<u32>;

/// Per-position logits `(rows, cols, vocab)`.
pub type LogitsGrid = Array3<f64>;

pub const COMMIT_BETA: f64 = 0.25;

/// Spatial reduction of the encoder (two stride-2 stages).
pub const DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    /// `(vocab, d_code)` code vectors.
    codebook: Array2<f64>,
    dec1: Conv2d,
    dec2: Conv2d,
    dec3: Conv2d,
}

impl Tokenizer {
    /// Encoder downsamples by 4 (two stride-2 convs); the decoder mirrors
    /// it with nearest-neighbor upsampling and a sigmoid output.
    pub fn new(vocab: usize, d_code: usize, rng: &mut ChaCha8Rng) -> Self {
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, 0.1).expect("literal std");
        let enc1 = Conv2d::new(3, 3, 16, 2, 1, he(27), rng);
        let enc2 = Conv2d::new(3, 16, d_code, 2, 1, he(9 * 16), rng);
        let enc3 = Conv2d::new(3, d_code, d_code, 1, 1, he(9 * d_code), rng);
        let codebook = Array2::from_shape_fn((vocab, d_code), |_| normal.sample(rng));
        let dec1 = Conv2d::new(3, d_code, d_code, 1, 1, he(9 * d_code), rng);
        let dec2 = Conv2d::new(3, d_code, 16, 1, 1, he(9 * d_code), rng);
        let dec3 = Conv2d::new(3, 16, 3, 1, 1, he(9 * 16), rng);
        Self {
            enc1,
            enc2,
            enc3,
            codebook,
            dec1,
            dec2,
            dec3,
        }
    }

    pub fn vocab(&self) -> usize {
        self.codebook.nrows()
    }

    pub fn d_code(&self) -> usize {
        self.codebook.ncols()
    }

    /// Pre-quantization feature grid `(h/4, w/4, d_code)`.
    pub fn encode(&self, pixels: &Array3<f64>) -> Array3<f64> {
        let a1 = self.enc1.forward(pixels).mapv(relu);
        let a2 = self.enc2.forward(&a1).mapv(relu);
        self.enc3.forward(&a2)
    }

    /// Negated squared distances to every code, per grid position. The
    /// argmax over the last axis is the token id.
    pub fn logits_from_features(&self, z_e: &Array3<f64>) -> LogitsGrid {
        let (rows, cols, d) = z_e.dim();
        assert_eq!(d, self.d_code(), "feature depth mismatch");
        let vocab = self.vocab();
        let code_sq: Vec<f64> = self
            .codebook
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        let mut out = Array3::zeros((rows, cols, vocab));
        for i in 0..rows {
            for j in 0..cols {
                let z = z_e.slice(ndarray::s![i, j, ..]);
                let z_sq: f64 = z.iter().map(|v| v * v).sum();
                for w in 0..vocab {
                    let dot: f64 = z
                        .iter()
                        .zip(self.codebook.row(w).iter())
                        .map(|(a, b)| a * b)
                        .sum();
                    out[[i, j, w]] = -(z_sq - 2.0 * dot + code_sq[w]);
                }
            }
        }
        out
    }

    /// Token grid via nearest code; ties break to the smallest id.
    pub fn tokenize_features(&self, z_e: &Array3<f64>) -> TokenGrid {
        let logits = self.logits_from_features(z_e);
        argmax_tokens(&logits)
    }

    pub fn tokenize_pixels(&self, pixels: &Array3<f64>) -> TokenGrid {
        self.tokenize_features(&self.encode(pixels))
    }

    /// Quantized feature grid for a token grid.
    pub fn embed_tokens(&self, tokens: &TokenGrid) -> Result<Array3<f64>> {
        let (rows, cols) = tokens.dim();
        let mut z_q = Array3::zeros((rows, cols, self.d_code()));
        for i in 0..rows {
            for j in 0..cols {
                let id = tokens[[i, j]];
                if id as usize >= self.vocab() {
                    return Err(Error::TokenOutOfRange {
                        id,
                        vocab: self.vocab(),
                    });
                }
                z_q.slice_mut(ndarray::s![i, j, ..])
                    .assign(&self.codebook.row(id as usize));
            }
        }
        Ok(z_q)
    }

    /// Pixels from quantized features; output is sigmoid-bounded.
    pub fn decode_features(&self, z_q: &Array3<f64>) -> Array3<f64> {
        let h4 = self.dec1.forward(z_q).mapv(relu);
        let h5 = self.dec2.forward(&upsample_nearest2(&h4)).mapv(relu);
        self.dec3
            .forward(&upsample_nearest2(&h5))
            .mapv(sigmoid)
    }

    pub fn decode_tokens(&self, tokens: &TokenGrid) -> Result<Array3<f64>> {
        Ok(self.decode_features(&self.embed_tokens(tokens)?))
    }

    /// Full training pass with caches and the three loss terms.
    pub fn forward_train(&self, x: &Array3<f64>) -> TokTrainPass {
        let a1 = self.enc1.forward(x);
        let h1 = a1.mapv(relu);
        let a2 = self.enc2.forward(&h1);
        let h2 = a2.mapv(relu);
        let z_e = self.enc3.forward(&h2);

        let tokens = self.tokenize_features(&z_e);
        let z_q = self.embed_tokens(&tokens).expect("own tokens are in range");

        let a4 = self.dec1.forward(&z_q);
        let h4 = a4.mapv(relu);
        let u4 = upsample_nearest2(&h4);
        let a5 = self.dec2.forward(&u4);
        let h5 = a5.mapv(relu);
        let u5 = upsample_nearest2(&h5);
        let a6 = self.dec3.forward(&u5);
        let out = a6.mapv(sigmoid);

        let n_px = out.len() as f64;
        let recon = out
            .iter()
            .zip(x.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n_px;
        let n_z = z_e.len() as f64;
        let codebook_loss = z_q
            .iter()
            .zip(z_e.iter())
            .map(|(q, e)| (q - e) * (q - e))
            .sum::<f64>()
            / n_z;
        // Same squared distance, but gradients flow to different sides.
        let commit_loss = codebook_loss;

        TokTrainPass {
            x: x.clone(),
            a1,
            h1,
            a2,
            h2,
            z_e,
            tokens,
            z_q,
            a4,
            u4,
            a5,
            u5,
            out,
            recon,
            codebook_loss,
            commit_loss,
        }
    }

    /// Gradients of `recon + codebook_loss + beta * commit_loss`. The
    /// decoder gradient reaches the encoder straight through quantization;
    /// the codebook only learns from its own loss term.
    pub fn backward_train(&self, pass: &TokTrainPass, beta: f64) -> TokenizerGrads {
        let n_px = pass.out.len() as f64;
        let mut da6 = Array3::zeros(pass.out.dim());
        for ((d, o), x) in da6.iter_mut().zip(pass.out.iter()).zip(pass.x.iter()) {
            let dout = 2.0 * (o - x) / n_px;
            *d = dout * sigmoid_grad_from_out(*o);
        }
        let (du5, g_dec3) = self.dec3.backward(&pass.u5, &da6);
        let mut dh5 = upsample_nearest2_adjoint(&du5);
        for (d, a) in dh5.iter_mut().zip(pass.a5.iter()) {
            *d *= relu_grad(*a);
        }
        let (du4, g_dec2) = self.dec2.backward(&pass.u4, &dh5);
        let mut dh4 = upsample_nearest2_adjoint(&du4);
        for (d, a) in dh4.iter_mut().zip(pass.a4.iter()) {
            *d *= relu_grad(*a);
        }
        let (dz_q, g_dec1) = self.dec1.backward(&pass.z_q, &dh4);

        let n_z = pass.z_e.len() as f64;
        // Straight-through into z_e, plus the commitment pull toward codes.
        let mut dz_e = dz_q.clone();
        for ((d, e), q) in dz_e.iter_mut().zip(pass.z_e.iter()).zip(pass.z_q.iter()) {
            *d += beta * 2.0 * (e - q) / n_z;
        }
        // Codebook rows move toward their assigned features.
        let mut d_codebook = Array2::zeros(self.codebook.dim());
        let (rows, cols, d) = pass.z_e.dim();
        for i in 0..rows {
            for j in 0..cols {
                let k = pass.tokens[[i, j]] as usize;
                for c in 0..d {
                    d_codebook[[k, c]] +=
                        2.0 * (pass.z_q[[i, j, c]] - pass.z_e[[i, j, c]]) / n_z;
                }
            }
        }

        let (dh2, g_enc3) = self.enc3.backward(&pass.h2, &dz_e);
        let mut da2 = dh2;
        for (dv, a) in da2.iter_mut().zip(pass.a2.iter()) {
            *dv *= relu_grad(*a);
        }
        let (dh1, g_enc2) = self.enc2.backward(&pass.h1, &da2);
        let mut da1 = dh1;
        for (dv, a) in da1.iter_mut().zip(pass.a1.iter()) {
            *dv *= relu_grad(*a);
        }
        let (_, g_enc1) = self.enc1.backward(&pass.x, &da1);

        TokenizerGrads {
            enc1: g_enc1,
            enc2: g_enc2,
            enc3: g_enc3,
            codebook: d_codebook,
            dec1: g_dec1,
            dec2: g_dec2,
            dec3: g_dec3,
        }
    }

    pub fn zeros_like_grads(&self) -> TokenizerGrads {
        TokenizerGrads {
            enc1: self.enc1.zeros_like_grads(),
            enc2: self.enc2.zeros_like_grads(),
            enc3: self.enc3.zeros_like_grads(),
            codebook: Array2::zeros(self.codebook.dim()),
            dec1: self.dec1.zeros_like_grads(),
            dec2: self.dec2.zeros_like_grads(),
            dec3: self.dec3.zeros_like_grads(),
        }
    }
}

pub fn argmax_tokens(logits: &LogitsGrid) -> TokenGrid {
    let (rows, cols, _) = logits.dim();
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (w, &v) in logits.slice(ndarray::s![i, j, ..]).iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = w;
            }
        }
        best as u32
    })
}

pub struct TokTrainPass {
    x: Array3<f64>,
    a1: Array3<f64>,
    h1: Array3<f64>,
    a2: Array3<f64>,
    h2: Array3<f64>,
    pub z_e: Array3<f64>,
    pub tokens: TokenGrid,
    z_q: Array3<f64>,
    a4: Array3<f64>,
    u4: Array3<f64>,
    a5: Array3<f64>,
    u5: Array3<f64>,
    pub out: Array3<f64>,
    pub recon: f64,
    pub codebook_loss: f64,
    pub commit_loss: f64,
}

impl TokTrainPass {
    pub fn total_loss(&self, beta: f64) -> f64 {
        self.recon + self.codebook_loss + beta * self.commit_loss
    }
}

#[derive(Debug, Clone)]
pub struct TokenizerGrads {
    pub enc1: ConvGrads,
    pub enc2: ConvGrads,
    pub enc3: ConvGrads,
    pub codebook: Array2<f64>,
    pub dec1: ConvGrads,
    pub dec2: ConvGrads,
    pub dec3: ConvGrads,
}

impl TokenizerGrads {
    pub fn accumulate(&mut self, other: &TokenizerGrads) {
        self.enc1.accumulate(&other.enc1);
        self.enc2.accumulate(&other.enc2);
        self.enc3.accumulate(&other.enc3);
        self.codebook += &other.codebook;
        self.dec1.accumulate(&other.dec1);
        self.dec2.accumulate(&other.dec2);
        self.dec3.accumulate(&other.dec3);
    }

    pub fn scale(&mut self, s: f64) {
        self.enc1.scale(s);
        self.enc2.scale(s);
        self.enc3.scale(s);
        self.codebook *= s;
        self.dec1.scale(s);
        self.dec2.scale(s);
        self.dec3.scale(s);
    }
}

macro_rules! tok_flat_params {
    ($ty:ty) => {
        impl FlatParams for $ty {
            fn param_len(&self) -> usize {
                self.enc1.param_len()
                    + self.enc2.param_len()
                    + self.enc3.param_len()
                    + self.codebook.len()
                    + self.dec1.param_len()
                    + self.dec2.param_len()
                    + self.dec3.param_len()
            }

            fn write_params(&self, out: &mut Vec<f64>) {
                self.enc1.write_params(out);
                self.enc2.write_params(out);
                self.enc3.write_params(out);
                crate::nn::write_array(&self.codebook, out);
                self.dec1.write_params(out);
                self.dec2.write_params(out);
                self.dec3.write_params(out);
            }

            fn read_params(&mut self, data: &mut &[f64]) {
                self.enc1.read_params(data);
                self.enc2.read_params(data);
                self.enc3.read_params(data);
                crate::nn::read_array(&mut self.codebook, data);
                self.dec1.read_params(data);
                self.dec2.read_params(data);
                self.dec3.read_params(data);
            }
        }
    };
}

tok_flat_params!(Tokenizer);
tok_flat_params!(TokenizerGrads);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{params_from_vec, params_to_vec};
    use crate::seed::stream_rng;
    use rand::Rng;

    fn tiny() -> Tokenizer {
        let mut rng = stream_rng(0, "tok/test");
        Tokenizer::new(8, 4, &mut rng)
    }

    fn random_pixels(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = stream_rng(seed, "tok/test/px");
        Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>())
    }

    #[test]
    fn shapes_flow_through() {
        let tok = tiny();
        let x = random_pixels(16, 16, 1);
        let z_e = tok.encode(&x);
        assert_eq!(z_e.dim(), (4, 4, 4));
        let tokens = tok.tokenize_features(&z_e);
        assert_eq!(tokens.dim(), (4, 4));
        assert!(tokens.iter().all(|&t| (t as usize) < tok.vocab()));
        let out = tok.decode_tokens(&tokens).unwrap();
        assert_eq!(out.dim(), (16, 16, 3));
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn tokens_pick_nearest_code() {
        let tok = tiny();
        let x = random_pixels(16, 16, 2);
        let z_e = tok.encode(&x);
        let tokens = tok.tokenize_features(&z_e);
        for i in 0..4 {
            for j in 0..4 {
                let z = z_e.slice(ndarray::s![i, j, ..]);
                // Oracle: brute-force nearest code by squared distance.
                let mut best = (f64::INFINITY, 0usize);
                for (w, code) in tok.codebook.rows().into_iter().enumerate() {
                    let d: f64 = z
                        .iter()
                        .zip(code.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best.0 {
                        best = (d, w);
                    }
                }
                assert_eq!(tokens[[i, j]] as usize, best.1);
            }
        }
    }

    #[test]
    fn decode_rejects_out_of_range_tokens() {
        let tok = tiny();
        let mut tokens = TokenGrid::zeros((4, 4));
        tokens[[2, 2]] = 8;
        assert!(matches!(
            tok.decode_tokens(&tokens),
            Err(Error::TokenOutOfRange { id: 8, vocab: 8 })
        ));
    }

    #[test]
    fn flat_params_roundtrip() {
        let tok = tiny();
        let flat = params_to_vec(&tok);
        let mut rng = stream_rng(1, "tok/test2");
        let mut other = Tokenizer::new(8, 4, &mut rng);
        assert_ne!(params_to_vec(&other), flat);
        params_from_vec(&mut other, &flat).unwrap();
        assert_eq!(other, tok);
    }

    fn component_ranges(tok: &Tokenizer) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
        let enc = tok.enc1.param_len() + tok.enc2.param_len() + tok.enc3.param_len();
        let cb = enc + tok.codebook.len();
        let total = tok.param_len();
        (0..enc, enc..cb, cb..total)
    }

    fn fd_worst<F: FnMut(&[f64]) -> f64>(
        base: &[f64],
        analytic: &[f64],
        range: std::ops::Range<usize>,
        mut loss: F,
    ) -> f64 {
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for k in range.step_by(7) {
            let mut plus = base.to_vec();
            plus[k] += eps;
            let mut minus = base.to_vec();
            minus[k] -= eps;
            let num = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let denom = analytic[k].abs().max(num.abs()).max(1e-7);
            worst = worst.max((analytic[k] - num).abs() / denom);
        }
        worst
    }

    /// The full loss depends on decoder weights only through reconstruction,
    /// so its finite differences must match the analytic decoder gradient.
    #[test]
    fn decoder_gradients_match_total_loss_fd() {
        let mut tok = tiny();
        let x = random_pixels(8, 8, 3);
        let beta = 0.25;
        let pass = tok.forward_train(&x);
        let analytic = params_to_vec(&tok.backward_train(&pass, beta));
        let base = params_to_vec(&tok);
        let (_, _, dec) = component_ranges(&tok);
        let worst = fd_worst(&base, &analytic, dec, |p| {
            params_from_vec(&mut tok, p).unwrap();
            tok.forward_train(&x).total_loss(beta)
        });
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    /// The encoder follows a surrogate: the decoder gradient is copied
    /// straight through quantization (decoder input treated as z_e plus a
    /// frozen offset), plus the commitment pull toward the frozen codes.
    #[test]
    fn encoder_gradients_match_straight_through_surrogate_fd() {
        let mut tok = tiny();
        let x = random_pixels(8, 8, 3);
        let beta = 0.25;
        let pass = tok.forward_train(&x);
        let analytic = params_to_vec(&tok.backward_train(&pass, beta));
        let offset = &pass.z_q - &pass.z_e;
        let z_q0 = pass.z_q.clone();
        let base = params_to_vec(&tok);
        let (enc, _, _) = component_ranges(&tok);
        let n_z = z_q0.len() as f64;
        let worst = fd_worst(&base, &analytic, enc, |p| {
            params_from_vec(&mut tok, p).unwrap();
            let z_e = tok.encode(&x);
            let out = tok.decode_features(&(&z_e + &offset));
            let n_px = out.len() as f64;
            let recon = out
                .iter()
                .zip(x.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n_px;
            let commit = z_e
                .iter()
                .zip(z_q0.iter())
                .map(|(e, q)| (e - q) * (e - q))
                .sum::<f64>()
                / n_z;
            recon + beta * commit
        });
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    /// The codebook follows only its own loss with the assignment frozen:
    /// rows move toward the features they were chosen for.
    #[test]
    fn codebook_gradients_match_frozen_assignment_fd() {
        let mut tok = tiny();
        let x = random_pixels(8, 8, 3);
        let beta = 0.25;
        let pass = tok.forward_train(&x);
        let analytic = params_to_vec(&tok.backward_train(&pass, beta));
        let tokens = pass.tokens.clone();
        let z_e0 = pass.z_e.clone();
        let base = params_to_vec(&tok);
        let (_, cb, _) = component_ranges(&tok);
        let n_z = z_e0.len() as f64;
        let worst = fd_worst(&base, &analytic, cb, |p| {
            params_from_vec(&mut tok, p).unwrap();
            let z_q = tok.embed_tokens(&tokens).unwrap();
            z_q.iter()
                .zip(z_e0.iter())
                .map(|(q, e)| (q - e) * (q - e))
                .sum::<f64>()
                / n_z
        });
        assert!(worst < 1e-4, "worst rel err {worst}");
    }
}
