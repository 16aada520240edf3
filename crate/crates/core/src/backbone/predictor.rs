//! Masked-token predictor: patchifies a canvas, replaces masked-position
//! patch embeddings with a learned mask embedding, runs pre-norm
//! transformer blocks, and emits vocabulary logits per token position.
//! Replacing (not adding to) masked embeddings makes the output exactly
//! independent of the hidden quadrant's pixels.

use crate::canvas::QuadrantMaskSpec;
use crate::error::{Error, Result};
use crate::nn::ops::{gelu, gelu_grad};
use crate::nn::{
    AttnCache, AttnGrads, FlatParams, LayerNorm, Linear, LinearGrads, LnCache, LnGrads,
    MultiHeadAttention,
};
use ndarray::{Array1, Array2, Array3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub struct BlockCache {
    ln1: LnCache,
    t1: Array2<f64>,
    attn: AttnCache,
    ln2: LnCache,
    t2: Array2<f64>,
    m1: Array2<f64>,
    g: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub ln1: LnGrads,
    pub attn: AttnGrads,
    pub ln2: LnGrads,
    pub fc1: LinearGrads,
    pub fc2: LinearGrads,
}

impl Block {
    fn new(d_model: usize, heads: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(d_model),
            attn: MultiHeadAttention::new(d_model, heads, std, rng),
            ln2: LayerNorm::new(d_model),
            fc1: Linear::new(d_model, 4 * d_model, std, rng),
            fc2: Linear::new(4 * d_model, d_model, std, rng),
        }
    }

    fn forward(&self, x: Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (t1, ln1_cache) = self.ln1.forward(&x);
        let (a, attn_cache) = self.attn.forward(&t1);
        let x_mid = &x + &a;
        let (t2, ln2_cache) = self.ln2.forward(&x_mid);
        let m1 = self.fc1.forward(&t2);
        let g = m1.mapv(gelu);
        let m2 = self.fc2.forward(&g);
        let x_out = &x_mid + &m2;
        (
            x_out,
            BlockCache {
                ln1: ln1_cache,
                t1,
                attn: attn_cache,
                ln2: ln2_cache,
                t2,
                m1,
                g,
            },
        )
    }

    fn backward(&self, cache: &BlockCache, dy: &Array2<f64>) -> (Array2<f64>, BlockGrads) {
        // Residual: dy reaches both the MLP branch and x_mid directly.
        let (dg, fc2_grads) = self.fc2.backward(&cache.g, dy);
        let mut dm1 = dg;
        for (d, a) in dm1.iter_mut().zip(cache.m1.iter()) {
            *d *= gelu_grad(*a);
        }
        let (dt2, fc1_grads) = self.fc1.backward(&cache.t2, &dm1);
        let (dx_mid_branch, ln2_grads) = self.ln2.backward(&cache.ln2, &dt2);
        let dx_mid = dy + &dx_mid_branch;
        let (dt1, attn_grads) = self.attn.backward(&cache.t1, &cache.attn, &dx_mid);
        let (dx_branch, ln1_grads) = self.ln1.backward(&cache.ln1, &dt1);
        let dx = &dx_mid + &dx_branch;
        (
            dx,
            BlockGrads {
                ln1: ln1_grads,
                attn: attn_grads,
                ln2: ln2_grads,
                fc1: fc1_grads,
                fc2: fc2_grads,
            },
        )
    }

    fn zeros_like_grads(&self) -> BlockGrads {
        BlockGrads {
            ln1: self.ln1.zeros_like_grads(),
            attn: self.attn.zeros_like_grads(),
            ln2: self.ln2.zeros_like_grads(),
            fc1: self.fc1.zeros_like_grads(),
            fc2: self.fc2.zeros_like_grads(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    grid: usize,
    patch: usize,
    d_model: usize,
    vocab: usize,
    patch_embed: Linear,
    /// Learned position embedding, `(grid^2, d_model)`.
    pos_embed: Array2<f64>,
    /// Learned stand-in for hidden patches.
    mask_embed: Array1<f64>,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: Linear,
}

pub struct PredictorTrace {
    patches: Array2<f64>,
    masked_rows: Vec<bool>,
    block_caches: Vec<BlockCache>,
    final_ln: LnCache,
    final_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct PredictorGrads {
    pub patch_embed: LinearGrads,
    pub pos_embed: Array2<f64>,
    pub mask_embed: Array1<f64>,
    pub blocks: Vec<BlockGrads>,
    pub final_ln: LnGrads,
    pub head: LinearGrads,
}

impl Predictor {
    pub fn new(
        grid: usize,
        patch: usize,
        d_model: usize,
        heads: usize,
        depth: usize,
        vocab: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = 0.02;
        let normal = Normal::new(0.0, std).expect("literal std");
        let patch_dim = patch * patch * 3;
        let patch_embed = Linear::new(patch_dim, d_model, std, rng);
        let pos_embed = Array2::from_shape_fn((grid * grid, d_model), |_| normal.sample(rng));
        let mask_embed = Array1::from_shape_fn(d_model, |_| normal.sample(rng));
        let blocks = (0..depth)
            .map(|_| Block::new(d_model, heads, std, rng))
            .collect();
        Self {
            grid,
            patch,
            d_model,
            vocab,
            patch_embed,
            pos_embed,
            mask_embed,
            blocks,
            final_ln: LayerNorm::new(d_model),
            head: Linear::new(d_model, vocab, std, rng),
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn check_inputs(&self, pixels: &Array3<f64>, mask: &QuadrantMaskSpec) -> Result<()> {
        let (h, w, c) = pixels.dim();
        let side = self.grid * self.patch;
        if (h, w, c) != (side, side, 3) {
            return Err(Error::ShapeMismatch(format!(
                "predictor expects ({side}, {side}, 3) pixels, got ({h}, {w}, {c})"
            )));
        }
        if mask.rows() != self.grid || mask.cols() != self.grid {
            return Err(Error::ShapeMismatch(format!(
                "mask grid {}x{} vs predictor grid {}",
                mask.rows(),
                mask.cols(),
                self.grid
            )));
        }
        Ok(())
    }

    /// Logits over the vocabulary at every grid position, with masked
    /// positions' content replaced by the mask embedding. Returns the
    /// trace needed for [`Predictor::backward`].
    pub fn forward(
        &self,
        pixels: &Array3<f64>,
        mask: &QuadrantMaskSpec,
    ) -> Result<(Array3<f64>, PredictorTrace)> {
        self.check_inputs(pixels, mask)?;
        let n = self.grid * self.grid;
        let patches = patchify(pixels, self.patch);
        let mut x = self.patch_embed.forward(&patches);
        let mut masked_rows = vec![false; n];
        for &(r, c) in mask.positions() {
            let k = r * self.grid + c;
            masked_rows[k] = true;
            x.row_mut(k).assign(&self.mask_embed);
        }
        x += &self.pos_embed;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(x);
            block_caches.push(cache);
            x = next;
        }
        let (final_out, final_ln_cache) = self.final_ln.forward(&x);
        let logits_flat = self.head.forward(&final_out);
        let logits = logits_flat
            .into_shape_with_order((self.grid, self.grid, self.vocab))
            .expect("contiguous logits");
        Ok((
            logits,
            PredictorTrace {
                patches,
                masked_rows,
                block_caches,
                final_ln: final_ln_cache,
                final_out,
            },
        ))
    }

    /// Backpropagate `dlogits` `(grid, grid, vocab)`. Returns the pixel
    /// gradient (zero over masked patches by construction) and, when
    /// requested, parameter gradients.
    pub fn backward(
        &self,
        trace: &PredictorTrace,
        dlogits: &Array3<f64>,
        want_param_grads: bool,
    ) -> (Array3<f64>, Option<PredictorGrads>) {
        let n = self.grid * self.grid;
        let dlogits_flat = dlogits
            .view()
            .into_shape_with_order((n, self.vocab))
            .expect("contiguous dlogits");
        let (dfinal, head_grads) = self.head.backward(&trace.final_out, &dlogits_flat.to_owned());
        let (mut dx, final_ln_grads) = self.final_ln.backward(&trace.final_ln, &dfinal);
        let mut block_grads: Vec<BlockGrads> = Vec::with_capacity(self.blocks.len());
        for (block, cache) in self.blocks.iter().zip(&trace.block_caches).rev() {
            let (dprev, grads) = block.backward(cache, &dx);
            dx = dprev;
            block_grads.push(grads);
        }
        block_grads.reverse();
        let dpos = dx.clone();
        let mut dmask = Array1::zeros(self.d_model);
        let mut dx_for_patches = dx;
        for (k, &masked) in trace.masked_rows.iter().enumerate() {
            if masked {
                dmask += &dx_for_patches.row(k);
                dx_for_patches.row_mut(k).fill(0.0);
            }
        }
        let (dpatches, patch_embed_grads) =
            self.patch_embed.backward(&trace.patches, &dx_for_patches);
        let dpixels = unpatchify(&dpatches, self.grid, self.patch);
        let grads = want_param_grads.then(|| PredictorGrads {
            patch_embed: patch_embed_grads,
            pos_embed: dpos,
            mask_embed: dmask,
            blocks: block_grads,
            final_ln: final_ln_grads,
            head: head_grads,
        });
        (dpixels, grads)
    }

    pub fn zeros_like_grads(&self) -> PredictorGrads {
        PredictorGrads {
            patch_embed: self.patch_embed.zeros_like_grads(),
            pos_embed: Array2::zeros(self.pos_embed.dim()),
            mask_embed: Array1::zeros(self.d_model),
            blocks: self.blocks.iter().map(|b| b.zeros_like_grads()).collect(),
            final_ln: self.final_ln.zeros_like_grads(),
            head: self.head.zeros_like_grads(),
        }
    }
}

/// Row-major patch rows: token `(r, c)` flattens its `patch x patch x 3`
/// pixel block in `(i, j, ch)` order.
pub fn patchify(pixels: &Array3<f64>, patch: usize) -> Array2<f64> {
    let (h, w, _) = pixels.dim();
    let (rows, cols) = (h / patch, w / patch);
    let mut out = Array2::zeros((rows * cols, patch * patch * 3));
    for r in 0..rows {
        for c in 0..cols {
            let mut col = 0usize;
            for i in 0..patch {
                for j in 0..patch {
                    for ch in 0..3 {
                        out[[r * cols + c, col]] = pixels[[r * patch + i, c * patch + j, ch]];
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`patchify`].
pub fn unpatchify(dpatches: &Array2<f64>, grid: usize, patch: usize) -> Array3<f64> {
    let side = grid * patch;
    let mut out = Array3::zeros((side, side, 3));
    for r in 0..grid {
        for c in 0..grid {
            let mut col = 0usize;
            for i in 0..patch {
                for j in 0..patch {
                    for ch in 0..3 {
                        out[[r * patch + i, c * patch + j, ch]] =
                            dpatches[[r * grid + c, col]];
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

impl PredictorGrads {
    pub fn accumulate(&mut self, other: &PredictorGrads) {
        self.patch_embed.accumulate(&other.patch_embed);
        self.pos_embed += &other.pos_embed;
        self.mask_embed += &other.mask_embed;
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.ln1.accumulate(&b.ln1);
            a.attn.accumulate(&b.attn);
            a.ln2.accumulate(&b.ln2);
            a.fc1.accumulate(&b.fc1);
            a.fc2.accumulate(&b.fc2);
        }
        self.final_ln.accumulate(&other.final_ln);
        self.head.accumulate(&other.head);
    }

    pub fn scale(&mut self, s: f64) {
        self.patch_embed.scale(s);
        self.pos_embed *= s;
        self.mask_embed *= s;
        for b in &mut self.blocks {
            b.ln1.scale(s);
            b.attn.scale(s);
            b.ln2.scale(s);
            b.fc1.scale(s);
            b.fc2.scale(s);
        }
        self.final_ln.scale(s);
        self.head.scale(s);
    }
}

macro_rules! block_fields {
    ($self:ident, $macro_op:ident, $($arg:tt)*) => {{
        $macro_op!($self.ln1, $($arg)*);
        $macro_op!($self.attn, $($arg)*);
        $macro_op!($self.ln2, $($arg)*);
        $macro_op!($self.fc1, $($arg)*);
        $macro_op!($self.fc2, $($arg)*);
    }};
}

impl FlatParams for Block {
    fn param_len(&self) -> usize {
        self.ln1.param_len()
            + self.attn.param_len()
            + self.ln2.param_len()
            + self.fc1.param_len()
            + self.fc2.param_len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        macro_rules! w {
            ($f:expr, $out:expr) => {
                $f.write_params($out)
            };
        }
        block_fields!(self, w, out);
    }

    fn read_params(&mut self, data: &mut &[f64]) {
        macro_rules! r {
            ($f:expr, $data:expr) => {
                $f.read_params($data)
            };
        }
        block_fields!(self, r, data);
    }
}

impl FlatParams for BlockGrads {
    fn param_len(&self) -> usize {
        self.ln1.param_len()
            + self.attn.param_len()
            + self.ln2.param_len()
            + self.fc1.param_len()
            + self.fc2.param_len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        macro_rules! w {
            ($f:expr, $out:expr) => {
                $f.write_params($out)
            };
        }
        block_fields!(self, w, out);
    }

    fn read_params(&mut self, data: &mut &[f64]) {
        macro_rules! r {
            ($f:expr, $data:expr) => {
                $f.read_params($data)
            };
        }
        block_fields!(self, r, data);
    }
}

impl FlatParams for Predictor {
    fn param_len(&self) -> usize {
        self.patch_embed.param_len()
            + self.pos_embed.len()
            + self.mask_embed.len()
            + self.blocks.iter().map(|b| b.param_len()).sum::<usize>()
            + self.final_ln.param_len()
            + self.head.param_len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        self.patch_embed.write_params(out);
        crate::nn::write_array(&self.pos_embed, out);
        crate::nn::write_array(&self.mask_embed, out);
        for b in &self.blocks {
            b.write_params(out);
        }
        self.final_ln.write_params(out);
        self.head.write_params(out);
    }

    fn read_params(&mut self, data: &mut &[f64]) {
        self.patch_embed.read_params(data);
        crate::nn::read_array(&mut self.pos_embed, data);
        crate::nn::read_array(&mut self.mask_embed, data);
        for b in &mut self.blocks {
            b.read_params(data);
        }
        self.final_ln.read_params(data);
        self.head.read_params(data);
    }
}

impl FlatParams for PredictorGrads {
    fn param_len(&self) -> usize {
        self.patch_embed.param_len()
            + self.pos_embed.len()
            + self.mask_embed.len()
            + self.blocks.iter().map(|b| b.param_len()).sum::<usize>()
            + self.final_ln.param_len()
            + self.head.param_len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        self.patch_embed.write_params(out);
        crate::nn::write_array(&self.pos_embed, out);
        crate::nn::write_array(&self.mask_embed, out);
        for b in &self.blocks {
            b.write_params(out);
        }
        self.final_ln.write_params(out);
        self.head.write_params(out);
    }

    fn read_params(&mut self, data: &mut &[f64]) {
        self.patch_embed.read_params(data);
        crate::nn::read_array(&mut self.pos_embed, data);
        crate::nn::read_array(&mut self.mask_embed, data);
        for b in &mut self.blocks {
            b.read_params(data);
        }
        self.final_ln.read_params(data);
        self.head.read_params(data);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::QuadrantMaskSpec;
    use crate::nn::params_to_vec;
    use crate::seed::stream_rng;
    use rand::Rng;

    fn tiny() -> Predictor {
        let mut rng = stream_rng(0, "pred/test");
        // 4x4 grid of 2px patches over a 8x8 canvas, vocab 6.
        Predictor::new(4, 2, 8, 2, 2, 6, &mut rng)
    }

    fn random_pixels(side: usize, seed: u64) -> Array3<f64> {
        let mut rng = stream_rng(seed, "pred/test/px");
        Array3::from_shape_fn((side, side, 3), |_| rng.random::<f64>())
    }

    #[test]
    fn patchify_unpatchify_are_inverse() {
        let x = random_pixels(8, 1);
        let p = patchify(&x, 2);
        assert_eq!(p.dim(), (16, 12));
        let back = unpatchify(&p, 4, 2);
        assert_eq!(back, x);
    }

    #[test]
    fn masked_pixels_do_not_affect_logits() {
        let pred = tiny();
        let mask = QuadrantMaskSpec::bottom_right(4, 4).unwrap();
        let x = random_pixels(8, 2);
        let (logits_a, _) = pred.forward(&x, &mask).unwrap();
        let mut y = x.clone();
        // Scribble over the bottom-right quadrant's pixels.
        for i in 4..8 {
            for j in 4..8 {
                for ch in 0..3 {
                    y[[i, j, ch]] = 1.0 - y[[i, j, ch]];
                }
            }
        }
        let (logits_b, _) = pred.forward(&y, &mask).unwrap();
        assert_eq!(logits_a, logits_b);
    }

    #[test]
    fn unmasked_pixels_do_affect_logits() {
        let pred = tiny();
        let mask = QuadrantMaskSpec::bottom_right(4, 4).unwrap();
        let x = random_pixels(8, 3);
        let (logits_a, _) = pred.forward(&x, &mask).unwrap();
        let mut y = x.clone();
        y[[0, 0, 0]] += 0.25;
        let (logits_b, _) = pred.forward(&y, &mask).unwrap();
        assert_ne!(logits_a, logits_b);
    }

    #[test]
    fn input_gradient_matches_finite_differences_and_masks_out() {
        let pred = tiny();
        let mask = QuadrantMaskSpec::bottom_right(4, 4).unwrap();
        let x = random_pixels(8, 4);
        let mut rng = stream_rng(5, "pred/test/dl");
        let dl = Array3::from_shape_fn((4, 4, 6), |_| rng.random::<f64>() - 0.5);
        let loss_of = |px: &Array3<f64>| -> f64 {
            let (logits, _) = pred.forward(px, &mask).unwrap();
            logits.iter().zip(dl.iter()).map(|(a, b)| a * b).sum()
        };
        let (logits, trace) = pred.forward(&x, &mask).unwrap();
        let _ = logits;
        let (dpx, _) = pred.backward(&trace, &dl, false);
        // Masked quadrant gradient is exactly zero.
        for i in 4..8 {
            for j in 4..8 {
                for ch in 0..3 {
                    assert_eq!(dpx[[i, j, ch]], 0.0);
                }
            }
        }
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for (i, j, ch) in [(0, 0, 0), (1, 5, 2), (3, 3, 1), (5, 2, 0), (7, 0, 2)] {
            let mut p = x.clone();
            p[[i, j, ch]] += eps;
            let mut m = x.clone();
            m[[i, j, ch]] -= eps;
            let num = (loss_of(&p) - loss_of(&m)) / (2.0 * eps);
            let a = dpx[[i, j, ch]];
            let denom = a.abs().max(num.abs()).max(1e-8);
            worst = worst.max((a - num).abs() / denom);
        }
        assert!(worst < 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let mut pred = tiny();
        let mask = QuadrantMaskSpec::bottom_right(4, 4).unwrap();
        let x = random_pixels(8, 6);
        let mut rng = stream_rng(7, "pred/test/dl2");
        let dl = Array3::from_shape_fn((4, 4, 6), |_| rng.random::<f64>() - 0.5);
        let (_, trace) = pred.forward(&x, &mask).unwrap();
        let (_, grads) = pred.backward(&trace, &dl, true);
        let analytic = params_to_vec(&grads.unwrap());
        let base = params_to_vec(&pred);
        assert_eq!(analytic.len(), base.len());
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for k in (0..base.len()).step_by(13) {
            let mut plus = base.clone();
            plus[k] += eps;
            crate::nn::params_from_vec(&mut pred, &plus).unwrap();
            let (lp, _) = pred.forward(&x, &mask).unwrap();
            let up: f64 = lp.iter().zip(dl.iter()).map(|(a, b)| a * b).sum();
            let mut minus = base.clone();
            minus[k] -= eps;
            crate::nn::params_from_vec(&mut pred, &minus).unwrap();
            let (lm, _) = pred.forward(&x, &mask).unwrap();
            let um: f64 = lm.iter().zip(dl.iter()).map(|(a, b)| a * b).sum();
            let num = (up - um) / (2.0 * eps);
            let denom = analytic[k].abs().max(num.abs()).max(1e-7);
            worst = worst.max((analytic[k] - num).abs() / denom);
        }
        crate::nn::params_from_vec(&mut pred, &base).unwrap();
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn rejects_wrong_sizes() {
        let pred = tiny();
        let mask = QuadrantMaskSpec::bottom_right(4, 4).unwrap();
        assert!(pred.forward(&random_pixels(10, 8), &mask).is_err());
        let bad_mask = QuadrantMaskSpec::bottom_right(6, 6).unwrap();
        assert!(pred.forward(&random_pixels(8, 9), &bad_mask).is_err());
    }
}
