//! Frozen inpainting backbone: a vector-quantizing autoencoder paired with
//! a masked-token predictor. Once trained it is held fixed; downstream
//! prompt training only reads gradients through it.

pub mod ckpt;
pub mod predictor;
pub mod pretrain;
pub mod tokenizer;

pub use ckpt::{load_backbone, save_backbone};
pub use predictor::{Predictor, PredictorGrads, PredictorTrace};
pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainStats};
pub use tokenizer::{LogitsGrid, TokenGrid, Tokenizer, TokenizerGrads};

use crate::canvas::QuadrantMaskSpec;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::params_to_vec;
use crate::retriever::{FeatureExtractor, FeatureVector};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Architecture hyperparameters; immutable once a backbone is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Side of the square four-cell canvas the predictor consumes.
    pub canvas_size: usize,
    pub vocab: usize,
    pub d_code: usize,
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            canvas_size: 64,
            vocab: 128,
            d_code: 32,
            d_model: 64,
            heads: 4,
            depth: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas_size == 0 || self.canvas_size % (2 * tokenizer::DOWNSAMPLE) != 0 {
            return Err(Error::invalid(format!(
                "canvas_size {} must be a positive multiple of {}",
                self.canvas_size,
                2 * tokenizer::DOWNSAMPLE
            )));
        }
        let grid = self.token_grid();
        if grid % 2 != 0 {
            return Err(Error::invalid(format!("token grid {grid} must be even")));
        }
        if self.vocab < 2 {
            return Err(Error::invalid("vocab must be at least 2"));
        }
        if self.d_code == 0 || self.d_model == 0 || self.depth == 0 {
            return Err(Error::invalid("zero-sized model dimension"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "heads {} must divide d_model {}",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }

    /// Tokens per canvas side.
    pub fn token_grid(&self) -> usize {
        self.canvas_size / tokenizer::DOWNSAMPLE
    }

    /// Canvas cell side (each canvas is a 2x2 grid of cells).
    pub fn cell(&self) -> usize {
        self.canvas_size / 2
    }

    /// Predictor patch side; locked to the tokenizer's reduction so both
    /// operate on the same token grid.
    pub fn patch(&self) -> usize {
        tokenizer::DOWNSAMPLE
    }

    fn digest_fields(&self, hasher: &mut Sha256) {
        for v in [
            self.canvas_size,
            self.vocab,
            self.d_code,
            self.d_model,
            self.heads,
            self.depth,
        ] {
            hasher.update((v as u32).to_le_bytes());
        }
    }
}

/// A trained tokenizer + predictor pair, frozen. The fingerprint commits
/// to both the architecture and every weight, and rides along in reports
/// and checkpoints so results can be traced to the exact backbone.
pub struct BackboneBundle {
    config: BackboneConfig,
    tokenizer: Tokenizer,
    predictor: Predictor,
    mask: QuadrantMaskSpec,
    fingerprint: String,
}

impl BackboneBundle {
    pub fn from_parts(
        config: BackboneConfig,
        tokenizer: Tokenizer,
        predictor: Predictor,
    ) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab() != config.vocab || tokenizer.d_code() != config.d_code {
            return Err(Error::invalid(format!(
                "tokenizer ({}, {}) does not match config ({}, {})",
                tokenizer.vocab(),
                tokenizer.d_code(),
                config.vocab,
                config.d_code
            )));
        }
        if predictor.grid() != config.token_grid()
            || predictor.patch() != config.patch()
            || predictor.vocab() != config.vocab
        {
            return Err(Error::invalid("predictor does not match config"));
        }
        let mask = QuadrantMaskSpec::bottom_right(config.token_grid(), config.token_grid())?;
        let fingerprint = fingerprint_of(&config, &tokenizer, &predictor);
        Ok(Self {
            config,
            tokenizer,
            predictor,
            mask,
            fingerprint,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    /// Bottom-right-quadrant mask matching this backbone's token grid.
    pub fn mask(&self) -> &QuadrantMaskSpec {
        &self.mask
    }

    /// Hex digest over architecture and all weights, computed once at
    /// construction.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Re-hash the weights as they are now. Equal to [`fingerprint`]
    /// unless something mutated the backbone behind its back.
    pub fn recompute_fingerprint(&self) -> String {
        fingerprint_of(&self.config, &self.tokenizer, &self.predictor)
    }

    fn check_canvas(&self, pixels: &Array3<f64>) -> Result<()> {
        let s = self.config.canvas_size;
        if pixels.dim() != (s, s, 3) {
            return Err(Error::ShapeMismatch(format!(
                "expected ({s}, {s}, 3) canvas, got {:?}",
                pixels.dim()
            )));
        }
        Ok(())
    }

    /// Ground-truth token grid for a fully visible canvas.
    pub fn tokenize(&self, pixels: &Array3<f64>) -> Result<TokenGrid> {
        self.check_canvas(pixels)?;
        Ok(self.tokenizer.tokenize_pixels(pixels))
    }

    /// Predictor logits with the bottom-right quadrant hidden.
    pub fn predict_logits(&self, pixels: &Array3<f64>) -> Result<LogitsGrid> {
        Ok(self.predict_traced(pixels)?.0)
    }

    /// Same as [`Self::predict_logits`] but keeps the trace so the caller
    /// can pull gradients back to canvas pixels.
    pub fn predict_traced(&self, pixels: &Array3<f64>) -> Result<(LogitsGrid, PredictorTrace)> {
        self.check_canvas(pixels)?;
        self.predictor.forward(pixels, &self.mask)
    }

    /// Gradient of a scalar with respect to canvas pixels, given its
    /// gradient with respect to the logits. Zero over the hidden quadrant.
    pub fn canvas_grad(&self, trace: &PredictorTrace, dlogits: &Array3<f64>) -> Array3<f64> {
        self.predictor.backward(trace, dlogits, false).0
    }

    /// Most likely token at every grid position.
    pub fn predict_tokens(&self, pixels: &Array3<f64>) -> Result<TokenGrid> {
        Ok(tokenizer::argmax_tokens(&self.predict_logits(pixels)?))
    }

    /// Decode a token grid to canvas pixels.
    pub fn decode(&self, tokens: &TokenGrid) -> Result<Array3<f64>> {
        let g = self.config.token_grid();
        if tokens.dim() != (g, g) {
            return Err(Error::ShapeMismatch(format!(
                "expected {g}x{g} tokens, got {:?}",
                tokens.dim()
            )));
        }
        self.tokenizer.decode_tokens(tokens)
    }
}

fn fingerprint_of(config: &BackboneConfig, tok: &Tokenizer, pred: &Predictor) -> String {
    let mut hasher = Sha256::new();
    config.digest_fields(&mut hasher);
    for v in params_to_vec(tok) {
        hasher.update(v.to_le_bytes());
    }
    for v in params_to_vec(pred) {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Retrieval features from the frozen tokenizer encoder: resize to the
/// cell size the backbone sees, encode, average-pool the feature map to
/// `pool x pool`, flatten. The tag carries the backbone fingerprint so
/// indexes built against a different backbone are rejected.
pub struct TokenizerFeatureExtractor {
    tokenizer: Tokenizer,
    cell: usize,
    pool: usize,
    tag: String,
}

impl TokenizerFeatureExtractor {
    pub fn new(bundle: &BackboneBundle) -> Self {
        Self::with_pool(bundle, 4)
    }

    pub fn with_pool(bundle: &BackboneBundle, pool: usize) -> Self {
        let cell = bundle.config().cell();
        let grid = cell / tokenizer::DOWNSAMPLE;
        let pool = pool.clamp(1, grid);
        Self {
            tokenizer: bundle.tokenizer().clone(),
            cell,
            pool,
            tag: format!("vqenc{}p{}-{}", cell, pool, &bundle.fingerprint()[..16]),
        }
    }
}

impl FeatureExtractor for TokenizerFeatureExtractor {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn dim(&self) -> usize {
        self.pool * self.pool * self.tokenizer.d_code()
    }

    fn extract(&self, img: &Image) -> FeatureVector {
        let resized = img
            .resize_bilinear(self.cell, self.cell)
            .expect("positive target size");
        let z = self.tokenizer.encode(resized.data());
        let (gh, gw, d) = z.dim();
        let mut values = vec![0.0f64; self.dim()];
        let mut counts = vec![0usize; self.pool * self.pool];
        for i in 0..gh {
            for j in 0..gw {
                let pi = (i * self.pool / gh).min(self.pool - 1);
                let pj = (j * self.pool / gw).min(self.pool - 1);
                counts[pi * self.pool + pj] += 1;
                for c in 0..d {
                    values[(pi * self.pool + pj) * d + c] += z[[i, j, c]];
                }
            }
        }
        for (cell_idx, &n) in counts.iter().enumerate() {
            if n > 0 {
                for c in 0..d {
                    values[cell_idx * d + c] /= n as f64;
                }
            }
        }
        FeatureVector::from_raw(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;
    use rand::Rng;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            canvas_size: 16,
            vocab: 8,
            d_code: 4,
            d_model: 8,
            heads: 2,
            depth: 1,
        }
    }

    fn small_bundle(seed: u64) -> BackboneBundle {
        let config = small_config();
        let mut rng = stream_rng(seed, "backbone/test");
        let tok = Tokenizer::new(config.vocab, config.d_code, &mut rng);
        let pred = Predictor::new(
            config.token_grid(),
            config.patch(),
            config.d_model,
            config.heads,
            config.depth,
            config.vocab,
            &mut rng,
        );
        BackboneBundle::from_parts(config, tok, pred).unwrap()
    }

    fn random_canvas(size: usize, seed: u64) -> Array3<f64> {
        let mut rng = stream_rng(seed, "backbone/test/c");
        Array3::from_shape_fn((size, size, 3), |_| rng.random::<f64>())
    }

    #[test]
    fn default_config_is_valid() {
        BackboneConfig::default().validate().unwrap();
        assert_eq!(BackboneConfig::default().token_grid(), 16);
        assert_eq!(BackboneConfig::default().cell(), 32);
    }

    #[test]
    fn config_rejects_bad_geometry() {
        let mut c = small_config();
        c.canvas_size = 20;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.vocab = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn bundle_checks_component_agreement() {
        let config = small_config();
        let mut rng = stream_rng(0, "backbone/test/mismatch");
        let tok = Tokenizer::new(16, config.d_code, &mut rng);
        let pred = Predictor::new(
            config.token_grid(),
            config.patch(),
            config.d_model,
            config.heads,
            config.depth,
            config.vocab,
            &mut rng,
        );
        assert!(BackboneBundle::from_parts(config, tok, pred).is_err());
    }

    #[test]
    fn fingerprint_tracks_weights_and_config() {
        let a = small_bundle(0);
        let b = small_bundle(0);
        let c = small_bundle(1);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn predict_paths_agree_and_decode_roundtrips_shape() {
        let bundle = small_bundle(2);
        let x = random_canvas(16, 3);
        let logits = bundle.predict_logits(&x).unwrap();
        assert_eq!(logits.dim(), (4, 4, 8));
        let tokens = bundle.predict_tokens(&x).unwrap();
        assert_eq!(tokens, tokenizer::argmax_tokens(&logits));
        let decoded = bundle.decode(&tokens).unwrap();
        assert_eq!(decoded.dim(), (16, 16, 3));
        assert!(bundle.predict_logits(&random_canvas(12, 4)).is_err());
    }

    #[test]
    fn tokenizer_features_have_expected_dim_and_reject_cross_backbone_reuse() {
        let a = small_bundle(5);
        let b = small_bundle(6);
        let fa = TokenizerFeatureExtractor::new(&a);
        let fb = TokenizerFeatureExtractor::new(&b);
        assert_ne!(fa.tag(), fb.tag());
        // cell 8 -> encoder grid 2, pool clamps to 2: 2*2*4 features.
        assert_eq!(fa.dim(), 16);
        let img = Image::new(random_canvas(16, 7)).unwrap();
        let v = fa.extract(&img);
        assert_eq!(v.values().len(), 16);
    }
}
