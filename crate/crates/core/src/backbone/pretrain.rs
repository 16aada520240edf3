//! Two-stage backbone pretraining on fully visible canvases: first the
//! tokenizer learns to compress and reconstruct them, then the predictor
//! learns to infer the hidden quadrant's tokens from the other three.
//! Both stages are plain Adam loops over a fixed canvas pool.

use super::{BackboneBundle, BackboneConfig, Predictor, Tokenizer};
use crate::canvas::compose_gt_canvas;
use crate::data::{Dataset, TaskPair};
use crate::image::Image;
use crate::error::{Error, Result};
use crate::nn::{params_from_vec, params_to_vec, Adam, FlatParams};
use crate::seed::stream_rng;
use crate::trainer::{compute_loss, loss_with_grad};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub seed: u64,
    /// Training canvases sampled from the dataset.
    pub canvases: usize,
    /// Extra canvases held out for the quality metrics.
    pub holdout: usize,
    /// Fraction of canvases whose context and query are the same pair,
    /// anchoring the copy solution the predictor can build on.
    pub identity_fraction: f64,
    /// Fraction of canvases demonstrating the copy task (right column
    /// repeats the left) instead of a labeling task.
    pub copy_fraction: f64,
    /// Fraction of labeling canvases whose hidden-cell target is rolled
    /// by half a cell width while the context row stays plain. Visible
    /// content then underdetermines the output convention, so the
    /// predictor must hedge unless the ring cue decides.
    pub shift_fraction: f64,
    /// Fraction of plain labeling canvases whose context-row cells carry
    /// a bright border ring. The ring is the one cheap cue for the plain
    /// variant, which gives border pixels a learned influence on the
    /// predictor.
    pub frame_fraction: f64,
    pub tok_epochs: usize,
    pub pred_epochs: usize,
    pub batch: usize,
    pub tok_lr: f64,
    pub pred_lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            canvases: 160,
            holdout: 12,
            identity_fraction: 0.5,
            copy_fraction: 0.0,
            shift_fraction: 0.4,
            frame_fraction: 0.5,
            tok_epochs: 30,
            pred_epochs: 30,
            batch: 8,
            tok_lr: 2e-3,
            pred_lr: 1e-3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvases == 0 || self.batch == 0 {
            return Err(Error::invalid("canvases and batch must be positive"));
        }
        for (name, v) in [
            ("identity_fraction", self.identity_fraction),
            ("copy_fraction", self.copy_fraction),
            ("shift_fraction", self.shift_fraction),
            ("frame_fraction", self.frame_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1]")));
            }
        }
        if !(self.tok_lr.is_finite() && self.pred_lr.is_finite())
            || self.tok_lr <= 0.0
            || self.pred_lr <= 0.0
        {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }
}

/// Quality measures of a finished pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainStats {
    pub tok_loss_history: Vec<f64>,
    pub pred_loss_history: Vec<f64>,
    /// Mean absolute error of tokenize-decode roundtrips on held-out
    /// canvases, in [0, 1] pixel units.
    pub recon_mae_holdout: f64,
    /// Fraction of held-out tokens stable under decode-then-retokenize.
    pub token_roundtrip_acc: f64,
    /// Predictor argmax agreement with tokenizer targets on the hidden
    /// quadrant of held-out canvases.
    pub val_token_acc: f64,
}

/// What a single pretraining canvas demonstrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CanvasKind {
    /// Right column repeats the left.
    Copy,
    /// Right column holds labels. A shifted canvas rolls only the
    /// hidden-cell target half a cell, leaving the context row plain; a
    /// plain canvas may carry the bright context-row ring.
    Label { shifted: bool, framed: bool },
}

/// Roll columns by half the image width, wrapping.
fn roll_half(img: &Image) -> Result<Image> {
    let (h, w) = (img.h(), img.w());
    let k = w / 2;
    let src = img.data();
    let mut out = Array3::zeros(src.raw_dim());
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                out[[i, (j + k) % w, ch]] = src[[i, j, ch]];
            }
        }
    }
    Image::new(out)
}

/// Overwrite a `width`-wide border ring of both top-row cells.
fn paint_context_rings(canvas: &mut Array3<f64>, cell: usize, width: usize, value: f64) {
    for col in [0, cell] {
        for i in 0..cell {
            for j in 0..cell {
                if i < width || i >= cell - width || j < width || j >= cell - width {
                    for ch in 0..3 {
                        canvas[[i, col + j, ch]] = value;
                    }
                }
            }
        }
    }
}

/// Compose one pretraining canvas of the given kind at cell size `cell`.
pub fn sample_canvas(
    ctx: &TaskPair,
    qry: &TaskPair,
    kind: CanvasKind,
    cell: usize,
) -> Result<Array3<f64>> {
    match kind {
        CanvasKind::Copy => {
            let canvas = compose_gt_canvas(&ctx.input, &ctx.input, &qry.input, &qry.input, cell)?;
            Ok(canvas.data().clone())
        }
        CanvasKind::Label { shifted, framed } => {
            let ql = if shifted {
                roll_half(&qry.label)?
            } else {
                qry.label.clone()
            };
            let canvas = compose_gt_canvas(&ctx.input, &ctx.label, &qry.input, &ql, cell)?;
            let mut data = canvas.data().clone();
            if framed {
                paint_context_rings(&mut data, cell, (cell / 8).max(1), 1.0);
            }
            Ok(data)
        }
    }
}

/// Sample full canvases: context pair on top, query pair below, all four
/// cells visible. Context and query share a class; coins decide pair
/// identity, the demonstrated task, and the context-row ring.
pub fn build_canvas_pool(
    dataset: &Dataset,
    cfg: &PretrainConfig,
    n: usize,
    cell: usize,
) -> Result<Vec<Array3<f64>>> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let by_class = dataset.by_class();
    let classes: Vec<u32> = by_class.keys().copied().collect();
    let mut rng = stream_rng(cfg.seed, "pretrain/pool");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let class = classes[rng.random_range(0..classes.len())];
        let members = &by_class[&class];
        let qi = rng.random_range(0..members.len());
        let ci = if rng.random::<f64>() < cfg.identity_fraction || members.len() == 1 {
            qi
        } else {
            // Distinct context from the same class.
            let mut c = rng.random_range(0..members.len() - 1);
            if c >= qi {
                c += 1;
            }
            c
        };
        let ctx = members[ci];
        let qry = members[qi];
        // Draw every coin so the stream position is outcome-independent.
        let copy = rng.random::<f64>() < cfg.copy_fraction;
        let shifted = rng.random::<f64>() < cfg.shift_fraction;
        let framed = rng.random::<f64>() < cfg.frame_fraction;
        let kind = if copy {
            CanvasKind::Copy
        } else {
            CanvasKind::Label {
                shifted,
                framed: !shifted && framed,
            }
        };
        out.push(sample_canvas(ctx, qry, kind, cell)?);
    }
    Ok(out)
}

fn mean_of(losses: &[f64]) -> f64 {
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Train tokenizer then predictor on canvases built from `dataset`.
pub fn pretrain_backbone(
    arch: &BackboneConfig,
    cfg: &PretrainConfig,
    dataset: &Dataset,
) -> Result<(BackboneBundle, PretrainStats)> {
    arch.validate()?;
    cfg.validate()?;
    let pool = build_canvas_pool(dataset, cfg, cfg.canvases + cfg.holdout, arch.cell())?;
    let (train, holdout) = pool.split_at(cfg.canvases);

    let mut tok = Tokenizer::new(
        arch.vocab,
        arch.d_code,
        &mut stream_rng(cfg.seed, "pretrain/init/tok"),
    );
    let tok_loss_history = train_tokenizer(&mut tok, train, cfg)?;

    let mut pred = Predictor::new(
        arch.token_grid(),
        arch.patch(),
        arch.d_model,
        arch.heads,
        arch.depth,
        arch.vocab,
        &mut stream_rng(cfg.seed, "pretrain/init/pred"),
    );
    let pred_loss_history = train_predictor(&mut pred, &tok, train, arch, cfg)?;

    let bundle = BackboneBundle::from_parts(*arch, tok, pred)?;
    let stats = holdout_stats(&bundle, holdout, tok_loss_history, pred_loss_history)?;
    Ok((bundle, stats))
}

fn train_tokenizer(
    tok: &mut Tokenizer,
    train: &[Array3<f64>],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(tok.param_len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.tok_epochs);
    for epoch in 0..cfg.tok_epochs {
        order.shuffle(&mut stream_rng(cfg.seed, &format!("pretrain/tok/shuffle/{epoch}")));
        let mut losses = Vec::with_capacity(train.len());
        for chunk in order.chunks(cfg.batch) {
            let frozen: &Tokenizer = tok;
            let results: Vec<(f64, super::TokenizerGrads)> = chunk
                .par_iter()
                .map(|&i| {
                    let pass = frozen.forward_train(&train[i]);
                    let loss = pass.total_loss(super::tokenizer::COMMIT_BETA);
                    let grads = frozen.backward_train(&pass, super::tokenizer::COMMIT_BETA);
                    (loss, grads)
                })
                .collect();
            let mut acc = tok.zeros_like_grads();
            for (loss, g) in &results {
                losses.push(*loss);
                acc.accumulate(g);
            }
            acc.scale(1.0 / chunk.len() as f64);
            let mut p = params_to_vec(tok);
            adam.step(&mut p, &params_to_vec(&acc), cfg.tok_lr)?;
            params_from_vec(tok, &p)?;
        }
        let mean = mean_of(&losses);
        if !mean.is_finite() {
            return Err(Error::PretrainDiverged {
                stage: "tokenizer".into(),
                step: epoch,
            });
        }
        history.push(mean);
    }
    Ok(history)
}

fn train_predictor(
    pred: &mut Predictor,
    tok: &Tokenizer,
    train: &[Array3<f64>],
    arch: &BackboneConfig,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    let mask = crate::canvas::QuadrantMaskSpec::bottom_right(arch.token_grid(), arch.token_grid())?;
    // Targets come from the now frozen tokenizer.
    let targets: Vec<_> = train.par_iter().map(|c| tok.tokenize_pixels(c)).collect();
    let mut adam = Adam::new(pred.param_len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.pred_epochs);
    for epoch in 0..cfg.pred_epochs {
        order.shuffle(&mut stream_rng(cfg.seed, &format!("pretrain/pred/shuffle/{epoch}")));
        let mut losses = Vec::with_capacity(train.len());
        for chunk in order.chunks(cfg.batch) {
            let frozen: &Predictor = pred;
            let results: Vec<(f64, super::PredictorGrads)> = chunk
                .par_iter()
                .map(|&i| {
                    let (logits, trace) = frozen.forward(&train[i], &mask)?;
                    let (loss, dlogits) = loss_with_grad(&logits, &targets[i], &mask)?;
                    let (_, grads) = frozen.backward(&trace, &dlogits, true);
                    Ok((loss, grads.expect("requested grads")))
                })
                .collect::<Result<_>>()?;
            let mut acc = pred.zeros_like_grads();
            for (loss, g) in &results {
                losses.push(*loss);
                acc.accumulate(g);
            }
            acc.scale(1.0 / chunk.len() as f64);
            let mut p = params_to_vec(pred);
            adam.step(&mut p, &params_to_vec(&acc), cfg.pred_lr)?;
            params_from_vec(pred, &p)?;
        }
        let mean = mean_of(&losses);
        if !mean.is_finite() {
            return Err(Error::PretrainDiverged {
                stage: "predictor".into(),
                step: epoch,
            });
        }
        history.push(mean);
    }
    Ok(history)
}

fn holdout_stats(
    bundle: &BackboneBundle,
    holdout: &[Array3<f64>],
    tok_loss_history: Vec<f64>,
    pred_loss_history: Vec<f64>,
) -> Result<PretrainStats> {
    let mut mae_sum = 0.0;
    let mut stable = 0usize;
    let mut total = 0usize;
    let mut agree = 0usize;
    let mut masked_total = 0usize;
    for canvas in holdout {
        let tokens = bundle.tokenize(canvas)?;
        let decoded = bundle.decode(&tokens)?;
        let n = canvas.len() as f64;
        mae_sum += decoded
            .iter()
            .zip(canvas.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        let retokenized = bundle.tokenize(&decoded)?;
        stable += tokens
            .iter()
            .zip(retokenized.iter())
            .filter(|(a, b)| a == b)
            .count();
        total += tokens.len();
        let predicted = bundle.predict_tokens(canvas)?;
        for &(r, c) in bundle.mask().positions() {
            if predicted[[r, c]] == tokens[[r, c]] {
                agree += 1;
            }
            masked_total += 1;
        }
        // The visible quadrants should still score a finite loss.
        let logits = bundle.predict_logits(canvas)?;
        compute_loss(&logits, &tokens, bundle.mask())?;
    }
    let k = holdout.len().max(1) as f64;
    Ok(PretrainStats {
        tok_loss_history,
        pred_loss_history,
        recon_mae_holdout: mae_sum / k,
        token_roundtrip_acc: if total == 0 {
            0.0
        } else {
            stable as f64 / total as f64
        },
        val_token_acc: if masked_total == 0 {
            0.0
        } else {
            agree as f64 / masked_total as f64
        },
    })
}
