//! The prompt training loop. Per example: enhance the placement's cells,
//! compose the canvas, score masked-token cross entropy against tokens of
//! the clean target canvas, and pull the gradient back through cell
//! resizing onto the border prompt. Only the prompt moves; the backbone
//! and the retrieval pairing stay frozen.

use super::{loss_with_grad, CosineWarmRestarts, EpochStats, TrainHistory};
use crate::backbone::{BackboneBundle, TokenGrid};
use crate::canvas::{compose_canvas, compose_gt_canvas, CellPos};
use crate::data::{Dataset, PairId};
use crate::error::{Error, Result};
use crate::eval::{binarize, miou, predict_query_label, BINARIZE_THRESHOLD, CANVAS_FILL};
use crate::image::{resize_bilinear_adjoint, Image};
use crate::nn::Adam;
use crate::prompt::{
    apply_placement, border_mask, init_prompt, InitScheme, Placement, PromptParams,
};
use crate::retriever::{build_index, retrieve, FeatureExtractor};
use crate::seed::stream_rng;
use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    /// Cosine warm restart schedule over epochs.
    pub base_lr: f64,
    pub min_lr: f64,
    pub restart_period: usize,
    pub restart_mult: usize,
    /// Prompt geometry: square resolution, border thickness, strength.
    pub resolution: usize,
    pub pad: usize,
    pub delta: f64,
    pub init: InitScheme,
    pub placement: Placement,
    /// Fraction of the pool held out for per-epoch validation.
    pub val_fraction: f64,
    /// Keep the prompt from the best validation epoch instead of the last.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch: 8,
            base_lr: 0.1,
            min_lr: 0.0,
            restart_period: 10,
            restart_mult: 2,
            resolution: 64,
            pad: 8,
            delta: 1.0,
            init: InitScheme::Zeros,
            placement: Placement::I_L,
            val_fraction: 0.2,
            select_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch must be positive"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::invalid("base_lr must be positive"));
        }
        if !(0.0..=0.9).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must be in [0, 0.9]"));
        }
        if self.placement.is_empty() {
            return Err(Error::invalid("placement selects no cells"));
        }
        Ok(())
    }
}

/// A query with its frozen leave-one-out context and training targets.
pub struct TrainExample {
    pub query_id: PairId,
    pub ctx_id: PairId,
    pub ctx_input: Image,
    pub ctx_label: Image,
    pub query_input: Image,
    pub query_label: Image,
    /// Tokens of the clean canvas (no prompt anywhere).
    pub targets: TokenGrid,
}

/// Pair every dataset member with its nearest other member and tokenize
/// the clean target canvas once. The pairing never changes during
/// training, so this happens up front.
pub fn prepare_examples(
    bundle: &BackboneBundle,
    dataset: &Dataset,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<TrainExample>> {
    if dataset.len() < 2 {
        return Err(Error::invalid("need at least two pairs for leave-one-out"));
    }
    let index = build_index(dataset, extractor)?;
    let cell = bundle.config().cell();
    dataset
        .pairs()
        .par_iter()
        .map(|q| {
            let ctx_id = retrieve(&index, extractor, &q.input, Some(q.id))?;
            let ctx = dataset
                .get(ctx_id)
                .ok_or(Error::MissingRecord(ctx_id.0))?;
            let gt = compose_gt_canvas(&ctx.input, &ctx.label, &q.input, &q.label, cell)?;
            let targets = bundle.tokenize(gt.data())?;
            Ok(TrainExample {
                query_id: q.id,
                ctx_id,
                ctx_input: ctx.input.clone(),
                ctx_label: ctx.label.clone(),
                query_input: q.input.clone(),
                query_label: q.label.clone(),
                targets,
            })
        })
        .collect()
}

/// Cross-entropy loss of one example under the current prompt, and its
/// gradient with respect to the full prompt grid (zero off the border).
pub fn prompt_loss_and_grad(
    bundle: &BackboneBundle,
    prompt: &PromptParams,
    placement: Placement,
    ex: &TrainExample,
) -> Result<(f64, Array3<f64>)> {
    let r = prompt.resolution();
    let cell = bundle.config().cell();
    // Cells are standardized to canvas-cell size first; the prompt is
    // rendered onto them there, so the gradient chain below is the
    // transpose of that single render.
    let (a, b, q) = apply_placement(
        &ex.ctx_input.resize_bilinear(cell, cell)?,
        &ex.ctx_label.resize_bilinear(cell, cell)?,
        &ex.query_input.resize_bilinear(cell, cell)?,
        prompt,
        placement,
    )?;
    let canvas = compose_canvas(&a, &b, &q, CANVAS_FILL, cell)?;
    let (logits, trace) = bundle.predict_traced(canvas.data())?;
    let (loss, dlogits) = loss_with_grad(&logits, &ex.targets, bundle.mask())?;
    let dcanvas = bundle.canvas_grad(&trace, &dlogits);

    let mut dtheta = Array3::<f64>::zeros((r, r, 3));
    let support = border_mask(r, prompt.pad());
    for (on, pos) in [
        (placement.input, CellPos::TopLeft),
        (placement.label, CellPos::TopRight),
        (placement.query, CellPos::BottomLeft),
    ] {
        if !on {
            continue;
        }
        let (r0, c0) = pos.offsets(cell);
        let cell_grad = dcanvas
            .slice(s![r0..r0 + cell, c0..c0 + cell, ..])
            .to_owned();
        let up = resize_bilinear_adjoint(&cell_grad, r, r)?;
        for i in 0..r {
            for j in 0..r {
                if support[[i, j]] {
                    for ch in 0..3 {
                        dtheta[[i, j, ch]] += prompt.delta() * up[[i, j, ch]];
                    }
                }
            }
        }
    }
    Ok((loss, dtheta))
}

fn masked_vec(prompt: &PromptParams, idx: &[(usize, usize)]) -> Vec<f64> {
    let theta = prompt.theta();
    let mut out = Vec::with_capacity(idx.len() * 3);
    for &(i, j) in idx {
        for ch in 0..3 {
            out.push(theta[[i, j, ch]]);
        }
    }
    out
}

fn set_masked_vec(prompt: &mut PromptParams, idx: &[(usize, usize)], vals: &[f64]) {
    let theta = prompt.theta_mut();
    let mut k = 0;
    for &(i, j) in idx {
        for ch in 0..3 {
            theta[[i, j, ch]] = vals[k];
            k += 1;
        }
    }
}

fn grad_masked_vec(grad: &Array3<f64>, idx: &[(usize, usize)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * 3);
    for &(i, j) in idx {
        for ch in 0..3 {
            out.push(grad[[i, j, ch]]);
        }
    }
    out
}

/// Validation mIoU of the current prompt over `examples`.
fn val_miou(
    bundle: &BackboneBundle,
    prompt: &PromptParams,
    placement: Placement,
    examples: &[&TrainExample],
) -> Result<f64> {
    let cell = bundle.config().cell();
    let scores: Vec<f64> = examples
        .par_iter()
        .map(|ex| {
            let pred = predict_query_label(
                bundle,
                Some((prompt, placement)),
                &ex.ctx_input,
                &ex.ctx_label,
                &ex.query_input,
            )?;
            let gt = ex.query_label.resize_bilinear(cell, cell)?;
            miou(
                &binarize(&pred, BINARIZE_THRESHOLD),
                &binarize(&gt, BINARIZE_THRESHOLD),
            )
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

/// Train a border prompt on prepared examples. Returns the prompt
/// (best-validation epoch if selection is on) and the epoch history.
pub fn train_prompt(
    bundle: &BackboneBundle,
    examples: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<(PromptParams, TrainHistory)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let mut prompt = init_prompt(cfg.resolution, cfg.pad, cfg.init, cfg.seed)?;
    prompt.set_delta(cfg.delta)?;
    let idx = prompt.masked_indices();

    // Deterministic validation split.
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, "train/val-split"));
    let n_val = ((examples.len() as f64) * cfg.val_fraction).floor() as usize;
    let (val_idx, fit_idx) = order.split_at(n_val);
    let val_set: Vec<&TrainExample> = val_idx.iter().map(|&i| &examples[i]).collect();
    let mut fit: Vec<usize> = fit_idx.to_vec();
    if fit.is_empty() {
        return Err(Error::invalid("validation split leaves no training data"));
    }

    let schedule = CosineWarmRestarts::new(
        cfg.base_lr,
        cfg.min_lr,
        cfg.restart_period,
        cfg.restart_mult,
    );
    let mut adam = Adam::new(idx.len() * 3);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, PromptParams)> = None;
    let frozen_fingerprint = bundle.recompute_fingerprint();

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        fit.shuffle(&mut stream_rng(cfg.seed, &format!("train/shuffle/{epoch}")));
        let mut losses = Vec::with_capacity(fit.len());
        for chunk in fit.chunks(cfg.batch) {
            let frozen = &prompt;
            let results: Vec<(f64, Array3<f64>)> = chunk
                .par_iter()
                .map(|&i| prompt_loss_and_grad(bundle, frozen, cfg.placement, &examples[i]))
                .collect::<Result<_>>()?;
            let mut grad_sum = Array3::<f64>::zeros(prompt.theta().dim());
            for (loss, g) in &results {
                losses.push(*loss);
                grad_sum += g;
            }
            grad_sum /= chunk.len() as f64;
            let mut params = masked_vec(&prompt, &idx);
            adam.step(&mut params, &grad_masked_vec(&grad_sum, &idx), lr)?;
            set_masked_vec(&mut prompt, &idx, &params);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let epoch_val = if val_set.is_empty() {
            None
        } else {
            Some(val_miou(bundle, &prompt, cfg.placement, &val_set)?)
        };
        // Audited every epoch: the backbone must not move and the
        // prompt must stay confined to its border support.
        if bundle.recompute_fingerprint() != frozen_fingerprint {
            return Err(Error::invalid(format!(
                "backbone changed during epoch {epoch}"
            )));
        }
        history.epochs.push(EpochStats {
            epoch,
            lr,
            train_loss,
            val_miou: epoch_val,
            off_support_max_abs: prompt.off_support_max_abs(),
        });
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                history: Box::new(history),
            });
        }
        if let Some(v) = epoch_val {
            if best.as_ref().is_none_or(|(bv, _, _)| v > *bv) {
                best = Some((v, epoch, prompt.clone()));
            }
        }
    }

    if cfg.select_best {
        if let Some((_, epoch, chosen)) = best {
            history.best_epoch = Some(epoch);
            return Ok((chosen, history));
        }
    }
    history.best_epoch = history.epochs.last().map(|e| e.epoch);
    Ok((prompt, history))
}

/// Numerical audit of the prompt gradient on one example: central
/// differences at `coords` supported coordinates, plus the largest
/// analytic gradient magnitude found off the support (must be zero).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel_err: f64,
    pub max_off_support_grad: f64,
}

pub fn grad_check(
    bundle: &BackboneBundle,
    prompt: &PromptParams,
    placement: Placement,
    ex: &TrainExample,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grad) = prompt_loss_and_grad(bundle, prompt, placement, ex)?;
    let support = border_mask(prompt.resolution(), prompt.pad());
    let mut max_off = 0.0f64;
    for i in 0..prompt.resolution() {
        for j in 0..prompt.resolution() {
            if !support[[i, j]] {
                for ch in 0..3 {
                    max_off = max_off.max(grad[[i, j, ch]].abs());
                }
            }
        }
    }
    let idx = prompt.masked_indices();
    let mut picks: Vec<(usize, usize)> = idx.clone();
    picks.shuffle(&mut stream_rng(seed, "gradcheck/coords"));
    picks.truncate(coords.max(1));
    let eps = 1e-4;
    let mut worst = 0.0f64;
    let mut work = prompt.clone();
    for (i, j) in picks.iter().copied() {
        for ch in 0..3 {
            let orig = work.theta()[[i, j, ch]];
            work.theta_mut()[[i, j, ch]] = orig + eps;
            let (up, _) = prompt_loss_and_grad(bundle, &work, placement, ex)?;
            work.theta_mut()[[i, j, ch]] = orig - eps;
            let (dn, _) = prompt_loss_and_grad(bundle, &work, placement, ex)?;
            work.theta_mut()[[i, j, ch]] = orig;
            let num = (up - dn) / (2.0 * eps);
            let a = grad[[i, j, ch]];
            let denom = a.abs().max(num.abs()).max(1e-6);
            worst = worst.max((a - num).abs() / denom);
        }
    }
    Ok(GradCheckReport {
        checked: picks.len() * 3,
        worst_rel_err: worst,
        max_off_support_grad: max_off,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneBundle, BackboneConfig, Predictor, Tokenizer};
    use crate::data::{generate_dataset, DatasetSpec, ShapeClass, TaskKind};
    use crate::retriever::GrayDownsampleExtractor;

    fn small_bundle(seed: u64) -> BackboneBundle {
        let config = BackboneConfig {
            canvas_size: 16,
            vocab: 8,
            d_code: 4,
            d_model: 8,
            heads: 2,
            depth: 1,
        };
        let mut rng = stream_rng(seed, "train/test/bundle");
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

    fn small_dataset() -> Dataset {
        generate_dataset(&DatasetSpec {
            task_kind: TaskKind::Segmentation,
            classes: ShapeClass::ALL[..2].to_vec(),
            per_class: 4,
            image_size: 16,
            domain_id: 0,
            seed: 11,
        })
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            seed: 5,
            epochs: 3,
            batch: 4,
            resolution: 16,
            pad: 2,
            val_fraction: 0.25,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn examples_pair_leave_one_out() {
        let bundle = small_bundle(0);
        let ds = small_dataset();
        let ex = GrayDownsampleExtractor::new(4).unwrap();
        let a = prepare_examples(&bundle, &ds, &ex).unwrap();
        assert_eq!(a.len(), ds.len());
        for e in &a {
            assert_ne!(e.query_id, e.ctx_id);
            assert_eq!(e.targets.dim(), (4, 4));
        }
        let b = prepare_examples(&bundle, &ds, &ex).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ctx_id, y.ctx_id);
        }
    }

    #[test]
    fn zero_prompt_scores_the_clean_canvas_loss() {
        let bundle = small_bundle(1);
        let ds = small_dataset();
        let ex = GrayDownsampleExtractor::new(4).unwrap();
        let examples = prepare_examples(&bundle, &ds, &ex).unwrap();
        let e = &examples[0];
        let prompt = init_prompt(16, 2, InitScheme::Zeros, 0).unwrap();
        let (loss, _) = prompt_loss_and_grad(&bundle, &prompt, Placement::I_L, e).unwrap();
        let canvas = compose_canvas(
            &e.ctx_input.resize_bilinear(16, 16).unwrap(),
            &e.ctx_label.resize_bilinear(16, 16).unwrap(),
            &e.query_input.resize_bilinear(16, 16).unwrap(),
            CANVAS_FILL,
            bundle.config().cell(),
        )
        .unwrap();
        let logits = bundle.predict_logits(canvas.data()).unwrap();
        let base = super::super::compute_loss(&logits, &e.targets, bundle.mask()).unwrap();
        assert_eq!(loss, base);
    }

    #[test]
    fn prompt_gradient_passes_numeric_audit() {
        let bundle = small_bundle(2);
        let ds = small_dataset();
        let extractor = GrayDownsampleExtractor::new(4).unwrap();
        let examples = prepare_examples(&bundle, &ds, &extractor).unwrap();
        let prompt = init_prompt(16, 2, InitScheme::Gaussian { sigma: 0.05 }, 3).unwrap();
        for placement in [Placement::I_L, Placement::Q, Placement::I_L_Q] {
            let report =
                grad_check(&bundle, &prompt, placement, &examples[1], 12, 7).unwrap();
            assert_eq!(report.max_off_support_grad, 0.0);
            assert!(
                report.worst_rel_err < 1e-3,
                "{} worst {}",
                placement.label_str(),
                report.worst_rel_err
            );
        }
    }

    #[test]
    fn training_runs_deterministically_with_history() {
        let bundle = small_bundle(3);
        let ds = small_dataset();
        let extractor = GrayDownsampleExtractor::new(4).unwrap();
        let examples = prepare_examples(&bundle, &ds, &extractor).unwrap();
        let cfg = small_cfg();
        let (p1, h1) = train_prompt(&bundle, &examples, &cfg).unwrap();
        let (p2, h2) = train_prompt(&bundle, &examples, &cfg).unwrap();
        assert_eq!(p1.fingerprint(), p2.fingerprint());
        assert_eq!(h1, h2);
        assert_eq!(h1.epochs.len(), 3);
        assert!(h1.epochs.iter().all(|e| e.train_loss.is_finite()));
        assert!(h1.epochs.iter().all(|e| e.val_miou.is_some()));
        assert!(h1.best_epoch.is_some());
        assert_eq!(p1.off_support_max_abs(), 0.0);
        // Training moved the prompt off the zero initialization.
        assert!(p1.theta().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn no_validation_split_keeps_final_epoch() {
        let bundle = small_bundle(4);
        let ds = small_dataset();
        let extractor = GrayDownsampleExtractor::new(4).unwrap();
        let examples = prepare_examples(&bundle, &ds, &extractor).unwrap();
        let cfg = TrainConfig {
            val_fraction: 0.0,
            ..small_cfg()
        };
        let (_, h) = train_prompt(&bundle, &examples, &cfg).unwrap();
        assert!(h.epochs.iter().all(|e| e.val_miou.is_none()));
        assert_eq!(h.best_epoch, Some(2));
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(TrainConfig {
            batch: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            val_fraction: 0.95,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        // Zero epochs is a valid no-op run returning the initial prompt.
        assert!(TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_ok());
    }
}
