//! Experiment drivers: fold evaluation, placement ablation, border-width
//! and training-set-size sweeps, cross-class transfer, and domain shift.
//! Every report carries the backbone fingerprint and the fingerprints of
//! the prompts it trained, so numbers are traceable to exact weights.

use super::reports::hex;
use super::{binarize, miou, predict_query_label, BINARIZE_THRESHOLD};
use crate::backbone::BackboneBundle;
use crate::canvas::compose_gt_canvas;
use crate::data::{split_folds, Dataset, PairId};
use crate::error::{Error, Result};
use crate::prompt::{Placement, PromptParams};
use crate::retriever::{build_index, retrieve, FeatureExtractor};
use crate::trainer::{prepare_examples, train_prompt, TrainConfig, TrainHistory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Per-query outcome on a test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub query: u32,
    pub ctx: u32,
    pub baseline_miou: f64,
    pub prompted_miou: f64,
}

/// Retrieval pairing for a test split: each test query gets its nearest
/// training pair as context.
pub fn pair_with_train(
    train: &Dataset,
    test: &Dataset,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<(PairId, PairId)>> {
    let index = build_index(train, extractor)?;
    test.pairs()
        .par_iter()
        .map(|q| {
            // Exclusion matters only if the query itself sits in the pool.
            let ctx = retrieve(&index, extractor, &q.input, Some(q.id))?;
            Ok((q.id, ctx))
        })
        .collect()
}

fn score_one(
    bundle: &BackboneBundle,
    prompt: Option<(&PromptParams, Placement)>,
    train: &Dataset,
    test: &Dataset,
    query: PairId,
    ctx: PairId,
) -> Result<f64> {
    let q = test.get(query).ok_or(Error::MissingRecord(query.0))?;
    let c = train.get(ctx).ok_or(Error::MissingRecord(ctx.0))?;
    let cell = bundle.config().cell();
    let pred = predict_query_label(bundle, prompt, &c.input, &c.label, &q.input)?;
    let gt = q.label.resize_bilinear(cell, cell)?;
    miou(
        &binarize(&pred, BINARIZE_THRESHOLD),
        &binarize(&gt, BINARIZE_THRESHOLD),
    )
}

/// Baseline and prompted mIoU for every test query under a fixed pairing.
pub fn score_split(
    bundle: &BackboneBundle,
    prompt: &PromptParams,
    placement: Placement,
    train: &Dataset,
    test: &Dataset,
    pairing: &[(PairId, PairId)],
) -> Result<Vec<PairScore>> {
    pairing
        .par_iter()
        .map(|&(query, ctx)| {
            let baseline = score_one(bundle, None, train, test, query, ctx)?;
            let prompted = score_one(
                bundle,
                Some((prompt, placement)),
                train,
                test,
                query,
                ctx,
            )?;
            Ok(PairScore {
                query: query.0,
                ctx: ctx.0,
                baseline_miou: baseline,
                prompted_miou: prompted,
            })
        })
        .collect()
}

fn mean<F: Fn(&PairScore) -> f64>(scores: &[PairScore], f: F) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(f).sum::<f64>() / scores.len() as f64
}

/// Fraction of hidden-quadrant tokens the predictor gets right against
/// the tokenized target canvas, averaged over test queries.
pub fn token_agreement(
    bundle: &BackboneBundle,
    prompt: Option<(&PromptParams, Placement)>,
    train: &Dataset,
    test: &Dataset,
    pairing: &[(PairId, PairId)],
) -> Result<f64> {
    let cell = bundle.config().cell();
    let fracs: Vec<f64> = pairing
        .par_iter()
        .map(|&(query, ctx)| {
            let q = test.get(query).ok_or(Error::MissingRecord(query.0))?;
            let c = train.get(ctx).ok_or(Error::MissingRecord(ctx.0))?;
            let gt = compose_gt_canvas(&c.input, &c.label, &q.input, &q.label, cell)?;
            let targets = bundle.tokenize(gt.data())?;
            let (a, b, qi) = match prompt {
                Some((p, placement)) => crate::prompt::apply_placement(
                    &c.input.resize_bilinear(cell, cell)?,
                    &c.label.resize_bilinear(cell, cell)?,
                    &q.input.resize_bilinear(cell, cell)?,
                    p,
                    placement,
                )?,
                None => (c.input.clone(), c.label.clone(), q.input.clone()),
            };
            let canvas =
                crate::canvas::compose_canvas(&a, &b, &qi, super::CANVAS_FILL, cell)?;
            let predicted = bundle.predict_tokens(canvas.data())?;
            let mut hit = 0usize;
            for &(r, cpos) in bundle.mask().positions() {
                if predicted[[r, cpos]] == targets[[r, cpos]] {
                    hit += 1;
                }
            }
            Ok(hit as f64 / bundle.mask().len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(fracs.iter().sum::<f64>() / fracs.len().max(1) as f64)
}

/// Train on a split's pool and score its test set.
pub fn train_and_score(
    bundle: &BackboneBundle,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<(PromptParams, TrainHistory, Vec<PairScore>)> {
    let examples = prepare_examples(bundle, train, extractor)?;
    let (prompt, history) = train_prompt(bundle, &examples, cfg)?;
    let pairing = pair_with_train(train, test, extractor)?;
    let scores = score_split(bundle, &prompt, cfg.placement, train, test, &pairing)?;
    Ok((prompt, history, scores))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineFoldRow {
    pub fold: usize,
    pub test_classes: Vec<u32>,
    pub baseline_miou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineReport {
    pub backbone_fingerprint: String,
    pub folds: Vec<BaselineFoldRow>,
    pub mean_baseline_miou: f64,
}

/// Promptless fold evaluation: retrieval plus the frozen backbone, no
/// trained parameters anywhere.
pub fn baseline_fold_experiment(
    bundle: &BackboneBundle,
    dataset: &Dataset,
    k: usize,
    extractor: &dyn FeatureExtractor,
) -> Result<BaselineReport> {
    let folds = split_folds(dataset, k)?;
    let mut rows = Vec::with_capacity(folds.len());
    for (i, fold) in folds.iter().enumerate() {
        let pairing = pair_with_train(&fold.train, &fold.test, extractor)?;
        let scores: Vec<f64> = pairing
            .par_iter()
            .map(|&(q, c)| score_one(bundle, None, &fold.train, &fold.test, q, c))
            .collect::<Result<_>>()?;
        rows.push(BaselineFoldRow {
            fold: i,
            test_classes: fold.test.classes(),
            baseline_miou: scores.iter().sum::<f64>() / scores.len().max(1) as f64,
        });
    }
    let mean = rows.iter().map(|r| r.baseline_miou).sum::<f64>() / rows.len().max(1) as f64;
    Ok(BaselineReport {
        backbone_fingerprint: bundle.fingerprint().to_string(),
        folds: rows,
        mean_baseline_miou: mean,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub test_classes: Vec<u32>,
    pub prompt_fingerprint: String,
    pub baseline_miou: f64,
    pub prompted_miou: f64,
    pub pair_scores: Vec<PairScore>,
    pub history: TrainHistory,
    /// The trained prompt itself; not serialized, fingerprint above is.
    #[serde(skip)]
    pub prompt: Option<PromptParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub backbone_fingerprint: String,
    pub train_config: TrainConfig,
    pub folds: Vec<FoldOutcome>,
    pub mean_baseline_miou: f64,
    pub mean_prompted_miou: f64,
}

/// Class-level fold evaluation: each fold trains a fresh prompt on its
/// training classes and scores the held-out classes.
pub fn run_fold_experiment(
    bundle: &BackboneBundle,
    dataset: &Dataset,
    k: usize,
    cfg: &TrainConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<FoldReport> {
    let folds = split_folds(dataset, k)?;
    let mut outcomes = Vec::with_capacity(folds.len());
    for (i, fold) in folds.iter().enumerate() {
        let (prompt, history, scores) =
            train_and_score(bundle, &fold.train, &fold.test, cfg, extractor)?;
        outcomes.push(FoldOutcome {
            fold: i,
            train_size: fold.train.len(),
            test_size: fold.test.len(),
            test_classes: fold.test.classes(),
            prompt_fingerprint: hex(&prompt.fingerprint()),
            baseline_miou: mean(&scores, |s| s.baseline_miou),
            prompted_miou: mean(&scores, |s| s.prompted_miou),
            pair_scores: scores,
            history,
            prompt: Some(prompt),
        });
    }
    let n = outcomes.len() as f64;
    let mean_baseline = outcomes.iter().map(|o| o.baseline_miou).sum::<f64>() / n;
    let mean_prompted = outcomes.iter().map(|o| o.prompted_miou).sum::<f64>() / n;
    Ok(FoldReport {
        backbone_fingerprint: bundle.fingerprint().to_string(),
        train_config: cfg.clone(),
        folds: outcomes,
        mean_baseline_miou: mean_baseline,
        mean_prompted_miou: mean_prompted,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub placement: String,
    pub prompt_fingerprint: String,
    pub prompted_miou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub backbone_fingerprint: String,
    pub baseline_miou: f64,
    pub rows: Vec<AblationRow>,
}

/// Train one prompt per placement variant and score each on the same
/// split; placement shapes both training and inference.
pub fn ablate_placement(
    bundle: &BackboneBundle,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<AblationReport> {
    let pairing = pair_with_train(train, test, extractor)?;
    let baseline: Vec<f64> = pairing
        .par_iter()
        .map(|&(q, c)| score_one(bundle, None, train, test, q, c))
        .collect::<Result<_>>()?;
    let baseline_miou = baseline.iter().sum::<f64>() / baseline.len().max(1) as f64;
    let examples_pool = prepare_examples(bundle, train, extractor)?;
    let mut rows = Vec::new();
    for placement in Placement::ABLATION_SET {
        let run_cfg = TrainConfig {
            placement,
            ..cfg.clone()
        };
        let (prompt, _) = train_prompt(bundle, &examples_pool, &run_cfg)?;
        let scores = score_split(bundle, &prompt, placement, train, test, &pairing)?;
        rows.push(AblationRow {
            placement: placement.label_str().to_string(),
            prompt_fingerprint: hex(&prompt.fingerprint()),
            prompted_miou: mean(&scores, |s| s.prompted_miou),
        });
    }
    Ok(AblationReport {
        backbone_fingerprint: bundle.fingerprint().to_string(),
        baseline_miou,
        rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PadRow {
    pub pad: usize,
    pub param_count: usize,
    pub prompt_fingerprint: String,
    pub prompted_miou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PadSweepReport {
    pub backbone_fingerprint: String,
    pub resolution: usize,
    pub baseline_miou: f64,
    pub rows: Vec<PadRow>,
}

/// Sweep the border thickness; wider borders mean more prompt parameters.
pub fn sweep_padding(
    bundle: &BackboneBundle,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    pads: &[usize],
    extractor: &dyn FeatureExtractor,
) -> Result<PadSweepReport> {
    let pairing = pair_with_train(train, test, extractor)?;
    let baseline: Vec<f64> = pairing
        .par_iter()
        .map(|&(q, c)| score_one(bundle, None, train, test, q, c))
        .collect::<Result<_>>()?;
    let examples_pool = prepare_examples(bundle, train, extractor)?;
    let mut rows = Vec::new();
    for &pad in pads {
        let run_cfg = TrainConfig {
            pad,
            ..cfg.clone()
        };
        let (prompt, _) = train_prompt(bundle, &examples_pool, &run_cfg)?;
        let scores = score_split(bundle, &prompt, cfg.placement, train, test, &pairing)?;
        rows.push(PadRow {
            pad,
            param_count: prompt.param_count(),
            prompt_fingerprint: hex(&prompt.fingerprint()),
            prompted_miou: mean(&scores, |s| s.prompted_miou),
        });
    }
    Ok(PadSweepReport {
        backbone_fingerprint: bundle.fingerprint().to_string(),
        resolution: cfg.resolution,
        baseline_miou: baseline.iter().sum::<f64>() / baseline.len().max(1) as f64,
        rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SizeRow {
    /// Requested subset size; `None` means the whole pool.
    pub requested: Option<usize>,
    pub actual: usize,
    pub prompt_fingerprint: String,
    pub baseline_miou: f64,
    pub prompted_miou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SizeSweepReport {
    pub backbone_fingerprint: String,
    pub rows: Vec<SizeRow>,
}

/// Class-balanced deterministic subset: round-robin across classes in id
/// order until `n` pairs are taken.
pub fn balanced_subset(dataset: &Dataset, n: usize) -> Result<Dataset> {
    let by_class = dataset.by_class();
    let mut keep = BTreeSet::new();
    let mut rank = 0usize;
    while keep.len() < n.min(dataset.len()) {
        for members in by_class.values() {
            if keep.len() >= n {
                break;
            }
            if let Some(p) = members.get(rank) {
                keep.insert(p.id);
            }
        }
        rank += 1;
    }
    dataset.subset_by_ids(&keep)
}

/// Shrink the training pool; both retrieval and prompt training see only
/// the subset, the test split stays fixed.
pub fn sweep_dataset_size(
    bundle: &BackboneBundle,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    sizes: &[Option<usize>],
    extractor: &dyn FeatureExtractor,
) -> Result<SizeSweepReport> {
    let mut rows = Vec::new();
    for &requested in sizes {
        let pool = match requested {
            Some(n) => balanced_subset(train, n)?,
            None => train.clone(),
        };
        let (prompt, _, scores) = train_and_score(bundle, &pool, test, cfg, extractor)?;
        rows.push(SizeRow {
            requested,
            actual: pool.len(),
            prompt_fingerprint: hex(&prompt.fingerprint()),
            baseline_miou: mean(&scores, |s| s.baseline_miou),
            prompted_miou: mean(&scores, |s| s.prompted_miou),
        });
    }
    Ok(SizeSweepReport {
        backbone_fingerprint: bundle.fingerprint().to_string(),
        rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossClassReport {
    pub backbone_fingerprint: String,
    pub classes: Vec<u32>,
    pub class_names: Vec<String>,
    /// `matrix[i][j]`: prompt trained on class `classes[i]`, scored on
    /// class `classes[j]`'s test split.
    pub matrix: Vec<Vec<f64>>,
    pub diag_mean: f64,
    pub offdiag_mean: f64,
}

/// Train a prompt per class on its 75% split, score every prompt on every
/// class's 25% split. Context comes from the evaluated class's own pool.
pub fn cross_class_matrix(
    bundle: &BackboneBundle,
    dataset: &Dataset,
    cfg: &TrainConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<CrossClassReport> {
    let by_class = dataset.by_class();
    let classes: Vec<u32> = by_class.keys().copied().collect();
    if classes.len() < 2 {
        return Err(Error::invalid("cross-class needs at least two classes"));
    }
    let mut splits = Vec::new();
    for members in by_class.values() {
        let cut = (members.len() * 3) / 4;
        if cut == 0 || cut == members.len() {
            return Err(Error::invalid("class too small for a 75/25 split"));
        }
        let train_ids: BTreeSet<PairId> = members[..cut].iter().map(|p| p.id).collect();
        let test_ids: BTreeSet<PairId> = members[cut..].iter().map(|p| p.id).collect();
        splits.push((
            dataset.subset_by_ids(&train_ids)?,
            dataset.subset_by_ids(&test_ids)?,
        ));
    }
    // One prompt per class, one pairing per evaluated class.
    let mut prompts = Vec::new();
    for (train, _) in &splits {
        let examples = prepare_examples(bundle, train, extractor)?;
        let (prompt, _) = train_prompt(bundle, &examples, cfg)?;
        prompts.push(prompt);
    }
    let pairings: Vec<Vec<(PairId, PairId)>> = splits
        .iter()
        .map(|(train, test)| pair_with_train(train, test, extractor))
        .collect::<Result<_>>()?;
    let mut matrix = vec![vec![0.0; classes.len()]; classes.len()];
    for (i, prompt) in prompts.iter().enumerate() {
        for (j, (train, test)) in splits.iter().enumerate() {
            let scores =
                score_split(bundle, prompt, cfg.placement, train, test, &pairings[j])?;
            matrix[i][j] = mean(&scores, |s| s.prompted_miou);
        }
    }
    let k = classes.len();
    let diag_mean = (0..k).map(|i| matrix[i][i]).sum::<f64>() / k as f64;
    let offdiag_mean = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| matrix[i][j])
        .sum::<f64>()
        / (k * (k - 1)) as f64;
    let class_names = classes
        .iter()
        .map(|c| dataset.class_roster.get(c).cloned().unwrap_or_default())
        .collect();
    Ok(CrossClassReport {
        backbone_fingerprint: bundle.fingerprint().to_string(),
        classes,
        class_names,
        matrix,
        diag_mean,
        offdiag_mean,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmScore {
    pub baseline_miou: f64,
    pub prompted_miou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainShiftReport {
    pub backbone_fingerprint: String,
    pub prompt_fingerprint: String,
    pub in_domain: ArmScore,
    pub shifted: ArmScore,
    /// Positive numbers mean the shifted arm scored lower.
    pub baseline_drop: f64,
    pub prompted_drop: f64,
}

/// Train on the source domain, then score paired test splits from the
/// source and shifted domains. The pairs must carry identical ids so the
/// arms differ only in rendering domain.
pub fn domain_shift(
    bundle: &BackboneBundle,
    train_src: &Dataset,
    test_src: &Dataset,
    test_shifted: &Dataset,
    cfg: &TrainConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<DomainShiftReport> {
    if test_src.ids() != test_shifted.ids() {
        return Err(Error::invalid(
            "domain arms must contain the same pair ids",
        ));
    }
    let examples = prepare_examples(bundle, train_src, extractor)?;
    let (prompt, _) = train_prompt(bundle, &examples, cfg)?;
    let mut arms = Vec::new();
    for test in [test_src, test_shifted] {
        let pairing = pair_with_train(train_src, test, extractor)?;
        let scores = score_split(bundle, &prompt, cfg.placement, train_src, test, &pairing)?;
        arms.push(ArmScore {
            baseline_miou: mean(&scores, |s| s.baseline_miou),
            prompted_miou: mean(&scores, |s| s.prompted_miou),
        });
    }
    let shifted = arms.pop().expect("two arms");
    let in_domain = arms.pop().expect("two arms");
    Ok(DomainShiftReport {
        backbone_fingerprint: bundle.fingerprint().to_string(),
        prompt_fingerprint: hex(&prompt.fingerprint()),
        baseline_drop: in_domain.baseline_miou - shifted.baseline_miou,
        prompted_drop: in_domain.prompted_miou - shifted.prompted_miou,
        in_domain,
        shifted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, Predictor, Tokenizer};
    use crate::data::{generate_dataset, DatasetSpec, ShapeClass, TaskKind};
    use crate::retriever::GrayDownsampleExtractor;
    use crate::seed::stream_rng;

    fn small_bundle(seed: u64) -> BackboneBundle {
        let config = BackboneConfig {
            canvas_size: 16,
            vocab: 8,
            d_code: 4,
            d_model: 8,
            heads: 2,
            depth: 1,
        };
        let mut rng = stream_rng(seed, "eval/test/bundle");
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

    fn dataset(classes: usize, per_class: usize, domain: u32) -> Dataset {
        generate_dataset(&DatasetSpec {
            task_kind: TaskKind::Segmentation,
            classes: ShapeClass::ALL[..classes].to_vec(),
            per_class,
            image_size: 16,
            domain_id: domain,
            seed: 7,
        })
        .unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch: 4,
            resolution: 8,
            pad: 2,
            val_fraction: 0.0,
            select_best: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fold_experiment_is_deterministic_and_traceable() {
        let bundle = small_bundle(3);
        let ds = dataset(2, 4, 0);
        let ex = GrayDownsampleExtractor::new(4).unwrap();
        let cfg = quick_cfg();
        let a = run_fold_experiment(&bundle, &ds, 2, &cfg, &ex).unwrap();
        let b = run_fold_experiment(&bundle, &ds, 2, &cfg, &ex).unwrap();
        assert_eq!(a.folds.len(), 2);
        assert_eq!(a.backbone_fingerprint, bundle.fingerprint());
        for (fa, fb) in a.folds.iter().zip(&b.folds) {
            assert_eq!(fa.prompt_fingerprint, fb.prompt_fingerprint);
            assert_eq!(fa.pair_scores, fb.pair_scores);
            assert_eq!(fa.test_classes.len(), 1);
            // Held-out classes never appear in the fold's training pool.
            assert_eq!(fa.train_size, 4);
            assert_eq!(fa.test_size, 4);
        }
        assert!(a.mean_baseline_miou.is_finite());
        assert!((0.0..=1.0).contains(&a.mean_prompted_miou));
    }

    #[test]
    fn pairing_never_selects_the_query_itself() {
        let ds = dataset(2, 4, 0);
        let ex = GrayDownsampleExtractor::new(4).unwrap();
        // Train and test overlap here on purpose.
        let pairing = pair_with_train(&ds, &ds, &ex).unwrap();
        for (q, c) in pairing {
            assert_ne!(q, c);
        }
    }

    #[test]
    fn ablation_covers_every_placement_variant() {
        let bundle = small_bundle(5);
        let ds = dataset(2, 4, 0);
        let folds = split_folds(&ds, 2).unwrap();
        let ex = GrayDownsampleExtractor::new(4).unwrap();
        let report =
            ablate_placement(&bundle, &folds[0].train, &folds[0].test, &quick_cfg(), &ex)
                .unwrap();
        let labels: Vec<&str> = report.rows.iter().map(|r| r.placement.as_str()).collect();
        assert_eq!(labels, vec!["I", "Q", "I&Q", "I&L", "I,L&Q"]);
        let unique: BTreeSet<&String> =
            report.rows.iter().map(|r| &r.prompt_fingerprint).collect();
        assert_eq!(unique.len(), report.rows.len());
    }

    #[test]
    fn pad_sweep_reports_parameter_counts() {
        let bundle = small_bundle(5);
        let ds = dataset(2, 4, 0);
        let folds = split_folds(&ds, 2).unwrap();
        let ex = GrayDownsampleExtractor::new(4).unwrap();
        let report = sweep_padding(
            &bundle,
            &folds[0].train,
            &folds[0].test,
            &quick_cfg(),
            &[1, 2],
            &ex,
        )
        .unwrap();
        assert_eq!(report.rows[0].pad, 1);
        assert_eq!(report.rows[0].param_count, crate::prompt::param_count(8, 1));
        assert_eq!(report.rows[1].param_count, crate::prompt::param_count(8, 2));
        assert!(report.rows[1].param_count > report.rows[0].param_count);
    }

    #[test]
    fn balanced_subset_is_class_balanced_and_nested() {
        let ds = dataset(2, 4, 0);
        let s2 = balanced_subset(&ds, 2).unwrap();
        let s4 = balanced_subset(&ds, 4).unwrap();
        assert_eq!(s2.len(), 2);
        assert_eq!(s2.classes().len(), 2);
        assert_eq!(s4.len(), 4);
        let ids2: BTreeSet<PairId> = s2.ids().into_iter().collect();
        let ids4: BTreeSet<PairId> = s4.ids().into_iter().collect();
        assert!(ids2.is_subset(&ids4));
        // Requests beyond the pool return everything.
        assert_eq!(balanced_subset(&ds, 100).unwrap().len(), ds.len());
    }

    #[test]
    fn size_sweep_tracks_requested_sizes() {
        let bundle = small_bundle(5);
        let ds = dataset(2, 6, 0);
        let folds = split_folds(&ds, 2).unwrap();
        let ex = GrayDownsampleExtractor::new(4).unwrap();
        let report = sweep_dataset_size(
            &bundle,
            &folds[0].train,
            &folds[0].test,
            &quick_cfg(),
            &[Some(2), None],
            &ex,
        )
        .unwrap();
        assert_eq!(report.rows[0].actual, 2);
        assert_eq!(report.rows[1].requested, None);
        assert_eq!(report.rows[1].actual, folds[0].train.len());
    }

    #[test]
    fn cross_class_matrix_shape_and_split() {
        let bundle = small_bundle(5);
        let ds = dataset(2, 4, 0);
        let ex = GrayDownsampleExtractor::new(4).unwrap();
        let report = cross_class_matrix(&bundle, &ds, &quick_cfg(), &ex).unwrap();
        assert_eq!(report.classes, vec![0, 1]);
        assert_eq!(report.class_names, vec!["circle", "square"]);
        assert_eq!(report.matrix.len(), 2);
        assert_eq!(report.matrix[0].len(), 2);
        for row in &report.matrix {
            for v in row {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn domain_shift_requires_paired_ids() {
        let bundle = small_bundle(5);
        let d0 = dataset(2, 4, 0);
        let d1 = dataset(2, 4, 1);
        let folds0 = split_folds(&d0, 2).unwrap();
        let folds1 = split_folds(&d1, 2).unwrap();
        let ex = GrayDownsampleExtractor::new(4).unwrap();
        let report = domain_shift(
            &bundle,
            &folds0[0].train,
            &folds0[0].test,
            &folds1[0].test,
            &quick_cfg(),
            &ex,
        )
        .unwrap();
        assert!(report.in_domain.baseline_miou.is_finite());
        assert!(
            (report.in_domain.prompted_miou - report.shifted.prompted_miou
                - report.prompted_drop)
                .abs()
                < 1e-12
        );
        // Mismatched id sets are rejected.
        let err = domain_shift(
            &bundle,
            &folds0[0].train,
            &folds0[0].test,
            &folds1[0].train,
            &quick_cfg(),
            &ex,
        );
        assert!(err.is_err());
    }

    #[test]
    fn token_agreement_is_a_fraction() {
        let bundle = small_bundle(5);
        let ds = dataset(2, 4, 0);
        let folds = split_folds(&ds, 2).unwrap();
        let ex = GrayDownsampleExtractor::new(4).unwrap();
        let pairing = pair_with_train(&folds[0].train, &folds[0].test, &ex).unwrap();
        let frac =
            token_agreement(&bundle, None, &folds[0].train, &folds[0].test, &pairing).unwrap();
        assert!((0.0..=1.0).contains(&frac));
    }
}
