//! Command-line entry points. Every subcommand reads an optional JSON
//! config file, applies flag overrides, echoes the fully resolved config
//! next to its outputs, and exits 0 only if everything was written.

use crate::backbone::{
    load_backbone, pretrain_backbone, save_backbone, BackboneBundle, BackboneConfig,
    PretrainConfig, TokenizerFeatureExtractor,
};
use crate::data::{
    apply_area_filter, generate_dataset, load_dataset, save_dataset, split_folds,
    DatasetSpec, PairId, ShapeClass, TaskKind,
};
use crate::error::{Error, Result};
use crate::eval::{
    ablate_placement, baseline_fold_experiment, cross_class_matrix, domain_shift, pair_with_train,
    run_fold_experiment, save_grid, save_json, save_text, sweep_dataset_size, sweep_padding,
    token_agreement, FoldReport,
};
use crate::prompt::{load_prompt, save_prompt, Placement};
use crate::retriever::{FeatureExtractor, GrayDownsampleExtractor};
use crate::trainer::{prepare_examples, train_prompt, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "vicl",
    version,
    about = "Visual in-context learning with trainable border prompts"
)]
struct Cli {
    /// Cap the worker thread pool (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Pretrain the tokenizer and predictor, then freeze them.
    Pretrain(PretrainArgs),
    /// Train a border prompt against a frozen backbone.
    TrainPrompt(TrainPromptArgs),
    /// Fold evaluation, domain shift, or token agreement.
    Eval(EvalArgs),
    /// Placement, padding, dataset-size, or cross-class ablations.
    Ablate(AblateArgs),
    /// Qualitative comparison grid from a fold report.
    Render(RenderArgs),
}

/// JSON config file schema. Sections are optional; each subcommand reads
/// the ones it needs and command-line flags override file values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    dataset: Option<DatasetSection>,
    backbone: Option<BackboneConfig>,
    pretrain: Option<PretrainConfig>,
    train: Option<TrainConfig>,
    eval: Option<EvalSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DatasetSection {
    task: TaskKind,
    /// Class names; empty means the full roster.
    classes: Vec<String>,
    per_class: usize,
    image_size: usize,
    domain_id: u32,
    seed: u64,
    /// Drop pairs whose label foreground covers at least this fraction.
    max_area_fraction: Option<f64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            task: TaskKind::Segmentation,
            classes: Vec::new(),
            per_class: 64,
            image_size: 32,
            domain_id: 0,
            seed: 0,
            max_area_fraction: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSection {
    folds: usize,
    /// Training-pool sizes; `null` means the whole pool.
    sizes: Vec<Option<usize>>,
    pads: Vec<usize>,
    grid_cols: usize,
    retriever: RetrieverKind,
    gray_grid: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            folds: 2,
            sizes: vec![Some(16), Some(32), Some(64), Some(128), Some(256), None],
            pads: vec![2, 4, 8, 12, 16, 24],
            grid_cols: 8,
            retriever: RetrieverKind::Gray,
            gray_grid: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum RetrieverKind {
    /// Downsampled grayscale features; training-free.
    Gray,
    /// Pooled codebook vectors from the frozen tokenizer.
    Tokenizer,
}

fn make_extractor(
    kind: RetrieverKind,
    gray_grid: usize,
    bundle: Option<&BackboneBundle>,
) -> Result<Box<dyn FeatureExtractor>> {
    match kind {
        RetrieverKind::Gray => Ok(Box::new(GrayDownsampleExtractor::new(gray_grid)?)),
        RetrieverKind::Tokenizer => {
            let bundle = bundle.ok_or_else(|| {
                Error::invalid("tokenizer retriever needs a backbone checkpoint")
            })?;
            Ok(Box::new(TokenizerFeatureExtractor::new(bundle)))
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed override for the subcommand's primary stage.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    task: Option<TaskKind>,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    domain: Option<u32>,
    #[arg(long)]
    max_area: Option<f64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    canvases: Option<usize>,
    #[arg(long)]
    tok_epochs: Option<usize>,
    #[arg(long)]
    pred_epochs: Option<usize>,
}

#[derive(Args)]
struct TrainPromptArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    /// Frozen backbone checkpoint.
    #[arg(long)]
    backbone: PathBuf,
    /// Output prompt checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Train on this fold's training split instead of the whole dataset.
    #[arg(long, requires = "folds")]
    fold: Option<usize>,
    /// Number of folds used with --fold.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    placement: Option<Placement>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    pad: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    retriever: Option<RetrieverKind>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalKind {
    Folds,
    DomainShift,
    TokenAgreement,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    /// Output directory for reports.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "folds")]
    experiment: EvalKind,
    /// Skip prompt training and score retrieval + backbone alone.
    #[arg(long)]
    baseline_only: bool,
    /// Shifted-domain dataset directory (domain-shift experiment).
    #[arg(long)]
    shifted_data: Option<PathBuf>,
    /// Existing prompt checkpoint (token-agreement experiment).
    #[arg(long)]
    prompt: Option<PathBuf>,
    /// Also write one comparison grid PNG per fold.
    #[arg(long)]
    render_grids: bool,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    placement: Option<Placement>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblationKind {
    Placement,
    Padding,
    Size,
    CrossClass,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Which ablation to run.
    #[arg(long, value_enum)]
    which: AblationKind,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    prompt: PathBuf,
    /// Fold report JSON produced by `eval`.
    #[arg(long)]
    report: PathBuf,
    /// Which fold of the report to render.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    cols: usize,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    if let Some(n) = cli.workers {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        if let Err(e) = pool {
            eprintln!("worker pool already initialized: {e}");
        }
    }
    let outcome = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::TrainPrompt(a) => cmd_train_prompt(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Render(a) => cmd_render(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Sibling path carrying the resolved config echo for a file output.
fn config_echo_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    out.with_file_name(format!("{stem}.config.json"))
}

fn resolve_classes(names: &[String]) -> Result<Vec<ShapeClass>> {
    if names.is_empty() {
        return Ok(ShapeClass::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| n.parse::<ShapeClass>().map_err(Error::invalid))
        .collect()
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    let mut section = cfg.dataset.unwrap_or_default();
    if let Some(task) = a.task {
        section.task = task;
    }
    if let Some(classes) = a.classes {
        section.classes = classes;
    }
    if let Some(n) = a.per_class {
        section.per_class = n;
    }
    if let Some(n) = a.image_size {
        section.image_size = n;
    }
    if let Some(d) = a.domain {
        section.domain_id = d;
    }
    if let Some(s) = a.common.seed {
        section.seed = s;
    }
    if let Some(f) = a.max_area {
        section.max_area_fraction = Some(f);
    }
    let spec = DatasetSpec {
        task_kind: section.task,
        classes: resolve_classes(&section.classes)?,
        per_class: section.per_class,
        image_size: section.image_size,
        domain_id: section.domain_id,
        seed: section.seed,
    };
    let mut dataset = generate_dataset(&spec)?;
    if let Some(max) = section.max_area_fraction {
        dataset = apply_area_filter(&dataset, max)?;
    }
    ensure_dir(&a.out)?;
    save_dataset(&dataset, &a.out)?;
    save_json(&a.out.join("spec.resolved.json"), &section)?;
    println!(
        "wrote {} pairs ({} classes) to {}",
        dataset.len(),
        dataset.classes().len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    let arch = cfg.backbone.unwrap_or_default();
    let mut pre = cfg.pretrain.unwrap_or_default();
    if let Some(s) = a.common.seed {
        pre.seed = s;
    }
    if let Some(n) = a.canvases {
        pre.canvases = n;
    }
    if let Some(n) = a.tok_epochs {
        pre.tok_epochs = n;
    }
    if let Some(n) = a.pred_epochs {
        pre.pred_epochs = n;
    }
    let dataset = load_dataset(&a.data)?;
    let (bundle, stats) = pretrain_backbone(&arch, &pre, &dataset)?;
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    save_backbone(&a.out, &bundle)?;
    let stem = config_echo_path(&a.out);
    save_json(
        &stem,
        &serde_json::json!({ "backbone": arch, "pretrain": pre }),
    )?;
    save_json(
        &a.out.with_extension("stats.json"),
        &serde_json::json!({
            "fingerprint": bundle.fingerprint(),
            "stats": stats,
        }),
    )?;
    println!(
        "backbone {} recon_mae={:.4} roundtrip={:.3} val_token_acc={:.3}",
        bundle.fingerprint(),
        stats.recon_mae_holdout,
        stats.token_roundtrip_acc,
        stats.val_token_acc
    );
    Ok(())
}

fn cmd_train_prompt(a: TrainPromptArgs) -> Result<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    let mut train_cfg = cfg.train.unwrap_or_default();
    let eval_cfg = cfg.eval.unwrap_or_default();
    if let Some(s) = a.common.seed {
        train_cfg.seed = s;
    }
    if let Some(n) = a.epochs {
        train_cfg.epochs = n;
    }
    if let Some(p) = a.placement {
        train_cfg.placement = p;
    }
    if let Some(r) = a.resolution {
        train_cfg.resolution = r;
    }
    if let Some(p) = a.pad {
        train_cfg.pad = p;
    }
    if let Some(d) = a.delta {
        train_cfg.delta = d;
    }
    let retriever = a.retriever.unwrap_or(eval_cfg.retriever);
    let bundle = load_backbone(&a.backbone)?;
    let dataset = load_dataset(&a.data)?;
    let pool = match a.fold {
        Some(i) => {
            let folds = split_folds(&dataset, a.folds.unwrap_or(eval_cfg.folds))?;
            folds
                .into_iter()
                .nth(i)
                .ok_or_else(|| Error::invalid(format!("fold {i} out of range")))?
                .train
        }
        None => dataset,
    };
    let extractor = make_extractor(retriever, eval_cfg.gray_grid, Some(&bundle))?;
    let examples = prepare_examples(&bundle, &pool, extractor.as_ref())?;
    let (prompt, history) = train_prompt(&bundle, &examples, &train_cfg)?;
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    save_prompt(&prompt, &a.out)?;
    save_text(&a.out.with_extension("history.csv"), &history.to_csv())?;
    save_json(
        &config_echo_path(&a.out),
        &serde_json::json!({ "train": train_cfg, "retriever": retriever }),
    )?;
    let last = history.epochs.last();
    println!(
        "prompt {} epochs={} final_loss={:.4} best_epoch={:?}",
        crate::eval::hex(&prompt.fingerprint()),
        history.epochs.len(),
        last.map(|e| e.train_loss).unwrap_or(f64::NAN),
        history.best_epoch
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    let mut train_cfg = cfg.train.unwrap_or_default();
    let mut eval_cfg = cfg.eval.unwrap_or_default();
    if let Some(s) = a.common.seed {
        train_cfg.seed = s;
    }
    if let Some(n) = a.epochs {
        train_cfg.epochs = n;
    }
    if let Some(p) = a.placement {
        train_cfg.placement = p;
    }
    if let Some(k) = a.folds {
        eval_cfg.folds = k;
    }
    let bundle = load_backbone(&a.backbone)?;
    let dataset = load_dataset(&a.data)?;
    let extractor = make_extractor(eval_cfg.retriever, eval_cfg.gray_grid, Some(&bundle))?;
    ensure_dir(&a.out)?;
    save_json(
        &a.out.join("config.resolved.json"),
        &serde_json::json!({ "train": train_cfg, "eval": eval_cfg }),
    )?;
    match a.experiment {
        EvalKind::Folds if a.baseline_only => {
            let report =
                baseline_fold_experiment(&bundle, &dataset, eval_cfg.folds, extractor.as_ref())?;
            save_json(&a.out.join("baseline_report.json"), &report)?;
            println!("baseline mean mIoU {:.4}", report.mean_baseline_miou);
        }
        EvalKind::Folds => {
            let report = run_fold_experiment(
                &bundle,
                &dataset,
                eval_cfg.folds,
                &train_cfg,
                extractor.as_ref(),
            )?;
            save_json(&a.out.join("fold_report.json"), &report)?;
            save_text(&a.out.join("pair_scores.csv"), &report.pair_scores_csv())?;
            save_text(&a.out.join("summary.csv"), &report.summary_csv())?;
            let folds = split_folds(&dataset, eval_cfg.folds)?;
            for (i, fold) in folds.iter().enumerate() {
                let prompt = report.folds[i]
                    .prompt
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("fold {i} carried no prompt")))?;
                save_prompt(prompt, &a.out.join(format!("fold{i}.prompt")))?;
                if a.render_grids {
                    let pairing = pair_with_train(&fold.train, &fold.test, extractor.as_ref())?;
                    save_grid(
                        &bundle,
                        prompt,
                        train_cfg.placement,
                        &fold.train,
                        &fold.test,
                        &pairing,
                        eval_cfg.grid_cols,
                        &a.out.join(format!("grid_fold{i}.png")),
                    )?;
                }
            }
            println!(
                "fold mean mIoU baseline {:.4} prompted {:.4}",
                report.mean_baseline_miou, report.mean_prompted_miou
            );
        }
        EvalKind::DomainShift => {
            let shifted_path = a.shifted_data.ok_or_else(|| {
                Error::invalid("domain-shift needs --shifted-data")
            })?;
            let shifted = load_dataset(&shifted_path)?;
            let src_folds = split_folds(&dataset, eval_cfg.folds)?;
            let shf_folds = split_folds(&shifted, eval_cfg.folds)?;
            let report = domain_shift(
                &bundle,
                &src_folds[0].train,
                &src_folds[0].test,
                &shf_folds[0].test,
                &train_cfg,
                extractor.as_ref(),
            )?;
            save_json(&a.out.join("domain_shift.json"), &report)?;
            save_text(&a.out.join("domain_shift.csv"), &report.to_csv())?;
            println!(
                "in-domain prompted {:.4}, shifted prompted {:.4} (drop {:.4})",
                report.in_domain.prompted_miou, report.shifted.prompted_miou, report.prompted_drop
            );
        }
        EvalKind::TokenAgreement => {
            let folds = split_folds(&dataset, eval_cfg.folds)?;
            let fold = &folds[0];
            let pairing = pair_with_train(&fold.train, &fold.test, extractor.as_ref())?;
            let baseline =
                token_agreement(&bundle, None, &fold.train, &fold.test, &pairing)?;
            let prompted = match &a.prompt {
                Some(path) => {
                    let prompt = load_prompt(path)?;
                    Some(token_agreement(
                        &bundle,
                        Some((&prompt, train_cfg.placement)),
                        &fold.train,
                        &fold.test,
                        &pairing,
                    )?)
                }
                None => None,
            };
            save_json(
                &a.out.join("token_agreement.json"),
                &serde_json::json!({
                    "backbone_fingerprint": bundle.fingerprint(),
                    "baseline_agreement": baseline,
                    "prompted_agreement": prompted,
                }),
            )?;
            println!(
                "token agreement baseline {:.4} prompted {:?}",
                baseline, prompted
            );
        }
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    let mut train_cfg = cfg.train.unwrap_or_default();
    let mut eval_cfg = cfg.eval.unwrap_or_default();
    if let Some(s) = a.common.seed {
        train_cfg.seed = s;
    }
    if let Some(n) = a.epochs {
        train_cfg.epochs = n;
    }
    if let Some(k) = a.folds {
        eval_cfg.folds = k;
    }
    let bundle = load_backbone(&a.backbone)?;
    let dataset = load_dataset(&a.data)?;
    let extractor = make_extractor(eval_cfg.retriever, eval_cfg.gray_grid, Some(&bundle))?;
    ensure_dir(&a.out)?;
    save_json(
        &a.out.join("config.resolved.json"),
        &serde_json::json!({ "train": train_cfg, "eval": eval_cfg }),
    )?;
    let folds = split_folds(&dataset, eval_cfg.folds)?;
    let (train, test) = (&folds[0].train, &folds[0].test);
    match a.which {
        AblationKind::Placement => {
            let report = ablate_placement(&bundle, train, test, &train_cfg, extractor.as_ref())?;
            save_json(&a.out.join("placement.json"), &report)?;
            save_text(&a.out.join("placement.csv"), &report.to_csv())?;
            println!("placement ablation: {} variants", report.rows.len());
        }
        AblationKind::Padding => {
            let report = sweep_padding(
                &bundle,
                train,
                test,
                &train_cfg,
                &eval_cfg.pads,
                extractor.as_ref(),
            )?;
            save_json(&a.out.join("padding.json"), &report)?;
            save_text(&a.out.join("padding.csv"), &report.to_csv())?;
            println!("padding sweep: {} widths", report.rows.len());
        }
        AblationKind::Size => {
            let report = sweep_dataset_size(
                &bundle,
                train,
                test,
                &train_cfg,
                &eval_cfg.sizes,
                extractor.as_ref(),
            )?;
            save_json(&a.out.join("size.json"), &report)?;
            save_text(&a.out.join("size.csv"), &report.to_csv())?;
            println!("size sweep: {} pool sizes", report.rows.len());
        }
        AblationKind::CrossClass => {
            let report = cross_class_matrix(&bundle, &dataset, &train_cfg, extractor.as_ref())?;
            save_json(&a.out.join("cross_class.json"), &report)?;
            save_text(&a.out.join("cross_class.csv"), &report.to_csv())?;
            println!(
                "cross-class matrix {}x{} diag {:.4} offdiag {:.4}",
                report.classes.len(),
                report.classes.len(),
                report.diag_mean,
                report.offdiag_mean
            );
        }
    }
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let bundle = load_backbone(&a.backbone)?;
    let dataset = load_dataset(&a.data)?;
    let prompt = load_prompt(&a.prompt)?;
    let text = std::fs::read_to_string(&a.report)
        .map_err(|e| Error::io(a.report.display().to_string(), e))?;
    let report: FoldReport = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("report {}: {e}", a.report.display())))?;
    let outcome = report
        .folds
        .get(a.fold)
        .ok_or_else(|| Error::invalid(format!("report has no fold {}", a.fold)))?;
    let test_classes: BTreeSet<u32> = outcome.test_classes.iter().copied().collect();
    let train_classes: BTreeSet<u32> = dataset
        .classes()
        .into_iter()
        .filter(|c| !test_classes.contains(c))
        .collect();
    let test = dataset.subset_by_classes(&test_classes)?;
    let train = dataset.subset_by_classes(&train_classes)?;
    let pairing: Vec<(PairId, PairId)> = outcome
        .pair_scores
        .iter()
        .map(|p| (PairId(p.query), PairId(p.ctx)))
        .collect();
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    save_grid(
        &bundle,
        &prompt,
        report.train_config.placement,
        &train,
        &test,
        &pairing,
        a.cols,
        &a.out,
    )?;
    save_json(
        &config_echo_path(&a.out),
        &serde_json::json!({
            "report": a.report.display().to_string(),
            "fold": a.fold,
            "cols": a.cols,
            "placement": report.train_config.placement,
        }),
    )?;
    println!("grid written to {}", a.out.display());
    Ok(())
}
