//! Evaluation: predictions, metrics, experiment drivers, reports.

pub mod experiments;
pub mod render;
pub mod reports;

pub use experiments::{
    ablate_placement, balanced_subset, baseline_fold_experiment, cross_class_matrix, domain_shift,
    pair_with_train, run_fold_experiment, score_split, sweep_dataset_size, sweep_padding,
    token_agreement, train_and_score, AblationReport, ArmScore, BaselineFoldRow, BaselineReport,
    CrossClassReport, DomainShiftReport, FoldOutcome, FoldReport, PadRow, PadSweepReport,
    PairScore, SizeRow, SizeSweepReport,
};
pub use render::{render_grid, save_grid};
pub use reports::{hex, save_json, save_text, to_json_string};

use crate::backbone::BackboneBundle;
use crate::canvas::CellPos;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::prompt::{apply_placement, Placement, PromptParams};
use ndarray::Array2;

/// Fill for the hidden quadrant; the predictor ignores it by construction.
pub const CANVAS_FILL: [f64; 3] = [0.5, 0.5, 0.5];

/// Threshold splitting label images into foreground and background.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// Channel-mean threshold of a label image.
pub fn binarize(img: &Image, threshold: f64) -> Array2<bool> {
    let d = img.data();
    Array2::from_shape_fn((img.h(), img.w()), |(i, j)| {
        (d[[i, j, 0]] + d[[i, j, 1]] + d[[i, j, 2]]) / 3.0 > threshold
    })
}

/// Two-class mean IoU over foreground and background. A class absent from
/// both masks scores 1 for that class.
pub fn miou(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch(format!(
            "miou over {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut inter = [0usize; 2];
    let mut union = [0usize; 2];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        for (cls, val) in [(0, false), (1, true)] {
            let pp = p == val;
            let gg = g == val;
            if pp && gg {
                inter[cls] += 1;
            }
            if pp || gg {
                union[cls] += 1;
            }
        }
    }
    let iou = |c: usize| {
        if union[c] == 0 {
            1.0
        } else {
            inter[c] as f64 / union[c] as f64
        }
    };
    Ok((iou(0) + iou(1)) / 2.0)
}

/// One in-context inference: optionally enhance cells with the prompt,
/// compose the canvas with the hidden quadrant, predict and decode it,
/// and return the predicted label cell.
pub fn predict_query_label(
    bundle: &BackboneBundle,
    prompt: Option<(&PromptParams, Placement)>,
    ctx_input: &Image,
    ctx_label: &Image,
    query: &Image,
) -> Result<Image> {
    let cell = bundle.config().cell();
    let (a, b, q) = match prompt {
        Some((p, placement)) => apply_placement(
            &ctx_input.resize_bilinear(cell, cell)?,
            &ctx_label.resize_bilinear(cell, cell)?,
            &query.resize_bilinear(cell, cell)?,
            p,
            placement,
        )?,
        None => (ctx_input.clone(), ctx_label.clone(), query.clone()),
    };
    let canvas = crate::canvas::compose_canvas(&a, &b, &q, CANVAS_FILL, cell)?;
    let tokens = bundle.predict_tokens(canvas.data())?;
    let decoded = bundle.decode(&tokens)?;
    let full = crate::canvas::Canvas::from_data(decoded, cell)?;
    Ok(full.extract_cell(CellPos::BottomRight))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn mask_from(rows: &[&[u8]]) -> Array2<bool> {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(i, j)| rows[i][j] != 0)
    }

    #[test]
    fn miou_counts_both_classes() {
        let pred = mask_from(&[&[1, 1], &[0, 0]]);
        let gt = mask_from(&[&[1, 0], &[0, 0]]);
        // fg: inter 1, union 2. bg: inter 2, union 3.
        let got = miou(&pred, &gt).unwrap();
        assert!((got - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn miou_perfect_and_empty_cases() {
        let a = mask_from(&[&[1, 0], &[0, 1]]);
        assert_eq!(miou(&a, &a).unwrap(), 1.0);
        let empty = mask_from(&[&[0, 0], &[0, 0]]);
        // fg absent from both: fg IoU 1; bg IoU 1.
        assert_eq!(miou(&empty, &empty).unwrap(), 1.0);
        let full = mask_from(&[&[1, 1], &[1, 1]]);
        // No overlap in either class.
        assert_eq!(miou(&full, &empty).unwrap(), 0.0);
    }

    #[test]
    fn miou_rejects_misaligned() {
        let a = mask_from(&[&[1, 0]]);
        let b = mask_from(&[&[1], &[0]]);
        assert!(miou(&a, &b).is_err());
    }

    #[test]
    fn binarize_uses_channel_mean() {
        let mut data = Array3::zeros((1, 2, 3));
        data[[0, 0, 0]] = 1.0;
        data[[0, 0, 1]] = 1.0;
        // Mean 2/3 > 0.5 at (0,0); mean 0 at (0,1).
        let img = Image::new(data).unwrap();
        let m = binarize(&img, BINARIZE_THRESHOLD);
        assert!(m[[0, 0]]);
        assert!(!m[[0, 1]]);
    }
}
