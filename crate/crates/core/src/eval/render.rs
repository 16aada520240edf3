//! Qualitative grids: one column per test query, rows showing the
//! context pair, the query, its target, and both predictions.

use super::{predict_query_label, BINARIZE_THRESHOLD};
use crate::backbone::BackboneBundle;
use crate::data::{Dataset, PairId};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::prompt::{Placement, PromptParams};
use ndarray::{s, Array3};
use std::path::Path;

const MARGIN: usize = 2;
const ROWS: usize = 6;

fn paste(canvas: &mut Array3<f64>, img: &Image, top: usize, left: usize) {
    let (h, w, _) = img.data().dim();
    canvas
        .slice_mut(s![top..top + h, left..left + w, ..])
        .assign(img.data());
}

fn binarized_gray(img: &Image) -> Result<Image> {
    let mask = super::binarize(img, BINARIZE_THRESHOLD);
    let (h, w) = mask.dim();
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            if mask[[i, j]] {
                out.slice_mut(s![i, j, ..]).fill(1.0);
            }
        }
    }
    Image::new(out)
}

/// Render up to `max_cols` test queries side by side. Row order: context
/// input, context label, query input, target label, plain prediction,
/// prompted prediction. Predictions are shown binarized.
pub fn render_grid(
    bundle: &BackboneBundle,
    prompt: &PromptParams,
    placement: Placement,
    train: &Dataset,
    test: &Dataset,
    pairing: &[(PairId, PairId)],
    max_cols: usize,
) -> Result<Image> {
    let cols = pairing.len().min(max_cols);
    if cols == 0 {
        return Err(Error::invalid("nothing to render: empty pairing"));
    }
    let cell = bundle.config().cell();
    let height = ROWS * cell + (ROWS + 1) * MARGIN;
    let width = cols * cell + (cols + 1) * MARGIN;
    let mut sheet = Array3::<f64>::from_elem((height, width, 3), 0.25);
    for (col, &(query, ctx)) in pairing.iter().take(cols).enumerate() {
        let q = test.get(query).ok_or(Error::MissingRecord(query.0))?;
        let c = train.get(ctx).ok_or(Error::MissingRecord(ctx.0))?;
        let plain = predict_query_label(bundle, None, &c.input, &c.label, &q.input)?;
        let prompted = predict_query_label(
            bundle,
            Some((prompt, placement)),
            &c.input,
            &c.label,
            &q.input,
        )?;
        let tiles = [
            c.input.resize_bilinear(cell, cell)?,
            c.label.resize_bilinear(cell, cell)?,
            q.input.resize_bilinear(cell, cell)?,
            q.label.resize_bilinear(cell, cell)?,
            binarized_gray(&plain)?,
            binarized_gray(&prompted)?,
        ];
        let left = MARGIN + col * (cell + MARGIN);
        for (row, tile) in tiles.iter().enumerate() {
            let top = MARGIN + row * (cell + MARGIN);
            paste(&mut sheet, tile, top, left);
        }
    }
    Image::new(sheet)
}

/// Render and save in one step.
pub fn save_grid(
    bundle: &BackboneBundle,
    prompt: &PromptParams,
    placement: Placement,
    train: &Dataset,
    test: &Dataset,
    pairing: &[(PairId, PairId)],
    max_cols: usize,
    path: &Path,
) -> Result<()> {
    render_grid(bundle, prompt, placement, train, test, pairing, max_cols)?.save_png(path)
}
