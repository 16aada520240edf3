//! Prompt training: masked-token cross entropy through the frozen
//! backbone, backpropagated only into the border prompt.

mod schedule;
mod train;

pub use schedule::CosineWarmRestarts;
pub use train::{
    grad_check, prepare_examples, prompt_loss_and_grad, train_prompt, GradCheckReport,
    TrainConfig, TrainExample,
};

use crate::backbone::tokenizer::{LogitsGrid, TokenGrid};
use crate::canvas::QuadrantMaskSpec;
use crate::error::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Mean cross entropy between predicted token logits and target tokens,
/// restricted to masked grid positions.
pub fn compute_loss(
    logits: &LogitsGrid,
    targets: &TokenGrid,
    mask: &QuadrantMaskSpec,
) -> Result<f64> {
    Ok(loss_and_grad(logits, targets, mask, false)?.0)
}

/// Loss plus its gradient with respect to the logits: `(softmax - onehot)`
/// over masked positions, averaged, zero elsewhere.
pub fn loss_with_grad(
    logits: &LogitsGrid,
    targets: &TokenGrid,
    mask: &QuadrantMaskSpec,
) -> Result<(f64, Array3<f64>)> {
    let (loss, grad) = loss_and_grad(logits, targets, mask, true)?;
    Ok((loss, grad.expect("requested grad")))
}

fn loss_and_grad(
    logits: &LogitsGrid,
    targets: &TokenGrid,
    mask: &QuadrantMaskSpec,
    want_grad: bool,
) -> Result<(f64, Option<Array3<f64>>)> {
    let (rows, cols, vocab) = logits.dim();
    if targets.dim() != (rows, cols) {
        return Err(Error::ShapeMismatch(format!(
            "logits grid {rows}x{cols} vs targets {:?}",
            targets.dim()
        )));
    }
    if mask.rows() != rows || mask.cols() != cols {
        return Err(Error::ShapeMismatch(format!(
            "logits grid {rows}x{cols} vs mask {}x{}",
            mask.rows(),
            mask.cols()
        )));
    }
    if mask.is_empty() {
        return Err(Error::invalid("mask selects no positions"));
    }
    let n = mask.len() as f64;
    let mut loss = 0.0;
    let mut grad = want_grad.then(|| Array3::zeros((rows, cols, vocab)));
    for &(r, c) in mask.positions() {
        let t = targets[[r, c]];
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange { id: t, vocab });
        }
        let row = logits.slice(ndarray::s![r, c, ..]);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += (lse - row[t as usize]) / n;
        if let Some(g) = grad.as_mut() {
            for w in 0..vocab {
                let p = (row[w] - lse).exp();
                g[[r, c, w]] = (p - if w == t as usize { 1.0 } else { 0.0 }) / n;
            }
        }
    }
    Ok((loss, grad))
}

/// Per-epoch record of the training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
    /// Largest |theta| outside the border support after the epoch's
    /// updates; the optimizer never touches those entries, so this is
    /// exactly zero for a healthy run.
    pub off_support_max_abs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose prompt was kept, when validation selection is on.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_miou,off_support_max_abs\n");
        for e in &self.epochs {
            let val = e
                .val_miou
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{:.8},{:.8},{},{:.1}\n",
                e.epoch, e.lr, e.train_loss, val, e.off_support_max_abs
            ));
        }
        out
    }
}
