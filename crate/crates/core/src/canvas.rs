//! Four-cell task canvases. The in-context input sits top-left, its label
//! top-right, the query bottom-left; the bottom-right cell is what the
//! backbone must fill in. Ground-truth canvases place the query's label
//! there instead.

use crate::error::{Error, Result};
use crate::image::Image;
use ndarray::{s, Array3};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellPos {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl CellPos {
    pub fn offsets(&self, cell: usize) -> (usize, usize) {
        match self {
            CellPos::TopLeft => (0, 0),
            CellPos::TopRight => (0, cell),
            CellPos::BottomLeft => (cell, 0),
            CellPos::BottomRight => (cell, cell),
        }
    }
}

/// `(2*cell, 2*cell, 3)` pixel grid of four square cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    data: Array3<f64>,
    cell: usize,
}

impl Canvas {
    pub fn from_data(data: Array3<f64>, cell: usize) -> Result<Self> {
        if cell == 0 || data.dim() != (2 * cell, 2 * cell, 3) {
            return Err(Error::ShapeMismatch(format!(
                "canvas data {:?} does not match cell size {cell}",
                data.dim()
            )));
        }
        Ok(Self { data, cell })
    }

    pub fn cell(&self) -> usize {
        self.cell
    }

    pub fn size(&self) -> usize {
        2 * self.cell
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn extract_cell(&self, pos: CellPos) -> Image {
        let (r0, c0) = pos.offsets(self.cell);
        let view = self
            .data
            .slice(s![r0..r0 + self.cell, c0..c0 + self.cell, ..]);
        Image::new(view.to_owned()).expect("cell of a valid canvas is a valid image")
    }

    pub fn as_image(&self) -> Image {
        Image::new(self.data.clone()).expect("canvas pixels are finite")
    }
}

fn place(data: &mut Array3<f64>, img: &Image, pos: CellPos, cell: usize) -> Result<()> {
    let resized = img.resize_bilinear(cell, cell)?;
    let (r0, c0) = pos.offsets(cell);
    data.slice_mut(s![r0..r0 + cell, c0..c0 + cell, ..])
        .assign(resized.data());
    Ok(())
}

/// Inference canvas: context pair and query, bottom-right filled with the
/// constant `fill` color. Inputs are resized to the cell size.
pub fn compose_canvas(
    ctx_input: &Image,
    ctx_label: &Image,
    query: &Image,
    fill: [f64; 3],
    cell: usize,
) -> Result<Canvas> {
    if cell == 0 {
        return Err(Error::invalid("cell size must be positive"));
    }
    if !fill.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("fill color must be finite"));
    }
    let mut data = Array3::zeros((2 * cell, 2 * cell, 3));
    place(&mut data, ctx_input, CellPos::TopLeft, cell)?;
    place(&mut data, ctx_label, CellPos::TopRight, cell)?;
    place(&mut data, query, CellPos::BottomLeft, cell)?;
    let (r0, c0) = CellPos::BottomRight.offsets(cell);
    for ch in 0..3 {
        data.slice_mut(s![r0..r0 + cell, c0..c0 + cell, ch])
            .fill(fill[ch]);
    }
    Canvas::from_data(data, cell)
}

/// Training target canvas: all four cells present, including the query's
/// true label bottom-right.
pub fn compose_gt_canvas(
    ctx_input: &Image,
    ctx_label: &Image,
    query: &Image,
    query_label: &Image,
    cell: usize,
) -> Result<Canvas> {
    if cell == 0 {
        return Err(Error::invalid("cell size must be positive"));
    }
    let mut data = Array3::zeros((2 * cell, 2 * cell, 3));
    place(&mut data, ctx_input, CellPos::TopLeft, cell)?;
    place(&mut data, ctx_label, CellPos::TopRight, cell)?;
    place(&mut data, query, CellPos::BottomLeft, cell)?;
    place(&mut data, query_label, CellPos::BottomRight, cell)?;
    Canvas::from_data(data, cell)
}

/// Token positions the backbone must predict: the bottom-right quadrant of
/// an even `rows x cols` token grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuadrantMaskSpec {
    rows: usize,
    cols: usize,
    positions: BTreeSet<(usize, usize)>,
}

impl QuadrantMaskSpec {
    pub fn bottom_right(rows: usize, cols: usize) -> Result<Self> {
        Ok(Self {
            rows,
            cols,
            positions: masked_token_positions(rows, cols)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn positions(&self) -> &BTreeSet<(usize, usize)> {
        &self.positions
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.positions.contains(&(r, c))
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Bottom-right quadrant of the token grid; requires even dimensions so
/// the quadrant boundary falls between tokens.
pub fn masked_token_positions(rows: usize, cols: usize) -> Result<BTreeSet<(usize, usize)>> {
    if rows == 0 || cols == 0 || rows % 2 != 0 || cols % 2 != 0 {
        return Err(Error::invalid(format!(
            "token grid must be even and non-empty, got {rows}x{cols}"
        )));
    }
    let mut out = BTreeSet::new();
    for r in rows / 2..rows {
        for c in cols / 2..cols {
            out.insert((r, c));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = crate::seed::stream_rng(seed, "canvas/test");
        Image::new(Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>())).unwrap()
    }

    #[test]
    fn cells_land_in_their_quadrants() {
        let x = random_image(32, 32, 1);
        let y = random_image(32, 32, 2);
        let q = random_image(32, 32, 3);
        let cv = compose_canvas(&x, &y, &q, [0.5, 0.5, 0.5], 32).unwrap();
        assert_eq!(cv.size(), 64);
        // Same-size placement is exact, so extraction returns the inputs.
        assert_eq!(cv.extract_cell(CellPos::TopLeft), x);
        assert_eq!(cv.extract_cell(CellPos::TopRight), y);
        assert_eq!(cv.extract_cell(CellPos::BottomLeft), q);
        let br = cv.extract_cell(CellPos::BottomRight);
        assert!(br.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn inputs_are_resized_to_cell() {
        let x = random_image(48, 20, 4);
        let y = random_image(16, 16, 5);
        let q = random_image(64, 64, 6);
        let cv = compose_canvas(&x, &y, &q, [0.0, 0.0, 0.0], 16).unwrap();
        assert_eq!(cv.size(), 32);
        assert_eq!(
            cv.extract_cell(CellPos::TopLeft),
            x.resize_bilinear(16, 16).unwrap()
        );
    }

    #[test]
    fn gt_canvas_differs_only_bottom_right() {
        let x = random_image(32, 32, 7);
        let y = random_image(32, 32, 8);
        let q = random_image(32, 32, 9);
        let ql = random_image(32, 32, 10);
        let fill = [0.5, 0.5, 0.5];
        let a = compose_canvas(&x, &y, &q, fill, 32).unwrap();
        let b = compose_gt_canvas(&x, &y, &q, &ql, 32).unwrap();
        for pos in [CellPos::TopLeft, CellPos::TopRight, CellPos::BottomLeft] {
            assert_eq!(a.extract_cell(pos), b.extract_cell(pos));
        }
        assert_eq!(b.extract_cell(CellPos::BottomRight), ql);
    }

    #[test]
    fn quadrant_mask_is_exactly_one_quarter() {
        let spec = QuadrantMaskSpec::bottom_right(16, 16).unwrap();
        assert_eq!(spec.len(), 64);
        for &(r, c) in spec.positions() {
            assert!(r >= 8 && c >= 8);
        }
        assert!(spec.contains(8, 8));
        assert!(!spec.contains(7, 8));
        assert!(masked_token_positions(15, 16).is_err());
        assert!(masked_token_positions(0, 0).is_err());
    }

    #[test]
    fn zero_cell_is_rejected() {
        let x = random_image(8, 8, 11);
        assert!(compose_canvas(&x, &x, &x, [0.5; 3], 0).is_err());
    }
}
