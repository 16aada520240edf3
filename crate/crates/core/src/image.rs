//! RGB images as `(h, w, 3)` arrays of `f64`. Pixel values loaded from disk
//! live in `[0, 1]`; prompt-enhanced images may leave that range and are
//! only clamped when written back to 8-bit form.

use crate::error::{Error, Result};
use ndarray::{Array3, Zip};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Wrap an `(h, w, 3)` array. Rejects other channel counts, empty
    /// spatial dims, and non-finite values.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image must be (h>0, w>0, 3), got ({h}, {w}, {c})"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Array3::zeros((h, w, 3)),
        }
    }

    /// Constant-color image.
    pub fn filled(h: usize, w: usize, rgb: [f64; 3]) -> Self {
        let mut data = Array3::zeros((h, w, 3));
        for ch in 0..3 {
            data.slice_mut(ndarray::s![.., .., ch]).fill(rgb[ch]);
        }
        Self { data }
    }

    pub fn h(&self) -> usize {
        self.data.dim().0
    }

    pub fn w(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn from_rgb8(bytes: &[u8], h: usize, w: usize) -> Result<Self> {
        if bytes.len() != h * w * 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} bytes for {h}x{w} rgb, got {}",
                h * w * 3,
                bytes.len()
            )));
        }
        let data = Array3::from_shape_vec(
            (h, w, 3),
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .expect("shape checked above");
        Ok(Self { data })
    }

    /// Quantize to 8-bit, clamping into `[0, 1]` first.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Png {
                path: path.display().to_string(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(img.as_raw(), h as usize, w as usize)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.w() as u32, self.h() as u32, self.to_rgb8())
            .expect("buffer length matches dims");
        buf.save(path).map_err(|e| Error::Png {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Bilinear resample to `(h, w)`. Resampling to the current size
    /// reproduces the input exactly.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::invalid("resize target must be non-empty"));
        }
        let rows = axis_weights(self.h(), h);
        let cols = axis_weights(self.w(), w);
        let src = &self.data;
        let mut mid = Array3::zeros((h, self.w(), 3));
        for (i, &(lo, hi, t)) in rows.iter().enumerate() {
            for j in 0..self.w() {
                for ch in 0..3 {
                    mid[[i, j, ch]] = (1.0 - t) * src[[lo, j, ch]] + t * src[[hi, j, ch]];
                }
            }
        }
        let mut out = Array3::zeros((h, w, 3));
        for i in 0..h {
            for (j, &(lo, hi, t)) in cols.iter().enumerate() {
                for ch in 0..3 {
                    out[[i, j, ch]] = (1.0 - t) * mid[[i, lo, ch]] + t * mid[[i, hi, ch]];
                }
            }
        }
        Ok(Self { data: out })
    }

    /// Mean absolute difference, for reconstruction metrics.
    pub fn mae(&self, other: &Image) -> Result<f64> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::ShapeMismatch(format!(
                "mae over {:?} vs {:?}",
                self.data.dim(),
                other.data.dim()
            )));
        }
        let mut sum = 0.0;
        Zip::from(&self.data).and(&other.data).for_each(|a, b| {
            sum += (a - b).abs();
        });
        Ok(sum / self.data.len() as f64)
    }
}

/// Transpose of the resampling in [`Image::resize_bilinear`]: given the
/// gradient of a scalar with respect to the resized `(h, w)` image, return
/// its gradient with respect to the `(src_h, src_w)` source. Uses the same
/// interpolation weights, so `<u, R v> == <R^T u, v>` up to rounding.
pub fn resize_bilinear_adjoint(
    grad_out: &Array3<f64>,
    src_h: usize,
    src_w: usize,
) -> Result<Array3<f64>> {
    let (h, w, c) = grad_out.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("gradient has {c} channels")));
    }
    let rows = axis_weights(src_h, h);
    let cols = axis_weights(src_w, w);
    let mut mid = Array3::<f64>::zeros((h, src_w, 3));
    for i in 0..h {
        for (j, &(lo, hi, t)) in cols.iter().enumerate() {
            for ch in 0..3 {
                let g = grad_out[[i, j, ch]];
                mid[[i, lo, ch]] += (1.0 - t) * g;
                mid[[i, hi, ch]] += t * g;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((src_h, src_w, 3));
    for (i, &(lo, hi, t)) in rows.iter().enumerate() {
        for j in 0..src_w {
            for ch in 0..3 {
                let g = mid[[i, j, ch]];
                out[[lo, j, ch]] += (1.0 - t) * g;
                out[[hi, j, ch]] += t * g;
            }
        }
    }
    Ok(out)
}

/// Per-destination-index source taps `(lo, hi, frac)` for half-pixel-center
/// bilinear sampling with edge clamping.
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let x = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = crate::seed::stream_rng(seed, "test/image");
        let data = Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>());
        Image::new(data).unwrap()
    }

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(Image::new(Array3::zeros((4, 4, 1))).is_err());
        assert!(Image::new(Array3::zeros((0, 4, 3))).is_err());
        let mut bad = Array3::zeros((2, 2, 3));
        bad[[0, 0, 0]] = f64::NAN;
        assert!(Image::new(bad).is_err());
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = random_image(17, 9, 3);
        let out = img.resize_bilinear(17, 9).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::filled(8, 8, [0.25, 0.5, 0.75]);
        let out = img.resize_bilinear(13, 5).unwrap();
        for v in out.data().slice(ndarray::s![.., .., 0]) {
            assert!((v - 0.25).abs() < 1e-12);
        }
        for v in out.data().slice(ndarray::s![.., .., 2]) {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_2x_averages_quads() {
        // With half-pixel centers, a 2x downsample lands exactly between
        // four source pixels, so each output is their plain average.
        let img = random_image(8, 8, 11);
        let out = img.resize_bilinear(4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for ch in 0..3 {
                    let d = img.data();
                    let avg = (d[[2 * i, 2 * j, ch]]
                        + d[[2 * i, 2 * j + 1, ch]]
                        + d[[2 * i + 1, 2 * j, ch]]
                        + d[[2 * i + 1, 2 * j + 1, ch]])
                        / 4.0;
                    assert!((out.data()[[i, j, ch]] - avg).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adjoint_matches_forward_inner_product() {
        // <u, R v> == <R^T u, v> for random u, v.
        let v = random_image(16, 16, 21);
        let fwd = v.resize_bilinear(7, 11).unwrap();
        let mut rng = crate::seed::stream_rng(22, "test/adjoint");
        let u = Array3::from_shape_fn((7, 11, 3), |_| rng.random::<f64>() - 0.5);
        let back = resize_bilinear_adjoint(&u, 16, 16).unwrap();
        let lhs: f64 = fwd
            .data()
            .iter()
            .zip(u.iter())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = back
            .iter()
            .zip(v.data().iter())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn png_roundtrip_preserves_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        // Pixels on the k/255 grid survive save + load bit-exactly.
        let mut data = Array3::zeros((5, 6, 3));
        let mut k = 0u32;
        for v in data.iter_mut() {
            *v = (k % 256) as f64 / 255.0;
            k += 7;
        }
        let img = Image::new(data).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn to_rgb8_clamps_out_of_range() {
        let mut img = Image::zeros(1, 2);
        img.data_mut()[[0, 0, 0]] = -0.4;
        img.data_mut()[[0, 1, 0]] = 1.7;
        let bytes = img.to_rgb8();
        assert_eq!(bytes[0], 0);
        assert_eq!(bytes[3], 255);
    }
}
