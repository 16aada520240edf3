use super::{read_array, write_array, FlatParams};
use ndarray::{Array1, Array2, Array3, Array4};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// 2D convolution over `(h, w, c)` tensors via im2col and one matmul.
/// Weights are `(kh, kw, cin, cout)`; padding is zero-filled.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
}

impl Conv2d {
    pub fn new(
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("std is a literal");
        Self {
            w: Array4::from_shape_fn((kernel, kernel, cin, cout), |_| normal.sample(rng)),
            b: Array1::zeros(cout),
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = (self.w.dim().0, self.w.dim().1);
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    /// Patch matrix `(ho*wo, kh*kw*cin)`; out-of-bounds taps read zero.
    pub fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (h, w, cin) = x.dim();
        let (kh, kw) = (self.w.dim().0, self.w.dim().1);
        assert_eq!(cin, self.w.dim().2, "input channels mismatch");
        let (ho, wo) = self.out_hw(h, w);
        let mut cols = Array2::zeros((ho * wo, kh * kw * cin));
        for oi in 0..ho {
            for oj in 0..wo {
                let row = oi * wo + oj;
                for ki in 0..kh {
                    let i = (oi * self.stride + ki) as isize - self.pad as isize;
                    if i < 0 || i >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let j = (oj * self.stride + kj) as isize - self.pad as isize;
                        if j < 0 || j >= w as isize {
                            continue;
                        }
                        let base = (ki * kw + kj) * cin;
                        for ci in 0..cin {
                            cols[[row, base + ci]] = x[[i as usize, j as usize, ci]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn wmat(&self) -> Array2<f64> {
        let (kh, kw, cin, cout) = self.w.dim();
        self.w
            .view()
            .into_shape_with_order((kh * kw * cin, cout))
            .expect("contiguous row-major weights")
            .to_owned()
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (h, w, _) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let mut flat = cols.dot(&self.wmat());
        flat += &self.b;
        flat.into_shape_with_order((ho, wo, self.w.dim().3))
            .expect("matmul output is contiguous")
    }

    /// Backward from `dy` `(ho, wo, cout)`. Recomputes the patch matrix
    /// from `x` rather than caching it.
    pub fn backward(&self, x: &Array3<f64>, dy: &Array3<f64>) -> (Array3<f64>, ConvGrads) {
        let (h, w, cin) = x.dim();
        let (kh, kw, _, cout) = self.w.dim();
        let (ho, wo) = self.out_hw(h, w);
        assert_eq!(dy.dim(), (ho, wo, cout), "dy shape mismatch");
        let cols = self.im2col(x);
        let dy_flat = dy
            .view()
            .into_shape_with_order((ho * wo, cout))
            .expect("contiguous dy");
        let dw_flat = cols.t().dot(&dy_flat);
        let dw = dw_flat
            .into_shape_with_order((kh, kw, cin, cout))
            .expect("weight shape");
        let db = dy_flat.sum_axis(ndarray::Axis(0));
        let dcols = dy_flat.dot(&self.wmat().t());
        // col2im: scatter patch gradients back, summing overlaps.
        let mut dx = Array3::zeros((h, w, cin));
        for oi in 0..ho {
            for oj in 0..wo {
                let row = oi * wo + oj;
                for ki in 0..kh {
                    let i = (oi * self.stride + ki) as isize - self.pad as isize;
                    if i < 0 || i >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let j = (oj * self.stride + kj) as isize - self.pad as isize;
                        if j < 0 || j >= w as isize {
                            continue;
                        }
                        let base = (ki * kw + kj) * cin;
                        for ci in 0..cin {
                            dx[[i as usize, j as usize, ci]] += dcols[[row, base + ci]];
                        }
                    }
                }
            }
        }
        (dx, ConvGrads { w: dw, b: db })
    }

    pub fn zeros_like_grads(&self) -> ConvGrads {
        ConvGrads {
            w: Array4::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }
}

impl ConvGrads {
    pub fn accumulate(&mut self, other: &ConvGrads) {
        self.w += &other.w;
        self.b += &other.b;
    }

    pub fn scale(&mut self, s: f64) {
        self.w *= s;
        self.b *= s;
    }
}

impl FlatParams for Conv2d {
    fn param_len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        write_array(&self.w, out);
        write_array(&self.b, out);
    }

    fn read_params(&mut self, data: &mut &[f64]) {
        read_array(&mut self.w, data);
        read_array(&mut self.b, data);
    }
}

impl FlatParams for ConvGrads {
    fn param_len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        write_array(&self.w, out);
        write_array(&self.b, out);
    }

    fn read_params(&mut self, data: &mut &[f64]) {
        read_array(&mut self.w, data);
        read_array(&mut self.b, data);
    }
}
