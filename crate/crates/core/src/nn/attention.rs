use super::linear::{Linear, LinearGrads};
use super::ops::softmax_rows;
use super::FlatParams;
use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;

/// Full self-attention over `(n, d_model)` token rows, no masking.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax outputs per head, each `(n, n)`.
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttnGrads {
    pub wq: LinearGrads,
    pub wk: LinearGrads,
    pub wv: LinearGrads,
    pub wo: LinearGrads,
}

impl MultiHeadAttention {
    pub fn new(d_model: usize, heads: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "heads must divide d_model");
        Self {
            heads,
            d_model,
            wq: Linear::new(d_model, d_model, std, rng),
            wk: Linear::new(d_model, d_model, std, rng),
            wv: Linear::new(d_model, d_model, std, rng),
            wo: Linear::new(d_model, d_model, std, rng),
        }
    }

    fn scale(&self) -> f64 {
        1.0 / ((self.d_model / self.heads) as f64).sqrt()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttnCache) {
        let n = x.nrows();
        let dh = self.d_model / self.heads;
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let mut ctx = Array2::zeros((n, self.d_model));
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let scores = qh.dot(&kh.t()) * self.scale();
            let a = softmax_rows(&scores);
            let ch = a.dot(&vh);
            ctx.slice_mut(cols).assign(&ch);
            attn.push(a);
        }
        let y = self.wo.forward(&ctx);
        (y, AttnCache { q, k, v, attn, ctx })
    }

    pub fn backward(
        &self,
        x: &Array2<f64>,
        cache: &AttnCache,
        dy: &Array2<f64>,
    ) -> (Array2<f64>, AttnGrads) {
        let dh = self.d_model / self.heads;
        let (dctx, wo_grads) = self.wo.backward(&cache.ctx, dy);
        let mut dq = Array2::zeros(cache.q.dim());
        let mut dk = Array2::zeros(cache.k.dim());
        let mut dv = Array2::zeros(cache.v.dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &cache.attn[h];
            let dch = dctx.slice(cols);
            let vh = cache.v.slice(cols);
            let da = dch.dot(&vh.t());
            dv.slice_mut(cols).assign(&a.t().dot(&dch));
            // Softmax rows: ds = a * (da - rowdot(da, a)).
            let mut ds = da.clone();
            for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                let arow = a.row(i);
                let dot: f64 = row.iter().zip(arow.iter()).map(|(x, y)| x * y).sum();
                for (val, &aval) in row.iter_mut().zip(arow.iter()) {
                    *val = aval * (*val - dot);
                }
            }
            ds *= self.scale();
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            dq.slice_mut(cols).assign(&ds.dot(&kh));
            dk.slice_mut(cols).assign(&ds.t().dot(&qh));
        }
        let (dx_q, wq_grads) = self.wq.backward(x, &dq);
        let (dx_k, wk_grads) = self.wk.backward(x, &dk);
        let (dx_v, wv_grads) = self.wv.backward(x, &dv);
        let dx = dx_q + dx_k + dx_v;
        (
            dx,
            AttnGrads {
                wq: wq_grads,
                wk: wk_grads,
                wv: wv_grads,
                wo: wo_grads,
            },
        )
    }

    pub fn zeros_like_grads(&self) -> AttnGrads {
        AttnGrads {
            wq: self.wq.zeros_like_grads(),
            wk: self.wk.zeros_like_grads(),
            wv: self.wv.zeros_like_grads(),
            wo: self.wo.zeros_like_grads(),
        }
    }
}

impl AttnGrads {
    pub fn accumulate(&mut self, other: &AttnGrads) {
        self.wq.accumulate(&other.wq);
        self.wk.accumulate(&other.wk);
        self.wv.accumulate(&other.wv);
        self.wo.accumulate(&other.wo);
    }

    pub fn scale(&mut self, s: f64) {
        self.wq.scale(s);
        self.wk.scale(s);
        self.wv.scale(s);
        self.wo.scale(s);
    }
}

impl FlatParams for MultiHeadAttention {
    fn param_len(&self) -> usize {
        self.wq.param_len() + self.wk.param_len() + self.wv.param_len() + self.wo.param_len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        self.wq.write_params(out);
        self.wk.write_params(out);
        self.wv.write_params(out);
        self.wo.write_params(out);
    }

    fn read_params(&mut self, data: &mut &[f64]) {
        self.wq.read_params(data);
        self.wk.read_params(data);
        self.wv.read_params(data);
        self.wo.read_params(data);
    }
}

impl FlatParams for AttnGrads {
    fn param_len(&self) -> usize {
        self.wq.param_len() + self.wk.param_len() + self.wv.param_len() + self.wo.param_len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        self.wq.write_params(out);
        self.wk.write_params(out);
        self.wv.write_params(out);
        self.wo.write_params(out);
    }

    fn read_params(&mut self, data: &mut &[f64]) {
        self.wq.read_params(data);
        self.wk.read_params(data);
        self.wv.read_params(data);
        self.wo.read_params(data);
    }
}
