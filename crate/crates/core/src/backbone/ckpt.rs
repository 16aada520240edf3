//! Backbone checkpoint file: architecture, all weights, and a digest that
//! must recompute identically on load. Layout, little endian throughout:
//! magic "VQIB", version u32, six config u32s, two u64 param counts, the
//! tokenizer then predictor parameters as f64, and a 32-byte sha-256 over
//! everything before it.

use super::{BackboneBundle, BackboneConfig, Predictor, Tokenizer};
use crate::error::{Error, Result};
use crate::nn::{params_from_vec, params_to_vec, FlatParams};
use crate::seed::stream_rng;
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VQIB";
const VERSION: u32 = 1;

pub fn save_backbone(path: &Path, bundle: &BackboneBundle) -> Result<()> {
    let cfg = bundle.config();
    let tok_params = params_to_vec(bundle.tokenizer());
    let pred_params = params_to_vec(bundle.predictor());
    let mut buf = Vec::with_capacity(
        4 + 4 + 6 * 4 + 2 * 8 + 8 * (tok_params.len() + pred_params.len()) + 32,
    );
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.canvas_size,
        cfg.vocab,
        cfg.d_code,
        cfg.d_model,
        cfg.heads,
        cfg.depth,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(tok_params.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(pred_params.len() as u64).to_le_bytes());
    for v in tok_params.iter().chain(pred_params.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_backbone(path: &Path) -> Result<BackboneBundle> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if buf.len() < 32 {
        return Err(Error::Corrupt("backbone file too short".into()));
    }
    let (body, stored_digest) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Corrupt("backbone digest mismatch".into()));
    }
    let mut r = Reader::new(body);
    if r.bytes(4) != Some(MAGIC.as_slice()) {
        return Err(Error::Corrupt("bad backbone magic".into()));
    }
    match r.u32() {
        Some(VERSION) => {}
        Some(v) => {
            return Err(Error::Corrupt(format!("unsupported backbone version {v}")));
        }
        None => return Err(Error::Corrupt("truncated backbone header".into())),
    }
    let mut fields = [0usize; 6];
    for f in fields.iter_mut() {
        *f = r
            .u32()
            .ok_or_else(|| Error::Corrupt("truncated backbone config".into()))?
            as usize;
    }
    let config = BackboneConfig {
        canvas_size: fields[0],
        vocab: fields[1],
        d_code: fields[2],
        d_model: fields[3],
        heads: fields[4],
        depth: fields[5],
    };
    config
        .validate()
        .map_err(|e| Error::Corrupt(format!("invalid stored config: {e}")))?;
    let tok_len = r
        .u64()
        .ok_or_else(|| Error::Corrupt("truncated backbone lengths".into()))? as usize;
    let pred_len = r
        .u64()
        .ok_or_else(|| Error::Corrupt("truncated backbone lengths".into()))? as usize;

    // Parameter reads overwrite every weight; the init rng never shows.
    let mut rng = stream_rng(0, "ckpt/load");
    let mut tok = Tokenizer::new(config.vocab, config.d_code, &mut rng);
    let mut pred = Predictor::new(
        config.token_grid(),
        config.patch(),
        config.d_model,
        config.heads,
        config.depth,
        config.vocab,
        &mut rng,
    );
    if tok.param_len() != tok_len || pred.param_len() != pred_len {
        return Err(Error::Corrupt(format!(
            "stored param counts ({tok_len}, {pred_len}) do not match architecture ({}, {})",
            tok.param_len(),
            pred.param_len()
        )));
    }
    let tok_params = r
        .f64_vec(tok_len)
        .ok_or_else(|| Error::Corrupt("truncated tokenizer weights".into()))?;
    let pred_params = r
        .f64_vec(pred_len)
        .ok_or_else(|| Error::Corrupt("truncated predictor weights".into()))?;
    if !r.at_end() {
        return Err(Error::Corrupt("trailing bytes in backbone file".into()));
    }
    if tok_params.iter().chain(pred_params.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Corrupt("non-finite backbone weight".into()));
    }
    params_from_vec(&mut tok, &tok_params)?;
    params_from_vec(&mut pred, &pred_params)?;
    BackboneBundle::from_parts(config, tok, pred)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.bytes(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.bytes(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8)?)?;
        Some(
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        )
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}
