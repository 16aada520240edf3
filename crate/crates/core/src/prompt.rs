//! Trainable border prompts. A prompt is a full-resolution pixel tensor
//! whose support is restricted to a `pad`-wide frame; enhancing an image
//! adds the scaled prompt, leaving interior pixels untouched. Values are
//! deliberately unclamped so the optimizer sees a linear map.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::stream_rng;
use ndarray::{Array2, Array3};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

/// Which canvas cells receive the prompt: the in-context input (I), the
/// in-context label (L), and/or the query (Q).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub input: bool,
    pub label: bool,
    pub query: bool,
}

impl Placement {
    pub const I: Placement = Placement {
        input: true,
        label: false,
        query: false,
    };
    pub const L: Placement = Placement {
        input: false,
        label: true,
        query: false,
    };
    pub const Q: Placement = Placement {
        input: false,
        label: false,
        query: true,
    };
    pub const I_Q: Placement = Placement {
        input: true,
        label: false,
        query: true,
    };
    pub const I_L: Placement = Placement {
        input: true,
        label: true,
        query: false,
    };
    pub const L_Q: Placement = Placement {
        input: false,
        label: true,
        query: true,
    };
    pub const I_L_Q: Placement = Placement {
        input: true,
        label: true,
        query: true,
    };

    /// The ablation table, in report order.
    pub const ABLATION_SET: [Placement; 5] = [
        Placement::I,
        Placement::Q,
        Placement::I_Q,
        Placement::I_L,
        Placement::I_L_Q,
    ];

    pub fn is_empty(&self) -> bool {
        !(self.input || self.label || self.query)
    }

    pub fn label_str(&self) -> &'static str {
        match (self.input, self.label, self.query) {
            (true, false, false) => "I",
            (false, true, false) => "L",
            (false, false, true) => "Q",
            (true, true, false) => "I&L",
            (true, false, true) => "I&Q",
            (false, true, true) => "L&Q",
            (true, true, true) => "I,L&Q",
            (false, false, false) => "none",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label_str())
    }
}

impl FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let all = [
            Placement::I,
            Placement::L,
            Placement::Q,
            Placement::I_L,
            Placement::I_Q,
            Placement::L_Q,
            Placement::I_L_Q,
        ];
        all.iter()
            .find(|p| p.label_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown placement {s:?} (try I, L, Q, I&L, I&Q, L&Q, I,L&Q)"))
    }
}

impl Serialize for Placement {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label_str())
    }
}

impl<'de> Deserialize<'de> for Placement {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitScheme {
    Zeros,
    Gaussian { sigma: f64 },
}

/// `true` inside the `pad`-wide frame along the edges of an
/// `resolution x resolution` grid.
pub fn border_mask(resolution: usize, pad: usize) -> Array2<bool> {
    Array2::from_shape_fn((resolution, resolution), |(i, j)| {
        i < pad || j < pad || i >= resolution.saturating_sub(pad) || j >= resolution.saturating_sub(pad)
    })
}

/// Trainable scalar count: three channels over the frame area,
/// `3 * (R^2 - max(R - 2p, 0)^2)`.
pub fn param_count(resolution: usize, pad: usize) -> usize {
    let interior = resolution.saturating_sub(2 * pad);
    3 * (resolution * resolution - interior * interior)
}

/// Border positions in row-major order; the trainable support.
pub fn masked_indices(resolution: usize, pad: usize) -> Vec<(usize, usize)> {
    let mask = border_mask(resolution, pad);
    let mut out = Vec::new();
    for i in 0..resolution {
        for j in 0..resolution {
            if mask[[i, j]] {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    resolution: usize,
    pad: usize,
    delta: f64,
    /// `(R, R, 3)`, exactly zero outside the border support.
    theta: Array3<f64>,
}

impl PromptParams {
    pub fn new(resolution: usize, pad: usize, delta: f64, theta: Array3<f64>) -> Result<Self> {
        validate_geometry(resolution, pad)?;
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::invalid("delta must be finite and positive"));
        }
        if theta.dim() != (resolution, resolution, 3) {
            return Err(Error::ShapeMismatch(format!(
                "theta is {:?}, expected ({resolution}, {resolution}, 3)",
                theta.dim()
            )));
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("theta contains non-finite values"));
        }
        let mask = border_mask(resolution, pad);
        for i in 0..resolution {
            for j in 0..resolution {
                if !mask[[i, j]] {
                    for ch in 0..3 {
                        if theta[[i, j, ch]] != 0.0 {
                            return Err(Error::invalid(format!(
                                "theta[{i},{j},{ch}] = {} violates border support",
                                theta[[i, j, ch]]
                            )));
                        }
                    }
                }
            }
        }
        Ok(Self {
            resolution,
            pad,
            delta,
            theta,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn set_delta(&mut self, delta: f64) -> Result<()> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::invalid("delta must be finite and positive"));
        }
        self.delta = delta;
        Ok(())
    }

    pub fn theta(&self) -> &Array3<f64> {
        &self.theta
    }

    /// Trainer-side mutable access; callers must preserve the support
    /// constraint (checked again on save).
    pub fn theta_mut(&mut self) -> &mut Array3<f64> {
        &mut self.theta
    }

    pub fn param_count(&self) -> usize {
        param_count(self.resolution, self.pad)
    }

    pub fn masked_indices(&self) -> Vec<(usize, usize)> {
        masked_indices(self.resolution, self.pad)
    }

    /// Largest absolute value outside the support; zero for a valid prompt.
    pub fn off_support_max_abs(&self) -> f64 {
        let mask = border_mask(self.resolution, self.pad);
        let mut worst: f64 = 0.0;
        for i in 0..self.resolution {
            for j in 0..self.resolution {
                if !mask[[i, j]] {
                    for ch in 0..3 {
                        worst = worst.max(self.theta[[i, j, ch]].abs());
                    }
                }
            }
        }
        worst
    }

    /// `x + delta * theta`, elementwise, no clamping. A prompt sized
    /// differently from the image is rendered onto it by bilinear resize,
    /// so enhancement always happens at the image's own resolution and a
    /// zero prompt is exactly the identity.
    pub fn enhance(&self, img: &Image) -> Result<Image> {
        let (h, w) = (img.h(), img.w());
        let mut out = img.data().clone();
        if h == self.resolution && w == self.resolution {
            out.scaled_add(self.delta, &self.theta);
        } else {
            let rendered = Image::new(self.theta.clone())?.resize_bilinear(h, w)?;
            out.scaled_add(self.delta, rendered.data());
        }
        Image::new(out)
    }

    /// Digest of the on-disk encoding; stable across processes.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.encode());
        h.finalize().into()
    }

    fn encode(&self) -> Vec<u8> {
        let indices = self.masked_indices();
        let mut buf = Vec::new();
        buf.extend_from_slice(PROMPT_MAGIC);
        buf.extend_from_slice(&PROMPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        buf.extend_from_slice(&(self.pad as u32).to_le_bytes());
        buf.extend_from_slice(&self.delta.to_le_bytes());
        buf.extend_from_slice(&(indices.len() as u64 * 3).to_le_bytes());
        for (i, j) in indices {
            for ch in 0..3 {
                buf.extend_from_slice(&(self.theta[[i, j, ch]] as f32).to_le_bytes());
            }
        }
        buf
    }
}

/// Fresh prompt with `delta = 1`. Gaussian init draws only the supported
/// entries, in row-major order, from the `prompt/init` stream.
pub fn init_prompt(
    resolution: usize,
    pad: usize,
    scheme: InitScheme,
    seed: u64,
) -> Result<PromptParams> {
    validate_geometry(resolution, pad)?;
    let mut theta = Array3::zeros((resolution, resolution, 3));
    if let InitScheme::Gaussian { sigma } = scheme {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid("gaussian sigma must be finite and positive"));
        }
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        let mut rng = stream_rng(seed, "prompt/init");
        for (i, j) in masked_indices(resolution, pad) {
            for ch in 0..3 {
                theta[[i, j, ch]] = normal.sample(&mut rng);
            }
        }
    }
    PromptParams::new(resolution, pad, 1.0, theta)
}

fn validate_geometry(resolution: usize, pad: usize) -> Result<()> {
    if resolution < 4 {
        return Err(Error::invalid("prompt resolution must be at least 4"));
    }
    if pad == 0 {
        return Err(Error::invalid("prompt pad must be positive"));
    }
    Ok(())
}

/// Enhance the retrieved pair and query according to the placement flags.
/// Returns `(input, label, query)` with untouched images passed through.
pub fn apply_placement(
    x: &Image,
    y: &Image,
    query: &Image,
    prompt: &PromptParams,
    placement: Placement,
) -> Result<(Image, Image, Image)> {
    if placement.is_empty() {
        return Err(Error::invalid("placement selects no cells"));
    }
    let pick = |on: bool, img: &Image| -> Result<Image> {
        if on {
            prompt.enhance(img)
        } else {
            Ok(img.clone())
        }
    };
    Ok((
        pick(placement.input, x)?,
        pick(placement.label, y)?,
        pick(placement.query, query)?,
    ))
}

const PROMPT_MAGIC: &[u8; 4] = b"VPRM";
const PROMPT_VERSION: u32 = 1;

/// Checkpoint layout: header, f32 values for the supported entries only
/// (row-major position, then channel), then a sha256 digest of everything
/// before it. Interior zeros are implied, so a loaded prompt always
/// satisfies the support constraint.
pub fn save_prompt(prompt: &PromptParams, path: &Path) -> Result<()> {
    let mut buf = prompt.encode();
    let digest: [u8; 32] = Sha256::digest(&buf).into();
    buf.extend_from_slice(&digest);
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_prompt(path: &Path) -> Result<PromptParams> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let corrupt = |m: &str| Error::Corrupt(format!("{}: {m}", path.display()));
    if buf.len() < 32 {
        return Err(corrupt("too short"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    let expect: [u8; 32] = Sha256::digest(body).into();
    if digest != expect {
        return Err(corrupt("digest mismatch"));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let out = body
            .get(*pos..*pos + n)
            .ok_or_else(|| corrupt("truncated body"))?;
        *pos += n;
        Ok(out)
    };
    if take(&mut pos, 4)? != PROMPT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != PROMPT_VERSION {
        return Err(corrupt("unsupported version"));
    }
    let resolution = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let pad = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let delta = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    validate_geometry(resolution, pad).map_err(|e| corrupt(&e.to_string()))?;
    let indices = masked_indices(resolution, pad);
    if count != indices.len() * 3 {
        return Err(corrupt("value count disagrees with geometry"));
    }
    let mut theta = Array3::zeros((resolution, resolution, 3));
    for (i, j) in indices {
        for ch in 0..3 {
            let v = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            theta[[i, j, ch]] = v as f64;
        }
    }
    if pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    PromptParams::new(resolution, pad, delta, theta)
}
