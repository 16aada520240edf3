//! Dataset directory format: `manifest.json` plus one PNG pair per example.
//! Pixel values are quantized to the 8-bit grid at generation time, so a
//! save/load round trip reproduces the in-memory dataset exactly.

use super::{Dataset, PairId, TaskKind, TaskPair};
use crate::error::{Error, Result};
use crate::image::Image;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    task_kind: TaskKind,
    image_size: usize,
    domain_id: u32,
    seed: u64,
    class_roster: BTreeMap<u32, String>,
    pairs: Vec<ManifestPair>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestPair {
    id: PairId,
    class_id: u32,
    input: String,
    label: String,
}

fn input_name(id: PairId) -> String {
    format!("{:06}_input.png", id.0)
}

fn label_name(id: PairId) -> String {
    format!("{:06}_label.png", id.0)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        task_kind: dataset.task_kind,
        image_size: dataset.image_size,
        domain_id: dataset.domain_id,
        seed: dataset.seed,
        class_roster: dataset.class_roster.clone(),
        pairs: dataset
            .pairs()
            .iter()
            .map(|p| ManifestPair {
                id: p.id,
                class_id: p.class_id,
                input: input_name(p.id),
                label: label_name(p.id),
            })
            .collect(),
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text + "\n")
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    for p in dataset.pairs() {
        p.input.save_png(&dir.join(input_name(p.id)))?;
        p.label.save_png(&dir.join(label_name(p.id)))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Corrupt(format!(
            "manifest version {} unsupported (expected {MANIFEST_VERSION})",
            manifest.format_version
        )));
    }
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for mp in &manifest.pairs {
        let input = Image::load_png(&dir.join(&mp.input))?;
        let label = Image::load_png(&dir.join(&mp.label))?;
        pairs.push(TaskPair {
            id: mp.id,
            class_id: mp.class_id,
            input,
            label,
        });
    }
    Dataset::from_parts(
        manifest.task_kind,
        manifest.image_size,
        manifest.domain_id,
        manifest.seed,
        manifest.class_roster,
        pairs,
    )
}
