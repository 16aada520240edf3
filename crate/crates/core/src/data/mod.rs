//! Synthetic task datasets: input images paired with exact label masks,
//! grouped into classes, optionally rendered under different background
//! domains. Identical seeds reproduce identical datasets; domains sharing a
//! seed differ only in background pixels.

mod io;
mod shapes;

pub use io::{load_dataset, save_dataset};
pub use shapes::{ShapeClass, ShapeGeom};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::stream_rng;
use ndarray::Array3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PairId(pub u32);

impl fmt::Display for PairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Segmentation,
    Detection,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Segmentation => f.write_str("segmentation"),
            TaskKind::Detection => f.write_str("detection"),
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "segmentation" => Ok(TaskKind::Segmentation),
            "detection" => Ok(TaskKind::Detection),
            other => Err(format!("unknown task kind {other:?}")),
        }
    }
}

/// One input/label example. The label is white foreground on black.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPair {
    pub id: PairId,
    pub class_id: u32,
    pub input: Image,
    pub label: Image,
}

impl TaskPair {
    /// Fraction of label pixels that are foreground.
    pub fn area_fraction(&self) -> f64 {
        let mask = self.label.data();
        let (h, w, _) = mask.dim();
        let mut fg = 0usize;
        for i in 0..h {
            for j in 0..w {
                if mask[[i, j, 0]] > 0.5 {
                    fg += 1;
                }
            }
        }
        fg as f64 / (h * w) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task_kind: TaskKind,
    pub image_size: usize,
    pub domain_id: u32,
    pub seed: u64,
    /// class id -> class name, covering exactly the classes present.
    pub class_roster: BTreeMap<u32, String>,
    pairs: Vec<TaskPair>,
}

impl Dataset {
    /// Assemble from parts, enforcing: ids strictly increasing, every
    /// class id in the roster, uniform image dimensions.
    pub fn from_parts(
        task_kind: TaskKind,
        image_size: usize,
        domain_id: u32,
        seed: u64,
        class_roster: BTreeMap<u32, String>,
        pairs: Vec<TaskPair>,
    ) -> Result<Self> {
        for win in pairs.windows(2) {
            if win[0].id >= win[1].id {
                return Err(Error::invalid(format!(
                    "pair ids must be strictly increasing, saw {} then {}",
                    win[0].id, win[1].id
                )));
            }
        }
        for p in &pairs {
            if !class_roster.contains_key(&p.class_id) {
                return Err(Error::invalid(format!(
                    "pair {} has class {} not in roster",
                    p.id, p.class_id
                )));
            }
            for img in [&p.input, &p.label] {
                if img.h() != image_size || img.w() != image_size {
                    return Err(Error::ShapeMismatch(format!(
                        "pair {} image is {}x{}, dataset size is {image_size}",
                        p.id,
                        img.h(),
                        img.w()
                    )));
                }
            }
        }
        Ok(Self {
            task_kind,
            image_size,
            domain_id,
            seed,
            class_roster,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[TaskPair] {
        &self.pairs
    }

    pub fn get(&self, id: PairId) -> Option<&TaskPair> {
        self.pairs
            .binary_search_by_key(&id, |p| p.id)
            .ok()
            .map(|i| &self.pairs[i])
    }

    pub fn ids(&self) -> Vec<PairId> {
        self.pairs.iter().map(|p| p.id).collect()
    }

    pub fn classes(&self) -> Vec<u32> {
        self.class_roster.keys().copied().collect()
    }

    /// Pairs of each class, in id order.
    pub fn by_class(&self) -> BTreeMap<u32, Vec<&TaskPair>> {
        let mut map: BTreeMap<u32, Vec<&TaskPair>> = BTreeMap::new();
        for p in &self.pairs {
            map.entry(p.class_id).or_default().push(p);
        }
        map
    }

    pub fn subset_by_classes(&self, keep: &BTreeSet<u32>) -> Result<Self> {
        let roster: BTreeMap<u32, String> = self
            .class_roster
            .iter()
            .filter(|(id, _)| keep.contains(id))
            .map(|(id, name)| (*id, name.clone()))
            .collect();
        let pairs: Vec<TaskPair> = self
            .pairs
            .iter()
            .filter(|p| keep.contains(&p.class_id))
            .cloned()
            .collect();
        Self::from_parts(
            self.task_kind,
            self.image_size,
            self.domain_id,
            self.seed,
            roster,
            pairs,
        )
    }

    pub fn subset_by_ids(&self, keep: &BTreeSet<PairId>) -> Result<Self> {
        let pairs: Vec<TaskPair> = self
            .pairs
            .iter()
            .filter(|p| keep.contains(&p.id))
            .cloned()
            .collect();
        let classes: BTreeSet<u32> = pairs.iter().map(|p| p.class_id).collect();
        let roster: BTreeMap<u32, String> = self
            .class_roster
            .iter()
            .filter(|(id, _)| classes.contains(id))
            .map(|(id, name)| (*id, name.clone()))
            .collect();
        Self::from_parts(
            self.task_kind,
            self.image_size,
            self.domain_id,
            self.seed,
            roster,
            pairs,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task_kind: TaskKind,
    /// Roster order defines class ids: `classes[i]` gets id `i`.
    pub classes: Vec<ShapeClass>,
    pub per_class: usize,
    pub image_size: usize,
    pub domain_id: u32,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("dataset needs at least one class"));
        }
        let unique: BTreeSet<_> = self.classes.iter().collect();
        if unique.len() != self.classes.len() {
            return Err(Error::invalid("duplicate class in roster"));
        }
        if self.per_class == 0 {
            return Err(Error::invalid("per_class must be positive"));
        }
        if self.image_size < 16 {
            return Err(Error::invalid("image_size must be at least 16"));
        }
        if self.domain_id > 1 {
            return Err(Error::invalid("domain_id must be 0 or 1"));
        }
        Ok(())
    }
}

/// Render every pair of the spec. Shape geometry and foreground color come
/// from per-instance streams that ignore `domain_id`, so two domains under
/// one seed share labels and foreground pixels exactly and differ only in
/// background: domain 0 fills a flat random color, domain 1 per-pixel noise.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let size = spec.image_size;
    let jobs: Vec<(usize, usize)> = (0..spec.classes.len())
        .flat_map(|ci| (0..spec.per_class).map(move |k| (ci, k)))
        .collect();
    let mut pairs: Vec<TaskPair> = jobs
        .par_iter()
        .map(|&(ci, k)| {
            let id = PairId((ci * spec.per_class + k) as u32);
            let mut shape_rng = stream_rng(spec.seed, &format!("data/shape/{ci}/{k}"));
            let geom = spec.classes[ci].sample(&mut shape_rng, size);
            let fg = [
                shape_rng.random_range(150..=255u32) as f64 / 255.0,
                shape_rng.random_range(150..=255u32) as f64 / 255.0,
                shape_rng.random_range(150..=255u32) as f64 / 255.0,
            ];
            let mask = geom.rasterize(size);
            let mut bg_rng = stream_rng(
                spec.seed,
                &format!("data/bg/{}/{ci}/{k}", spec.domain_id),
            );
            let mut input = Array3::zeros((size, size, 3));
            match spec.domain_id {
                0 => {
                    let bg = [
                        bg_rng.random_range(0..=110u32) as f64 / 255.0,
                        bg_rng.random_range(0..=110u32) as f64 / 255.0,
                        bg_rng.random_range(0..=110u32) as f64 / 255.0,
                    ];
                    for i in 0..size {
                        for j in 0..size {
                            let px = if mask[i][j] { fg } else { bg };
                            for ch in 0..3 {
                                input[[i, j, ch]] = px[ch];
                            }
                        }
                    }
                }
                _ => {
                    for i in 0..size {
                        for j in 0..size {
                            for ch in 0..3 {
                                // Draw noise for every background slot in a
                                // fixed order; foreground overwrites after.
                                input[[i, j, ch]] =
                                    bg_rng.random_range(0..=110u32) as f64 / 255.0;
                            }
                            if mask[i][j] {
                                for ch in 0..3 {
                                    input[[i, j, ch]] = fg[ch];
                                }
                            }
                        }
                    }
                }
            }
            let label_mask = match spec.task_kind {
                TaskKind::Segmentation => mask,
                TaskKind::Detection => bbox_mask(&mask),
            };
            let mut label = Array3::zeros((size, size, 3));
            for i in 0..size {
                for j in 0..size {
                    if label_mask[i][j] {
                        for ch in 0..3 {
                            label[[i, j, ch]] = 1.0;
                        }
                    }
                }
            }
            TaskPair {
                id,
                class_id: ci as u32,
                input: Image::new(input).expect("finite by construction"),
                label: Image::new(label).expect("finite by construction"),
            }
        })
        .collect();
    pairs.sort_by_key(|p| p.id);
    let roster = spec
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (i as u32, c.name().to_string()))
        .collect();
    Dataset::from_parts(
        spec.task_kind,
        size,
        spec.domain_id,
        spec.seed,
        roster,
        pairs,
    )
}

/// Filled bounding box of the foreground pixel set.
fn bbox_mask(mask: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let size = mask.len();
    let mut r0 = size;
    let mut r1 = 0;
    let mut c0 = size;
    let mut c1 = 0;
    let mut any = false;
    for (i, row) in mask.iter().enumerate() {
        for (j, &b) in row.iter().enumerate() {
            if b {
                any = true;
                r0 = r0.min(i);
                r1 = r1.max(i);
                c0 = c0.min(j);
                c1 = c1.max(j);
            }
        }
    }
    let mut out = vec![vec![false; size]; size];
    if any {
        for row in out.iter_mut().take(r1 + 1).skip(r0) {
            for cell in row.iter_mut().take(c1 + 1).skip(c0) {
                *cell = true;
            }
        }
    }
    out
}

/// Train/test datasets for one fold.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train: Dataset,
    pub test: Dataset,
}

/// Class-level k-fold split: classes are ordered by id and cut into `k`
/// contiguous groups; fold `i` tests on group `i` and trains on the rest,
/// so test classes are never seen in the fold's training pool.
pub fn split_folds(dataset: &Dataset, k: usize) -> Result<Vec<Fold>> {
    let classes = dataset.classes();
    if k == 0 || k > classes.len() {
        return Err(Error::invalid(format!(
            "fold count {k} invalid for {} classes",
            classes.len()
        )));
    }
    let base = classes.len() / k;
    let extra = classes.len() % k;
    let mut folds = vec![];
    let mut start = 0usize;
    for i in 0..k {
        let take = base + usize::from(i < extra);
        let test_classes: BTreeSet<u32> = classes[start..start + take].iter().copied().collect();
        let train_classes: BTreeSet<u32> = classes
            .iter()
            .copied()
            .filter(|c| !test_classes.contains(c))
            .collect();
        folds.push(Fold {
            train: dataset.subset_by_classes(&train_classes)?,
            test: dataset.subset_by_classes(&test_classes)?,
        });
        start += take;
    }
    Ok(folds)
}

/// Keep pairs whose foreground area fraction is below `max_fraction`.
pub fn apply_area_filter(dataset: &Dataset, max_fraction: f64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&max_fraction) {
        return Err(Error::invalid("area filter fraction must be in [0, 1]"));
    }
    let keep: BTreeSet<PairId> = dataset
        .pairs()
        .iter()
        .filter(|p| p.area_fraction() < max_fraction)
        .map(|p| p.id)
        .collect();
    dataset.subset_by_ids(&keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            task_kind: TaskKind::Segmentation,
            classes: vec![
                ShapeClass::Circle,
                ShapeClass::Square,
                ShapeClass::Triangle,
                ShapeClass::Ring,
            ],
            per_class: 6,
            image_size: 32,
            domain_id: 0,
            seed: 42,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 43;
        let c = generate_dataset(&other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_are_binary_black_and_white() {
        let ds = generate_dataset(&small_spec()).unwrap();
        for p in ds.pairs() {
            for v in p.label.data().iter() {
                assert!(*v == 0.0 || *v == 1.0, "pair {} label value {v}", p.id);
            }
        }
    }

    #[test]
    fn domains_share_foreground_differ_in_background() {
        let mut spec = small_spec();
        let a = generate_dataset(&spec).unwrap();
        spec.domain_id = 1;
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        let mut bg_diff = 0usize;
        for (pa, pb) in a.pairs().iter().zip(b.pairs()) {
            assert_eq!(pa.label, pb.label);
            let mask = pa.label.data();
            for i in 0..spec.image_size {
                for j in 0..spec.image_size {
                    let fg = mask[[i, j, 0]] > 0.5;
                    for ch in 0..3 {
                        let (va, vb) = (pa.input.data()[[i, j, ch]], pb.input.data()[[i, j, ch]]);
                        if fg {
                            assert_eq!(va, vb);
                        } else if va != vb {
                            bg_diff += 1;
                        }
                    }
                }
            }
        }
        assert!(bg_diff > 0, "backgrounds never differed");
    }

    #[test]
    fn detection_labels_are_filled_bboxes_of_segmentation() {
        let mut spec = small_spec();
        let seg = generate_dataset(&spec).unwrap();
        spec.task_kind = TaskKind::Detection;
        let det = generate_dataset(&spec).unwrap();
        for (ps, pd) in seg.pairs().iter().zip(det.pairs()) {
            assert_eq!(ps.input, pd.input);
            // Brute-force the bbox from the segmentation label.
            let size = spec.image_size;
            let m = ps.label.data();
            let mut r = (size, 0usize, size, 0usize);
            for i in 0..size {
                for j in 0..size {
                    if m[[i, j, 0]] > 0.5 {
                        r = (r.0.min(i), r.1.max(i), r.2.min(j), r.3.max(j));
                    }
                }
            }
            for i in 0..size {
                for j in 0..size {
                    let inside = i >= r.0 && i <= r.1 && j >= r.2 && j <= r.3;
                    assert_eq!(pd.label.data()[[i, j, 0]] > 0.5, inside);
                }
            }
        }
    }

    #[test]
    fn folds_partition_classes_without_overlap() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let folds = split_folds(&ds, 2).unwrap();
        assert_eq!(folds.len(), 2);
        let mut test_union: BTreeSet<u32> = BTreeSet::new();
        for fold in &folds {
            let train: BTreeSet<u32> = fold.train.classes().into_iter().collect();
            let test: BTreeSet<u32> = fold.test.classes().into_iter().collect();
            assert!(train.is_disjoint(&test));
            assert_eq!(fold.train.len() + fold.test.len(), ds.len());
            for c in &test {
                assert!(test_union.insert(*c), "class {c} tested twice");
            }
        }
        assert_eq!(test_union, ds.classes().into_iter().collect());
        assert!(split_folds(&ds, 5).is_err());
        assert!(split_folds(&ds, 0).is_err());
    }

    #[test]
    fn area_filter_keeps_only_small_objects() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let thr = 0.12;
        let filtered = apply_area_filter(&ds, thr).unwrap();
        assert!(filtered.len() < ds.len(), "filter removed nothing");
        assert!(!filtered.is_empty());
        for p in filtered.pairs() {
            assert!(p.area_fraction() < thr);
        }
        let removed = ds.len() - filtered.len();
        let over: usize = ds
            .pairs()
            .iter()
            .filter(|p| p.area_fraction() >= thr)
            .count();
        assert_eq!(removed, over);
    }

    #[test]
    fn subset_restricts_roster() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let keep: BTreeSet<u32> = [1u32, 3].into_iter().collect();
        let sub = ds.subset_by_classes(&keep).unwrap();
        assert_eq!(sub.classes(), vec![1, 3]);
        assert_eq!(sub.len(), 12);
        assert_eq!(sub.class_roster[&1], "square");
    }

    #[test]
    fn spec_validation_rejects_bad_inputs() {
        let mut spec = small_spec();
        spec.per_class = 0;
        assert!(generate_dataset(&spec).is_err());
        let mut spec = small_spec();
        spec.classes.push(ShapeClass::Circle);
        assert!(generate_dataset(&spec).is_err());
        let mut spec = small_spec();
        spec.image_size = 8;
        assert!(generate_dataset(&spec).is_err());
    }
}
