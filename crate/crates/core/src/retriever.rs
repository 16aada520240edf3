//! Nearest-neighbor retrieval of in-context pairs. Features are l2
//! normalized, so the maximum-dot-product pick is cosine similarity and is
//! invariant to positive rescaling of the query image.

use crate::data::{Dataset, PairId};
use crate::error::{Error, Result};
use crate::image::Image;
use rayon::prelude::*;
use std::fs;
use std::io::Read;
use std::path::Path;

/// l2-normalized feature vector. `is_zero` marks degenerate inputs whose
/// raw features had zero norm; their values stay all-zero and they rank
/// after every normalized entry.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub is_zero: bool,
}

impl FeatureVector {
    /// Normalize raw features. Zero norm sets the degenerate flag.
    pub fn from_raw(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Self {
                values,
                is_zero: true,
            };
        }
        for v in values.iter_mut() {
            *v /= norm;
        }
        Self {
            values,
            is_zero: false,
        }
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.is_zero
    }
}

pub trait FeatureExtractor: Send + Sync {
    /// Identifies the feature space; indexes remember it and refuse
    /// queries from a different extractor.
    fn tag(&self) -> String;
    fn dim(&self) -> usize;
    fn extract(&self, img: &Image) -> FeatureVector;
}

/// Grayscale thumbnail features: bilinear downsample to `grid x grid`,
/// average the channels, l2 normalize.
#[derive(Debug, Clone)]
pub struct GrayDownsampleExtractor {
    grid: usize,
}

impl GrayDownsampleExtractor {
    pub fn new(grid: usize) -> Result<Self> {
        if grid == 0 {
            return Err(Error::invalid("extractor grid must be positive"));
        }
        Ok(Self { grid })
    }
}

impl Default for GrayDownsampleExtractor {
    fn default() -> Self {
        Self { grid: 16 }
    }
}

impl FeatureExtractor for GrayDownsampleExtractor {
    fn tag(&self) -> String {
        format!("gray{}", self.grid)
    }

    fn dim(&self) -> usize {
        self.grid * self.grid
    }

    fn extract(&self, img: &Image) -> FeatureVector {
        let small = img
            .resize_bilinear(self.grid, self.grid)
            .expect("grid validated positive");
        let data = small.data();
        let mut raw = Vec::with_capacity(self.grid * self.grid);
        for i in 0..self.grid {
            for j in 0..self.grid {
                raw.push((data[[i, j, 0]] + data[[i, j, 1]] + data[[i, j, 2]]) / 3.0);
            }
        }
        FeatureVector::from_raw(raw)
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    extractor_tag: String,
    dim: usize,
    /// Sorted by id; one entry per pool pair.
    entries: Vec<(PairId, FeatureVector)>,
}

impl RetrievalIndex {
    pub fn extractor_tag(&self) -> &str {
        &self.extractor_tag
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(PairId, FeatureVector)] {
        &self.entries
    }

    /// Highest-dot entry, excluding `exclude` if given. Zero-flagged
    /// entries lose to normalized ones; remaining ties break to the
    /// smallest id. Errors when exclusion empties the pool.
    pub fn retrieve_vec(&self, query: &FeatureVector, exclude: Option<PairId>) -> Result<PairId> {
        if query.values.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "query dim {} vs index dim {}",
                query.values.len(),
                self.dim
            )));
        }
        let mut best: Option<(bool, f64, PairId)> = None;
        for (id, vec) in &self.entries {
            if Some(*id) == exclude {
                continue;
            }
            let score = if query.is_zero || vec.is_zero {
                0.0
            } else {
                query.dot(vec)
            };
            let cand = (vec.is_zero, score, *id);
            let better = match &best {
                None => true,
                Some((bz, bs, bid)) => {
                    // Normalized beats flagged; then higher score; then lower id.
                    (cand.0, *bz) == (false, true)
                        || (cand.0 == *bz
                            && (score > *bs || (score == *bs && cand.2 < *bid)))
                }
            };
            if better {
                best = Some(cand);
            }
        }
        best.map(|(_, _, id)| id).ok_or(Error::EmptyPool)
    }
}

/// Extract features for every pool pair, in parallel, ordered by id.
pub fn build_index(dataset: &Dataset, extractor: &dyn FeatureExtractor) -> Result<RetrievalIndex> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot index an empty dataset"));
    }
    let entries: Vec<(PairId, FeatureVector)> = dataset
        .pairs()
        .par_iter()
        .map(|p| (p.id, extractor.extract(&p.input)))
        .collect();
    Ok(RetrievalIndex {
        extractor_tag: extractor.tag(),
        dim: extractor.dim(),
        entries,
    })
}

/// Extract features for `query` and pick the best pool entry.
pub fn retrieve(
    index: &RetrievalIndex,
    extractor: &dyn FeatureExtractor,
    query: &Image,
    exclude: Option<PairId>,
) -> Result<PairId> {
    if extractor.tag() != index.extractor_tag {
        return Err(Error::invalid(format!(
            "index built with extractor {:?}, queried with {:?}",
            index.extractor_tag,
            extractor.tag()
        )));
    }
    index.retrieve_vec(&extractor.extract(query), exclude)
}

const INDEX_MAGIC: &[u8; 4] = b"VIDX";
const INDEX_VERSION: u32 = 1;

/// Binary index file: magic, version, extractor tag, dim, then per entry
/// the pair id, degenerate flag, and f32 feature values.
pub fn save_index(index: &RetrievalIndex, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(INDEX_MAGIC);
    buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    let tag = index.extractor_tag.as_bytes();
    buf.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    buf.extend_from_slice(tag);
    buf.extend_from_slice(&(index.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(index.entries.len() as u32).to_le_bytes());
    for (id, vec) in &index.entries {
        buf.extend_from_slice(&id.0.to_le_bytes());
        buf.push(u8::from(vec.is_zero));
        for v in &vec.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_index(path: &Path) -> Result<RetrievalIndex> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader::new(&buf);
    let corrupt = |m: &str| Error::Corrupt(format!("{}: {m}", path.display()));
    if r.bytes(4).ok_or_else(|| corrupt("short magic"))? != INDEX_MAGIC {
        return Err(corrupt("bad magic"));
    }
    if r.u32().ok_or_else(|| corrupt("short version"))? != INDEX_VERSION {
        return Err(corrupt("unsupported version"));
    }
    let tag_len = r.u32().ok_or_else(|| corrupt("short tag length"))? as usize;
    let tag = String::from_utf8(
        r.bytes(tag_len).ok_or_else(|| corrupt("short tag"))?.to_vec(),
    )
    .map_err(|_| corrupt("tag not utf8"))?;
    let dim = r.u32().ok_or_else(|| corrupt("short dim"))? as usize;
    let count = r.u32().ok_or_else(|| corrupt("short count"))? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let id = PairId(r.u32().ok_or_else(|| corrupt("short entry id"))?);
        let flag = r.bytes(1).ok_or_else(|| corrupt("short entry flag"))?[0];
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(r.f32().ok_or_else(|| corrupt("short entry values"))? as f64);
        }
        entries.push((
            id,
            FeatureVector {
                values,
                is_zero: flag != 0,
            },
        ));
    }
    if !r.at_end() {
        return Err(corrupt("trailing bytes"));
    }
    for win in entries.windows(2) {
        if win[0].0 >= win[1].0 {
            return Err(corrupt("entry ids out of order"));
        }
    }
    Ok(RetrievalIndex {
        extractor_tag: tag,
        dim,
        entries,
    })
}

/// Cursor over a byte slice; `None` means truncation.
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

    fn f32(&mut self) -> Option<f32> {
        self.bytes(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec, ShapeClass, TaskKind};
    use ndarray::Array3;
    use rand::Rng;

    fn dataset() -> Dataset {
        generate_dataset(&DatasetSpec {
            task_kind: TaskKind::Segmentation,
            classes: vec![ShapeClass::Circle, ShapeClass::Cross, ShapeClass::Bar],
            per_class: 8,
            image_size: 24,
            domain_id: 0,
            seed: 314,
        })
        .unwrap()
    }

    fn random_image(seed: u64) -> Image {
        let mut rng = crate::seed::stream_rng(seed, "retr/test");
        Image::new(Array3::from_shape_fn((24, 24, 3), |_| rng.random::<f64>())).unwrap()
    }

    #[test]
    fn features_are_unit_norm_or_flagged() {
        let ex = GrayDownsampleExtractor::default();
        let v = ex.extract(&random_image(1));
        let norm: f64 = v.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(!v.is_zero);
        let z = ex.extract(&Image::zeros(24, 24));
        assert!(z.is_zero);
        assert!(z.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn halved_brightness_gives_identical_features() {
        let ex = GrayDownsampleExtractor::default();
        let img = random_image(2);
        let mut half = img.clone();
        half.data_mut().mapv_inplace(|v| v * 0.5);
        assert_eq!(ex.extract(&img), ex.extract(&half));
    }

    #[test]
    fn retrieve_matches_exhaustive_scan() {
        let ds = dataset();
        let ex = GrayDownsampleExtractor::default();
        let index = build_index(&ds, &ex).unwrap();
        for qseed in 0..40 {
            let q = ex.extract(&random_image(qseed));
            let got = index.retrieve_vec(&q, None).unwrap();
            // Oracle: scan all entries, track max dot, prefer lower id.
            let mut best = None;
            for (id, vec) in index.entries() {
                let s = if q.is_zero || vec.is_zero { 0.0 } else { q.dot(vec) };
                let key = (vec.is_zero, -s, id.0);
                if best.map_or(true, |b| key < b) {
                    best = Some(key);
                }
            }
            assert_eq!(got.0, best.unwrap().2);
        }
    }

    #[test]
    fn exclusion_never_returns_excluded_and_errors_on_empty() {
        let ds = dataset();
        let ex = GrayDownsampleExtractor::default();
        let index = build_index(&ds, &ex).unwrap();
        for p in ds.pairs() {
            let got = retrieve(&index, &ex, &p.input, Some(p.id)).unwrap();
            assert_ne!(got, p.id);
        }
        let one = ds
            .subset_by_ids(&[PairId(0)].into_iter().collect())
            .unwrap();
        let tiny = build_index(&one, &ex).unwrap();
        let q = ex.extract(&random_image(5));
        assert!(matches!(
            tiny.retrieve_vec(&q, Some(PairId(0))),
            Err(Error::EmptyPool)
        ));
    }

    #[test]
    fn self_query_without_exclusion_returns_self() {
        let ds = dataset();
        let ex = GrayDownsampleExtractor::default();
        let index = build_index(&ds, &ex).unwrap();
        for p in ds.pairs().iter().step_by(5) {
            assert_eq!(retrieve(&index, &ex, &p.input, None).unwrap(), p.id);
        }
    }

    #[test]
    fn extractor_tag_mismatch_is_rejected() {
        let ds = dataset();
        let index = build_index(&ds, &GrayDownsampleExtractor::default()).unwrap();
        let other = GrayDownsampleExtractor::new(8).unwrap();
        assert!(retrieve(&index, &other, &random_image(6), None).is_err());
    }

    #[test]
    fn index_file_roundtrip() {
        let ds = dataset();
        let ex = GrayDownsampleExtractor::default();
        let index = build_index(&ds, &ex).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.idx");
        save_index(&index, &path).unwrap();
        let back = load_index(&path).unwrap();
        assert_eq!(back.extractor_tag(), index.extractor_tag());
        assert_eq!(back.dim(), index.dim());
        assert_eq!(back.len(), index.len());
        // f32 quantization must not change any ranking decision here.
        for qseed in 0..10 {
            let q = ex.extract(&random_image(qseed));
            assert_eq!(
                index.retrieve_vec(&q, None).unwrap(),
                back.retrieve_vec(&q, None).unwrap()
            );
        }
        // Truncation is caught.
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_index(&path), Err(Error::Corrupt(_))));
    }
}
