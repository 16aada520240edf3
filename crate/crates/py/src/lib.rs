//! Python bindings. Images cross the boundary as flat row-major RGB
//! float lists plus (height, width); reports cross as JSON strings.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use vicl_core::backbone::{
    load_backbone, pretrain_backbone, save_backbone, BackboneBundle, BackboneConfig,
    PretrainConfig,
};
use vicl_core::data::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetSpec, PairId};
use vicl_core::error::Error;
use vicl_core::eval::{self, run_fold_experiment, to_json_string};
use vicl_core::image::Image;
use vicl_core::prompt::{self, init_prompt, InitScheme, Placement, PromptParams};
use vicl_core::retriever::GrayDownsampleExtractor;
use vicl_core::trainer::{prepare_examples, train_prompt as train_prompt_rs, TrainConfig};

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_placement(s: &str) -> PyResult<Placement> {
    s.parse::<Placement>().map_err(PyValueError::new_err)
}

type FlatImage = (usize, usize, Vec<f64>);

fn to_image(h: usize, w: usize, flat: &[f64]) -> PyResult<Image> {
    if flat.len() != h * w * 3 {
        return Err(PyValueError::new_err(format!(
            "expected {}x{}x3 = {} values, got {}",
            h,
            w,
            h * w * 3,
            flat.len()
        )));
    }
    let arr = ndarray::Array3::from_shape_vec((h, w, 3), flat.to_vec())
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Image::new(arr).map_err(err)
}

fn from_image(img: &Image) -> FlatImage {
    let (h, w, _) = img.data().dim();
    let flat = img.data().iter().copied().collect();
    (h, w, flat)
}

/// Synthetic task dataset: binary shape segmentation or detection pairs.
#[pyclass]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Generate deterministically from a spec.
    #[staticmethod]
    #[pyo3(signature = (task="segmentation", classes=None, per_class=8, image_size=32, domain_id=0, seed=0))]
    fn generate(
        task: &str,
        classes: Option<Vec<String>>,
        per_class: usize,
        image_size: usize,
        domain_id: u32,
        seed: u64,
    ) -> PyResult<Self> {
        let class_list = match classes {
            None => vicl_core::data::ShapeClass::ALL.to_vec(),
            Some(names) => names
                .iter()
                .map(|n| n.parse().map_err(PyValueError::new_err))
                .collect::<PyResult<Vec<_>>>()?,
        };
        let spec = DatasetSpec {
            task_kind: task.parse().map_err(PyValueError::new_err)?,
            classes: class_list,
            per_class,
            image_size,
            domain_id,
            seed,
        };
        Ok(Self {
            inner: generate_dataset(&spec).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_dataset(dir.as_ref()).map_err(err)?,
        })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        std::fs::create_dir_all(dir).map_err(|e| PyValueError::new_err(e.to_string()))?;
        save_dataset(&self.inner, dir.as_ref()).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<u32> {
        self.inner.ids().into_iter().map(|p| p.0).collect()
    }

    fn classes(&self) -> Vec<u32> {
        self.inner.classes()
    }

    /// (input, label) for one pair, each as (h, w, flat RGB floats).
    fn pair(&self, id: u32) -> PyResult<(FlatImage, FlatImage)> {
        let p = self
            .inner
            .get(PairId(id))
            .ok_or_else(|| PyValueError::new_err(format!("no pair {id}")))?;
        Ok((from_image(&p.input), from_image(&p.label)))
    }
}

/// Frozen tokenizer + masked-token predictor pair.
#[pyclass]
struct PyBackbone {
    inner: BackboneBundle,
}

#[pymethods]
impl PyBackbone {
    /// Pretrain on a dataset's canvases, then freeze.
    #[staticmethod]
    #[pyo3(signature = (dataset, canvases=48, tok_epochs=8, pred_epochs=8, seed=0))]
    fn pretrain(
        dataset: &PyDataset,
        canvases: usize,
        tok_epochs: usize,
        pred_epochs: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = PretrainConfig {
            seed,
            canvases,
            tok_epochs,
            pred_epochs,
            ..PretrainConfig::default()
        };
        let (bundle, _) =
            pretrain_backbone(&BackboneConfig::default(), &cfg, &dataset.inner).map_err(err)?;
        Ok(Self { inner: bundle })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_backbone(path.as_ref()).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_backbone(path.as_ref(), &self.inner).map_err(err)
    }

    /// Hex digest over config and every frozen parameter.
    fn fingerprint(&self) -> String {
        self.inner.fingerprint().to_string()
    }

    fn canvas_size(&self) -> usize {
        self.inner.config().canvas_size
    }

    /// Token grid for a canvas, row-major.
    fn tokenize(&self, h: usize, w: usize, flat: Vec<f64>) -> PyResult<Vec<Vec<u32>>> {
        let img = to_image(h, w, &flat)?;
        let grid = self.inner.tokenize(img.data()).map_err(err)?;
        Ok(grid
            .rows()
            .into_iter()
            .map(|r| r.iter().copied().collect())
            .collect())
    }
}

/// Trainable border-pixel prompt.
#[pyclass]
struct PyPrompt {
    inner: PromptParams,
}

#[pymethods]
impl PyPrompt {
    #[staticmethod]
    #[pyo3(signature = (resolution=64, pad=8))]
    fn zeros(resolution: usize, pad: usize) -> PyResult<Self> {
        Ok(Self {
            inner: init_prompt(resolution, pad, InitScheme::Zeros, 0).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: prompt::load_prompt(path.as_ref()).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        prompt::save_prompt(&self.inner, path.as_ref()).map_err(err)
    }

    fn resolution(&self) -> usize {
        self.inner.resolution()
    }

    fn pad(&self) -> usize {
        self.inner.pad()
    }

    /// Trainable scalar count for this geometry.
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn fingerprint(&self) -> String {
        eval::hex(&self.inner.fingerprint())
    }

    /// Full parameter grid as (resolution, resolution, flat RGB floats).
    fn theta(&self) -> FlatImage {
        let t = self.inner.theta();
        let (h, w, _) = t.dim();
        (h, w, t.iter().copied().collect())
    }
}

/// Trainable scalar count for a border prompt of the given geometry.
#[pyfunction]
fn param_count(resolution: usize, pad: usize) -> usize {
    prompt::param_count(resolution, pad)
}

/// Bilinear resize with the pipeline's corner convention.
#[pyfunction]
fn resize(img: FlatImage, h: usize, w: usize) -> PyResult<FlatImage> {
    let src = to_image(img.0, img.1, &img.2)?;
    Ok(from_image(&src.resize_bilinear(h, w).map_err(err)?))
}

/// Two-class mean IoU between two binarized label images.
#[pyfunction]
#[pyo3(signature = (pred, gt, threshold=0.5))]
fn miou(pred: FlatImage, gt: FlatImage, threshold: f64) -> PyResult<f64> {
    let p = to_image(pred.0, pred.1, &pred.2)?;
    let g = to_image(gt.0, gt.1, &gt.2)?;
    eval::miou(
        &eval::binarize(&p, threshold),
        &eval::binarize(&g, threshold),
    )
    .map_err(err)
}

/// Predict the query's label image through the frozen backbone.
/// `prompt=None` is the plain retrieval baseline.
#[pyfunction]
#[pyo3(signature = (backbone, ctx_input, ctx_label, query, prompt=None, placement="I&L"))]
fn predict_query_label(
    backbone: &PyBackbone,
    ctx_input: FlatImage,
    ctx_label: FlatImage,
    query: FlatImage,
    prompt: Option<&PyPrompt>,
    placement: &str,
) -> PyResult<FlatImage> {
    let ci = to_image(ctx_input.0, ctx_input.1, &ctx_input.2)?;
    let cl = to_image(ctx_label.0, ctx_label.1, &ctx_label.2)?;
    let q = to_image(query.0, query.1, &query.2)?;
    let place = parse_placement(placement)?;
    let opt = prompt.map(|p| (&p.inner, place));
    let out = eval::predict_query_label(&backbone.inner, opt, &ci, &cl, &q).map_err(err)?;
    Ok(from_image(&out))
}

/// Train a border prompt on the dataset with leave-one-out retrieval.
/// Returns the prompt and the training history as a JSON string.
#[pyfunction]
#[pyo3(signature = (backbone, dataset, epochs=10, placement="I&L", resolution=64, pad=8, seed=0, batch=8))]
#[allow(clippy::too_many_arguments)]
fn train_prompt(
    py: Python<'_>,
    backbone: &PyBackbone,
    dataset: &PyDataset,
    epochs: usize,
    placement: &str,
    resolution: usize,
    pad: usize,
    seed: u64,
    batch: usize,
) -> PyResult<(PyPrompt, String)> {
    let cfg = TrainConfig {
        seed,
        epochs,
        batch,
        resolution,
        pad,
        placement: parse_placement(placement)?,
        ..TrainConfig::default()
    };
    let bundle = &backbone.inner;
    let data = &dataset.inner;
    let (prompt, history) = py
        .detach(|| {
            let extractor = GrayDownsampleExtractor::new(8)?;
            let examples = prepare_examples(bundle, data, &extractor)?;
            train_prompt_rs(bundle, &examples, &cfg)
        })
        .map_err(err)?;
    Ok((PyPrompt { inner: prompt }, to_json_string(&history).map_err(err)?))
}

/// Class-fold evaluation: trains one prompt per fold, scores baseline and
/// prompted arms. Returns the full report as a JSON string.
#[pyfunction]
#[pyo3(signature = (backbone, dataset, folds=2, epochs=10, placement="I&L", resolution=64, pad=8, seed=0))]
#[allow(clippy::too_many_arguments)]
fn eval_folds(
    py: Python<'_>,
    backbone: &PyBackbone,
    dataset: &PyDataset,
    folds: usize,
    epochs: usize,
    placement: &str,
    resolution: usize,
    pad: usize,
    seed: u64,
) -> PyResult<String> {
    let cfg = TrainConfig {
        seed,
        epochs,
        resolution,
        pad,
        placement: parse_placement(placement)?,
        ..TrainConfig::default()
    };
    let bundle = &backbone.inner;
    let data = &dataset.inner;
    let report = py
        .detach(|| {
            let extractor = GrayDownsampleExtractor::new(8)?;
            run_fold_experiment(bundle, data, folds, &cfg, &extractor)
        })
        .map_err(err)?;
    to_json_string(&report).map_err(err)
}

#[pymodule]
fn vicl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyBackbone>()?;
    m.add_class::<PyPrompt>()?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(resize, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(predict_query_label, m)?)?;
    m.add_function(wrap_pyfunction!(train_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(eval_folds, m)?)?;
    Ok(())
}
