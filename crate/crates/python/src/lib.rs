//! Python bindings. The module is importable as `mmave` once the shared
//! library is built with `--features extension-module` and copied next to
//! the calling script under the interpreter's extension suffix.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mmave::cli::{resolve_run_config, train_one, TrainArgs};
use mmave::dataio::{
    generate_synthetic, load_instances, tags_to_spans, ImageFeatures, Instance, Manifest, SynthConfig, Tag,
};
use mmave::evaluation::{awareness, evaluate, inspect_gates, upper_bound_eval, AwarenessConfig, UpperBound};
use mmave::model::{load_checkpoint, save_checkpoint, Model as CoreModel};

fn err(e: mmave::Error) -> PyErr {
    match e.exit_code() {
        2 | 3 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Converts any serialisable value to native Python objects through JSON.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Writes a synthetic dataset into `out` and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, n = 2000, seed = 0, labels = 8, ambiguity = 0.3, d_v = 32, k = 9))]
fn synthesize(
    out: PathBuf,
    n: usize,
    seed: u64,
    labels: usize,
    ambiguity: f64,
    d_v: usize,
    k: usize,
) -> PyResult<String> {
    let cfg = SynthConfig { labels, ambiguity, d_v, k, ..SynthConfig::default() };
    let data = generate_synthetic(n, seed, &cfg).map_err(err)?;
    data.write(&out).map_err(err)?;
    Ok(out.join("manifest.json").display().to_string())
}

/// Trains one model and writes its artifacts into `out`; returns the run summary.
#[pyfunction]
#[pyo3(signature = (manifest, out, seed = 0, epochs = None, lr = None, batch_size = None, kl_weight = None,
                    d = None, d_a = None, layers = None, ff = None, ablation = None, train_fraction = None))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    out: PathBuf,
    seed: u64,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    kl_weight: Option<f64>,
    d: Option<usize>,
    d_a: Option<usize>,
    layers: Option<usize>,
    ff: Option<usize>,
    ablation: Option<String>,
    train_fraction: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let args = TrainArgs {
        data: Some(manifest),
        out: Some(out.clone()),
        seed: Some(seed),
        epochs,
        lr,
        batch_size,
        lambda: kl_weight,
        d,
        d_a,
        layers,
        ff,
        ablation,
        train_fraction,
        ..TrainArgs::default()
    };
    let rc = resolve_run_config(&args).map_err(err)?;
    let summary = py.detach(|| train_one(&rc, seed, &out)).map_err(err)?;
    to_py(py, &summary)
}

/// Canonical value spans `(start, end, label)` of a BIO tag sequence such as `["B-Color", "I-Color", "O"]`.
#[pyfunction]
fn decode_tags(tags: Vec<String>) -> PyResult<Vec<(usize, usize, String)>> {
    let mut names: Vec<String> = Vec::new();
    let parsed = tags
        .iter()
        .map(|t| {
            if t == "O" {
                return Ok(Tag::Outside);
            }
            let (kind, label) =
                t.split_once('-').ok_or_else(|| PyValueError::new_err(format!("`{t}` is not a BIO tag")))?;
            let idx = names.iter().position(|n| n == label).unwrap_or_else(|| {
                names.push(label.to_string());
                names.len() - 1
            });
            match kind {
                "B" => Ok(Tag::Begin(idx)),
                "I" => Ok(Tag::Inside(idx)),
                _ => Err(PyValueError::new_err(format!("`{t}` is not a BIO tag"))),
            }
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(tags_to_spans(&parsed).into_iter().map(|s| (s.start, s.end, names[s.label].clone())).collect())
}

/// A trained checkpoint.
#[pyclass(module = "mmave")]
struct Model {
    inner: CoreModel<f32>,
}

impl Model {
    fn data(&self, path: &Path, split: &str) -> PyResult<Vec<Instance>> {
        let m = &self.inner;
        let spec =
            mmave::dataio::DatasetSpec { scheme: m.scheme.clone(), d_v: m.config.image.d_v, k: m.config.image.k };
        let file = if path.extension().is_some_and(|e| e == "json") {
            Manifest::load(path).and_then(|man| man.split_path(path, split)).map_err(err)?
        } else {
            path.to_path_buf()
        };
        load_instances(&file, &spec).map_err(err)
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model { inner: load_checkpoint(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.scheme.labels().to_vec()
    }

    #[getter]
    fn ablation<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.ablation)
    }

    /// Attributes with scores, value spans and tags for one product.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        tokens: Vec<String>,
        global_features: Vec<f32>,
        regions: Vec<Vec<f32>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let m = &self.inner;
        let image = ImageFeatures { global: global_features, regions };
        image.check(m.config.image.d_v, m.config.image.k).map_err(err)?;
        let n = tokens.len();
        let inst =
            Instance { id: String::new(), tokens, attributes: Default::default(), tags: vec![Tag::Outside; n], image };
        let p = m.predict(&inst).map_err(err)?;
        let out = PyDict::new(py);
        let attrs: Vec<(String, f64)> =
            p.attributes.iter().map(|&l| (m.scheme.label_name(l).to_string(), p.attr_probs[l])).collect();
        out.set_item("attributes", attrs)?;
        let values: Vec<(usize, usize, String, String)> = p
            .spans
            .iter()
            .map(|s| (s.start, s.end, m.scheme.label_name(s.label).to_string(), inst.tokens[s.start..s.end].join(" ")))
            .collect();
        out.set_item("values", values)?;
        out.set_item("tags", p.tags.iter().map(|&t| m.scheme.tag_name(t)).collect::<Vec<_>>())?;
        out.set_item("attribute_scores", p.attr_probs)?;
        Ok(out)
    }

    /// Metrics on a manifest split or a JSONL file; `upper_bound` selects a teacher-forced mode.
    #[pyo3(signature = (data, split = "test", upper_bound = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: PathBuf,
        split: &str,
        upper_bound: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let insts = self.data(&data, split)?;
        let report = match upper_bound {
            Some(mode) => upper_bound_eval(&self.inner, &insts, mode.parse::<UpperBound>().map_err(err)?),
            None => evaluate(&self.inner, &insts),
        }
        .map_err(err)?;
        to_py(py, &report)
    }

    #[pyo3(signature = (data, split = "test", permutations = 8, seed = 0, resamples = 4999))]
    fn awareness<'py>(
        &self,
        py: Python<'py>,
        data: PathBuf,
        split: &str,
        permutations: usize,
        seed: u64,
        resamples: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let insts = self.data(&data, split)?;
        let cfg = AwarenessConfig { permutations, seed, resamples, identity: false };
        let report = awareness(&self.inner, &insts, &cfg).map_err(err)?;
        to_py(py, &report)
    }

    /// Gate values for the instance `instance_id` of the given data.
    #[pyo3(signature = (data, instance_id, split = "test"))]
    fn gates<'py>(
        &self,
        py: Python<'py>,
        data: PathBuf,
        instance_id: &str,
        split: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let insts = self.data(&data, split)?;
        let inst = insts
            .iter()
            .find(|i| i.id == instance_id)
            .ok_or_else(|| PyValueError::new_err(format!("no instance `{instance_id}`")))?;
        to_py(py, &inspect_gates(&self.inner, inst).map_err(err)?)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(labels={}, d={}, d_a={}, visual={})",
            c.num_labels, c.text.d, c.d_a, self.inner.ablation.use_visual
        )
    }
}

#[pymodule]
#[pyo3(name = "mmave")]
pub fn mmave_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(decode_tags, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
