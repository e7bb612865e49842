//! Python bindings for the `gkvlp` crate.

use std::path::PathBuf;

use gkvlp::autograd::Graph;
use gkvlp::data_model::{SampleRecord, Split};
use gkvlp::downstream::metrics::text_metrics;
use gkvlp::downstream::{auroc, average_precision, Task};
use gkvlp::gk_fusion::ecls_loss_value;
use gkvlp::harness::{finetune_task, pretrain, Checkpoint, RunConfig};
use gkvlp::model::GkModel;
use gkvlp::objectives::{itc_loss_value, itm_loss_value, lm_loss_value};
use gkvlp::tensor::Matrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: gkvlp::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let n = rows.len();
    Ok(Matrix::from_vec(n, cols, rows.into_iter().flatten().collect()))
}

/// Run configuration addressed by dotted keys, e.g. `train.epochs`.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (overrides = None))]
    fn new(overrides: Option<Vec<(String, String)>>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        for (k, v) in overrides.unwrap_or_default() {
            inner.set(&k, &v).map_err(err)?;
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| Self { inner }).map_err(err)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn entries(&self) -> Vec<(String, String)> {
        self.inner.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn __str__(&self) -> String {
        self.inner.to_text()
    }
}

#[pyclass(name = "Sample", from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: SampleRecord,
}

#[pymethods]
impl PySample {
    #[getter]
    fn sample_id(&self) -> &str {
        &self.inner.sample_id
    }

    #[getter]
    fn report(&self) -> &str {
        &self.inner.report
    }

    #[getter]
    fn prompt(&self) -> String {
        self.inner.prompt.text()
    }

    #[getter]
    fn split(&self) -> &'static str {
        self.inner.split.as_str()
    }

    #[getter]
    fn labels(&self) -> Vec<bool> {
        self.inner.label_vector.to_vec()
    }

    /// `(height, width, row-major pixels in [0, 1])`.
    #[getter]
    fn image(&self) -> (usize, usize, Vec<f64>) {
        let r = &self.inner.image;
        (r.height, r.width, r.pixels.clone())
    }

    #[getter]
    fn region_boxes(&self) -> Vec<(u32, u32, u32, u32)> {
        self.inner.region_boxes.iter().map(|b| (b.x0, b.y0, b.x1, b.y1)).collect()
    }

    #[getter]
    fn qa_pairs(&self) -> Vec<(String, usize)> {
        self.inner.qa_pairs.iter().map(|q| (q.question.clone(), q.answer)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Sample({:?}, split={})", self.inner.sample_id, self.inner.split.as_str())
    }
}

fn records(samples: &[PySample]) -> Vec<SampleRecord> {
    samples.iter().map(|s| s.inner.clone()).collect()
}

/// A pre-trained model together with the configuration it was built from.
#[pyclass(name = "Model")]
struct PyModel {
    checkpoint: Checkpoint,
    model: GkModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let checkpoint = Checkpoint::load(&path).map_err(err)?;
        let model = checkpoint.to_model().map_err(err)?;
        Ok(Self { checkpoint, model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.checkpoint.save(&path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.checkpoint.config.clone(),
        }
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.store.params().iter().map(|p| p.value.len()).sum()
    }

    /// Greedy report for one sample.
    #[pyo3(signature = (sample, max_len = 64))]
    fn generate(&self, sample: &PySample, max_len: usize) -> PyResult<String> {
        let r = &sample.inner;
        let mut g = Graph::with_params(&self.model.store);
        g.set_frozen(true);
        let enc = self.model.image.forward(&mut g, &r.image).map_err(err)?;
        let mem = self
            .model
            .downstream_memory(&mut g, r, enc.v, self.checkpoint.config.ablation.grounding)
            .map_err(err)?;
        let memory = g.value(mem).clone();
        let ids = self.model.backbone.greedy_decode(&self.model.store, &memory, max_len).map_err(err)?;
        Ok(self.model.tokenizer.decode(&ids))
    }

    /// `(mass, uniform baseline, ratio)` of region-to-sentence attention.
    fn grounding(&self, samples: Vec<PySample>) -> PyResult<(f64, f64, f64)> {
        let g = self.model.grounding_mass(&records(&samples)).map_err(err)?;
        Ok((g.mass, g.baseline, g.ratio))
    }

    /// Fine-tunes a copy on `train` and returns test metrics for `task`
    /// (`cls`, `loc`, `gen` or `vqa`).
    #[pyo3(signature = (task, train, test, config = None))]
    fn finetune<'py>(
        &self,
        py: Python<'py>,
        task: &str,
        train: Vec<PySample>,
        test: Vec<PySample>,
        config: Option<PyConfig>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let task: Task = task.parse().map_err(err)?;
        let cfg = config.map_or_else(|| self.checkpoint.config.clone(), |c| c.inner);
        let grounding = self.checkpoint.config.ablation.grounding;
        let report = finetune_task(&cfg, &self.model, grounding, task, None, &records(&train), &records(&test)).map_err(err)?;
        let out = PyDict::new(py);
        for (k, v) in report.entries() {
            out.set_item(k, v)?;
        }
        Ok(out)
    }
}

/// Generates the synthetic dataset described by `config`.
#[pyfunction]
fn generate_dataset(config: &PyConfig) -> PyResult<Vec<PySample>> {
    let data = gkvlp::synthgen::generate_dataset(&config.inner.synth).map_err(err)?;
    Ok(data.into_iter().map(|inner| PySample { inner }).collect())
}

/// Keeps the samples of one split (`pretrain`, `train`, `val` or `test`).
#[pyfunction]
fn select_split(samples: Vec<PySample>, split: &str) -> PyResult<Vec<PySample>> {
    let split: Split = split.parse().map_err(err)?;
    Ok(samples.into_iter().filter(|s| s.inner.split == split).collect())
}

/// Pre-trains on `samples`; returns the model and per-step losses.
#[pyfunction(name = "pretrain")]
fn py_pretrain(py: Python<'_>, config: &PyConfig, samples: Vec<PySample>) -> PyResult<(PyModel, Vec<Py<PyDict>>)> {
    let cfg = config.inner.clone();
    cfg.validate().map_err(err)?;
    let data = records(&samples);
    let out = py.detach(|| pretrain(&cfg, &data)).map_err(err)?;
    let mut log = Vec::with_capacity(out.log.len());
    for s in &out.log {
        let d = PyDict::new(py);
        d.set_item("step", s.step)?;
        d.set_item("epoch", s.epoch)?;
        d.set_item("lr", s.lr)?;
        d.set_item("itc", s.itc)?;
        d.set_item("itm", s.itm)?;
        d.set_item("lm", s.lm)?;
        d.set_item("ecls", s.ecls)?;
        d.set_item("total", s.total)?;
        d.set_item("itm_accuracy", s.itm_accuracy)?;
        log.push(d.unbind());
    }
    let checkpoint = out.checkpoint(&cfg);
    Ok((PyModel { checkpoint, model: out.model }, log))
}

#[pyfunction]
#[pyo3(signature = (z_image, z_text, temperature = 0.07))]
fn itc_loss(z_image: Vec<Vec<f64>>, z_text: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    itc_loss_value(&matrix(z_image)?, &matrix(z_text)?, temperature).map_err(err)
}

#[pyfunction]
fn itm_loss(logits: Vec<Vec<f64>>, labels: Vec<bool>) -> PyResult<f64> {
    itm_loss_value(&matrix(logits)?, &labels).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (logits, targets, mask = None))]
fn lm_loss(logits: Vec<Vec<f64>>, targets: Vec<usize>, mask: Option<Vec<bool>>) -> PyResult<f64> {
    let mask = mask.unwrap_or_else(|| vec![true; targets.len()]);
    lm_loss_value(&matrix(logits)?, &targets, &mask).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (v, z_pos, z_neg, labels, temperature = 0.2))]
fn ecls_loss(v: Vec<f64>, z_pos: Vec<Vec<f64>>, z_neg: Vec<Vec<f64>>, labels: Vec<bool>, temperature: f64) -> PyResult<f64> {
    ecls_loss_value(&matrix(vec![v])?, &matrix(z_pos)?, &matrix(z_neg)?, &labels, temperature).map_err(err)
}

/// Corpus BLEU-4 and mean ROUGE-L.
#[pyfunction(name = "text_metrics")]
fn py_text_metrics(candidates: Vec<String>, references: Vec<String>) -> PyResult<(f64, f64)> {
    let m = text_metrics(&candidates, &references).map_err(err)?;
    Ok((m.bleu4, m.rouge_l))
}

#[pyfunction(name = "auroc")]
fn py_auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    auroc(&scores, &labels).map_err(err)
}

#[pyfunction(name = "average_precision")]
fn py_average_precision(detections: Vec<(f64, bool)>, num_ground_truth: usize) -> f64 {
    average_precision(&detections, num_ground_truth)
}

#[pymodule]
fn gkvlp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(select_split, m)?)?;
    m.add_function(wrap_pyfunction!(py_pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(itc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(itm_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lm_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ecls_loss, m)?)?;
    m.add_function(wrap_pyfunction!(py_text_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(py_auroc, m)?)?;
    m.add_function(wrap_pyfunction!(py_average_precision, m)?)?;
    Ok(())
}
