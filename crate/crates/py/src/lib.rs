//! Python bindings. Everything crosses the boundary as plain lists, dicts and
//! TOML strings; only the model is an opaque handle.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use reviewlens::cli::{self, Command};
use reviewlens::config::RunConfig;
use reviewlens::contrastive::{self, CandidateStrategy, ContrastConfig};
use reviewlens::model::{self, InterventionSpec, TokenSequence};
use reviewlens::numerics::{self, ProbVec};
use reviewlens::probe::{self, FusionReport, FusionRule, SweepOptions};
use reviewlens::tasks::{self, SyntheticSample};
use reviewlens::{checkpoint, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Usage(_) | Error::Format(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn prob(v: Vec<f64>) -> PyResult<ProbVec> {
    ProbVec::new(v).map_err(py_err)
}

#[pyfunction]
fn hellinger(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    numerics::hellinger(&prob(p)?, &prob(q)?).map_err(py_err)
}

#[pyfunction]
fn softmax(x: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(numerics::softmax(&x).map_err(py_err)?.into_inner())
}

#[pyfunction]
fn mask_indices_by_quantile(scores: Vec<f64>, rho: f64) -> PyResult<Vec<usize>> {
    numerics::mask_indices_by_quantile(&scores, rho).map_err(py_err)
}

#[pyfunction]
fn contrastive_attention(a_post: Vec<f64>, a_pre: Vec<f64>) -> PyResult<Vec<f64>> {
    contrastive::contrastive_attention(&prob(a_post)?, &prob(a_pre)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (accuracies, baseline, delta=0.5, min_plateau=None))]
fn identify_fusion_layers(
    accuracies: Vec<f64>,
    baseline: f64,
    delta: f64,
    min_plateau: Option<usize>,
) -> PyResult<Vec<usize>> {
    let plateau = min_plateau.unwrap_or_else(|| probe::default_min_plateau(accuracies.len()));
    probe::identify_fusion_layers(&accuracies, baseline, delta, plateau).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (accuracies, baseline, fusion_set, delta_rev=0.5))]
fn identify_review_layer(
    accuracies: Vec<f64>,
    baseline: f64,
    fusion_set: Vec<usize>,
    delta_rev: f64,
) -> PyResult<Option<usize>> {
    probe::identify_review_layer(&accuracies, baseline, &fusion_set, delta_rev).map_err(py_err)
}

/// Fusion report (as TOML) from a per-layer accuracy sweep.
#[pyfunction]
#[pyo3(signature = (accuracies, baseline, chance, delta=0.5, delta_rev=0.5, min_plateau=None))]
fn fusion_report(
    accuracies: Vec<f64>,
    baseline: f64,
    chance: f64,
    delta: f64,
    delta_rev: f64,
    min_plateau: Option<usize>,
) -> PyResult<String> {
    let rule = FusionRule {
        delta,
        delta_rev,
        min_plateau,
    };
    let r = FusionReport::from_accuracies(&accuracies, baseline, chance, &rule).map_err(py_err)?;
    Ok(r.to_toml())
}

#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_toml()
}

fn sample_dict<'py>(py: Python<'py>, s: &SyntheticSample) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("image_tokens", s.image_tokens.clone())?;
    d.set_item("query", s.query)?;
    d.set_item("answer", s.answer)?;
    d.set_item("relevance", s.relevance.clone())?;
    Ok(d)
}

fn sample_from(d: &Bound<'_, PyDict>) -> PyResult<SyntheticSample> {
    let get = |k: &str| {
        d.get_item(k)?
            .ok_or_else(|| PyValueError::new_err(format!("sample lacks `{k}`")))
    };
    Ok(SyntheticSample {
        image_tokens: get("image_tokens")?.extract()?,
        query: get("query")?.extract()?,
        answer: get("answer")?.extract()?,
        relevance: get("relevance")?.extract()?,
    })
}

type Splits<'py> = (Vec<Bound<'py, PyDict>>, Vec<Bound<'py, PyDict>>);

/// `(train, eval)` as lists of dicts for the `[task]` table of `config`.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn generate_dataset<'py>(
    py: Python<'py>,
    config: Option<&str>,
) -> PyResult<Splits<'py>> {
    let cfg = load_config(config)?;
    let (train, eval) = tasks::generate_dataset(&cfg.task, cfg.model.vocab_size).map_err(py_err)?;
    let conv = |v: &[SyntheticSample]| v.iter().map(|s| sample_dict(py, s)).collect::<PyResult<Vec<_>>>();
    Ok((conv(&train)?, conv(&eval)?))
}

fn load_config(text: Option<&str>) -> PyResult<RunConfig> {
    let cfg = match text {
        Some(t) => RunConfig::from_toml(t).map_err(py_err)?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// A toy decoder model.
#[pyclass(name = "Model", module = "reviewlens")]
struct PyModel {
    inner: model::Model,
}

fn interventions(raw: Vec<(usize, Vec<usize>, f64)>) -> Vec<InterventionSpec> {
    raw.into_iter()
        .map(|(layer, token_indices, scale)| InterventionSpec {
            layer,
            token_indices,
            scale,
        })
        .collect()
}

#[pymethods]
impl PyModel {
    /// Fresh weights from a `[model]`-bearing config (defaults if omitted).
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let cfg = load_config(config)?;
        Ok(PyModel {
            inner: model::init_model(cfg.model).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    fn checksum(&self) -> String {
        self.inner.weights.checksum()
    }

    /// Logits at the last position. `interventions` is a list of
    /// `(layer, token_indices, scale)`.
    #[pyo3(signature = (tokens, image_span, interventions=Vec::new()))]
    fn forward(
        &self,
        tokens: Vec<usize>,
        image_span: (usize, usize),
        interventions: Vec<(usize, Vec<usize>, f64)>,
    ) -> PyResult<Vec<f64>> {
        let seq = TokenSequence::new(tokens, image_span.0..image_span.1).map_err(py_err)?;
        let t = self
            .inner
            .forward(&seq, &self::interventions(interventions), false)
            .map_err(py_err)?;
        Ok(t.logits)
    }

    fn predict(&self, tokens: Vec<usize>, image_span: (usize, usize)) -> PyResult<usize> {
        let seq = TokenSequence::new(tokens, image_span.0..image_span.1).map_err(py_err)?;
        self.inner.predict(&seq).map_err(py_err)
    }

    /// Head-averaged answer-row attention over the image span, renormalized.
    fn image_attention(&self, tokens: Vec<usize>, image_span: (usize, usize), layer: usize) -> PyResult<Vec<f64>> {
        let seq = TokenSequence::new(tokens, image_span.0..image_span.1).map_err(py_err)?;
        let t = self.inner.forward(&seq, &[], true).map_err(py_err)?;
        Ok(model::image_attention(&t, layer, &seq).map_err(py_err)?.into_inner())
    }

    /// `(baseline_accuracy, [accuracy per masked layer])`.
    #[pyo3(signature = (samples, lam=0.0, config=None))]
    fn mask_sweep(
        &self,
        samples: Vec<Bound<'_, PyDict>>,
        lam: f64,
        config: Option<&str>,
    ) -> PyResult<(f64, Vec<f64>)> {
        let cfg = load_config(config)?;
        let samples = samples.iter().map(sample_from).collect::<PyResult<Vec<_>>>()?;
        let opts = SweepOptions {
            lambda: lam,
            latency_repeats: 1,
            latency_batch: 50,
        };
        let s = probe::layer_mask_sweep(&self.inner, &cfg.task.vocab(), &samples, &opts).map_err(py_err)?;
        Ok((s.baseline.accuracy, s.accuracies()))
    }

    /// Single-pass contrastive inference. `report` is fusion-report TOML;
    /// `strategy` is one of all/shallow/deep/fusion.
    #[pyo3(signature = (tokens, image_span, report, strategy="fusion", rho=0.2, lam=0.1, boundary=None))]
    #[allow(clippy::too_many_arguments)]
    fn contrast<'py>(
        &self,
        py: Python<'py>,
        tokens: Vec<usize>,
        image_span: (usize, usize),
        report: &str,
        strategy: &str,
        rho: f64,
        lam: f64,
        boundary: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let report = FusionReport::from_toml(report).map_err(py_err)?;
        let n = self.inner.n_layers();
        let boundary = boundary.unwrap_or_else(|| contrastive::default_boundary(n));
        let strategy = match strategy {
            "all" => CandidateStrategy::All,
            "shallow" => CandidateStrategy::Shallow { boundary },
            "deep" => CandidateStrategy::Deep { boundary },
            "fusion" => CandidateStrategy::Fusion {
                set: report.fusion_set.clone(),
            },
            other => return Err(PyValueError::new_err(format!("unknown strategy `{other}`"))),
        };
        let cfg = ContrastConfig {
            strategy,
            rho,
            lambda: lam,
        };
        let seq = TokenSequence::new(tokens, image_span.0..image_span.1).map_err(py_err)?;
        let r = contrastive::contrastive_inference(&self.inner, &seq, &report, &cfg).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("prediction", r.prediction)?;
        d.set_item("logits", r.logits)?;
        d.set_item("ia", r.ia)?;
        d.set_item("masked_indices", r.masked_indices)?;
        d.set_item("pre_integrated", r.selection.pre_integrated)?;
        d.set_item("post_integrated", r.selection.post_integrated)?;
        d.set_item("review", r.selection.review)?;
        d.set_item("distances", r.selection.distances)?;
        Ok(d)
    }
}

/// Runs a subcommand (`train`, `probe`, `contrast`, `sweep-ratio`) into
/// `out_dir` and returns the manifest as TOML.
#[pyfunction]
#[pyo3(signature = (command, out_dir, config=None, checkpoint=None, dataset=None, report=None))]
fn run(
    py: Python<'_>,
    command: &str,
    out_dir: PathBuf,
    config: Option<&str>,
    checkpoint: Option<PathBuf>,
    dataset: Option<PathBuf>,
    report: Option<PathBuf>,
) -> PyResult<String> {
    let cfg = load_config(config)?;
    let need = |p: Option<PathBuf>, what: &str| {
        p.ok_or_else(|| PyValueError::new_err(format!("`{command}` needs {what}")))
    };
    let cmd = match command {
        "train" => Command::Train,
        "probe" => Command::Probe {
            checkpoint: need(checkpoint, "checkpoint")?,
            dataset,
        },
        "contrast" => Command::Contrast {
            checkpoint: need(checkpoint, "checkpoint")?,
            dataset,
            report: need(report, "report")?,
        },
        "sweep-ratio" => Command::SweepRatio {
            checkpoint: need(checkpoint, "checkpoint")?,
            dataset,
            report: need(report, "report")?,
        },
        other => return Err(PyValueError::new_err(format!("unknown command `{other}`"))),
    };
    let m = py
        .detach(|| cli::execute(&cmd, &cfg, &out_dir))
        .map_err(py_err)?;
    Ok(m.to_toml())
}

#[pymodule]
#[pyo3(name = "reviewlens")]
pub fn reviewlens_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(hellinger, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(mask_indices_by_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_attention, m)?)?;
    m.add_function(wrap_pyfunction!(identify_fusion_layers, m)?)?;
    m.add_function(wrap_pyfunction!(identify_review_layer, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_report, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
