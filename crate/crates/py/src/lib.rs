//! Python bindings: graphs, the frozen language model, the state cache,
//! adapters, metrics and the experiment runner.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use gadk::adapter::AdapterModel;
use gadk::cache::{compute_cache, load_cache, verify_cache};
use gadk::data::{load_tag, synth_generate, BayesReport, SynthConfig, TagGraph};
use gadk::eval::{run_matrix, train_lm, ExperimentPlan, PipelineConfig, Workspace};
use gadk::gnn::GnnConfig;
use gadk::lm::{load_lm, save_lm, LanguageModel};
use gadk::training::{pretrain_adapter, TrainConfig};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(err),
        None => Ok(T::default()),
    }
}

#[pyclass(name = "Graph", module = "gadk")]
struct PyGraph {
    inner: TagGraph,
    bayes: Option<BayesReport>,
}

#[pymethods]
impl PyGraph {
    /// Synthetic graph from a JSON `SynthConfig` (defaults when omitted).
    #[staticmethod]
    #[pyo3(signature = (config_json=None))]
    fn synthetic(config_json: Option<&str>) -> PyResult<Self> {
        let cfg: SynthConfig = parse(config_json)?;
        let out = synth_generate(&cfg).map_err(err)?;
        Ok(PyGraph {
            inner: out.graph,
            bayes: Some(out.bayes),
        })
    }

    #[staticmethod]
    fn load(nodes_path: PathBuf, edges_path: PathBuf) -> PyResult<Self> {
        Ok(PyGraph {
            inner: load_tag(&nodes_path, &edges_path).map_err(err)?,
            bayes: None,
        })
    }

    fn save(&self, nodes_path: PathBuf, edges_path: PathBuf) -> PyResult<()> {
        self.inner.save(&nodes_path, &edges_path).map_err(err)
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    #[getter]
    fn n_edges(&self) -> usize {
        self.inner.n_edges()
    }

    fn texts(&self) -> Vec<String> {
        self.inner.nodes().iter().map(|n| n.text.clone()).collect()
    }

    fn labels(&self) -> Vec<Option<usize>> {
        self.inner.labels()
    }

    fn neighbors(&self, node: usize) -> PyResult<Vec<usize>> {
        if node >= self.inner.n_nodes() {
            return Err(err(format!("node {node} out of range")));
        }
        Ok(self.inner.neighbors(node).to_vec())
    }

    /// Bayes-optimal accuracies as JSON, for synthetic graphs.
    fn bayes_json(&self) -> Option<String> {
        self.bayes.as_ref().map(|b| serde_json::to_string(b).expect("serializable"))
    }
}

#[pyclass(name = "LanguageModel", module = "gadk")]
struct PyLm {
    inner: LanguageModel,
}

#[pymethods]
impl PyLm {
    /// Trains and freezes a backbone on the graph texts; `config_json` is a
    /// pipeline configuration.
    #[staticmethod]
    #[pyo3(signature = (graph, config_json=None))]
    fn train(graph: &PyGraph, config_json: Option<&str>) -> PyResult<Self> {
        let cfg: PipelineConfig = parse(config_json)?;
        Ok(PyLm {
            inner: train_lm(&graph.inner, &cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyLm {
            inner: load_lm(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_lm(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn content_hash(&self) -> String {
        self.inner.content_hash().to_string()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.config().d_model
    }

    #[getter]
    fn frozen(&self) -> bool {
        self.inner.is_frozen()
    }

    fn tokenize(&self, text: &str) -> Vec<usize> {
        self.inner.tokenize(text)
    }

    /// Hidden states of every position, one list per position.
    fn forward(&self, text: &str) -> PyResult<Vec<Vec<f64>>> {
        let ids = self.inner.tokenize(text);
        let h = self.inner.lm_forward(&ids).map_err(err)?;
        Ok(h.data().chunks(h.cols()).map(<[f64]>::to_vec).collect())
    }

    /// Next-token distribution after the last position of `text`.
    fn next_token_probs(&self, text: &str) -> PyResult<Vec<f64>> {
        let h = self.forward(text)?;
        Ok(self.inner.next_token_probs(h.last().expect("bos is always present")))
    }
}

#[pyclass(name = "StateCache", module = "gadk")]
struct PyCache {
    inner: gadk::cache::StateCache,
}

#[pymethods]
impl PyCache {
    #[staticmethod]
    #[pyo3(signature = (graph, lm, prompt=""))]
    fn build(graph: &PyGraph, lm: &PyLm, prompt: &str) -> PyResult<Self> {
        let p = lm.inner.prompt(prompt);
        Ok(PyCache {
            inner: compute_cache(&graph.inner, &lm.inner, &p).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf, lm: &PyLm) -> PyResult<Self> {
        Ok(PyCache {
            inner: load_cache(&path, &lm.inner).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn total_floats(&self) -> usize {
        self.inner.total_floats()
    }

    /// Returns `(nodes checked, max abs diff, mismatch count)`.
    #[pyo3(signature = (graph, lm, prompt="", fraction=1.0, seed=0))]
    fn verify(&self, graph: &PyGraph, lm: &PyLm, prompt: &str, fraction: f64, seed: u64) -> PyResult<(usize, f64, usize)> {
        let p = lm.inner.prompt(prompt);
        let r = verify_cache(&self.inner, &graph.inner, &lm.inner, &p, fraction, seed).map_err(err)?;
        Ok((r.checked.len(), r.max_abs_diff, r.mismatches.len()))
    }
}

#[pyclass(name = "Adapter", module = "gadk")]
struct PyAdapter {
    inner: AdapterModel,
}

#[pymethods]
impl PyAdapter {
    #[new]
    #[pyo3(signature = (d_model, seed=0, gnn_json=None))]
    fn new(d_model: usize, seed: u64, gnn_json: Option<&str>) -> PyResult<Self> {
        let cfg: GnnConfig = parse(gnn_json)?;
        Ok(PyAdapter {
            inner: AdapterModel::new(cfg, d_model, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyAdapter {
            inner: AdapterModel::load(&path).map_err(err)?.0,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, &self.inner.content_hash()).map_err(err)
    }

    #[getter]
    fn content_hash(&self) -> String {
        self.inner.content_hash().to_string()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Language-structure pretraining; returns the trained adapter and the
    /// run record as JSON.
    #[pyo3(signature = (graph, cache, lm, train_json=None))]
    fn pretrain(&self, graph: &PyGraph, cache: &PyCache, lm: &PyLm, train_json: Option<&str>) -> PyResult<(PyAdapter, String)> {
        let cfg: TrainConfig = parse(train_json)?;
        let (m, rec) = pretrain_adapter(&graph.inner, &cache.inner, &lm.inner, &self.inner, &cfg).map_err(err)?;
        Ok((PyAdapter { inner: m }, serde_json::to_string(&rec).map_err(err)?))
    }
}

#[pyfunction]
fn accuracy(preds: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    gadk::metrics::accuracy(&preds, &labels).map_err(err)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    gadk::metrics::roc_auc(&scores, &labels).map_err(err)
}

/// Residual averaging of two distributions.
#[pyfunction]
fn average_probs(p_lm: Vec<f64>, p_gnn: Vec<f64>) -> PyResult<Vec<f64>> {
    if p_lm.len() != p_gnn.len() {
        return Err(err("distributions differ in length"));
    }
    Ok(gadk::fusion::average_probs(&p_lm, &p_gnn))
}

/// Largest relative error of the finite-difference suite.
#[pyfunction]
#[pyo3(signature = (cases=gadk::gradsuite::DEFAULT_CASES, seed=0))]
fn gradcheck(cases: usize, seed: u64) -> PyResult<f64> {
    Ok(gadk::gradsuite::run_suite(cases, seed).map_err(err)?.max_rel_error())
}

/// Runs the default variant matrix (or the ablation matrix) on a synthetic
/// workspace and returns the report JSON.
#[pyfunction]
#[pyo3(signature = (config_json=None, ablation=false))]
fn run_experiment(config_json: Option<&str>, ablation: bool) -> PyResult<String> {
    let cfg: PipelineConfig = parse(config_json)?;
    let ws = Workspace::synthetic(&cfg).map_err(err)?;
    let plan = if ablation {
        ExperimentPlan::ablation_matrix(&cfg.seeds)
    } else {
        ExperimentPlan::default_matrix(&cfg.seeds)
    };
    Ok(run_matrix(&ws, &cfg, &plan).map_err(err)?.to_json())
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyLm>()?;
    m.add_class::<PyCache>()?;
    m.add_class::<PyAdapter>()?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(average_probs, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}

#[pymodule]
#[pyo3(name = "gadk")]
fn gadk_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
