//! Python bindings: phantoms, windowing, models, scoring and evaluation.
//!
//! Arrays cross the boundary as flat lists plus a shape; structured results
//! come back as JSON strings so callers can `json.loads` them.

use std::fs::File;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use reconscan::autodiff::Tensor;
use reconscan::benchmark::{run_benchmark, BenchmarkConfig};
use reconscan::data::{read_archive, window_count as count_windows};
use reconscan::evaluation::{self, evaluate as evaluate_tables, ConfusionMatrix, PlaneTables};
use reconscan::models::{self, ModelKind, ModelSpec, TrainedModel};
use reconscan::phantom::{self, CohortSpec};
use reconscan::scoring::{self, DistanceMetric, ScoreTable, ScoringPolicy, ThresholdKind};
use reconscan::training;

create_exception!(
    reconscan_py,
    ReconscanError,
    PyException,
    "Error raised by reconscan; `args[0]` is the error code."
);

fn err(e: reconscan::Error) -> PyErr {
    ReconscanError::new_err((e.code(), e.to_string()))
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for reconscan::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

/// Accuracy in percent of a confusion matrix with OUTLIER as positive.
#[pyfunction]
#[pyo3(signature = (tp, tn, fp, fn_))]
fn accuracy(tp: usize, tn: usize, fp: usize, fn_: usize) -> PyResult<f64> {
    evaluation::accuracy(&ConfusionMatrix::new(tp, tn, fp, fn_)).py()
}

/// Two-decimal percentage, truncated rather than rounded.
#[pyfunction]
fn format_percent(pct: f64) -> String {
    evaluation::format_percent(pct)
}

/// Area under the ROC curve; `labels` are True for outliers.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    if scores.len() != labels.len() {
        return Err(err(reconscan::Error::Shape(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        ))));
    }
    let pairs: Vec<(f64, bool)> = scores.into_iter().zip(labels).collect();
    Ok(evaluation::roc_auc(&pairs).py()?.auc)
}

#[pyfunction]
#[pyo3(signature = (length, in_len=3, out_len=3, stride=1))]
fn window_count(length: usize, in_len: usize, out_len: usize, stride: usize) -> usize {
    count_windows(length, in_len, out_len, stride)
}

/// Mean squared difference of two equally long sequences.
#[pyfunction]
fn l2(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    training::l2(&x, &y).py()
}

#[pyfunction]
fn l1(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    training::l1(&x, &y).py()
}

/// One minus cosine similarity.
#[pyfunction]
fn cosine(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    training::cosine(&x, &y).py()
}

/// Generates a labelled cohort and writes NIfTI volumes plus `manifest.csv`
/// into `out_dir`; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, healthy=9, anomalous=10, timepoints=2, extent=64, seed=0, magnitude=(0.5, 1.0)))]
fn generate_cohort(
    py: Python<'_>,
    out_dir: PathBuf,
    healthy: usize,
    anomalous: usize,
    timepoints: usize,
    extent: usize,
    seed: u64,
    magnitude: (f64, f64),
) -> PyResult<PathBuf> {
    let spec = CohortSpec {
        healthy_subjects: healthy,
        anomalous_subjects: anomalous,
        timepoints,
        extent: [extent; 3],
        magnitude,
        seed,
        ..Default::default()
    };
    py.detach(|| {
        let volumes = phantom::generate_cohort(&spec)?;
        phantom::write_cohort(&out_dir, &volumes)
    })
    .py()
}

/// Runs the phantom benchmark. `config` is a JSON object with any subset of
/// the benchmark fields; the JSON report is returned.
#[pyfunction]
#[pyo3(signature = (config="{}", seed=None))]
fn benchmark(py: Python<'_>, config: &str, seed: Option<u64>) -> PyResult<String> {
    let mut cfg: BenchmarkConfig = serde_json::from_str(config).map_err(|e| err(e.into()))?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    py.detach(|| run_benchmark(&cfg)?.to_json()).py()
}

/// A generator (and critic, for adversarial kinds) with its spec.
#[pyclass(name = "Model", module = "reconscan_py")]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (kind, height, width, base_width=None, critic_width=None, seed=0))]
    fn new(
        kind: &str,
        height: usize,
        width: usize,
        base_width: Option<usize>,
        critic_width: Option<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let kind: ModelKind = kind.parse().py()?;
        let spec = ModelSpec::new(kind, height, width).with_seed(seed);
        let (base, critic) = (
            base_width.unwrap_or(spec.base_width),
            critic_width.unwrap_or(spec.critic_width),
        );
        let spec = spec.with_widths(base, critic);
        let model = models::Model::build(&spec).py()?;
        Ok(PyModel {
            inner: TrainedModel::new(model, None),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: models::load_checkpoint(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        models::save_checkpoint(&path, &self.inner).py()
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.spec().kind.to_string()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.model.param_count()
    }

    fn param_digest(&self) -> String {
        self.inner.model.param_digest()
    }

    fn spec_json(&self) -> String {
        self.inner.spec().to_json()
    }

    fn layer_names(&self) -> Vec<String> {
        self.inner.model.layer_names()
    }

    /// Reconstructs a batch given as a flat list with shape `[n, c, h, w]`.
    fn reconstruct(
        &self,
        py: Python<'_>,
        values: Vec<f64>,
        shape: Vec<usize>,
    ) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let spec = self.inner.spec();
        let expected = [spec.in_channels, spec.height, spec.width];
        if shape.len() != 4
            || shape[1..] != expected
            || values.len() != shape.iter().product::<usize>()
        {
            return Err(err(reconscan::Error::Shape(format!(
                "got {} values with shape {shape:?}, model expects [n, {}, {}, {}]",
                values.len(),
                expected[0],
                expected[1],
                expected[2]
            ))));
        }
        let out = py.detach(|| {
            self.inner
                .model
                .reconstruct(&Tensor::from_vec(values, &shape))
        });
        Ok((out.to_vec(), out.shape().to_vec()))
    }

    /// Trains on a window archive and returns the history as JSON.
    #[pyo3(signature = (archive, config="{}"))]
    fn fit(&mut self, py: Python<'_>, archive: PathBuf, config: &str) -> PyResult<String> {
        let cfg: training::TrainConfig = serde_json::from_str(config).map_err(|e| err(e.into()))?;
        let (_, windows) = read_archive(&archive).py()?;
        let model = &mut self.inner.model;
        let history = py
            .detach(|| {
                if model.kind().is_adversarial() {
                    training::train_gan(model, &windows, &cfg)
                } else {
                    training::train_unet(model, &windows, &cfg)
                }
            })
            .py()?;
        let out = serde_json::to_string(&history).map_err(|e| err(e.into()))?;
        self.inner.history = Some(history);
        Ok(out)
    }

    /// Scores every window of an archive; returns the score table as CSV.
    #[pyo3(signature = (archive, metric="l2+cosine"))]
    fn score(&self, py: Python<'_>, archive: PathBuf, metric: &str) -> PyResult<String> {
        let metric: DistanceMetric = metric.parse().py()?;
        let (_, windows) = read_archive(&archive).py()?;
        let table = py
            .detach(|| scoring::build_score_table(&self.inner, &windows, metric))
            .py()?;
        Ok(table.to_csv())
    }
}

fn read_table(path: &PathBuf, metric: DistanceMetric) -> PyResult<ScoreTable> {
    let file = File::open(path).map_err(|e| err(e.into()))?;
    ScoreTable::read_csv(metric, file).py()
}

/// Threshold value of a score table CSV.
#[pyfunction]
#[pyo3(signature = (path, metric="l2+cosine", kind="avg"))]
fn threshold(path: PathBuf, metric: &str, kind: &str) -> PyResult<f64> {
    let table = read_table(&path, metric.parse().py()?)?;
    let kind: ThresholdKind = kind.parse().py()?;
    Ok(scoring::compute_threshold(&table, kind).py()?.value)
}

/// Evaluates one plane from training and test score CSVs; returns the report JSON.
#[pyfunction]
#[pyo3(signature = (train_scores, test_scores, metric="l2+cosine", kind="avg", strict=false))]
fn evaluate(
    train_scores: PathBuf,
    test_scores: PathBuf,
    metric: &str,
    kind: &str,
    strict: bool,
) -> PyResult<String> {
    let metric: DistanceMetric = metric.parse().py()?;
    let train = read_table(&train_scores, metric)?;
    let test = read_table(&test_scores, metric)?;
    let kind: ThresholdKind = kind.parse().py()?;
    let policy = if strict {
        ScoringPolicy::strict()
    } else {
        ScoringPolicy::default()
    };
    let view = PlaneTables {
        plane: reconscan::data::Plane::Axial,
        train: &train,
        test: &test,
    };
    Ok(evaluate_tables(&[view], kind, &policy).py()?.to_json())
}

#[pymodule]
fn reconscan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ReconscanError", m.py().get_type::<ReconscanError>())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(format_percent, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(window_count, m)?)?;
    m.add_function(wrap_pyfunction!(l2, m)?)?;
    m.add_function(wrap_pyfunction!(l1, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(generate_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(threshold, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
