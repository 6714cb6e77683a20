//! Python bindings: curves, Wilson intervals, the spectral indicator and the
//! pipeline driver.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use frbench::corpus;
use frbench::detection::{self, BoundingBox};
use frbench::estimation::{self, SpectralOutcome};
use frbench::evaluation::{self, ConfusionMatrix3, EvalCurve, ScoreSets};
use frbench::pipeline::{self, RunConfig, Stage};
use frbench::scoring::ConfidenceMatrix;
use frbench::types::{FaceId, ImageId, QueryId, ServiceId};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Spectral and consolidation thresholds.
#[pyclass(name = "Thresholds")]
struct PyThresholds {
    inner: estimation::Thresholds,
}

#[pymethods]
impl PyThresholds {
    #[new]
    #[pyo3(signature = (eigen=4.0, z=0.2, min_prevalent=5, min_crawled=8))]
    fn new(eigen: f64, z: f64, min_prevalent: usize, min_crawled: usize) -> PyResult<Self> {
        let inner = estimation::Thresholds {
            eigen,
            z,
            min_prevalent,
            min_crawled,
        };
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn eigen(&self) -> f64 {
        self.inner.eigen
    }

    #[getter]
    fn z(&self) -> f64 {
        self.inner.z
    }

    #[getter]
    fn min_prevalent(&self) -> usize {
        self.inner.min_prevalent
    }

    #[getter]
    fn min_crawled(&self) -> usize {
        self.inner.min_crawled
    }

    fn __repr__(&self) -> String {
        let t = &self.inner;
        format!(
            "Thresholds(eigen={}, z={}, min_prevalent={}, min_crawled={})",
            t.eigen, t.z, t.min_prevalent, t.min_crawled
        )
    }
}

/// FMR/FNMR curve over every distinct score.
#[pyclass(name = "Curve")]
struct PyCurve {
    inner: EvalCurve,
}

#[pymethods]
impl PyCurve {
    #[new]
    #[pyo3(signature = (genuine, impostor, confidence=0.95))]
    fn new(genuine: Vec<f64>, impostor: Vec<f64>, confidence: f64) -> PyResult<Self> {
        let sets = ScoreSets { genuine, impostor };
        let inner = evaluation::fmr_fnmr_curve(&sets, confidence).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn thresholds(&self) -> Vec<f64> {
        self.inner.points.iter().map(|p| p.threshold).collect()
    }

    #[getter]
    fn fmr(&self) -> Vec<f64> {
        self.inner.points.iter().map(|p| p.fmr).collect()
    }

    #[getter]
    fn fnmr(&self) -> Vec<f64> {
        self.inner.points.iter().map(|p| p.fnmr).collect()
    }

    #[getter]
    fn n_genuine(&self) -> usize {
        self.inner.n_genuine
    }

    #[getter]
    fn n_impostor(&self) -> usize {
        self.inner.n_impostor
    }

    fn eer(&self) -> f64 {
        evaluation::equal_error_rate(&self.inner)
    }

    #[pyo3(signature = (confidence=0.95))]
    fn eer_bounds(&self, confidence: f64) -> PyResult<(f64, f64)> {
        evaluation::eer_bounds(&self.inner, self.eer(), confidence).map_err(value_err)
    }

    fn fnmr_at(&self, fmr: f64) -> f64 {
        evaluation::fnmr_at_fmr(&self.inner, fmr)
    }

    /// Area between this curve and `other` on the log-FMR grid.
    fn discrepancy(&self, other: PyRef<'_, PyCurve>) -> f64 {
        evaluation::curve_discrepancy(&self.inner, &other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.points.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Curve(n_genuine={}, n_impostor={}, eer={:.6})",
            self.inner.n_genuine,
            self.inner.n_impostor,
            self.eer()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (k, n, confidence=0.95))]
fn wilson_interval(k: u64, n: u64, confidence: f64) -> PyResult<(f64, f64)> {
    evaluation::wilson_interval(k, n, confidence).map_err(value_err)
}

#[pyfunction]
fn normalize_name(name: &str) -> String {
    corpus::normalize_name(name)
}

/// Intersection over union of two `(x, y, w, h)` boxes.
#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let bx = |(x, y, w, h): (f64, f64, f64, f64)| BoundingBox {
        image_id: ImageId(0),
        service: ServiceId::new(""),
        x,
        y,
        w,
        h,
    };
    detection::iou(&bx(a), &bx(b))
}

fn confidence_matrix(rows: Vec<Vec<f64>>, service: &str) -> PyResult<ConfidenceMatrix> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    let values = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    let faces = (0..n as u32).map(FaceId).collect();
    ConfidenceMatrix::new(QueryId(0), ServiceId::new(service), faces, values).map_err(value_err)
}

/// Identity indicator `z` of the single prevalent block, or `None` when the
/// matrix has no such block.
#[pyfunction]
#[pyo3(signature = (matrix, eigen=4.0))]
fn spectral_indicator(matrix: Vec<Vec<f64>>, eigen: f64) -> PyResult<Option<Vec<f64>>> {
    let m = confidence_matrix(matrix, "")?;
    let r = estimation::spectral_identity(&m, eigen).map_err(value_err)?;
    Ok(match r.outcome {
        SpectralOutcome::Accepted { z, .. } => Some(z),
        SpectralOutcome::Rejected(_) => None,
    })
}

/// Majority-vote labels (1, 0 or -1 per face) for one query scored by
/// several services, given as `{service: matrix}` over the same faces.
#[pyfunction]
#[pyo3(signature = (matrices, thresholds=None))]
fn estimate_query(
    matrices: BTreeMap<String, Vec<Vec<f64>>>,
    thresholds: Option<PyRef<'_, PyThresholds>>,
) -> PyResult<Vec<i8>> {
    let th = thresholds.map(|t| t.inner).unwrap_or_default();
    let mut results = BTreeMap::new();
    let mut n = None;
    for (service, rows) in matrices {
        let m = confidence_matrix(rows, &service)?;
        if *n.get_or_insert(m.len()) != m.len() {
            return Err(PyValueError::new_err("matrices cover different numbers of faces"));
        }
        let r = estimation::spectral_identity(&m, th.eigen).map_err(value_err)?;
        results.insert(ServiceId::new(service), r);
    }
    let faces: Vec<FaceId> = (0..n.unwrap_or(0) as u32).map(FaceId).collect();
    let est = estimation::consolidate(QueryId(0), &faces, &results, &th);
    Ok(faces.iter().map(|f| est.labels[f].as_i8()).collect())
}

/// Agreement of a 3x3 confusion table in `[1, 0, -1]` order.
#[pyfunction]
fn agreement_rate(counts: [[u64; 3]; 3]) -> PyResult<f64> {
    evaluation::agreement_rate(&ConfusionMatrix3 { counts, n_excluded: 0 }).map_err(value_err)
}

/// Runs the pipeline from a JSON config and returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config, stages=None, out_dir=None))]
fn run_pipeline(py: Python<'_>, config: &str, stages: Option<Vec<String>>, out_dir: Option<&str>) -> PyResult<String> {
    let mut cfg = RunConfig::load(config).map_err(value_err)?;
    if let Some(dir) = out_dir {
        cfg.out_dir = dir.into();
    }
    let stages: Vec<Stage> = match stages {
        Some(s) => s.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(value_err)?,
        None => Stage::ALL.to_vec(),
    };
    let manifest = py
        .detach(|| pipeline::run(&cfg, &stages))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    serde_json::to_string(&manifest).map_err(value_err)
}

/// Drift report for one service across two finished runs, as JSON.
#[pyfunction]
fn compare_runs(run_a: &str, run_b: &str, service: &str) -> PyResult<String> {
    let report = pipeline::compare_runs(run_a.as_ref(), run_b.as_ref(), &ServiceId::new(service)).map_err(value_err)?;
    serde_json::to_string(&report).map_err(value_err)
}

#[pymodule]
fn frbench_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyThresholds>()?;
    m.add_class::<PyCurve>()?;
    m.add_function(wrap_pyfunction!(wilson_interval, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_name, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_indicator, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_query, m)?)?;
    m.add_function(wrap_pyfunction!(agreement_rate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(compare_runs, m)?)?;
    Ok(())
}
