//! Python bindings: synthetic-data generation, cohort loading, feature and
//! document access, metrics, and the prompt utilities.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;

use ehrtext::cli::{build_in_memory, BuiltCohort};
use ehrtext::config::RunConfig;
use ehrtext::ehr_model::IcuStayRecord;
use ehrtext::evaluate::{self, Hyper, ScoredSet};
use ehrtext::features::{
    assemble, DemoEncoder, FeatureLayout, ImputeStrategy, ImputedSeries, RepMode,
};
use ehrtext::synth::{generate, SynthConfig};
use ehrtext::textualize::{render_document, AblationFlags};
use ehrtext::zeroshot::{self, PromptKind, UnansweredDefault, WhitespaceCounter};

fn to_py_err(e: ehrtext::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Generates the synthetic CSV tables plus ledger into `out_dir` and returns
/// the ledger's headline numbers.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=1, n_patients=100, mortality_prevalence=0.2, signal_strength=0.0, short_stay_fraction=0.1))]
fn generate_synth(
    out_dir: PathBuf,
    seed: u64,
    n_patients: usize,
    mortality_prevalence: f64,
    signal_strength: f64,
    short_stay_fraction: f64,
) -> PyResult<HashMap<String, f64>> {
    let cfg = SynthConfig {
        seed,
        n_patients,
        mortality_prevalence,
        signal_strength,
        short_stay_fraction,
        ..SynthConfig::default()
    };
    let ledger = generate(&cfg, &out_dir).map_err(to_py_err)?;
    let mut out = HashMap::new();
    out.insert("n_patients".to_string(), ledger.n_patients as f64);
    out.insert(
        "planted_cohort_size".to_string(),
        ledger.planted_cohort_size as f64,
    );
    out.insert(
        "realized_prevalence".to_string(),
        ledger.realized_prevalence,
    );
    for (table, rows) in &ledger.table_rows {
        out.insert(format!("rows_{table}"), *rows as f64);
    }
    Ok(out)
}

/// A built cohort held in memory: records, vocabulary, and imputed series.
#[pyclass]
struct Cohort {
    built: BuiltCohort,
    encoder: DemoEncoder,
    index: HashMap<String, usize>,
    rep1: Arc<FeatureLayout>,
    rep2: Arc<FeatureLayout>,
}

impl Cohort {
    fn stay(&self, stay_id: &str) -> PyResult<(&IcuStayRecord, &ImputedSeries)> {
        let idx = *self
            .index
            .get(stay_id)
            .ok_or_else(|| PyKeyError::new_err(format!("unknown stay_id {stay_id:?}")))?;
        Ok((&self.built.records[idx], &self.built.imputed[idx]))
    }
}

#[pymethods]
impl Cohort {
    fn __len__(&self) -> usize {
        self.built.records.len()
    }

    fn stay_ids(&self) -> Vec<String> {
        self.built
            .records
            .iter()
            .map(|r| r.stay_id.clone())
            .collect()
    }

    fn label(&self, stay_id: &str) -> PyResult<u8> {
        Ok(self.stay(stay_id)?.0.label)
    }

    fn labels(&self) -> Vec<u8> {
        self.built.records.iter().map(|r| r.label).collect()
    }

    /// Renders the stay's text document. `sections` selects groups by name
    /// (defaults to all six).
    #[pyo3(signature = (stay_id, sections=None))]
    fn document(&self, stay_id: &str, sections: Option<Vec<String>>) -> PyResult<String> {
        let flags = match sections {
            Some(names) => AblationFlags::from_names(&names).map_err(to_py_err)?,
            None => AblationFlags::all(),
        };
        let (record, series) = self.stay(stay_id)?;
        let (doc, _) = render_document(record, series, &self.built.vocabulary, &flags);
        Ok(doc.full_text)
    }

    /// Numeric feature vector for one stay under "rep1" or "rep2".
    fn features(&self, stay_id: &str, mode: &str) -> PyResult<Vec<f64>> {
        let layout = self.layout_for(mode)?;
        let (record, series) = self.stay(stay_id)?;
        let vector = assemble(
            record,
            series,
            &layout,
            &self.built.vocabulary,
            &self.encoder,
        )
        .map_err(to_py_err)?;
        Ok(vector.values)
    }

    fn feature_dim(&self, mode: &str) -> PyResult<usize> {
        Ok(self.layout_for(mode)?.total_dim())
    }

    fn layout_descriptor(&self, mode: &str) -> PyResult<String> {
        Ok(self.layout_for(mode)?.descriptor())
    }

    /// Full feature matrix plus labels, row order matching `stay_ids()`.
    fn matrix(&self, mode: &str) -> PyResult<(Vec<Vec<f64>>, Vec<u8>)> {
        let layout = self.layout_for(mode)?;
        let mut rows = Vec::with_capacity(self.built.records.len());
        let mut labels = Vec::with_capacity(self.built.records.len());
        for (record, series) in self.built.records.iter().zip(&self.built.imputed) {
            let vector = assemble(
                record,
                series,
                &layout,
                &self.built.vocabulary,
                &self.encoder,
            )
            .map_err(to_py_err)?;
            rows.push(vector.values);
            labels.push(record.label);
        }
        Ok((rows, labels))
    }
}

impl Cohort {
    fn layout_for(&self, mode: &str) -> PyResult<Arc<FeatureLayout>> {
        match RepMode::parse(mode) {
            Some(RepMode::Rep1) => Ok(Arc::clone(&self.rep1)),
            Some(RepMode::Rep2) => Ok(Arc::clone(&self.rep2)),
            None => Err(PyValueError::new_err(format!(
                "mode must be 'rep1' or 'rep2', got {mode:?}"
            ))),
        }
    }
}

/// Loads CSV tables from `data_dir` and builds the cohort with default
/// MIMIC-shaped schema. `impute` is "carry_sample" or "mean_fill".
#[pyfunction]
#[pyo3(signature = (data_dir, observation_window_hours=48, bin_hours=2, impute="carry_sample"))]
fn load_cohort(
    data_dir: PathBuf,
    observation_window_hours: u32,
    bin_hours: u32,
    impute: &str,
) -> PyResult<Cohort> {
    let mut cfg = RunConfig::default();
    cfg.cohort.observation_window_hours = observation_window_hours;
    cfg.cohort.bin_hours = bin_hours;
    cfg.impute_strategy = match impute {
        "carry_sample" => ImputeStrategy::CarrySample,
        "mean_fill" => ImputeStrategy::MeanFill,
        other => {
            return Err(PyValueError::new_err(format!(
                "impute must be 'carry_sample' or 'mean_fill', got {other:?}"
            )))
        }
    };
    let built = build_in_memory(&cfg, &data_dir).map_err(to_py_err)?;
    let encoder = cfg.demo_encoder();
    let w = built.window_count;
    let rep1 = Arc::new(FeatureLayout::for_run(
        &built.vocabulary,
        &encoder,
        RepMode::Rep1,
        w,
    ));
    let rep2 = Arc::new(FeatureLayout::for_run(
        &built.vocabulary,
        &encoder,
        RepMode::Rep2,
        w,
    ));
    let index = built
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.stay_id.clone(), i))
        .collect();
    Ok(Cohort {
        built,
        encoder,
        index,
        rep1,
        rep2,
    })
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    let set = ScoredSet::new(scores, labels).map_err(to_py_err)?;
    evaluate::auroc(&set).map_err(to_py_err)
}

#[pyfunction]
fn auprc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    let set = ScoredSet::new(scores, labels).map_err(to_py_err)?;
    evaluate::auprc(&set).map_err(to_py_err)
}

/// Trained logistic-regression model.
#[pyclass]
struct LogReg {
    model: evaluate::LogRegModel,
}

#[pymethods]
impl LogReg {
    fn predict_proba(&self, rows: Vec<Vec<f64>>) -> Vec<f64> {
        self.model.predict_many(&rows)
    }

    #[getter]
    fn final_loss(&self) -> f64 {
        self.model.final_loss
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.model.iterations
    }
}

#[pyfunction]
#[pyo3(signature = (rows, labels, l2_lambda=0.0))]
fn train_logreg(rows: Vec<Vec<f64>>, labels: Vec<u8>, l2_lambda: f64) -> PyResult<LogReg> {
    let hyper = Hyper {
        l2_lambda,
        ..Hyper::default()
    };
    let model = evaluate::train_logreg(&rows, &labels, &hyper).map_err(to_py_err)?;
    Ok(LogReg { model })
}

#[pyfunction]
fn format_value(x: f64) -> PyResult<String> {
    if !x.is_finite() {
        return Err(PyValueError::new_err("value must be finite"));
    }
    Ok(ehrtext::textualize::format_value(x))
}

/// Builds prompt "p1" or "p2" around the EHR text within the token budget.
#[pyfunction]
#[pyo3(signature = (prompt, ehr_text, budget=1024))]
fn build_prompt(prompt: &str, ehr_text: &str, budget: usize) -> PyResult<String> {
    let kind = PromptKind::parse(prompt).ok_or_else(|| {
        PyValueError::new_err(format!("prompt must be 'p1' or 'p2', got {prompt:?}"))
    })?;
    zeroshot::build_prompt(kind, ehr_text, budget, &WhitespaceCounter).map_err(to_py_err)
}

/// Classifies a completion as "yes", "no", or "unanswered".
#[pyfunction]
fn parse_answer(raw: &str) -> String {
    zeroshot::parse_answer(raw).status.as_str().to_string()
}

/// Maps a parsed answer through a prompt's semantics; returns
/// (label, was_unanswered).
#[pyfunction]
fn resolve_prediction(status: &str, prompt: &str) -> PyResult<(u8, bool)> {
    let kind = PromptKind::parse(prompt).ok_or_else(|| {
        PyValueError::new_err(format!("prompt must be 'p1' or 'p2', got {prompt:?}"))
    })?;
    let status = match status {
        "yes" => zeroshot::AnswerStatus::Yes,
        "no" => zeroshot::AnswerStatus::No,
        "unanswered" => zeroshot::AnswerStatus::Unanswered,
        other => {
            return Err(PyValueError::new_err(format!(
                "status must be yes/no/unanswered, got {other:?}"
            )))
        }
    };
    let resolved = zeroshot::resolve_prediction(status, kind, UnansweredDefault::TokenLevel);
    Ok((resolved.label, resolved.was_unanswered))
}

#[pyfunction]
fn count_tokens(text: &str) -> usize {
    zeroshot::count_tokens(text)
}

#[pymodule]
fn ehrtext_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Cohort>()?;
    m.add_class::<LogReg>()?;
    m.add_function(wrap_pyfunction!(generate_synth, m)?)?;
    m.add_function(wrap_pyfunction!(load_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    m.add_function(wrap_pyfunction!(train_logreg, m)?)?;
    m.add_function(wrap_pyfunction!(format_value, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_answer, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_prediction, m)?)?;
    m.add_function(wrap_pyfunction!(count_tokens, m)?)?;
    m.add("P1_SCAFFOLD", zeroshot::P1_SCAFFOLD)?;
    m.add("P2_SCAFFOLD", zeroshot::P2_SCAFFOLD)?;
    Ok(())
}
