//! Command-line pipeline: synth | build | export | eval-tabular |
//! eval-zeroshot | report.
//!
//! Every command is re-runnable: identical config + seed produce
//! byte-identical outputs, and the build stage is cached by config digest.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::ehr_model::IcuStayRecord;
use crate::emit::{
    oversample, read_dataset, split_cohort, write_atomic, write_dataset, write_manifest,
    DatasetKind, DatasetRecord, Split,
};
use crate::error::{Error, Result};
use crate::evaluate::{cross_validate, metrics_report, train_logreg, Hyper, ScoredSet};
use crate::features::{
    assemble, cohort_chart_means, impute, FeatureLayout, FeatureVector, RepMode,
};
use crate::ingest::{build_cohort, load_tables};
use crate::synth;
use crate::textualize::render_document;
use crate::zeroshot::{
    load_fixture, run_harness, write_audit_log, EndpointClient, FixtureEndpoint, HarnessRecord,
    HttpEndpoint, PromptKind, WhitespaceCounter,
};

#[derive(Debug, Parser)]
#[command(
    name = "ehrtext",
    about = "Deterministic ICU-table pipeline: tabular features, patient text, and mortality evaluation"
)]
pub struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding the input CSV tables.
    #[arg(long, global = true, default_value = "data")]
    pub data: PathBuf,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config seed (splitting, oversampling, CV, synthesis).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the tabular representation: rep1 | rep2.
    #[arg(long, global = true)]
    pub representation: Option<String>,
    /// Overrides the enabled text sections, comma-separated
    /// (DEMO,COND,CHART_LAB,MEDS,PROC,OUTE).
    #[arg(long, global = true, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// Overrides the zero-shot prompt: p1 | p2.
    #[arg(long, global = true)]
    pub prompt: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic input tables into the data directory.
    Synth {
        /// Overrides the number of synthetic patients.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Build the cohort: features and documents, cached by config digest.
    Build,
    /// Split, oversample, and serialize the datasets.
    Export,
    /// Cross-validated logistic regression plus held-out test metrics.
    EvalTabular,
    /// Zero-shot prompt harness over the held-out test documents.
    EvalZeroshot,
    /// Consolidated metrics summary across completed evaluations.
    Report,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &cli)?;
    cfg.validate()?;

    if let Some(threads) = cli.threads {
        if threads > 0 {
            // A second in-process call would fail; the pool is process-wide.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        }
    }

    match &cli.command {
        Command::Synth { .. } => cmd_synth(&cfg, &cli.data),
        Command::Build => cmd_build(&cfg, &cli.data, &cli.out).map(|_| ()),
        Command::Export => cmd_export(&cfg, &cli.out),
        Command::EvalTabular => cmd_eval_tabular(&cfg, &cli.out),
        Command::EvalZeroshot => cmd_eval_zeroshot(&cfg, &cli.out),
        Command::Report => cmd_report(&cfg, &cli.out),
    }
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) -> Result<()> {
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(rep) = &cli.representation {
        cfg.representation = RepMode::parse(rep)
            .ok_or_else(|| Error::Config(format!("unknown representation {rep:?}")))?;
    }
    if let Some(features) = &cli.features {
        cfg.features = features.clone();
    }
    if let Some(prompt) = &cli.prompt {
        cfg.zeroshot.prompt = PromptKind::parse(prompt)
            .ok_or_else(|| Error::Config(format!("unknown prompt {prompt:?}")))?;
    }
    if let Command::Synth { n: Some(n) } = &cli.command {
        cfg.synth.n_patients = *n;
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, data_dir: &Path) -> Result<()> {
    let ledger = synth::generate(&cfg.synth, data_dir)?;
    log::info!(
        "synthesized {} patients ({} qualifying) into {}",
        ledger.n_patients,
        ledger.planted_cohort_size,
        data_dir.display()
    );
    println!(
        "synth: {} patients, {} qualifying stays, prevalence {:.3}",
        ledger.n_patients, ledger.planted_cohort_size, ledger.realized_prevalence
    );
    Ok(())
}

/// Everything the build stage persists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildManifest {
    pub config_digest: String,
    pub layout: String,
    pub window_count: usize,
    pub n_records: usize,
    pub n_positive: usize,
    pub diagnostics: crate::ingest::CohortDiagnostics,
    pub missing_descriptions: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DocRow {
    stay_id: String,
    label: u8,
    text: String,
}

pub fn build_paths(out_dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf, PathBuf) {
    let build = out_dir.join("build");
    (
        build.join("build_manifest.json"),
        build.join("vocab.json"),
        build.join("documents.jsonl"),
        build.join("features.csv"),
        build,
    )
}

fn cmd_build(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<BuildManifest> {
    let digest = cfg.digest();
    let (manifest_path, vocab_path, docs_path, feats_path, build_dir) = build_paths(out_dir);

    if let Ok(text) = std::fs::read_to_string(&manifest_path) {
        if let Ok(manifest) = serde_json::from_str::<BuildManifest>(&text) {
            if manifest.config_digest == digest {
                log::info!("build cache hit for digest {digest}");
                println!("build: cache hit ({} records)", manifest.n_records);
                return Ok(manifest);
            }
        }
    }
    std::fs::create_dir_all(&build_dir)?;

    let raw = load_tables(data_dir, &cfg.schema)?;
    let cohort = build_cohort(&raw, &cfg.cohort)?;
    let vocab = &cohort.vocabulary;
    let w = cfg.cohort.window_count();

    let series: Vec<_> = cohort
        .records
        .par_iter()
        .map(|stay| crate::ingest::bin_events(stay, &cfg.cohort, vocab))
        .collect();
    let stats = cohort_chart_means(&series);
    let imputed: Vec<_> = series
        .par_iter()
        .map(|s| impute(s, cfg.impute_strategy, &stats))
        .collect();

    let encoder = cfg.demo_encoder();
    let layout = Arc::new(FeatureLayout::for_run(
        vocab,
        &encoder,
        cfg.representation,
        w,
    ));
    let vectors: Vec<FeatureVector> = cohort
        .records
        .par_iter()
        .zip(imputed.par_iter())
        .map(|(stay, series)| assemble(stay, series, &layout, vocab, &encoder))
        .collect::<Result<Vec<_>>>()?;

    let flags = cfg.ablation_flags()?;
    let rendered: Vec<_> = cohort
        .records
        .par_iter()
        .zip(imputed.par_iter())
        .map(|(stay, series)| render_document(stay, series, vocab, &flags))
        .collect();
    let missing_descriptions: usize = rendered.iter().map(|(_, m)| m).sum();

    // vocab.json
    let mut vocab_bytes = serde_json::to_vec_pretty(&vocab.spec())?;
    vocab_bytes.push(b'\n');
    write_atomic(&vocab_path, &vocab_bytes)?;

    // documents.jsonl
    let mut doc_bytes = Vec::new();
    for (stay, (doc, _)) in cohort.records.iter().zip(&rendered) {
        let row = DocRow {
            stay_id: stay.stay_id.clone(),
            label: stay.label,
            text: doc.full_text.clone(),
        };
        serde_json::to_writer(&mut doc_bytes, &row)?;
        doc_bytes.push(b'\n');
    }
    write_atomic(&docs_path, &doc_bytes)?;

    // features.csv
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["stay_id".to_string(), "label".into()];
    header.extend(layout.slot_names());
    writer.write_record(&header)?;
    for (stay, vector) in cohort.records.iter().zip(&vectors) {
        let mut row = vec![stay.stay_id.clone(), stay.label.to_string()];
        row.extend(vector.values.iter().map(|v| format!("{v}")));
        writer.write_record(&row)?;
    }
    let feat_bytes = writer
        .into_inner()
        .map_err(|e| Error::Data(format!("csv flush failed: {e}")))?;
    write_atomic(&feats_path, &feat_bytes)?;

    let manifest = BuildManifest {
        config_digest: digest,
        layout: layout.descriptor(),
        window_count: w,
        n_records: cohort.records.len(),
        n_positive: cohort.records.iter().filter(|r| r.label == 1).count(),
        diagnostics: cohort.diagnostics,
        missing_descriptions,
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');
    write_atomic(&manifest_path, &manifest_bytes)?;

    println!(
        "build: {} records, layout {}, {} excluded short-stay",
        manifest.n_records, manifest.layout, manifest.diagnostics.excluded_short_stay
    );
    Ok(manifest)
}

struct BuildArtifacts {
    manifest: BuildManifest,
    docs: Vec<DocRow>,
    features: Vec<(String, u8, Vec<f64>)>,
    vocab_spec: crate::ehr_model::VocabSpec,
}

fn load_build(cfg: &RunConfig, out_dir: &Path) -> Result<BuildArtifacts> {
    let (manifest_path, vocab_path, docs_path, feats_path, _) = build_paths(out_dir);
    let manifest: BuildManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path)
            .map_err(|_| Error::Config("no build artifacts found; run `build` first".into()))?,
    )?;
    if manifest.config_digest != cfg.digest() {
        return Err(Error::Config(
            "build cache was produced under a different config; re-run `build`".into(),
        ));
    }

    let mut docs = Vec::new();
    for (i, line) in std::fs::read_to_string(&docs_path)?.lines().enumerate() {
        let row: DocRow = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("documents.jsonl line {}: {e}", i + 1)))?;
        docs.push(row);
    }

    let mut features = Vec::new();
    let mut reader = csv::Reader::from_path(&feats_path)?;
    for record in reader.records() {
        let record = record?;
        let stay_id = record[0].to_string();
        let label: u8 = record[1]
            .parse()
            .map_err(|_| Error::Data(format!("features.csv: bad label for {stay_id}")))?;
        let values = record
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| Error::Data(format!("features.csv: bad value for {stay_id}")))?;
        features.push((stay_id, label, values));
    }

    let vocab_spec: crate::ehr_model::VocabSpec =
        serde_json::from_str(&std::fs::read_to_string(&vocab_path)?)?;
    Ok(BuildArtifacts {
        manifest,
        docs,
        features,
        vocab_spec,
    })
}

pub fn export_paths(out_dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let export = out_dir.join("export");
    (
        export.join("text_dataset.jsonl"),
        export.join("text_dataset.manifest.json"),
        export.join("tabular_dataset.csv"),
        export.join("tabular_dataset.manifest.json"),
    )
}

fn cmd_export(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let digest = cfg.digest();
    let BuildArtifacts {
        manifest,
        docs,
        features,
        vocab_spec,
    } = load_build(cfg, out_dir)?;
    if docs.len() != features.len()
        || docs
            .iter()
            .zip(&features)
            .any(|(d, (id, _, _))| &d.stay_id != id)
    {
        return Err(Error::Data(
            "build artifacts disagree on record order".into(),
        ));
    }

    let items: Vec<(String, u8)> = docs.iter().map(|d| (d.stay_id.clone(), d.label)).collect();
    let assignment = split_cohort(&items, cfg.test_fraction, cfg.seed)?;
    let test_ids: std::collections::HashSet<&str> =
        assignment.test_ids.iter().map(String::as_str).collect();
    let split_of = |id: &str| {
        if test_ids.contains(id) {
            Split::Test
        } else {
            Split::Train
        }
    };

    let make_records = |textual: bool| -> (Vec<DatasetRecord>, Vec<DatasetRecord>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (doc, (_, _, values)) in docs.iter().zip(&features) {
            let record = DatasetRecord {
                stay_id: doc.stay_id.clone(),
                label: doc.label,
                text: if textual {
                    doc.text.clone()
                } else {
                    String::new()
                },
                features: if textual { None } else { Some(values.clone()) },
                split: split_of(&doc.stay_id),
            };
            match record.split {
                Split::Train => train.push(record),
                Split::Test => test.push(record),
            }
        }
        (train, test)
    };

    let finalize =
        |(train, test): (Vec<DatasetRecord>, Vec<DatasetRecord>)| -> Result<Vec<DatasetRecord>> {
            let mut records = if cfg.oversample_train {
                oversample(&train, cfg.seed)?
            } else {
                train
            };
            records.extend(test);
            Ok(records)
        };

    let text_records = finalize(make_records(true))?;
    let tabular_records = finalize(make_records(false))?;

    // The layout is rebuilt from the cached vocabulary; its descriptor must
    // match the one recorded at build time.
    let vocab = crate::ehr_model::FeatureVocabulary::from_spec(vocab_spec)?;
    let encoder = cfg.demo_encoder();
    let layout = FeatureLayout::for_run(
        &vocab,
        &encoder,
        cfg.representation,
        cfg.cohort.window_count(),
    );
    if layout.descriptor() != manifest.layout {
        return Err(Error::Data(format!(
            "layout drift: build recorded {}, export derived {}",
            manifest.layout,
            layout.descriptor()
        )));
    }

    let (text_path, text_manifest_path, tab_path, tab_manifest_path) = export_paths(out_dir);
    let text_manifest = write_dataset(
        &text_records,
        &text_path,
        DatasetKind::TextJsonl,
        Some(&layout),
        &digest,
    )?;
    write_manifest(&text_manifest, &text_manifest_path)?;
    let tab_manifest = write_dataset(
        &tabular_records,
        &tab_path,
        DatasetKind::TabularCsv,
        Some(&layout),
        &digest,
    )?;
    write_manifest(&tab_manifest, &tab_manifest_path)?;

    println!(
        "export: {} text records ({} train / {} test), {} tabular records",
        text_manifest.n_records,
        text_manifest.n_train,
        text_manifest.n_test,
        tab_manifest.n_records
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TabularEval {
    pub representation: String,
    pub best_lambda: f64,
    pub cv: Vec<crate::evaluate::CvEntry>,
    pub test: crate::evaluate::MetricsReport,
    pub n_train: usize,
    pub n_test: usize,
}

fn cmd_eval_tabular(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let (_, _, tab_path, _) = export_paths(out_dir);
    let records = read_dataset(&tab_path, DatasetKind::TabularCsv)
        .map_err(|e| Error::Config(format!("run `export` first ({e})")))?;

    let mut train_x = Vec::new();
    let mut train_y = Vec::new();
    let mut test_x = Vec::new();
    let mut test_y = Vec::new();
    for record in &records {
        let values = record
            .features
            .clone()
            .expect("tabular records carry features");
        match record.split {
            Split::Train => {
                train_x.push(values);
                train_y.push(record.label);
            }
            Split::Test => {
                test_x.push(values);
                test_y.push(record.label);
            }
        }
    }

    let report = cross_validate(
        &train_x,
        &train_y,
        cfg.cv_folds,
        &cfg.lambda_grid,
        &cfg.logreg,
        cfg.seed,
    )?;
    let hyper = Hyper {
        l2_lambda: report.best.l2_lambda,
        ..cfg.logreg.clone()
    };
    let model = train_logreg(&train_x, &train_y, &hyper)?;
    let scores = model.predict_many(&test_x);
    let test = metrics_report(&ScoredSet::new(scores, test_y.clone())?)?;

    model.save(&out_dir.join("logreg_model.json"))?;
    let eval = TabularEval {
        representation: cfg.representation.as_str().to_string(),
        best_lambda: report.best.l2_lambda,
        cv: report.entries,
        test,
        n_train: train_x.len(),
        n_test: test_x.len(),
    };
    let mut bytes = serde_json::to_vec_pretty(&eval)?;
    bytes.push(b'\n');
    write_atomic(&out_dir.join("eval_tabular.json"), &bytes)?;
    println!(
        "eval-tabular: lambda {} auroc {:.4} auprc {:.4} (n_test {})",
        eval.best_lambda, eval.test.auroc, eval.test.auprc, eval.n_test
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ZeroshotEval {
    pub prompt: String,
    pub n_answered: usize,
    pub n_unanswered: usize,
    pub metrics: Option<crate::evaluate::MetricsReport>,
}

fn cmd_eval_zeroshot(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let (text_path, _, _, _) = export_paths(out_dir);
    let records = read_dataset(&text_path, DatasetKind::TextJsonl)
        .map_err(|e| Error::Config(format!("run `export` first ({e})")))?;
    let test_records: Vec<HarnessRecord> = records
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| HarnessRecord {
            stay_id: r.stay_id.clone(),
            text: r.text.clone(),
            label: r.label,
        })
        .collect();
    if test_records.is_empty() {
        return Err(Error::Data("no test records in the text dataset".into()));
    }

    let fixture_client;
    let http_client;
    let client: &dyn EndpointClient = match &cfg.zeroshot.client.fixture_path {
        Some(path) => {
            let fixture = load_fixture(path)?;
            let stay_ids: Vec<String> = test_records.iter().map(|r| r.stay_id.clone()).collect();
            fixture_client = FixtureEndpoint::for_records(&fixture, &stay_ids);
            &fixture_client
        }
        None => {
            http_client = HttpEndpoint::new(cfg.zeroshot.client.clone())?;
            &http_client
        }
    };

    let outcome = run_harness(
        &test_records,
        cfg.zeroshot.prompt,
        client,
        cfg.zeroshot.budget,
        &WhitespaceCounter,
        cfg.zeroshot.client.max_in_flight,
        cfg.zeroshot.unanswered_default,
    )?;

    write_audit_log(&outcome.audit, &out_dir.join("zeroshot_audit.jsonl"))?;
    let eval = ZeroshotEval {
        prompt: cfg.zeroshot.prompt.as_str().to_string(),
        n_answered: outcome.tally.n_answered,
        n_unanswered: outcome.tally.n_unanswered,
        metrics: outcome.metrics,
    };
    let mut bytes = serde_json::to_vec_pretty(&eval)?;
    bytes.push(b'\n');
    write_atomic(&out_dir.join("eval_zeroshot.json"), &bytes)?;
    println!(
        "eval-zeroshot: prompt {} answered {} unanswered {}",
        eval.prompt, eval.n_answered, eval.n_unanswered
    );
    Ok(())
}

fn cmd_report(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let tabular: Option<TabularEval> = std::fs::read_to_string(out_dir.join("eval_tabular.json"))
        .ok()
        .map(|t| serde_json::from_str(&t))
        .transpose()?;
    let zeroshot: Option<ZeroshotEval> =
        std::fs::read_to_string(out_dir.join("eval_zeroshot.json"))
            .ok()
            .map(|t| serde_json::from_str(&t))
            .transpose()?;
    if tabular.is_none() && zeroshot.is_none() {
        return Err(Error::Config(
            "nothing to report: run eval-tabular and/or eval-zeroshot first".into(),
        ));
    }

    let mut methods = serde_json::Map::new();
    if let Some(t) = &tabular {
        methods.insert(
            format!("logistic_regression_{}", t.representation),
            serde_json::json!({ "auroc": t.test.auroc, "auprc": t.test.auprc }),
        );
    }
    if let Some(z) = &zeroshot {
        let mut entry = serde_json::Map::new();
        if let Some(m) = &z.metrics {
            entry.insert("auroc".into(), serde_json::json!(m.auroc));
            entry.insert("auprc".into(), serde_json::json!(m.auprc));
        }
        entry.insert("answered".into(), serde_json::json!(z.n_answered));
        entry.insert("unanswered".into(), serde_json::json!(z.n_unanswered));
        methods.insert(
            format!("zeroshot_{}", z.prompt),
            serde_json::Value::Object(entry),
        );
    }
    let report = serde_json::json!({
        "config_digest": cfg.digest(),
        "methods": methods,
    });
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    write_atomic(&out_dir.join("report.json"), &bytes)?;
    println!("report: {} method(s) summarized", methods_len(&report));
    Ok(())
}

fn methods_len(report: &serde_json::Value) -> usize {
    report["methods"].as_object().map(|m| m.len()).unwrap_or(0)
}

/// In-process pipeline assembly used by callers that want the cohort plus
/// the per-stay derived artifacts without touching the filesystem.
pub struct BuiltCohort {
    pub records: Vec<IcuStayRecord>,
    pub vocabulary: crate::ehr_model::FeatureVocabulary,
    pub imputed: Vec<crate::features::ImputedSeries>,
    pub window_count: usize,
}

pub fn build_in_memory(cfg: &RunConfig, data_dir: &Path) -> Result<BuiltCohort> {
    let raw = load_tables(data_dir, &cfg.schema)?;
    let cohort = build_cohort(&raw, &cfg.cohort)?;
    let series: Vec<_> = cohort
        .records
        .iter()
        .map(|stay| crate::ingest::bin_events(stay, &cfg.cohort, &cohort.vocabulary))
        .collect();
    let stats = cohort_chart_means(&series);
    let imputed = series
        .iter()
        .map(|s| impute(s, cfg.impute_strategy, &stats))
        .collect();
    Ok(BuiltCohort {
        records: cohort.records,
        vocabulary: cohort.vocabulary,
        imputed,
        window_count: cfg.cohort.window_count(),
    })
}
