//! Seeded generator of schema-valid synthetic tables with planted ground
//! truth: labels, cohort size, and label-correlated chart items are all
//! recorded in a ledger so tests can assert against known answers.
//!
//! Generation is single-threaded; determinism matters more than speed here.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::emit::write_atomic;
use crate::error::{Error, Result};
use crate::ingest::SchemaConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub mortality_prevalence: f64,
    pub cond_vocab_size: usize,
    pub chart_items: usize,
    pub meds_items: usize,
    pub proc_items: usize,
    pub oute_items: usize,
    pub events_per_stay_mean: f64,
    /// How strongly the designated chart items correlate with the label
    /// (0 = pure noise, 1 = strong separation).
    pub signal_strength: f64,
    /// Fraction of stays planted shorter than the default 48 h qualifying
    /// length.
    pub short_stay_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            n_patients: 100,
            mortality_prevalence: 0.2,
            cond_vocab_size: 40,
            chart_items: 12,
            meds_items: 8,
            proc_items: 6,
            oute_items: 6,
            events_per_stay_mean: 120.0,
            signal_strength: 0.0,
            short_stay_fraction: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be positive".into()));
        }
        if !(self.mortality_prevalence > 0.0 && self.mortality_prevalence < 1.0) {
            return Err(Error::Config(
                "mortality_prevalence must be strictly inside (0, 1)".into(),
            ));
        }
        if self.cond_vocab_size == 0
            || self.chart_items == 0
            || self.meds_items == 0
            || self.proc_items == 0
            || self.oute_items == 0
        {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::Config("signal_strength must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.short_stay_fraction) {
            return Err(Error::Config(
                "short_stay_fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Everything the generator planted, for tests and downstream accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthLedger {
    pub seed: u64,
    pub n_patients: usize,
    /// Stays meeting the 48 h qualifying length.
    pub planted_cohort_size: usize,
    pub planted_labels: BTreeMap<String, u8>,
    pub realized_prevalence: f64,
    /// Chart item ids whose values shift with the label.
    pub signal_items: Vec<String>,
    /// Data rows written per logical table (headers excluded).
    pub table_rows: BTreeMap<String, usize>,
}

struct CsvBuf {
    rows: usize,
    writer: csv::Writer<Vec<u8>>,
}

impl CsvBuf {
    fn new(header: &[&str]) -> Self {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header).expect("in-memory write");
        CsvBuf { rows: 0, writer }
    }

    fn row<S: AsRef<[u8]>>(&mut self, fields: impl IntoIterator<Item = S>) {
        self.writer.write_record(fields).expect("in-memory write");
        self.rows += 1;
    }

    fn finish(self, dir: &Path, file: &str) -> Result<usize> {
        let bytes = self
            .writer
            .into_inner()
            .map_err(|e| Error::Data(format!("csv flush failed: {e}")))?;
        write_atomic(&dir.join(file), &bytes)?;
        Ok(self.rows)
    }
}

fn fmt_ts(ts: NaiveDateTime) -> String {
    ts.format("%Y-%m-%d %H:%M:%S").to_string()
}

/// Emits every CSV the ingest stage expects, plus `synth_ledger.json`.
/// Byte-identical output for identical configs.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthLedger> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let schema = SchemaConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let genders = ["male", "female"];
    let ethnicities = ["white", "black", "hispanic", "asian", "Other"];
    let insurances = ["Medicare", "Medicaid", "Private", "Other"];

    let cond_codes: Vec<String> = (0..cfg.cond_vocab_size)
        .map(|i| format!("S{i:03}"))
        .collect();
    let chart_ids: Vec<String> = (0..cfg.chart_items)
        .map(|i| format!("{}", 220_000 + i))
        .collect();
    let meds_ids: Vec<String> = (0..cfg.meds_items)
        .map(|i| format!("{}", 225_000 + i))
        .collect();
    let proc_ids: Vec<String> = (0..cfg.proc_items)
        .map(|i| format!("{}", 229_000 + i))
        .collect();
    let oute_ids: Vec<String> = (0..cfg.oute_items)
        .map(|i| format!("{}", 226_000 + i))
        .collect();

    // Per-item log-scale baselines; the first third of chart items carry the
    // planted label signal.
    let chart_mu: Vec<f64> = (0..cfg.chart_items)
        .map(|_| rng.random_range(1.0..4.5))
        .collect();
    let meds_mu: Vec<f64> = (0..cfg.meds_items)
        .map(|_| rng.random_range(0.5..3.0))
        .collect();
    let n_signal = (cfg.chart_items / 3).max(1);
    let signal_shift = 2.0 * cfg.signal_strength;

    // Which stays are planted short (below the 48 h qualifying length).
    let n_short = (cfg.n_patients as f64 * cfg.short_stay_fraction).round() as usize;
    let mut short_flags = vec![false; cfg.n_patients];
    let mut order: Vec<usize> = (0..cfg.n_patients).collect();
    order.shuffle(&mut rng);
    for &idx in order.iter().take(n_short) {
        short_flags[idx] = true;
    }

    let base = NaiveDate::from_ymd_opt(2150, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();

    let mut patients = CsvBuf::new(&["subject_id", "gender", "anchor_age", "ethnicity"]);
    let mut admissions = CsvBuf::new(&[
        "hadm_id",
        "subject_id",
        "admittime",
        "dischtime",
        "insurance",
        "hospital_expire_flag",
    ]);
    let mut icustays = CsvBuf::new(&["stay_id", "hadm_id", "intime", "outtime"]);
    let mut diagnoses = CsvBuf::new(&["hadm_id", "icd_code", "icd_version"]);
    let mut chart_events = CsvBuf::new(&["stay_id", "item_id", "charttime", "value"]);
    let mut med_events = CsvBuf::new(&["stay_id", "item_id", "charttime", "value"]);
    let mut proc_events = CsvBuf::new(&["stay_id", "item_id", "charttime", "value"]);
    let mut out_events = CsvBuf::new(&["stay_id", "item_id", "charttime", "value"]);

    let mut planted_labels = BTreeMap::new();
    let mut planted_cohort_size = 0usize;
    let mut n_pos = 0usize;

    let poisson = Poisson::new(cfg.events_per_stay_mean)
        .map_err(|e| Error::Config(format!("events_per_stay_mean: {e}")))?;
    let value_noise = LogNormal::new(0.0, 0.4).expect("valid lognormal");
    let meds_noise = LogNormal::new(0.0, 0.5).expect("valid lognormal");

    for (i, &is_short) in short_flags.iter().enumerate() {
        let subject_id = format!("P{i:05}");
        let hadm_id = format!("H{i:05}");
        let stay_id = format!("ICU{i:05}");

        let gender = genders[rng.random_range(0..genders.len())];
        let ethnicity = ethnicities[rng.random_range(0..ethnicities.len())];
        let insurance = insurances[rng.random_range(0..insurances.len())];
        let age: u32 = rng.random_range(18..=90);
        let label = u8::from(rng.random_bool(cfg.mortality_prevalence));
        n_pos += usize::from(label);

        let admittime = base + chrono::Duration::hours(i as i64);
        let intime = admittime + chrono::Duration::minutes(rng.random_range(30..120));
        let stay_hours: i64 = if is_short {
            rng.random_range(6..48)
        } else {
            rng.random_range(49..121)
        };
        let outtime = intime + chrono::Duration::hours(stay_hours);
        let dischtime = outtime + chrono::Duration::hours(12);

        patients.row([subject_id.as_str(), gender, &age.to_string(), ethnicity]);
        admissions.row([
            hadm_id.as_str(),
            &subject_id,
            &fmt_ts(admittime),
            &fmt_ts(dischtime),
            insurance,
            &label.to_string(),
        ]);
        icustays.row([
            stay_id.as_str(),
            &hadm_id,
            &fmt_ts(intime),
            &fmt_ts(outtime),
        ]);

        planted_labels.insert(stay_id.clone(), label);
        if stay_hours >= 48 {
            planted_cohort_size += 1;
        }

        let n_diag = rng.random_range(1..=5usize.min(cfg.cond_vocab_size));
        let mut picks: Vec<usize> = (0..cfg.cond_vocab_size).collect();
        picks.shuffle(&mut rng);
        for &code_idx in picks.iter().take(n_diag) {
            diagnoses.row([hadm_id.as_str(), &cond_codes[code_idx], "10"]);
        }

        let n_events = poisson.sample(&mut rng).round() as usize;
        let stay_minutes = stay_hours * 60;
        for _ in 0..n_events {
            let t = rng.random_range(0..stay_minutes);
            let charttime = intime + chrono::Duration::minutes(t);
            let roll: f64 = rng.random();
            if roll < 0.55 {
                let item = rng.random_range(0..cfg.chart_items);
                let mut mu = chart_mu[item];
                if item < n_signal && label == 1 {
                    mu += signal_shift;
                }
                let value = mu.exp() * value_noise.sample(&mut rng);
                chart_events.row([
                    stay_id.as_str(),
                    &chart_ids[item],
                    &fmt_ts(charttime),
                    &format!("{value:.4}"),
                ]);
            } else if roll < 0.75 {
                let item = rng.random_range(0..cfg.meds_items);
                let value = meds_mu[item].exp() * meds_noise.sample(&mut rng);
                med_events.row([
                    stay_id.as_str(),
                    &meds_ids[item],
                    &fmt_ts(charttime),
                    &format!("{value:.4}"),
                ]);
            } else if roll < 0.875 {
                let item = rng.random_range(0..cfg.proc_items);
                proc_events.row([stay_id.as_str(), &proc_ids[item], &fmt_ts(charttime), "1"]);
            } else {
                let item = rng.random_range(0..cfg.oute_items);
                out_events.row([stay_id.as_str(), &oute_ids[item], &fmt_ts(charttime), "1"]);
            }
        }
    }

    let mut d_items = CsvBuf::new(&["item_id", "label"]);
    for (i, id) in chart_ids.iter().enumerate() {
        d_items.row([id.as_str(), &format!("Vital sign {i}")]);
    }
    for (i, id) in meds_ids.iter().enumerate() {
        d_items.row([id.as_str(), &format!("Medication {i}")]);
    }
    for (i, id) in proc_ids.iter().enumerate() {
        d_items.row([id.as_str(), &format!("Procedure {i}")]);
    }
    for (i, id) in oute_ids.iter().enumerate() {
        d_items.row([id.as_str(), &format!("Output sample {i}")]);
    }

    let mut d_icd = CsvBuf::new(&["icd_code", "icd_version", "long_title"]);
    for (i, code) in cond_codes.iter().enumerate() {
        d_icd.row([code.as_str(), "10", &format!("Synthetic condition {i}")]);
    }

    let mut table_rows = BTreeMap::new();
    table_rows.insert(
        "patients".to_string(),
        patients.finish(out_dir, &schema.patients_file)?,
    );
    table_rows.insert(
        "admissions".to_string(),
        admissions.finish(out_dir, &schema.admissions_file)?,
    );
    table_rows.insert(
        "icustays".to_string(),
        icustays.finish(out_dir, &schema.icustays_file)?,
    );
    table_rows.insert(
        "diagnoses".to_string(),
        diagnoses.finish(out_dir, &schema.diagnoses_file)?,
    );
    table_rows.insert(
        "chart_lab_events".to_string(),
        chart_events.finish(out_dir, &schema.chart_lab_events_file)?,
    );
    table_rows.insert(
        "med_events".to_string(),
        med_events.finish(out_dir, &schema.med_events_file)?,
    );
    table_rows.insert(
        "proc_events".to_string(),
        proc_events.finish(out_dir, &schema.proc_events_file)?,
    );
    table_rows.insert(
        "out_events".to_string(),
        out_events.finish(out_dir, &schema.out_events_file)?,
    );
    table_rows.insert(
        "item_dictionary".to_string(),
        d_items.finish(out_dir, &schema.item_dictionary_file)?,
    );
    table_rows.insert(
        "icd_dictionary".to_string(),
        d_icd.finish(out_dir, &schema.icd_dictionary_file)?,
    );

    let ledger = SynthLedger {
        seed: cfg.seed,
        n_patients: cfg.n_patients,
        planted_cohort_size,
        realized_prevalence: n_pos as f64 / cfg.n_patients as f64,
        planted_labels,
        signal_items: chart_ids.iter().take(n_signal).cloned().collect(),
        table_rows,
    };
    let mut bytes = serde_json::to_vec_pretty(&ledger)?;
    bytes.push(b'\n');
    write_atomic(&out_dir.join("synth_ledger.json"), &bytes)?;
    Ok(ledger)
}

pub fn load_ledger(dir: &Path) -> Result<SynthLedger> {
    let text = std::fs::read_to_string(dir.join("synth_ledger.json"))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_cohort, load_tables, CohortConfig};

    fn read_dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(dir).unwrap() {
            let entry = entry.unwrap();
            files.insert(
                entry.file_name().to_string_lossy().to_string(),
                std::fs::read(entry.path()).unwrap(),
            );
        }
        files
    }

    #[test]
    fn seed_one_ten_patients_matches_ledger_line_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            seed: 1,
            n_patients: 10,
            ..SynthConfig::default()
        };
        let ledger = generate(&cfg, dir.path()).unwrap();
        assert_eq!(ledger.table_rows["patients"], 10);

        // Line-count oracle: data rows = physical lines minus the header.
        let schema = SchemaConfig::default();
        let checks = [
            ("patients", &schema.patients_file),
            ("admissions", &schema.admissions_file),
            ("icustays", &schema.icustays_file),
            ("diagnoses", &schema.diagnoses_file),
            ("chart_lab_events", &schema.chart_lab_events_file),
            ("med_events", &schema.med_events_file),
            ("proc_events", &schema.proc_events_file),
            ("out_events", &schema.out_events_file),
            ("item_dictionary", &schema.item_dictionary_file),
            ("icd_dictionary", &schema.icd_dictionary_file),
        ];
        for (logical, file) in checks {
            let text = std::fs::read_to_string(dir.path().join(file)).unwrap();
            let lines = text.lines().count();
            assert_eq!(
                lines,
                ledger.table_rows[logical] + 1,
                "{logical}: {lines} lines vs ledger {}",
                ledger.table_rows[logical]
            );
        }
    }

    #[test]
    fn same_seed_produces_byte_identical_files() {
        let cfg = SynthConfig {
            seed: 42,
            n_patients: 25,
            ..SynthConfig::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate(&cfg, dir_a.path()).unwrap();
        generate(&cfg, dir_b.path()).unwrap();
        assert_eq!(read_dir_files(dir_a.path()), read_dir_files(dir_b.path()));
    }

    #[test]
    fn generated_tables_build_a_clean_cohort_with_planted_truths() {
        for seed in [3, 4, 5] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = SynthConfig {
                seed,
                n_patients: 80,
                short_stay_fraction: 0.15,
                ..SynthConfig::default()
            };
            let ledger = generate(&cfg, dir.path()).unwrap();
            let raw = load_tables(dir.path(), &SchemaConfig::default()).unwrap();
            for stat in raw.stats.values() {
                assert_eq!(stat.rows_skipped, 0);
            }
            let cohort = build_cohort(&raw, &CohortConfig::default()).unwrap();
            assert_eq!(cohort.records.len(), ledger.planted_cohort_size);
            assert_eq!(
                cohort.diagnostics.excluded_short_stay,
                80 - ledger.planted_cohort_size
            );
            for record in &cohort.records {
                assert_eq!(record.label, ledger.planted_labels[&record.stay_id]);
            }
        }
    }

    #[test]
    fn planted_prevalence_within_three_sigma() {
        let dir = tempfile::tempdir().unwrap();
        let n = 600;
        let p = 0.3;
        let cfg = SynthConfig {
            seed: 9,
            n_patients: n,
            mortality_prevalence: p,
            events_per_stay_mean: 10.0,
            ..SynthConfig::default()
        };
        let ledger = generate(&cfg, dir.path()).unwrap();
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (ledger.realized_prevalence - p).abs() <= 3.0 * sigma,
            "realized {} vs planted {p} (3 sigma = {})",
            ledger.realized_prevalence,
            3.0 * sigma
        );
    }
}
