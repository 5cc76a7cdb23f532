//! CSV table loading, cohort assembly, labeling, and time-window binning.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::ehr_model::{
    validate_cohort, ClinicalEvent, DiagnosisCode, EventGroup, FeatureVocabulary, IcdVersion,
    IcuStayRecord, PatientDemographics,
};
use crate::error::{Error, Result};

const DATETIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Column-name mapping for the input tables. Defaults follow the MIMIC-IV
/// distribution; override any entry through the schema config JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnNames {
    pub subject_id: String,
    pub gender: String,
    pub anchor_age: String,
    pub ethnicity: String,
    pub hadm_id: String,
    pub admittime: String,
    pub dischtime: String,
    pub insurance: String,
    pub hospital_expire_flag: String,
    pub stay_id: String,
    pub intime: String,
    pub outtime: String,
    pub icd_code: String,
    pub icd_version: String,
    pub long_title: String,
    pub item_id: String,
    pub charttime: String,
    pub value: String,
    pub item_label: String,
}

impl Default for ColumnNames {
    fn default() -> Self {
        ColumnNames {
            subject_id: "subject_id".into(),
            gender: "gender".into(),
            anchor_age: "anchor_age".into(),
            ethnicity: "ethnicity".into(),
            hadm_id: "hadm_id".into(),
            admittime: "admittime".into(),
            dischtime: "dischtime".into(),
            insurance: "insurance".into(),
            hospital_expire_flag: "hospital_expire_flag".into(),
            stay_id: "stay_id".into(),
            intime: "intime".into(),
            outtime: "outtime".into(),
            icd_code: "icd_code".into(),
            icd_version: "icd_version".into(),
            long_title: "long_title".into(),
            item_id: "item_id".into(),
            charttime: "charttime".into(),
            value: "value".into(),
            item_label: "label".into(),
        }
    }
}

/// File names and column names of the expected input directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaConfig {
    pub patients_file: String,
    pub admissions_file: String,
    pub icustays_file: String,
    pub diagnoses_file: String,
    pub chart_lab_events_file: String,
    pub med_events_file: String,
    pub proc_events_file: String,
    pub out_events_file: String,
    pub item_dictionary_file: String,
    pub icd_dictionary_file: String,
    pub columns: ColumnNames,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig {
            patients_file: "patients.csv".into(),
            admissions_file: "admissions.csv".into(),
            icustays_file: "icustays.csv".into(),
            diagnoses_file: "diagnoses_icd.csv".into(),
            chart_lab_events_file: "chartlab_events.csv".into(),
            med_events_file: "med_events.csv".into(),
            proc_events_file: "proc_events.csv".into(),
            out_events_file: "out_events.csv".into(),
            item_dictionary_file: "d_items.csv".into(),
            icd_dictionary_file: "d_icd_diagnoses.csv".into(),
            columns: ColumnNames::default(),
        }
    }
}

impl SchemaConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct PatientRow {
    pub subject_id: String,
    pub gender: String,
    pub anchor_age: u32,
    pub ethnicity: String,
}

#[derive(Debug, Clone)]
pub struct AdmissionRow {
    pub hadm_id: String,
    pub subject_id: String,
    pub admittime: NaiveDateTime,
    pub dischtime: NaiveDateTime,
    pub insurance: String,
    /// None when the disposition column is empty; such stays are excluded at
    /// labeling time and counted.
    pub hospital_expire_flag: Option<u8>,
}

#[derive(Debug, Clone)]
pub struct IcuStayRow {
    pub stay_id: String,
    pub hadm_id: String,
    pub intime: NaiveDateTime,
    pub outtime: NaiveDateTime,
}

#[derive(Debug, Clone)]
pub struct DiagnosisRow {
    pub hadm_id: String,
    pub icd_code: String,
    pub icd_version: IcdVersion,
}

#[derive(Debug, Clone)]
pub struct EventRow {
    pub stay_id: String,
    pub item_id: String,
    pub charttime: NaiveDateTime,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct ItemDictRow {
    pub item_id: String,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct IcdDictRow {
    pub icd_code: String,
    pub icd_version: IcdVersion,
    pub long_title: String,
}

/// Row counts per loaded table: rows parsed vs rows skipped as malformed.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LoadStats {
    pub rows_loaded: usize,
    pub rows_skipped: usize,
}

/// All input tables in memory, plus per-table load statistics.
#[derive(Debug)]
pub struct RawTables {
    pub patients: Vec<PatientRow>,
    pub admissions: Vec<AdmissionRow>,
    pub icustays: Vec<IcuStayRow>,
    pub diagnoses: Vec<DiagnosisRow>,
    pub chart_lab_events: Vec<EventRow>,
    pub med_events: Vec<EventRow>,
    pub proc_events: Vec<EventRow>,
    pub out_events: Vec<EventRow>,
    pub item_dictionary: Vec<ItemDictRow>,
    pub icd_dictionary: Vec<IcdDictRow>,
    pub stats: BTreeMap<String, LoadStats>,
}

/// Maps logical column names to positions in one CSV header.
struct HeaderMap {
    file: String,
    positions: HashMap<String, usize>,
}

impl HeaderMap {
    fn read(reader: &mut csv::Reader<File>, file: &str) -> Result<Self> {
        let headers = reader
            .headers()
            .map_err(|e| Error::Schema(format!("{file}: unreadable header ({e})")))?;
        let positions = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_string(), i))
            .collect();
        Ok(HeaderMap {
            file: file.to_string(),
            positions,
        })
    }

    fn require(&self, column: &str) -> Result<usize> {
        self.positions.get(column).copied().ok_or_else(|| {
            Error::Schema(format!("{}: missing required column {column:?}", self.file))
        })
    }

    fn optional(&self, column: &str) -> Option<usize> {
        self.positions.get(column).copied()
    }
}

fn open_csv(dir: &Path, file: &str) -> Result<csv::Reader<File>> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(Error::Schema(format!(
            "missing input file {file:?} in {}",
            dir.display()
        )));
    }
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(File::open(path)?))
}

fn field(record: &csv::StringRecord, pos: usize) -> Option<&str> {
    record.get(pos)
}

fn parse_datetime(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), DATETIME_FORMAT).ok()
}

/// Loads and type-checks every input table. Missing files and missing
/// required columns are fatal; an unparseable cell skips just that row, and
/// every skip is counted in [`RawTables::stats`].
pub fn load_tables(dir: &Path, schema: &SchemaConfig) -> Result<RawTables> {
    let cols = &schema.columns;
    let mut stats = BTreeMap::new();

    let mut patients = Vec::new();
    {
        let mut reader = open_csv(dir, &schema.patients_file)?;
        let header = HeaderMap::read(&mut reader, &schema.patients_file)?;
        let (c_subj, c_gender, c_age, c_eth) = (
            header.require(&cols.subject_id)?,
            header.require(&cols.gender)?,
            header.require(&cols.anchor_age)?,
            header.require(&cols.ethnicity)?,
        );
        let mut skipped = 0usize;
        for record in reader.records() {
            let record = record?;
            let parsed = (|| {
                Some(PatientRow {
                    subject_id: non_empty(field(&record, c_subj)?)?,
                    gender: non_empty(field(&record, c_gender)?)?,
                    anchor_age: field(&record, c_age)?.trim().parse().ok()?,
                    ethnicity: non_empty(field(&record, c_eth)?)?,
                })
            })();
            match parsed {
                Some(row) => patients.push(row),
                None => skipped += 1,
            }
        }
        stats.insert(
            "patients".to_string(),
            LoadStats {
                rows_loaded: patients.len(),
                rows_skipped: skipped,
            },
        );
    }

    let mut admissions = Vec::new();
    {
        let mut reader = open_csv(dir, &schema.admissions_file)?;
        let header = HeaderMap::read(&mut reader, &schema.admissions_file)?;
        let (c_hadm, c_subj, c_adm, c_disch, c_ins, c_flag) = (
            header.require(&cols.hadm_id)?,
            header.require(&cols.subject_id)?,
            header.require(&cols.admittime)?,
            header.require(&cols.dischtime)?,
            header.require(&cols.insurance)?,
            header.require(&cols.hospital_expire_flag)?,
        );
        let mut skipped = 0usize;
        for record in reader.records() {
            let record = record?;
            let parsed = (|| {
                let flag_raw = field(&record, c_flag)?.trim();
                let flag = if flag_raw.is_empty() {
                    None
                } else {
                    match flag_raw {
                        "0" => Some(0),
                        "1" => Some(1),
                        _ => return None,
                    }
                };
                Some(AdmissionRow {
                    hadm_id: non_empty(field(&record, c_hadm)?)?,
                    subject_id: non_empty(field(&record, c_subj)?)?,
                    admittime: parse_datetime(field(&record, c_adm)?)?,
                    dischtime: parse_datetime(field(&record, c_disch)?)?,
                    insurance: non_empty(field(&record, c_ins)?)?,
                    hospital_expire_flag: flag,
                })
            })();
            match parsed {
                Some(row) => admissions.push(row),
                None => skipped += 1,
            }
        }
        stats.insert(
            "admissions".to_string(),
            LoadStats {
                rows_loaded: admissions.len(),
                rows_skipped: skipped,
            },
        );
    }

    let mut icustays = Vec::new();
    {
        let mut reader = open_csv(dir, &schema.icustays_file)?;
        let header = HeaderMap::read(&mut reader, &schema.icustays_file)?;
        let (c_stay, c_hadm, c_in, c_out) = (
            header.require(&cols.stay_id)?,
            header.require(&cols.hadm_id)?,
            header.require(&cols.intime)?,
            header.require(&cols.outtime)?,
        );
        let mut skipped = 0usize;
        for record in reader.records() {
            let record = record?;
            let parsed = (|| {
                Some(IcuStayRow {
                    stay_id: non_empty(field(&record, c_stay)?)?,
                    hadm_id: non_empty(field(&record, c_hadm)?)?,
                    intime: parse_datetime(field(&record, c_in)?)?,
                    outtime: parse_datetime(field(&record, c_out)?)?,
                })
            })();
            match parsed {
                Some(row) => icustays.push(row),
                None => skipped += 1,
            }
        }
        stats.insert(
            "icustays".to_string(),
            LoadStats {
                rows_loaded: icustays.len(),
                rows_skipped: skipped,
            },
        );
    }

    let mut diagnoses = Vec::new();
    {
        let mut reader = open_csv(dir, &schema.diagnoses_file)?;
        let header = HeaderMap::read(&mut reader, &schema.diagnoses_file)?;
        let (c_hadm, c_code, c_ver) = (
            header.require(&cols.hadm_id)?,
            header.require(&cols.icd_code)?,
            header.require(&cols.icd_version)?,
        );
        let mut skipped = 0usize;
        for record in reader.records() {
            let record = record?;
            let parsed = (|| {
                Some(DiagnosisRow {
                    hadm_id: non_empty(field(&record, c_hadm)?)?,
                    icd_code: non_empty(field(&record, c_code)?)?,
                    icd_version: IcdVersion::parse(field(&record, c_ver)?)?,
                })
            })();
            match parsed {
                Some(row) => diagnoses.push(row),
                None => skipped += 1,
            }
        }
        stats.insert(
            "diagnoses".to_string(),
            LoadStats {
                rows_loaded: diagnoses.len(),
                rows_skipped: skipped,
            },
        );
    }

    let mut load_events = |file: &str, logical: &str, group: EventGroup| -> Result<Vec<EventRow>> {
        let mut reader = open_csv(dir, file)?;
        let header = HeaderMap::read(&mut reader, file)?;
        let c_stay = header.require(&cols.stay_id)?;
        let c_item = header.require(&cols.item_id)?;
        let c_time = header.require(&cols.charttime)?;
        // Occurrence groups carry value 1 by construction; their value column
        // is optional and ignored when present.
        let c_value = if group.is_occurrence() {
            header.optional(&cols.value)
        } else {
            Some(header.require(&cols.value)?)
        };
        let mut rows = Vec::new();
        let mut skipped = 0usize;
        for record in reader.records() {
            let record = record?;
            let parsed = (|| {
                let value = match (group.is_occurrence(), c_value) {
                    (true, _) => 1.0,
                    (false, Some(pos)) => {
                        let v: f64 = field(&record, pos)?.trim().parse().ok()?;
                        if !v.is_finite() {
                            return None;
                        }
                        v
                    }
                    (false, None) => unreachable!("value column required above"),
                };
                Some(EventRow {
                    stay_id: non_empty(field(&record, c_stay)?)?,
                    item_id: non_empty(field(&record, c_item)?)?,
                    charttime: parse_datetime(field(&record, c_time)?)?,
                    value,
                })
            })();
            match parsed {
                Some(row) => rows.push(row),
                None => skipped += 1,
            }
        }
        stats.insert(
            logical.to_string(),
            LoadStats {
                rows_loaded: rows.len(),
                rows_skipped: skipped,
            },
        );
        Ok(rows)
    };

    let chart_lab_events = load_events(
        &schema.chart_lab_events_file,
        "chart_lab_events",
        EventGroup::ChartLab,
    )?;
    let med_events = load_events(&schema.med_events_file, "med_events", EventGroup::Meds)?;
    let proc_events = load_events(&schema.proc_events_file, "proc_events", EventGroup::Proc)?;
    let out_events = load_events(&schema.out_events_file, "out_events", EventGroup::Oute)?;

    let mut item_dictionary = Vec::new();
    {
        let mut reader = open_csv(dir, &schema.item_dictionary_file)?;
        let header = HeaderMap::read(&mut reader, &schema.item_dictionary_file)?;
        let (c_item, c_label) = (
            header.require(&cols.item_id)?,
            header.require(&cols.item_label)?,
        );
        let mut skipped = 0usize;
        for record in reader.records() {
            let record = record?;
            let parsed = (|| {
                Some(ItemDictRow {
                    item_id: non_empty(field(&record, c_item)?)?,
                    label: non_empty(field(&record, c_label)?)?,
                })
            })();
            match parsed {
                Some(row) => item_dictionary.push(row),
                None => skipped += 1,
            }
        }
        stats.insert(
            "item_dictionary".to_string(),
            LoadStats {
                rows_loaded: item_dictionary.len(),
                rows_skipped: skipped,
            },
        );
    }

    let mut icd_dictionary = Vec::new();
    {
        let mut reader = open_csv(dir, &schema.icd_dictionary_file)?;
        let header = HeaderMap::read(&mut reader, &schema.icd_dictionary_file)?;
        let (c_code, c_ver, c_title) = (
            header.require(&cols.icd_code)?,
            header.require(&cols.icd_version)?,
            header.require(&cols.long_title)?,
        );
        let mut skipped = 0usize;
        for record in reader.records() {
            let record = record?;
            let parsed = (|| {
                Some(IcdDictRow {
                    icd_code: non_empty(field(&record, c_code)?)?,
                    icd_version: IcdVersion::parse(field(&record, c_ver)?)?,
                    long_title: non_empty(field(&record, c_title)?)?,
                })
            })();
            match parsed {
                Some(row) => icd_dictionary.push(row),
                None => skipped += 1,
            }
        }
        stats.insert(
            "icd_dictionary".to_string(),
            LoadStats {
                rows_loaded: icd_dictionary.len(),
                rows_skipped: skipped,
            },
        );
    }

    for (table, stat) in &stats {
        log::info!(
            "loaded {table}: {} rows ({} skipped)",
            stat.rows_loaded,
            stat.rows_skipped
        );
    }

    Ok(RawTables {
        patients,
        admissions,
        icustays,
        diagnoses,
        chart_lab_events,
        med_events,
        proc_events,
        out_events,
        item_dictionary,
        icd_dictionary,
        stats,
    })
}

fn non_empty(s: &str) -> Option<String> {
    let t = s.trim();
    if t.is_empty() {
        None
    } else {
        Some(t.to_string())
    }
}

/// Which outcome the binary label encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    InHospitalDeath,
}

/// Cohort construction parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub observation_window_hours: u32,
    pub bin_hours: u32,
    pub label_kind: LabelKind,
    /// Defaults to `observation_window_hours` when unset.
    pub min_stay_hours: Option<u32>,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            observation_window_hours: 48,
            bin_hours: 2,
            label_kind: LabelKind::InHospitalDeath,
            min_stay_hours: None,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.observation_window_hours == 0 || self.bin_hours == 0 {
            return Err(Error::Config(
                "observation_window_hours and bin_hours must be positive".into(),
            ));
        }
        if !self.observation_window_hours.is_multiple_of(self.bin_hours) {
            return Err(Error::Config(format!(
                "bin_hours {} does not divide observation_window_hours {}",
                self.bin_hours, self.observation_window_hours
            )));
        }
        if let Some(min) = self.min_stay_hours {
            if min == 0 {
                return Err(Error::Config("min_stay_hours must be positive".into()));
            }
        }
        Ok(())
    }

    /// W, the number of time windows.
    pub fn window_count(&self) -> usize {
        (self.observation_window_hours / self.bin_hours) as usize
    }

    pub fn min_stay_hours(&self) -> u32 {
        self.min_stay_hours.unwrap_or(self.observation_window_hours)
    }

    pub fn window_minutes(&self) -> i64 {
        i64::from(self.observation_window_hours) * 60
    }

    pub fn bin_minutes(&self) -> i64 {
        i64::from(self.bin_hours) * 60
    }
}

/// Dense bins-by-items grid, row-major over bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    w: usize,
    n_items: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(w: usize, n_items: usize, fill: T) -> Self {
        Grid {
            w,
            n_items,
            data: vec![fill; w * n_items],
        }
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn get(&self, bin: usize, item: usize) -> &T {
        &self.data[bin * self.n_items + item]
    }

    pub fn get_mut(&mut self, bin: usize, item: usize) -> &mut T {
        &mut self.data[bin * self.n_items + item]
    }

    pub fn set(&mut self, bin: usize, item: usize, value: T) {
        self.data[bin * self.n_items + item] = value;
    }

    /// One bin's values across all items.
    pub fn bin_row(&self, bin: usize) -> &[T] {
        &self.data[bin * self.n_items..(bin + 1) * self.n_items]
    }
}

/// Per-group windowed grids for one stay.
///
/// CHART_LAB cells hold the mean of observed values in the bin (`None` when
/// nothing was observed); MEDS cells hold the summed administered quantity;
/// PROC/OUTE cells hold 0/1 occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeBinnedSeries {
    pub w: usize,
    pub chart_lab: Grid<Option<f64>>,
    pub meds: Grid<f64>,
    pub proc: Grid<f64>,
    pub oute: Grid<f64>,
}

/// Bins a validated stay's in-window events. Bins are left-closed
/// right-open: an event at exactly t = k * bin_hours lands in bin k.
pub fn bin_events(
    stay: &IcuStayRecord,
    cfg: &CohortConfig,
    vocab: &FeatureVocabulary,
) -> TimeBinnedSeries {
    let w = cfg.window_count();
    let bin_minutes = cfg.bin_minutes();
    let window_minutes = cfg.window_minutes();

    let mut chart_sum = Grid::new(w, vocab.items(EventGroup::ChartLab).len(), 0.0f64);
    let mut chart_count = Grid::new(w, vocab.items(EventGroup::ChartLab).len(), 0u32);
    let mut meds = Grid::new(w, vocab.items(EventGroup::Meds).len(), 0.0f64);
    let mut proc = Grid::new(w, vocab.items(EventGroup::Proc).len(), 0.0f64);
    let mut oute = Grid::new(w, vocab.items(EventGroup::Oute).len(), 0.0f64);

    for event in &stay.events {
        if event.t_minutes < 0 || event.t_minutes >= window_minutes {
            continue;
        }
        let bin = (event.t_minutes / bin_minutes) as usize;
        let Some(item) = vocab.item_index(event.group, &event.item_id) else {
            continue;
        };
        match event.group {
            EventGroup::ChartLab => {
                *chart_sum.get_mut(bin, item) += event.value;
                *chart_count.get_mut(bin, item) += 1;
            }
            EventGroup::Meds => *meds.get_mut(bin, item) += event.value,
            EventGroup::Proc => proc.set(bin, item, 1.0),
            EventGroup::Oute => oute.set(bin, item, 1.0),
        }
    }

    let n_chart = chart_sum.n_items();
    let mut chart_lab = Grid::new(w, n_chart, None);
    for bin in 0..w {
        for item in 0..n_chart {
            let count = *chart_count.get(bin, item);
            if count > 0 {
                chart_lab.set(bin, item, Some(chart_sum.get(bin, item) / f64::from(count)));
            }
        }
    }

    TimeBinnedSeries {
        w,
        chart_lab,
        meds,
        proc,
        oute,
    }
}

/// Why stays were dropped during cohort construction.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CohortDiagnostics {
    pub stays_seen: usize,
    pub excluded_missing_admission: usize,
    pub excluded_missing_patient: usize,
    pub excluded_not_first_stay: usize,
    pub excluded_short_stay: usize,
    pub excluded_missing_disposition: usize,
    pub events_outside_window: usize,
    pub retained: usize,
}

/// The assembled cohort: validated records sorted by stay_id, the
/// vocabulary built from the full cohort, and exclusion diagnostics.
#[derive(Debug)]
pub struct Cohort {
    pub records: Vec<IcuStayRecord>,
    pub vocabulary: FeatureVocabulary,
    pub diagnostics: CohortDiagnostics,
}

/// Label for one stay under the configured label kind. `None` means the
/// required disposition is missing and the stay must be excluded.
pub fn assign_label(
    _stay: &IcuStayRow,
    admission: &AdmissionRow,
    cfg: &CohortConfig,
) -> Option<u8> {
    match cfg.label_kind {
        LabelKind::InHospitalDeath => admission.hospital_expire_flag,
    }
}

/// Builds one record per qualifying ICU stay.
///
/// Qualifying means: the stay resolves to an admission and patient, it is the
/// first ICU stay of its hospital admission, its length is at least
/// `min_stay_hours`, and its admission carries a disposition. Events outside
/// the observation window are discarded. The vocabulary is built from the
/// full cohort. Output ordering is the deterministic sort by stay_id.
pub fn build_cohort(raw: &RawTables, cfg: &CohortConfig) -> Result<Cohort> {
    cfg.validate()?;

    let patients: HashMap<&str, &PatientRow> = raw
        .patients
        .iter()
        .map(|p| (p.subject_id.as_str(), p))
        .collect();
    let admissions: HashMap<&str, &AdmissionRow> = raw
        .admissions
        .iter()
        .map(|a| (a.hadm_id.as_str(), a))
        .collect();

    // First ICU stay per hospital admission, by (intime, stay_id).
    let mut first_stay: HashMap<&str, &IcuStayRow> = HashMap::new();
    for stay in &raw.icustays {
        first_stay
            .entry(stay.hadm_id.as_str())
            .and_modify(|current| {
                if (stay.intime, &stay.stay_id) < (current.intime, &current.stay_id) {
                    *current = stay;
                }
            })
            .or_insert(stay);
    }

    let mut diagnoses_by_adm: HashMap<&str, Vec<&DiagnosisRow>> = HashMap::new();
    for diag in &raw.diagnoses {
        diagnoses_by_adm
            .entry(diag.hadm_id.as_str())
            .or_default()
            .push(diag);
    }

    let mut events_by_stay: HashMap<&str, Vec<(EventGroup, &EventRow)>> = HashMap::new();
    let tagged = [
        (EventGroup::ChartLab, &raw.chart_lab_events),
        (EventGroup::Meds, &raw.med_events),
        (EventGroup::Proc, &raw.proc_events),
        (EventGroup::Oute, &raw.out_events),
    ];
    for (group, rows) in tagged {
        for row in rows {
            events_by_stay
                .entry(row.stay_id.as_str())
                .or_default()
                .push((group, row));
        }
    }

    let mut diag = CohortDiagnostics {
        stays_seen: raw.icustays.len(),
        ..CohortDiagnostics::default()
    };
    let min_stay_minutes = i64::from(cfg.min_stay_hours()) * 60;
    let window_minutes = cfg.window_minutes();

    let mut stays: Vec<&IcuStayRow> = raw.icustays.iter().collect();
    stays.sort_by(|a, b| a.stay_id.cmp(&b.stay_id));

    let mut records = Vec::new();
    for stay in stays {
        let is_first = first_stay
            .get(stay.hadm_id.as_str())
            .is_some_and(|f| f.stay_id == stay.stay_id);
        if !is_first {
            diag.excluded_not_first_stay += 1;
            continue;
        }
        let Some(admission) = admissions.get(stay.hadm_id.as_str()) else {
            diag.excluded_missing_admission += 1;
            continue;
        };
        let Some(patient) = patients.get(admission.subject_id.as_str()) else {
            diag.excluded_missing_patient += 1;
            continue;
        };
        if (stay.outtime - stay.intime).num_minutes() < min_stay_minutes {
            diag.excluded_short_stay += 1;
            continue;
        }
        let Some(label) = assign_label(stay, admission, cfg) else {
            diag.excluded_missing_disposition += 1;
            continue;
        };

        let diagnoses = diagnoses_by_adm
            .get(stay.hadm_id.as_str())
            .map(|rows| {
                rows.iter()
                    .map(|d| DiagnosisCode {
                        code: d.icd_code.clone(),
                        icd_version: d.icd_version,
                    })
                    .collect()
            })
            .unwrap_or_default();

        let mut events: Vec<ClinicalEvent> = Vec::new();
        if let Some(rows) = events_by_stay.get(stay.stay_id.as_str()) {
            for (group, row) in rows {
                // Floor to whole minutes so sub-minute pre-admission events
                // land at t = -1 and are excluded, not rounded into bin 0.
                let t_minutes = (row.charttime - stay.intime).num_seconds().div_euclid(60);
                if !(0..window_minutes).contains(&t_minutes) {
                    diag.events_outside_window += 1;
                    continue;
                }
                events.push(ClinicalEvent {
                    group: *group,
                    item_id: row.item_id.clone(),
                    t_minutes,
                    value: row.value,
                });
            }
        }
        events.sort_by(|a, b| {
            (a.t_minutes, a.group, &a.item_id).cmp(&(b.t_minutes, b.group, &b.item_id))
        });

        records.push(IcuStayRecord {
            stay_id: stay.stay_id.clone(),
            demographics: PatientDemographics {
                gender: patient.gender.clone(),
                ethnicity: patient.ethnicity.clone(),
                insurance: admission.insurance.clone(),
                age_years: patient.anchor_age,
            },
            diagnoses,
            events,
            label,
        });
    }

    diag.retained = records.len();
    if records.is_empty() {
        return Err(Error::EmptyCohort(
            serde_json::to_string(&diag).unwrap_or_else(|_| format!("{diag:?}")),
        ));
    }

    let vocabulary = build_vocabulary(&records, raw)?;

    let violations = validate_cohort(&records, &vocabulary);
    if !violations.is_empty() {
        return Err(Error::Data(format!(
            "cohort failed validation with {} violations; first: {}",
            violations.len(),
            violations[0]
        )));
    }

    Ok(Cohort {
        records,
        vocabulary,
        diagnostics: diag,
    })
}

/// Ordered vocabulary from the full cohort: diagnosis codes and in-window
/// item ids actually observed, sorted for run-stable layout indices.
fn build_vocabulary(records: &[IcuStayRecord], raw: &RawTables) -> Result<FeatureVocabulary> {
    let mut cond: BTreeSet<&str> = BTreeSet::new();
    let mut groups: [BTreeSet<&str>; 4] = Default::default();
    for record in records {
        for diagnosis in &record.diagnoses {
            cond.insert(diagnosis.code.as_str());
        }
        for event in &record.events {
            let slot = match event.group {
                EventGroup::ChartLab => 0,
                EventGroup::Meds => 1,
                EventGroup::Proc => 2,
                EventGroup::Oute => 3,
            };
            groups[slot].insert(event.item_id.as_str());
        }
    }

    let mut descriptions: BTreeMap<String, String> = BTreeMap::new();
    for row in &raw.item_dictionary {
        descriptions.insert(row.item_id.clone(), row.label.clone());
    }
    // ICD-10 titles win when the same code string appears under both versions.
    for row in &raw.icd_dictionary {
        if row.icd_version == IcdVersion::Icd9 {
            descriptions
                .entry(row.icd_code.clone())
                .or_insert_with(|| row.long_title.clone());
        }
    }
    for row in &raw.icd_dictionary {
        if row.icd_version == IcdVersion::Icd10 {
            descriptions.insert(row.icd_code.clone(), row.long_title.clone());
        }
    }

    let to_vec = |set: &BTreeSet<&str>| set.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    FeatureVocabulary::new(
        to_vec(&cond),
        to_vec(&groups[0]),
        to_vec(&groups[1]),
        to_vec(&groups[2]),
        to_vec(&groups[3]),
        descriptions,
    )
}
