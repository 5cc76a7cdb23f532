//! Canonical domain types shared by every pipeline stage.
//!
//! All types are immutable after construction and safe to share across
//! threads. Validation never fails: violations are returned as data so the
//! caller can decide whether to abort, count, or repair.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ICD code system version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IcdVersion {
    #[serde(rename = "9")]
    Icd9,
    #[serde(rename = "10")]
    Icd10,
}

impl IcdVersion {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "9" | "ICD9" | "icd9" => Some(IcdVersion::Icd9),
            "10" | "ICD10" | "icd10" => Some(IcdVersion::Icd10),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            IcdVersion::Icd9 => "9",
            IcdVersion::Icd10 => "10",
        }
    }
}

/// The four dynamic (time-stamped) feature groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventGroup {
    ChartLab,
    Meds,
    Proc,
    Oute,
}

impl EventGroup {
    /// Fixed group ordering used for every layout and rendering decision.
    pub const ALL: [EventGroup; 4] = [
        EventGroup::ChartLab,
        EventGroup::Meds,
        EventGroup::Proc,
        EventGroup::Oute,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EventGroup::ChartLab => "CHART_LAB",
            EventGroup::Meds => "MEDS",
            EventGroup::Proc => "PROC",
            EventGroup::Oute => "OUTE",
        }
    }

    /// PROC and OUTE events are occurrence markers and must carry value 1.
    pub fn is_occurrence(&self) -> bool {
        matches!(self, EventGroup::Proc | EventGroup::Oute)
    }
}

impl fmt::Display for EventGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Static per-patient attributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientDemographics {
    pub gender: String,
    pub ethnicity: String,
    pub insurance: String,
    pub age_years: u32,
}

/// One diagnosis assigned to the hospital admission containing the stay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisCode {
    pub code: String,
    pub icd_version: IcdVersion,
}

/// One time-stamped clinical observation, administration, or occurrence.
///
/// `t_minutes` is measured from ICU admission. It is signed so that malformed
/// inputs survive long enough for [`validate_stay`] to report them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub group: EventGroup,
    pub item_id: String,
    pub t_minutes: i64,
    pub value: f64,
}

/// One ICU stay: the unit of prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcuStayRecord {
    pub stay_id: String,
    pub demographics: PatientDemographics,
    pub diagnoses: Vec<DiagnosisCode>,
    /// Sorted by `t_minutes` ascending.
    pub events: Vec<ClinicalEvent>,
    /// 1 = mortality positive class.
    pub label: u8,
}

/// Serialized form of a [`FeatureVocabulary`]; index maps are rebuilt on load.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VocabSpec {
    pub cond_codes: Vec<String>,
    pub chart_lab_items: Vec<String>,
    pub meds_items: Vec<String>,
    pub proc_items: Vec<String>,
    pub oute_items: Vec<String>,
    pub descriptions: BTreeMap<String, String>,
}

/// Ordered code/item dictionaries fixing the vector layout for COND and the
/// four dynamic groups, plus human-readable labels.
///
/// Layout indices are assigned at construction and never change for the life
/// of a run.
#[derive(Debug, Clone)]
pub struct FeatureVocabulary {
    cond_codes: Vec<String>,
    groups: [Vec<String>; 4],
    descriptions: BTreeMap<String, String>,
    cond_index: HashMap<String, usize>,
    group_index: [HashMap<String, usize>; 4],
}

impl FeatureVocabulary {
    pub fn new(
        cond_codes: Vec<String>,
        chart_lab_items: Vec<String>,
        meds_items: Vec<String>,
        proc_items: Vec<String>,
        oute_items: Vec<String>,
        descriptions: BTreeMap<String, String>,
    ) -> Result<Self> {
        let cond_index = build_index("cond_codes", &cond_codes)?;
        let groups = [chart_lab_items, meds_items, proc_items, oute_items];
        let mut group_index: [HashMap<String, usize>; 4] = Default::default();
        for (g, items) in EventGroup::ALL.iter().zip(groups.iter()) {
            group_index[group_slot(*g)] = build_index(g.name(), items)?;
        }
        Ok(FeatureVocabulary {
            cond_codes,
            groups,
            descriptions,
            cond_index,
            group_index,
        })
    }

    pub fn from_spec(spec: VocabSpec) -> Result<Self> {
        Self::new(
            spec.cond_codes,
            spec.chart_lab_items,
            spec.meds_items,
            spec.proc_items,
            spec.oute_items,
            spec.descriptions,
        )
    }

    pub fn spec(&self) -> VocabSpec {
        VocabSpec {
            cond_codes: self.cond_codes.clone(),
            chart_lab_items: self.groups[0].clone(),
            meds_items: self.groups[1].clone(),
            proc_items: self.groups[2].clone(),
            oute_items: self.groups[3].clone(),
            descriptions: self.descriptions.clone(),
        }
    }

    pub fn cond_codes(&self) -> &[String] {
        &self.cond_codes
    }

    pub fn cond_index(&self, code: &str) -> Option<usize> {
        self.cond_index.get(code).copied()
    }

    pub fn items(&self, group: EventGroup) -> &[String] {
        &self.groups[group_slot(group)]
    }

    pub fn item_index(&self, group: EventGroup, item_id: &str) -> Option<usize> {
        self.group_index[group_slot(group)].get(item_id).copied()
    }

    pub fn contains_item(&self, group: EventGroup, item_id: &str) -> bool {
        self.item_index(group, item_id).is_some()
    }

    /// Total dynamic dimension D = sum of per-group item counts.
    pub fn dynamic_dim(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// Human-readable label for an item or code, falling back to the raw
    /// identifier when no description is known.
    pub fn describe<'a>(&'a self, id: &'a str) -> &'a str {
        self.descriptions.get(id).map(String::as_str).unwrap_or(id)
    }

    pub fn has_description(&self, id: &str) -> bool {
        self.descriptions.contains_key(id)
    }
}

fn group_slot(group: EventGroup) -> usize {
    match group {
        EventGroup::ChartLab => 0,
        EventGroup::Meds => 1,
        EventGroup::Proc => 2,
        EventGroup::Oute => 3,
    }
}

fn build_index(list_name: &str, items: &[String]) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        if index.insert(item.clone(), i).is_some() {
            return Err(Error::Data(format!(
                "duplicate entry {item:?} in vocabulary list {list_name}"
            )));
        }
    }
    Ok(index)
}

/// What a validation check found wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    AgeOutOfRange,
    EmptyDemographicCode,
    EmptyDiagnosisCode,
    NegativeTimestamp,
    NonFiniteValue,
    OccurrenceValueNotOne,
    EventsUnsorted,
    BadLabel,
    UnknownItem,
    DuplicateStayId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

impl Violation {
    fn new(kind: ViolationKind, message: String) -> Self {
        Violation { kind, message }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

/// Checks every type invariant on one stay plus vocabulary membership of its
/// event items. Pure: identical inputs produce identical reports. Violations
/// are data, not failures.
pub fn validate_stay(stay: &IcuStayRecord, vocab: &FeatureVocabulary) -> Vec<Violation> {
    let mut report = Vec::new();
    let id = &stay.stay_id;

    let demo = &stay.demographics;
    if demo.age_years > 130 {
        report.push(Violation::new(
            ViolationKind::AgeOutOfRange,
            format!("stay {id}: age_years {} outside [0, 130]", demo.age_years),
        ));
    }
    for (field, value) in [
        ("gender", &demo.gender),
        ("ethnicity", &demo.ethnicity),
        ("insurance", &demo.insurance),
    ] {
        if value.is_empty() {
            report.push(Violation::new(
                ViolationKind::EmptyDemographicCode,
                format!("stay {id}: empty {field}"),
            ));
        }
    }

    for diag in &stay.diagnoses {
        if diag.code.is_empty() {
            report.push(Violation::new(
                ViolationKind::EmptyDiagnosisCode,
                format!("stay {id}: empty diagnosis code"),
            ));
        }
    }

    let mut prev_t = i64::MIN;
    let mut unsorted = false;
    for event in &stay.events {
        if event.t_minutes < 0 {
            report.push(Violation::new(
                ViolationKind::NegativeTimestamp,
                format!(
                    "stay {id}: event {} at t_minutes {}",
                    event.item_id, event.t_minutes
                ),
            ));
        }
        if !event.value.is_finite() {
            report.push(Violation::new(
                ViolationKind::NonFiniteValue,
                format!("stay {id}: event {} has non-finite value", event.item_id),
            ));
        }
        if event.group.is_occurrence() && event.value != 1.0 {
            report.push(Violation::new(
                ViolationKind::OccurrenceValueNotOne,
                format!(
                    "stay {id}: {} event {} carries value {} (must be 1)",
                    event.group, event.item_id, event.value
                ),
            ));
        }
        if !vocab.contains_item(event.group, &event.item_id) {
            report.push(Violation::new(
                ViolationKind::UnknownItem,
                format!(
                    "stay {id}: {} item {} not in vocabulary",
                    event.group, event.item_id
                ),
            ));
        }
        if event.t_minutes < prev_t {
            unsorted = true;
        }
        prev_t = event.t_minutes;
    }
    if unsorted {
        report.push(Violation::new(
            ViolationKind::EventsUnsorted,
            format!("stay {id}: events not sorted by t_minutes"),
        ));
    }

    if stay.label > 1 {
        report.push(Violation::new(
            ViolationKind::BadLabel,
            format!("stay {id}: label {} not in {{0, 1}}", stay.label),
        ));
    }

    report
}

/// Validates every stay and additionally checks stay_id uniqueness across the
/// cohort.
pub fn validate_cohort(records: &[IcuStayRecord], vocab: &FeatureVocabulary) -> Vec<Violation> {
    let mut report = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for record in records {
        *seen.entry(record.stay_id.as_str()).or_insert(0) += 1;
        report.extend(validate_stay(record, vocab));
    }
    for (stay_id, count) in seen {
        if count > 1 {
            report.push(Violation::new(
                ViolationKind::DuplicateStayId,
                format!("stay {stay_id} appears {count} times in cohort"),
            ));
        }
    }
    report.sort_by(|a, b| a.message.cmp(&b.message));
    report
}
