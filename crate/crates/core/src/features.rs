//! Numeric feature representations.
//!
//! Two layouts share the same DEMO and COND prefix and differ in the dynamic
//! block: `Rep1` concatenates one block per time window (window-major),
//! `Rep2` averages each item across the windows.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ehr_model::{
    DiagnosisCode, EventGroup, FeatureVocabulary, IcuStayRecord, PatientDemographics,
};
use crate::error::{Error, Result};
use crate::ingest::{Grid, TimeBinnedSeries};

/// Which dynamic-block layout a vector uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepMode {
    Rep1,
    Rep2,
}

impl RepMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rep1" => Some(RepMode::Rep1),
            "rep2" => Some(RepMode::Rep2),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RepMode::Rep1 => "rep1",
            RepMode::Rep2 => "rep2",
        }
    }
}

/// Age-bin edges. The default is decades: [0,10), [10,20), ..., [120,130].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeBins {
    edges: Vec<u32>,
}

impl Default for AgeBins {
    fn default() -> Self {
        AgeBins {
            edges: (1..=13).map(|d| d * 10).collect(),
        }
    }
}

impl AgeBins {
    /// `edges[i]` is the exclusive upper bound of bin i; ages at or above the
    /// final edge fall into the last bin.
    pub fn new(edges: Vec<u32>) -> Result<Self> {
        let bins = AgeBins { edges };
        bins.validate()?;
        Ok(bins)
    }

    /// Deserialized bins bypass [`AgeBins::new`]; re-check before use.
    pub fn validate(&self) -> Result<()> {
        if self.edges.is_empty() || self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "age bin edges must be non-empty and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn bin_index(&self, age_years: u32) -> usize {
        let idx = self.edges.iter().filter(|e| age_years >= **e).count();
        idx.min(self.edges.len() - 1)
    }

    pub fn count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[u32] {
        &self.edges
    }
}

/// Categorical vocabularies for the three demographic attributes. The
/// reserved code "Other" is always present; unknown values map onto it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoVocab {
    pub genders: Vec<String>,
    pub ethnicities: Vec<String>,
    pub insurances: Vec<String>,
}

pub const OTHER_CODE: &str = "Other";

impl Default for DemoVocab {
    fn default() -> Self {
        DemoVocab::new(
            vec!["male".into(), "female".into()],
            vec![
                "white".into(),
                "black".into(),
                "hispanic".into(),
                "asian".into(),
            ],
            vec!["Medicare".into(), "Medicaid".into(), "Private".into()],
        )
    }
}

impl DemoVocab {
    pub fn new(genders: Vec<String>, ethnicities: Vec<String>, insurances: Vec<String>) -> Self {
        let ensure_other = |mut list: Vec<String>| {
            if !list.iter().any(|c| c == OTHER_CODE) {
                list.push(OTHER_CODE.to_string());
            }
            list
        };
        DemoVocab {
            genders: ensure_other(genders),
            ethnicities: ensure_other(ethnicities),
            insurances: ensure_other(insurances),
        }
    }

    fn index_of(list: &[String], code: &str) -> usize {
        list.iter()
            .position(|c| c == code)
            .unwrap_or_else(|| list.iter().position(|c| c == OTHER_CODE).unwrap_or(0))
    }
}

/// Demographic encoder: one integer-index slot per categorical attribute plus
/// one age-bin slot. Width is constant for a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DemoEncoder {
    pub vocab: DemoVocab,
    pub age_bins: AgeBins,
}

impl DemoEncoder {
    pub fn width(&self) -> usize {
        4
    }

    pub fn slot_names(&self) -> Vec<String> {
        vec![
            "demo_gender".into(),
            "demo_ethnicity".into(),
            "demo_insurance".into(),
            "demo_age_bin".into(),
        ]
    }
}

/// DEMO segment values. Unknown categorical codes map to the reserved
/// "Other" index and never fail.
pub fn encode_demographics(demo: &PatientDemographics, encoder: &DemoEncoder) -> Vec<f64> {
    vec![
        DemoVocab::index_of(&encoder.vocab.genders, &demo.gender) as f64,
        DemoVocab::index_of(&encoder.vocab.ethnicities, &demo.ethnicity) as f64,
        DemoVocab::index_of(&encoder.vocab.insurances, &demo.insurance) as f64,
        encoder.age_bins.bin_index(demo.age_years) as f64,
    ]
}

/// COND one-hot segment over the vocabulary's ordered codes. Duplicates
/// collapse to 1; codes absent from the vocabulary are ignored and counted.
pub fn encode_diagnoses(codes: &[DiagnosisCode], vocab: &FeatureVocabulary) -> (Vec<f64>, usize) {
    let mut segment = vec![0.0; vocab.cond_codes().len()];
    let mut unknown = 0usize;
    for code in codes {
        match vocab.cond_index(&code.code) {
            Some(idx) => segment[idx] = 1.0,
            None => unknown += 1,
        }
    }
    (segment, unknown)
}

/// How missing CHART_LAB cells are completed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeStrategy {
    /// Most recent earlier bin's value, else cohort mean, else 0.
    CarrySample,
    /// Stay-level mean of the item's observed bins, else cohort mean, else 0.
    MeanFill,
}

/// Cohort-wide per-item CHART_LAB means over observed cells, used as the
/// imputation fallback. `None` when an item was never observed anywhere.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CohortStats {
    pub chart_item_means: Vec<Option<f64>>,
}

pub fn cohort_chart_means(series_list: &[TimeBinnedSeries]) -> CohortStats {
    let n_items = series_list
        .first()
        .map(|s| s.chart_lab.n_items())
        .unwrap_or(0);
    let mut sums = vec![0.0f64; n_items];
    let mut counts = vec![0u64; n_items];
    for series in series_list {
        for bin in 0..series.w {
            for item in 0..n_items {
                if let Some(v) = series.chart_lab.get(bin, item) {
                    sums[item] += v;
                    counts[item] += 1;
                }
            }
        }
    }
    CohortStats {
        chart_item_means: sums
            .iter()
            .zip(&counts)
            .map(|(s, c)| if *c > 0 { Some(s / *c as f64) } else { None })
            .collect(),
    }
}

/// A stay's grids after imputation: every CHART_LAB cell holds a finite
/// value, plus a per-item flag recording whether the item was observed in any
/// bin before imputation.
#[derive(Debug, Clone)]
pub struct ImputedSeries {
    pub w: usize,
    pub chart_lab: Grid<f64>,
    pub chart_observed_any: Vec<bool>,
    pub meds: Grid<f64>,
    pub proc: Grid<f64>,
    pub oute: Grid<f64>,
}

/// Completes the CHART_LAB grid under the chosen strategy; MEDS, PROC, and
/// OUTE pass through unchanged. The fallback chain ends at 0 so no NaN can
/// be emitted.
pub fn impute(
    series: &TimeBinnedSeries,
    strategy: ImputeStrategy,
    stats: &CohortStats,
) -> ImputedSeries {
    let w = series.w;
    let n_items = series.chart_lab.n_items();
    let mut chart = Grid::new(w, n_items, 0.0f64);
    let mut observed_any = vec![false; n_items];

    for (item, observed_flag) in observed_any.iter_mut().enumerate() {
        let observed: Vec<(usize, f64)> = (0..w)
            .filter_map(|bin| series.chart_lab.get(bin, item).map(|v| (bin, v)))
            .collect();
        *observed_flag = !observed.is_empty();
        let cohort_fallback = stats
            .chart_item_means
            .get(item)
            .copied()
            .flatten()
            .unwrap_or(0.0);
        match strategy {
            ImputeStrategy::CarrySample => {
                let mut last: Option<f64> = None;
                for bin in 0..w {
                    let cell = match series.chart_lab.get(bin, item) {
                        Some(v) => {
                            last = Some(*v);
                            *v
                        }
                        None => last.unwrap_or(cohort_fallback),
                    };
                    chart.set(bin, item, cell);
                }
            }
            ImputeStrategy::MeanFill => {
                let stay_mean = if observed.is_empty() {
                    cohort_fallback
                } else {
                    observed.iter().map(|(_, v)| v).sum::<f64>() / observed.len() as f64
                };
                for bin in 0..w {
                    let cell = series.chart_lab.get(bin, item).unwrap_or(stay_mean);
                    chart.set(bin, item, cell);
                }
            }
        }
    }

    ImputedSeries {
        w,
        chart_lab: chart,
        chart_observed_any: observed_any,
        meds: series.meds.clone(),
        proc: series.proc.clone(),
        oute: series.oute.clone(),
    }
}

/// Segment widths and slot names of one representation.
///
/// The dimension contract: `total_dim(Rep1) = demo + cond + W * D` and
/// `total_dim(Rep2) = demo + cond + D`, with D the summed dynamic group
/// sizes. Segments are contiguous: DEMO, COND, then the dynamic block(s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub mode: RepMode,
    pub w: usize,
    demo_names: Vec<String>,
    cond_names: Vec<String>,
    chart_names: Vec<String>,
    meds_names: Vec<String>,
    proc_names: Vec<String>,
    oute_names: Vec<String>,
}

impl FeatureLayout {
    /// Layout for a concrete run: names come from the vocabulary and the
    /// demographic encoder.
    pub fn for_run(vocab: &FeatureVocabulary, demo: &DemoEncoder, mode: RepMode, w: usize) -> Self {
        FeatureLayout {
            mode,
            w,
            demo_names: demo.slot_names(),
            cond_names: vocab.cond_codes().to_vec(),
            chart_names: vocab.items(EventGroup::ChartLab).to_vec(),
            meds_names: vocab.items(EventGroup::Meds).to_vec(),
            proc_names: vocab.items(EventGroup::Proc).to_vec(),
            oute_names: vocab.items(EventGroup::Oute).to_vec(),
        }
    }

    /// Layout from explicit segment widths, with generated slot names. The
    /// dynamic sizes are given per group in the fixed group order.
    pub fn with_dims(
        demo_width: usize,
        cond_len: usize,
        dynamic: [usize; 4],
        mode: RepMode,
        w: usize,
    ) -> Self {
        let gen = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i}")).collect();
        FeatureLayout {
            mode,
            w,
            demo_names: gen("demo", demo_width),
            cond_names: gen("cond", cond_len),
            chart_names: gen("chart", dynamic[0]),
            meds_names: gen("meds", dynamic[1]),
            proc_names: gen("proc", dynamic[2]),
            oute_names: gen("oute", dynamic[3]),
        }
    }

    pub fn demo_width(&self) -> usize {
        self.demo_names.len()
    }

    pub fn cond_len(&self) -> usize {
        self.cond_names.len()
    }

    pub fn group_len(&self, group: EventGroup) -> usize {
        match group {
            EventGroup::ChartLab => self.chart_names.len(),
            EventGroup::Meds => self.meds_names.len(),
            EventGroup::Proc => self.proc_names.len(),
            EventGroup::Oute => self.oute_names.len(),
        }
    }

    /// D, the per-window dynamic dimension.
    pub fn dynamic_dim(&self) -> usize {
        EventGroup::ALL.iter().map(|g| self.group_len(*g)).sum()
    }

    pub fn dynamic_offset(&self) -> usize {
        self.demo_width() + self.cond_len()
    }

    pub fn total_dim(&self) -> usize {
        let d = self.dynamic_dim();
        self.dynamic_offset()
            + match self.mode {
                RepMode::Rep1 => self.w * d,
                RepMode::Rep2 => d,
            }
    }

    /// Compact identifier stamped into manifests.
    pub fn descriptor(&self) -> String {
        format!(
            "{},w={},demo={},cond={},chart={},meds={},proc={},oute={},dim={}",
            self.mode.as_str(),
            self.w,
            self.demo_width(),
            self.cond_len(),
            self.chart_names.len(),
            self.meds_names.len(),
            self.proc_names.len(),
            self.oute_names.len(),
            self.total_dim()
        )
    }

    /// Header names, one per slot, in layout order.
    pub fn slot_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.total_dim());
        names.extend(self.demo_names.iter().cloned());
        names.extend(self.cond_names.iter().map(|c| format!("cond_{c}")));
        let dynamic_names = |out: &mut Vec<String>, window: Option<usize>| {
            let groups = [
                ("chart", &self.chart_names),
                ("meds", &self.meds_names),
                ("proc", &self.proc_names),
                ("oute", &self.oute_names),
            ];
            for (prefix, items) in groups {
                for item in items {
                    match window {
                        Some(k) => out.push(format!("w{k}_{prefix}_{item}")),
                        None => out.push(format!("{prefix}_{item}")),
                    }
                }
            }
        };
        match self.mode {
            RepMode::Rep1 => {
                for k in 0..self.w {
                    dynamic_names(&mut names, Some(k));
                }
            }
            RepMode::Rep2 => dynamic_names(&mut names, None),
        }
        names
    }

    fn matches_vocab(&self, vocab: &FeatureVocabulary, demo: &DemoEncoder) -> bool {
        self.demo_width() == demo.width()
            && self.cond_len() == vocab.cond_codes().len()
            && EventGroup::ALL
                .iter()
                .all(|g| self.group_len(*g) == vocab.items(*g).len())
    }
}

/// A stay's numeric representation plus the layout it was built against.
#[derive(Debug, Clone)]
pub struct FeatureVector {
    pub layout: Arc<FeatureLayout>,
    pub values: Vec<f64>,
}

/// Concatenates DEMO, COND, and the dynamic block(s) for one stay.
///
/// Rep1 emits the window-major concatenation (all items of window 0, then
/// window 1, ...); Rep2 emits each item's mean across the W windows.
pub fn assemble(
    stay: &IcuStayRecord,
    series: &ImputedSeries,
    layout: &Arc<FeatureLayout>,
    vocab: &FeatureVocabulary,
    demo: &DemoEncoder,
) -> Result<FeatureVector> {
    if !layout.matches_vocab(vocab, demo) {
        return Err(Error::Data(format!(
            "layout {} does not match vocabulary/encoder dimensions",
            layout.descriptor()
        )));
    }
    if series.w != layout.w {
        return Err(Error::Data(format!(
            "series has {} windows, layout expects {}",
            series.w, layout.w
        )));
    }

    let mut values = Vec::with_capacity(layout.total_dim());
    values.extend(encode_demographics(&stay.demographics, demo));
    let (cond, _unknown) = encode_diagnoses(&stay.diagnoses, vocab);
    values.extend(cond);

    let grids = [&series.chart_lab, &series.meds, &series.proc, &series.oute];
    match layout.mode {
        RepMode::Rep1 => {
            for bin in 0..series.w {
                for grid in grids {
                    values.extend_from_slice(grid.bin_row(bin));
                }
            }
        }
        RepMode::Rep2 => {
            for grid in grids {
                for item in 0..grid.n_items() {
                    let sum: f64 = (0..series.w).map(|bin| grid.get(bin, item)).sum();
                    values.push(sum / series.w as f64);
                }
            }
        }
    }

    debug_assert_eq!(values.len(), layout.total_dim());
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "non-finite feature value for stay {}",
            stay.stay_id
        )));
    }
    Ok(FeatureVector {
        layout: Arc::clone(layout),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr_model::{ClinicalEvent, IcdVersion};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn demo(age: u32) -> PatientDemographics {
        PatientDemographics {
            gender: "male".into(),
            ethnicity: "white".into(),
            insurance: OTHER_CODE.into(),
            age_years: age,
        }
    }

    #[test]
    fn demographics_encode_to_index_slots() {
        let encoder = DemoEncoder::default();
        let values = encode_demographics(&demo(55), &encoder);
        assert_eq!(values, vec![0.0, 0.0, 3.0, 5.0]); // Other is index 3 of insurances
        assert_eq!(values.len(), encoder.width());
    }

    #[test]
    fn age_zero_maps_to_bin_zero_and_top_age_clamps() {
        let bins = AgeBins::default();
        assert_eq!(bins.bin_index(0), 0);
        assert_eq!(bins.bin_index(9), 0);
        assert_eq!(bins.bin_index(10), 1);
        assert_eq!(bins.bin_index(55), 5);
        assert_eq!(bins.bin_index(130), 12);
    }

    #[test]
    fn unknown_demographic_codes_map_to_other() {
        let encoder = DemoEncoder::default();
        let mut d = demo(30);
        d.ethnicity = "unheard-of".into();
        let values = encode_demographics(&d, &encoder);
        let other_idx = encoder
            .vocab
            .ethnicities
            .iter()
            .position(|c| c == OTHER_CODE)
            .unwrap() as f64;
        assert_eq!(values[1], other_idx);
    }

    fn cond_vocab(n: usize) -> FeatureVocabulary {
        FeatureVocabulary::new(
            (0..n).map(|i| format!("C{i:03}")).collect(),
            vec![],
            vec![],
            vec![],
            vec![],
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn empty_diagnosis_list_is_all_zero() {
        let vocab = cond_vocab(5);
        let (seg, unknown) = encode_diagnoses(&[], &vocab);
        assert_eq!(seg, vec![0.0; 5]);
        assert_eq!(unknown, 0);
    }

    #[test]
    fn duplicate_codes_collapse_and_unknown_codes_count() {
        let vocab = cond_vocab(5);
        let dup = DiagnosisCode {
            code: "C002".into(),
            icd_version: IcdVersion::Icd10,
        };
        let missing = DiagnosisCode {
            code: "ZZZ".into(),
            icd_version: IcdVersion::Icd9,
        };
        let (seg, unknown) = encode_diagnoses(&[dup.clone(), dup, missing], &vocab);
        assert_eq!(seg.iter().sum::<f64>(), 1.0);
        assert_eq!(seg[2], 1.0);
        assert_eq!(unknown, 1);
    }

    #[test]
    fn random_subset_one_hot_matches_linear_scan_oracle() {
        let vocab = cond_vocab(50);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut picks: Vec<usize> = (0..50).collect();
        picks.shuffle(&mut rng);
        picks.truncate(10);
        let codes: Vec<DiagnosisCode> = picks
            .iter()
            .map(|i| DiagnosisCode {
                code: format!("C{i:03}"),
                icd_version: IcdVersion::Icd10,
            })
            .collect();
        let (seg, unknown) = encode_diagnoses(&codes, &vocab);
        assert_eq!(unknown, 0);
        // Oracle: linear scan for each vocabulary position.
        for (pos, code) in vocab.cond_codes().iter().enumerate() {
            let expected = if codes.iter().any(|c| &c.code == code) {
                1.0
            } else {
                0.0
            };
            assert_eq!(seg[pos], expected, "slot {pos}");
        }
        assert_eq!(seg.iter().sum::<f64>(), 10.0);
    }

    fn chart_only_series(cells: &[(usize, f64)], w: usize) -> TimeBinnedSeries {
        let mut chart = Grid::new(w, 1, None);
        for (bin, v) in cells {
            chart.set(*bin, 0, Some(*v));
        }
        TimeBinnedSeries {
            w,
            chart_lab: chart,
            meds: Grid::new(w, 0, 0.0),
            proc: Grid::new(w, 0, 0.0),
            oute: Grid::new(w, 0, 0.0),
        }
    }

    #[test]
    fn carry_sample_forward_fills() {
        let series = chart_only_series(&[(0, 80.0)], 4);
        let imputed = impute(
            &series,
            ImputeStrategy::CarrySample,
            &CohortStats::default(),
        );
        let row: Vec<f64> = (0..4).map(|b| *imputed.chart_lab.get(b, 0)).collect();
        assert_eq!(row, vec![80.0, 80.0, 80.0, 80.0]);
        assert!(imputed.chart_observed_any[0]);
    }

    #[test]
    fn mean_fill_uses_stay_mean() {
        let series = chart_only_series(&[(0, 60.0), (2, 80.0)], 4);
        let imputed = impute(&series, ImputeStrategy::MeanFill, &CohortStats::default());
        let row: Vec<f64> = (0..4).map(|b| *imputed.chart_lab.get(b, 0)).collect();
        assert_eq!(row, vec![60.0, 70.0, 80.0, 70.0]);
    }

    #[test]
    fn never_observed_item_falls_back_to_zero() {
        let series = chart_only_series(&[], 4);
        for strategy in [ImputeStrategy::CarrySample, ImputeStrategy::MeanFill] {
            let imputed = impute(&series, strategy, &CohortStats::default());
            let row: Vec<f64> = (0..4).map(|b| *imputed.chart_lab.get(b, 0)).collect();
            assert_eq!(row, vec![0.0; 4]);
            assert!(!imputed.chart_observed_any[0]);
        }
    }

    #[test]
    fn carry_sample_missing_prefix_uses_cohort_mean() {
        let series = chart_only_series(&[(2, 90.0)], 4);
        let stats = CohortStats {
            chart_item_means: vec![Some(70.0)],
        };
        let imputed = impute(&series, ImputeStrategy::CarrySample, &stats);
        let row: Vec<f64> = (0..4).map(|b| *imputed.chart_lab.get(b, 0)).collect();
        assert_eq!(row, vec![70.0, 70.0, 90.0, 90.0]);
    }

    fn full_vocab() -> FeatureVocabulary {
        FeatureVocabulary::new(
            vec!["C000".into(), "C001".into()],
            vec!["hr".into(), "bp".into()],
            vec!["drugA".into()],
            vec!["p1".into()],
            vec!["o1".into()],
            BTreeMap::new(),
        )
        .unwrap()
    }

    fn random_imputed(rng: &mut ChaCha8Rng, w: usize) -> ImputedSeries {
        let mut chart = Grid::new(w, 2, 0.0);
        let mut meds = Grid::new(w, 1, 0.0);
        let mut proc = Grid::new(w, 1, 0.0);
        let mut oute = Grid::new(w, 1, 0.0);
        for bin in 0..w {
            for item in 0..2 {
                chart.set(bin, item, rng.random_range(0.0..150.0));
            }
            meds.set(bin, 0, rng.random_range(0.0..20.0));
            proc.set(bin, 0, f64::from(rng.random_bool(0.3)));
            oute.set(bin, 0, f64::from(rng.random_bool(0.3)));
        }
        ImputedSeries {
            w,
            chart_lab: chart,
            chart_observed_any: vec![true, true],
            meds,
            proc,
            oute,
        }
    }

    fn stay() -> IcuStayRecord {
        IcuStayRecord {
            stay_id: "ICU1".into(),
            demographics: demo(55),
            diagnoses: vec![DiagnosisCode {
                code: "C001".into(),
                icd_version: IcdVersion::Icd10,
            }],
            events: Vec::<ClinicalEvent>::new(),
            label: 1,
        }
    }

    #[test]
    fn single_window_rep1_equals_rep2() {
        let vocab = full_vocab();
        let encoder = DemoEncoder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let series = random_imputed(&mut rng, 1);
        let l1 = Arc::new(FeatureLayout::for_run(&vocab, &encoder, RepMode::Rep1, 1));
        let l2 = Arc::new(FeatureLayout::for_run(&vocab, &encoder, RepMode::Rep2, 1));
        let v1 = assemble(&stay(), &series, &l1, &vocab, &encoder).unwrap();
        let v2 = assemble(&stay(), &series, &l2, &vocab, &encoder).unwrap();
        assert_eq!(v1.values, v2.values);
    }

    #[test]
    fn rep2_is_window_mean_of_rep1_dynamic_blocks() {
        let vocab = full_vocab();
        let encoder = DemoEncoder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let w = rng.random_range(2..8);
            let series = random_imputed(&mut rng, w);
            let l1 = Arc::new(FeatureLayout::for_run(&vocab, &encoder, RepMode::Rep1, w));
            let l2 = Arc::new(FeatureLayout::for_run(&vocab, &encoder, RepMode::Rep2, w));
            let v1 = assemble(&stay(), &series, &l1, &vocab, &encoder).unwrap();
            let v2 = assemble(&stay(), &series, &l2, &vocab, &encoder).unwrap();
            let off = l1.dynamic_offset();
            let d = l1.dynamic_dim();
            // Independent mean over the Rep1 window blocks.
            for slot in 0..d {
                let mean: f64 =
                    (0..w).map(|k| v1.values[off + k * d + slot]).sum::<f64>() / w as f64;
                assert!(
                    (mean - v2.values[off + slot]).abs() < 1e-12,
                    "slot {slot}: {mean} vs {}",
                    v2.values[off + slot]
                );
            }
        }
    }

    #[test]
    fn rep1_one_hot_segments_are_binary() {
        let vocab = full_vocab();
        let encoder = DemoEncoder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = 4;
        let series = random_imputed(&mut rng, w);
        let layout = Arc::new(FeatureLayout::for_run(&vocab, &encoder, RepMode::Rep1, w));
        let v = assemble(&stay(), &series, &layout, &vocab, &encoder).unwrap();
        let off = layout.dynamic_offset();
        let d = layout.dynamic_dim();
        // COND segment.
        for slot in encoder.width()..off {
            assert!(v.values[slot] == 0.0 || v.values[slot] == 1.0);
        }
        // PROC and OUTE slots are the last two of each window block.
        for k in 0..w {
            for slot in [off + k * d + 3, off + k * d + 4] {
                assert!(v.values[slot] == 0.0 || v.values[slot] == 1.0);
            }
        }
    }

    #[test]
    fn dimension_equations_hold_and_match_published_counts() {
        // demo 10, cond 1034, D = 66 -> Rep2 dim 1110.
        let layout = FeatureLayout::with_dims(10, 1034, [40, 12, 8, 6], RepMode::Rep2, 24);
        assert_eq!(layout.dynamic_dim(), 66);
        assert_eq!(layout.total_dim(), 1110);
        let rep1 = FeatureLayout::with_dims(10, 1034, [40, 12, 8, 6], RepMode::Rep1, 24);
        assert_eq!(rep1.total_dim(), 10 + 1034 + 24 * 66);
        assert_eq!(layout.slot_names().len(), layout.total_dim());
        assert_eq!(rep1.slot_names().len(), rep1.total_dim());
    }

    #[test]
    fn layout_mismatch_is_fatal() {
        let vocab = full_vocab();
        let encoder = DemoEncoder::default();
        let wrong = Arc::new(FeatureLayout::with_dims(
            4,
            99,
            [2, 1, 1, 1],
            RepMode::Rep2,
            4,
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let series = random_imputed(&mut rng, 4);
        let err = assemble(&stay(), &series, &wrong, &vocab, &encoder).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
