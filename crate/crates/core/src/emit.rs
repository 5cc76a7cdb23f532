//! Dataset splitting, oversampling, and serialization.
//!
//! Text datasets are JSON lines, tabular datasets are CSV; both are written
//! atomically (temp file + rename) and read back as the exact inverse of
//! their writer.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    TextJsonl,
    TabularCsv,
}

impl DatasetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::TextJsonl => "text_jsonl",
            DatasetKind::TabularCsv => "tabular_csv",
        }
    }
}

/// One exportable record. `text` travels in JSONL exports, `features` in CSV
/// exports; the other field is left empty/None by the corresponding reader.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub stay_id: String,
    pub label: u8,
    pub text: String,
    pub features: Option<Vec<f64>>,
    pub split: Split,
}

/// JSONL wire format: exactly these keys, in this order.
#[derive(Serialize, Deserialize)]
struct TextRow {
    stay_id: String,
    label: u8,
    text: String,
    split: Split,
}

/// Counts and provenance for one written dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub n_records: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_positive: usize,
    pub layout_id: String,
    pub config_digest: String,
}

/// Train/test stay ids, each in cohort order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Stratified split: per class, round(test_fraction * n_class) records go to
/// test (clamped so both splits keep at least one record of each class).
/// Deterministic given the seed; returned ids preserve cohort order.
pub fn split_cohort(
    items: &[(String, u8)],
    test_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_set: HashSet<&str> = HashSet::new();
    for class in [0u8, 1u8] {
        let members: Vec<&str> = items
            .iter()
            .filter(|(_, l)| *l == class)
            .map(|(id, _)| id.as_str())
            .collect();
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "class {class} has {} member(s); need at least 2 to split",
                members.len()
            )));
        }
        let mut shuffled = members;
        shuffled.shuffle(&mut rng);
        let n_test =
            ((test_fraction * shuffled.len() as f64).round() as usize).clamp(1, shuffled.len() - 1);
        test_set.extend(shuffled.into_iter().take(n_test));
    }
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for (id, _) in items {
        if test_set.contains(id.as_str()) {
            test_ids.push(id.clone());
        } else {
            train_ids.push(id.clone());
        }
    }
    Ok(SplitAssignment {
        train_ids,
        test_ids,
    })
}

/// Duplicates minority-class records uniformly at random with replacement
/// until class counts are equal. Originals are all retained in order;
/// duplicates are appended. Deterministic given the seed.
pub fn oversample(records: &[DatasetRecord], seed: u64) -> Result<Vec<DatasetRecord>> {
    let n_pos = records.iter().filter(|r| r.label == 1).count();
    let n_neg = records.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(
            "oversample requires both classes present".into(),
        ));
    }
    let mut out = records.to_vec();
    if n_pos == n_neg {
        return Ok(out);
    }
    let minority = u8::from(n_pos < n_neg);
    let pool: Vec<&DatasetRecord> = records.iter().filter(|r| r.label == minority).collect();
    let deficit = n_pos.abs_diff(n_neg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..deficit {
        out.push((*pool.choose(&mut rng).expect("non-empty minority")).clone());
    }
    Ok(out)
}

fn compute_manifest(
    records: &[DatasetRecord],
    kind: DatasetKind,
    layout_id: &str,
    config_digest: &str,
) -> Manifest {
    Manifest {
        kind: kind.as_str().to_string(),
        n_records: records.len(),
        n_train: records.iter().filter(|r| r.split == Split::Train).count(),
        n_test: records.iter().filter(|r| r.split == Split::Test).count(),
        n_positive: records.iter().filter(|r| r.label == 1).count(),
        layout_id: layout_id.to_string(),
        config_digest: config_digest.to_string(),
    }
}

/// Writes raw bytes atomically: temp file in the target directory, then
/// rename. Partial files are cleaned up on failure by the temp handle.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            tempfile::NamedTempFile::new_in(d)?
        }
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serializes records to `path`. For CSV exports a layout supplies the
/// feature column names; text exports require nonempty text. Refuses to
/// write an empty record list.
pub fn write_dataset(
    records: &[DatasetRecord],
    path: &Path,
    kind: DatasetKind,
    layout: Option<&FeatureLayout>,
    config_digest: &str,
) -> Result<Manifest> {
    if records.is_empty() {
        return Err(Error::Data("refusing to write an empty dataset".into()));
    }
    let layout_id = layout
        .map(|l| l.descriptor())
        .unwrap_or_else(|| "none".into());

    let bytes = match kind {
        DatasetKind::TextJsonl => {
            let mut buf = Vec::new();
            for record in records {
                if record.text.is_empty() {
                    return Err(Error::Data(format!(
                        "record {} has empty text in a textual export",
                        record.stay_id
                    )));
                }
                let row = TextRow {
                    stay_id: record.stay_id.clone(),
                    label: record.label,
                    text: record.text.clone(),
                    split: record.split,
                };
                serde_json::to_writer(&mut buf, &row)?;
                buf.push(b'\n');
            }
            buf
        }
        DatasetKind::TabularCsv => {
            let layout = layout
                .ok_or_else(|| Error::Config("tabular export requires a feature layout".into()))?;
            let slot_names = layout.slot_names();
            let mut writer = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["stay_id".to_string(), "label".into(), "split".into()];
            header.extend(slot_names.iter().cloned());
            writer.write_record(&header)?;
            for record in records {
                let features = record.features.as_ref().ok_or_else(|| {
                    Error::Data(format!(
                        "record {} has no features in a tabular export",
                        record.stay_id
                    ))
                })?;
                if features.len() != slot_names.len() {
                    return Err(Error::Data(format!(
                        "record {}: {} feature values vs layout dim {}",
                        record.stay_id,
                        features.len(),
                        slot_names.len()
                    )));
                }
                let mut row = vec![
                    record.stay_id.clone(),
                    record.label.to_string(),
                    match record.split {
                        Split::Train => "train".to_string(),
                        Split::Test => "test".to_string(),
                    },
                ];
                // Shortest round-trip float formatting keeps re-reads exact.
                row.extend(features.iter().map(|v| format!("{v}")));
                writer.write_record(&row)?;
            }
            writer
                .into_inner()
                .map_err(|e| Error::Data(format!("csv flush failed: {e}")))?
        }
    };

    write_atomic(path, &bytes)?;
    Ok(compute_manifest(records, kind, &layout_id, config_digest))
}

/// Reads a dataset file produced by [`write_dataset`]. Malformed content is
/// fatal and names the offending line.
pub fn read_dataset(path: &Path, kind: DatasetKind) -> Result<Vec<DatasetRecord>> {
    let file = std::fs::File::open(path)?;
    match kind {
        DatasetKind::TextJsonl => {
            let reader = BufReader::new(file);
            let mut records = Vec::new();
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let row: TextRow = serde_json::from_str(&line)
                    .map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), i + 1)))?;
                records.push(DatasetRecord {
                    stay_id: row.stay_id,
                    label: row.label,
                    text: row.text,
                    features: None,
                    split: row.split,
                });
            }
            Ok(records)
        }
        DatasetKind::TabularCsv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_reader(file);
            let headers = reader.headers()?.clone();
            let fixed = ["stay_id", "label", "split"];
            for (i, name) in fixed.iter().enumerate() {
                if headers.get(i) != Some(*name) {
                    return Err(Error::Data(format!(
                        "{}: header column {} must be {name:?}",
                        path.display(),
                        i
                    )));
                }
            }
            let n_features = headers.len() - fixed.len();
            let mut records = Vec::new();
            for (i, record) in reader.records().enumerate() {
                let line = i + 2; // header is line 1
                let record = record
                    .map_err(|e| Error::Data(format!("{}: line {line}: {e}", path.display())))?;
                let bad =
                    |what: &str| Error::Data(format!("{}: line {line}: {what}", path.display()));
                if record.len() != headers.len() {
                    return Err(bad("wrong field count"));
                }
                let label: u8 = record[1].parse().map_err(|_| bad("bad label"))?;
                let split = match &record[2] {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => return Err(bad(&format!("bad split {other:?}"))),
                };
                let mut features = Vec::with_capacity(n_features);
                for value in record.iter().skip(3) {
                    features.push(value.parse::<f64>().map_err(|_| bad("bad feature value"))?);
                }
                records.push(DatasetRecord {
                    stay_id: record[0].to_string(),
                    label,
                    text: String::new(),
                    features: Some(features),
                    split,
                });
            }
            Ok(records)
        }
    }
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::RepMode;
    use std::collections::BTreeMap;

    fn items(n: usize, prevalence: f64) -> Vec<(String, u8)> {
        let n_pos = (n as f64 * prevalence).round() as usize;
        (0..n)
            .map(|i| (format!("s{i:04}"), u8::from(i < n_pos)))
            .collect()
    }

    fn record(stay_id: &str, label: u8, split: Split) -> DatasetRecord {
        DatasetRecord {
            stay_id: stay_id.into(),
            label,
            text: format!("text for {stay_id}"),
            features: None,
            split,
        }
    }

    #[test]
    fn stratified_split_arithmetic() {
        let pool = items(100, 0.2);
        let split = split_cohort(&pool, 0.2, 7).unwrap();
        assert_eq!(split.test_ids.len(), 20);
        assert_eq!(split.train_ids.len(), 80);
        let labels: BTreeMap<&str, u8> = pool.iter().map(|(id, l)| (id.as_str(), *l)).collect();
        let pos_in_test = split
            .test_ids
            .iter()
            .filter(|id| labels[id.as_str()] == 1)
            .count();
        assert_eq!(pos_in_test, 4);
    }

    #[test]
    fn same_seed_gives_identical_partition() {
        let pool = items(57, 0.3);
        assert_eq!(
            split_cohort(&pool, 0.25, 9).unwrap(),
            split_cohort(&pool, 0.25, 9).unwrap()
        );
        assert_ne!(
            split_cohort(&pool, 0.25, 9).unwrap(),
            split_cohort(&pool, 0.25, 10).unwrap()
        );
    }

    #[test]
    fn class_proportions_preserved_within_one_record_across_many_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..1000u64 {
            let n = rng.random_range(10..60);
            let prevalence = rng.random_range(0.15..0.5);
            let pool = items(n, prevalence);
            let n_pos = pool.iter().filter(|(_, l)| *l == 1).count();
            if n_pos < 2 || n - n_pos < 2 {
                continue;
            }
            let fraction = rng.random_range(0.1..0.5);
            let split = split_cohort(&pool, fraction, trial).unwrap();
            let test_pos = split
                .test_ids
                .iter()
                .filter(|id| pool.iter().any(|(pid, l)| pid == *id && *l == 1))
                .count();
            let expected = (fraction * n_pos as f64).round() as isize;
            assert!(
                (test_pos as isize - expected).abs() <= 1,
                "trial {trial}: test_pos {test_pos} vs expected {expected}"
            );
            assert_eq!(split.train_ids.len() + split.test_ids.len(), n);
        }
    }

    #[test]
    fn single_member_class_is_fatal() {
        let mut pool = items(10, 0.0);
        pool[0].1 = 1;
        assert!(split_cohort(&pool, 0.2, 1).is_err());
    }

    #[test]
    fn oversample_balances_and_keeps_originals() {
        let mut records: Vec<DatasetRecord> = (0..8)
            .map(|i| record(&format!("n{i}"), 0, Split::Train))
            .collect();
        records.push(record("p0", 1, Split::Train));
        records.push(record("p1", 1, Split::Train));
        let balanced = oversample(&records, 3).unwrap();
        assert_eq!(balanced.len(), 16);
        assert_eq!(balanced.iter().filter(|r| r.label == 1).count(), 8);
        // Every original survives, and distinct ids equal the original set.
        let original_ids: HashSet<&str> = records.iter().map(|r| r.stay_id.as_str()).collect();
        let distinct: HashSet<&str> = balanced.iter().map(|r| r.stay_id.as_str()).collect();
        assert_eq!(original_ids, distinct);
        assert_eq!(&balanced[..records.len()], &records[..]);
        // Determinism.
        assert_eq!(oversample(&records, 3).unwrap(), balanced);
    }

    #[test]
    fn balanced_input_is_a_fixed_point_and_single_class_fails() {
        let records = vec![record("a", 0, Split::Train), record("b", 1, Split::Train)];
        assert_eq!(oversample(&records, 1).unwrap(), records);
        let single = vec![record("a", 0, Split::Train)];
        assert!(oversample(&single, 1).is_err());
    }

    #[test]
    fn jsonl_has_one_line_per_record_with_fixed_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let records = vec![
            record("a", 0, Split::Train),
            record("b", 1, Split::Test),
            record("c", 0, Split::Train),
        ];
        let manifest =
            write_dataset(&records, &path, DatasetKind::TextJsonl, None, "digest").unwrap();
        assert_eq!(manifest.n_records, 3);
        assert_eq!(manifest.n_train, 2);
        let content = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = content.lines().collect();
        assert_eq!(lines.len(), 3);
        // Keys appear in wire order and nothing else travels.
        assert!(lines[0].starts_with("{\"stay_id\":"), "{}", lines[0]);
        let value: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        let keys: BTreeMap<String, ()> = value
            .as_object()
            .unwrap()
            .keys()
            .map(|k| (k.clone(), ()))
            .collect();
        let expected: BTreeMap<String, ()> = ["label", "split", "stay_id", "text"]
            .iter()
            .map(|k| (k.to_string(), ()))
            .collect();
        assert_eq!(keys, expected);
    }

    #[test]
    fn round_trip_both_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let text_path = dir.path().join("t.jsonl");
        let records = vec![record("a", 0, Split::Train), record("b", 1, Split::Test)];
        write_dataset(&records, &text_path, DatasetKind::TextJsonl, None, "d").unwrap();
        assert_eq!(
            read_dataset(&text_path, DatasetKind::TextJsonl).unwrap(),
            records
        );

        let layout = FeatureLayout::with_dims(2, 1, [1, 0, 0, 0], RepMode::Rep2, 2);
        let tab_path = dir.path().join("t.csv");
        let tab_records: Vec<DatasetRecord> = (0..5)
            .map(|i| DatasetRecord {
                stay_id: format!("s{i}"),
                label: u8::from(i % 2 == 0),
                text: String::new(),
                features: Some(vec![i as f64 * 0.1, -1.5, 3.0, 0.3333333333333333]),
                split: if i < 3 { Split::Train } else { Split::Test },
            })
            .collect();
        write_dataset(
            &tab_records,
            &tab_path,
            DatasetKind::TabularCsv,
            Some(&layout),
            "d",
        )
        .unwrap();
        assert_eq!(
            read_dataset(&tab_path, DatasetKind::TabularCsv).unwrap(),
            tab_records
        );
    }

    #[test]
    fn empty_dataset_refused() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_dataset(
            &[],
            &dir.path().join("x.jsonl"),
            DatasetKind::TextJsonl,
            None,
            "d",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn truncated_line_is_fatal_and_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.jsonl");
        std::fs::write(
            &path,
            "{\"stay_id\":\"a\",\"label\":0,\"text\":\"x\",\"split\":\"train\"}\n{\"stay_id\":\"b\",\"label\":1,\"te",
        )
        .unwrap();
        let err = read_dataset(&path, DatasetKind::TextJsonl).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_extra_key_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.jsonl");
        std::fs::write(
            &path,
            "{\"stay_id\":\"a\",\"label\":0,\"text\":\"x\",\"split\":\"train\",\"note\":\"kept upstream\"}\n",
        )
        .unwrap();
        let records = read_dataset(&path, DatasetKind::TextJsonl).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].stay_id, "a");
    }

    #[test]
    fn large_export_rereads_field_by_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let records: Vec<DatasetRecord> = (0..500)
            .map(|i| DatasetRecord {
                stay_id: format!("stay{i:04}"),
                label: u8::from(rng.random_bool(0.3)),
                text: format!(
                    "The patient record {i} with value {:.3}",
                    rng.random_range(0.0..100.0)
                ),
                features: None,
                split: if rng.random_bool(0.8) {
                    Split::Train
                } else {
                    Split::Test
                },
            })
            .collect();
        write_dataset(&records, &path, DatasetKind::TextJsonl, None, "digest").unwrap();
        let back = read_dataset(&path, DatasetKind::TextJsonl).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.stay_id, b.stay_id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.text, b.text);
            assert_eq!(a.split, b.split);
        }
    }
}
