//! Trial records: schema, CSV ingestion and validation, block analytics.

mod synth;

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::MathQuestion;

pub use synth::{hardness, synth_generate, SynthConfig, SynthProfile, SynthManifest};

/// Columns of the trial CSV, in order.
pub const COLUMNS: [&str; 13] = [
    "participant_id",
    "group",
    "day",
    "trial_index",
    "num1",
    "num2",
    "num3",
    "pressure_shown",
    "human_choice",
    "correct",
    "rt_seconds",
    "attention",
    "anxiety",
];

pub const MAX_RT_SECONDS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    None,
    Static,
    Random,
    Rule,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::None, Group::Static, Group::Random, Group::Rule];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::None => "none",
            Group::Static => "static",
            Group::Random => "random",
            Group::Rule => "rule",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Group::None),
            "static" => Ok(Group::Static),
            "random" => Ok(Group::Random),
            "rule" => Ok(Group::Rule),
            other => Err(Error::invalid(format!("unknown group {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub participant_id: String,
    pub group: Group,
    pub day: u8,
    pub trial_index: u32,
    pub question: MathQuestion,
    pub pressure_shown: bool,
    pub human_choice: bool,
    pub correct: bool,
    pub rt_seconds: f64,
    pub attention: Option<u8>,
    pub anxiety: Option<u8>,
}

impl TrialRecord {
    /// Every invariant violation of this record; empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.participant_id.is_empty() {
            out.push("empty participant_id".to_string());
        }
        if !(1..=2).contains(&self.day) {
            out.push(format!("day {} not in {{1, 2}}", self.day));
        }
        if self.trial_index < 1 {
            out.push("trial_index must be >= 1".to_string());
        }
        if !(self.rt_seconds > 0.0 && self.rt_seconds <= MAX_RT_SECONDS) {
            out.push(format!("rt_seconds {} outside (0, 10]", self.rt_seconds));
        }
        match (self.group, self.pressure_shown) {
            (Group::None, true) => out.push("group none shows no pressure".to_string()),
            (Group::Static, false) => out.push("group static always shows pressure".to_string()),
            _ => {}
        }
        if self.correct != (self.human_choice == self.question.is_divisible()) {
            out.push("correct flag disagrees with the graded choice".to_string());
        }
        for (name, v) in [("attention", self.attention), ("anxiety", self.anxiety)] {
            if let Some(v) = v {
                if !(1..=7).contains(&v) {
                    out.push(format!("{name} {v} outside 1..=7"));
                }
            }
        }
        out
    }

    pub fn is_consistency_violation(msg: &str) -> bool {
        msg.starts_with("group ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    participant_id: String,
    group: Group,
    day: u8,
    trial_index: u32,
    num1: u32,
    num2: u32,
    num3: u32,
    pressure_shown: bool,
    human_choice: bool,
    correct: bool,
    rt_seconds: f64,
    attention: Option<u8>,
    anxiety: Option<u8>,
}

impl From<&TrialRecord> for CsvRow {
    fn from(r: &TrialRecord) -> Self {
        Self {
            participant_id: r.participant_id.clone(),
            group: r.group,
            day: r.day,
            trial_index: r.trial_index,
            num1: r.question.num1() as u32,
            num2: r.question.num2() as u32,
            num3: r.question.num3() as u32,
            pressure_shown: r.pressure_shown,
            human_choice: r.human_choice,
            correct: r.correct,
            rt_seconds: r.rt_seconds,
            attention: r.attention,
            anxiety: r.anxiety,
        }
    }
}

impl CsvRow {
    fn into_record(self) -> Result<TrialRecord> {
        Ok(TrialRecord {
            question: MathQuestion::unconstrained(self.num1, self.num2, self.num3)?,
            participant_id: self.participant_id,
            group: self.group,
            day: self.day,
            trial_index: self.trial_index,
            pressure_shown: self.pressure_shown,
            human_choice: self.human_choice,
            correct: self.correct,
            rt_seconds: self.rt_seconds,
            attention: self.attention,
            anxiety: self.anxiety,
        })
    }
}

pub fn write_records<W: Write>(records: &[TrialRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    if records.is_empty() {
        wtr.write_record(COLUMNS)?;
    }
    for r in records {
        wtr.serialize(CsvRow::from(r))?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_records_file(records: &[TrialRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(records, std::io::BufWriter::new(f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowViolation {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub rows_read: usize,
    pub violations: Vec<RowViolation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    /// Whether any row breaks the group/pressure consistency rules, which
    /// makes the whole file unusable for group-level analysis.
    pub fn file_rejected(&self) -> bool {
        self.violations
            .iter()
            .any(|v| TrialRecord::is_consistency_violation(&v.message))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    /// Rows that passed every check.
    pub records: Vec<TrialRecord>,
    pub report: ValidationReport,
}

/// Renames and unit conversions applied to third-party exports before
/// validation. The default is the identity mapping for this crate's schema.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMapping {
    /// Our column name -> source column name.
    #[serde(default)]
    pub columns: HashMap<String, String>,
    /// Multiplier turning the source rt column into seconds (0.001 for ms).
    #[serde(default)]
    pub rt_scale: Option<f64>,
    /// Source group labels -> ours, e.g. `"control" = "none"`.
    #[serde(default)]
    pub group_labels: HashMap<String, String>,
}

impl ColumnMapping {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    fn source_name<'a>(&'a self, ours: &'a str) -> &'a str {
        self.columns.get(ours).map(String::as_str).unwrap_or(ours)
    }

    fn is_identity(&self) -> bool {
        self.columns.is_empty() && self.rt_scale.is_none() && self.group_labels.is_empty()
    }
}

pub fn ingest(path: &Path) -> Result<Ingested> {
    ingest_mapped(path, &ColumnMapping::default())
}

pub fn ingest_mapped(path: &Path, mapping: &ColumnMapping) -> Result<Ingested> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(f), mapping)
}

/// Parses and validates trial rows. Malformed or invalid rows land in the
/// report; only an unreadable header is a hard error.
pub fn ingest_reader<R: Read>(r: R, mapping: &ColumnMapping) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let headers = rdr.headers()?.clone();
    let mut index = HashMap::new();
    for col in COLUMNS {
        let src = mapping.source_name(col);
        if let Some(i) = headers.iter().position(|h| h.trim() == src) {
            index.insert(col, i);
        } else if col != "attention" && col != "anxiety" {
            return Err(Error::invalid(format!("missing column {src:?}")));
        }
    }
    let ordered: Vec<&str> = COLUMNS.to_vec();

    let mut report = ValidationReport::default();
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        report.rows_read += 1;
        let parsed = row.map_err(Error::from).and_then(|rec| {
            let mut fields: Vec<String> = ordered
                .iter()
                .map(|c| index.get(c).and_then(|&j| rec.get(j)).unwrap_or("").trim().to_string())
                .collect();
            if !mapping.is_identity() {
                if let Some(label) = mapping.group_labels.get(&fields[1]) {
                    fields[1] = label.clone();
                }
                if let Some(scale) = mapping.rt_scale {
                    let rt: f64 = fields[10]
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad rt {:?}", fields[10])))?;
                    fields[10] = (rt * scale).to_string();
                }
            }
            let canonical = csv::StringRecord::from(fields);
            let header = csv::StringRecord::from(ordered.clone());
            let row: CsvRow = canonical.deserialize(Some(&header))?;
            row.into_record()
        });
        match parsed {
            Ok(rec) => {
                let v = rec.violations();
                if v.is_empty() {
                    records.push(rec);
                } else {
                    report.violations.extend(v.into_iter().map(|message| RowViolation {
                        row: row_no,
                        message,
                    }));
                }
            }
            Err(e) => report.violations.push(RowViolation {
                row: row_no,
                message: e.to_string(),
            }),
        }
    }
    Ok(Ingested { records, report })
}

/// Change of one block relative to the first block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockChange {
    /// 2-based block number.
    pub block: usize,
    /// `(R_i - R_1) / R_1`.
    pub rt: f64,
    /// `(R_i - R_1) / R_1`.
    pub accuracy: f64,
    /// `R_i - R_1`, when both blocks carry ratings.
    pub attention: Option<f64>,
    pub anxiety: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockMeans {
    pub rt: f64,
    pub accuracy: f64,
    pub attention: Option<f64>,
    pub anxiety: Option<f64>,
}

/// Per-block means for one participant-session split into `n_blocks`
/// consecutive equal blocks (the last absorbs any remainder).
pub fn block_means(records: &[TrialRecord], n_blocks: usize) -> Result<Vec<BlockMeans>> {
    if n_blocks == 0 || records.len() < n_blocks {
        return Err(Error::invalid(format!(
            "cannot split {} records into {n_blocks} blocks",
            records.len()
        )));
    }
    let size = records.len() / n_blocks;
    let mean_opt = |xs: Vec<f64>| {
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    Ok((0..n_blocks)
        .map(|b| {
            let end = if b + 1 == n_blocks { records.len() } else { (b + 1) * size };
            let block = &records[b * size..end];
            let n = block.len() as f64;
            BlockMeans {
                rt: block.iter().map(|r| r.rt_seconds).sum::<f64>() / n,
                accuracy: block.iter().filter(|r| r.correct).count() as f64 / n,
                attention: mean_opt(block.iter().filter_map(|r| r.attention.map(f64::from)).collect()),
                anxiety: mean_opt(block.iter().filter_map(|r| r.anxiety.map(f64::from)).collect()),
            }
        })
        .collect())
}

pub fn relative_changes(means: &[BlockMeans]) -> Result<Vec<BlockChange>> {
    let first = means.first().ok_or_else(|| Error::invalid("no blocks"))?;
    if first.rt == 0.0 || first.accuracy == 0.0 {
        return Err(Error::invalid("first block mean is zero; relative change undefined"));
    }
    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(x, y)| x - y);
    Ok(means
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, m)| BlockChange {
            block: i + 1,
            rt: (m.rt - first.rt) / first.rt,
            accuracy: (m.accuracy - first.accuracy) / first.accuracy,
            attention: diff(m.attention, first.attention),
            anxiety: diff(m.anxiety, first.anxiety),
        })
        .collect())
}

pub fn block_relative_change(records: &[TrialRecord], n_blocks: usize) -> Result<Vec<BlockChange>> {
    relative_changes(&block_means(records, n_blocks)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(i: u32, group: Group, pressure: bool, rt: f64) -> TrialRecord {
        let q = MathQuestion::from_numbers(34, 12, 3).unwrap();
        TrialRecord {
            participant_id: "p1".into(),
            group,
            day: 1,
            trial_index: i,
            question: q,
            pressure_shown: pressure,
            human_choice: false,
            correct: true,
            rt_seconds: rt,
            attention: (i % 30 == 0).then_some(4),
            anxiety: (i % 30 == 0).then_some(3),
        }
    }

    fn to_csv(records: &[TrialRecord]) -> String {
        let mut buf = Vec::new();
        write_records(records, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn valid_file_ingests_cleanly() {
        let recs: Vec<_> = (1..=300).map(|i| record(i, Group::Random, i % 2 == 0, 1.5)).collect();
        let out = ingest_reader(to_csv(&recs).as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(out.records.len(), 300);
        assert!(out.report.is_clean());
        assert_eq!(out.records, recs);
    }

    #[test]
    fn header_and_empty_likert() {
        let s = to_csv(&[record(1, Group::None, false, 2.25)]);
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "p1,none,1,1,34,12,3,false,false,true,2.25,,");
        assert_eq!(to_csv(&[]), format!("{}\n", COLUMNS.join(",")));
    }

    #[test]
    fn range_and_consistency_violations() {
        let recs = vec![
            record(1, Group::None, false, 12.0),
            record(2, Group::None, true, 1.0),
            record(3, Group::Static, true, 1.0),
        ];
        let out = ingest_reader(to_csv(&recs).as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.report.violations.len(), 2);
        assert_eq!(out.report.violations[0].row, 1);
        assert!(out.report.violations[0].message.contains("rt_seconds"));
        assert_eq!(out.report.violations[1].row, 2);
        assert!(out.report.file_rejected());
    }

    #[test]
    fn malformed_rows_are_reported_not_fatal() {
        let mut s = to_csv(&[record(1, Group::Rule, false, 1.0)]);
        s.push_str("p1,rule,1,2,xx,12,3,false,false,true,1.0,,\n");
        s.push_str("p1,fast,1,3,34,12,3,false,false,true,1.0,,\n");
        let out = ingest_reader(s.as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.report.violations.len(), 2);
        assert!(ingest(Path::new("/nonexistent/file.csv")).is_err());
    }

    #[test]
    fn incorrect_flag_is_checked() {
        let mut r = record(1, Group::Rule, false, 1.0);
        r.correct = false;
        assert_eq!(r.violations().len(), 1);
    }

    #[test]
    fn mapping_shim_renames_and_scales() {
        let src = "pid,cond,day,trial,num1,num2,num3,pressure_shown,human_choice,correct,rt_ms\n\
                   s7,control,1,1,34,12,3,false,false,true,1500\n";
        let mapping = ColumnMapping::from_toml(
            r#"
            rt_scale = 0.001
            [columns]
            participant_id = "pid"
            group = "cond"
            trial_index = "trial"
            rt_seconds = "rt_ms"
            [group_labels]
            control = "none"
            "#,
        )
        .unwrap();
        let out = ingest_reader(src.as_bytes(), &mapping).unwrap();
        assert!(out.report.is_clean(), "{:?}", out.report);
        assert_eq!(out.records[0].rt_seconds, 1.5);
        assert_eq!(out.records[0].group, Group::None);
        assert_eq!(out.records[0].attention, None);
    }

    #[test]
    fn block_changes() {
        let mut recs = Vec::new();
        for (b, rt) in [2.0, 1.8, 2.0, 2.2, 1.0].iter().enumerate() {
            for j in 0..60 {
                recs.push(record((b * 60 + j + 1) as u32, Group::Rule, false, *rt));
            }
        }
        let ch = block_relative_change(&recs, 5).unwrap();
        assert_eq!(ch.len(), 4);
        assert!((ch[0].rt + 0.10).abs() < 1e-12);
        assert_eq!(ch[0].accuracy, 0.0);
        assert_eq!(ch[3].rt, -0.5);

        let flat: Vec<_> = (1..=100).map(|i| record(i, Group::Rule, false, 3.0)).collect();
        assert!(block_relative_change(&flat, 5).unwrap().iter().all(|c| c.rt == 0.0));
    }

    #[test]
    fn likert_changes_are_differences() {
        let mk = |attn: f64| BlockMeans {
            rt: 1.0,
            accuracy: 1.0,
            attention: Some(attn),
            anxiety: None,
        };
        let ch = relative_changes(&[mk(4.0), mk(6.0)]).unwrap();
        assert_eq!(ch[0].attention, Some(2.0));
        assert_eq!(ch[0].anxiety, None);
        let zero = BlockMeans { accuracy: 0.0, ..mk(1.0) };
        assert!(relative_changes(&[zero, mk(1.0)]).is_err());
    }
}
