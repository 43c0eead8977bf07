//! Benchmark pose tables: one row per executed action with the final
//! object pose.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use super::{ActionSequence, Corpus, IngestError};
use crate::skill_kb::SkillId;

pub const POSE_CSV_HEADER: [&str; 4] = ["action_id", "pose", "file", "action_change"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoseRecord {
    pub action_code: i64,
    /// x, y, z followed by three rotation values (convention unspecified).
    pub pose: [f64; 6],
    pub file_id: String,
    pub action_change: bool,
    /// Pose cell exactly as read, so rewriting preserves the source bytes.
    #[serde(skip)]
    pose_text: String,
}

impl PoseRecord {
    pub fn new(action_code: i64, pose: [f64; 6], file_id: &str, action_change: bool) -> Self {
        let pose_text = format!(
            "[{}]",
            pose.iter().map(|v| crate::numfmt::python_repr(*v)).collect::<Vec<_>>().join(", ")
        );
        PoseRecord { action_code, pose, file_id: file_id.into(), action_change, pose_text }
    }

    pub fn is_zero_pose(&self) -> bool {
        self.pose.iter().all(|v| *v == 0.0)
    }
}

fn parse_pose(cell: &str) -> Result<[f64; 6], String> {
    let inner = cell
        .trim()
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| format!("pose `{cell}` is not a bracketed list"))?;
    let values = inner
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("pose component `{}`: {e}", v.trim())))
        .collect::<Result<Vec<_>, _>>()?;
    let pose: [f64; 6] = values
        .try_into()
        .map_err(|v: Vec<f64>| format!("pose has {} components, expected 6", v.len()))?;
    if pose.iter().any(|v| !v.is_finite()) {
        return Err("pose components must be finite".into());
    }
    Ok(pose)
}

fn parse_bool(cell: &str) -> Option<bool> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

pub fn read_pose_csv(reader: impl Read) -> Result<Vec<PoseRecord>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().map(str::trim).ne(POSE_CSV_HEADER) {
        return Err(IngestError::SchemaMismatch(format!(
            "expected `{}`, found `{}`",
            POSE_CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |reason: String| IngestError::MalformedRow { line, reason };
        if row.len() != 4 {
            return Err(bad(format!("{} fields, expected 4", row.len())));
        }
        let action_code = row[0].trim().parse().map_err(|e| bad(format!("action_id: {e}")))?;
        let pose = parse_pose(&row[1]).map_err(bad)?;
        let action_change =
            parse_bool(&row[3]).ok_or_else(|| bad(format!("action_change `{}` is not a boolean", &row[3])))?;
        out.push(PoseRecord {
            action_code,
            pose,
            file_id: row[2].to_owned(),
            action_change,
            pose_text: row[1].to_owned(),
        });
    }
    Ok(out)
}

pub fn load_pose_csv(path: impl AsRef<Path>) -> Result<Vec<PoseRecord>, IngestError> {
    read_pose_csv(std::fs::File::open(path)?)
}

pub fn write_pose_csv(records: &[PoseRecord], writer: impl Write) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(POSE_CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.action_code.to_string().as_str(),
            &r.pose_text,
            &r.file_id,
            if r.action_change { "TRUE" } else { "FALSE" },
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Action codes per file, files in first-appearance order.
pub fn group_by_file(records: &[PoseRecord]) -> Vec<(String, Vec<i64>)> {
    let mut groups: Vec<(String, Vec<i64>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(f, _)| *f == r.file_id) {
            Some((_, codes)) => codes.push(r.action_code),
            None => groups.push((r.file_id.clone(), vec![r.action_code])),
        }
    }
    groups
}

/// One action sequence per file with the action codes as tokens.
pub fn pose_corpus(records: &[PoseRecord], task_label: &str) -> Corpus {
    Corpus::new(
        group_by_file(records)
            .into_iter()
            .map(|(file, codes)| {
                let tokens: Vec<SkillId> = codes.iter().map(|c| SkillId::new(c.to_string())).collect();
                let raw = tokens.iter().map(|t| t.to_string()).collect();
                ActionSequence { tokens, raw_verbs: raw, source_id: file, task_label: task_label.into() }
            })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroPoseCheck {
    pub all_zero: bool,
    /// Row index and record of every selected action with a non-zero pose.
    pub counterexamples: Vec<(usize, PoseRecord)>,
}

/// Whether every record with an action code in `codes` has an all-zero pose.
pub fn check_zero_pose_binding(records: &[PoseRecord], codes: &BTreeSet<i64>) -> ZeroPoseCheck {
    let counterexamples: Vec<(usize, PoseRecord)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| codes.contains(&r.action_code) && !r.is_zero_pose())
        .map(|(i, r)| (i, r.clone()))
        .collect();
    ZeroPoseCheck { all_zero: counterexamples.is_empty(), counterexamples }
}
