//! CSV/JSON writers. Every file carries the run's config hash, seed and
//! artifact version; nothing time-dependent is written.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Provenance { config_hash, seed, version: fisher_prune::checkpoint::ARTIFACT_VERSION.to_string() }
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn to_object<T: Serialize>(row: &T) -> Result<Map<String, Value>, CliError> {
    match serde_json::to_value(row).map_err(|e| CliError::Internal(e.to_string()))? {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Internal("record does not serialize to an object".into())),
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Writes `<stem>.csv` (header row, provenance columns last) and
/// `<stem>.json` (`{provenance..., records: [...]}`) under `dir`.
pub fn write_table<T: Serialize>(
    dir: &Path,
    stem: &str,
    rows: &[T],
    prov: &Provenance,
) -> Result<(PathBuf, PathBuf), CliError> {
    let objects: Vec<Map<String, Value>> = rows.iter().map(to_object).collect::<Result<_, _>>()?;
    let prov_obj = to_object(prov)?;
    let mut header: Vec<String> = objects.first().map(|o| o.keys().cloned().collect()).unwrap_or_default();
    header.extend(prov_obj.keys().cloned());

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(|e| CliError::Internal(e.to_string()))?;
    for o in &objects {
        let rec = o.values().chain(prov_obj.values()).map(cell);
        w.write_record(rec).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let csv_bytes = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    write_file(&csv_path, &csv_bytes)?;

    let mut doc = prov_obj;
    doc.insert("records".into(), Value::Array(objects.into_iter().map(Value::Object).collect()));
    let json_path = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(&Value::Object(doc)).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    write_file(&json_path, text.as_bytes())?;
    Ok((csv_path, json_path))
}
