use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::models::ModelKind;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Reconstruction,
    Generation,
    Classification,
    Clustering,
    Interpolation,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Reconstruction,
        Task::Generation,
        Task::Classification,
        Task::Clustering,
        Task::Interpolation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Reconstruction => "reconstruction",
            Task::Generation => "generation",
            Task::Classification => "classification",
            Task::Clustering => "clustering",
            Task::Interpolation => "interpolation",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub model: ModelKind,
    pub config_id: String,
    pub seed: u64,
    pub latent_dim: usize,
    pub task: Task,
    pub metric: String,
    pub value: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub model: ModelKind,
    pub config_id: String,
    pub seed: u64,
    pub task: Task,
    pub metric: String,
    pub split: Split,
}

impl BenchmarkRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            model: self.model,
            config_id: self.config_id.clone(),
            seed: self.seed,
            task: self.task,
            metric: self.metric.clone(),
            split: self.split,
        }
    }
}

/// Records with unique keys and finite values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordTable {
    records: Vec<BenchmarkRecord>,
    keys: HashSet<RecordKey>,
}

impl RecordTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: BenchmarkRecord) -> Result<()> {
        if !record.value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} {} {} on {}",
                record.model, record.task, record.metric, record.split
            )));
        }
        let key = record.key();
        if self.keys.contains(&key) {
            return Err(Error::invalid(format!("duplicate record {key:?}")));
        }
        self.keys.insert(key);
        self.records.push(record);
        Ok(())
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = BenchmarkRecord>) -> Result<()> {
        records.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn records(&self) -> &[BenchmarkRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, key: &RecordKey) -> bool {
        self.keys.contains(key)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in &self.records {
            w.serialize(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<RecordTable> {
        let mut table = RecordTable::new();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        for row in rdr.deserialize() {
            table.push(row.map_err(csv_err)?)?;
        }
        Ok(table)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<RecordTable> {
        let mut table = RecordTable::new();
        let mut offset = 0;
        for line in BufReader::new(text.as_bytes()).lines() {
            let line = line.map_err(|e| Error::invalid(e.to_string()))?;
            if !line.trim().is_empty() {
                let r = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    offset: offset + e.column().saturating_sub(1),
                    message: e.to_string(),
                })?;
                table.push(r)?;
            }
            offset += line.len() + 1;
        }
        Ok(table)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

pub const CSV_HEADER: [&str; 8] = ["model", "config_id", "seed", "latent_dim", "task", "metric", "value", "split"];

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte() as usize);
    Error::Parse {
        offset,
        message: e.to_string(),
    }
}

/// Percent mean and standard deviation as `"93.67 (0.02)"`.
pub fn format_mean_sd(mean: f64, sd: f64) -> String {
    format!("{:.2} ({:.2})", 100.0 * mean, 100.0 * sd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(metric: &str, value: f64) -> BenchmarkRecord {
        BenchmarkRecord {
            model: ModelKind::VaeLinNf,
            config_id: "c0".into(),
            seed: 1,
            latent_dim: 16,
            task: Task::Reconstruction,
            metric: metric.into(),
            value,
            split: Split::Test,
        }
    }

    #[test]
    fn csv_and_jsonl_round_trip() {
        let mut t = RecordTable::new();
        t.push(rec("mse", 0.1 + 0.2)).unwrap();
        t.push(rec("other", -1e-300)).unwrap();
        let csv = t.to_csv().unwrap();
        assert!(csv.starts_with("model,config_id,seed,latent_dim,task,metric,value,split\nVAE_LinNF,"));
        assert_eq!(RecordTable::from_csv(&csv).unwrap(), t);
        assert_eq!(RecordTable::from_jsonl(&t.to_jsonl().unwrap()).unwrap(), t);
    }

    #[test]
    fn duplicates_and_non_finite_values_are_rejected() {
        let mut t = RecordTable::new();
        t.push(rec("mse", 1.0)).unwrap();
        assert!(t.push(rec("mse", 2.0)).is_err());
        assert!(t.push(rec("x", f64::NAN)).is_err());
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn mean_sd_format() {
        assert_eq!(format_mean_sd(0.9367, 0.0002), "93.67 (0.02)");
    }
}
