use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Strictly increasing across the whole run, restarts included.
    pub epoch: usize,
    pub attempt: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    /// A non-finite loss, gradient or parameter aborted an attempt.
    Restart {
        attempt: usize,
        epoch: usize,
        reason: String,
        next_lr: f64,
    },
    LrReduced {
        epoch: usize,
        from: f64,
        to: f64,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub code_hash: Option<String>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Append-only per-run training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub metadata: RunMetadata,
    pub epochs: Vec<EpochRecord>,
    pub events: Vec<RunEvent>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Meta(RunMetadata),
    Epoch(EpochRecord),
    Event { event: RunEvent },
}

impl RunLog {
    pub fn new(metadata: RunMetadata) -> Self {
        RunLog {
            metadata,
            ..Default::default()
        }
    }

    pub fn next_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch + 1)
    }

    pub fn push_epoch(&mut self, rec: EpochRecord) -> Result<()> {
        if let Some(last) = self.epochs.last() {
            if rec.epoch <= last.epoch {
                return Err(Error::invalid(format!("epoch {} after epoch {}", rec.epoch, last.epoch)));
            }
        }
        self.epochs.push(rec);
        Ok(())
    }

    pub fn push_event(&mut self, ev: RunEvent) {
        self.events.push(ev);
    }

    pub fn restarts(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, RunEvent::Restart { .. })).count()
    }

    /// Metadata line, then one line per epoch, then one per event.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |l: &Line| {
            out.push_str(&serde_json::to_string(l).expect("run log is serializable"));
            out.push('\n');
        };
        line(&Line::Meta(self.metadata.clone()));
        for e in &self.epochs {
            line(&Line::Epoch(e.clone()));
        }
        for ev in &self.events {
            line(&Line::Event { event: ev.clone() });
        }
        out
    }

    pub fn from_jsonl(s: &str) -> Result<RunLog> {
        let mut log = RunLog::default();
        for (i, text) in s.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line: Line = serde_json::from_str(text)
                .map_err(|e| Error::invalid(format!("run log line {}: {e}", i + 1)))?;
            match line {
                Line::Meta(m) => log.metadata = m,
                Line::Epoch(e) => log.push_epoch(e)?,
                Line::Event { event } => log.events.push(event),
            }
        }
        Ok(log)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,attempt,train_loss,val_loss,lr,wall_time\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{},{}", e.epoch, e.attempt, e.train_loss, val, e.lr, e.wall_time);
        }
        out
    }
}
