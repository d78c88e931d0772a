use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{create_dir, evaluate_model, parse_json, read_text, rebase, rebase_data_spec, train_model, EvalSettings, RecordIdent};
use crate::data::{DataSpec, Splits};
use crate::evaluation::{BenchmarkRecord, RecordTable, Task};
use crate::models::{ModelConfig, ModelKind};
use crate::tensor::Rng;
use crate::training::{save_checkpoint, write_atomic, TrainConfig};
use crate::{Error, Result};

/// Environment variable capping the executor's worker threads.
pub const THREADS_ENV: &str = "GAE_FORGE_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanModel {
    pub model: ModelKind,
    /// Grid file; the shipped grid for `model` when absent.
    #[serde(default)]
    pub grid: Option<PathBuf>,
    /// Grid entries to run; all of them when absent.
    #[serde(default)]
    pub configs: Option<Vec<String>>,
    pub seeds: Vec<u64>,
    pub latent_dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkPlan {
    pub data: DataSpec,
    pub models: Vec<PlanModel>,
    pub tasks: Vec<Task>,
    pub output_root: PathBuf,
    /// Model-config keys applied to every cell before the grid entry.
    #[serde(default)]
    pub model_defaults: Map<String, Value>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvalSettings,
    /// Keep each cell's trained model under `checkpoints/`.
    #[serde(default)]
    pub save_checkpoints: bool,
}

/// One (model, grid entry, latent size, seed) unit of work.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub grid_id: String,
    pub seed: u64,
    pub config: ModelConfig,
}

impl Cell {
    pub fn model(&self) -> ModelKind {
        self.config.kind
    }

    /// Config id used in records: the grid entry plus the latent size, so a
    /// latent sweep never collides with itself.
    pub fn config_id(&self) -> String {
        format!("{}@d{}", self.grid_id, self.config.latent_dim)
    }

    /// File-name-safe unique key.
    pub fn key(&self) -> String {
        let id: String = self
            .grid_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        format!("{}__c{}__d{}__s{}", self.model().name(), id, self.config.latent_dim, self.seed)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub cells: usize,
    pub trained: usize,
    pub skipped: usize,
    pub failed: Vec<(String, String)>,
    pub records: usize,
}

impl BenchmarkPlan {
    pub fn from_json_str(s: &str) -> Result<BenchmarkPlan> {
        let plan: BenchmarkPlan = parse_json(s)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Loads a plan; relative paths inside it are taken from its directory.
    pub fn load(path: &Path) -> Result<BenchmarkPlan> {
        let mut plan = Self::from_json_str(&read_text(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        plan.output_root = rebase(base, &plan.output_root);
        plan.data = rebase_data_spec(plan.data, base);
        for m in &mut plan.models {
            m.grid = m.grid.as_ref().map(|g| rebase(base, g));
        }
        Ok(plan)
    }

    fn validate(&self) -> Result<()> {
        let err = |pointer: String, message: &str| Error::Config {
            pointer,
            message: message.into(),
        };
        if self.models.is_empty() {
            return Err(err("/models".into(), "a plan needs at least one model"));
        }
        for (i, m) in self.models.iter().enumerate() {
            if m.seeds.is_empty() {
                return Err(err(format!("/models/{i}/seeds"), "at least one seed is required"));
            }
            if m.latent_dims.is_empty() || m.latent_dims.contains(&0) {
                return Err(err(format!("/models/{i}/latent_dims"), "latent sizes must be a non-empty list of positive sizes"));
            }
        }
        self.train.validate()
    }

    /// Every cell, with every selected grid entry resolved to a model config.
    pub fn cells(&self, input_dim: &[usize]) -> Result<Vec<Cell>> {
        let mut cells = Vec::new();
        for (i, m) in self.models.iter().enumerate() {
            let grid = match &m.grid {
                Some(p) => super::ConfigGrid::load(p)?,
                None => super::ConfigGrid::builtin(m.model),
            };
            if grid.model != m.model {
                return Err(Error::Config {
                    pointer: format!("/models/{i}/grid"),
                    message: format!("grid is for {}, plan entry is {}", grid.model, m.model),
                });
            }
            let ids: Vec<String> = match &m.configs {
                Some(ids) => ids.clone(),
                None => grid.configs.iter().map(|c| c.id.clone()).collect(),
            };
            for id in &ids {
                for &d in &m.latent_dims {
                    let config = grid.resolve(id, &self.model_defaults, input_dim, d)?;
                    for &seed in &m.seeds {
                        cells.push(Cell {
                            grid_id: id.clone(),
                            seed,
                            config: config.clone(),
                        });
                    }
                }
            }
        }
        let mut keys: Vec<String> = cells.iter().map(Cell::key).collect();
        keys.sort_unstable();
        if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config {
                pointer: "/models".into(),
                message: format!("cell {} appears twice", w[0]),
            });
        }
        Ok(cells)
    }

    pub fn records_dir(&self) -> PathBuf {
        self.output_root.join("cells")
    }
}

/// Worker threads allowed by `GAE_FORGE_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::invalid(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn run_cell(plan: &BenchmarkPlan, cell: &Cell, splits: &Splits) -> Result<Vec<BenchmarkRecord>> {
    let train_cfg = TrainConfig {
        seed: cell.seed,
        ..plan.train.clone()
    };
    let (model, log, _, _) = train_model(&cell.config, &train_cfg, splits)?;
    let key = cell.key();
    let artifacts = plan.output_root.join("artifacts").join(&key);
    create_dir(&artifacts)?;
    write_atomic(&artifacts.join(super::RUN_LOG_FILE), log.to_jsonl().as_bytes())?;
    if plan.save_checkpoints {
        save_checkpoint(&plan.output_root.join("checkpoints").join(&key), &model, &train_cfg)?;
    }
    let ident = RecordIdent {
        model: cell.model(),
        config_id: cell.config_id(),
        seed: cell.seed,
        latent_dim: cell.config.latent_dim,
    };
    let mut rng = Rng::with_stream(cell.seed, 0x00e7_a1);
    evaluate_model(&model, splits, &plan.tasks, &plan.evaluation, &ident, &mut rng, Some(&artifacts))
}

fn read_cell(path: &Path) -> Result<Vec<BenchmarkRecord>> {
    Ok(RecordTable::from_jsonl(&read_text(path)?)?.records().to_vec())
}

/// Executes every cell whose record file is missing, in parallel, then
/// rewrites the combined `records.csv` / `records.jsonl`. A cell is complete
/// once its record file exists; failed cells leave an error file and are
/// retried on the next run.
pub fn run_plan(plan: &BenchmarkPlan) -> Result<PlanSummary> {
    let splits = plan.data.load()?;
    let input_dim = [splits.train.height(), splits.train.width()];
    let cells = plan.cells(&input_dim)?;
    let records_dir = plan.records_dir();
    create_dir(&records_dir)?;

    let (done, pending): (Vec<&Cell>, Vec<&Cell>) =
        cells.iter().partition(|c| records_dir.join(format!("{}.jsonl", c.key())).is_file());
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let outcomes: Vec<(String, Result<()>)> = pool.install(|| {
        pending
            .par_iter()
            .map(|cell| {
                let key = cell.key();
                let res = run_cell(plan, cell, &splits).and_then(|recs| {
                    let mut t = RecordTable::new();
                    t.extend(recs)?;
                    write_atomic(&records_dir.join(format!("{key}.jsonl")), t.to_jsonl()?.as_bytes())
                });
                (key, res)
            })
            .collect()
    });

    let mut summary = PlanSummary {
        cells: cells.len(),
        skipped: done.len(),
        ..Default::default()
    };
    for (key, res) in outcomes {
        let err_path = records_dir.join(format!("{key}.error.json"));
        match res {
            Ok(()) => {
                summary.trained += 1;
                let _ = fs::remove_file(&err_path);
            }
            Err(e) => {
                log::error!("cell {key} failed: {e}");
                let body = serde_json::json!({ "cell": key, "error": e.to_string() });
                write_atomic(&err_path, body.to_string().as_bytes())?;
                summary.failed.push((key, e.to_string()));
            }
        }
    }

    let mut table = RecordTable::new();
    for cell in &cells {
        let path = records_dir.join(format!("{}.jsonl", cell.key()));
        if path.is_file() {
            table.extend(read_cell(&path)?)?;
        }
    }
    summary.records = table.len();
    write_atomic(&plan.output_root.join("records.csv"), table.to_csv()?.as_bytes())?;
    write_atomic(&plan.output_root.join("records.jsonl"), table.to_jsonl()?.as_bytes())?;
    Ok(summary)
}
