//! End-to-end commands behind the CLI: train, generate, evaluate, run a
//! benchmark plan and render reports from its records.

mod grid;
mod plan;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use grid::{ConfigGrid, GridEntry};
pub use plan::{run_plan, thread_cap, BenchmarkPlan, Cell, PlanModel, PlanSummary, THREADS_ENV};
pub use report::{load_records_dir, render_report, write_report, Report, SWEEP_LATENT_DIMS};

use crate::data::{encode_idx_images, DataSpec, Dataset, Split, Splits};
use crate::evaluation::{
    task_classification, task_clustering, task_generation, task_interpolation, task_reconstruction, write_pgm_grid,
    BenchmarkRecord, FeatureMap, ProbeConfig, RecordTable, Task, DEFAULT_CLUSTERING_RUNS, DEFAULT_FEATURE_DIM,
};
use crate::models::{Model, ModelConfig, ModelKind};
use crate::samplers::{fit_sampler, sample, SamplerConfig, SamplerKind, SamplerState};
use crate::tensor::{Rng, Tensor};
use crate::training::{
    load_checkpoint, save_checkpoint, train_logged, write_atomic, RunLog, RunMetadata, TrainConfig,
};
use crate::{Error, Result};

pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const SAMPLER_STATE_FILE: &str = "sampler_state.json";
pub const SAMPLES_IDX_FILE: &str = "samples.idx";
pub const SAMPLES_PGM_FILE: &str = "samples.pgm";

/// Parses JSON, reporting syntax errors by byte offset and schema errors by
/// JSON pointer.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: line_col_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    serde_path_to_error::deserialize(value).map_err(|e| {
        use serde_path_to_error::Segment;
        let pointer: String = e
            .path()
            .iter()
            .map(|seg| match seg {
                Segment::Seq { index } => format!("/{index}"),
                Segment::Map { key } => format!("/{}", key.replace('~', "~0").replace('/', "~1")),
                Segment::Enum { variant } => format!("/{variant}"),
                Segment::Unknown => "/?".into(),
            })
            .collect();
        Error::Config {
            pointer,
            message: e.into_inner().to_string(),
        }
    })
}

fn line_col_offset(text: &str, line: usize, col: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    start + col.saturating_sub(1)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// The data spec at `path`, with IDX paths taken relative to its directory.
pub fn load_data_spec(path: &Path) -> Result<DataSpec> {
    let spec = DataSpec::from_json_str(&read_text(path)?)?;
    Ok(rebase_data_spec(spec, path.parent().unwrap_or(Path::new("."))))
}

pub(crate) fn rebase(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub(crate) fn rebase_data_spec(spec: DataSpec, base: &Path) -> DataSpec {
    match spec {
        DataSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            val_size,
        } => DataSpec::Idx {
            train_images: rebase(base, &train_images),
            train_labels: train_labels.map(|p| rebase(base, &p)),
            test_images: test_images.map(|p| rebase(base, &p)),
            test_labels: test_labels.map(|p| rebase(base, &p)),
            val_size,
        },
        other => other,
    }
}

fn check_input_shape(config: &ModelConfig, data: &Dataset) -> Result<()> {
    let (h, w) = config.image_hw()?;
    if (h, w) != (data.height(), data.width()) {
        return Err(Error::Config {
            pointer: "/input_dim".into(),
            message: format!("model expects {h}×{w} images, data has {}×{}", data.height(), data.width()),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub epochs: usize,
    pub restarts: usize,
}

/// Trains `config` on the training split (monitoring validation loss) and
/// returns the best snapshot with its log.
pub fn train_model(config: &ModelConfig, train_cfg: &TrainConfig, splits: &Splits) -> Result<(Model, RunLog, usize, f64)> {
    check_input_shape(config, &splits.train)?;
    let probe = Model::new(config.clone(), &mut Rng::new(0))?;
    let mut meta = RunMetadata {
        config_hash: crate::training::content_hash(
            format!("{}\n{}", config.to_canonical_json(), serde_json::to_string(train_cfg)?).as_bytes(),
        ),
        ..Default::default()
    };
    meta.extra.extend(probe.metadata());
    meta.extra.insert("model".into(), serde_json::Value::from(config.kind.name()));
    let val = splits.val.flat();
    let out = train_logged(
        |rng: &mut Rng| Model::new(config.clone(), rng),
        &splits.train.flat(),
        (!splits.val.is_empty()).then_some(&val),
        train_cfg,
        meta,
    )?;
    Ok((out.best_model, out.log, out.best_epoch, out.best_loss))
}

/// `train` command: configs from JSON files, checkpoint and run log to `out`.
pub fn run_train(model_config: &Path, train_config: Option<&Path>, data: &Path, out: &Path) -> Result<TrainSummary> {
    let config = ModelConfig::from_json_str(&read_text(model_config)?)?;
    let train_cfg: TrainConfig = match train_config {
        Some(p) => parse_json(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    train_cfg.validate()?;
    let splits = load_data_spec(data)?.load()?;
    let (model, log, best_epoch, best_loss) = train_model(&config, &train_cfg, &splits)?;
    create_dir(out)?;
    save_checkpoint(out, &model, &train_cfg)?;
    write_atomic(&out.join(RUN_LOG_FILE), log.to_jsonl().as_bytes())?;
    write_atomic(&out.join("run_log.csv"), log.to_csv().as_bytes())?;
    Ok(TrainSummary {
        out_dir: out.to_path_buf(),
        best_epoch,
        best_loss,
        epochs: log.epochs.len(),
        restarts: log.restarts(),
    })
}

/// Samplers fitted on encoded training data; the others need only the model.
pub fn sampler_needs_data(kind: SamplerKind) -> bool {
    matches!(kind, SamplerKind::GMM | SamplerKind::MAF | SamplerKind::TwoStageVAE)
}

pub fn fit_sampler_on(config: &SamplerConfig, model: &Model, splits: Option<&Splits>, rng: &mut Rng) -> Result<SamplerState> {
    let d = model.latent_dim();
    let (train, val) = match splits {
        Some(s) => (model.embed(&s.train.flat())?, (!s.val.is_empty()).then(|| model.embed(&s.val.flat())).transpose()?),
        None if sampler_needs_data(config.kind) => {
            return Err(Error::invalid(format!(
                "the {} sampler is fitted on encoded training data; pass --data",
                config.kind.name()
            )))
        }
        // the fit ignores latents for these kinds, but shape checks want one row
        None => (Tensor::zeros(&[1, d]), None),
    };
    fit_sampler(config, model, &train, val.as_ref(), rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub out_dir: PathBuf,
    pub sampler: SamplerKind,
    pub num_samples: usize,
}

/// `generate` command: fits the sampler if needed, writes samples as IDX and
/// a PGM grid plus the sampler state.
pub fn run_generate(
    model_dir: &Path,
    sampler_config: Option<&Path>,
    num_samples: usize,
    out: &Path,
    data: Option<&Path>,
    seed: u64,
) -> Result<GenerateSummary> {
    let model = load_checkpoint(model_dir)?.model;
    let sconf: SamplerConfig = match sampler_config {
        Some(p) => parse_json(&read_text(p)?)?,
        None => SamplerConfig::default(),
    };
    sconf.validate()?;
    let splits = match data {
        Some(p) if sampler_needs_data(sconf.kind) => Some(load_data_spec(p)?.load()?),
        _ => None,
    };
    if let Some(s) = &splits {
        check_input_shape(&model.config, &s.train)?;
    }
    let mut rng = Rng::new(seed);
    let state = fit_sampler_on(&sconf, &model, splits.as_ref(), &mut rng)?;
    let images = sample(&state, &model, num_samples, &mut rng)?;
    create_dir(out)?;
    write_samples(out, &images, &model.config)?;
    write_atomic(&out.join(SAMPLER_STATE_FILE), &serde_json::to_vec(&state)?)?;
    Ok(GenerateSummary {
        out_dir: out.to_path_buf(),
        sampler: sconf.kind,
        num_samples,
    })
}

fn write_samples(out: &Path, images: &Tensor, config: &ModelConfig) -> Result<()> {
    let (h, w) = config.image_hw()?;
    let n = images.shape()[0];
    let stacked = Tensor::new(vec![n, h, w], images.data().to_vec())?;
    write_atomic(&out.join(SAMPLES_IDX_FILE), &encode_idx_images(&stacked)?)?;
    let shown = n.min(100);
    write_pgm_grid(&out.join(SAMPLES_PGM_FILE), &images.data()[..shown * h * w], shown, h, w, 10)
}

/// Settings shared by the evaluate command and benchmark cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub samplers: Vec<SamplerConfig>,
    pub n_generated: usize,
    pub feature_dim: usize,
    pub feature_seed: u64,
    pub probe: ProbeConfig,
    pub clustering_runs: usize,
    pub interpolation_steps: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            samplers: vec![SamplerConfig::new(SamplerKind::Normal), SamplerConfig::new(SamplerKind::GMM)],
            n_generated: 1000,
            feature_dim: DEFAULT_FEATURE_DIM,
            feature_seed: 0,
            probe: ProbeConfig::default(),
            clustering_runs: DEFAULT_CLUSTERING_RUNS,
            interpolation_steps: 10,
        }
    }
}

/// Identifies the records produced for one trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordIdent {
    pub model: ModelKind,
    pub config_id: String,
    pub seed: u64,
    pub latent_dim: usize,
}

impl RecordIdent {
    fn record(&self, task: Task, metric: impl Into<String>, value: f64, split: Split) -> BenchmarkRecord {
        BenchmarkRecord {
            model: self.model,
            config_id: self.config_id.clone(),
            seed: self.seed,
            latent_dim: self.latent_dim,
            task,
            metric: metric.into(),
            value,
            split,
        }
    }
}

pub fn generation_metric(kind: SamplerKind) -> String {
    format!("frechet_{}", kind.name().to_ascii_lowercase())
}

fn has_two_classes(ds: &Dataset) -> bool {
    ds.labels.as_ref().is_some_and(|l| l.iter().any(|&v| v != l[0]))
}

/// Runs `tasks` on the validation and test splits (clustering on the
/// training split). Tasks whose inputs are missing are skipped, which leaves
/// a gap in the records. Image grids go to `artifacts` when given.
pub fn evaluate_model(
    model: &Model,
    splits: &Splits,
    tasks: &[Task],
    settings: &EvalSettings,
    ident: &RecordIdent,
    rng: &mut Rng,
    artifacts: Option<&Path>,
) -> Result<Vec<BenchmarkRecord>> {
    let mut out = Vec::new();
    let eval_splits: Vec<&Dataset> = [Some(&splits.val), splits.test.as_ref()]
        .into_iter()
        .flatten()
        .filter(|d| !d.is_empty())
        .collect();
    if let Some(dir) = artifacts {
        create_dir(dir)?;
    }
    for &task in tasks {
        match task {
            Task::Reconstruction => {
                for ds in &eval_splits {
                    out.push(ident.record(task, "mse", task_reconstruction(model, ds)?, ds.split));
                }
            }
            Task::Generation => {
                let fmap = FeatureMap::new(model.data_dim(), settings.feature_dim, settings.feature_seed)?;
                for sc in &settings.samplers {
                    if sc.kind == SamplerKind::VAMP && model.kind() != ModelKind::VAMP {
                        continue;
                    }
                    let state = fit_sampler_on(sc, model, Some(splits), rng)?;
                    for ds in &eval_splits {
                        let v = task_generation(model, &state, &ds.flat(), &fmap, settings.n_generated, rng)?;
                        out.push(ident.record(task, generation_metric(sc.kind), v, ds.split));
                    }
                    if let Some(dir) = artifacts {
                        let imgs = sample(&state, model, 64, rng)?;
                        let (h, w) = (splits.train.height(), splits.train.width());
                        let name = format!("samples_{}.pgm", sc.kind.name().to_ascii_lowercase());
                        write_pgm_grid(&dir.join(name), imgs.data(), 64, h, w, 8)?;
                    }
                }
            }
            Task::Classification => {
                if !has_two_classes(&splits.train) {
                    log::warn!("skipping classification: training split lacks two labelled classes");
                    continue;
                }
                for ds in eval_splits.iter().filter(|d| d.labels.is_some()) {
                    let r = task_classification(model, &splits.train, ds, &settings.probe, rng)?;
                    out.push(ident.record(task, "accuracy_mean", r.mean, ds.split));
                    out.push(ident.record(task, "accuracy_sd", r.sd, ds.split));
                }
            }
            Task::Clustering => {
                if splits.train.labels.is_none() {
                    log::warn!("skipping clustering: training split has no labels");
                    continue;
                }
                let r = task_clustering(model, &splits.train, None, settings.clustering_runs, rng)?;
                out.push(ident.record(task, "accuracy_mean", r.mean, Split::Train));
                out.push(ident.record(task, "accuracy_sd", r.sd, Split::Train));
            }
            Task::Interpolation => {
                let Some(dir) = artifacts else { continue };
                let ds = splits.test.as_ref().filter(|t| t.len() >= 2).unwrap_or(&splits.val);
                if ds.len() < 2 {
                    continue;
                }
                let end = interpolation_partner(ds);
                let x = ds.flat();
                let frames = task_interpolation(model, x.row(0), x.row(end), settings.interpolation_steps)?.frames;
                let steps = settings.interpolation_steps;
                write_pgm_grid(&dir.join("interpolation.pgm"), frames.data(), steps, ds.height(), ds.width(), steps)?;
            }
        }
    }
    Ok(out)
}

/// First image whose label differs from image 0, else image 1.
fn interpolation_partner(ds: &Dataset) -> usize {
    ds.labels
        .as_ref()
        .and_then(|l| l.iter().position(|&v| v != l[0]))
        .unwrap_or(1)
}

/// `evaluate` command: records for a saved model as CSV and JSON lines.
pub fn run_evaluate(
    model_dir: &Path,
    data: &Path,
    tasks: &[Task],
    settings: &EvalSettings,
    out: &Path,
    seed: u64,
) -> Result<RecordTable> {
    let ckpt = load_checkpoint(model_dir)?;
    let splits = load_data_spec(data)?.load()?;
    check_input_shape(&ckpt.model.config, &splits.train)?;
    let ident = RecordIdent {
        model: ckpt.model.kind(),
        config_id: "cli".into(),
        seed,
        latent_dim: ckpt.model.latent_dim(),
    };
    create_dir(out)?;
    let records = evaluate_model(&ckpt.model, &splits, tasks, settings, &ident, &mut Rng::new(seed), Some(out))?;
    let mut table = RecordTable::new();
    table.extend(records)?;
    write_atomic(&out.join("records.csv"), table.to_csv()?.as_bytes())?;
    write_atomic(&out.join("records.jsonl"), table.to_jsonl()?.as_bytes())?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    #[allow(dead_code)]
    struct Probe {
        a: Vec<Inner>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    #[allow(dead_code)]
    struct Inner {
        b: usize,
    }

    #[test]
    fn schema_errors_carry_pointers_and_syntax_errors_offsets() {
        match parse_json::<Probe>(r#"{"a": [{"b": 1}, {"b": "x"}]}"#) {
            Err(Error::Config { pointer, .. }) => assert_eq!(pointer, "/a/1/b"),
            other => panic!("{other:?}"),
        }
        match parse_json::<Probe>("{\"a\": [\n  }") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
    }
}
