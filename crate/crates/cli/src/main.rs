use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gae_forge::evaluation::Task;
use gae_forge::pipelines::{
    load_records_dir, parse_json, read_text, render_report, run_evaluate, run_generate, run_plan, run_train,
    write_report, BenchmarkPlan, EvalSettings,
};
use gae_forge::Error;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "gae-forge", version, about = "Train, sample from and benchmark generative autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint and run log.
    Train {
        #[arg(long)]
        model_config: PathBuf,
        /// Training settings; library defaults when omitted.
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Data spec JSON (synthetic or IDX).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a latent sampler on a trained model and write generated images.
    Generate {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Sampler settings; the standard normal prior when omitted.
        #[arg(long)]
        sampler_config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        num_samples: usize,
        #[arg(long)]
        out: PathBuf,
        /// Data spec, required by samplers fitted on encoded data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run downstream tasks on a trained model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated task names; all tasks when omitted.
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
        /// Evaluation settings JSON.
        #[arg(long)]
        settings: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Execute a benchmark plan, skipping cells that already have records.
    Benchmark {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Render tables and latent sweeps from a records directory.
    Report {
        #[arg(long)]
        records: PathBuf,
        /// Output directory; `<records>/report` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also emit SVG line charts for the sweeps.
        #[arg(long)]
        svg: bool,
    },
}

fn parse_tasks(names: &[String]) -> Result<Vec<Task>, Error> {
    names
        .iter()
        .map(|n| {
            Task::ALL
                .into_iter()
                .find(|t| t.name().eq_ignore_ascii_case(n.trim()))
                .ok_or_else(|| Error::Config {
                    pointer: "/tasks".into(),
                    message: format!("unknown task '{n}'"),
                })
        })
        .collect()
}

fn run(cmd: Command) -> Result<Value, Error> {
    match cmd {
        Command::Train {
            model_config,
            train_config,
            data,
            out,
        } => Ok(serde_json::to_value(run_train(&model_config, train_config.as_deref(), &data, &out)?)?),
        Command::Generate {
            model,
            sampler_config,
            num_samples,
            out,
            data,
            seed,
        } => Ok(serde_json::to_value(run_generate(
            &model,
            sampler_config.as_deref(),
            num_samples,
            &out,
            data.as_deref(),
            seed,
        )?)?),
        Command::Evaluate {
            model,
            data,
            out,
            tasks,
            settings,
            seed,
        } => {
            let tasks = match tasks {
                Some(t) => parse_tasks(&t)?,
                None => Task::ALL.to_vec(),
            };
            let settings: EvalSettings = match settings {
                Some(p) => parse_json(&read_text(&p)?)?,
                None => EvalSettings::default(),
            };
            let table = run_evaluate(&model, &data, &tasks, &settings, &out, seed)?;
            Ok(json!({ "out_dir": out, "records": table.len() }))
        }
        Command::Benchmark { plan } => {
            let plan = BenchmarkPlan::load(&plan)?;
            let summary = run_plan(&plan)?;
            if let Some((cell, msg)) = summary.failed.first() {
                eprintln!("{}", serde_json::to_string(&summary)?);
                return Err(Error::InvalidArgument(format!(
                    "{} cell(s) failed, first {cell}: {msg}",
                    summary.failed.len()
                )));
            }
            Ok(serde_json::to_value(summary)?)
        }
        Command::Report { records, out, svg } => {
            let table = load_records_dir(&records)?;
            let report = render_report(&table, svg);
            let out = out.unwrap_or_else(|| records.join("report"));
            write_report(&report, &out)?;
            print!("{}", report.text);
            Ok(json!({ "out_dir": out, "records": table.len() }))
        }
    }
}

fn error_json(e: &Error) -> Value {
    let mut body = json!({ "message": e.to_string() });
    let kind = match e {
        Error::Config { pointer, message } => {
            body["pointer"] = json!(pointer);
            body["message"] = json!(message);
            "config"
        }
        Error::Parse { offset, message } => {
            body["offset"] = json!(offset);
            body["message"] = json!(message);
            "parse"
        }
        Error::Io { path, .. } => {
            body["path"] = json!(path);
            "io"
        }
        Error::Json(_) => "json",
        Error::RestartsExhausted { restarts, .. } => {
            body["restarts"] = json!(restarts);
            "diverged"
        }
        Error::Checkpoint(_) => "checkpoint",
        _ => "runtime",
    };
    body["kind"] = json!(kind);
    json!({ "error": body })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            match e {
                Error::Config { .. } | Error::Parse { .. } | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
