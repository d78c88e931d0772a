use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const DATA: &str = r#"{"source": "synth", "kind": "blobs", "n": 90, "n_test": 30, "height": 6, "width": 6, "n_classes": 3, "seed": 1}"#;

fn gae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gae-forge")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(out.stderr.trim_ascii()).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn missing_required_key_exits_2_with_pointer() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mc = write(d, "m.json", r#"{"kind": "BetaVAE", "input_dim": [6, 6], "beta": 2}"#);
    let data = write(d, "d.json", DATA);
    let out = gae(&["train", "--model-config", &mc, "--data", &data, "--out", &d.join("o").to_string_lossy()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["pointer"], "/latent_dim");
}

#[test]
fn train_then_generate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mc = write(d, "m.json", r#"{"kind": "BetaVAE", "input_dim": [6, 6], "latent_dim": 16, "beta": 2, "encoder_hidden_dims": [12]}"#);
    let tc = write(d, "t.json", r#"{"num_epochs": 2, "batch_size": 30, "learning_rate": 0.001}"#);
    let data = write(d, "d.json", DATA);
    let model = d.join("model").to_string_lossy().into_owned();
    let out = gae(&["train", "--model-config", &mc, "--train-config", &tc, "--data", &data, "--out", &model]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["epochs"], 2);
    for f in ["params.bin", "manifest.json", "model_config.json", "training_config.json", "run_log.jsonl"] {
        assert!(d.join("model").join(f).is_file(), "{f}");
    }

    let gmm = write(d, "s.json", r#"{"kind": "GMM", "n_components": 10}"#);
    let gen = d.join("gen").to_string_lossy().into_owned();
    let no_data = gae(&["generate", "--model", &model, "--sampler-config", &gmm, "--num-samples", "100", "--out", &gen]);
    assert_eq!(no_data.status.code(), Some(1));
    assert!(stderr_json(&no_data)["error"]["message"].as_str().unwrap().contains("--data"));

    let ok = gae(&[
        "generate", "--model", &model, "--sampler-config", &gmm, "--num-samples", "100", "--out", &gen, "--data", &data,
    ]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let idx = fs::read(d.join("gen/samples.idx")).unwrap();
    assert_eq!(u32::from_be_bytes(idx[4..8].try_into().unwrap()), 100);
    assert!(d.join("gen/sampler_state.json").is_file());

    let normal = gae(&["generate", "--model", &model, "--num-samples", "5", "--out", &d.join("n").to_string_lossy()]);
    assert!(normal.status.success());

    let eval_dir = d.join("eval").to_string_lossy().into_owned();
    let ev = gae(&["evaluate", "--model", &model, "--data", &data, "--out", &eval_dir, "--tasks", "reconstruction,clustering"]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let csv = fs::read_to_string(d.join("eval/records.csv")).unwrap();
    assert!(csv.contains("BetaVAE,cli,0,16,reconstruction,mse,"));
    let bad = gae(&["evaluate", "--model", &model, "--data", &data, "--out", &eval_dir, "--tasks", "dreaming"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn benchmark_twice_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let plan = serde_json::json!({
        "data": serde_json::from_str::<Value>(DATA).unwrap(),
        "output_root": "out",
        "tasks": ["reconstruction", "clustering"],
        "model_defaults": {"encoder_hidden_dims": [8]},
        "train": {"num_epochs": 1, "batch_size": 30},
        "evaluation": {"clustering_runs": 2},
        "models": [{"model": "VAE", "seeds": [0], "latent_dims": [16, 32]}]
    });
    let plan = write(d, "plan.json", &plan.to_string());
    let first = gae(&["benchmark", "--plan", &plan]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let s: Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(s["trained"], 2);
    let again = gae(&["benchmark", "--plan", &plan]);
    let s: Value = serde_json::from_slice(&again.stdout).unwrap();
    assert_eq!((s["trained"].as_u64(), s["skipped"].as_u64()), (Some(0), Some(2)));

    let rep = gae(&["report", "--records", &d.join("out").to_string_lossy(), "--svg"]);
    assert!(rep.status.success());
    let sweep = fs::read_to_string(d.join("out/report/sweep_reconstruction_mse.csv")).unwrap();
    let vae = sweep.lines().find(|l| l.starts_with("VAE,")).unwrap();
    let cells: Vec<&str> = vae.split(',').collect();
    assert_eq!(cells.len(), 7);
    assert!(cells[1].parse::<f64>().is_ok() && cells[2].parse::<f64>().is_ok());
    assert_eq!(&cells[3..], ["NA"; 4]);
    assert!(d.join("out/report/sweep_reconstruction_mse.svg").is_file());
}

#[test]
fn empty_records_dir_gives_headers_and_exit_0() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gae(&["report", "--records", &tmp.path().to_string_lossy()]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("model  latent_dim"));
    let table = fs::read_to_string(tmp.path().join("report/table_reconstruction.csv")).unwrap();
    assert_eq!(table.trim(), "model,latent_dim,mse,mse_config");
}
