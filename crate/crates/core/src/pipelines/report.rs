use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::Split;
use crate::evaluation::{format_mean_sd, BenchmarkRecord, RecordTable, Task};
use crate::models::ModelKind;
use crate::training::write_atomic;
use crate::{Error, Result};

/// Latent sizes every sweep series lists, present or not.
pub const SWEEP_LATENT_DIMS: [usize; 6] = [16, 32, 64, 128, 256, 512];

const GAP_TEXT: &str = "—";
const GAP_CSV: &str = "NA";

/// Reads every per-cell record file under `dir/cells`, or `dir/*.jsonl`
/// when there is no `cells` subdirectory.
pub fn load_records_dir(dir: &Path) -> Result<RecordTable> {
    if !dir.is_dir() {
        return Err(Error::invalid(format!("records directory {} does not exist", dir.display())));
    }
    let cells = dir.join("cells");
    let src = if cells.is_dir() { cells } else { dir.to_path_buf() };
    let mut files: Vec<_> = fs::read_dir(&src)
        .map_err(|e| Error::io(&src, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut table = RecordTable::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        table.extend(RecordTable::from_jsonl(&text)?.records().to_vec())?;
    }
    Ok(table)
}

#[derive(Clone, Debug)]
struct Column {
    task: Task,
    metric: String,
    sd_metric: Option<&'static str>,
    select_on: Split,
    report_on: Split,
    lower_is_better: bool,
    /// Multiplier applied for display.
    scale: f64,
    label: String,
}

fn columns_for(task: Task, table: &RecordTable) -> Vec<Column> {
    let base = |metric: &str, label: &str| Column {
        task,
        metric: metric.into(),
        sd_metric: None,
        select_on: Split::Val,
        report_on: Split::Test,
        lower_is_better: true,
        scale: 1.0,
        label: label.into(),
    };
    match task {
        Task::Reconstruction => vec![Column {
            scale: 1e3,
            ..base("mse", "MSE (x1e-3)")
        }],
        Task::Generation => {
            let mut metrics: BTreeSet<String> = ["frechet_normal".to_string(), "frechet_gmm".to_string()].into();
            metrics.extend(
                table
                    .records()
                    .iter()
                    .filter(|r| r.task == Task::Generation)
                    .map(|r| r.metric.clone()),
            );
            let mut cols: Vec<Column> = metrics.iter().map(|m| base(m, m)).collect();
            // normal before gmm before the rest, matching the usual reading order
            cols.sort_by_key(|c| (c.metric != "frechet_normal", c.metric != "frechet_gmm", c.metric.clone()));
            cols
        }
        Task::Classification => vec![Column {
            sd_metric: Some("accuracy_sd"),
            lower_is_better: false,
            label: "accuracy % (sd)".into(),
            ..base("accuracy_mean", "")
        }],
        Task::Clustering => vec![Column {
            sd_metric: Some("accuracy_sd"),
            select_on: Split::Train,
            report_on: Split::Train,
            lower_is_better: false,
            label: "accuracy % (sd)".into(),
            ..base("accuracy_mean", "")
        }],
        Task::Interpolation => Vec::new(),
    }
}

#[derive(Clone, Debug)]
struct Selected {
    config_id: String,
    value: Option<f64>,
    sd: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn values<'a>(
    recs: &'a [BenchmarkRecord],
    model: ModelKind,
    d: usize,
    task: Task,
    metric: &'a str,
    split: Split,
) -> impl Iterator<Item = &'a BenchmarkRecord> + 'a {
    recs.iter().filter(move |r| {
        r.model == model && r.latent_dim == d && r.task == task && r.metric == metric && r.split == split
    })
}

/// Best config on the selection split (seed-averaged), reported on the
/// report split. `None` when nothing can be selected.
fn select(recs: &[BenchmarkRecord], model: ModelKind, d: usize, col: &Column) -> Option<Selected> {
    let mut by_config: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in values(recs, model, d, col.task, &col.metric, col.select_on) {
        by_config.entry(&r.config_id).or_default().push(r.value);
    }
    let (best, _) = by_config
        .iter()
        .map(|(c, v)| (*c, mean(v).expect("non-empty group")))
        .fold(None::<(&str, f64)>, |acc, (c, m)| match acc {
            Some((_, bm)) if (col.lower_is_better && m >= bm) || (!col.lower_is_better && m <= bm) => acc,
            _ => Some((c, m)),
        })?;
    let pick = |metric: &str| {
        let v: Vec<f64> = values(recs, model, d, col.task, metric, col.report_on)
            .filter(|r| r.config_id == best)
            .map(|r| r.value)
            .collect();
        mean(&v)
    };
    Some(Selected {
        config_id: best.to_string(),
        value: pick(&col.metric),
        sd: col.sd_metric.and_then(pick),
    })
}

fn display(col: &Column, s: &Selected) -> Option<String> {
    let v = s.value?;
    Some(match col.sd_metric {
        Some(_) => format_mean_sd(v, s.sd.unwrap_or(f64::NAN)),
        None => format!("{:.3}", v * col.scale),
    })
}

fn csv_value(col: &Column, s: Option<&Selected>) -> String {
    s.and_then(|s| s.value).map_or(GAP_CSV.into(), |v| format!("{}", v * col.scale))
}

/// Rendered report: the plain-text summary plus named CSV/SVG files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub text: String,
    pub files: Vec<(String, String)>,
}

fn task_title(task: Task) -> &'static str {
    match task {
        Task::Reconstruction => "Reconstruction: test MSE of the config with the lowest validation MSE",
        Task::Generation => "Generation: test Fréchet feature distance of the config best on validation, per sampler",
        Task::Classification => "Classification: test accuracy of the config with the highest mean validation accuracy",
        Task::Clustering => "Clustering: k-means accuracy on the training embeddings, best config",
        Task::Interpolation => "",
    }
}

fn render_rows(rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn csv_line(cells: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(cells).expect("in-memory csv");
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

/// Tables per task in the shape "model × metric" (one block per latent
/// size) and latent sweep series per metric. Pure in the records.
pub fn render_report(table: &RecordTable, svg: bool) -> Report {
    let recs = table.records();
    let models: Vec<ModelKind> = ModelKind::ALL
        .into_iter()
        .filter(|m| recs.iter().any(|r| r.model == *m))
        .collect();
    let dims: BTreeSet<usize> = recs.iter().map(|r| r.latent_dim).collect();
    let mut report = Report::default();

    for task in Task::ALL {
        let cols = columns_for(task, table);
        if cols.is_empty() {
            continue;
        }
        let mut header = vec!["model".to_string(), "latent_dim".to_string()];
        for c in &cols {
            header.push(c.label.clone());
            header.push(format!("{} config", c.metric));
        }
        let mut csv_header = vec!["model".to_string(), "latent_dim".to_string()];
        for c in &cols {
            csv_header.push(c.metric.clone());
            if let Some(sd) = c.sd_metric {
                csv_header.push(sd.to_string());
            }
            csv_header.push(format!("{}_config", c.metric));
        }
        let mut rows = vec![header];
        let mut csv = csv_line(&csv_header);
        for &d in &dims {
            for &m in &models {
                let picks: Vec<Option<Selected>> = cols.iter().map(|c| select(recs, m, d, c)).collect();
                if picks.iter().all(Option::is_none) {
                    continue;
                }
                let mut row = vec![m.name().to_string(), d.to_string()];
                let mut crow = row.clone();
                for (c, s) in cols.iter().zip(&picks) {
                    row.push(s.as_ref().and_then(|s| display(c, s)).unwrap_or_else(|| GAP_TEXT.into()));
                    row.push(s.as_ref().map_or(GAP_TEXT.into(), |s| s.config_id.clone()));
                    crow.push(csv_value(c, s.as_ref()));
                    if c.sd_metric.is_some() {
                        crow.push(s.as_ref().and_then(|s| s.sd).map_or(GAP_CSV.into(), |v| v.to_string()));
                    }
                    crow.push(s.as_ref().map_or(GAP_CSV.into(), |s| s.config_id.clone()));
                }
                rows.push(row);
                csv.push_str(&csv_line(&crow));
            }
        }
        let _ = writeln!(report.text, "== {} ==", task_title(task));
        report.text.push_str(&render_rows(&rows));
        report.text.push('\n');
        report.files.push((format!("table_{task}.csv"), csv));

        for c in &cols {
            let mut sweep_dims: BTreeSet<usize> = SWEEP_LATENT_DIMS.into();
            sweep_dims.extend(&dims);
            let mut header = vec!["model".to_string()];
            header.extend(sweep_dims.iter().map(|d| d.to_string()));
            let mut csv = csv_line(&header);
            let mut text_rows = vec![header];
            let mut series = Vec::new();
            for &m in &models {
                let vals: Vec<Option<f64>> = sweep_dims
                    .iter()
                    .map(|&d| select(recs, m, d, c).and_then(|s| s.value).map(|v| v * c.scale))
                    .collect();
                if vals.iter().all(Option::is_none) {
                    continue;
                }
                let mut row = vec![m.name().to_string()];
                row.extend(vals.iter().map(|v| v.map_or(GAP_CSV.into(), |v| v.to_string())));
                csv.push_str(&csv_line(&row));
                let mut trow = vec![m.name().to_string()];
                trow.extend(vals.iter().map(|v| v.map_or(GAP_TEXT.into(), |v| format!("{v:.3}"))));
                text_rows.push(trow);
                series.push((m, vals));
            }
            let _ = writeln!(report.text, "-- latent sweep: {task} {} --", c.metric);
            report.text.push_str(&render_rows(&text_rows));
            report.text.push('\n');
            let stem = format!("sweep_{task}_{}", c.metric);
            if svg {
                let dims: Vec<usize> = sweep_dims.iter().copied().collect();
                report.files.push((format!("{stem}.svg"), sweep_svg(&format!("{task} {}", c.metric), &dims, &series)));
            }
            report.files.push((format!("{stem}.csv"), csv));
        }
    }
    report
}

fn sweep_svg(title: &str, dims: &[usize], series: &[(ModelKind, Vec<Option<f64>>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().flatten().copied()).collect();
    let (lo, hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if all.is_empty() { (0.0, 1.0) } else if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (dims.len().max(2) - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{PAD}\" y=\"20\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = H - PAD,
        r = W - PAD
    );
    for (i, d) in dims.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{d}</text>", x(i), H - PAD + 16.0);
    }
    let _ = writeln!(s, "<text x=\"4\" y=\"{:.1}\">{hi:.3}</text>", PAD);
    let _ = writeln!(s, "<text x=\"4\" y=\"{:.1}\">{lo:.3}</text>", H - PAD);
    for (k, (m, vals)) in series.iter().enumerate() {
        let hue = (k * 137) % 360;
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| format!("{:.1},{:.1}", x(i), y(v))))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"hsl({hue},70%,40%)\" points=\"{}\"><title>{m}</title></polyline>",
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_report(report: &Report, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("report.txt"), report.text.as_bytes())?;
    for (name, body) in &report.files {
        write_atomic(&out.join(name), body.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(model: ModelKind, config: &str, seed: u64, d: usize, split: Split, value: f64) -> BenchmarkRecord {
        BenchmarkRecord {
            model,
            config_id: config.into(),
            seed,
            latent_dim: d,
            task: Task::Reconstruction,
            metric: "mse".into(),
            value,
            split,
        }
    }

    #[test]
    fn selects_on_validation_and_reports_test() {
        let mut t = RecordTable::new();
        t.extend([
            rec(ModelKind::VAE, "a", 0, 16, Split::Val, 0.020),
            rec(ModelKind::VAE, "a", 0, 16, Split::Test, 0.050),
            rec(ModelKind::VAE, "b", 0, 16, Split::Val, 0.010),
            rec(ModelKind::VAE, "b", 0, 16, Split::Test, 0.030),
            rec(ModelKind::VAE, "b", 1, 16, Split::Val, 0.012),
            rec(ModelKind::VAE, "b", 1, 16, Split::Test, 0.032),
            rec(ModelKind::AE, "x", 0, 32, Split::Val, 0.010),
        ])
        .unwrap();
        let r = render_report(&t, false);
        let table = &r.files.iter().find(|(n, _)| n == "table_reconstruction.csv").unwrap().1;
        let vae: Vec<&str> = table.lines().find(|l| l.starts_with("VAE,16")).unwrap().split(',').collect();
        assert!((vae[2].parse::<f64>().unwrap() - 31.0).abs() < 1e-9);
        assert_eq!(vae[3], "b");
        // AE has a validation record but no test record: a gap, not a number
        assert!(table.lines().any(|l| l == "AE,32,NA,x"));
        let sweep = &r.files.iter().find(|(n, _)| n == "sweep_reconstruction_mse.csv").unwrap().1;
        assert!(sweep.starts_with("model,16,32,64,128,256,512\n"));
        assert!(sweep.contains("VAE,31.000000000000004,NA") || sweep.contains("VAE,31,NA") || sweep.contains("VAE,31.0"));
    }

    #[test]
    fn empty_table_renders_headers_only() {
        let r = render_report(&RecordTable::new(), true);
        let (_, csv) = r.files.iter().find(|(n, _)| n == "table_classification.csv").unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert!(r.text.contains("model  latent_dim"));
        assert!(r.files.iter().any(|(n, _)| n.ends_with(".svg")));
    }
}
