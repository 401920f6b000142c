use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::ablation::{mean_std, AblationReport};
use crate::data_synth::Role;
use crate::error::{MotifError, Result};

const METRICS_CSV: &str = "metrics.csv";
const SUMMARY_CSV: &str = "summary.csv";
const SUMMARY_MD: &str = "summary.md";
const REPORT_JSON: &str = "report.json";
const SUCCESS_SVG: &str = "success.svg";

fn plot_err(e: impl std::fmt::Display) -> MotifError {
    MotifError::Config(format!("plotting failed: {e}"))
}

fn csv_err(path: &Path, e: csv::Error) -> MotifError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => MotifError::io(path, io),
        other => MotifError::parse(path.display().to_string(), format!("{other:?}")),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| MotifError::io(path, e))
}

fn role_name(r: Role) -> &'static str {
    match r {
        Role::Full => "full",
        Role::Few => "few",
    }
}

fn metrics_csv(report: &AblationReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let err = |e| csv_err(path, e);
    w.write_record(["kind", "variant", "k", "seed", "embodiment", "task", "role", "value"])
        .map_err(err)?;
    for r in &report.runs {
        let (v, k, s) = (r.variant.name(), r.k.to_string(), r.seed.to_string());
        for (e, t, role, rate) in &r.metrics.rates {
            w.write_record(["pair", v, &k, &s, e, t, role_name(*role), &rate.to_string()])
                .map_err(err)?;
        }
        w.write_record(["transfer", v, &k, &s, "", "", "few", &r.metrics.transfer.to_string()])
            .map_err(err)?;
        w.write_record(["global", v, &k, &s, "", "", "", &r.metrics.global.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| MotifError::io(path, e))
}

fn summary_csv(report: &AblationReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let err = |e| csv_err(path, e);
    w.write_record([
        "variant",
        "k",
        "runs",
        "transfer_mean",
        "transfer_std",
        "global_mean",
        "global_std",
        "reference_transfer",
    ])
    .map_err(err)?;
    for row in report.summary() {
        w.write_record([
            row.variant.name().to_string(),
            row.k.to_string(),
            row.runs.to_string(),
            row.transfer_mean.to_string(),
            row.transfer_std.to_string(),
            row.global_mean.to_string(),
            row.global_std.to_string(),
            row.reference_transfer.map(|x| x.to_string()).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| MotifError::io(path, e))
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn summary_md(report: &AblationReport) -> String {
    let mut s = String::from("# Ablation summary\n\n");
    s.push_str("| variant | K | runs | Transfer % | Global % | reference Transfer % |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for row in report.summary() {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} ± {} | {} ± {} | {} |",
            row.variant,
            row.k,
            row.runs,
            pct(row.transfer_mean),
            pct(row.transfer_std),
            pct(row.global_mean),
            pct(row.global_std),
            row.reference_transfer.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
        );
    }

    // Per-pair grids averaged over seeds: rows are embodiments, columns
    // tasks, Few cells marked with an asterisk.
    let mut grids: BTreeMap<(usize, String), BTreeMap<(String, String), (Role, Vec<f64>)>> = BTreeMap::new();
    let mut embs: Vec<String> = Vec::new();
    let mut tasks: Vec<String> = Vec::new();
    for r in &report.runs {
        let cell = grids.entry((r.k, r.variant.name().to_string())).or_default();
        for (e, t, role, rate) in &r.metrics.rates {
            if !embs.contains(e) {
                embs.push(e.clone());
            }
            if !tasks.contains(t) {
                tasks.push(t.clone());
            }
            cell.entry((e.clone(), t.clone())).or_insert((*role, Vec::new())).1.push(*rate);
        }
    }
    for ((k, variant), cells) in &grids {
        let _ = write!(s, "\n## {variant}, K = {k}\n\n| robot |");
        for t in &tasks {
            let _ = write!(s, " {t} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(tasks.len()));
        s.push('\n');
        for e in &embs {
            let _ = write!(s, "| {e} |");
            for t in &tasks {
                match cells.get(&(e.clone(), t.clone())) {
                    Some((role, rates)) => {
                        let (m, _) = mean_std(rates);
                        let mark = if *role == Role::Few { "*" } else { "" };
                        let _ = write!(s, " {}{mark} |", pct(m));
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
    }
    s.push_str("\nCells marked * are few-shot pairs; Transfer averages them.\n");
    let audit: usize = report.runs.iter().map(|r| r.violations).sum();
    let _ = writeln!(s, "\nTraining-set accesses outside the split: {audit}.");
    s
}

fn loss_plot(report: &AblationReport, stage: &str, path: &Path) -> Result<bool> {
    let series: Vec<(String, Vec<f64>)> = report
        .runs
        .iter()
        .filter_map(|r| {
            r.logs.iter().find(|(s, _)| s == stage).map(|(_, log)| {
                (
                    format!("{} K={} s={}", r.variant, r.k, r.seed),
                    log.epochs.iter().map(|e| e.loss).collect::<Vec<f64>>(),
                )
            })
        })
        .filter(|(_, l)| !l.is_empty())
        .collect();
    if series.is_empty() {
        return Ok(false);
    }
    let epochs = series.iter().map(|(_, l)| l.len()).max().unwrap_or(1);
    let finite = series.iter().flat_map(|(_, l)| l.iter().copied()).filter(|x| x.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let pad = ((hi - lo) * 0.05).max(1e-9);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (800, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{stage} loss"), ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(55)
            .build_cartesian_2d(1usize..epochs.max(2), (lo - pad)..(hi + pad))
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .y_desc("loss")
            .draw()
            .map_err(plot_err)?;
        for (i, (label, losses)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(
                    losses.iter().enumerate().map(|(e, &l)| (e + 1, l)),
                    color.stroke_width(2),
                ))
                .map_err(plot_err)?
                .label(label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write(path, &svg)?;
    Ok(true)
}

fn success_plot(report: &AblationReport, path: &Path) -> Result<()> {
    let rows = report.summary();
    let n = rows.len();
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (120 + 110 * n as u32, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("success rate (%)", ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(40)
            .y_label_area_size(45)
            .build_cartesian_2d(0f64..n as f64, 0f64..100f64)
            .map_err(plot_err)?;
        let labels: Vec<String> = rows.iter().map(|r| format!("{} K={}", r.variant, r.k)).collect();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n.max(1))
            .x_label_formatter(&|x| {
                let i = (x - 0.5).round();
                if (x - 0.5 - i).abs() < 1e-6 && i >= 0.0 {
                    labels.get(i as usize).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .draw()
            .map_err(plot_err)?;
        let series = [
            ("Transfer", 0.1, BLUE.mix(0.7)),
            ("Global", 0.5, RED.mix(0.5)),
        ];
        for (name, offset, color) in series {
            let bars = rows.iter().enumerate().map(|(i, r)| {
                let (m, sd) = if name == "Transfer" {
                    (r.transfer_mean, r.transfer_std)
                } else {
                    (r.global_mean, r.global_std)
                };
                (i as f64 + offset, 100.0 * m, 100.0 * sd)
            });
            let bars: Vec<(f64, f64, f64)> = bars.collect();
            chart
                .draw_series(
                    bars.iter()
                        .map(|&(x, m, _)| Rectangle::new([(x, 0.0), (x + 0.38, m)], color.filled())),
                )
                .map_err(plot_err)?
                .label(name)
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
            chart
                .draw_series(bars.iter().map(|&(x, m, sd)| {
                    PathElement::new(
                        vec![(x + 0.19, (m - sd).max(0.0)), (x + 0.19, (m + sd).min(100.0))],
                        BLACK,
                    )
                }))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write(path, &svg)
}

/// Writes the metric tables, a readable summary, the full report as JSON
/// and loss/success plots into `dir`. Nothing is written for an empty
/// report.
pub fn emit_report(report: &AblationReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.runs.is_empty() {
        return Err(MotifError::Incomplete("no runs to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| MotifError::io(dir, e))?;
    let mut files = Vec::new();
    let path = dir.join(METRICS_CSV);
    metrics_csv(report, &path)?;
    files.push(path);
    let path = dir.join(SUMMARY_CSV);
    summary_csv(report, &path)?;
    files.push(path);
    let path = dir.join(SUMMARY_MD);
    write(&path, &summary_md(report))?;
    files.push(path);
    let path = dir.join(REPORT_JSON);
    let json = serde_json::to_string_pretty(report).map_err(|e| MotifError::parse(REPORT_JSON, e))?;
    write(&path, &json)?;
    files.push(path);
    for stage in ["stage1", "stage2", "stage3"] {
        let path = dir.join(format!("loss_{stage}.svg"));
        if loss_plot(report, stage, &path)? {
            files.push(path);
        }
    }
    let path = dir.join(SUCCESS_SVG);
    success_plot(report, &path)?;
    files.push(path);
    Ok(files)
}

/// Reads back the JSON written by [`emit_report`].
pub fn load_report(dir: &Path) -> Result<AblationReport> {
    let path = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(|e| MotifError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| MotifError::parse(path.display().to_string(), e))
}
