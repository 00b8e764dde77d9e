use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ctt_core::{MetricsRecord, TrainConfig};

use crate::args::PlotArgs;
use crate::fsutil::write_text;
use crate::svg::{render, Chart, Series};
use crate::{CmdResult, Failure};

struct Log {
    label: String,
    records: Vec<MetricsRecord>,
    config: Option<TrainConfig>,
}

fn read_log(path: &Path, label: Option<&String>) -> Result<Log, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records: Vec<MetricsRecord> = text
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect();
    let dir = path.parent().unwrap_or(Path::new("."));
    let config = fs::read_to_string(dir.join("config.toml"))
        .ok()
        .and_then(|t| TrainConfig::from_toml(&t).ok());
    let label = label.cloned().unwrap_or_else(|| {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string())
    });
    Ok(Log { label, records, config })
}

fn moving_average(values: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i].1;
        if i >= window {
            sum -= values[i - window].1;
        }
        let n = (i + 1).min(window);
        out.push((values[i].0, sum / n as f64));
    }
    out
}

fn loss_chart(logs: &[Log]) -> String {
    let longest = logs.iter().map(|l| l.records.len()).max().unwrap_or(0);
    let window = (longest / 50).max(1);
    let mut series = Vec::new();
    for log in logs {
        let terms: [(&str, fn(&MetricsRecord) -> f64); 5] = [
            ("total", |r| r.total),
            ("sup", |r| r.sup),
            ("ct", |r| r.ct),
            ("hc", |r| r.hc),
            ("lc", |r| r.lc),
        ];
        for (name, get) in terms {
            let raw: Vec<(f64, f64)> = log.records.iter().map(|r| (r.iter as f64, get(r))).collect();
            if name != "total" && name != "sup" && raw.iter().all(|p| p.1 == 0.0) {
                continue;
            }
            let name = if logs.len() > 1 { format!("{}: {name}", log.label) } else { name.to_string() };
            series.push(Series { name, points: moving_average(&raw, window) });
        }
    }
    let title = format!("Unweighted losses (moving average over {window} iterations)");
    render(&Chart {
        title: &title,
        x_label: "iteration",
        y_label: "loss",
        series: &series,
        markers: false,
    })
}

fn miou_chart(logs: &[Log]) -> Option<String> {
    let series: Vec<Series> = logs
        .iter()
        .map(|log| Series {
            name: log.label.clone(),
            points: log
                .records
                .iter()
                .filter_map(|r| r.miou.map(|m| (r.iter as f64, 100.0 * m)))
                .collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    if series.is_empty() {
        return None;
    }
    Some(render(&Chart {
        title: "Validation mIoU",
        x_label: "iteration",
        y_label: "mIoU (%)",
        series: &series,
        markers: true,
    }))
}

/// Final mIoU against labeled fraction, one series per method. Methods are
/// named by explicit label when given, otherwise by topology.
fn gain_chart(logs: &[Log], explicit_labels: bool) -> Option<String> {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for log in logs {
        let (Some(cfg), Some(m)) = (&log.config, log.records.iter().rev().find_map(|r| r.miou)) else {
            continue;
        };
        let name = if explicit_labels { log.label.clone() } else { cfg.topology.name().to_string() };
        groups
            .entry(name)
            .or_default()
            .push((100.0 * cfg.labeled_fraction, 100.0 * m));
    }
    if groups.is_empty() {
        return None;
    }
    let baseline: Option<Vec<(f64, f64)>> = groups.get("supervised_only").cloned();
    let series: Vec<Series> = groups
        .into_iter()
        .map(|(name, mut points)| {
            points.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let gain = baseline.as_ref().filter(|_| name != "supervised_only").and_then(|base| {
                let diffs: Vec<f64> = points
                    .iter()
                    .filter_map(|p| base.iter().find(|b| b.0 == p.0).map(|b| p.1 - b.1))
                    .collect();
                (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64)
            });
            let name = match gain {
                Some(g) => format!("{name} ({g:+.1})"),
                None => name,
            };
            Series { name, points }
        })
        .collect();
    Some(render(&Chart {
        title: "Final mIoU by labeled fraction (gain over supervised_only in legend)",
        x_label: "labeled images (%)",
        y_label: "mIoU (%)",
        series: &series,
        markers: true,
    }))
}

pub fn run(a: PlotArgs) -> CmdResult {
    if !a.label.is_empty() && a.label.len() != a.log.len() {
        return Err(Failure::usage("give one --label per --log, or none"));
    }
    let mut logs = Vec::new();
    for (i, path) in a.log.iter().enumerate() {
        let log = read_log(path, a.label.get(i))?;
        if log.records.is_empty() {
            eprintln!("warning: {} has no metrics records; skipped", path.display());
            continue;
        }
        logs.push(log);
    }
    if logs.is_empty() {
        eprintln!("warning: nothing to plot");
        return Ok(());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let mut emit = |name: &str, svg: String| -> CmdResult {
        let p = a.out.join(name);
        write_text(&p, &svg)?;
        written.push(p);
        Ok(())
    };
    emit("loss_curves.svg", loss_chart(&logs))?;
    if let Some(svg) = miou_chart(&logs) {
        emit("miou.svg", svg)?;
    }
    if let Some(svg) = gain_chart(&logs, !a.label.is_empty()) {
        emit("gain.svg", svg)?;
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
