use std::path::{Path, PathBuf};

use ctt_core::config::{resolve, valid_keys};
use ctt_core::data::write_indices;
use ctt_core::trainer::{run_from, RunOutput};
use ctt_core::{TrainConfig, TrainData, Trainer};

use crate::args::{parse_overrides, TrainArgs};
use crate::fsutil::{prepare_dir, write_text};
use crate::{CmdResult, Failure};

/// Files a run directory owns; `--force` removes exactly these.
pub const RUN_FILES: [&str; 5] = ["config.toml", "labeled.txt", "metrics.jsonl", "checkpoints", "eval.tsv"];

/// Trains `cfg` into `dir`: config snapshot, split, log, checkpoints and a
/// final report.
pub fn train_into(cfg: &TrainConfig, data: &TrainData, dir: &Path) -> Result<RunOutput, Failure> {
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    write_indices(&dir.join("labeled.txt"), &data.labeled_indices)?;
    let trainer = Trainer::new(cfg, data.labeled.len())?;
    let out = run_from(trainer, data, Some(dir))?;
    finish(&out, data, dir)?;
    Ok(out)
}

fn finish(out: &RunOutput, data: &TrainData, dir: &Path) -> CmdResult {
    if out.final_miou.is_some() {
        let refs: Vec<_> = data.val.iter().collect();
        let cm = out.trainer.evaluate(&refs, out.trainer.config().eval_network)?;
        write_text(&dir.join("eval.tsv"), &cm.report()?)?;
    }
    Ok(())
}

fn default_dir(cfg: &TrainConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}_seed{}", cfg.topology.name(), cfg.seed))
}

fn summarize(out: &RunOutput, dir: &Path) {
    let last = out.records.last();
    println!(
        "trained {} iterations into {}",
        last.map_or(0, |r| r.iter),
        dir.display()
    );
    if let Some(r) = last {
        println!(
            "final losses: sup {:.4} ct {:.4} hc {:.4} lc {:.4} total {:.4}",
            r.sup, r.ct, r.hc, r.lc, r.total
        );
    }
    match out.final_miou {
        Some(m) => println!("final mIoU {m:.4}"),
        None => println!("no validation set; mIoU not computed"),
    }
}

pub fn run(a: TrainArgs, overrides: &[String]) -> CmdResult {
    if a.list_keys {
        for k in valid_keys() {
            println!("{k}");
        }
        return Ok(());
    }
    if let Some(ckpt) = &a.resume {
        if !overrides.is_empty() {
            return Err(Failure::usage("--resume takes its configuration from the checkpoint"));
        }
        return resume(ckpt);
    }
    let cfg = resolve(a.config.as_deref(), &parse_overrides(overrides))?;
    let dir = a.out.clone().unwrap_or_else(|| default_dir(&cfg));
    let data = TrainData::load(&cfg)?;
    prepare_dir(&dir, a.force, &RUN_FILES)?;
    let out = train_into(&cfg, &data, &dir)?;
    summarize(&out, &dir);
    Ok(())
}

fn resume(ckpt: &Path) -> CmdResult {
    if !ckpt.is_file() {
        return Err(Failure::usage(format!("no checkpoint at {}", ckpt.display())));
    }
    let dir = ckpt
        .parent()
        .and_then(Path::parent)
        .filter(|d| d.join("metrics.jsonl").is_file())
        .ok_or_else(|| Failure::usage("--resume expects <run>/checkpoints/<file>"))?
        .to_path_buf();
    let trainer = Trainer::load(ckpt)?;
    let data = TrainData::load(trainer.config())?;
    truncate_log(&dir.join("metrics.jsonl"), trainer.iteration())?;
    let out = run_from(trainer, &data, Some(&dir))?;
    finish(&out, &data, &dir)?;
    summarize(&out, &dir);
    Ok(())
}

/// Drops log lines past `iter` so the resumed run appends cleanly.
fn truncate_log(path: &Path, iter: usize) -> CmdResult {
    let text = std::fs::read_to_string(path).map_err(|e| ctt_core::Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        let at = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("iter").and_then(|i| i.as_u64()));
        if at.is_some_and(|i| i as usize <= iter) && !line.contains("\"diverged\"") {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_text(path, &kept)
}
