use std::path::PathBuf;

use ctt_core::config::EvalNet;
use ctt_core::data::load_dataset;
use ctt_core::eval::{export_features, write_feature_dump, Origin};
use ctt_core::{Sample, TrainData, Trainer};

use crate::args::EvalArgs;
use crate::fsutil::write_text;
use crate::{CmdResult, Failure};

fn split_samples(trainer: &Trainer, a: &EvalArgs) -> Result<(Vec<Sample>, Origin), Failure> {
    let mut cfg = trainer.config().clone();
    if let Some(d) = &a.data {
        cfg.data_dir = d.to_string_lossy().into_owned();
        if a.split == "val" {
            return Ok((load_dataset(d)?.samples, Origin::Labeled));
        }
    }
    match a.split.as_str() {
        "val" => {
            if cfg.val_dir.is_empty() {
                return Err(Failure::usage("the checkpoint has no val_dir; pass --data"));
            }
            Ok((load_dataset(std::path::Path::new(&cfg.val_dir))?.samples, Origin::Labeled))
        }
        "train" => Ok((load_dataset(std::path::Path::new(&cfg.data_dir))?.samples, Origin::Labeled)),
        "labeled" | "unlabeled" => {
            cfg.val_dir.clear();
            let data = TrainData::load(&cfg)?;
            Ok(if a.split == "labeled" {
                (data.labeled, Origin::Labeled)
            } else {
                (data.unlabeled, Origin::Unlabeled)
            })
        }
        other => Err(Failure::usage(format!(
            "--split: expected val, train, labeled or unlabeled, got {other:?}"
        ))),
    }
}

pub fn run(a: EvalArgs) -> CmdResult {
    let ckpt = a
        .checkpoint
        .clone()
        .ok_or_else(|| Failure::usage("--checkpoint is required"))?;
    if !ckpt.is_file() {
        return Err(Failure::usage(format!("no checkpoint at {}", ckpt.display())));
    }
    let network = EvalNet::parse(&a.network)
        .ok_or_else(|| Failure::usage(format!("--network: expected studentA, teacherA or ensemble, got {:?}", a.network)))?;
    let trainer = Trainer::load(&ckpt)?;
    let (samples, origin) = split_samples(&trainer, &a)?;
    if samples.is_empty() {
        return Err(Failure::usage(format!("split {:?} is empty", a.split)));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let cm = trainer.evaluate(&refs, network)?;
    let report = cm.report()?;
    print!("{report}");
    let path = a.report.clone().unwrap_or_else(|| {
        let mut p = ckpt.clone().into_os_string();
        p.push(format!(".{}.{}.tsv", a.split, a.network));
        PathBuf::from(p)
    });
    write_text(&path, &report)?;

    if let Some(fpath) = &a.features {
        let pair = &trainer.pairs()[0];
        let params = if network == EvalNet::TeacherA { &pair.teacher } else { &pair.student };
        let tagged: Vec<(&Sample, Origin)> = samples.iter().map(|s| (s, origin)).collect();
        let rows = export_features(params, &tagged, a.feature_cap)?;
        write_feature_dump(fpath, &rows)?;
        eprintln!("wrote {} feature rows to {}", rows.len(), fpath.display());
    }
    Ok(())
}
