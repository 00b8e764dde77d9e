use std::fmt::Write as _;

use ctt_core::config::resolve;
use ctt_core::{Topology, TrainConfig, TrainData};

use crate::args::{parse_list, parse_overrides, AblateArgs};
use crate::fsutil::{prepare_dir, write_text};
use crate::train::train_into;
use crate::{CmdResult, Failure};

const TERMS: [&str; 4] = ["sup", "ct", "hc", "lc"];

/// One grid point.
#[derive(Clone, Debug)]
struct Variant {
    toggles: Vec<&'static str>,
    topology: Topology,
    pairs: usize,
    bank: usize,
    phi: f64,
    directional: bool,
}

impl Variant {
    fn key(&self) -> String {
        format!(
            "{}__{}__p{}__b{}__phi{}__dir-{}",
            self.toggles.join("+"),
            self.topology.name(),
            self.pairs,
            self.bank,
            self.phi,
            if self.directional { "on" } else { "off" }
        )
    }

    fn apply(&self, base: &TrainConfig) -> Result<TrainConfig, Failure> {
        let mut cfg = base.clone();
        cfg.topology = self.topology;
        cfg.pairs = self.pairs;
        cfg.bank_capacity = self.bank;
        cfg.contrast.phi = self.phi;
        cfg.contrast.directional = self.directional;
        if !self.toggles.contains(&"ct") {
            cfg.weights.ct = 0.0;
        }
        if !self.toggles.contains(&"hc") {
            cfg.weights.hc = 0.0;
        }
        if !self.toggles.contains(&"lc") {
            cfg.weights.lc = 0.0;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_toggles(raw: &[String]) -> Result<Vec<Vec<&'static str>>, Failure> {
    if raw.is_empty() {
        return Ok(vec![TERMS.to_vec()]);
    }
    raw.iter()
        .map(|set| {
            let mut on = Vec::new();
            for t in set.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                let term = TERMS
                    .iter()
                    .find(|&&k| k == t)
                    .ok_or_else(|| Failure::usage(format!("--toggles: unknown term {t:?} (use sup, ct, hc, lc)")))?;
                if !on.contains(term) {
                    on.push(*term);
                }
            }
            if !on.contains(&"sup") {
                return Err(Failure::usage(format!(
                    "--toggles={set:?}: every set must include sup"
                )));
            }
            on.sort_by_key(|t| TERMS.iter().position(|k| k == t));
            Ok(on)
        })
        .collect()
}

fn grid(a: &AblateArgs, base: &TrainConfig) -> Result<Vec<Variant>, Failure> {
    let toggles = parse_toggles(&a.toggles)?;
    let topologies = match &a.topologies {
        Some(raw) => raw
            .split(',')
            .map(|s| Topology::parse(s.trim()).ok_or_else(|| Failure::usage(format!("--topologies: unknown {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?,
        None => vec![base.topology],
    };
    let pairs = a.pairs.as_deref().map_or(Ok(vec![base.pairs]), |r| parse_list("pairs", r))?;
    let banks = a
        .bank_sizes
        .as_deref()
        .map_or(Ok(vec![base.bank_capacity]), |r| parse_list("bank-sizes", r))?;
    let phis = a.phis.as_deref().map_or(Ok(vec![base.contrast.phi]), |r| parse_list("phis", r))?;
    let directional = match &a.directional {
        Some(raw) => raw
            .split(',')
            .map(|s| match s.trim() {
                "on" => Ok(true),
                "off" => Ok(false),
                other => Err(Failure::usage(format!("--directional: expected on/off, got {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => vec![base.contrast.directional],
    };
    for (name, len) in [
        ("topologies", topologies.len()),
        ("pairs", pairs.len()),
        ("bank-sizes", banks.len()),
        ("phis", phis.len()),
        ("directional", directional.len()),
    ] {
        if len == 0 {
            return Err(Failure::usage(format!("--{name} is empty")));
        }
    }
    let mut out = Vec::new();
    for t in &toggles {
        for &topology in &topologies {
            for &p in &pairs {
                for &bank in &banks {
                    for &phi in &phis {
                        for &d in &directional {
                            out.push(Variant {
                                toggles: t.clone(),
                                topology,
                                pairs: p,
                                bank,
                                phi,
                                directional: d,
                            });
                        }
                    }
                }
            }
        }
    }
    out.sort_by_key(Variant::key);
    out.dedup_by_key(|v| v.key());
    Ok(out)
}

pub fn run(a: AblateArgs, overrides: &[String]) -> CmdResult {
    let base = resolve(a.config.as_deref(), &parse_overrides(overrides))?;
    let variants = grid(&a, &base)?;
    let configs = variants
        .iter()
        .map(|v| v.apply(&base))
        .collect::<Result<Vec<_>, _>>()?;
    let data = TrainData::load(&base)?;
    prepare_dir(&a.out, a.force, &["runs", "summary.tsv"])?;

    let mut table = String::from("key\ttoggles\ttopology\tpairs\tbank_capacity\tphi\tdirectional\tmiou\n");
    for (v, cfg) in variants.iter().zip(&configs) {
        let dir = a.out.join("runs").join(v.key());
        prepare_dir(&dir, false, &[])?;
        eprintln!("running {}", v.key());
        let out = train_into(cfg, &data, &dir)?;
        let miou = out.final_miou.map_or_else(|| "nan".to_string(), |m| format!("{m:.6}"));
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            v.key(),
            v.toggles.join("+"),
            v.topology.name(),
            v.pairs,
            v.bank,
            v.phi,
            if v.directional { "on" } else { "off" },
            miou
        );
    }
    write_text(&a.out.join("summary.tsv"), &table)?;
    print!("{table}");
    Ok(())
}
