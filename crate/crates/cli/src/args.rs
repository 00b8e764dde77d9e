use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::Args;

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 800)]
    pub count: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Image side length, or HEIGHTxWIDTH.
    #[arg(long, default_value = "64")]
    pub size: String,
    /// Minimum and maximum shapes per image, as MIN,MAX.
    #[arg(long)]
    pub shapes: Option<String>,
    /// Per-image colour shift amplitude.
    #[arg(long)]
    pub jitter: Option<f32>,
    /// Pixel noise standard deviation.
    #[arg(long)]
    pub noise: Option<f32>,
    /// Replace the dataset files in a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file (TOML, keys named as in the resolved snapshot).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory. Defaults to runs/<topology>_seed<seed>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint inside an existing run directory.
    #[arg(long, conflicts_with_all = ["config", "out"])]
    pub resume: Option<PathBuf>,
    /// Replace the run files in a non-empty run directory.
    #[arg(long)]
    pub force: bool,
    /// Print the valid config keys and exit.
    #[arg(long)]
    pub list_keys: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Base config file applied to every variant.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for per-variant runs and summary.tsv.
    #[arg(long)]
    pub out: PathBuf,
    /// A set of enabled loss terms, e.g. `sup,ct`. Repeat for several rows.
    #[arg(long)]
    pub toggles: Vec<String>,
    /// Comma-separated topology names.
    #[arg(long)]
    pub topologies: Option<String>,
    /// Comma-separated pair counts.
    #[arg(long)]
    pub pairs: Option<String>,
    /// Comma-separated memory bank capacities.
    #[arg(long)]
    pub bank_sizes: Option<String>,
    /// Comma-separated confidence thresholds.
    #[arg(long)]
    pub phis: Option<String>,
    /// Comma-separated `on`/`off` values for the directional LC mask.
    #[arg(long)]
    pub directional: Option<String>,
    /// Replace earlier results in a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// A checkpoint file from a run's checkpoints/ directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// val, train, labeled or unlabeled.
    #[arg(long, default_value = "val")]
    pub split: String,
    /// studentA, teacherA or ensemble.
    #[arg(long, default_value = "studentA")]
    pub network: String,
    /// Dataset directory replacing the one recorded in the checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report path. Defaults to <checkpoint>.<split>.<network>.tsv.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also dump per-pixel features of the evaluated network here.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Maximum exported feature vectors per class and origin.
    #[arg(long, default_value_t = 200)]
    pub feature_cap: usize,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// A metrics.jsonl file. Repeat for several runs.
    #[arg(long, required = true)]
    pub log: Vec<PathBuf>,
    /// Series names, one per log. Default: the run directory name.
    #[arg(long)]
    pub label: Vec<String>,
    /// Directory for the SVG files.
    #[arg(long)]
    pub out: PathBuf,
}

/// Pulls `--key=value` arguments that are not declared flags of the chosen
/// subcommand out of `raw`. Returns the remaining argv and the overrides
/// (without the leading dashes).
pub fn split_overrides(cmd: &clap::Command, raw: Vec<String>) -> (Vec<String>, Vec<String>) {
    let Some(sub) = raw.get(1).and_then(|name| cmd.find_subcommand(name)) else {
        return (raw, Vec::new());
    };
    let known: BTreeSet<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .chain(["help".to_string()])
        .collect();
    let mut argv = Vec::with_capacity(raw.len());
    let mut overrides = Vec::new();
    for (i, a) in raw.into_iter().enumerate() {
        let unknown = i >= 2
            && a.strip_prefix("--")
                .and_then(|s| s.split_once('='))
                .is_some_and(|(k, _)| !known.contains(k));
        if unknown {
            overrides.push(a[2..].to_string());
        } else {
            argv.push(a);
        }
    }
    (argv, overrides)
}

/// Splits `key=value` overrides.
pub fn parse_overrides(raw: &[String]) -> Vec<(String, String)> {
    raw.iter()
        .filter_map(|s| s.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

pub fn parse_list<T: std::str::FromStr>(flag: &str, raw: &str) -> Result<Vec<T>, crate::Failure> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| crate::Failure::usage(format!("--{flag}: cannot parse {s:?}")))
        })
        .collect()
}
