use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "namseg", version, about = "Weakly-supervised nodule localization and segmentation")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a stratified 4:1:1 split
    Synth(SynthArgs),
    /// Train a GAP-headed classifier on slice labels
    Train(TrainArgs),
    /// Segment slices of a dataset split
    Segment(SegmentArgs),
    /// Score predicted masks against truth
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// key=value file; command-line flags override its entries
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: u64,
    /// Seed for the split; defaults to --seed
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, default_value_t = 2000)]
    pub pos: usize,
    #[arg(long, default_value_t = 2000)]
    pub neg: usize,
    /// Square image side in pixels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.3)]
    pub background_level: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0.04)]
    pub lung_texture: f64,
    #[arg(long, default_value_t = 3.0)]
    pub radius_min: f64,
    #[arg(long, default_value_t = 9.0)]
    pub radius_max: f64,
    #[arg(long, default_value_t = 0.25)]
    pub contrast_min: f64,
    #[arg(long, default_value_t = 0.6)]
    pub contrast_max: f64,
    #[arg(long, default_value_t = 0.3)]
    pub decoy_rate: f64,
    #[arg(long, default_value_t = 0.01)]
    pub two_nodule_rate: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: u64,
    /// Dataset directory written by `synth`
    #[arg(long)]
    pub data: PathBuf,
    /// Number of GAP heads, placed on the deepest stages
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub gap_taps: u8,
    /// Channels per backbone stage, comma separated
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub head_channels: usize,
    #[arg(long, default_value_t = 10.0)]
    pub head_lr_multiplier: f64,
    /// Initial learning rate; defaults to the value for the GAP count
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub common: Common,
    /// Accepted for symmetry; segmentation is deterministic
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: PathBuf,
    /// One-GAP weight file
    #[arg(long)]
    pub model: PathBuf,
    /// Multi-GAP weight file for scope refinement
    #[arg(long)]
    pub multi_model: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Skip fine selection; output the union of candidates
    #[arg(long)]
    pub coarse_only: bool,
    /// Segment the top two activation blobs
    #[arg(long)]
    pub two_nodule: bool,
    #[arg(long, default_value_t = 0.4)]
    pub tau: f64,
    #[arg(long, default_value_t = 4)]
    pub phases: usize,
    /// Fixed smoothness weight; default scales with the window's range
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub beta_cap: Option<f64>,
    #[arg(long, default_value_t = 20)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 8)]
    pub window_margin: usize,
    #[arg(long, default_value_t = 4)]
    pub min_area: usize,
    /// Fill value for residual maps; default is the generator's background
    #[arg(long)]
    pub fill_value: Option<f64>,
    /// Write activation maps under nam/
    #[arg(long)]
    pub dump_nam: bool,
    /// Write phase-label maps under phases/
    #[arg(long)]
    pub dump_phases: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding pred/NNNNNN.masks files
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Row name in metrics.csv
    #[arg(long, default_value = "run")]
    pub name: String,
    #[arg(long, default_value_t = 1.0)]
    pub px_to_mm2: f64,
    #[arg(long, default_value_t = 2)]
    pub bbox_margin: usize,
}

/// `key=value` lines as flags. Blank lines and `#` comments are skipped;
/// `true`/`false` toggle bare switches.
pub fn config_flags(text: &str) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key=value, got {line:?}", n + 1);
        };
        let flag = format!("--{}", key.trim().replace('_', "-"));
        match value.trim() {
            "true" => out.push(flag.into()),
            "false" => {}
            v => {
                out.push(flag.into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Splices the `--config` file's entries in right after the subcommand so
/// that later, explicit flags win.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else { return Ok(args) };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let flags = config_flags(&text)?;
    let at = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map_or(args.len(), |i| i + 2);
    let mut out = args[..at.min(args.len())].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[at.min(args.len())..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_lines_become_flags() {
        let flags = config_flags("# comment\nnoise_sigma = 0.1\n\ncoarse_only=true\ntwo_nodule=false\n").unwrap();
        assert_eq!(flags, os(&["--noise-sigma", "0.1", "--coarse-only"]));
        assert!(config_flags("nonsense").is_err());
    }

    #[test]
    fn flags_after_config_win() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "pos=5\nneg=7\n").unwrap();
        let args = os(&["namseg", "synth", "--seed", "1", "--out", "x", "--config", cfg.to_str().unwrap(), "--pos", "9"]);
        let cli = Cli::try_parse_from(expand_config(args).unwrap()).unwrap();
        let Command::Synth(s) = cli.command else { panic!() };
        assert_eq!((s.pos, s.neg), (9, 7));
    }
}
