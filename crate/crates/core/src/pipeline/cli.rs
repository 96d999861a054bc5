// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end for the pipeline stages.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{MesaError, Result};

use super::{stages, LabConfig, RunDir};

#[derive(Debug, Parser)]
#[command(
    name = "mesa",
    version,
    about = "Selective latent steering lab on a toy vision-language model"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML config; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory owned by this run.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Comma-separated strengths, e.g. 0,0.4,0.8.
    #[arg(long, global = true, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub rank: Option<usize>,
    /// greedy | top_p | top_k | temp | top_p_temp | top_k_temp
    #[arg(long, global = true)]
    pub decode: Option<String>,
    #[arg(long = "max-new-tokens", global = true)]
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    GenCorpus,
    TrainBase,
    CacheSupervision,
    TrainPerturbation,
    ExtractDirections,
    BaselineDirections,
    Generate {
        #[arg(long, default_value = "test")]
        split: String,
        /// Steering directions file; omitted means vanilla decoding.
        #[arg(long)]
        directions: Option<PathBuf>,
    },
    SweepAlpha {
        #[arg(long, default_value = "test")]
        split: String,
    },
    Analyze {
        /// Also run the loss ablation and the rank sweep.
        #[arg(long)]
        ablations: bool,
    },
    Gradcheck {
        #[arg(long, default_value_t = 24)]
        instances: usize,
    },
    ReproCheck,
    /// Every stage from corpus generation to analysis.
    RunAll,
}

impl CommonArgs {
    /// Config file (or defaults) with the flag overrides applied.
    pub fn effective_config(&self) -> Result<LabConfig> {
        let mut cfg = match &self.config {
            Some(p) => LabConfig::load(p)?,
            None => LabConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = self.alpha {
            cfg.eval.alpha = a;
        }
        if let Some(a) = &self.alphas {
            cfg.eval.alphas = a.clone();
        }
        if let Some(r) = self.rank {
            cfg.steer.rank = r;
        }
        if let Some(d) = &self.decode {
            cfg.eval.decode = d.clone();
        }
        if let Some(n) = self.max_new_tokens {
            cfg.eval.max_new_tokens = n;
        }
        Ok(cfg.resolved())
    }
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(MesaError::CheckFailed(what.to_string()))
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = cli.common.effective_config()?;
    let dir = RunDir::new(&cli.common.out, cfg)?;
    crate::artifact::atomic_write(&dir.path("config.toml"), dir.config.to_toml().as_bytes())?;
    match &cli.command {
        Command::GenCorpus => print(&stages::gen_corpus(&dir)?.artifacts),
        Command::TrainBase => print(&stages::train_base(&dir)?.1),
        Command::CacheSupervision => print(&stages::cache_supervision(&dir)?.artifacts),
        Command::TrainPerturbation => print(&stages::train_perturbation(&dir)?.1),
        Command::ExtractDirections => print(&stages::extract_directions(&dir)?.artifacts),
        Command::BaselineDirections => print(&stages::baseline_directions(&dir)?.artifacts),
        Command::Generate { split, directions } => {
            print(&stages::generate(&dir, split, directions.as_deref())?.1);
        }
        Command::SweepAlpha { split } => {
            let (_, sweeps) = stages::sweep_alpha(&dir, split)?;
            let rows: Vec<_> = sweeps.iter().flat_map(|s| s.points.iter().map(|p| p.row())).collect();
            print!("{}", crate::analyze::sweep_tsv(&rows));
        }
        Command::Analyze { ablations } => {
            let (_, analysis) = stages::analyze(&dir, *ablations)?;
            for c in &analysis.criteria {
                println!(
                    "[{}] criterion {}: {} | {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.id,
                    c.name,
                    c.detail
                );
            }
            check(analysis.passed(), "one or more behavioral criteria failed")?;
        }
        Command::Gradcheck { instances } => {
            let (_, s) = stages::gradcheck(&dir, *instances)?;
            println!(
                "checked {} skipped {} max relative error {:.3e} (tolerance {:.0e})",
                s.checked, s.skipped, s.max_relative_error, s.tolerance
            );
            check(s.passed(), "gradient check exceeded tolerance")?;
        }
        Command::ReproCheck => {
            let r = stages::repro_check(&dir)?;
            println!("{} artifacts compared, {} mismatches", r.artifacts, r.mismatches.len());
            for m in &r.mismatches {
                println!("mismatch: {m}");
            }
            check(r.identical(), "double run produced different artifacts")?;
        }
        Command::RunAll => print(&stages::run_all(&dir)?.artifacts),
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
