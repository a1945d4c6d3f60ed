//! `octofmm`: builds, verifies, evaluates and benchmarks the FMM structures
//! on synthetic data and writes a CSV report.
//!
//! Exit status is 0 when every check row passed, 1 when a check failed and
//! 2 when the run could not be carried out at all.

mod modes;
mod report;

use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{ArgGroup, Parser, ValueEnum};
use octofmm::generate::Distribution;
use octofmm::Depth;

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Time each construction phase and count boxes.
    Build,
    /// Run the brute-force oracles.
    Verify,
    /// Compare potentials against a direct sum.
    Evaluate,
    /// Scaling table over N (one node) or over P (several nodes).
    Bench,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Dist {
    Uniform,
    Sphere,
}

impl From<Dist> for Distribution {
    fn from(d: Dist) -> Self {
        match d {
            Dist::Uniform => Distribution::Uniform,
            Dist::Sphere => Distribution::Sphere,
        }
    }
}

#[derive(Clone, Debug, Parser)]
#[command(name = "octofmm", version, about = "Linear-time FMM structure construction on synthetic point sets")]
#[command(group(ArgGroup::new("depth").args(["cluster_size", "lmax"])))]
pub struct Args {
    #[arg(long, default_value_t = 4096)]
    pub n_sources: usize,
    /// Defaults to the number of sources.
    #[arg(long)]
    pub n_receivers: Option<usize>,
    #[arg(long, value_enum, default_value_t = Dist::Uniform)]
    pub dist: Dist,
    /// Target points per finest box; picks the shallowest level that meets it.
    #[arg(long)]
    pub cluster_size: Option<usize>,
    /// Finest octree level.
    #[arg(long)]
    pub lmax: Option<u32>,
    /// Expansion order (coefficients per box are p^2).
    #[arg(long, default_value_t = 8)]
    pub p: usize,
    #[arg(long, default_value_t = 1)]
    pub nodes: usize,
    #[arg(long, default_value_t = 1)]
    pub units_per_node: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Evaluate)]
    pub mode: Mode,
    /// CSV report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Timed repetitions per bench point; the median is reported.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Stable in-box order, making every output bit-reproducible.
    #[arg(long)]
    pub deterministic: bool,
    /// Per-packet exchange trace CSV (multi-node evaluate only).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Save the built structures (and plan, when nodes > 1) to this file.
    #[arg(long)]
    pub container: Option<PathBuf>,
}

/// Used when neither `--cluster-size` nor `--lmax` is given.
const DEFAULT_CLUSTER_SIZE: usize = 32;

impl Args {
    pub fn n_receivers(&self) -> usize {
        self.n_receivers.unwrap_or(self.n_sources)
    }

    pub fn depth(&self) -> Depth {
        match (self.lmax, self.cluster_size) {
            (Some(l), _) => Depth::Level(l),
            (None, Some(c)) => Depth::ClusterSize(c),
            (None, None) => Depth::ClusterSize(DEFAULT_CLUSTER_SIZE),
        }
    }
}

fn run(args: &Args) -> anyhow::Result<bool> {
    let report = modes::run(args)?;
    match &args.out {
        Some(path) => {
            let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            report.write(BufWriter::new(f))?;
        }
        None => report.write(io::stdout().lock())?,
    }
    for r in report.rows.iter().filter(|r| r.passed == Some(false)) {
        eprintln!("check failed: {} ({})", r.name, r.detail);
    }
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
