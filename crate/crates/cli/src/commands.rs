use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use reentangle::checkpoint::Checkpoint;
use reentangle::netcheck::{check_network, Network, DEFAULT_EPS};
use reentangle::objectives::LossWeights;
use reentangle::train::Mode;

use crate::config::RunConfig;
use crate::manifest::{RunManifest, METRICS_FILE};
use crate::metrics::read_metrics;
use crate::plot;
use crate::runner::{self, CompareOptions, RunSummary, DEFAULT_PROBE_SAMPLES};
use crate::{output_dir, CliError};

#[derive(Debug, Parser)]
#[command(
    name = "reentangle",
    version,
    about = "Cooperative vs uncooperative disentangler training on synthetic data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration.
    Run(RunArgs),
    /// Train both modes over several seeds and compare them.
    Compare(CompareArgs),
    /// Decode mismatched content/residual pairs with a saved model.
    Probe(ProbeArgs),
    /// Check network gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Re-render the SVG from existing metrics files.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set total_steps=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<RunConfig, CliError> {
        let all: Vec<String> = self.overrides.iter().chain(extra).cloned().collect();
        RunConfig::load(self.config.as_deref(), &all)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Run directory (default: `$REENTANGLE_OUT/run-<mode>-seed<seed>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Cells trained concurrently (default: available cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Exit with status 3 unless every acceptance threshold holds.
    #[arg(long)]
    pub assert: bool,
    #[arg(long)]
    pub no_plot: bool,
    #[arg(long, default_value_t = DEFAULT_PROBE_SAMPLES)]
    pub probe_samples: usize,
    /// Output directory (default: `$REENTANGLE_OUT/compare`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset configuration; its dims must match the checkpoint.
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset and probe seed (default: the checkpoint's seed).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_PROBE_SAMPLES)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Only `dim_c`, `dim_r` and `hidden` are used.
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// `metrics.csv` files or run directories, optionally as `label=path`.
    #[arg(required = true)]
    pub inputs: Vec<String>,
    #[arg(long, short)]
    pub output: PathBuf,
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
        Command::Probe(a) => probe(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn flag_overrides(mode: Option<Mode>, seed: Option<u64>, steps: Option<usize>) -> Vec<String> {
    let mut v = Vec::new();
    if let Some(m) = mode {
        v.push(format!("mode=\"{}\"", m.as_str()));
    }
    if let Some(s) = seed {
        v.push(format!("seed={s}"));
    }
    if let Some(n) = steps {
        v.push(format!("total_steps={n}"));
    }
    v
}

fn run(a: RunArgs) -> Result<(), CliError> {
    let cfg = a.config.load(&flag_overrides(a.mode, a.seed, a.steps))?;
    let dir = output_dir(a.out, &format!("run-{}-seed{}", cfg.mode.as_str(), cfg.seed));
    let dataset = runner::make_dataset(&cfg)?;
    let (summary, _) = runner::execute_run(&cfg, &dataset, &dir)?;
    println!(
        "{} seed {}: {} steps, final |rho| {}, {:.1} s -> {}",
        cfg.mode.as_str(),
        cfg.seed,
        summary.steps_completed,
        summary
            .final_rho
            .map(|r| format!("{r:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        summary.wall_seconds,
        dir.display()
    );
    if let Some(d) = summary.diverged {
        return Err(CliError::Diverged(d));
    }
    Ok(())
}

fn compare(a: CompareArgs) -> Result<(), CliError> {
    let cfg = a.config.load(&flag_overrides(None, None, a.steps))?;
    let dir = output_dir(a.out, "compare");
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let opts = CompareOptions {
        seeds: a.seeds,
        jobs,
        plot: !a.no_plot,
        probe_samples: a.probe_samples,
    };
    let summary = runner::compare(&cfg, &opts, &dir)?;
    println!(
        "{:>6}  {:>14}  {:>8}  {:>10}  {:>10}",
        "seed", "mode", "|rho|", "L_recon", "probe err"
    );
    for c in &summary.cells {
        println!(
            "{:>6}  {:>14}  {:>8}  {:>10}  {:>10}",
            c.seed,
            c.mode.as_str(),
            c.summary
                .final_rho
                .map(|r| format!("{r:.4}"))
                .unwrap_or_else(|| "n/a".into()),
            c.summary
                .recon_final
                .map(|r| format!("{r:.4}"))
                .unwrap_or_else(|| "n/a".into()),
            c.probe
                .map(|p| format!("{:.4}", p.mean_c_error))
                .unwrap_or_else(|| "n/a".into()),
        );
    }
    for check in &summary.checks {
        let status = match check.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "N/A ",
        };
        println!("{status}  {}: {}", check.name, check.detail);
    }
    println!("-> {}", dir.display());
    if let Some(c) = summary.diverged().first() {
        return Err(CliError::Diverged(format!(
            "seed {} {}: {}",
            c.seed,
            c.mode.as_str(),
            c.summary.diverged.as_deref().unwrap_or_default()
        )));
    }
    let failed = summary.failed_checks();
    if a.assert && !failed.is_empty() {
        let names: Vec<&str> = failed.iter().map(|c| c.name.as_str()).collect();
        return Err(CliError::Assertion(names.join("; ")));
    }
    Ok(())
}

fn probe(a: ProbeArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut extra = Vec::new();
    extra.push(format!("seed={}", a.seed.unwrap_or(ck.seed)));
    let cfg = a.config.load(&extra)?;
    ck.expect_dims(cfg.dims())?;
    let dataset = runner::make_dataset(&cfg)?;
    let report = runner::probe(&ck.generators, &dataset, a.n, cfg.seed)?;
    println!("{}", serde_json::to_string(&report).map_err(anyhow::Error::from)?);
    if let Some(dir) = a.checkpoint.parent() {
        if let Ok(mut summary) = RunSummary::read(dir) {
            summary.probes.push(report);
            summary.write(dir)?;
        }
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let cfg = a.config.load(&[])?;
    if !(a.eps > 0.0) {
        return Err(CliError::Config("eps: must be positive".into()));
    }
    let mut failed = Vec::new();
    for (i, net) in Network::ALL.into_iter().enumerate() {
        let rep = check_network(net, cfg.dims(), cfg.hidden, a.n, a.seed.wrapping_add(i as u64), a.eps)?;
        let ok = rep.passes(a.tol);
        println!(
            "{}  {:<8} max rel error {:.3e} over {} coordinates ({} excluded at kinks)",
            if ok { "PASS" } else { "FAIL" },
            net.name(),
            rep.max_rel_error,
            rep.checked,
            rep.excluded
        );
        if !ok {
            failed.push(net.name());
        }
    }
    if !failed.is_empty() {
        return Err(CliError::Assertion(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

/// Resolves a plot input to `(label, metrics path)`.
fn plot_input(spec: &str) -> (String, PathBuf) {
    let (label, path) = match spec.split_once('=') {
        Some((l, p)) => (Some(l.to_string()), PathBuf::from(p)),
        None => (None, PathBuf::from(spec)),
    };
    let csv = if path.is_dir() { path.join(METRICS_FILE) } else { path };
    let label = label.unwrap_or_else(|| {
        csv.parent()
            .and_then(Path::file_name)
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| csv.display().to_string())
    });
    (label, csv)
}

fn plot_cmd(a: PlotArgs) -> Result<(), CliError> {
    let mut runs = Vec::new();
    let mut weights: Option<LossWeights> = None;
    for spec in &a.inputs {
        let (label, csv) = plot_input(spec);
        let history = read_metrics(&csv)?;
        if weights.is_none() {
            weights = csv
                .parent()
                .and_then(|d| RunManifest::read(d).ok())
                .map(|m| m.config.weights());
        }
        runs.push((label, history));
    }
    let svg = plot::render(&plot::standard_panels(&runs, &weights.unwrap_or_default()));
    fs::write(&a.output, svg)?;
    println!("-> {}", a.output.display());
    Ok(())
}
