//! Single runs and the two-mode comparison.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reentangle::checkpoint::Checkpoint;
use reentangle::data::{generate, Dataset};
use reentangle::eval::{mismatch_probe, MetricsRecord, ProbeReport};
use reentangle::nn::GeneratorSet;
use reentangle::train::{run_experiment, Mode, RunObserver, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::{RunManifest, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE};
use crate::metrics::{recon_descent, MetricsWriter};
use crate::plot;
use crate::CliError;

/// Stream reserved for the mismatch probe; streams 0 to 4 belong to training.
pub const PROBE_STREAM: u64 = 5;
pub const DEFAULT_PROBE_SAMPLES: usize = 2048;

/// Thresholds applied by `compare --assert`.
pub mod thresholds {
    pub const MIN_MEDIAN_RHO_UNCOOPERATIVE: f64 = 0.98;
    pub const MAX_MEDIAN_RHO_COOPERATIVE: f64 = 0.85;
    /// Fraction of seeds in which the directional comparisons must hold.
    pub const MIN_SEED_FRACTION: f64 = 0.8;
    pub const MIN_RECON_DROP: f64 = 0.9;
    pub const MAX_SECONDS_PER_RUN: f64 = 15.0 * 60.0;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub steps_completed: usize,
    pub total_steps: usize,
    pub final_rho: Option<f64>,
    pub final_record: Option<MetricsRecord>,
    /// Mean `L_recon` over steps 100 to 600.
    pub recon_early: Option<f64>,
    /// Mean `L_recon` over the last 1000 steps.
    pub recon_final: Option<f64>,
    pub recon_drop: Option<f64>,
    pub wall_seconds: f64,
    pub diverged: Option<String>,
    pub eval_failures: Vec<(usize, String)>,
    #[serde(default)]
    pub probes: Vec<ProbeReport>,
}

impl RunSummary {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(anyhow::Error::from)?;
        fs::write(dir.join(SUMMARY_FILE), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

pub fn make_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let mut ds = generate(&cfg.domain(), cfg.pool_c, cfg.pool_v, cfg.holdout, cfg.seed)?;
    ds.training_mut().set_on_the_fly(cfg.on_the_fly);
    Ok(ds)
}

struct FileObserver {
    metrics: MetricsWriter<fs::File>,
    checkpoint: PathBuf,
}

impl RunObserver for FileObserver {
    fn on_record(&mut self, record: &MetricsRecord) -> reentangle::Result<()> {
        Ok(self.metrics.write(record)?)
    }

    fn on_checkpoint(&mut self, trainer: &Trainer) -> reentangle::Result<()> {
        Checkpoint::from_trainer(trainer).save(&self.checkpoint)
    }
}

/// Trains one configuration into `dir`.
///
/// A diverged run still writes its summary and keeps the metrics prefix;
/// the divergence is reported in the summary and left to the caller.
pub fn execute_run(cfg: &RunConfig, dataset: &Dataset, dir: &Path) -> Result<(RunSummary, GeneratorSet), CliError> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = RunManifest::new(cfg, dir);
    manifest.write(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;

    let mut observer = FileObserver {
        metrics: MetricsWriter::create(&dir.join(METRICS_FILE))?,
        checkpoint: dir.join(CHECKPOINT_FILE),
    };
    let start = Instant::now();
    let train_cfg = cfg.train_config();
    let result = run_experiment(&train_cfg, dataset, &mut observer)?;
    let wall_seconds = start.elapsed().as_secs_f64();

    let descent = recon_descent(&result.history, &train_cfg.weights);
    let summary = RunSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        steps_completed: result.steps_completed,
        total_steps: cfg.total_steps,
        final_rho: result.final_rho,
        final_record: result.history.last().copied(),
        recon_early: descent.map(|d| d.0),
        recon_final: descent.map(|d| d.1),
        recon_drop: descent.map(|d| d.2),
        wall_seconds,
        diverged: result.diverged.clone(),
        eval_failures: result.eval_failures.clone(),
        probes: Vec::new(),
    };
    summary.write(dir)?;
    manifest.finished = Some(crate::manifest::now());
    manifest.write(dir)?;
    Ok((summary, result.gen))
}

pub fn probe_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PROBE_STREAM);
    rng
}

/// Mismatch probe against the training pools of `dataset`, seeded by `seed`.
pub fn probe(gen: &GeneratorSet, dataset: &Dataset, n: usize, seed: u64) -> Result<ProbeReport, CliError> {
    Ok(mismatch_probe(gen, dataset.training(), n, &mut probe_rng(seed))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareCell {
    pub seed: u64,
    pub mode: Mode,
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub probe: Option<ProbeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// `None` when the check does not apply (e.g. a run too short for the windows).
    pub pass: Option<bool>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub seeds: Vec<u64>,
    pub cells: Vec<CompareCell>,
    pub median_rho_uncooperative: Option<f64>,
    pub median_rho_cooperative: Option<f64>,
    pub checks: Vec<Check>,
}

impl CompareSummary {
    pub fn cell(&self, seed: u64, mode: Mode) -> Option<&CompareCell> {
        self.cells.iter().find(|c| c.seed == seed && c.mode == mode)
    }

    pub fn failed_checks(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.pass == Some(false)).collect()
    }

    pub fn diverged(&self) -> Vec<&CompareCell> {
        self.cells.iter().filter(|c| c.summary.diverged.is_some()).collect()
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Debug, Clone)]
pub struct CompareOptions {
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub plot: bool,
    pub probe_samples: usize,
}

const MODES: [Mode; 2] = [Mode::Uncooperative, Mode::Cooperative];

/// Runs both modes for every seed under `dir/seed-<s>/<mode>`, sharing one
/// dataset per seed, then probes every trained model and writes
/// `compare.json` (and `compare.svg` unless disabled).
pub fn compare(base: &RunConfig, opts: &CompareOptions, dir: &Path) -> Result<CompareSummary, CliError> {
    if opts.seeds.is_empty() {
        return Err(CliError::Config("seeds: at least one seed is required".into()));
    }
    base.validate()?;
    fs::create_dir_all(dir)?;
    let datasets = opts
        .seeds
        .iter()
        .map(|&s| {
            make_dataset(&RunConfig {
                seed: s,
                ..base.clone()
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let jobs: Vec<(usize, Mode)> = (0..opts.seeds.len()).flat_map(|i| MODES.map(|m| (i, m))).collect();
    let results: Mutex<Vec<Option<Result<CompareCell, CliError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(anyhow::Error::from)?;
    pool.scope(|scope| {
        for (k, &(i, mode)) in jobs.iter().enumerate() {
            let (datasets, results, seeds) = (&datasets, &results, &opts.seeds);
            scope.spawn(move |_| {
                let seed = seeds[i];
                let cfg = RunConfig {
                    seed,
                    mode,
                    ..base.clone()
                };
                let cell_dir = dir.join(format!("seed-{seed}")).join(mode.as_str());
                let cell = execute_run(&cfg, &datasets[i], &cell_dir).and_then(|(mut summary, gen)| {
                    let probe = if summary.diverged.is_none() {
                        let p = probe(&gen, &datasets[i], opts.probe_samples, seed)?;
                        summary.probes.push(p);
                        summary.write(&cell_dir)?;
                        Some(p)
                    } else {
                        None
                    };
                    Ok(CompareCell {
                        seed,
                        mode,
                        dir: cell_dir,
                        summary,
                        probe,
                    })
                });
                results.lock().expect("no panics while holding the lock")[k] = Some(cell);
            });
        }
    });
    let cells = results
        .into_inner()
        .expect("no panics while holding the lock")
        .into_iter()
        .map(|c| c.expect("every job ran"))
        .collect::<Result<Vec<_>, _>>()?;

    let summary = summarize(opts.seeds.clone(), cells);
    fs::write(
        dir.join("compare.json"),
        serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)?,
    )?;
    if opts.plot {
        write_compare_plot(&summary, base, dir)?;
    }
    Ok(summary)
}

fn write_compare_plot(summary: &CompareSummary, base: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let mut runs = Vec::new();
    for &seed in &summary.seeds {
        for mode in MODES {
            if let Some(cell) = summary.cell(seed, mode) {
                let history = crate::metrics::read_metrics(&cell.dir.join(METRICS_FILE))?;
                let label = if summary.seeds.len() == 1 {
                    mode.as_str().to_string()
                } else {
                    format!("{} s{seed}", mode.as_str())
                };
                runs.push((label, history));
            }
        }
    }
    let svg = plot::render(&plot::standard_panels(&runs, &base.weights()));
    fs::write(dir.join("compare.svg"), svg)?;
    Ok(())
}

fn count_check(name: &str, wins: usize, of: usize) -> Check {
    let need = (thresholds::MIN_SEED_FRACTION * of as f64).ceil() as usize;
    Check {
        name: name.into(),
        pass: (of > 0).then_some(wins >= need),
        detail: format!("{wins}/{of} seeds (need {need})"),
    }
}

/// Medians and the acceptance checks over completed cells.
pub fn summarize(seeds: Vec<u64>, cells: Vec<CompareCell>) -> CompareSummary {
    use thresholds::*;
    let rhos = |mode: Mode| -> Vec<f64> {
        cells
            .iter()
            .filter(|c| c.mode == mode)
            .filter_map(|c| c.summary.final_rho)
            .collect()
    };
    let (mu, mc) = (median(&rhos(Mode::Uncooperative)), median(&rhos(Mode::Cooperative)));
    let find = |seed: u64, mode: Mode| cells.iter().find(|c| c.seed == seed && c.mode == mode);
    let pairs: Vec<(&CompareCell, &CompareCell)> = seeds
        .iter()
        .filter_map(|&s| Some((find(s, Mode::Uncooperative)?, find(s, Mode::Cooperative)?)))
        .collect();

    let mut checks = vec![
        Check {
            name: "median |rho| uncooperative".into(),
            pass: Some(mu.is_some_and(|m| m >= MIN_MEDIAN_RHO_UNCOOPERATIVE)),
            detail: format!("{} (need >= {MIN_MEDIAN_RHO_UNCOOPERATIVE})", fmt_opt(mu)),
        },
        Check {
            name: "median |rho| cooperative".into(),
            pass: Some(mc.is_some_and(|m| m <= MAX_MEDIAN_RHO_COOPERATIVE)),
            detail: format!("{} (need <= {MAX_MEDIAN_RHO_COOPERATIVE})", fmt_opt(mc)),
        },
    ];
    let rho_wins = pairs
        .iter()
        .filter(|(u, c)| matches!((u.summary.final_rho, c.summary.final_rho), (Some(a), Some(b)) if a > b))
        .count();
    checks.push(count_check(
        "uncooperative |rho| above cooperative",
        rho_wins,
        pairs.len(),
    ));

    for mode in MODES {
        let drops: Vec<Option<f64>> = cells
            .iter()
            .filter(|c| c.mode == mode)
            .map(|c| c.summary.recon_drop)
            .collect();
        let applicable = !drops.is_empty() && drops.iter().all(Option::is_some);
        let worst = drops.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        checks.push(Check {
            name: format!("L_recon descent {}", mode.as_str()),
            pass: applicable.then_some(worst >= MIN_RECON_DROP),
            detail: if applicable {
                format!("smallest drop {:.4} (need >= {MIN_RECON_DROP})", worst)
            } else {
                "run shorter than 1600 steps".into()
            },
        });
    }

    let probe_wins = pairs
        .iter()
        .filter(|(u, c)| matches!((u.probe, c.probe), (Some(a), Some(b)) if b.mean_c_error > a.mean_c_error))
        .count();
    checks.push(count_check(
        "cooperative probe error above uncooperative",
        probe_wins,
        pairs.len(),
    ));

    let slowest = cells.iter().map(|c| c.summary.wall_seconds).fold(0.0, f64::max);
    checks.push(Check {
        name: "runtime per run".into(),
        pass: Some(slowest <= MAX_SECONDS_PER_RUN),
        detail: format!("slowest {slowest:.1} s (limit {MAX_SECONDS_PER_RUN} s)"),
    });

    CompareSummary {
        seeds,
        cells,
        median_rho_uncooperative: mu,
        median_rho_cooperative: mc,
        checks,
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}
