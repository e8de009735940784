use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use reentangle::checkpoint::Checkpoint;
use reentangle::nn::{Dims, DisentanglerKind, GeneratorSet};
use reentangle::train::Mode;
use reentangle_cli::config::RunConfig;
use reentangle_cli::manifest::RunManifest;
use reentangle_cli::metrics::{read_metrics, HEADER};
use reentangle_cli::runner::{CompareSummary, RunSummary};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_reentangle"));
    c.env_remove(reentangle_cli::OUT_ROOT_ENV);
    c
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn empty_config_gives_the_documented_defaults() {
    let cfg = RunConfig::load(None, &[]).unwrap();
    let t = cfg.train_config();
    assert_eq!(t.total_steps, 60_000);
    assert_eq!(t.batch, 128);
    assert_eq!(t.lr0, 0.0002);
    assert_eq!(t.decay_start, 30_000);
    assert_eq!(
        (t.weights.lambda_v, t.weights.lambda_c, t.weights.lambda_r),
        (10.0, 10.0, 0.1)
    );
    assert_eq!(t.mode, Mode::Uncooperative);
    assert_eq!(cfg.dims(), Dims::default());
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, "mode = \"cooperative\"\ntotal_steps = 500\nlambda_r = 0.5\n").unwrap();
    let cfg = RunConfig::load(Some(&path), &["total_steps=800".into(), "disentangler=joint".into()]).unwrap();
    assert_eq!(cfg.mode, Mode::Cooperative);
    assert_eq!(cfg.total_steps, 800);
    assert_eq!(cfg.train_config().decay_start, 400);
    assert_eq!(cfg.lambda_r, 0.5);
    assert_eq!(cfg.disentangler, DisentanglerKind::Joint);
    // the rendered file reproduces the configuration
    fs::write(&path, cfg.to_toml()).unwrap();
    assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), cfg);
}

#[test]
fn config_errors_name_the_field_and_exit_1() {
    let dir = TempDir::new().unwrap();
    let cases: [(&[&str], &str); 6] = [
        (&["--set", "mode=banana"], "mode"),
        (&["--set", "colour=blue"], "colour"),
        (&["--set", "decay_start=99", "--steps", "10"], "decay_start"),
        (&["--set", "batch=0"], "batch"),
        (&["--set", "lr=-1"], "lr"),
        (&["--set", "sigma_c=0"], "sigma_c"),
    ];
    for (args, field) in cases {
        let out = dir.path().join("never");
        let mut full = vec!["run", "--out", s(&out)];
        full.extend_from_slice(args);
        let (c, err) = code(&full);
        assert_eq!(c, 1, "{args:?}");
        assert!(err.contains(field), "{args:?}: {err}");
        assert!(!out.join("metrics.csv").exists());
    }
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "total_steps = \n").unwrap();
    assert_eq!(code(&["run", "--config", s(&bad)]).0, 1);
    assert_eq!(code(&["run", "--config", s(&dir.path().join("missing.toml"))]).0, 1);
}

#[test]
fn run_writes_the_documented_files() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r");
    run_ok(&[
        "run",
        "--steps",
        "250",
        "--set",
        "eval_every=50",
        "--set",
        "batch=32",
        "--out",
        s(&out),
    ]);

    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,loss_v,loss_c,loss_r,gan_g1,gan_g2,loss_ac,loss_av,lr,rho"
    );
    assert_eq!(
        HEADER.join(","),
        "step,loss_v,loss_c,loss_r,gan_g1,gan_g2,loss_ac,loss_av,lr,rho"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 250);
    for (i, row) in rows.iter().enumerate() {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 10);
        assert_eq!(fields[0], (i + 1).to_string());
        assert_eq!(fields[9].is_empty(), (i + 1) % 50 != 0, "row {}", i + 1);
    }

    let manifest = RunManifest::read(&out).unwrap();
    assert_eq!(manifest.config.total_steps, 250);
    assert!(manifest.finished.is_some());
    let summary = RunSummary::read(&out).unwrap();
    assert_eq!(summary.steps_completed, 250);
    assert_eq!(
        summary.final_rho,
        read_metrics(&out.join("metrics.csv")).unwrap()[249].rho
    );
    assert!(summary.diverged.is_none());
    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert_eq!(ck.step, 250);
}

#[test]
fn rho_column_follows_the_default_schedule() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r");
    run_ok(&["run", "--steps", "1100", "--set", "batch=16", "--out", s(&out)]);
    let hist = read_metrics(&out.join("metrics.csv")).unwrap();
    let steps: Vec<usize> = hist.iter().filter(|r| r.rho.is_some()).map(|r| r.step).collect();
    assert_eq!(steps, [500, 1000, 1100]);
}

#[test]
fn same_seed_gives_byte_identical_metrics() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let common = ["--steps", "300", "--set", "batch=32", "--set", "eval_every=100"];
    for (out, seed) in [(&a, "4"), (&b, "4"), (&c, "5")] {
        let mut args = vec!["run", "--seed", seed, "--out", s(out)];
        args.extend_from_slice(&common);
        run_ok(&args);
    }
    let read = |p: &Path| fs::read(p.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));

    // the saved config alone reproduces the run
    let d = dir.path().join("d");
    run_ok(&["run", "--config", s(&a.join("config.toml")), "--out", s(&d)]);
    assert_eq!(read(&a), read(&d));
}

#[test]
fn divergence_exits_2_and_keeps_the_prefix() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("div");
    let (c, err) = code(&["run", "--steps", "100", "--set", "lr=1e30", "--out", s(&out)]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("diverged"));
    let hist = read_metrics(&out.join("metrics.csv")).unwrap();
    assert!(!hist.is_empty() && hist.len() < 100);
    assert!(RunSummary::read(&out).unwrap().diverged.is_some());
    assert!(RunManifest::read(&out).is_ok());
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let out = bin()
        .env(reentangle_cli::OUT_ROOT_ENV, dir.path())
        .args([
            "run",
            "--steps",
            "20",
            "--seed",
            "3",
            "--mode",
            "cooperative",
            "--set",
            "batch=8",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("run-cooperative-seed3").join("metrics.csv").exists());
}

#[test]
fn compare_writes_summary_and_two_panel_svg() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cmp");
    let args = [
        "compare",
        "--seeds",
        "0,1",
        "--steps",
        "200",
        "--set",
        "batch=32",
        "--set",
        "eval_every=50",
        "--jobs",
        "2",
        "--probe-samples",
        "64",
        "--out",
        s(&out),
    ];
    run_ok(&args);
    let summary: CompareSummary = serde_json::from_str(&fs::read_to_string(out.join("compare.json")).unwrap()).unwrap();
    assert_eq!(summary.cells.len(), 4);
    for seed in [0, 1] {
        for mode in [Mode::Uncooperative, Mode::Cooperative] {
            let cell = summary.cell(seed, mode).unwrap();
            assert!(cell.dir.join("metrics.csv").exists());
            assert_eq!(cell.probe.unwrap().n, 64);
            assert_eq!(RunSummary::read(&cell.dir).unwrap().probes.len(), 1);
        }
    }

    let svg = fs::read_to_string(out.join("compare.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let panels: Vec<_> = doc
        .descendants()
        .filter(|n| n.has_tag_name("g") && n.attribute("class") == Some("panel"))
        .collect();
    assert_eq!(panels.len(), 2);
    for p in &panels {
        let series = p
            .descendants()
            .filter(|n| n.attribute("class") == Some("series"))
            .count();
        assert_eq!(series, 4);
    }

    // identical datasets across modes: both cells of a seed see the same first cycle-1 loss
    let first = |mode: Mode| read_metrics(&summary.cell(0, mode).unwrap().dir.join("metrics.csv")).unwrap()[0];
    assert_eq!(first(Mode::Uncooperative).ell_v, first(Mode::Cooperative).ell_v);
}

#[test]
fn compare_assert_exits_3_on_failed_thresholds() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cmp");
    let (c, err) = code(&[
        "compare",
        "--seeds",
        "0",
        "--steps",
        "30",
        "--set",
        "batch=8",
        "--assert",
        "--no-plot",
        "--probe-samples",
        "16",
        "--out",
        s(&out),
    ]);
    assert_eq!(c, 3, "{err}");
    assert!(out.join("compare.json").exists());
    assert!(!out.join("compare.svg").exists());
}

#[test]
fn probe_exact_inverse_and_errors() {
    let dir = TempDir::new().unwrap();
    let gen = GeneratorSet::exact_inverse(Dims::default(), 32, DisentanglerKind::Split);
    let path = dir.path().join("exact.json");
    Checkpoint::generators_only(gen, 2, 0).save(&path).unwrap();

    let first = run_ok(&["probe", "--checkpoint", s(&path), "--n", "256"]);
    let report: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(report["mean_c_error"].as_f64(), Some(0.0));
    let again = run_ok(&["probe", "--checkpoint", s(&path), "--n", "256"]);
    assert_eq!(first.stdout, again.stdout);
    let other_seed = run_ok(&["probe", "--checkpoint", s(&path), "--n", "256", "--seed", "9"]);
    assert_eq!(
        serde_json::from_slice::<serde_json::Value>(&other_seed.stdout).unwrap()["mean_c_error"].as_f64(),
        Some(0.0)
    );

    assert_eq!(code(&["probe", "--checkpoint", s(&dir.path().join("nope.json"))]).0, 1);
    assert_eq!(code(&["probe", "--checkpoint", s(&path), "--set", "dim_r=2"]).0, 1);
    fs::write(dir.path().join("junk.json"), "{}").unwrap();
    assert_eq!(code(&["probe", "--checkpoint", s(&dir.path().join("junk.json"))]).0, 1);
}

#[test]
fn probe_appends_to_the_run_summary() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r");
    run_ok(&["run", "--steps", "40", "--set", "batch=16", "--out", s(&out)]);
    run_ok(&["probe", "--checkpoint", s(&out.join("checkpoint.json")), "--n", "32"]);
    run_ok(&["probe", "--checkpoint", s(&out.join("checkpoint.json")), "--n", "32"]);
    let probes = RunSummary::read(&out).unwrap().probes;
    assert_eq!(probes.len(), 2);
    assert_eq!(probes[0], probes[1]);
}

#[test]
fn plot_rerenders_from_csv() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("u"), dir.path().join("c"));
    run_ok(&[
        "run",
        "--steps",
        "60",
        "--set",
        "batch=8",
        "--set",
        "eval_every=20",
        "--out",
        s(&a),
    ]);
    run_ok(&[
        "run",
        "--steps",
        "60",
        "--set",
        "batch=8",
        "--set",
        "eval_every=20",
        "--mode",
        "cooperative",
        "--out",
        s(&b),
    ]);
    let svg_path = dir.path().join("fig.svg");
    let with_label = format!("coop={}", s(&b.join("metrics.csv")));
    run_ok(&["plot", s(&a), &with_label, "-o", s(&svg_path)]);
    let svg = fs::read_to_string(&svg_path).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let labels: Vec<&str> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("series"))
        .filter_map(|n| n.attribute("data-label"))
        .collect();
    assert_eq!(labels, ["u", "coop", "u", "coop"]);

    fs::write(dir.path().join("bad.csv"), "step,x\n1,2\n").unwrap();
    assert_eq!(code(&["plot", s(&dir.path().join("bad.csv")), "-o", s(&svg_path)]).0, 1);
}

#[test]
fn gradcheck_subcommand_passes() {
    let out = run_ok(&["gradcheck", "--n", "2"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6);
    let (c, _) = code(&["gradcheck", "--n", "1", "--tol", "0"]);
    assert_eq!(c, 3);
}
