//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Arguments that do not start with `-`
//! select criteria by substring.

use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use fusionbench::datagen::{oracle_accuracy, GenConfig};
use fusionbench::evalstat::{ci_from_moments, convergence_loop, required_runs, shapiro_wilk, ConvergenceConfig, Z95};
use fusionbench::gradsuite::{gradient_suite, GRAD_TOL};
use fusionbench::rng::CounterRng;
use serde::Deserialize;
use serde_json::Value;

const CHANCE: f64 = 1.0 / 3.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fusionbench"));
    cmd.env_remove("FUSIONBENCH_SEED").env_remove("FUSIONBENCH_JOBS").env_remove("RUST_LOG");
    cmd
}

fn cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`{}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(out.stdout)
}

fn parse(bytes: &[u8]) -> Result<Value, String> {
    serde_json::from_slice(bytes).map_err(|e| e.to_string())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn runs_for_interval() -> Result<Outcome, String> {
    let n = required_runs(0.0460, 1.96, 0.01).map_err(|e| e.to_string())?;
    Ok(outcome(n == 326, format!("required_runs(0.0460, 1.96, 0.01) = {n}, expected 326")))
}

fn interval_arithmetic() -> Result<Outcome, String> {
    let ci = ci_from_moments(0.7242, 0.0460, 326, Z95);
    let err = (ci.lo - 0.7192).abs().max((ci.hi - 0.7292).abs());
    Ok(outcome(
        err <= 1e-4,
        format!("[{:.6}, {:.6}] vs [0.7192, 0.7292], max error {err:.2e} (tol 1e-4)", ci.lo, ci.hi),
    ))
}

fn gradients() -> Result<Outcome, String> {
    let rows = gradient_suite(false).map_err(|e| e.to_string())?;
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.layer.as_str()).collect();
    let has_models = ["visual_model", "textual_model"].iter().all(|m| rows.iter().any(|r| r.layer == *m));
    Ok(outcome(
        failing.is_empty() && has_models,
        format!(
            "{} rows, worst relative error {worst:.2e} (tol {GRAD_TOL:.0e}), failing {failing:?}",
            rows.len()
        ),
    ))
}

#[derive(Deserialize)]
struct SwCase {
    values: Vec<f64>,
    w: f64,
    p: f64,
}

#[derive(Deserialize)]
struct SwReference {
    sample_a: SwCase,
    sample_b: SwCase,
}

fn normality_test() -> Result<Outcome, String> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/assets/shapiro_reference.json");
    let text = fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    let r: SwReference = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let mut err: f64 = 0.0;
    let mut affine: f64 = 0.0;
    for case in [&r.sample_a, &r.sample_b] {
        let got = shapiro_wilk(&case.values).map_err(|e| e.to_string())?;
        err = err.max((got.w - case.w).abs()).max((got.p - case.p).abs());
        let moved: Vec<f64> = case.values.iter().map(|x| 3.7 * x - 12.5).collect();
        let m = shapiro_wilk(&moved).map_err(|e| e.to_string())?;
        affine = affine.max((m.w - got.w).abs()).max((m.p - got.p).abs());
    }
    Ok(outcome(
        err <= 1e-3 && affine <= 1e-10,
        format!("max |W, p error| {err:.2e} (tol 1e-3), affine change {affine:.2e} (tol 1e-10)"),
    ))
}

fn oracle_ceiling() -> Result<Outcome, String> {
    let o = oracle_accuracy(&GenConfig::default(), 300, 0);
    let margin = o.full - o.visual.max(o.textual);
    Ok(outcome(
        (0.85..=0.99).contains(&o.full) && margin >= 0.10,
        format!(
            "full {:.3} (in [0.85, 0.99]), visual {:.3}, textual {:.3}, gap {:.3} (>= 0.10)",
            o.full, o.visual, o.textual, margin
        ),
    ))
}

fn stopping_rule() -> Result<Outcome, String> {
    let cfg = ConvergenceConfig::default();
    let mut hits = 0;
    let (mut lo, mut hi) = (usize::MAX, 0);
    for trial in 0..100u64 {
        let out = convergence_loop(
            &cfg,
            trial,
            "simulated",
            1,
            None,
            |_, seed| Ok(0.72 + 0.046 * CounterRng::new(seed).normal()),
            |a: &f64| *a,
        )
        .map_err(|e| e.to_string())?;
        let n = out.state.n();
        lo = lo.min(n);
        hi = hi.max(n);
        if (228..=456).contains(&n) {
            hits += 1;
        }
    }
    Ok(outcome(
        hits >= 90,
        format!("stopping n in [228, 456] in {hits}/100 trials (>= 90), observed range [{lo}, {hi}]"),
    ))
}

const SMALL: &str = r#"
seed = 11
[datagen]
per_class = 40
frames = 4
frame_hw = 16
[model.visual]
frames = 4
frame_hw = 16
conv_channels = [4, 4, 8, 8]
lstm_hidden = 8
[model.textual]
embed_dim = 8
lstm_hidden = 8
fc_dims = [16, 3]
[train]
max_epochs = 6
fusion_max_epochs = 6
lr_init = 0.01
[eval.convergence]
b = 0.2
n_min = 6
max_runs = 6
"#;

fn determinism() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).map_err(|e| e.to_string())?;
    let (cfg, data) = (s(&cfg), dir.path().join("data"));
    cli(&["--config", cfg, "gen", "--out", s(&data)])?;
    let a = cli(&["--config", cfg, "run", "--data", s(&data)])?;
    let b = cli(&["--config", cfg, "run", "--data", s(&data)])?;
    let (one, four) = (dir.path().join("one"), dir.path().join("four"));
    let sa = cli(&["--config", cfg, "eval-loop", "--data", s(&data), "--out", s(&one), "--jobs", "1"])?;
    let sb = cli(&["--config", cfg, "eval-loop", "--data", s(&data), "--out", s(&four), "--jobs", "4"])?;
    let read = |p: &Path| fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    let log_same = read(&one.join("runs.jsonl"))? == read(&four.join("runs.jsonl"))?;
    // Summaries list their own output paths; everything else must match.
    let without_paths = |bytes: &[u8]| -> Result<Value, String> {
        let mut v = parse(bytes)?;
        v.as_object_mut().ok_or("summary is not an object")?.remove("files");
        Ok(v)
    };
    let summary_same = without_paths(&sa)? == without_paths(&sb)?
        && without_paths(&read(&one.join("summary.json"))?)? == without_paths(&sa)?;
    let runs = parse(&sa)?["completed"].as_u64().unwrap_or(0);
    Ok(outcome(
        a == b && log_same && summary_same && runs == 6,
        format!("run x2 byte-identical: {}; eval-loop jobs 1 vs 4 ({runs} runs): log {log_same}, summary {summary_same}", a == b),
    ))
}

/// The 10-seed default-configuration experiment, shared by the fusion
/// effect and freeze criteria.
struct Experiment {
    summary: Value,
    log: Vec<Value>,
    seconds: f64,
    rerun_matches: Option<bool>,
}

fn experiment() -> Result<Experiment, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("ten.toml");
    fs::write(&cfg, "[eval.convergence]\nn_min = 10\nmax_runs = 10\n").map_err(|e| e.to_string())?;
    let (cfg, data, out) = (s(&cfg), dir.path().join("data"), dir.path().join("out"));
    let t0 = Instant::now();
    cli(&["--config", cfg, "gen", "--out", s(&data)])?;
    let status = bin()
        .args(["--config", cfg, "-v", "eval-loop", "--data", s(&data), "--out", s(&out)])
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("eval-loop exited {:?}", status.status.code()));
    }
    let seconds = t0.elapsed().as_secs_f64();
    let summary = parse(&status.stdout)?;
    let text = fs::read_to_string(out.join("runs.jsonl")).map_err(|e| e.to_string())?;
    let log = text.lines().map(|l| parse(l.as_bytes())).collect::<Result<Vec<_>, _>>()?;

    // One seed again through `run`: same result as inside the loop.
    let rerun_matches = match log.first() {
        Some(entry) => {
            let seed = entry["seed"].as_u64().ok_or("log entry without seed")?.to_string();
            let run = parse(&cli(&["--config", cfg, "--seed", &seed, "run", "--data", s(&data)])?)?;
            Some(run["result"] == entry["result"])
        }
        None => None,
    };
    Ok(Experiment {
        summary,
        log,
        seconds,
        rerun_matches,
    })
}

fn fusion_effect(exp: &Experiment) -> Result<Outcome, String> {
    let mean = |m: &str| exp.summary["models"][m]["mean"].as_f64().ok_or(format!("no mean for {m}"));
    let (f, v, t) = (mean("fusion")?, mean("visual")?, mean("textual")?);
    let n = exp.summary["completed"].as_u64().unwrap_or(0);
    let gain = f - v.max(t);
    let floor = CHANCE + 0.10;
    let budget = 15.0 * 60.0;
    Ok(outcome(
        n == 10 && gain >= 0.05 && [f, v, t].iter().all(|&m| m >= floor),
        format!(
            "{n} runs: fusion {f:.4}, visual {v:.4}, textual {t:.4}; gain {:.1} pts (>= 5), floor {floor:.4}; \
             {:.0} s (target <= {budget:.0} s: {})",
            100.0 * gain,
            exp.seconds,
            if exp.seconds <= budget { "met" } else { "missed" }
        ),
    ))
}

fn freeze_contract(exp: &Experiment) -> Result<Outcome, String> {
    let intact = exp
        .log
        .iter()
        .filter(|e| e["result"]["freeze"]["intact"] == Value::Bool(true))
        .count();
    let summary_ok = exp.summary["freeze_intact"] == Value::Bool(true);
    let rerun = exp.rerun_matches.unwrap_or(false);
    Ok(outcome(
        intact == exp.log.len() && !exp.log.is_empty() && summary_ok && rerun,
        format!(
            "checksums unchanged on {intact}/{} runs; single-run replay of seed 0 identical: {rerun}",
            exp.log.len()
        ),
    ))
}

type Check = fn() -> Result<Outcome, String>;

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));

    let quick: [(&str, Check); 7] = [
        ("runs_for_interval", runs_for_interval),
        ("interval_arithmetic", interval_arithmetic),
        ("gradient_suite", gradients),
        ("shapiro_wilk", normality_test),
        ("oracle_ceiling", oracle_ceiling),
        ("stopping_rule", stopping_rule),
        ("determinism", determinism),
    ];
    let mut results: Vec<(String, Outcome, f64)> = Vec::new();
    let mut record = |name: &str, t0: Instant, r: Result<Outcome, String>| {
        let o = r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let secs = t0.elapsed().as_secs_f64();
        println!("[{}] {name}: {} ({secs:.1} s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name.to_string(), o, secs));
    };
    for (name, check) in quick {
        if wanted(name) {
            let t0 = Instant::now();
            record(name, t0, check());
        }
    }
    if wanted("fusion_effect") || wanted("freeze_contract") {
        let t0 = Instant::now();
        match experiment() {
            Ok(exp) => {
                record("fusion_effect", t0, fusion_effect(&exp));
                record("freeze_contract", Instant::now(), freeze_contract(&exp));
            }
            Err(e) => {
                record("fusion_effect", t0, Err(e.clone()));
                record("freeze_contract", Instant::now(), Err(e));
            }
        }
    }

    let failed: Vec<&str> = results.iter().filter(|r| !r.1.pass).map(|r| r.0.as_str()).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
