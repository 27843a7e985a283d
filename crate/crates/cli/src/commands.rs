use std::fs;
use std::path::{Path, PathBuf};

use fusionbench::autodiff::ParamStore;
use fusionbench::checkpoint;
use fusionbench::datagen::{canonical_hash, Dataset};
use fusionbench::evalstat::{
    convergence_loop, plot_data, read_run_log, required_runs, summarize_model, CiState, LogEntry, LoopStatus, ModelSummary,
    RunOutcome,
};
use fusionbench::gradsuite::{gradient_suite, SuiteRow};
use fusionbench::models::{param_shapes, FusionNet, TextualNet, VisualNet};
use fusionbench::trainer::{run_once, PreparedData, RunResult};
use fusionbench::{Error, Result};
use serde::Serialize;

use crate::config::Config;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RUN_LOG: &str = "runs.jsonl";
pub const SUMMARY: &str = "summary.json";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Debug, Serialize)]
pub struct GenReport {
    pub command: &'static str,
    pub artifact_version: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_config_hash: String,
    pub manifest_sha256: String,
    pub out: PathBuf,
    pub samples: usize,
    pub class_counts: [usize; 3],
}

pub fn gen(cfg: &Config, out: &Path) -> Result<GenReport> {
    let ds = Dataset::generate(&cfg.datagen, cfg.seed)?;
    ds.save(out)?;
    log::info!("wrote {} samples to {}", ds.len(), out.display());
    Ok(GenReport {
        command: "gen",
        artifact_version: ARTIFACT_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        dataset_config_hash: ds.manifest.config_hash.clone(),
        manifest_sha256: file_sha256(&out.join("manifest.json"))?,
        out: out.to_path_buf(),
        samples: ds.len(),
        class_counts: ds.manifest.class_counts,
    })
}

fn load_data(cfg: &Config, dir: &Path) -> Result<(Dataset, PreparedData)> {
    let ds = Dataset::load(dir)?;
    let data = PreparedData::new(&ds);
    data.check_model(&cfg.model)?;
    Ok((ds, data))
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: &'static str,
    pub artifact_version: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_config_hash: String,
    pub result: RunResult,
}

pub fn run(cfg: &Config, data_dir: &Path, seed: u64, save_model: Option<&Path>) -> Result<RunReport> {
    let (ds, data) = load_data(cfg, data_dir)?;
    let out = run_once(&data, &cfg.model, &cfg.train, seed)?;
    if let Some(dir) = save_model {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        checkpoint::save(&out.bundle.visual.params, &dir.join("visual.ckpt"))?;
        checkpoint::save(&out.bundle.textual.params, &dir.join("textual.ckpt"))?;
        checkpoint::save(&out.bundle.fusion.params, &dir.join("fusion.ckpt"))?;
    }
    Ok(RunReport {
        command: "run",
        artifact_version: ARTIFACT_VERSION,
        config_hash: cfg.hash(),
        seed,
        dataset_config_hash: ds.manifest.config_hash,
        result: out.result,
    })
}

#[derive(Debug, Serialize)]
pub struct Models {
    pub fusion: Option<ModelSummary>,
    pub visual: Option<ModelSummary>,
    pub textual: Option<ModelSummary>,
}

#[derive(Debug, Serialize)]
pub struct LoopSummary {
    pub command: &'static str,
    pub artifact_version: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub status: LoopStatus,
    pub attempted: usize,
    pub completed: usize,
    pub failed: usize,
    pub resumed: usize,
    /// Runs the stopping rule would need at the observed fusion SD.
    pub required_runs: Option<u64>,
    pub freeze_intact: bool,
    pub models: Models,
    pub files: Vec<PathBuf>,
}

/// Key under which the run log is valid: everything a single run depends
/// on. The stopping parameters are excluded so a loop can be extended.
fn log_key(cfg: &Config, ds: &Dataset) -> String {
    canonical_hash(&(
        &cfg.model,
        &cfg.train,
        cfg.seed,
        &ds.manifest.config_hash,
        ds.manifest.global_seed,
    ))
}

pub fn eval_loop(cfg: &Config, data_dir: &Path, out: &Path, jobs: usize) -> Result<LoopSummary> {
    let (ds, data) = load_data(cfg, data_dir)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let log_path = out.join(RUN_LOG);
    let outcome = convergence_loop(
        &cfg.eval.convergence,
        cfg.seed,
        &log_key(cfg, &ds),
        jobs,
        Some(&log_path),
        |index, seed| {
            log::info!("run {index} (seed {seed})");
            run_once(&data, &cfg.model, &cfg.train, seed).map(|o| o.result)
        },
        |r: &RunResult| r.accuracy,
    )?;
    summarize("eval-loop", cfg, &outcome.entries, outcome.resumed, out)
}

/// Rebuilds the summary and plot files from an existing run log.
pub fn report(cfg: &Config, dir: &Path) -> Result<LoopSummary> {
    let log_path = dir.join(RUN_LOG);
    if !log_path.exists() {
        return Err(io_err(&log_path, std::io::ErrorKind::NotFound.into()));
    }
    let entries: Vec<LogEntry<RunResult>> = read_run_log(&log_path)?;
    if let Some(e) = entries.windows(2).find(|w| w[0].config_hash != w[1].config_hash) {
        return Err(Error::Format {
            path: log_path,
            message: format!("entry {} was written under a different configuration", e[1].index),
        });
    }
    summarize("report", cfg, &entries, entries.len(), dir)
}

fn summarize(command: &'static str, cfg: &Config, entries: &[LogEntry<RunResult>], resumed: usize, out: &Path) -> Result<LoopSummary> {
    let results: Vec<&RunResult> = entries
        .iter()
        .filter_map(|e| match &e.outcome {
            RunOutcome::Completed { result } => Some(result),
            RunOutcome::Failed { .. } => None,
        })
        .collect();
    let conv = &cfg.eval.convergence;
    let column = |pick: fn(&RunResult) -> &fusionbench::evalstat::MetricReport| {
        let accs: Vec<f64> = results.iter().map(|r| pick(r).accuracy).collect();
        let confs: Vec<_> = results.iter().map(|r| pick(r).confusion).collect();
        (accs, confs)
    };
    let (fa, fc) = column(|r| &r.fusion);
    let (va, vc) = column(|r| &r.visual);
    let (ta, tc) = column(|r| &r.textual);
    let model = |a: &[f64], c: &[_]| if a.len() >= 2 { summarize_model(a, c, conv.z).ok() } else { None };
    let models = Models {
        fusion: model(&fa, &fc),
        visual: model(&va, &vc),
        textual: model(&ta, &tc),
    };

    let mut state = CiState::new(conv);
    state.accuracies = fa.clone();
    let status = if state.converged() {
        LoopStatus::Converged
    } else {
        LoopStatus::NonConverged
    };
    let required = models
        .fusion
        .as_ref()
        .and_then(|m| required_runs(m.sd, conv.z, conv.b).ok());

    let plots = out.join("plots");
    if !results.is_empty() {
        plot_data(&[("fusion", &fa), ("visual", &va), ("textual", &ta)], &plots)?;
    }
    let mut files = vec![out.join(RUN_LOG), out.join(SUMMARY)];
    if !results.is_empty() {
        files.extend(["accuracies.csv", "histogram.csv", "qq.csv"].map(|f| plots.join(f)));
    }
    let summary = LoopSummary {
        command,
        artifact_version: ARTIFACT_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        status,
        attempted: entries.len(),
        completed: results.len(),
        failed: entries.len() - results.len(),
        resumed,
        required_runs: required,
        freeze_intact: results.iter().all(|r| r.freeze.intact),
        models,
        files,
    };
    write_json(&out.join(SUMMARY), &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct GradReport {
    pub command: &'static str,
    pub artifact_version: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub fault_injected: bool,
    pub pass: bool,
    pub failing: Vec<String>,
    pub rows: Vec<SuiteRow>,
}

pub fn gradcheck(cfg: &Config, fault: bool) -> Result<GradReport> {
    let rows = gradient_suite(fault)?;
    for r in &rows {
        log::info!(
            "{:<14} {:>6} params  max rel err {:.2e}  {}",
            r.layer,
            r.params,
            r.max_rel_err,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let failing: Vec<String> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{} ({})", r.layer, r.worst_block.as_deref().unwrap_or("-")))
        .collect();
    Ok(GradReport {
        command: "gradcheck",
        artifact_version: ARTIFACT_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        fault_injected: fault,
        pass: failing.is_empty(),
        failing,
        rows,
    })
}

#[derive(Debug, Serialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct NetInfo {
    pub parameters: usize,
    pub trainable: usize,
    pub tensors: Vec<TensorInfo>,
}

impl NetInfo {
    fn of(store: &ParamStore) -> Self {
        Self {
            parameters: store.iter().map(|(_, t)| t.numel()).sum(),
            trainable: store.num_trainable(),
            tensors: param_shapes(store)
                .into_iter()
                .map(|(name, shape)| TensorInfo { name, shape })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ModelInfo {
    pub command: &'static str,
    pub artifact_version: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub visual: NetInfo,
    pub textual: NetInfo,
    pub fusion: NetInfo,
}

pub fn model_info(cfg: &Config) -> Result<ModelInfo> {
    let m = &cfg.model;
    let visual = VisualNet::new(m.visual.clone(), cfg.train.dropout_visual, cfg.seed)?;
    let textual = TextualNet::new(m.textual.clone(), cfg.train.dropout_textual, cfg.seed)?;
    let fusion = FusionNet::new(m.fusion.clone(), m.fusion.in_dim(&m.visual, &m.textual), cfg.seed)?;
    Ok(ModelInfo {
        command: "model-info",
        artifact_version: ARTIFACT_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        visual: NetInfo::of(&visual.params),
        textual: NetInfo::of(&textual.params),
        fusion: NetInfo::of(&fusion.params),
    })
}
