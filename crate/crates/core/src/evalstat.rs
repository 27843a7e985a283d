//! Replication sizing, CI-driven stopping, normality testing and metrics.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{config_err, contract_err, Error, Result};
use crate::rng::derive_seed;

pub const Z95: f64 = 1.96;

/// `ceil((2σz/B)²)`, at least 2.
pub fn required_runs(sigma: f64, z: f64, b: f64) -> Result<u64> {
    if !(b > 0.0) {
        return Err(config_err!("target CI width B must be positive, got {b}"));
    }
    if !(sigma >= 0.0) || !(z > 0.0) {
        return Err(config_err!("sigma must be >= 0 and z > 0"));
    }
    Ok((required_runs_unclamped(sigma, z, b).ceil() as u64).max(2))
}

pub fn required_runs_unclamped(sigma: f64, z: f64, b: f64) -> f64 {
    (2.0 * sigma * z / b).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub half_width: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Normal-approximation interval from summary moments.
pub fn ci_from_moments(mean: f64, sd: f64, n: usize, z: f64) -> CiSummary {
    let half_width = z * sd / (n as f64).sqrt();
    CiSummary {
        n,
        mean,
        sd,
        half_width,
        lo: mean - half_width,
        hi: mean + half_width,
    }
}

/// Mean, sample SD (n − 1) and the z-interval of the mean.
pub fn ci_mean(sample: &[f64], z: f64) -> Result<CiSummary> {
    let n = sample.len();
    if n < 2 {
        return Err(contract_err!("a confidence interval needs at least 2 values, got {n}"));
    }
    let (mean, sd) = mean_sd(sample);
    Ok(ci_from_moments(mean, sd, n, z))
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    // shifting by the first value keeps constant samples exact
    let mean = x[0] + x.iter().map(|v| v - x[0]).sum::<f64>() / n;
    let ss: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceConfig {
    /// Full target CI width.
    pub b: f64,
    pub z: f64,
    pub n_min: usize,
    pub max_runs: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            b: 0.01,
            z: Z95,
            n_min: 30,
            max_runs: 1000,
        }
    }
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) {
            return Err(config_err!("eval.convergence.b must be positive"));
        }
        if !(self.z > 0.0) {
            return Err(config_err!("eval.convergence.z must be positive"));
        }
        if self.n_min < 2 {
            return Err(config_err!("eval.convergence.n_min must be >= 2"));
        }
        if self.max_runs < self.n_min {
            return Err(config_err!("eval.convergence.max_runs must be >= n_min"));
        }
        Ok(())
    }
}

/// Accuracies of completed runs and the stopping rule over them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiState {
    pub accuracies: Vec<f64>,
    pub z: f64,
    pub b: f64,
    pub n_min: usize,
}

impl CiState {
    pub fn new(cfg: &ConvergenceConfig) -> Self {
        Self {
            accuracies: Vec::new(),
            z: cfg.z,
            b: cfg.b,
            n_min: cfg.n_min,
        }
    }

    pub fn n(&self) -> usize {
        self.accuracies.len()
    }

    pub fn summary(&self) -> Option<CiSummary> {
        ci_mean(&self.accuracies, self.z).ok()
    }

    /// Half-width ≤ B/2 with at least `n_min` runs.
    pub fn converged(&self) -> bool {
        self.n() >= self.n_min && self.summary().is_some_and(|s| s.half_width <= self.b / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome<R> {
    Completed { result: R },
    Failed { error: String },
}

/// One line of the JSONL run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry<R> {
    pub index: usize,
    pub seed: u64,
    pub config_hash: String,
    #[serde(flatten)]
    pub outcome: RunOutcome<R>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopStatus {
    Converged,
    NonConverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceOutcome<R> {
    pub state: CiState,
    pub entries: Vec<LogEntry<R>>,
    pub failed: usize,
    pub resumed: usize,
    pub status: LoopStatus,
}

pub fn read_run_log<R: DeserializeOwned>(path: &Path) -> Result<Vec<LogEntry<R>>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Cuts an unterminated last line left by an interrupted write.
fn drop_torn_tail(path: &Path) -> Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.last().is_none_or(|&b| b == b'\n') {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    log::warn!("{}: discarding an incomplete final entry", path.display());
    let file = fs::OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    file.set_len(keep as u64).map_err(|e| Error::io(path, e))
}

/// Runs `run_fn(index, seed)` with `seed = derive_seed(global_seed, index)`
/// until the CI of `accuracy(result)` is narrow enough or `max_runs`
/// attempts are made. Up to `jobs` runs execute concurrently, but results
/// are committed strictly in index order, so the outcome does not depend
/// on `jobs`. Diverged runs are logged as failed and excluded from the CI.
///
/// With `log_path`, committed entries are appended to a JSONL file and an
/// existing file is replayed first.
pub fn convergence_loop<R, F, A>(
    cfg: &ConvergenceConfig,
    global_seed: u64,
    config_hash: &str,
    jobs: usize,
    log_path: Option<&Path>,
    run_fn: F,
    accuracy: A,
) -> Result<ConvergenceOutcome<R>>
where
    R: Serialize + DeserializeOwned + Send,
    F: Fn(usize, u64) -> Result<R> + Sync,
    A: Fn(&R) -> f64,
{
    cfg.validate()?;
    let mut state = CiState::new(cfg);
    let mut entries: Vec<LogEntry<R>> = Vec::new();
    let mut failed = 0;

    let commit = |e: &LogEntry<R>, state: &mut CiState, failed: &mut usize| -> Result<()> {
        match &e.outcome {
            RunOutcome::Completed { result } => {
                let a = accuracy(result);
                if !(0.0..=1.0).contains(&a) {
                    return Err(contract_err!("run {} reported accuracy {a} outside [0, 1]", e.index));
                }
                state.accuracies.push(a);
            }
            RunOutcome::Failed { .. } => *failed += 1,
        }
        Ok(())
    };
    let done = |state: &CiState, attempts: usize| state.converged() || attempts >= cfg.max_runs;

    if let Some(path) = log_path {
        drop_torn_tail(path)?;
        for (i, e) in read_run_log::<R>(path)?.into_iter().enumerate() {
            if e.index != i || e.seed != derive_seed(global_seed, i as u64) {
                return Err(Error::format(path, format!("entry {i} does not continue the seed sequence")));
            }
            if e.config_hash != config_hash {
                return Err(config_err!(
                    "run log {} was written under a different configuration",
                    path.display()
                ));
            }
            if done(&state, entries.len()) {
                break;
            }
            commit(&e, &mut state, &mut failed)?;
            entries.push(e);
        }
    }
    let resumed = entries.len();

    let mut log = match log_path {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Some((
                path,
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?,
            ))
        }
        None => None,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| config_err!("cannot start {jobs} worker threads: {e}"))?;

    while !done(&state, entries.len()) {
        let start = entries.len();
        let wave = jobs.max(1).min(cfg.max_runs - start);
        let results: Vec<(usize, u64, Result<R>)> = pool.install(|| {
            use rayon::prelude::*;
            (start..start + wave)
                .into_par_iter()
                .map(|i| {
                    let seed = derive_seed(global_seed, i as u64);
                    (i, seed, run_fn(i, seed))
                })
                .collect()
        });
        for (index, seed, r) in results {
            if done(&state, entries.len()) {
                break;
            }
            let outcome = match r {
                Ok(result) => RunOutcome::Completed { result },
                Err(Error::Divergence(msg)) => {
                    log::warn!("run {index} (seed {seed}) diverged: {msg}");
                    RunOutcome::Failed { error: msg }
                }
                Err(e) => return Err(e),
            };
            let entry = LogEntry {
                index,
                seed,
                config_hash: config_hash.to_string(),
                outcome,
            };
            commit(&entry, &mut state, &mut failed)?;
            if let Some((path, file)) = log.as_mut() {
                let path: &Path = path;
                let mut line = serde_json::to_vec(&entry).expect("serializable");
                line.push(b'\n');
                file.write_all(&line).map_err(|e| Error::io(path, e))?;
                file.flush().map_err(|e| Error::io(path, e))?;
            }
            entries.push(entry);
        }
    }

    let status = if state.converged() {
        LoopStatus::Converged
    } else {
        LoopStatus::NonConverged
    };
    Ok(ConvergenceOutcome {
        state,
        entries,
        failed,
        resumed,
        status,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwResult {
    pub w: f64,
    pub p: f64,
    pub n: usize,
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

/// Shapiro–Wilk W and p-value, Royston's approximation (Applied
/// Statistics algorithm AS R94, 1995).
pub fn shapiro_wilk(sample: &[f64]) -> Result<SwResult> {
    // Coefficients of AS R94.
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    const C3: [f64; 4] = [0.5440, -0.39978, 0.025054, -6.714e-4];
    const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
    const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
    const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
    const G: [f64; 2] = [-2.273, 0.459];

    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return Err(contract_err!("Shapiro-Wilk needs 3 <= n <= 5000, got {n}"));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(contract_err!("Shapiro-Wilk sample contains non-finite values"));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    if x[n - 1] - x[0] <= 0.0 {
        return Err(contract_err!("Shapiro-Wilk sample has zero variance"));
    }

    let std_normal = Normal::standard();
    let an = n as f64;
    let half = n / 2;
    // |a| for the extreme pairs, outermost first
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let m: Vec<f64> = (1..=half)
            .map(|i| -std_normal.inverse_cdf((i as f64 - 0.375) / (an + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) + m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = m[1] / ssumm2 + poly(&C2, rsn);
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            a[1] = a2;
            (2, fac)
        } else {
            (1, ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt())
        };
        a[0] = a1;
        for i in first..half {
            a[i] = m[i] / fac;
        }
    }

    // W as the squared correlation between the ordered sample and the
    // antisymmetric coefficient vector; 1 − W is formed directly.
    let coef = |i: usize| -> f64 {
        if i < half {
            -a[i]
        } else if n % 2 == 1 && i == half {
            0.0
        } else {
            a[n - 1 - i]
        }
    };
    let range = x[n - 1] - x[0];
    let xs: Vec<f64> = x.iter().map(|v| v / range).collect();
    let xm = xs.iter().sum::<f64>() / an;
    let cm = (0..n).map(coef).sum::<f64>() / an;
    let (mut ssa, mut ssx, mut sax) = (0.0, 0.0, 0.0);
    for (i, &xi) in xs.iter().enumerate() {
        let asa = coef(i) - cm;
        let xsx = xi - xm;
        ssa += asa * asa;
        ssx += xsx * xsx;
        sax += asa * xsx;
    }
    let ssassx = (ssa * ssx).sqrt();
    let w1 = (ssassx - sax.abs()) * (ssassx + sax.abs()) / (ssa * ssx);
    let w = 1.0 - w1;

    if n == 3 {
        const PI6: f64 = 6.0 / std::f64::consts::PI;
        const STQR: f64 = std::f64::consts::FRAC_PI_3;
        let p = (PI6 * (w.sqrt().asin() - STQR)).clamp(0.0, 1.0);
        return Ok(SwResult { w, p, n });
    }
    let mut y = w1.ln();
    let (m, s) = if n <= 11 {
        let gamma = poly(&G, an);
        if y >= gamma {
            return Ok(SwResult { w, p: 1e-99, n });
        }
        y = -(gamma - y).ln();
        (poly(&C3, an), poly(&C4, an).exp())
    } else {
        let lx = an.ln();
        (poly(&C5, lx), poly(&C6, lx).exp())
    };
    let p = Normal::new(m, s).expect("positive scale").sf(y);
    Ok(SwResult { w, p, n })
}

pub type Confusion = [[u64; 3]; 3];

/// Rows are true classes, columns predicted classes.
pub fn confusion_matrix(labels: &[usize], predictions: &[usize]) -> Result<Confusion> {
    if labels.len() != predictions.len() {
        return Err(contract_err!("{} labels but {} predictions", labels.len(), predictions.len()));
    }
    let mut c = [[0u64; 3]; 3];
    for (&t, &p) in labels.iter().zip(predictions) {
        if t > 2 || p > 2 {
            return Err(contract_err!("class index out of range"));
        }
        c[t][p] += 1;
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub f1: [f64; 3],
    pub macro_f1: f64,
    pub confusion: Confusion,
}

pub fn metric_report(confusion: &Confusion) -> Result<MetricReport> {
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(contract_err!("confusion matrix is empty"));
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let diag = |k: usize| confusion[k][k];
    let row = |k: usize| confusion[k].iter().sum::<u64>();
    let col = |k: usize| (0..3).map(|r| confusion[r][k]).sum::<u64>();
    let precision: [f64; 3] = std::array::from_fn(|k| ratio(diag(k), col(k)));
    let recall: [f64; 3] = std::array::from_fn(|k| ratio(diag(k), row(k)));
    let f1: [f64; 3] = std::array::from_fn(|k| {
        let (p, r) = (precision[k], recall[k]);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    });
    Ok(MetricReport {
        accuracy: ratio((0..3).map(diag).sum(), total),
        precision,
        recall,
        f1,
        macro_f1: f1.iter().sum::<f64>() / 3.0,
        confusion: *confusion,
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(x: &[f64], q: f64) -> f64 {
    let pos = q * (x.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    x[lo] + (x[hi] - x[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Freedman–Diaconis bins: width `2·IQR·n^(−1/3)`; one bin when the
/// width or range is zero.
pub fn histogram_fd(sample: &[f64]) -> Histogram {
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n == 0 {
        return Histogram {
            edges: vec![],
            counts: vec![],
        };
    }
    let (lo, hi) = (x[0], x[n - 1]);
    let iqr = quantile_sorted(&x, 0.75) - quantile_sorted(&x, 0.25);
    let width = 2.0 * iqr / (n as f64).cbrt();
    let bins = if width > 0.0 && hi > lo {
        (((hi - lo) / width).ceil() as usize).clamp(1, 10_000)
    } else {
        1
    };
    let step = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| lo + step * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for v in &x {
        let k = (((v - lo) / step) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Histogram { edges, counts }
}

/// `(theoretical, sample)` pairs: sorted sample against normal quantiles
/// at Blom positions `(i − 3/8)/(n + 1/4)` under the fitted mean and SD.
pub fn qq_pairs(sample: &[f64]) -> Vec<(f64, f64)> {
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n < 2 {
        return x.into_iter().map(|v| (v, v)).collect();
    }
    let (mean, sd) = mean_sd(&x);
    let z = Normal::standard();
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = (i as f64 + 1.0 - 0.375) / (n as f64 + 0.25);
            (mean + sd * z.inverse_cdf(p), v)
        })
        .collect()
}

/// Writes `accuracies.csv`, `histogram.csv` and `qq.csv` into `dir`.
pub fn plot_data(models: &[(&str, &[f64])], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let open = |name: &str| -> Result<csv::Writer<fs::File>> {
        let path = dir.join(name);
        csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))
    };
    let fail = |name: &str, e: csv::Error| Error::format(&dir.join(name), e.to_string());

    let mut acc = open("accuracies.csv")?;
    acc.write_record(["model", "run", "accuracy"]).map_err(|e| fail("accuracies.csv", e))?;
    let mut hist = open("histogram.csv")?;
    hist.write_record(["model", "bin", "lo", "hi", "count"])
        .map_err(|e| fail("histogram.csv", e))?;
    let mut qq = open("qq.csv")?;
    qq.write_record(["model", "rank", "theoretical", "sample"])
        .map_err(|e| fail("qq.csv", e))?;

    for (name, values) in models {
        for (i, v) in values.iter().enumerate() {
            acc.write_record([name.to_string(), i.to_string(), v.to_string()])
                .map_err(|e| fail("accuracies.csv", e))?;
        }
        let h = histogram_fd(values);
        for (i, c) in h.counts.iter().enumerate() {
            hist.write_record([
                name.to_string(),
                i.to_string(),
                h.edges[i].to_string(),
                h.edges[i + 1].to_string(),
                c.to_string(),
            ])
            .map_err(|e| fail("histogram.csv", e))?;
        }
        for (i, (t, s)) in qq_pairs(values).iter().enumerate() {
            qq.write_record([name.to_string(), (i + 1).to_string(), t.to_string(), s.to_string()])
                .map_err(|e| fail("qq.csv", e))?;
        }
    }
    for (w, name) in [(acc, "accuracies.csv"), (hist, "histogram.csv"), (qq, "qq.csv")] {
        w.into_inner()
            .map_err(|e| fail(name, e.into_error().into()))?
            .sync_all()
            .map_err(|e| Error::io(&dir.join(name), e))?;
    }
    Ok(())
}

/// Distribution summary for one model across completed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub ci: [f64; 2],
    pub shapiro: Option<ShapiroSummary>,
    /// Metrics of the confusion matrix pooled over runs.
    pub macro_f1: f64,
    pub per_class_f1: [f64; 3],
    pub confusion: Confusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapiroSummary {
    #[serde(rename = "W")]
    pub w: f64,
    pub p: f64,
}

pub fn summarize_model(accuracies: &[f64], confusions: &[Confusion], z: f64) -> Result<ModelSummary> {
    let ci = ci_mean(accuracies, z)?;
    let mut pooled = [[0u64; 3]; 3];
    for c in confusions {
        for r in 0..3 {
            for k in 0..3 {
                pooled[r][k] += c[r][k];
            }
        }
    }
    let report = metric_report(&pooled)?;
    let shapiro = shapiro_wilk(accuracies).ok().map(|s| ShapiroSummary { w: s.w, p: s.p });
    Ok(ModelSummary {
        n: ci.n,
        mean: ci.mean,
        sd: ci.sd,
        ci: [ci.lo, ci.hi],
        shapiro,
        macro_f1: report.macro_f1,
        per_class_f1: report.f1,
        confusion: pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use proptest::prelude::*;

    #[test]
    fn required_runs_examples() {
        assert_eq!(required_runs(0.0460, 1.96, 0.01).unwrap(), 326);
        assert_eq!(required_runs(0.0, 1.96, 0.01).unwrap(), 2);
        assert!(matches!(required_runs(0.05, 1.96, 0.0), Err(Error::Config(_))));
        let a = required_runs_unclamped(0.03, 1.96, 0.01);
        let b = required_runs_unclamped(0.06, 1.96, 0.01);
        assert!((b / a - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ci_examples() {
        let c = ci_from_moments(0.7242, 0.0460, 326, 1.96);
        assert!((c.lo - 0.7192).abs() < 1e-4 && (c.hi - 0.7292).abs() < 1e-4);

        let c = ci_mean(&[0.7; 12], 1.96).unwrap();
        assert_eq!((c.lo, c.hi, c.sd), (0.7, 0.7, 0.0));

        let c = ci_mean(&[0.5, 0.7], 1.96).unwrap();
        assert!((c.mean - 0.6).abs() < 1e-15);
        assert!((c.sd - 0.141421356).abs() < 1e-8);
        assert!((c.half_width - 0.196).abs() < 1e-6);

        assert!(matches!(ci_mean(&[0.5], 1.96), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn ci_is_permutation_invariant(mut xs in prop::collection::vec(0.0f64..1.0, 2..40), seed in any::<u64>()) {
            let a = ci_mean(&xs, 1.96).unwrap();
            CounterRng::new(seed).shuffle(&mut xs);
            let b = ci_mean(&xs, 1.96).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-12 && (a.sd - b.sd).abs() < 1e-12);
        }

        #[test]
        fn metric_accuracy_is_trace_over_total(c in prop::array::uniform3(prop::array::uniform3(0u64..50))) {
            let total: u64 = c.iter().flatten().sum();
            prop_assume!(total > 0);
            let r = metric_report(&c).unwrap();
            prop_assert_eq!(r.accuracy, (c[0][0] + c[1][1] + c[2][2]) as f64 / total as f64);
            for k in 0..3 {
                prop_assert!((0.0..=1.0).contains(&r.f1[k]));
            }
        }

        #[test]
        fn shapiro_w_is_affine_invariant(xs in prop::collection::vec(-100.0f64..100.0, 3..60), a in 0.01f64..100.0, b in -1e3f64..1e3) {
            prop_assume!(xs.iter().any(|v| (v - xs[0]).abs() > 1e-3));
            let w0 = shapiro_wilk(&xs).unwrap().w;
            let ys: Vec<f64> = xs.iter().map(|v| a * v + b).collect();
            let w1 = shapiro_wilk(&ys).unwrap().w;
            prop_assert!((w0 - w1).abs() < 1e-10, "{} vs {}", w0, w1);
            prop_assert!(w0 > 0.0 && w0 <= 1.0);
        }

        #[test]
        fn histogram_partitions_and_qq_is_sorted(xs in prop::collection::vec(0.0f64..1.0, 1..200)) {
            let h = histogram_fd(&xs);
            prop_assert_eq!(h.counts.iter().sum::<u64>(), xs.len() as u64);
            prop_assert_eq!(h.edges.len(), h.counts.len() + 1);
            let qq = qq_pairs(&xs);
            for w in qq.windows(2) {
                prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
            }
        }
    }

    #[test]
    fn metric_examples() {
        let r = metric_report(&[[5, 0, 0], [0, 7, 0], [0, 0, 2]]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.f1, [1.0; 3]);

        let r = metric_report(&[[8, 1, 1], [2, 7, 1], [0, 2, 8]]).unwrap();
        assert!((r.accuracy - 23.0 / 30.0).abs() < 1e-15);
        assert!((r.precision[0] - 0.8).abs() < 1e-15);
        assert!((r.recall[0] - 0.8).abs() < 1e-15);
        assert!((r.f1[0] - 0.8).abs() < 1e-15);

        let r = metric_report(&[[4, 1, 0], [2, 3, 0], [0, 0, 0]]).unwrap();
        assert_eq!(r.f1[2], 0.0);
        assert!(matches!(metric_report(&[[0; 3]; 3]), Err(Error::Contract(_))));
    }

    #[test]
    fn shapiro_rejects_bad_input() {
        assert!(shapiro_wilk(&[1.0, 2.0]).is_err());
        assert!(shapiro_wilk(&[3.0; 10]).is_err());
        assert!(shapiro_wilk(&vec![0.5; 5001]).is_err());
    }

    #[test]
    fn qq_of_exact_normal_quantiles_hugs_the_diagonal() {
        let z = Normal::standard();
        let n = 1000;
        let xs: Vec<f64> = (0..n)
            .map(|i| 3.0 + 0.5 * z.inverse_cdf((i as f64 + 0.625) / (n as f64 + 0.25)))
            .collect();
        let (mean, sd) = mean_sd(&xs);
        let dev = qq_pairs(&xs)
            .iter()
            .map(|(t, s)| ((t - mean) / sd - (s - mean) / sd).abs())
            .fold(0.0, f64::max);
        assert!(dev < 0.05, "{dev}");
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Acc(f64);

    #[test]
    fn constant_runs_stop_at_n_min() {
        let cfg = ConvergenceConfig::default();
        let out = convergence_loop(&cfg, 1, "h", 1, None, |_, _| Ok(Acc(0.7)), |a| a.0).unwrap();
        assert_eq!(out.state.n(), 30);
        assert_eq!(out.status, LoopStatus::Converged);
    }

    fn simulated(seed: u64) -> f64 {
        0.72 + 0.046 * CounterRng::new(seed).normal()
    }

    #[test]
    fn parallel_and_serial_loops_agree() {
        let cfg = ConvergenceConfig {
            b: 0.03,
            ..ConvergenceConfig::default()
        };
        let a = convergence_loop(&cfg, 9, "h", 1, None, |_, s| Ok(Acc(simulated(s))), |a| a.0).unwrap();
        let b = convergence_loop(&cfg, 9, "h", 4, None, |_, s| Ok(Acc(simulated(s))), |a| a.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_convergence_is_reported() {
        let cfg = ConvergenceConfig {
            b: 1e-6,
            n_min: 5,
            max_runs: 12,
            ..ConvergenceConfig::default()
        };
        let out = convergence_loop(&cfg, 2, "h", 3, None, |_, s| Ok(Acc(simulated(s))), |a| a.0).unwrap();
        assert_eq!(out.status, LoopStatus::NonConverged);
        assert_eq!(out.entries.len(), 12);
    }

    #[test]
    fn diverged_runs_are_counted_not_averaged() {
        let cfg = ConvergenceConfig {
            n_min: 10,
            max_runs: 40,
            ..ConvergenceConfig::default()
        };
        let out = convergence_loop(
            &cfg,
            3,
            "h",
            2,
            None,
            |i, _| {
                if i % 4 == 1 {
                    Err(Error::Divergence("nan".into()))
                } else {
                    Ok(Acc(0.6))
                }
            },
            |a| a.0,
        )
        .unwrap();
        assert_eq!(out.state.n(), 10);
        assert_eq!(out.failed, 3);
        assert!(out.state.accuracies.iter().all(|&a| a == 0.6));
    }

    #[test]
    fn interrupted_loop_resumes_without_repeating_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("runs.jsonl");
        let cfg = ConvergenceConfig {
            b: 0.03,
            ..ConvergenceConfig::default()
        };
        let full = convergence_loop(&cfg, 4, "h", 1, None, |_, s| Ok(Acc(simulated(s))), |a| a.0).unwrap();

        let short = ConvergenceConfig {
            max_runs: 30,
            b: 1e-9,
            ..cfg.clone()
        };
        // a first invocation that stops early, as if interrupted
        convergence_loop(&short, 4, "h", 1, Some(&log), |_, s| Ok(Acc(simulated(s))), |a| a.0).unwrap();
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let resumed = convergence_loop(
            &cfg,
            4,
            "h",
            2,
            Some(&log),
            |i, s| {
                assert!(i >= 30);
                calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                Ok(Acc(simulated(s)))
            },
            |a| a.0,
        )
        .unwrap();
        assert_eq!(resumed.resumed, 30);
        assert_eq!(resumed.state, full.state);
        assert_eq!(read_run_log::<Acc>(&log).unwrap().len(), full.entries.len());
        assert!(calls.into_inner() >= full.entries.len() - 30);

        let other = convergence_loop(&cfg, 4, "other", 1, Some(&log), |_, s| Ok(Acc(simulated(s))), |a| a.0);
        assert!(matches!(other, Err(Error::Config(_))));
    }

    #[test]
    fn torn_final_line_is_discarded_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("runs.jsonl");
        let cfg = ConvergenceConfig {
            b: 0.03,
            ..ConvergenceConfig::default()
        };
        let full = convergence_loop(&cfg, 9, "h", 1, Some(&log), |_, s| Ok(Acc(simulated(s))), |a| a.0).unwrap();
        let text = fs::read_to_string(&log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let torn = format!("{}\n{}\n{}", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
        fs::write(&log, torn).unwrap();
        let resumed = convergence_loop(&cfg, 9, "h", 1, Some(&log), |_, s| Ok(Acc(simulated(s))), |a| a.0).unwrap();
        assert_eq!(resumed.resumed, 2);
        assert_eq!(resumed.state, full.state);
        assert_eq!(fs::read_to_string(&log).unwrap(), text);
    }

    #[test]
    fn plot_files_have_documented_columns() {
        let dir = tempfile::tempdir().unwrap();
        let a: Vec<f64> = (0..40).map(|i| simulated(i)).collect();
        let b: Vec<f64> = (0..40).map(|i| simulated(100 + i)).collect();
        plot_data(&[("fusion", &a), ("visual", &b)], dir.path()).unwrap();
        let head = |f: &str| fs::read_to_string(dir.path().join(f)).unwrap().lines().next().unwrap().to_string();
        assert_eq!(head("accuracies.csv"), "model,run,accuracy");
        assert_eq!(head("histogram.csv"), "model,bin,lo,hi,count");
        assert_eq!(head("qq.csv"), "model,rank,theoretical,sample");
        let rows = fs::read_to_string(dir.path().join("accuracies.csv")).unwrap().lines().count();
        assert_eq!(rows, 81);
    }
}
