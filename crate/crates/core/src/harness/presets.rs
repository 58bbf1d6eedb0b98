use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bounds::{
    deterministic_shift_bound, gd_error_bound, noisygd_error_bound, perfect_nc_error, table1_sample_complexity,
    BoundQuery, Table1Setting,
};
use crate::error::{Error, Result};
use crate::mitigations::ProjectionMethod;
use crate::par::Execution;
use crate::synth::ShiftModel;
use crate::trainer::{HeadKind, Loss, TrainConfig};

use super::mc::{fit_scenario_projection, mc_error_with, McOptions, TrialResult};
use super::scenario::{Mitigation, PrivacySpec, Scenario};

/// Named experiment suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Fig4a,
    Fig5,
    Table1Grid,
    BoundDominance,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Fig4a, Preset::Fig5, Preset::Table1Grid, Preset::BoundDominance];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig4a => "fig4a",
            Preset::Fig5 => "fig5",
            Preset::Table1Grid => "table1-grid",
            Preset::BoundDominance => "bound-dominance",
        }
    }

    fn default_trials(self) -> usize {
        match self {
            Preset::BoundDominance => 100_000,
            _ => 200,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Unknown { kind: "preset", name: s.to_string() })
    }
}

/// Distribution of the test-time perturbation in the `perturbed-test` curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestNoise {
    /// Uniform on `[-0.1, 0.1]` per coordinate.
    #[default]
    Uniform,
    /// Gaussian with variance 0.1.
    Gaussian,
    /// Worst case within `‖ν‖∞ ≤ 0.1` against the trained head.
    Adversarial,
}

impl FromStr for TestNoise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TestNoise::Uniform),
            "gaussian" => Ok(TestNoise::Gaussian),
            "adversarial" => Ok(TestNoise::Adversarial),
            other => Err(Error::Unknown { kind: "test noise", name: other.to_string() }),
        }
    }
}

/// Parameter grid of the dominance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceGrid {
    pub n: Vec<usize>,
    pub beta: Vec<f64>,
    pub p: Vec<usize>,
    pub rho: Vec<f64>,
    /// Class counts for the perfect-collapse rows.
    #[serde(rename = "K")]
    pub k: Vec<usize>,
}

impl Default for DominanceGrid {
    fn default() -> Self {
        Self { n: vec![8, 32, 128], beta: vec![0.0, 0.05, 0.1], p: vec![16, 256], rho: vec![0.25, 1.0], k: vec![2, 4] }
    }
}

/// Overrides for a preset run.
#[derive(Debug, Clone, Default)]
pub struct PresetOptions {
    pub seed: u64,
    pub trials: Option<usize>,
    /// Feature dimensions swept by the figure presets.
    pub dims: Option<Vec<usize>>,
    /// Projection ranks for `fig5`.
    pub ranks: Option<Vec<usize>>,
    pub test_noise: TestNoise,
    pub grid: Option<DominanceGrid>,
    pub out_dir: Option<PathBuf>,
    pub execution: Execution,
}

/// One point of a figure curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub curve: String,
    pub p: usize,
    pub accuracy: f64,
    pub stderr: f64,
    pub trials: usize,
    pub error: f64,
    pub error_stderr: f64,
}

/// One cell of the sample-complexity grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub setting: String,
    pub private: bool,
    pub gamma: f64,
    pub rho: Option<f64>,
    pub p: usize,
    pub beta_tilde: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub sample_complexity: u64,
}

/// One cell of the dominance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceRow {
    pub theorem: String,
    pub n: usize,
    pub beta: f64,
    pub p: usize,
    pub rho: Option<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    pub mc_error: f64,
    pub stderr: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Everything a preset produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetReport {
    pub preset: Preset,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curves: Vec<CurvePoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub table1: Vec<Table1Row>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dominance: Vec<DominanceRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<PathBuf>,
}

impl PresetReport {
    fn new(preset: Preset, seed: u64) -> Self {
        Self { preset, seed, curves: vec![], table1: vec![], dominance: vec![], notes: vec![], files: vec![] }
    }

    /// The point of `curve` at dimension `p`.
    pub fn point(&self, curve: &str, p: usize) -> Option<&CurvePoint> {
        self.curves.iter().find(|c| c.curve == curve && c.p == p)
    }
}

const FIG_DIMS: [usize; 5] = [16, 64, 256, 1024, 4096];
const FIG_K: usize = 10;
const FIG_N: usize = 10_000;

fn fig_privacy() -> PrivacySpec {
    PrivacySpec::dp(1.0, 1e-4)
}

/// Run a preset and write its files when `out_dir` is set.
pub fn run_preset(preset: Preset, opts: &PresetOptions) -> Result<PresetReport> {
    let trials = opts.trials.unwrap_or(preset.default_trials());
    let mut report = match preset {
        Preset::Fig4a => fig4a(opts, trials)?,
        Preset::Fig5 => fig5(opts, trials)?,
        Preset::Table1Grid => table1_grid(opts.seed),
        Preset::BoundDominance => bound_dominance(opts, trials)?,
    };
    if let Some(dir) = &opts.out_dir {
        report.files = write_report(&report, dir)?;
    }
    Ok(report)
}

fn point(curve: &str, p: usize, r: &TrialResult) -> CurvePoint {
    CurvePoint {
        curve: curve.to_string(),
        p,
        accuracy: r.accuracy_mean,
        stderr: r.accuracy_stderr,
        trials: r.trials,
        error: r.error_mean,
        error_stderr: r.error_stderr,
    }
}

/// Curves of the synthetic-collapse sweep, in output order.
pub const FIG4A_CURVES: [&str; 4] = ["default", "imbalance", "imbalance+offset", "perturbed-test"];

/// The scenario behind one `fig4a` curve at dimension `p`.
pub fn fig4a_scenario(curve: &str, p: usize, trials: usize, seed: u64, noise: TestNoise) -> Result<Scenario> {
    let mut s = Scenario::perfect(p, FIG_K, FIG_N, fig_privacy(), trials, seed);
    match curve {
        "default" => {}
        "imbalance" => s.alpha = Some(0.3),
        "imbalance+offset" => {
            s.alpha = Some(0.3);
            let offset = ShiftModel { offset_vector: None, ..ShiftModel::offset(vec![], 0.1) };
            s.train_shift = offset.clone();
            s.test_shift = offset;
        }
        "perturbed-test" => {
            s.test_shift = match noise {
                TestNoise::Uniform => ShiftModel::stochastic(0.1),
                TestNoise::Gaussian => ShiftModel::gaussian(0.1),
                TestNoise::Adversarial => ShiftModel::adversarial(0.1),
            };
        }
        other => return Err(Error::Unknown { kind: "curve", name: other.to_string() }),
    }
    Ok(s)
}

fn fig4a(opts: &PresetOptions, trials: usize) -> Result<PresetReport> {
    let mut report = PresetReport::new(Preset::Fig4a, opts.seed);
    let dims = opts.dims.clone().unwrap_or_else(|| FIG_DIMS.to_vec());
    let mc = McOptions { execution: opts.execution, ..McOptions::default() };
    for curve in FIG4A_CURVES {
        for &p in &dims {
            let s = fig4a_scenario(curve, p, trials, opts.seed, opts.test_noise)?;
            let r = mc_error_with(&s, &mc)?;
            log::info!("fig4a {curve} p={p}: accuracy {:.4} ± {:.4}", r.accuracy_mean, r.accuracy_stderr);
            report.curves.push(point(curve, p, &r));
        }
    }
    report.notes.push(format!("perturbed-test noise: {:?}", opts.test_noise).to_lowercase());
    Ok(report)
}

/// The scenario behind one `fig5` curve (`None` is the unmitigated baseline).
pub fn fig5_scenario(rank: Option<usize>, p: usize, trials: usize, seed: u64) -> Scenario {
    let mut s = Scenario::perfect(p, FIG_K, FIG_N, fig_privacy(), trials, seed);
    s.train_shift = ShiftModel::stochastic(0.2);
    s.test_shift = ShiftModel::stochastic(0.2);
    if let Some(r) = rank {
        s.mitigation = Mitigation::Pca { r };
    }
    s
}

fn fig5(opts: &PresetOptions, trials: usize) -> Result<PresetReport> {
    let mut report = PresetReport::new(Preset::Fig5, opts.seed);
    let dims = opts.dims.clone().unwrap_or_else(|| FIG_DIMS.to_vec());
    let ranks = opts.ranks.clone().unwrap_or_else(|| vec![9, 10, 50, 100]);
    for &p in &dims {
        let base = fig5_scenario(None, p, trials, opts.seed);
        let r = mc_error_with(&base, &McOptions { execution: opts.execution, ..McOptions::default() })?;
        log::info!("fig5 baseline p={p}: accuracy {:.4} ± {:.4}", r.accuracy_mean, r.accuracy_stderr);
        report.curves.push(point("baseline", p, &r));

        let feasible: Vec<usize> = ranks.iter().copied().filter(|&r| r <= p).collect();
        for &r in ranks.iter().filter(|&&r| r > p) {
            report.notes.push(format!("pca-{r} skipped at p={p}: rank exceeds dimension"));
        }
        let Some(&r_max) = feasible.iter().max() else { continue };
        // One fit at the largest rank; smaller ranks keep its leading columns.
        let proj = fit_scenario_projection(&fig5_scenario(Some(r_max), p, trials, opts.seed), r_max, ProjectionMethod::Pca)?;
        for &rank in &feasible {
            let s = fig5_scenario(Some(rank), p, trials, opts.seed);
            let mc = McOptions { execution: opts.execution, projection: Some(proj.clone()), materialize: false };
            let res = mc_error_with(&s, &mc)?;
            log::info!("fig5 pca-{rank} p={p}: accuracy {:.4} ± {:.4}", res.accuracy_mean, res.accuracy_stderr);
            report.curves.push(point(&format!("pca-{rank}"), p, &res));
        }
    }
    Ok(report)
}

fn table1_grid(seed: u64) -> PresetReport {
    let mut report = PresetReport::new(Preset::Table1Grid, seed);
    let k = FIG_K;
    let (beta_tilde, alpha) = (0.1, 0.3);
    for setting in Table1Setting::ALL {
        for private in [true, false] {
            if !private && !setting.has_nonprivate() {
                continue;
            }
            for gamma in [0.1, 0.01, 0.001] {
                let rhos: Vec<Option<f64>> = if private { vec![Some(0.25), Some(1.0)] } else { vec![None] };
                for rho in rhos {
                    for p in [16, 256, 4096] {
                        for beta in [0.05, 0.1] {
                            let q = BoundQuery {
                                n: 1,
                                p,
                                k,
                                beta,
                                beta_tilde,
                                rho,
                                gamma: Some(gamma),
                                alpha: Some(alpha),
                                ..BoundQuery::default()
                            };
                            let r = table1_sample_complexity(setting, private, &q).expect("grid parameters are valid");
                            report.table1.push(Table1Row {
                                setting: setting.name().to_string(),
                                private,
                                gamma,
                                rho,
                                p,
                                beta_tilde,
                                alpha,
                                beta,
                                k,
                                sample_complexity: r.sample_complexity.unwrap_or(0),
                            });
                        }
                    }
                }
            }
        }
    }
    report.notes.push("sample complexities use unit constants and natural logarithms".into());
    report
}

fn binary_squared(n: usize, p: usize, privacy: PrivacySpec, trials: usize, seed: u64) -> Scenario {
    let mut s = Scenario::perfect(p, 2, n, privacy, trials, seed);
    s.frame.canonical = true;
    s.train = TrainConfig { head: HeadKind::Binary, loss: Loss::Squared, ..TrainConfig::default() };
    s
}

/// Scenario behind one dominance cell. `theorem` is `gd`, `noisygd`,
/// `deterministic` or `perfect-collapse`.
pub fn dominance_scenario(
    theorem: &str,
    n: usize,
    beta: f64,
    p: usize,
    rho: Option<f64>,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<Scenario> {
    let privacy = rho.map_or_else(PrivacySpec::nonprivate, PrivacySpec::zcdp);
    let s = match theorem {
        "gd" | "noisygd" => {
            let mut s = binary_squared(n, p, privacy, trials, seed);
            if beta > 0.0 {
                s.train_shift = ShiftModel::stochastic(beta);
                s.test_shift = ShiftModel::stochastic(beta);
            }
            s
        }
        "deterministic" => {
            let mut s = binary_squared(n, p, privacy, trials, seed);
            let offset = ShiftModel { offset_vector: None, ..ShiftModel::offset(vec![], beta) }.orthogonal();
            s.train_shift = offset.clone();
            s.test_shift = offset;
            s
        }
        "perfect-collapse" => {
            let mut s = Scenario::perfect(p, k, n, privacy, trials, seed);
            s.frame.canonical = true;
            if k == 2 {
                s.train.head = HeadKind::Binary;
            }
            s
        }
        other => return Err(Error::Unknown { kind: "theorem", name: other.to_string() }),
    };
    Ok(s)
}

fn cell_seed(seed: u64, index: usize) -> u64 {
    crate::rng::derive_seed(seed, crate::rng::stream::CELL, index as u64)
}

fn bound_dominance(opts: &PresetOptions, trials: usize) -> Result<PresetReport> {
    let mut report = PresetReport::new(Preset::BoundDominance, opts.seed);
    let grid = opts.grid.clone().unwrap_or_default();
    let mc = McOptions { execution: opts.execution, ..McOptions::default() };
    let mut cell = 0usize;
    let push = |report: &mut PresetReport, theorem: &str, s: &Scenario, r: &TrialResult, bound: f64, k: usize, beta: f64| {
        report.dominance.push(DominanceRow {
            theorem: theorem.to_string(),
            n: s.n,
            beta,
            p: s.frame.p,
            rho: s.privacy.rho,
            k,
            mc_error: r.error_mean,
            stderr: r.error_stderr,
            bound,
            pass: r.error_mean <= bound + 3.0 * r.error_stderr,
        });
    };

    for &n in &grid.n {
        for &p in &grid.p {
            for &beta in &grid.beta {
                cell += 1;
                let s = dominance_scenario("gd", n, beta, p, None, 2, trials, cell_seed(opts.seed, cell))?;
                let r = mc_error_with(&s, &mc)?;
                let q = BoundQuery { n, p, k: 2, beta, independent_coordinates: true, ..BoundQuery::default() };
                push(&mut report, "gd", &s, &r, gd_error_bound(&q)?.error_bound, 2, beta);

                for &rho in &grid.rho {
                    let q = BoundQuery { rho: Some(rho), ..q.clone() };
                    cell += 1;
                    let s = dominance_scenario("noisygd", n, beta, p, Some(rho), 2, trials, cell_seed(opts.seed, cell))?;
                    let r = mc_error_with(&s, &mc)?;
                    push(&mut report, "noisygd", &s, &r, noisygd_error_bound(&q)?.error_bound, 2, beta);

                    cell += 1;
                    let s = dominance_scenario("deterministic", n, beta, p, Some(rho), 2, trials, cell_seed(opts.seed, cell))?;
                    let r = mc_error_with(&s, &mc)?;
                    let b = deterministic_shift_bound(&BoundQuery { independent_coordinates: false, ..q })?;
                    push(&mut report, "deterministic", &s, &r, b.error_bound, 2, beta);
                }
            }
            for &rho in &grid.rho {
                for &k in grid.k.iter().filter(|&&k| k <= n) {
                    cell += 1;
                    let s = dominance_scenario("perfect-collapse", n, 0.0, p, Some(rho), k, trials, cell_seed(opts.seed, cell))?;
                    let r = mc_error_with(&s, &mc)?;
                    let sigma = r.run.sigma_sq_max.sqrt();
                    let b = perfect_nc_error(n, k, None, sigma)?;
                    push(&mut report, "perfect-collapse", &s, &r, b.error_bound, k, 0.0);
                    push(&mut report, "perfect-collapse-sqrt2", &s, &r, b.companions["sqrt2_spread"], k, 0.0);
                }
            }
        }
    }
    report.notes.push(
        "gd and noisygd use uniform independent coordinates on train and test points; \
         deterministic uses a common sign offset orthogonal to the prototypes"
            .into(),
    );
    Ok(report)
}

fn write_report(report: &PresetReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let name = report.preset.name();
    let csv_path = dir.join(format!("{name}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    match report.preset {
        Preset::Fig4a | Preset::Fig5 => {
            w.write_record(["curve", "p", "accuracy", "stderr", "trials"])?;
            for c in &report.curves {
                w.write_record([
                    c.curve.clone(),
                    c.p.to_string(),
                    format!("{:?}", c.accuracy),
                    format!("{:?}", c.stderr),
                    c.trials.to_string(),
                ])?;
            }
        }
        Preset::Table1Grid => {
            w.write_record(["setting", "private", "gamma", "rho", "p", "beta_tilde", "alpha", "beta", "K", "sample_complexity"])?;
            for r in &report.table1 {
                w.write_record([
                    r.setting.clone(),
                    r.private.to_string(),
                    r.gamma.to_string(),
                    r.rho.map(|v| v.to_string()).unwrap_or_default(),
                    r.p.to_string(),
                    r.beta_tilde.to_string(),
                    r.alpha.to_string(),
                    r.beta.to_string(),
                    r.k.to_string(),
                    r.sample_complexity.to_string(),
                ])?;
            }
        }
        Preset::BoundDominance => {
            w.write_record(["theorem", "n", "beta", "p", "rho", "K", "mc_error", "stderr", "bound", "pass"])?;
            for r in &report.dominance {
                w.write_record([
                    r.theorem.clone(),
                    r.n.to_string(),
                    r.beta.to_string(),
                    r.p.to_string(),
                    r.rho.map(|v| v.to_string()).unwrap_or_default(),
                    r.k.to_string(),
                    format!("{:?}", r.mc_error),
                    format!("{:?}", r.stderr),
                    format!("{:?}", r.bound),
                    r.pass.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    let json_path = dir.join(format!("{name}.json"));
    fs::write(&json_path, serde_json::to_string(report)?)?;
    Ok(vec![csv_path, json_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_preset() {
        assert!("fig9".parse::<Preset>().is_err());
        assert_eq!("table1-grid".parse::<Preset>().unwrap(), Preset::Table1Grid);
    }

    #[test]
    fn table1_grid_contains_perfect_cell() {
        let r = run_preset(Preset::Table1Grid, &PresetOptions::default()).unwrap();
        let cell = r
            .table1
            .iter()
            .find(|c| c.setting == "perfect-NC" && c.private && c.gamma == 0.01 && c.rho == Some(1.0))
            .unwrap();
        assert_eq!(cell.sample_complexity, 5);
    }

    #[test]
    fn fig4a_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let opts = PresetOptions {
            seed: 7,
            trials: Some(2),
            dims: Some(vec![16]),
            out_dir: Some(dir.path().to_path_buf()),
            ..PresetOptions::default()
        };
        run_preset(Preset::Fig4a, &opts).unwrap();
        let text = fs::read_to_string(dir.path().join("fig4a.csv")).unwrap();
        assert!(text.starts_with("curve,p,accuracy,stderr,trials\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
