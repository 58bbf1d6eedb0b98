use serde::{Deserialize, Serialize};

use crate::bounds::{
    deterministic_shift_bound, gd_error_bound, noisygd_error_bound, perfect_nc_error, BoundQuery, BoundResult,
};
use crate::error::{invalid, Error, Result};
use crate::geometry::EtfFrame;
use crate::linalg::{axpy, norm2, norm_inf, sub, Matrix};
use crate::mitigations::{
    fit_projection, normalize_dataset, project_dataset, project_rows, projection_beta0, Projection, ProjectionMethod,
};
use crate::par::{map_indexed, Execution};
use crate::privacy::{calibrate, sensitivity_bound, NoiseCalibration, PrivacyBudget};
use crate::rng::{derive_seed, seeded_rng, stream, Rng};
use crate::stats::mean_stderr;
use crate::synth::{perturb_test_point, sample_with_counts, LabeledDataset, RowSampler, ShiftKind, ShiftModel};
use crate::trainer::{
    noisy_update, one_step_with_rng, projected_with_rng, zero_init_gradient, HeadKind, Init, LinearHead, Loss,
};

use super::scenario::{Mitigation, Scenario, SensitivityRule};

/// Rows generated per block on the streaming path.
const CHUNK_ROWS: usize = 256;

/// Run-time knobs that do not change results.
#[derive(Debug, Clone, Default)]
pub struct McOptions {
    pub execution: Execution,
    /// A pre-fitted projection (possibly with more columns than the
    /// scenario's rank; it is truncated).
    pub projection: Option<Projection>,
    /// Force the materialized training path.
    pub materialize: bool,
}

/// Privacy and sensitivity ranges seen across trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub sensitivity_min: f64,
    pub sensitivity_max: f64,
    pub sigma_sq_min: f64,
    pub sigma_sq_max: f64,
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_beta0: Option<f64>,
}

/// Aggregated Monte Carlo outcome of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub accuracy_mean: f64,
    pub accuracy_stderr: f64,
    pub error_mean: f64,
    pub error_stderr: f64,
    pub trials: usize,
    pub trial_seeds: Vec<u64>,
    pub scenario: Scenario,
    /// The analytic bound for this setting, when one applies.
    pub bound: Option<BoundResult>,
    pub run: RunSummary,
}

/// Per-class feature sums in the transformed space.
#[derive(Debug, Clone)]
struct Summary {
    sums: Matrix,
    /// Largest row norm before clipping.
    max_norm: f64,
}

#[derive(Debug, Clone)]
enum Train {
    Summary(Summary),
    Data { data: LabeledDataset, sensitivity: f64, mean: Option<Vec<f64>> },
}

struct Prepared<'a> {
    scenario: &'a Scenario,
    frame: EtfFrame,
    counts: Vec<usize>,
    train_shift: ShiftModel,
    test_shift: ShiftModel,
    budget: Option<PrivacyBudget>,
    projection: Option<Projection>,
    streaming: bool,
    cached: Option<Train>,
}

struct Outcome {
    error: f64,
    sensitivity: f64,
    sigma_sq: f64,
}

/// Misclassification rate of `scenario`, estimated over its trials.
pub fn mc_error(scenario: &Scenario) -> Result<TrialResult> {
    mc_error_with(scenario, &McOptions::default())
}

/// [`mc_error`] with explicit run-time options.
pub fn mc_error_with(scenario: &Scenario, opts: &McOptions) -> Result<TrialResult> {
    let prep = prepare(scenario, opts)?;
    let seeds: Vec<u64> = (0..scenario.trials).map(|i| derive_seed(scenario.seed, stream::TRIAL, i as u64)).collect();
    let outcomes = map_indexed(scenario.trials, opts.execution, |i| run_trial(&prep, seeds[i]));
    let outcomes: Vec<Outcome> = outcomes.into_iter().collect::<Result<_>>()?;

    let errors: Vec<f64> = outcomes.iter().map(|o| o.error).collect();
    let accuracies: Vec<f64> = errors.iter().map(|e| 1.0 - e).collect();
    let (error_mean, error_stderr) = mean_stderr(&errors);
    let (accuracy_mean, accuracy_stderr) = mean_stderr(&accuracies);
    let fold = |f: fn(&Outcome) -> f64, init: f64, op: fn(f64, f64) -> f64| outcomes.iter().map(f).fold(init, op);
    let run = RunSummary {
        sensitivity_min: fold(|o| o.sensitivity, f64::INFINITY, f64::min),
        sensitivity_max: fold(|o| o.sensitivity, f64::NEG_INFINITY, f64::max),
        sigma_sq_min: fold(|o| o.sigma_sq, f64::INFINITY, f64::min),
        sigma_sq_max: fold(|o| o.sigma_sq, f64::NEG_INFINITY, f64::max),
        rho: prep.budget.map(|b| b.rho),
        projection_beta0: prep
            .projection
            .as_ref()
            .filter(|p| p.r() <= prep.frame.k())
            .and_then(|p| projection_beta0(p, &prep.frame).ok()),
    };
    let bound = matching_bound(&prep, &run);
    Ok(TrialResult {
        accuracy_mean,
        accuracy_stderr,
        error_mean,
        error_stderr,
        trials: scenario.trials,
        trial_seeds: seeds,
        scenario: scenario.clone(),
        bound,
        run,
    })
}

/// Fit the scenario's projection on a public sample drawn under the train
/// shift.
pub fn fit_scenario_projection(scenario: &Scenario, r: usize, method: ProjectionMethod) -> Result<Projection> {
    let frame = scenario.frame.build(scenario.seed)?;
    let (train_shift, _) = scenario.resolve_shifts(&frame)?;
    let mut public_scenario = scenario.clone();
    public_scenario.n = scenario.public_size.unwrap_or(scenario.n);
    let counts = public_scenario.counts()?;
    let mut rng = seeded_rng(derive_seed(scenario.seed, stream::PUBLIC, frame.p() as u64));
    let public = sample_with_counts(&frame, &counts, &train_shift, &mut rng)?;
    fit_projection(&public, method, r)
}

fn prepare<'a>(scenario: &'a Scenario, opts: &McOptions) -> Result<Prepared<'a>> {
    scenario.validate()?;
    let frame = scenario.frame.build(scenario.seed)?;
    let counts = scenario.counts()?;
    let (train_shift, test_shift) = scenario.resolve_shifts(&frame)?;
    let budget = scenario.privacy.budget()?;
    if scenario.train.head == HeadKind::Binary && frame.k() != 2 {
        return Err(invalid("head", "binary head needs K = 2"));
    }

    let projection = match scenario.mitigation {
        Mitigation::Pca { r } | Mitigation::ClassMean { r } => {
            let method =
                if matches!(scenario.mitigation, Mitigation::Pca { .. }) { ProjectionMethod::Pca } else { ProjectionMethod::ClassMean };
            let proj = match &opts.projection {
                Some(p) if p.p() != frame.p() => return Err(Error::DimensionMismatch { expected: frame.p(), found: p.p() }),
                Some(p) if p.r() == r => p.clone(),
                Some(p) => p.truncate(r)?,
                None => fit_scenario_projection(scenario, r, method)?,
            };
            Some(proj)
        }
        _ => None,
    };

    let cfg = &scenario.train;
    let streaming = !opts.materialize
        && cfg.iterations <= 1
        && cfg.projection_radius.is_none()
        && cfg.init == Init::Zero
        && scenario.mitigation != Mitigation::Normalize;

    let mut prep = Prepared {
        scenario,
        frame,
        counts,
        train_shift,
        test_shift,
        budget,
        projection,
        streaming,
        cached: None,
    };
    if prep.train_shift.is_deterministic() {
        // No randomness in the training rows: build them once.
        let mut unused = seeded_rng(0);
        prep.cached = Some(build_train(&prep, &mut unused)?);
    }
    Ok(prep)
}

fn clip_scale(norm: f64, rule: SensitivityRule) -> f64 {
    match rule {
        SensitivityRule::Clip { value } if norm > value => value / norm,
        _ => 1.0,
    }
}

fn build_train(prep: &Prepared<'_>, rng: &mut Rng) -> Result<Train> {
    if prep.streaming {
        return stream_summary(prep, rng).map(Train::Summary);
    }
    let data = sample_with_counts(&prep.frame, &prep.counts, &prep.train_shift, rng)?;
    let rule = prep.scenario.sensitivity;
    let (mut data, natural, mean) = match prep.scenario.mitigation {
        Mitigation::None => {
            let bound = sensitivity_bound(&prep.train_shift, prep.frame.p(), false).unwrap_or(0.0);
            let s = bound.max(data.max_row_norm());
            (data, s, None)
        }
        Mitigation::Pca { .. } | Mitigation::ClassMean { .. } => {
            let projected = project_dataset(&data, prep.projection.as_ref().expect("projection fitted"))?;
            (projected.data, projected.sensitivity, None)
        }
        Mitigation::Normalize => {
            let nd = normalize_dataset(&data)?;
            (nd.data, nd.sensitivity, Some(nd.mean))
        }
    };
    let sensitivity = match rule {
        SensitivityRule::Auto => natural,
        SensitivityRule::Fixed { value } => value,
        SensitivityRule::Clip { value } => {
            for i in 0..data.n() {
                let c = clip_scale(norm2(data.features.row(i)), rule);
                if c < 1.0 {
                    data.features.row_mut(i).iter_mut().for_each(|v| *v *= c);
                }
            }
            value
        }
    };
    Ok(Train::Data { data, sensitivity, mean })
}

/// Class sums of the (projected, clipped) training rows, generated in
/// blocks without holding the dataset.
fn stream_summary(prep: &Prepared<'_>, rng: &mut Rng) -> Result<Summary> {
    let sampler = RowSampler::new(&prep.frame, &prep.train_shift)?;
    let p = prep.frame.p();
    let d = prep.projection.as_ref().map_or(p, |q| q.r());
    let rule = prep.scenario.sensitivity;
    let mut sums = Matrix::zeros(prep.frame.k(), d);
    let mut max_norm = 0.0f64;
    let mut block = Matrix::zeros(CHUNK_ROWS, p);
    for (y, &count) in prep.counts.iter().enumerate() {
        let mut done = 0;
        while done < count {
            let rows = (count - done).min(CHUNK_ROWS);
            if rows != block.rows() {
                block = Matrix::zeros(rows, p);
            }
            for i in 0..rows {
                sampler.fill(y, rng, block.row_mut(i));
            }
            let projected = prep.projection.as_ref().map(|q| project_rows(q, &block));
            let mapped = projected.as_ref().unwrap_or(&block);
            for i in 0..rows {
                let row = mapped.row(i);
                let norm = norm2(row);
                max_norm = max_norm.max(norm);
                axpy(clip_scale(norm, rule), row, sums.row_mut(y));
            }
            done += rows;
        }
    }
    Ok(Summary { sums, max_norm })
}

fn summary_sensitivity(prep: &Prepared<'_>, s: &Summary) -> Result<f64> {
    match prep.scenario.sensitivity {
        SensitivityRule::Auto => Ok(if prep.projection.is_some() {
            s.max_norm
        } else {
            sensitivity_bound(&prep.train_shift, prep.frame.p(), false).unwrap_or(0.0).max(s.max_norm)
        }),
        SensitivityRule::Fixed { value } => {
            if s.max_norm > value * (1.0 + 1e-9) {
                return Err(Error::SensitivityViolation { row: 0, norm: s.max_norm, bound: value });
            }
            Ok(value)
        }
        SensitivityRule::Clip { value } => Ok(value),
    }
}

fn calibration(prep: &Prepared<'_>, sensitivity: f64) -> Result<NoiseCalibration> {
    match prep.budget {
        None => Ok(NoiseCalibration::noiseless()),
        Some(b) => {
            let steps = prep.scenario.train.iterations.max(1);
            let per_step = PrivacyBudget::new(b.rho / f64::from(steps))?;
            calibrate(sensitivity, per_step)
        }
    }
}

fn run_trial(prep: &Prepared<'_>, seed: u64) -> Result<Outcome> {
    let mut rng = seeded_rng(seed);
    let owned;
    let train = match &prep.cached {
        Some(t) => t,
        None => {
            owned = build_train(prep, &mut rng)?;
            &owned
        }
    };
    let cfg = &prep.scenario.train;
    let (head, sensitivity, sigma_sq, mean) = match train {
        Train::Summary(s) => {
            let sensitivity = summary_sensitivity(prep, s)?;
            let calib = calibration(prep, sensitivity)?;
            let eta = cfg.eta.unwrap_or(1.0);
            if !(eta.is_finite() && eta > 0.0) {
                return Err(invalid("eta", format!("must be positive, got {eta}")));
            }
            let mut head = LinearHead::zeros(prep.frame.k(), s.sums.cols(), cfg.head)?;
            let grad = zero_init_gradient(&s.sums, cfg.loss, cfg.head)?;
            noisy_update(head.weights_mut(), &grad, eta, &calib, &mut rng);
            (head, sensitivity, calib.sigma_sq, None)
        }
        Train::Data { data, sensitivity, mean } => {
            let calib = calibration(prep, *sensitivity)?;
            let trained = if cfg.iterations > 1 || cfg.projection_radius.is_some() {
                projected_with_rng(data, cfg, &calib, &mut rng)?
            } else {
                one_step_with_rng(data, cfg, &calib, &mut rng)?
            };
            (trained.head, *sensitivity, calib.sigma_sq, mean.clone())
        }
    };
    let wrong = evaluate(prep, &head, mean.as_deref(), &mut rng)?;
    Ok(Outcome { error: wrong as f64 / prep.frame.k() as f64, sensitivity, sigma_sq })
}

/// Number of misclassified test points, one per class.
fn evaluate(prep: &Prepared<'_>, head: &LinearHead, mean: Option<&[f64]>, rng: &mut Rng) -> Result<usize> {
    let input_head = match (&prep.projection, prep.test_shift.kind) {
        (Some(q), ShiftKind::AdversarialTest) => Some(head.compose_basis(&q.basis)?),
        _ => None,
    };
    let attack_head = input_head.as_ref().unwrap_or(head);
    let mut wrong = 0;
    for y in 0..prep.frame.k() {
        let proto = prep.frame.prototype_ref(y);
        let x = match mean {
            Some(m) => sub(proto, m),
            None => proto.to_vec(),
        };
        let x = perturb_test_point(&x, y, &prep.test_shift, Some(attack_head), rng)?;
        let z = match &prep.projection {
            Some(q) => q.apply(&x),
            None => x,
        };
        if head.predict(&z) != y {
            wrong += 1;
        }
    }
    Ok(wrong)
}

/// The analytic bound that covers this scenario, if any.
///
/// The perfect-collapse formula applies to balanced, unshifted one-step
/// cross-entropy runs. The binary shift theorems describe
/// `θ = Σ y_i x_i + noise`, which is the squared-loss step from zero with a
/// binary head.
fn matching_bound(prep: &Prepared<'_>, run: &RunSummary) -> Option<BoundResult> {
    let s = prep.scenario;
    let cfg = &s.train;
    let one_step = cfg.iterations <= 1 && cfg.projection_radius.is_none() && cfg.init == Init::Zero;
    let plain = one_step
        && s.mitigation == Mitigation::None
        && s.sensitivity == SensitivityRule::Auto
        && cfg.eta.is_none_or(|e| e == 1.0);
    if !plain {
        return None;
    }
    let balanced = prep.counts.iter().all(|&c| c == prep.counts[0]);
    let k = prep.frame.k();
    let unshifted = s.train_shift.kind == ShiftKind::None && s.test_shift.kind == ShiftKind::None;
    if unshifted && balanced && cfg.loss == Loss::CrossEntropy {
        let sigma = run.sigma_sq_max.sqrt();
        if sigma > 0.0 {
            return perfect_nc_error(s.n, k, None, sigma).ok();
        }
        return gd_error_bound(&BoundQuery { n: s.n, p: prep.frame.p(), k, ..BoundQuery::default() }).ok();
    }
    if k != 2 || cfg.head != HeadKind::Binary || cfg.loss != Loss::Squared || !balanced {
        return None;
    }
    if s.test_shift.kind != s.train_shift.kind && s.test_shift.kind != ShiftKind::None {
        return None;
    }
    let q = BoundQuery {
        n: s.n,
        p: prep.frame.p(),
        k,
        beta: s.train_shift.beta,
        rho: prep.budget.map(|b| b.rho),
        independent_coordinates: s.train_shift.independent_coordinates,
        ..BoundQuery::default()
    };
    match (s.train_shift.kind, prep.budget) {
        (ShiftKind::Stochastic, None) | (ShiftKind::None, None) => gd_error_bound(&q).ok(),
        (ShiftKind::Stochastic, Some(_)) => noisygd_error_bound(&q).ok(),
        (ShiftKind::Offset, Some(_)) | (ShiftKind::None, Some(_)) => {
            let v = prep.train_shift.offset_vector.as_deref().map_or(0.0, norm_inf);
            deterministic_shift_bound(&BoundQuery { beta: v.max(q.beta), ..q }).ok()
        }
        _ => None,
    }
}
