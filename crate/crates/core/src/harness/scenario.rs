use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{make_etf, EtfFrame};
use crate::linalg::{axpy, dot};
use crate::privacy::PrivacyBudget;
use crate::rng::{derive_seed, seeded_rng, stream};
use crate::synth::{class_counts, ShiftKind, ShiftModel};
use crate::trainer::TrainConfig;

/// Which frame the scenario draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub p: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default)]
    pub canonical: bool,
    /// Seed for a non-canonical frame; defaults to one derived from the
    /// scenario seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl FrameSpec {
    pub fn build(&self, scenario_seed: u64) -> Result<EtfFrame> {
        let seed = self.seed.unwrap_or_else(|| derive_seed(scenario_seed, stream::FRAME, self.p as u64));
        make_etf(self.p, self.k, Some(seed), self.canonical)
    }
}

/// Privacy parameterization. Exactly one of `rho`, `(epsilon, delta)` or
/// `nonprivate` must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrivacySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default)]
    pub nonprivate: bool,
}

impl PrivacySpec {
    pub fn zcdp(rho: f64) -> Self {
        Self { rho: Some(rho), ..Self::default() }
    }

    pub fn dp(epsilon: f64, delta: f64) -> Self {
        Self { epsilon: Some(epsilon), delta: Some(delta), ..Self::default() }
    }

    pub fn nonprivate() -> Self {
        Self { nonprivate: true, ..Self::default() }
    }

    /// Total budget, `None` for the non-private baseline.
    pub fn budget(&self) -> Result<Option<PrivacyBudget>> {
        let dp = self.epsilon.is_some() || self.delta.is_some();
        let given = usize::from(self.rho.is_some()) + usize::from(dp) + usize::from(self.nonprivate);
        if given != 1 {
            return Err(invalid("privacy", "give exactly one of rho, (epsilon, delta) or nonprivate"));
        }
        if self.nonprivate {
            return Ok(None);
        }
        if let Some(rho) = self.rho {
            return Ok(Some(PrivacyBudget::new(rho)?));
        }
        match (self.epsilon, self.delta) {
            (Some(e), Some(d)) => Ok(Some(PrivacyBudget::from_dp(e, d)?)),
            _ => Err(invalid("privacy", "epsilon and delta must be given together")),
        }
    }
}

/// Feature transform applied before training and at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Mitigation {
    #[default]
    None,
    Pca { r: usize },
    ClassMean { r: usize },
    Normalize,
}

impl Mitigation {
    pub fn label(&self) -> String {
        match self {
            Mitigation::None => "none".into(),
            Mitigation::Pca { r } => format!("pca-{r}"),
            Mitigation::ClassMean { r } => format!("class-mean-{r}"),
            Mitigation::Normalize => "normalize".into(),
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            Mitigation::Pca { r } | Mitigation::ClassMean { r } => Some(*r),
            _ => None,
        }
    }
}

/// How the noise sensitivity is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum SensitivityRule {
    /// The shift model's row-norm bound, raised to the largest observed row
    /// norm; after a projection the largest projected row norm; after
    /// normalization its add/remove-one sensitivity.
    #[default]
    Auto,
    /// A declared value; training fails if a row exceeds it.
    Fixed { value: f64 },
    /// Rows are scaled into the ball of this radius.
    Clip { value: f64 },
}

/// A complete, reproducible Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub frame: FrameSpec,
    pub n: usize,
    /// Class proportions; balanced when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
    /// Imbalance shorthand: the first half of the classes gets weight
    /// `2α/K`, the rest `2(1-α)/K`. For two classes `α` is the share of class 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub train_shift: ShiftModel,
    pub test_shift: ShiftModel,
    pub privacy: PrivacySpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mitigation: Mitigation,
    #[serde(default)]
    pub sensitivity: SensitivityRule,
    /// Size of the public sample a projection is fitted on; defaults to `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_size: Option<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl Scenario {
    /// Balanced, unshifted, `(ε, δ)` scenario over a seeded frame.
    pub fn perfect(p: usize, k: usize, n: usize, privacy: PrivacySpec, trials: usize, seed: u64) -> Self {
        Self {
            frame: FrameSpec { p, k, canonical: false, seed: None },
            n,
            class_weights: None,
            alpha: None,
            train_shift: ShiftModel::none(),
            test_shift: ShiftModel::none(),
            privacy,
            train: TrainConfig::default(),
            mitigation: Mitigation::None,
            sensitivity: SensitivityRule::Auto,
            public_size: None,
            trials,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(invalid("trials", "must be at least 1"));
        }
        if self.n == 0 {
            return Err(invalid("n", "must be at least 1"));
        }
        if self.class_weights.is_some() && self.alpha.is_some() {
            return Err(invalid("class_weights", "give class_weights or alpha, not both"));
        }
        if self.train_shift.kind == ShiftKind::AdversarialTest {
            return Err(invalid("train_shift", "adversarial shifts apply to test points only"));
        }
        self.privacy.budget()?;
        match self.sensitivity {
            SensitivityRule::Fixed { value } | SensitivityRule::Clip { value } if !(value.is_finite() && value > 0.0) => {
                return Err(invalid("sensitivity", format!("must be positive, got {value}")));
            }
            _ => {}
        }
        if let Some(r) = self.mitigation.rank() {
            if r == 0 || r > self.frame.p {
                return Err(invalid("r", format!("need 1 <= r <= p = {}, got {r}", self.frame.p)));
            }
        }
        Ok(())
    }

    /// Per-class training counts.
    pub fn counts(&self) -> Result<Vec<usize>> {
        let k = self.frame.k;
        let weights = match (&self.class_weights, self.alpha) {
            (Some(w), _) => {
                if w.len() != k {
                    return Err(Error::DimensionMismatch { expected: k, found: w.len() });
                }
                w.clone()
            }
            (None, Some(a)) => alpha_weights(k, a)?,
            (None, None) => {
                if self.n < k {
                    return Err(invalid("n", format!("need n >= K = {k} for balanced classes, got {}", self.n)));
                }
                vec![1.0 / k as f64; k]
            }
        };
        class_counts(&weights, self.n)
    }

    /// Fill in generated offset vectors. Train and test offsets share one
    /// vector so a common offset stays common.
    pub fn resolve_shifts(&self, frame: &EtfFrame) -> Result<(ShiftModel, ShiftModel)> {
        let seed = derive_seed(self.seed, stream::OFFSET, frame.p() as u64);
        let resolve = |s: &ShiftModel| -> Result<ShiftModel> {
            let mut s = s.clone();
            if s.kind == ShiftKind::Offset && s.offset_vector.is_none() {
                s.offset_vector = Some(random_sign_offset(frame, s.beta, s.orthogonal_to_prototype, seed));
            }
            s.validate(frame.p())?;
            Ok(s)
        };
        Ok((resolve(&self.train_shift)?, resolve(&self.test_shift)?))
    }
}

/// Class weights for imbalance level `alpha`, normalized to sum to one.
pub fn alpha_weights(k: usize, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    let half = k / 2;
    let raw: Vec<f64> = (0..k)
        .map(|c| if c < half.max(1) { 2.0 * alpha / k as f64 } else { 2.0 * (1.0 - alpha) / k as f64 })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// `β` times a random sign vector. With `orthogonal`, the span of the frame's
/// source columns is removed and coordinates are re-clipped to `[-β, β]`.
pub fn random_sign_offset(frame: &EtfFrame, beta: f64, orthogonal: bool, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed);
    let mut v: Vec<f64> = (0..frame.p()).map(|_| if rng.random::<bool>() { beta } else { -beta }).collect();
    if orthogonal {
        let src = frame.source();
        for k in 0..src.k() {
            let u = src.column(k);
            let c = dot(u, &v);
            axpy(-c, u, &mut v);
        }
        v.iter_mut().for_each(|x| {
            *x = x.clamp(-beta, beta);
            if x.abs() < 1e-15 {
                *x = 0.0;
            }
        });
    }
    v
}
