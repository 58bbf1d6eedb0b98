//! Linear heads trained with noisy gradient descent.
//!
//! A binary problem can be trained either as a two-row multi-class head or
//! in the reparameterized form with a single vector `θ`, label `+1` for class
//! `0` and prediction `sign(θᵀx)`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::linalg::{axpy, dot, norm2, Matrix};
use crate::privacy::NoiseCalibration;
use crate::rng::{seeded_rng, Rng};
use crate::synth::LabeledDataset;

/// Training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    #[default]
    CrossEntropy,
    /// `½‖Wx - e_y‖²` (or `½(θᵀx - y)²`); at zero init its gradient is
    /// `-Σ y_i x_i`, the plain feature-sum estimator.
    Squared,
}

/// Shape of the trained head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    #[default]
    Multiclass,
    /// Single-vector binary head.
    Binary,
}

/// Initial weights.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "init")]
pub enum Init {
    #[default]
    Zero,
    Gaussian { std: f64 },
}

/// A linear classifier `x -> argmax_k W_k x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    k: usize,
    w: Matrix,
    reparameterized: bool,
}

impl LinearHead {
    pub fn zeros(k: usize, p: usize, kind: HeadKind) -> Result<Self> {
        match kind {
            HeadKind::Multiclass => Ok(Self { k, w: Matrix::zeros(k, p), reparameterized: false }),
            HeadKind::Binary if k == 2 => Ok(Self { k, w: Matrix::zeros(1, p), reparameterized: true }),
            HeadKind::Binary => Err(invalid("head", format!("binary head needs K = 2, got {k}"))),
        }
    }

    pub fn multiclass(w: Matrix) -> Self {
        Self { k: w.rows(), w, reparameterized: false }
    }

    pub fn binary(theta: Vec<f64>) -> Self {
        let p = theta.len();
        Self { k: 2, w: Matrix::from_vec(1, p, theta).expect("1 x p"), reparameterized: true }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.w.cols()
    }

    pub fn is_reparameterized(&self) -> bool {
        self.reparameterized
    }

    pub fn kind(&self) -> HeadKind {
        if self.reparameterized {
            HeadKind::Binary
        } else {
            HeadKind::Multiclass
        }
    }

    /// Weight matrix (`K x p`, or `1 x p` for the binary head).
    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.w
    }

    /// `θ` of a binary head (row 0 otherwise).
    pub fn theta(&self) -> &[f64] {
        self.w.row(0)
    }

    /// Class scores; a binary head scores `(θᵀx, -θᵀx)`.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        if self.reparameterized {
            let s = dot(self.theta(), x);
            vec![s, -s]
        } else {
            self.w.mul_vec(x)
        }
    }

    /// Same as [`predict`].
    pub fn predict(&self, x: &[f64]) -> usize {
        predict(self, x)
    }

    /// Input-space head for a model applied after `x -> Bᵀx` (`B` is `p x r`).
    pub fn compose_basis(&self, basis: &Matrix) -> Result<LinearHead> {
        let w = self.w.matmul(&basis.transpose())?;
        Ok(Self { k: self.k, w, reparameterized: self.reparameterized })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Serialize, Deserialize)]
struct HeadJson {
    #[serde(rename = "K")]
    k: usize,
    p: usize,
    #[serde(rename = "W")]
    w: Vec<f64>,
    reparameterized: bool,
}

impl Serialize for LinearHead {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        HeadJson { k: self.k, p: self.p(), w: self.w.as_slice().to_vec(), reparameterized: self.reparameterized }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LinearHead {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = HeadJson::deserialize(d)?;
        let rows = if raw.reparameterized { 1 } else { raw.k };
        if raw.reparameterized && raw.k != 2 {
            return Err(D::Error::custom("reparameterized heads have K = 2"));
        }
        let w = Matrix::from_vec(rows, raw.p, raw.w).map_err(D::Error::custom)?;
        Ok(Self { k: raw.k, w, reparameterized: raw.reparameterized })
    }
}

/// Predicted class: `sign(θᵀx)` with ties to class 0 for a binary head,
/// otherwise the arg-max score with ties to the lowest index.
pub fn predict(head: &LinearHead, x: &[f64]) -> usize {
    if head.reparameterized {
        return if dot(head.theta(), x) >= 0.0 { 0 } else { 1 };
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for k in 0..head.k {
        let s = dot(head.w.row(k), x);
        if s > best_score {
            best = k;
            best_score = s;
        }
    }
    best
}

/// Fraction of rows of `data` that `head` misclassifies.
pub fn error_rate(head: &LinearHead, data: &LabeledDataset) -> f64 {
    let wrong = (0..data.n()).filter(|&i| predict(head, data.features.row(i)) != data.labels[i]).count();
    wrong as f64 / data.n() as f64
}

/// Hyper-parameters for noisy gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Step size. Unset means 1 for a single step, and the radius-based
    /// schedule for projected multi-step runs.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "one")]
    pub iterations: u32,
    #[serde(default)]
    pub projection_radius: Option<f64>,
    /// Tail parameter `t` of the multi-step schedule; defaults to `n² + ln(1/k)`.
    #[serde(default)]
    pub tail_parameter: Option<f64>,
    #[serde(default)]
    pub loss: Loss,
    #[serde(default)]
    pub head: HeadKind,
    #[serde(default)]
    pub init: Init,
}

fn one() -> u32 {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: None,
            iterations: 1,
            projection_radius: None,
            tail_parameter: None,
            loss: Loss::CrossEntropy,
            head: HeadKind::Multiclass,
            init: Init::Zero,
        }
    }
}

impl TrainConfig {
    pub fn binary() -> Self {
        Self { head: HeadKind::Binary, ..Self::default() }
    }

    pub fn with_loss(mut self, loss: Loss) -> Self {
        self.loss = loss;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = Some(eta);
        self
    }
}

/// Privacy and step-size record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub sensitivity: Option<f64>,
    /// `None` for the noiseless baseline.
    pub rho_per_step: Option<f64>,
    pub sigma_sq: f64,
    pub iterations: u32,
    pub total_rho: Option<f64>,
    pub eta: f64,
}

/// A trained head with its run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trained {
    pub head: LinearHead,
    pub log: RunLog,
}

fn softmax_into(scores: &mut [f64]) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - m).exp();
        z += *s;
    }
    scores.iter_mut().for_each(|s| *s /= z);
}

fn label_sign(y: usize) -> f64 {
    if y == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Summed cross-entropy loss of `head` on `data`.
pub fn ce_loss(head: &LinearHead, data: &LabeledDataset) -> Result<f64> {
    check_shapes(head, data)?;
    let mut total = 0.0;
    for i in 0..data.n() {
        let x = data.features.row(i);
        let y = data.labels[i];
        if head.reparameterized {
            let m = label_sign(y) * dot(head.theta(), x);
            // log(1 + e^{-m}) without overflow.
            total += if m > 0.0 { (-m).exp().ln_1p() } else { -m + m.exp().ln_1p() };
        } else {
            let s = head.w.mul_vec(x);
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + s.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - s[y];
        }
    }
    Ok(total)
}

/// Gradient of the summed cross-entropy loss with respect to the weights.
pub fn ce_gradient(head: &LinearHead, data: &LabeledDataset) -> Result<Matrix> {
    loss_gradient(head, data, Loss::CrossEntropy)
}

/// Gradient of the summed `loss` with respect to the weights.
pub fn loss_gradient(head: &LinearHead, data: &LabeledDataset, loss: Loss) -> Result<Matrix> {
    check_shapes(head, data)?;
    let mut g = Matrix::zeros(head.w.rows(), head.p());
    let mut s = vec![0.0; head.k];
    for i in 0..data.n() {
        let x = data.features.row(i);
        let y = data.labels[i];
        if head.reparameterized {
            let ys = label_sign(y);
            let t = dot(head.theta(), x);
            let c = match loss {
                Loss::CrossEntropy => -ys / (1.0 + (ys * t).exp()),
                Loss::Squared => t - ys,
            };
            axpy(c, x, g.row_mut(0));
        } else {
            for (k, sk) in s.iter_mut().enumerate() {
                *sk = dot(head.w.row(k), x);
            }
            if loss == Loss::CrossEntropy {
                softmax_into(&mut s);
            }
            s[y] -= 1.0;
            for (k, &c) in s.iter().enumerate() {
                if c != 0.0 {
                    axpy(c, x, g.row_mut(k));
                }
            }
        }
    }
    Ok(g)
}

/// Gradient at `W = 0` from per-class feature sums (`K x p`).
pub fn zero_init_gradient(class_sums: &Matrix, loss: Loss, head: HeadKind) -> Result<Matrix> {
    let (k, p) = (class_sums.rows(), class_sums.cols());
    match head {
        HeadKind::Binary => {
            if k != 2 {
                return Err(invalid("head", format!("binary head needs K = 2, got {k}")));
            }
            let c = match loss {
                Loss::CrossEntropy => 0.5,
                Loss::Squared => 1.0,
            };
            let g: Vec<f64> = class_sums.row(0).iter().zip(class_sums.row(1)).map(|(a, b)| -c * (a - b)).collect();
            Matrix::from_vec(1, p, g)
        }
        HeadKind::Multiclass => {
            let mut total = vec![0.0; p];
            if loss == Loss::CrossEntropy {
                for j in 0..k {
                    axpy(1.0 / k as f64, class_sums.row(j), &mut total);
                }
            }
            let mut g = Matrix::zeros(k, p);
            for j in 0..k {
                let row = g.row_mut(j);
                for ((r, t), s) in row.iter_mut().zip(&total).zip(class_sums.row(j)) {
                    *r = t - s;
                }
            }
            Ok(g)
        }
    }
}

fn check_shapes(head: &LinearHead, data: &LabeledDataset) -> Result<()> {
    if head.p() != data.p() {
        return Err(Error::DimensionMismatch { expected: head.p(), found: data.p() });
    }
    if head.k != data.k() {
        return Err(Error::DimensionMismatch { expected: head.k, found: data.k() });
    }
    Ok(())
}

/// Verify every row norm is within the declared sensitivity.
pub fn check_sensitivity(data: &LabeledDataset, calib: &NoiseCalibration) -> Result<()> {
    if calib.is_noiseless() {
        return Ok(());
    }
    let bound = calib.sensitivity;
    for i in 0..data.n() {
        let norm = norm2(data.features.row(i));
        if norm > bound * (1.0 + 1e-9) {
            return Err(Error::SensitivityViolation { row: i, norm, bound });
        }
    }
    Ok(())
}

/// `W ← W - η (g + ξ)` with `ξ ~ N(0, σ² I)` drawn row-major from `rng`.
pub fn noisy_update(w: &mut Matrix, grad: &Matrix, eta: f64, calib: &NoiseCalibration, rng: &mut Rng) {
    let sigma = calib.sigma();
    for (wi, gi) in w.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        let xi = if sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        } else {
            0.0
        };
        *wi -= eta * (gi + xi);
    }
}

fn initial_head(k: usize, p: usize, cfg: &TrainConfig, rng: &mut Rng) -> Result<LinearHead> {
    let mut head = LinearHead::zeros(k, p, cfg.head)?;
    if let Init::Gaussian { std } = cfg.init {
        if !(std.is_finite() && std >= 0.0) {
            return Err(invalid("init", "Gaussian init needs a non-negative std"));
        }
        for w in head.w.as_mut_slice() {
            let z: f64 = StandardNormal.sample(rng);
            *w = std * z;
        }
    }
    Ok(head)
}

fn run_log(calib: &NoiseCalibration, iterations: u32, eta: f64) -> RunLog {
    let rho = (!calib.is_noiseless()).then(|| calib.sensitivity * calib.sensitivity / (2.0 * calib.sigma_sq));
    RunLog {
        sensitivity: calib.sensitivity.is_finite().then_some(calib.sensitivity),
        rho_per_step: rho,
        sigma_sq: calib.sigma_sq,
        iterations,
        total_rho: rho.map(|r| r * f64::from(iterations)),
        eta,
    }
}

/// One full-batch noisy gradient step: `W = W0 - η (∇L(W0) + ξ)`.
pub fn one_step_noisygd(
    data: &LabeledDataset,
    cfg: &TrainConfig,
    calib: &NoiseCalibration,
    seed: u64,
) -> Result<Trained> {
    one_step_with_rng(data, cfg, calib, &mut seeded_rng(seed))
}

/// [`one_step_noisygd`] drawing from an existing stream.
pub fn one_step_with_rng(
    data: &LabeledDataset,
    cfg: &TrainConfig,
    calib: &NoiseCalibration,
    rng: &mut Rng,
) -> Result<Trained> {
    check_sensitivity(data, calib)?;
    let eta = cfg.eta.unwrap_or(1.0);
    if !(eta.is_finite() && eta > 0.0) {
        return Err(invalid("eta", format!("must be positive, got {eta}")));
    }
    let mut head = initial_head(data.k(), data.p(), cfg, rng)?;
    let grad = loss_gradient(&head, data, cfg.loss)?;
    noisy_update(&mut head.w, &grad, eta, calib, rng);
    Ok(Trained { head, log: run_log(calib, 1, eta) })
}

/// Step size `R / (n G² + p + sqrt(p t) + t)` of the projected schedule, with
/// `G² = 1 + β²p` on shifted collapse features.
pub fn projected_step_size(radius: f64, n: usize, p: usize, sensitivity_sq: f64, t: f64) -> f64 {
    let p = p as f64;
    radius / (n as f64 * sensitivity_sq + p + (p * t).sqrt() + t)
}

/// Projected noisy gradient descent:
/// `W_{k+1} = Proj_{‖W‖ ≤ R}(W_k - η (∇L(W_k) + ξ_k))`.
pub fn projected_noisygd(
    data: &LabeledDataset,
    cfg: &TrainConfig,
    calib: &NoiseCalibration,
    seed: u64,
) -> Result<Trained> {
    projected_with_rng(data, cfg, calib, &mut seeded_rng(seed))
}

/// [`projected_noisygd`] drawing from an existing stream.
pub fn projected_with_rng(
    data: &LabeledDataset,
    cfg: &TrainConfig,
    calib: &NoiseCalibration,
    rng: &mut Rng,
) -> Result<Trained> {
    let radius = cfg.projection_radius.ok_or(Error::MissingRadius)?;
    if !(radius.is_finite() && radius > 0.0) {
        return Err(invalid("projection_radius", format!("must be positive, got {radius}")));
    }
    let steps = cfg.iterations.max(1);
    check_sensitivity(data, calib)?;
    let eta = match cfg.eta {
        Some(e) => e,
        None => {
            let n = data.n() as f64;
            let t = cfg.tail_parameter.unwrap_or(n * n + (1.0 / f64::from(steps)).ln());
            let g = if calib.sensitivity.is_finite() { calib.sensitivity } else { data.max_row_norm() };
            projected_step_size(radius, data.n(), data.p(), g * g, t)
        }
    };
    if !(eta.is_finite() && eta > 0.0) {
        return Err(invalid("eta", format!("must be positive, got {eta}")));
    }
    let mut head = initial_head(data.k(), data.p(), cfg, rng)?;
    for _ in 0..steps {
        let grad = loss_gradient(&head, data, cfg.loss)?;
        noisy_update(&mut head.w, &grad, eta, calib, rng);
        let norm = head.w.frobenius_norm();
        if norm > radius {
            head.w.scale(radius / norm);
        }
    }
    Ok(Trained { head, log: run_log(calib, steps, eta) })
}
