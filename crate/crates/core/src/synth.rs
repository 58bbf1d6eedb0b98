//! Synthetic datasets under perfect and approximate Neural Collapse,
//! perturbation models, and feature CSV input/output.
//!
//! Class `0` of a binary frame carries label `+1` (prototype `e1` in the
//! canonical frame) and class `1` carries label `-1`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::EtfFrame;
use crate::linalg::{axpy, dot, norm2, norm_inf, Matrix};
use crate::rng::{seeded_rng, Rng};
use crate::trainer::LinearHead;

/// Which perturbation a [`ShiftModel`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    None,
    Stochastic,
    Offset,
    AdversarialTest,
}

/// Coordinate distribution for stochastic shifts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "law")]
pub enum NoiseLaw {
    /// Uniform on `[-β, β]`; bounded, variance `β²/3`.
    #[default]
    Uniform,
    /// `N(0, variance)`; unbounded.
    Gaussian { variance: f64 },
}

/// A feature perturbation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftModel {
    pub kind: ShiftKind,
    /// l-infinity bound (β for training shifts, β̃ for attacks).
    #[serde(default)]
    pub beta: f64,
    /// Fixed vector `v` for offset shifts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_vector: Option<Vec<f64>>,
    /// Remove the component along the class prototype.
    #[serde(default)]
    pub orthogonal_to_prototype: bool,
    /// Coordinates are independent (selects the separable bound variants).
    #[serde(default)]
    pub independent_coordinates: bool,
    #[serde(default)]
    pub law: NoiseLaw,
}

impl ShiftModel {
    pub fn none() -> Self {
        Self {
            kind: ShiftKind::None,
            beta: 0.0,
            offset_vector: None,
            orthogonal_to_prototype: false,
            independent_coordinates: false,
            law: NoiseLaw::Uniform,
        }
    }

    /// Uniform `[-β, β]` coordinates.
    pub fn stochastic(beta: f64) -> Self {
        Self { kind: ShiftKind::Stochastic, beta, independent_coordinates: true, ..Self::none() }
    }

    /// Gaussian coordinates with the given variance.
    pub fn gaussian(variance: f64) -> Self {
        Self {
            kind: ShiftKind::Stochastic,
            beta: f64::INFINITY,
            independent_coordinates: true,
            law: NoiseLaw::Gaussian { variance },
            ..Self::none()
        }
    }

    /// Fixed offset `v` with declared bound `β ≥ ‖v‖∞`.
    pub fn offset(v: Vec<f64>, beta: f64) -> Self {
        Self { kind: ShiftKind::Offset, beta, offset_vector: Some(v), ..Self::none() }
    }

    /// Worst-case test-time attack of magnitude `β̃`.
    pub fn adversarial(beta_tilde: f64) -> Self {
        Self { kind: ShiftKind::AdversarialTest, beta: beta_tilde, ..Self::none() }
    }

    pub fn orthogonal(mut self) -> Self {
        self.orthogonal_to_prototype = true;
        self
    }

    pub fn dependent(mut self) -> Self {
        self.independent_coordinates = false;
        self
    }

    /// True when the shift consumes no randomness.
    pub fn is_deterministic(&self) -> bool {
        self.kind != ShiftKind::Stochastic
    }

    /// Check the model against dimension `p`.
    pub fn validate(&self, p: usize) -> Result<()> {
        match (self.kind, self.law) {
            (ShiftKind::Stochastic, NoiseLaw::Gaussian { variance }) => {
                if !(variance.is_finite() && variance >= 0.0) {
                    return Err(invalid("variance", format!("must be non-negative, got {variance}")));
                }
            }
            _ => {
                if !(self.beta.is_finite() && self.beta >= 0.0) {
                    return Err(invalid("beta", format!("must be finite and non-negative, got {}", self.beta)));
                }
            }
        }
        if self.kind == ShiftKind::Offset {
            let v = self
                .offset_vector
                .as_ref()
                .ok_or_else(|| invalid("offset_vector", "offset shift needs a vector"))?;
            if v.len() != p {
                return Err(Error::DimensionMismatch { expected: p, found: v.len() });
            }
            let norm = norm_inf(v);
            if norm > self.beta {
                return Err(Error::OffsetExceedsBound { norm, beta: self.beta });
            }
        }
        Ok(())
    }

    /// Draw a stochastic shift into `out` (which is overwritten).
    fn draw(&self, rng: &mut Rng, out: &mut [f64]) {
        match self.law {
            NoiseLaw::Uniform => {
                let b = self.beta;
                for o in out.iter_mut() {
                    *o = b * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
            NoiseLaw::Gaussian { variance } => {
                let s = variance.sqrt();
                for o in out.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *o = s * z;
                }
            }
        }
    }

    /// Remove the component of `v` along unit `direction`, then re-clip.
    fn orthogonalize(&self, direction: &[f64], v: &mut [f64]) {
        let c = dot(direction, v);
        axpy(-c, direction, v);
        if self.law == NoiseLaw::Uniform {
            let b = self.beta;
            v.iter_mut().for_each(|x| *x = x.clamp(-b, b));
        }
    }
}

/// Features with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_counts: Vec<usize>,
    /// Fraction of class `0` rows, set for binary data.
    pub alpha: Option<f64>,
}

impl LabeledDataset {
    /// Build from features and labels in `0..k`.
    pub fn new(features: Matrix, labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty);
        }
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch { expected: labels.len(), found: features.rows() });
        }
        let mut class_counts = vec![0usize; k];
        for &y in &labels {
            if y >= k {
                return Err(invalid("labels", format!("label {y} outside 0..{k}")));
            }
            class_counts[y] += 1;
        }
        let n = labels.len();
        let alpha = (k == 2).then(|| class_counts[0] as f64 / n as f64);
        Ok(Self { features, labels, class_counts, alpha })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn p(&self) -> usize {
        self.features.cols()
    }

    pub fn k(&self) -> usize {
        self.class_counts.len()
    }

    pub fn max_row_norm(&self) -> f64 {
        (0..self.n()).map(|i| norm2(self.features.row(i))).fold(0.0, f64::max)
    }

    /// Per-class feature sums, `K x p`.
    pub fn class_sums(&self) -> Matrix {
        let mut s = Matrix::zeros(self.k(), self.p());
        for (i, &y) in self.labels.iter().enumerate() {
            axpy(1.0, self.features.row(i), s.row_mut(y));
        }
        s
    }
}

/// Split `n` by `weights` with largest-remainder rounding, ties to the lower
/// class index.
pub fn class_counts(weights: &[f64], n: usize) -> Result<Vec<usize>> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(invalid("class_weights", "weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::WeightsDoNotSumToOne(total));
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    Ok(counts)
}

/// Streams rows `M_y + v` for one frame and shift model.
#[derive(Debug, Clone)]
pub struct RowSampler<'a> {
    frame: &'a EtfFrame,
    shift: &'a ShiftModel,
}

impl<'a> RowSampler<'a> {
    pub fn new(frame: &'a EtfFrame, shift: &'a ShiftModel) -> Result<Self> {
        if shift.kind == ShiftKind::AdversarialTest {
            return Err(invalid("shift", "adversarial-test shifts apply to test points only"));
        }
        shift.validate(frame.p())?;
        Ok(Self { frame, shift })
    }

    pub fn p(&self) -> usize {
        self.frame.p()
    }

    /// Write a row of class `y` into `out`. Only stochastic shifts touch `rng`.
    pub fn fill(&self, y: usize, rng: &mut Rng, out: &mut [f64]) {
        let m = self.frame.prototype_ref(y);
        match self.shift.kind {
            ShiftKind::None | ShiftKind::AdversarialTest => out.copy_from_slice(m),
            ShiftKind::Offset => {
                let v = self.shift.offset_vector.as_deref().expect("validated");
                for ((o, a), b) in out.iter_mut().zip(m).zip(v) {
                    *o = a + b;
                }
            }
            ShiftKind::Stochastic => {
                self.shift.draw(rng, out);
                if self.shift.orthogonal_to_prototype {
                    self.shift.orthogonalize(m, out);
                }
                axpy(1.0, m, out);
            }
        }
    }
}

/// Draw a labeled dataset with rows in label order.
pub fn sample_dataset(
    frame: &EtfFrame,
    n: usize,
    class_weights: Option<&[f64]>,
    shift: &ShiftModel,
    seed: u64,
) -> Result<LabeledDataset> {
    let k = frame.k();
    let counts = match class_weights {
        Some(w) => {
            if w.len() != k {
                return Err(Error::DimensionMismatch { expected: k, found: w.len() });
            }
            class_counts(w, n)?
        }
        None => {
            if n < k {
                return Err(invalid("n", format!("need n >= K = {k} for balanced classes, got {n}")));
            }
            class_counts(&vec![1.0 / k as f64; k], n)?
        }
    };
    sample_with_counts(frame, &counts, shift, &mut seeded_rng(seed))
}

/// Draw a dataset with exact class counts from an existing RNG stream.
pub fn sample_with_counts(
    frame: &EtfFrame,
    counts: &[usize],
    shift: &ShiftModel,
    rng: &mut Rng,
) -> Result<LabeledDataset> {
    let sampler = RowSampler::new(frame, shift)?;
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::Empty);
    }
    let p = frame.p();
    let mut features = Matrix::zeros(n, p);
    let mut labels = Vec::with_capacity(n);
    let mut i = 0;
    for (y, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            sampler.fill(y, rng, features.row_mut(i));
            labels.push(y);
            i += 1;
        }
    }
    LabeledDataset::new(features, labels, counts.len())
}

/// Perturb a test point `x` of class `y`.
///
/// Stochastic shifts add a fresh draw (orthogonal to `x` when the flag is
/// set); offsets add `v`; adversarial shifts add the l-infinity-bounded vector
/// that minimizes the worst margin of `model` at `x`.
pub fn perturb_test_point(
    x: &[f64],
    y: usize,
    shift: &ShiftModel,
    model: Option<&LinearHead>,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let p = x.len();
    shift.validate(p)?;
    let mut out = x.to_vec();
    match shift.kind {
        ShiftKind::None => {}
        ShiftKind::Offset => axpy(1.0, shift.offset_vector.as_deref().expect("validated"), &mut out),
        ShiftKind::Stochastic => {
            let mut v = vec![0.0; p];
            shift.draw(rng, &mut v);
            let nx = norm2(x);
            if shift.orthogonal_to_prototype && nx > 0.0 {
                let u: Vec<f64> = x.iter().map(|a| a / nx).collect();
                shift.orthogonalize(&u, &mut v);
            }
            axpy(1.0, &v, &mut out);
        }
        ShiftKind::AdversarialTest => {
            let head = model.ok_or(Error::MissingModel)?;
            let v = adversarial_shift(head, x, y, shift.beta)?;
            axpy(1.0, &v, &mut out);
        }
    }
    Ok(out)
}

/// Sign-vector minimizer of the worst class margin within `‖v‖∞ ≤ β̃`.
///
/// For a binary reparameterized head this is `-y β̃ sign(θ)`. For `K`
/// classes the margin against class `j` is `(W_y - W_j)ᵀ(x + v)`; each is
/// minimized by `-β̃ sign(W_y - W_j)`, and the smallest resulting margin wins.
pub fn adversarial_shift(head: &LinearHead, x: &[f64], y: usize, beta_tilde: f64) -> Result<Vec<f64>> {
    if x.len() != head.p() {
        return Err(Error::DimensionMismatch { expected: head.p(), found: x.len() });
    }
    let sign = |a: f64| if a > 0.0 { 1.0 } else if a < 0.0 { -1.0 } else { 0.0 };
    if head.is_reparameterized() {
        let ys = if y == 0 { 1.0 } else { -1.0 };
        return Ok(head.theta().iter().map(|t| -ys * beta_tilde * sign(*t)).collect());
    }
    let w = head.weights();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for j in (0..head.k()).filter(|&j| j != y) {
        let d: Vec<f64> = w.row(y).iter().zip(w.row(j)).map(|(a, b)| a - b).collect();
        let margin = dot(&d, x) - beta_tilde * crate::linalg::norm1(&d);
        if best.as_ref().is_none_or(|(m, _)| margin < *m) {
            best = Some((margin, d.iter().map(|a| -beta_tilde * sign(*a)).collect()));
        }
    }
    Ok(best.map(|(_, v)| v).unwrap_or_else(|| vec![0.0; x.len()]))
}

/// Zero-initialization gradient direction `(n/2) e1 + ((1 - 2a) n / 2) v` for
/// binary data with a common offset `v`, where `a` is the fraction of label
/// `-1` rows.
pub fn imbalanced_gradient_offset(alpha_negative: f64, v: &[f64], n: usize) -> Result<Vec<f64>> {
    if !(alpha_negative > 0.0 && alpha_negative < 1.0) {
        return Err(invalid("alpha", format!("must lie in (0, 1), got {alpha_negative}")));
    }
    if v.is_empty() {
        return Err(invalid("v", "empty vector"));
    }
    let half = n as f64 / 2.0;
    let c = (1.0 - 2.0 * alpha_negative) * half;
    let mut g: Vec<f64> = v.iter().map(|x| c * x).collect();
    g[0] += half;
    Ok(g)
}

/// Read a feature CSV with header `label,f0,...,f{p-1}`.
pub fn load_features(path: impl AsRef<Path>, normalize: bool) -> Result<LabeledDataset> {
    read_features(std::fs::File::open(path)?, normalize)
}

/// [`load_features`] over any reader.
pub fn read_features(input: impl Read, normalize: bool) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header = reader.headers()?.clone();
    if header.is_empty() || header.get(0).map(str::trim) != Some("label") {
        return Err(Error::Parse { line: 1, message: "header must start with 'label'".into() });
    }
    let p = header.len() - 1;
    if p == 0 {
        return Err(Error::Parse { line: 1, message: "no feature columns".into() });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |pos| pos.line() as usize);
        if rec.len() != p + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", p + 1, rec.len()),
            });
        }
        let label: usize = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("label '{}' is not a non-negative integer", &rec[0]),
        })?;
        let start = data.len();
        for field in rec.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("'{field}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, message: format!("non-finite value '{field}'") });
            }
            data.push(v);
        }
        if normalize {
            let row = &mut data[start..];
            let n = norm2(row);
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Empty);
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; k];
    labels.iter().for_each(|&y| seen[y] = true);
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::NonContiguousLabels(missing));
    }
    let features = Matrix::from_vec(labels.len(), p, data)?;
    LabeledDataset::new(features, labels, k)
}

/// Write a dataset in the format read by [`load_features`].
pub fn write_features(data: &LabeledDataset, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string()];
    header.extend((0..data.p()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (i, y) in data.labels.iter().enumerate() {
        let mut rec = vec![y.to_string()];
        // `{:?}` prints the shortest representation that round-trips exactly.
        rec.extend(data.features.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
