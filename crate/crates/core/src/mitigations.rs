//! Dimension-reduction projections and mean normalization.
//!
//! Projections are fitted on public data and map `x -> Bᵀx` with `B` of
//! shape `p x r`. PCA uses the uncentered second moment `(1/m) Σ x xᵀ`.

use nalgebra::{DMatrix, DMatrixView, SymmetricEigen};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::geometry::EtfFrame;
use crate::linalg::Matrix;
use crate::rng::seeded_rng;
use crate::synth::LabeledDataset;

/// Largest dimension for which PCA forms the full `p x p` second moment.
pub const DENSE_PCA_MAX_P: usize = 512;

/// How a projection basis was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMethod {
    Pca,
    ClassMean,
}

/// A `p x r` basis with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub method: ProjectionMethod,
    pub basis: Matrix,
    /// l-infinity deviation from the ideal directions, once measured.
    pub beta0_estimate: Option<f64>,
}

impl Projection {
    pub fn p(&self) -> usize {
        self.basis.rows()
    }

    pub fn r(&self) -> usize {
        self.basis.cols()
    }

    /// Keep only the leading `r` columns.
    pub fn truncate(&self, r: usize) -> Result<Projection> {
        if r == 0 || r > self.r() {
            return Err(invalid("r", format!("cannot truncate {} columns to {r}", self.r())));
        }
        let mut b = Matrix::zeros(self.p(), r);
        for i in 0..self.p() {
            b.row_mut(i).copy_from_slice(&self.basis.row(i)[..r]);
        }
        Ok(Projection { method: self.method, basis: b, beta0_estimate: None })
    }

    /// `Bᵀx`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.r()];
        self.basis.tr_mul_vec_into(x, &mut out);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ProjectionJson {
    method: ProjectionMethod,
    p: usize,
    r: usize,
    basis: Vec<f64>,
    beta0_estimate: Option<f64>,
}

impl Serialize for Projection {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ProjectionJson {
            method: self.method,
            p: self.p(),
            r: self.r(),
            basis: self.basis.as_slice().to_vec(),
            beta0_estimate: self.beta0_estimate,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Projection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = ProjectionJson::deserialize(d)?;
        if raw.r > raw.p {
            return Err(D::Error::custom("r exceeds p"));
        }
        if raw.basis.iter().any(|v| !v.is_finite()) {
            return Err(D::Error::custom("basis entries must be finite"));
        }
        let basis = Matrix::from_vec(raw.p, raw.r, raw.basis).map_err(D::Error::custom)?;
        Ok(Self { method: raw.method, basis, beta0_estimate: raw.beta0_estimate })
    }
}

/// Row-major `m x p` data read as its column-major transpose `p x m`.
fn transposed(x: &Matrix) -> DMatrixView<'_, f64> {
    DMatrixView::from_slice(x.as_slice(), x.cols(), x.rows())
}

/// `rows · B` as a row-major matrix: `Bᵀ rowsᵀ` in column-major order has
/// the same buffer.
pub fn project_rows(proj: &Projection, rows: &Matrix) -> Matrix {
    let out = transposed(&proj.basis) * transposed(rows);
    Matrix::from_vec(rows.rows(), proj.r(), out.as_slice().to_vec()).expect("shape matches")
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
fn sorted_eigen(s: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |i, j| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}

/// Orthonormalize the columns of `y` in place (thin QR).
fn orthonormal_columns(y: DMatrix<f64>) -> DMatrix<f64> {
    y.qr().q()
}

/// Top `r` eigenpairs of the uncentered second moment of the rows of `x`.
///
/// Small `p` uses a dense symmetric eigensolver; larger `p` uses block
/// subspace iteration with Rayleigh-Ritz extraction, which never forms the
/// `p x p` matrix.
pub fn second_moment_top_eigen(x: &Matrix, r: usize) -> Result<(Vec<f64>, Matrix)> {
    let (m, p) = (x.rows(), x.cols());
    if r == 0 || r > p {
        return Err(invalid("r", format!("need 1 <= r <= p = {p}, got {r}")));
    }
    if r > m {
        return Err(invalid("r", format!("need r <= m = {m} public samples, got {r}")));
    }
    let (values, vectors) = if p <= DENSE_PCA_MAX_P {
        let xt = transposed(x);
        let s = (xt * xt.transpose()) / m as f64;
        let (vals, vecs) = sorted_eigen(s);
        (vals[..r].to_vec(), vecs.columns(0, r).into_owned())
    } else {
        subspace_iteration(x, r)
    };
    let mut basis = Matrix::zeros(p, r);
    for j in 0..r {
        let col = vectors.column(j);
        // Sign convention: largest-magnitude coordinate positive.
        let mut lead = 0;
        for i in 1..p {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        let s = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..p {
            basis.set(i, j, s * col[i]);
        }
    }
    Ok((values, basis))
}

fn subspace_iteration(x: &Matrix, r: usize) -> (Vec<f64>, DMatrix<f64>) {
    const MAX_ITERS: usize = 40;
    const TOL: f64 = 1e-10;
    let (m, p) = (x.rows(), x.cols());
    let b = (r + 10).min(p).min(m);
    let xt = transposed(x);
    // With more samples than features, one p x p product is cheaper than two
    // m x p products per iteration.
    let gram = (m > p).then(|| (xt * xt.transpose()) / m as f64);
    let apply = |q: &DMatrix<f64>| match &gram {
        Some(s) => s * q,
        None => (xt * xt.tr_mul(q)) / m as f64,
    };
    let mut rng = seeded_rng(0x5eed);
    let start = DMatrix::from_fn(p, b, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormal_columns(start);
    let mut sq = apply(&q);
    let mut previous: Option<Vec<f64>> = None;
    for _ in 0..MAX_ITERS {
        let (vals, vecs) = sorted_eigen(q.tr_mul(&sq));
        let converged = previous.as_ref().is_some_and(|prev| {
            (0..r).all(|i| (vals[i] - prev[i]).abs() <= TOL * vals[0].abs().max(f64::MIN_POSITIVE))
        });
        if converged {
            return (vals, &q * &vecs);
        }
        previous = Some(vals);
        q = orthonormal_columns(&sq * &vecs);
        sq = apply(&q);
    }
    let (vals, vecs) = sorted_eigen(q.tr_mul(&sq));
    (vals, &q * &vecs)
}

/// Fit a projection on public data.
///
/// `Pca` takes the top `r` eigenvectors of the second moment. `ClassMean`
/// uses the first `r` empirical class means as columns (`r ≤ K`).
pub fn fit_projection(public: &LabeledDataset, method: ProjectionMethod, r: usize) -> Result<Projection> {
    let (m, p) = (public.n(), public.p());
    if r == 0 || r > p {
        return Err(invalid("r", format!("need 1 <= r <= p = {p}, got {r}")));
    }
    if r > m {
        return Err(invalid("r", format!("need r <= m = {m} public samples, got {r}")));
    }
    let basis = match method {
        ProjectionMethod::Pca => second_moment_top_eigen(&public.features, r)?.1,
        ProjectionMethod::ClassMean => {
            if let Some(k) = public.class_counts.iter().position(|&c| c == 0) {
                return Err(Error::EmptyClass(k));
            }
            if r > public.k() {
                return Err(invalid("r", format!("class-mean basis has at most K = {} columns", public.k())));
            }
            let sums = public.class_sums();
            let mut b = Matrix::zeros(p, r);
            for k in 0..r {
                let c = public.class_counts[k] as f64;
                for i in 0..p {
                    b.set(i, k, sums.get(k, i) / c);
                }
            }
            b
        }
    };
    Ok(Projection { method, basis, beta0_estimate: None })
}

/// Projected data with the recomputed sensitivity (max projected row norm).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedData {
    pub data: LabeledDataset,
    pub sensitivity: f64,
}

/// Map every row through `x -> Bᵀx`.
pub fn project_dataset(data: &LabeledDataset, proj: &Projection) -> Result<ProjectedData> {
    if data.p() != proj.p() {
        return Err(Error::DimensionMismatch { expected: proj.p(), found: data.p() });
    }
    if proj.basis.as_slice().iter().all(|v| *v == 0.0) {
        log::warn!("projection basis is identically zero; training will see only noise");
    }
    let features = project_rows(proj, &data.features);
    let projected = LabeledDataset {
        features,
        labels: data.labels.clone(),
        class_counts: data.class_counts.clone(),
        alpha: data.alpha,
    };
    let sensitivity = projected.max_row_norm();
    Ok(ProjectedData { data: projected, sensitivity })
}

/// How the post-normalization sensitivity was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensitivitySource {
    /// Balanced binary: `n/(n-1)` times the largest centered row norm.
    BalancedBinary,
    /// Exact leave-one-out sweep over all rows.
    LeaveOneOut,
    /// `2 · max row norm`, used above the sweep size limit.
    RowNormBound,
}

/// Largest `n` for which the leave-one-out sweep runs.
pub const LOO_MAX_N: usize = 10_000;

/// Mean-normalized data with its add/remove-one sensitivity.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub data: LabeledDataset,
    pub sensitivity: f64,
    pub source: SensitivitySource,
    pub mean: Vec<f64>,
}

/// Compensated column means.
fn column_means(x: &Matrix) -> Vec<f64> {
    let (n, p) = (x.rows(), x.cols());
    let mut sum = vec![0.0; p];
    let mut comp = vec![0.0; p];
    for i in 0..n {
        for ((s, c), v) in sum.iter_mut().zip(comp.iter_mut()).zip(x.row(i)) {
            let t = *s + v;
            *c += if s.abs() >= v.abs() { (*s - t) + v } else { (v - t) + *s };
            *s = t;
        }
    }
    sum.iter().zip(&comp).map(|(s, c)| (s + c) / n as f64).collect()
}

/// Subtract the global feature mean from every row.
///
/// The sensitivity refers to the zero-initialization gradient
/// `Σ c(y_i) (x_i - x̄)ᵀ` with `c = ±1` for binary labels and one-hot codes
/// otherwise; the mean itself moves when a row is removed, which the
/// sweep accounts for.
pub fn normalize_dataset(data: &LabeledDataset) -> Result<Normalized> {
    let (n, k) = (data.n(), data.k());
    if n < 2 {
        return Err(invalid("n", format!("normalization needs n >= 2, got {n}")));
    }
    let mean = column_means(&data.features);
    let mut features = data.features.clone();
    for i in 0..n {
        for (v, m) in features.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let centered = LabeledDataset {
        features,
        labels: data.labels.clone(),
        class_counts: data.class_counts.clone(),
        alpha: data.alpha,
    };
    let nf = n as f64;
    let (sensitivity, source) = if k == 2 && data.class_counts[0] == data.class_counts[1] {
        (nf / (nf - 1.0) * centered.max_row_norm(), SensitivitySource::BalancedBinary)
    } else if n <= LOO_MAX_N {
        (leave_one_out_sensitivity(data, &mean), SensitivitySource::LeaveOneOut)
    } else {
        (2.0 * centered.max_row_norm(), SensitivitySource::RowNormBound)
    };
    log::info!("normalization sensitivity {sensitivity} ({source:?})");
    Ok(Normalized { data: centered, sensitivity, source, mean })
}

fn label_code(k: usize, y: usize) -> Vec<f64> {
    if k == 2 {
        vec![if y == 0 { 1.0 } else { -1.0 }]
    } else {
        let mut c = vec![0.0; k];
        c[y] = 1.0;
        c
    }
}

/// `max_j ‖g(D) - g(D \ {j})‖_F` for the centered linear gradient.
fn leave_one_out_sensitivity(data: &LabeledDataset, mean: &[f64]) -> f64 {
    let (n, p, k) = (data.n(), data.p(), data.k());
    let d = if k == 2 { 1 } else { k };
    let mut big_c = vec![0.0; d];
    for &y in &data.labels {
        for (a, b) in big_c.iter_mut().zip(label_code(k, y)) {
            *a += b;
        }
    }
    let nf = n as f64;
    let mut worst = 0.0f64;
    let mut mean_without = vec![0.0; p];
    for j in 0..n {
        let x = data.features.row(j);
        let c = label_code(k, data.labels[j]);
        for ((mw, m), xi) in mean_without.iter_mut().zip(mean).zip(x) {
            *mw = (nf * m - xi) / (nf - 1.0);
        }
        // Δ = c_j x_jᵀ - C x̄ᵀ + (C - c_j) x̄'ᵀ
        let mut sq = 0.0;
        for r in 0..d {
            for i in 0..p {
                let v = c[r] * x[i] - big_c[r] * mean[i] + (big_c[r] - c[r]) * mean_without[i];
                sq += v * v;
            }
        }
        worst = worst.max(sq.sqrt());
    }
    worst
}

/// `max_k ‖±B_k - M_k‖∞` over the basis columns, each sign-aligned.
pub fn projection_beta0(proj: &Projection, frame: &EtfFrame) -> Result<f64> {
    if proj.p() != frame.p() {
        return Err(Error::DimensionMismatch { expected: frame.p(), found: proj.p() });
    }
    if proj.r() > frame.k() {
        return Err(Error::DimensionMismatch { expected: frame.k(), found: proj.r() });
    }
    let mut worst = 0.0f64;
    for k in 0..proj.r() {
        let m = frame.prototype_ref(k);
        let col = proj.basis.column(k);
        let plus = col.iter().zip(m).fold(0.0f64, |a, (b, t)| a.max((b - t).abs()));
        let minus = col.iter().zip(m).fold(0.0f64, |a, (b, t)| a.max((-b - t).abs()));
        worst = worst.max(plus.min(minus));
    }
    Ok(worst)
}

/// Measure β₀ and store it on the projection.
pub fn with_beta0(mut proj: Projection, frame: &EtfFrame) -> Result<Projection> {
    proj.beta0_estimate = Some(projection_beta0(&proj, frame)?);
    Ok(proj)
}

/// Norm of `Bᵀx` for every row, used when streaming data.
pub fn projected_row_norms(proj: &Projection, rows: &Matrix) -> Vec<f64> {
    let out = transposed(&proj.basis) * transposed(rows);
    out.column_iter().map(|c| c.norm()).collect()
}
