//! Simplex equiangular tight frames.
//!
//! A frame with `K` prototypes in `R^p` is `M = sqrt(K/(K-1)) P (I - 11ᵀ/K)`
//! where `P` is `p x K` with orthonormal columns. Prototypes have unit norm
//! and pairwise inner product `-1/(K-1)`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::linalg::{axpy, dot, norm2, Matrix};
use crate::rng::seeded_rng;

/// Tolerance used by [`EtfFrame::check`].
pub const GEOMETRY_TOL: f64 = 1e-10;

/// A `p x K` matrix with orthonormal columns, stored as `K` column vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialOrthogonal {
    p: usize,
    columns: Vec<Vec<f64>>,
}

impl PartialOrthogonal {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.columns[k]
    }

    /// Max entry of `|PᵀP - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.columns.iter().enumerate() {
            for (j, b) in self.columns.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(a, b) - target).abs());
            }
        }
        worst
    }

    /// Seeded Gaussian draw, orthonormalized. A degenerate draw is retried
    /// with the next seed.
    pub fn random(p: usize, k: usize, seed: u64) -> Result<Self> {
        if k > p {
            return Err(Error::FrameDoesNotFit { p, k });
        }
        let mut s = seed;
        loop {
            let mut rng = seeded_rng(s);
            let mut cols: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..p).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            if orthonormalize(&mut cols) {
                return Ok(Self { p, columns: cols });
            }
            log::debug!("degenerate orthonormalization for seed {s}, retrying");
            s = s.wrapping_add(1);
        }
    }

    fn standard(p: usize, k: usize) -> Self {
        let columns = (0..k)
            .map(|j| {
                let mut c = vec![0.0; p];
                c[j] = 1.0;
                c
            })
            .collect();
        Self { p, columns }
    }

    /// Recover an orthonormal source for a frame. The frame determines `P`
    /// only up to the component along `P1`, which is filled in with a unit
    /// vector orthogonal to every prototype.
    fn from_prototypes(p: usize, protos: &[Vec<f64>]) -> Result<Self> {
        let k = protos.len();
        let u = complement_direction(p, protos)
            .ok_or_else(|| Error::Degenerate("no complement direction for frame".into()))?;
        let a = ((k as f64 - 1.0) / k as f64).sqrt();
        let c = 1.0 / (k as f64).sqrt();
        let columns = protos
            .iter()
            .map(|m| m.iter().zip(&u).map(|(v, ui)| a * v + c * ui).collect())
            .collect();
        Ok(Self { p, columns })
    }
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. Returns false if
/// any column collapses.
fn orthonormalize(cols: &mut [Vec<f64>]) -> bool {
    for j in 0..cols.len() {
        let (done, rest) = cols.split_at_mut(j);
        let v = &mut rest[0];
        let original = norm2(v);
        if original == 0.0 || !original.is_finite() {
            return false;
        }
        for _ in 0..2 {
            for q in done.iter() {
                let c = dot(q, v);
                axpy(-c, q, v);
            }
        }
        let n = norm2(v);
        if n <= 1e-8 * original {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= n);
    }
    true
}

/// A unit vector orthogonal to the span of `vectors`, tried along each
/// standard basis direction in turn.
fn complement_direction(p: usize, vectors: &[Vec<f64>]) -> Option<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let d = dot(b, &w);
                axpy(-d, b, &mut w);
            }
        }
        let n = norm2(&w);
        if n > 1e-8 {
            w.iter_mut().for_each(|x| *x /= n);
            basis.push(w);
        }
    }
    (0..p).find_map(|e| {
        let mut w = vec![0.0; p];
        w[e] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let d = dot(b, &w);
                axpy(-d, b, &mut w);
            }
        }
        let n = norm2(&w);
        (n > 1e-3).then(|| w.iter().map(|x| x / n).collect())
    })
}

/// A simplex ETF with its orthonormal source.
#[derive(Debug, Clone, PartialEq)]
pub struct EtfFrame {
    p: usize,
    /// Prototypes `M_k`, one per class.
    protos: Vec<Vec<f64>>,
    source: PartialOrthogonal,
}

/// Build a frame with `k` classes in dimension `p`.
///
/// `canonical` selects a fixed frame (`[e1, -e1]` for two classes, otherwise
/// the standard basis as source); otherwise the source is drawn from `seed`.
pub fn make_etf(p: usize, k: usize, seed: Option<u64>, canonical: bool) -> Result<EtfFrame> {
    if k < 2 {
        return Err(Error::TooFewClasses(k));
    }
    if k > p {
        return Err(Error::FrameDoesNotFit { p, k });
    }
    if canonical && k == 2 {
        // Source chosen so the formula yields exactly e1 and -e1.
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mut p1 = vec![0.0; p];
        let mut p2 = vec![0.0; p];
        p1[0] = h;
        p1[1] = h;
        p2[0] = -h;
        p2[1] = h;
        let mut e1 = vec![0.0; p];
        e1[0] = 1.0;
        let neg: Vec<f64> = e1.iter().map(|v| -v).collect();
        return Ok(EtfFrame {
            p,
            protos: vec![e1, neg],
            source: PartialOrthogonal { p, columns: vec![p1, p2] },
        });
    }
    let source = if canonical {
        PartialOrthogonal::standard(p, k)
    } else {
        let seed = seed.ok_or_else(|| invalid("seed", "a non-canonical frame needs a seed"))?;
        PartialOrthogonal::random(p, k, seed)?
    };
    Ok(EtfFrame::from_source(source))
}

impl EtfFrame {
    /// Apply the centering map to an orthonormal source.
    pub fn from_source(source: PartialOrthogonal) -> Self {
        let (p, k) = (source.p(), source.k());
        let scale = (k as f64 / (k as f64 - 1.0)).sqrt();
        let mut mean = vec![0.0; p];
        for c in &source.columns {
            axpy(1.0 / k as f64, c, &mut mean);
        }
        let protos = source
            .columns
            .iter()
            .map(|c| c.iter().zip(&mean).map(|(a, m)| scale * (a - m)).collect())
            .collect();
        Self { p, protos, source }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.protos.len()
    }

    pub fn source(&self) -> &PartialOrthogonal {
        &self.source
    }

    /// Prototype of class `k` (column `k` of `M`).
    pub fn prototype(&self, k: usize) -> Vec<f64> {
        self.protos[k].clone()
    }

    pub fn prototype_ref(&self, k: usize) -> &[f64] {
        &self.protos[k]
    }

    /// `M` as a `p x K` matrix.
    pub fn matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.p, self.k());
        for (j, c) in self.protos.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                m.set(i, j, *v);
            }
        }
        m
    }

    /// `MᵀM`.
    pub fn gram(&self) -> Matrix {
        let k = self.k();
        let mut g = Matrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                g.set(i, j, dot(&self.protos[i], &self.protos[j]));
            }
        }
        g
    }

    /// Verify unit norms, equal angles `-1/(K-1)`, zero column sum and
    /// orthonormality of the source, all within `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        let k = self.k() as f64;
        let g = self.gram();
        for i in 0..self.k() {
            for j in 0..self.k() {
                let target = if i == j { 1.0 } else { -1.0 / (k - 1.0) };
                let err = (g.get(i, j) - target).abs();
                if err > tol {
                    return Err(Error::Degenerate(format!(
                        "gram entry ({i},{j}) off by {err:e}"
                    )));
                }
            }
        }
        let mut sum = vec![0.0; self.p];
        for c in &self.protos {
            axpy(1.0, c, &mut sum);
        }
        if norm2(&sum) > tol {
            return Err(Error::Degenerate("prototypes do not sum to zero".into()));
        }
        if self.source.orthonormality_error() > tol {
            return Err(Error::Degenerate("source is not orthonormal".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    p: usize,
    #[serde(rename = "K")]
    k: usize,
    /// Row-major `p x K`.
    #[serde(rename = "M")]
    m: Vec<f64>,
}

impl Serialize for EtfFrame {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FrameJson { p: self.p, k: self.k(), m: self.matrix().into_vec() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for EtfFrame {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = FrameJson::deserialize(d)?;
        if raw.m.len() != raw.p * raw.k {
            return Err(D::Error::custom("M has the wrong number of entries"));
        }
        if raw.k < 2 || raw.k > raw.p {
            return Err(D::Error::custom("K must satisfy 2 <= K <= p"));
        }
        let protos: Vec<Vec<f64>> = (0..raw.k)
            .map(|j| (0..raw.p).map(|i| raw.m[i * raw.k + j]).collect())
            .collect();
        let source = PartialOrthogonal::from_prototypes(raw.p, &protos).map_err(D::Error::custom)?;
        let frame = EtfFrame { p: raw.p, protos, source };
        frame.check(1e-8).map_err(D::Error::custom)?;
        Ok(frame)
    }
}
