//! Empirical collapse diagnostics: class means, their cosines, and the
//! distribution of per-sample deviations from the class mean.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cosine, norm2, Matrix};
use crate::stats::lower_median;
use crate::synth::LabeledDataset;

/// Default tolerance on off-diagonal cosines.
pub const DEFAULT_COSINE_TOLERANCE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    /// `K × p` matrix of class means.
    pub class_means: Matrix,
    pub cosine_matrix: Matrix,
    pub cosine_offdiag_median: f64,
    /// `‖x_i - mean_{y_i}‖∞` per row, in input order.
    pub per_sample_beta: Vec<f64>,
    pub per_class_beta_median: Vec<f64>,
    /// Every off-diagonal cosine lies within tolerance of `-1/(K-1)`.
    pub nc_flag: bool,
    pub cosine_tolerance: f64,
    /// Median distance of off-diagonal cosines to `-1/(K-1)`.
    pub distance_to_negative_target: f64,
    /// Median distance of off-diagonal cosines to `+1/(K-1)`.
    pub distance_to_positive_target: f64,
    pub labels: Vec<usize>,
}

impl CollapseReport {
    pub fn k(&self) -> usize {
        self.class_means.rows()
    }
}

/// Per-class means, shifted by each class's first row so identical rows
/// reproduce their value exactly.
fn class_means(data: &LabeledDataset) -> Matrix {
    let (k, p) = (data.k(), data.p());
    let mut anchor: Vec<Option<usize>> = vec![None; k];
    let mut acc = Matrix::zeros(k, p);
    for i in 0..data.n() {
        let y = data.labels[i];
        let a = *anchor[y].get_or_insert(i);
        let (x, x0) = (data.features.row(i), data.features.row(a));
        for ((s, v), v0) in acc.row_mut(y).iter_mut().zip(x).zip(x0) {
            *s += v - v0;
        }
    }
    for c in 0..k {
        if let Some(a) = anchor[c] {
            let inv = 1.0 / data.class_counts[c] as f64;
            let x0 = data.features.row(a).to_vec();
            for (s, v0) in acc.row_mut(c).iter_mut().zip(x0) {
                *s = v0 + *s * inv;
            }
        }
    }
    acc
}

/// Class means, cosine matrix and per-sample shifts.
pub fn collapse_report(data: &LabeledDataset, cosine_tolerance: f64) -> Result<CollapseReport> {
    if !(cosine_tolerance.is_finite() && cosine_tolerance >= 0.0) {
        return Err(invalid("cosine_tolerance", format!("must be non-negative, got {cosine_tolerance}")));
    }
    let k = data.k();
    if data.n() == 0 {
        return Err(Error::Empty);
    }
    if let Some(c) = data.class_counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(c));
    }
    let means = class_means(data);
    for c in 0..k {
        if norm2(means.row(c)) == 0.0 {
            return Err(Error::Degenerate(format!("class {c} has a zero mean")));
        }
    }

    let mut cos = Matrix::zeros(k, k);
    let mut offdiag = Vec::with_capacity(k * (k - 1));
    for i in 0..k {
        cos.set(i, i, 1.0);
        for j in 0..i {
            let c = cosine(means.row(i), means.row(j));
            cos.set(i, j, c);
            cos.set(j, i, c);
            offdiag.push(c);
            offdiag.push(c);
        }
    }
    let target = if k > 1 { 1.0 / (k - 1) as f64 } else { 0.0 };
    let nc_flag = offdiag.iter().all(|&c| (c + target).abs() <= cosine_tolerance);
    let dist = |t: f64| {
        let d: Vec<f64> = offdiag.iter().map(|&c| (c - t).abs()).collect();
        lower_median(&d).unwrap_or(0.0)
    };

    let per_sample_beta: Vec<f64> = (0..data.n())
        .map(|i| {
            let y = data.labels[i];
            data.features
                .row(i)
                .iter()
                .zip(means.row(y))
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        })
        .collect();
    let mut by_class: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (b, &y) in per_sample_beta.iter().zip(&data.labels) {
        by_class[y].push(*b);
    }
    let per_class_beta_median = by_class.iter().map(|v| lower_median(v).unwrap_or(0.0)).collect();

    Ok(CollapseReport {
        class_means: means,
        cosine_matrix: cos,
        cosine_offdiag_median: lower_median(&offdiag).unwrap_or(0.0),
        per_sample_beta,
        per_class_beta_median,
        nc_flag,
        cosine_tolerance,
        distance_to_negative_target: dist(-target),
        distance_to_positive_target: dist(target),
        labels: data.labels.clone(),
    })
}

/// One histogram bin. `class` is the class index or `"all"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
    pub class: String,
}

/// Equal-width histogram of the shifts over `[0, max β]`, one block per
/// class followed by an `all` block.
pub fn beta_histogram(report: &CollapseReport, bins: usize) -> Result<Vec<HistogramRow>> {
    if bins == 0 {
        return Err(invalid("bins", "must be at least 1"));
    }
    if report.per_sample_beta.is_empty() {
        return Err(Error::Empty);
    }
    let max = report.per_sample_beta.iter().copied().fold(0.0, f64::max);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 / bins as f64 };
    let bin_of = |b: f64| {
        if max == 0.0 {
            0
        } else {
            ((b / width) as usize).min(bins - 1)
        }
    };
    let k = report.k();
    let mut counts = vec![vec![0usize; bins]; k + 1];
    for (&b, &y) in report.per_sample_beta.iter().zip(&report.labels) {
        let i = bin_of(b);
        counts[y][i] += 1;
        counts[k][i] += 1;
    }
    let mut rows = Vec::with_capacity((k + 1) * bins);
    for (c, block) in counts.iter().enumerate() {
        let class = if c == k { "all".to_string() } else { c.to_string() };
        for (i, &count) in block.iter().enumerate() {
            rows.push(HistogramRow {
                bin_low: width * i as f64,
                bin_high: width * (i + 1) as f64,
                count,
                class: class.clone(),
            });
        }
    }
    Ok(rows)
}

/// Writes histogram rows as CSV with header `bin_low,bin_high,count,class`.
pub fn write_histogram(rows: &[HistogramRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_etf;
    use crate::synth::{sample_dataset, ShiftModel};

    #[test]
    fn perfect_data() {
        let f = make_etf(5, 3, None, true).unwrap();
        let d = sample_dataset(&f, 30, None, &ShiftModel::none(), 1).unwrap();
        let r = collapse_report(&d, DEFAULT_COSINE_TOLERANCE).unwrap();
        assert!(r.nc_flag);
        assert!(r.per_sample_beta.iter().all(|&b| b == 0.0));
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { -0.5 };
                assert!((r.cosine_matrix.get(i, j) - want).abs() < 1e-12);
            }
        }
        let h = beta_histogram(&r, 4).unwrap();
        let all: Vec<_> = h.iter().filter(|row| row.class == "all").collect();
        assert_eq!(all[0].count, 30);
        assert!(all[1..].iter().all(|row| row.count == 0));
    }

    #[test]
    fn zero_bins() {
        let f = make_etf(3, 2, None, true).unwrap();
        let d = sample_dataset(&f, 4, None, &ShiftModel::none(), 1).unwrap();
        let r = collapse_report(&d, 0.2).unwrap();
        assert!(beta_histogram(&r, 0).is_err());
    }

    #[test]
    fn csv_header() {
        let f = make_etf(3, 2, None, true).unwrap();
        let d = sample_dataset(&f, 4, None, &ShiftModel::none(), 1).unwrap();
        let r = collapse_report(&d, 0.2).unwrap();
        let mut buf = Vec::new();
        write_histogram(&beta_histogram(&r, 2).unwrap(), &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("bin_low,bin_high,count,class\n"));
    }
}
