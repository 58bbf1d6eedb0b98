use ncdp_core::analysis::{beta_histogram, collapse_report, CollapseReport};
use ncdp_core::bounds::{
    deterministic_shift_bound, gd_error_bound, noisygd_error_bound, pca_sample_complexity, perfect_nc_error,
    projected_constant, projected_multi_iter_bound, random_init_error, table1_sample_complexity, BoundQuery,
    Table1Setting,
};
use ncdp_core::error::Error;
use ncdp_core::geometry::make_etf;
use ncdp_core::linalg::Matrix;
use ncdp_core::mitigations::{fit_projection, normalize_dataset, project_dataset, projection_beta0, Projection, ProjectionMethod};
use ncdp_core::privacy::{dp_to_zcdp, zcdp_to_dp};
use ncdp_core::rng::seeded_rng;
use ncdp_core::synth::{adversarial_shift, imbalanced_gradient_offset, sample_dataset, LabeledDataset, ShiftModel};
use ncdp_core::trainer::{ce_gradient, ce_loss, LinearHead};
use rand::Rng as _;

/// Complementary error function (Chebyshev fit, relative error below 1.2e-7).
fn erfc_cheb(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807 + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

fn phi_oracle(x: f64) -> f64 {
    0.5 * erfc_cheb(-x / std::f64::consts::SQRT_2)
}

#[test]
fn dp_to_zcdp_matches_bisection() {
    for eps in [0.1, 1.0, 2.0, 8.0] {
        for delta in [1e-3, 1e-5, 1e-7] {
            let target = |rho: f64| rho + 2.0 * (rho * (1.0 / delta as f64).ln()).sqrt() - eps;
            let (mut lo, mut hi) = (0.0f64, eps);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if target(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let rho = dp_to_zcdp(eps, delta).unwrap();
            assert!((rho - lo).abs() <= 1e-12 * lo.max(1e-300), "eps={eps} delta={delta}");
        }
    }
}

#[test]
fn dp_example_budget() {
    let rho = dp_to_zcdp(1.0, 1e-4).unwrap();
    // The quoted 0.02578 is rounded; the exact value is 0.0257628.
    assert!((rho - 0.02578).abs() < 5e-5);
    assert!((rho - 0.025_762_838_5).abs() < 1e-10);
    assert!((zcdp_to_dp(rho, 1e-4).unwrap() - 1.0).abs() < 1e-12);
}

fn random_instance(seed: u64, n: usize, p: usize, k: usize) -> (LinearHead, LabeledDataset) {
    let mut rng = seeded_rng(seed);
    let w = Matrix::from_vec(k, p, (0..k * p).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.rotate_left(seed as usize % n);
    (LinearHead::multiclass(w), LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), labels, k).unwrap())
}

#[test]
fn ce_gradient_matches_finite_differences() {
    let h = 1e-5;
    for seed in 0..20u64 {
        let (n, p, k) = (4 + (seed as usize * 7) % 29, 2 + (seed as usize * 5) % 15, 2 + seed as usize % 4);
        let (head, data) = random_instance(seed, n, p, k);
        let grad = ce_gradient(&head, &data).unwrap();
        for i in 0..k {
            for j in 0..p {
                let mut plus = head.clone();
                let mut minus = head.clone();
                let w = head.weights().get(i, j);
                plus.weights_mut().set(i, j, w + h);
                minus.weights_mut().set(i, j, w - h);
                let fd = (ce_loss(&plus, &data).unwrap() - ce_loss(&minus, &data).unwrap()) / (2.0 * h);
                let g = grad.get(i, j);
                assert!((g - fd).abs() <= 1e-6 * g.abs().max(1.0), "seed {seed} ({i},{j}): {g} vs {fd}");
            }
        }
    }
}

#[test]
fn random_init_matches_trapezoid_quadrature() {
    let (n, rho, g) = (4usize, 0.125f64, 1.0f64);
    let nodes = 100_000;
    let (a, b) = (-8.0f64, 8.0f64);
    let h = (b - a) / (nodes - 1) as f64;
    let f = |xi: f64| {
        let mu = -xi - n as f64 * (-xi).exp() / (1.0 + (-xi).exp());
        let density = (-0.5 * xi * xi).exp() / (2.0 * std::f64::consts::PI).sqrt();
        phi_oracle((2.0 * rho).sqrt() * mu / g) * density
    };
    let mut quad = 0.5 * (f(a) + f(b));
    for i in 1..nodes - 1 {
        quad += f(a + i as f64 * h);
    }
    quad *= h;
    let r = random_init_error(n, rho, g, 100_000, 17).unwrap();
    let se = r.stderr.unwrap();
    assert!((r.error_bound - quad).abs() <= 3.0 * se, "{} vs {quad} (se {se})", r.error_bound);
}

#[test]
fn random_init_limits() {
    let zero = random_init_error(0, 1.0, 1.0, 100_000, 3).unwrap();
    assert!((zero.error_bound - 0.5).abs() < 3.0 * zero.stderr.unwrap());
    let large = random_init_error(100_000, 1.0, 1.0, 10_000, 3).unwrap();
    assert!(large.error_bound < 1e-12);
}

#[test]
fn adversarial_shift_beats_sign_enumeration() {
    let mut rng = seeded_rng(99);
    for trial in 0..40 {
        let p = 2 + trial % 11;
        let beta = rng.random_range(0.01..0.5);
        let x: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (head, k) = if trial % 2 == 0 {
            (LinearHead::binary((0..p).map(|_| rng.random_range(-1.0..1.0)).collect()), 2)
        } else {
            let k = 3 + trial % 3;
            let w = Matrix::from_vec(k, p, (0..k * p).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            (LinearHead::multiclass(w), k)
        };
        let y = trial % k;
        let margin = |v: &[f64]| -> f64 {
            let z: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + b).collect();
            let s = head.scores(&z);
            if head.is_reparameterized() {
                let ys = if y == 0 { 1.0 } else { -1.0 };
                ys * s[0]
            } else {
                (0..k).filter(|&j| j != y).map(|j| s[y] - s[j]).fold(f64::INFINITY, f64::min)
            }
        };
        let v = adversarial_shift(&head, &x, y, beta).unwrap();
        assert!(v.iter().all(|c| c.abs() <= beta));
        let best = (0..1u32 << p)
            .map(|mask| {
                let s: Vec<f64> = (0..p).map(|i| if mask >> i & 1 == 1 { beta } else { -beta }).collect();
                margin(&s)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(margin(&v) <= best + 1e-12, "trial {trial}: {} > {best}", margin(&v));
    }
}

#[test]
fn gd_hand_arithmetic() {
    let q = BoundQuery { n: 1000, p: 100, k: 2, beta: 0.2, ..BoundQuery::default() };
    let want = (-1000.0f64 / (2.0 * (16.0 + 4.0 / 3.0))).exp();
    let got = gd_error_bound(&q).unwrap().error_bound;
    assert!((got - want).abs() <= 1e-12 * want);
    assert!((got - 3.0e-13).abs() < 0.2e-13);
    let indep = gd_error_bound(&BoundQuery { independent_coordinates: true, ..q }).unwrap().error_bound;
    assert!(indep < 1e-300);
    assert_eq!(gd_error_bound(&BoundQuery { n: 2, p: 7, k: 2, ..BoundQuery::default() }).unwrap().error_bound, 0.0);
}

#[test]
fn noisygd_hand_arithmetic() {
    let q = BoundQuery { n: 4, p: 10, k: 2, rho: Some(0.125), ..BoundQuery::default() };
    let b = noisygd_error_bound(&q).unwrap();
    assert!((b.error_bound - (-1.0f64).exp()).abs() < 1e-15);
    assert!(phi_oracle(-1.0) <= b.error_bound);

    // Shift term: exp(-100 / (8 (1 + 1/3))) with β⁴p² = 1 and β²p/3 = 1/3.
    let q = BoundQuery { n: 100, p: 100, k: 2, beta: 0.1, rho: Some(1.0), ..BoundQuery::default() };
    let want = (-1250.0f64).exp() + (-100.0f64 / (8.0 * (1.0 + 1.0 / 3.0))).exp();
    let got = noisygd_error_bound(&q).unwrap().error_bound;
    assert!((got - want).abs() <= 1e-12 * want);
    assert!((got - 8.48e-5).abs() < 0.01e-5);
}

#[test]
fn deterministic_hand_arithmetic() {
    let q = BoundQuery { n: 10, p: 100, k: 2, beta: 0.05, rho: Some(0.125), ..BoundQuery::default() };
    let b = deterministic_shift_bound(&q).unwrap();
    assert!((b.error_bound - (-9.0f64).exp()).abs() < 1e-15);
    let zero = BoundQuery { n: 3, p: 100, k: 2, rho: Some(0.5), ..BoundQuery::default() };
    assert!((deterministic_shift_bound(&zero).unwrap().error_bound - (-9.0f64).exp()).abs() < 1e-15);
    let edge = BoundQuery { beta: 0.1, ..q };
    let v = deterministic_shift_bound(&edge).unwrap();
    assert!(v.vacuous && v.error_bound == 1.0);
}

#[test]
fn projected_constant_factor() {
    // (1 + 1/8)/(1 - 1/8) · (1/3) = 3/7, times (1 + e^0)² / 1 = 4 at R = 0, β = 0.
    assert!((projected_constant(3, 0.0, 0.0) - 12.0 / 7.0).abs() < 1e-14);
    let q = BoundQuery {
        n: 20, p: 10, k: 2, rho: Some(1.0), radius: Some(0.0), steps: Some(1), tail: Some(800.0),
        ..BoundQuery::default()
    };
    let c = 3.0 * (1.0 / 3.0) * 4.0;
    let sigma_sq = 1.0 / 2.0;
    let want = (-400.0f64 / (c * c * sigma_sq)).exp() + (-800.0f64).exp();
    let got = projected_multi_iter_bound(&q).unwrap();
    assert!((got.error_bound - want).abs() <= 1e-12 * want);
    let missing = BoundQuery { tail: None, ..q };
    assert!(projected_multi_iter_bound(&missing).is_err());
}

#[test]
fn perfect_closed_forms() {
    let b = perfect_nc_error(4, 2, None, 2.0).unwrap();
    assert!((b.error_bound - 0.158655).abs() < 1e-6);
    assert!((b.error_bound - phi_oracle(-1.0)).abs() < 1e-6);
    let b = perfect_nc_error(100, 10, None, 10.0).unwrap();
    let arg = (100.0 / 100.0) * (1.0 + 8.0 / 90.0);
    assert!((b.raw_bound - 9.0 * phi_oracle(-arg)).abs() < 1e-6);
    assert!(perfect_nc_error(10, 4, Some(3), 1.0).is_err());
}

#[test]
fn table1_cells() {
    let q = BoundQuery { n: 1, p: 1000, k: 10, beta_tilde: 0.1, rho: Some(1.0), gamma: Some(0.01), ..BoundQuery::default() };
    let perfect = table1_sample_complexity(Table1Setting::PerfectNc, true, &q).unwrap();
    assert_eq!(perfect.sample_complexity, Some(5));
    assert!((perfect.raw_bound - 0.01).abs() < 1e-15 || perfect.raw_bound <= 1.0);
    assert_eq!(table1_sample_complexity(Table1Setting::PerfectNc, false, &q).unwrap().sample_complexity, Some(10));
    let adv = BoundQuery { gamma: Some(0.1), ..q };
    let want = 100.0 * (10f64.ln()).sqrt() / 2f64.sqrt();
    assert!((want - 107.3).abs() < 0.05);
    assert_eq!(table1_sample_complexity(Table1Setting::AdversarialTest, true, &adv).unwrap().sample_complexity, Some(108));
    assert!(matches!(
        table1_sample_complexity(Table1Setting::AdversarialTest, false, &adv),
        Err(Error::Unknown { .. })
    ));
}

#[test]
fn pca_complexity_constants() {
    let q = BoundQuery { n: 1, p: 400, k: 10, gamma: Some(0.01), rho: Some(1.0), ..BoundQuery::default() };
    let b = pca_sample_complexity(&q).unwrap();
    assert_eq!(b.sample_complexity, Some((200f64.ln()).sqrt().ceil() as u64));
    assert_eq!(b.companions["G"], 1.0);
    assert_eq!(b.companions["M"], 1.0);

    // β = 0.2, β₀ = 0.01, p = 400: M = 0.9801 - 0.8 - 1.01·4.2 - 4.2·(1 + 0.2 + 0.01 + 0.8) < 0.
    let (beta, b0, p) = (0.2, 0.01, 400.0);
    let m = (1.0 - b0) * (1.0 - b0) - p * beta * b0 - (1.0 + b0) * (beta + b0 * p)
        - (beta + b0 * p) * (1.0 + beta + b0 + beta * b0 * p);
    assert!(m < 0.0);
    let q = BoundQuery { beta, beta0: b0, ..q };
    assert!(matches!(pca_sample_complexity(&q), Err(Error::MitigationInsufficient { .. })));
}

#[test]
fn imbalance_gradient_examples() {
    let v = vec![0.1; 5];
    let g = imbalanced_gradient_offset(0.5, &v, 100).unwrap();
    assert_eq!(g, vec![50.0, 0.0, 0.0, 0.0, 0.0]);
    let g = imbalanced_gradient_offset(0.3, &v, 100).unwrap();
    let want = [52.0, 2.0, 2.0, 2.0, 2.0];
    for (a, b) in g.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(imbalanced_gradient_offset(1.0, &v, 100).is_err());
}

#[test]
fn stochastic_shift_is_centered() {
    let f = make_etf(6, 2, None, true).unwrap();
    let beta = 0.3;
    let d = sample_dataset(&f, 100_000, None, &ShiftModel::stochastic(beta), 5).unwrap();
    let se = beta / 3f64.sqrt() / (d.n() as f64).sqrt();
    for j in 0..6 {
        let mean: f64 = (0..d.n()).map(|i| d.features.get(i, j) - f.prototype_ref(d.labels[i])[j]).sum::<f64>() / d.n() as f64;
        assert!(mean.abs() < 5.0 * se, "coordinate {j}: {mean}");
    }
}

#[test]
fn balanced_offset_cancels_exactly() {
    let f = make_etf(5, 2, None, true).unwrap();
    let v = vec![0.03, -0.07, 0.1, 0.02, -0.05];
    for n in [2usize, 10, 64] {
        let d = sample_dataset(&f, n, None, &ShiftModel::offset(v.clone(), 0.1), 1).unwrap();
        let out = normalize_dataset(&d).unwrap();
        for i in 0..n {
            let s = if out.data.labels[i] == 0 { 1.0 } else { -1.0 };
            let row = out.data.features.row(i);
            assert_eq!(row[0], s);
            assert!(row[1..].iter().all(|x| *x == 0.0));
        }
        assert_eq!(out.sensitivity, n as f64 / (n - 1) as f64);
        let again = normalize_dataset(&out.data).unwrap();
        assert_eq!(again.data, out.data);
    }
}

#[test]
fn pca_recovers_dominant_direction() {
    // Second moment e1e1ᵀ + c I: rows ±e1 plus orthogonal ±√(cp)-scaled coordinates.
    let p = 6;
    let mut rows = Vec::new();
    for s in [1.0, -1.0] {
        for j in 1..p {
            for t in [1.0, -1.0] {
                let mut r = vec![0.0; p];
                r[0] = s;
                r[j] = t * 0.5;
                rows.push(r);
            }
        }
    }
    let labels = (0..rows.len()).map(|i| usize::from(i >= rows.len() / 2)).collect();
    let d = LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), labels, 2).unwrap();
    let proj = fit_projection(&d, ProjectionMethod::Pca, 1).unwrap();
    assert!((proj.basis.get(0, 0) - 1.0).abs() < 1e-10);
    let f = make_etf(p, 2, None, true).unwrap();
    assert!(projection_beta0(&proj, &f).unwrap() < 1e-10);
}

#[test]
fn beta0_examples() {
    let f = make_etf(3, 2, None, true).unwrap();
    let proj = |b: Vec<f64>| Projection { method: ProjectionMethod::Pca, basis: Matrix::from_vec(3, 1, b).unwrap(), beta0_estimate: None };
    assert!(projection_beta0(&proj(vec![1.0, 0.0, 0.0]), &f).unwrap() < 1e-15);
    assert!((projection_beta0(&proj(vec![1.0, 0.05, 0.0]), &f).unwrap() - 0.05).abs() < 1e-12);
    assert!(projection_beta0(&proj(vec![-1.0, 0.0, 0.0]), &f).unwrap() < 1e-15);
}

#[test]
fn projected_report_matches_projected_shifts() {
    let f = make_etf(8, 3, Some(4), false).unwrap();
    let d = sample_dataset(&f, 60, None, &ShiftModel::offset(vec![0.02; 8], 0.02), 4).unwrap();
    let basis = f.source();
    let b = Matrix::from_vec(8, 3, (0..8).flat_map(|i| (0..3).map(move |k| basis.column(k)[i])).collect()).unwrap();
    let proj = Projection { method: ProjectionMethod::ClassMean, basis: b, beta0_estimate: None };
    let projected = project_dataset(&d, &proj).unwrap();
    let r = collapse_report(&projected.data, 0.2).unwrap();
    // A common offset lies exactly on each class mean, so every β is zero.
    assert!(r.per_sample_beta.iter().all(|b| b.abs() < 1e-9));
    for c in 0..3 {
        let mean = r.class_means.row(c);
        let want = proj.apply(&d.features.row(d.labels.iter().position(|&y| y == c).unwrap()).to_vec());
        for (a, b) in mean.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn self_generated_report() {
    let f = make_etf(12, 4, Some(2), false).unwrap();
    let beta = 0.05;
    let d = sample_dataset(&f, 4000, None, &ShiftModel::stochastic(beta), 8).unwrap();
    let r = collapse_report(&d, 0.2).unwrap();
    assert!(r.nc_flag);
    assert!(r.per_class_beta_median.iter().all(|m| *m <= beta));
    let se = beta / 3f64.sqrt() / (1000f64).sqrt();
    for c in 0..4 {
        for (a, b) in r.class_means.row(c).iter().zip(f.prototype_ref(c)) {
            assert!((a - b).abs() < 5.0 * se);
        }
    }
    for i in 0..4 {
        assert!((r.cosine_matrix.get(i, i) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn histogram_uniform_split() {
    let mut rng = seeded_rng(12);
    let n = 10_000;
    let betas: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let report = CollapseReport {
        class_means: Matrix::zeros(1, 1),
        cosine_matrix: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
        cosine_offdiag_median: 0.0,
        per_sample_beta: betas,
        per_class_beta_median: vec![0.5],
        nc_flag: true,
        cosine_tolerance: 0.2,
        distance_to_negative_target: 0.0,
        distance_to_positive_target: 0.0,
        labels: vec![0; n],
    };
    let rows = beta_histogram(&report, 2).unwrap();
    let all: Vec<_> = rows.iter().filter(|r| r.class == "all").collect();
    let sd = (n as f64 * 0.25).sqrt();
    assert!((all[0].count as f64 - n as f64 / 2.0).abs() < 5.0 * sd);
    assert_eq!(all[0].count + all[1].count, n);
}
