use ncdp_core::harness::{
    dominance_scenario, fig4a_scenario, mc_error, mc_error_with, run_preset, DominanceGrid, McOptions, Mitigation,
    Preset, PresetOptions, PrivacySpec, Scenario, TestNoise,
};
use ncdp_core::par::Execution;
use ncdp_core::synth::ShiftModel;
use ncdp_core::trainer::{HeadKind, Loss, TrainConfig};

fn shifted(trials: usize, seed: u64) -> Scenario {
    let mut s = Scenario::perfect(64, 4, 40, PrivacySpec::zcdp(0.05), trials, seed);
    s.train_shift = ShiftModel::stochastic(0.2);
    s.test_shift = ShiftModel::stochastic(0.2);
    s
}

#[test]
fn identical_across_execution_modes() {
    for s in [shifted(24, 3), {
        let mut s = shifted(24, 4);
        s.mitigation = Mitigation::Pca { r: 3 };
        s
    }] {
        let seq = mc_error_with(&s, &McOptions { execution: Execution::Sequential, ..McOptions::default() }).unwrap();
        let par = mc_error_with(&s, &McOptions { execution: Execution::Parallel, ..McOptions::default() }).unwrap();
        assert_eq!(serde_json::to_string(&seq).unwrap(), serde_json::to_string(&par).unwrap());
    }
}

#[test]
fn preset_csv_identical_across_execution_modes() {
    let run = |execution, dir: &std::path::Path| {
        let opts = PresetOptions {
            seed: 5,
            trials: Some(6),
            dims: Some(vec![16, 64]),
            out_dir: Some(dir.to_path_buf()),
            execution,
            ..PresetOptions::default()
        };
        run_preset(Preset::Fig4a, &opts).unwrap();
        std::fs::read(dir.join("fig4a.csv")).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run(Execution::Sequential, a.path()), run(Execution::Parallel, b.path()));
}

#[test]
fn stderr_shrinks_with_trials() {
    // Binary perfect collapse with error Φ(-1): a Bernoulli(0.159) per trial.
    let mut s = Scenario::perfect(2, 2, 4, PrivacySpec::zcdp(0.125), 20_000, 9);
    s.frame.canonical = true;
    s.train = TrainConfig { head: HeadKind::Binary, ..TrainConfig::default() };
    let small = mc_error(&s).unwrap();
    s.trials = 40_000;
    s.seed = 10;
    let large = mc_error(&s).unwrap();
    let ratio = large.error_stderr / small.error_stderr;
    let target = std::f64::consts::FRAC_1_SQRT_2;
    assert!((ratio - target).abs() <= 0.1, "ratio {ratio}");
}

#[test]
fn result_embeds_scenario_and_bound() {
    let s = dominance_scenario("noisygd", 32, 0.05, 16, Some(1.0), 2, 50, 1).unwrap();
    let r = mc_error(&s).unwrap();
    assert_eq!(r.scenario, s);
    assert_eq!(r.trial_seeds.len(), 50);
    let b = r.bound.as_ref().expect("a bound applies");
    assert!(b.formula_id.contains("noisygd"));
    assert!((0.0..=1.0).contains(&r.accuracy_mean));

    let json = serde_json::to_string(&r).unwrap();
    let back: ncdp_core::harness::TrialResult = serde_json::from_str(&json).unwrap();
    assert_eq!(back.scenario, s);
}

#[test]
fn scenario_file_roundtrip_reproduces() {
    let s = fig4a_scenario("imbalance+offset", 32, 8, 2, TestNoise::Uniform).unwrap();
    let back: Scenario = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
    assert_eq!(mc_error(&s).unwrap(), mc_error(&back).unwrap());
}

#[test]
fn noiseless_losses_agree_on_collapsed_data() {
    for loss in [Loss::CrossEntropy, Loss::Squared] {
        let mut s = Scenario::perfect(12, 5, 25, PrivacySpec::nonprivate(), 3, 1);
        s.train = TrainConfig::default().with_loss(loss);
        assert_eq!(mc_error(&s).unwrap().error_mean, 0.0);
    }
}

#[test]
fn small_dominance_grid_runs() {
    let grid = DominanceGrid { n: vec![8], beta: vec![0.0, 0.1], p: vec![16], rho: vec![1.0], k: vec![2] };
    let opts = PresetOptions { seed: 3, trials: Some(200), grid: Some(grid), ..PresetOptions::default() };
    let report = run_preset(Preset::BoundDominance, &opts).unwrap();
    for theorem in ["gd", "noisygd", "deterministic", "perfect-collapse", "perfect-collapse-sqrt2"] {
        assert!(report.dominance.iter().any(|r| r.theorem == theorem), "{theorem}");
    }
    assert!(report.dominance.iter().all(|r| r.mc_error >= 0.0 && r.bound <= 1.0));
}

#[test]
fn table1_grid_preset() {
    let report = run_preset(Preset::Table1Grid, &PresetOptions::default()).unwrap();
    let cell = report
        .table1
        .iter()
        .find(|r| r.setting == "perfect-NC" && r.private && r.gamma == 0.01 && r.rho == Some(1.0))
        .unwrap();
    assert_eq!(cell.sample_complexity, 5);
}
