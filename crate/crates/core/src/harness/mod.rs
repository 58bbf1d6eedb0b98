//! Monte Carlo estimation of misclassification error and the experiment
//! presets built on it.

mod mc;
mod presets;
mod scenario;

pub use mc::{fit_scenario_projection, mc_error, mc_error_with, McOptions, RunSummary, TrialResult};
pub use presets::{
    dominance_scenario, fig4a_scenario, fig5_scenario, run_preset, CurvePoint, DominanceGrid, DominanceRow, Preset,
    PresetOptions, PresetReport, Table1Row, TestNoise, FIG4A_CURVES,
};
pub use scenario::{alpha_weights, random_sign_offset, FrameSpec, Mitigation, PrivacySpec, Scenario, SensitivityRule};
