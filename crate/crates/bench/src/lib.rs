//! Shared fixtures for the benchmarks.

use ddsc_core::{ModeLibrary, Scenario, ScenarioConfig, Tolerance};

/// The default five-mode scenario with its synthesised library.
pub fn default_scenario() -> (Scenario, ModeLibrary) {
    let scenario = Scenario::generate(&ScenarioConfig::default()).expect("default scenario");
    let library = scenario.library(&Tolerance::default()).expect("default library");
    (scenario, library)
}
