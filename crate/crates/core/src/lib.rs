//! Data-driven stabilization of switched linear systems whose modes and
//! switching signal are unknown: gain synthesis from recorded data, online
//! mode detection, the switching controller, simulation and stability
//! analysis.

pub mod analysis;
pub mod controller;
pub mod data;
pub mod detection;
pub mod error;
pub mod linalg;
pub mod lmi;
pub mod plant;
pub mod scenario;
pub mod simulate;

pub use analysis::{AnalysisReport, StabilityParams, TimerPair};
pub use controller::{ModeLibrary, Phase, ResetPolicy, SwitchedController};
pub use data::{DataMatrices, MatchSet};
pub use error::{Error, Result};
pub use linalg::{Matrix, MatrixRecord, Tolerance, Vector};
pub use lmi::{GainCertificate, GainRecord, GrowthParams};
pub use plant::{LinearMode, SwitchedPlant, SwitchingSignal};
pub use scenario::{Manifest, PlantSpec, Scenario, ScenarioConfig};
pub use simulate::{RunLog, RunOptions, StepRecord};
