//! Scenario configuration, generation of a plant with its initialization
//! data, assumption audits, and the JSON files that tie them together.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::controller::{compatible_pairs, ModeLibrary, ResetPolicy};
use crate::data::DataMatrices;
use crate::error::{Error, Result};
use crate::linalg::{is_controllable, Matrix, MatrixRecord, Tolerance, Vector};
use crate::lmi::{synth_gain, GainCertificate, GainRecord};
use crate::plant::{gen_init_data, gen_modes, gen_modes_from_seeds, mode_seed, random_initial_state, LinearMode, SwitchedPlant, SwitchingSignal};

fn default_range() -> (f64, f64) {
    (0.5, 1.1)
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    /// Transitions recorded per mode before operation.
    pub t_init: usize,
    pub lambda: f64,
    pub u_max: f64,
    pub signal: SwitchingSignal,
    pub horizon: usize,
    pub seed: u64,
    #[serde(default)]
    pub reset_policy: ResetPolicy,
    /// Spectral radii of the generated `A_i` are drawn from this range.
    #[serde(default = "default_range")]
    pub spectral_range: (f64, f64),
    /// Scale of the random initial state of each run.
    #[serde(default = "one")]
    pub x0_scale: f64,
    /// Scale of the initial state and inputs of the recorded trajectories.
    #[serde(default = "one")]
    pub data_scale: f64,
    /// Explicit per-mode generator seeds; repeating one repeats the mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode_seeds: Option<Vec<u64>>,
}

impl Default for ScenarioConfig {
    /// Five modes of a 5-state, 3-input system, seven recorded transitions
    /// per mode, decay rate 0.8, unit input bound and a switch every 8 steps
    /// on average.
    fn default() -> Self {
        Self {
            n: 5,
            m: 3,
            p: 5,
            t_init: 7,
            lambda: 0.8,
            u_max: 1.0,
            signal: SwitchingSignal::Adaptive { mean_dwell: 8.0 },
            horizon: 100,
            seed: 0,
            reset_policy: ResetPolicy::NextState,
            spectral_range: default_range(),
            x0_scale: 1.0,
            data_scale: 1.0,
            mode_seeds: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Schema(msg));
        if self.n == 0 || self.m == 0 || self.p == 0 {
            return bad(format!("dimensions must be positive (n={}, m={}, p={})", self.n, self.m, self.p));
        }
        if self.t_init == 0 {
            return bad("t_init must be at least 1".into());
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("lambda {} not in (0, 1)", self.lambda));
        }
        if !(self.u_max > 0.0 && self.u_max.is_finite()) {
            return bad(format!("u_max {} must be positive", self.u_max));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        let (lo, hi) = self.spectral_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("spectral_range ({lo}, {hi}) is not a positive interval"));
        }
        if !(self.x0_scale >= 0.0 && self.x0_scale.is_finite()) || !(self.data_scale > 0.0 && self.data_scale.is_finite()) {
            return bad("scales must be finite, data_scale positive".into());
        }
        if self.mode_seeds.as_ref().is_some_and(|s| s.len() != self.p) {
            return bad("mode_seeds must list one seed per mode".into());
        }
        self.signal
            .validate(self.p)
            .map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Initial state of run `seed`.
    pub fn initial_state(&self, seed: u64) -> Vector {
        random_initial_state(self.n, self.x0_scale, seed)
    }
}

/// Seed of mode `i`'s recorded trajectory.
pub fn data_seed(seed: u64, i: usize) -> u64 {
    mode_seed(seed ^ 0xda7a_da7a_da7a_da7a, i)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub plant: SwitchedPlant,
    pub init: Vec<DataMatrices>,
}

impl Scenario {
    pub fn generate(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let ScenarioConfig { n, m, p, .. } = *config;
        let modes = match &config.mode_seeds {
            Some(seeds) => gen_modes_from_seeds(seeds, n, m, config.spectral_range)?,
            None => gen_modes(config.seed, n, m, p, config.spectral_range)?,
        };
        let init = modes
            .iter()
            .enumerate()
            .map(|(i, md)| {
                gen_init_data(
                    md,
                    config.t_init,
                    data_seed(config.seed, i),
                    config.data_scale,
                    config.data_scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            plant: SwitchedPlant::new(modes, config.signal.clone())?,
            init,
        })
    }

    pub fn library(&self, tol: &Tolerance) -> Result<ModeLibrary> {
        ModeLibrary::build(self.init.clone(), self.config.lambda, tol)
    }
}

/// Outcome of checking the two standing assumptions on a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionAudit {
    /// Per mode: its data certify a gain at the configured decay rate.
    pub informative: Vec<bool>,
    pub controllable: Vec<bool>,
    /// Mode pairs whose recorded data admit a common system.
    pub compatible_pairs: Vec<(usize, usize)>,
}

impl AssumptionAudit {
    pub fn informativity_holds(&self) -> bool {
        self.informative.iter().all(|&b| b)
    }

    pub fn separation_holds(&self) -> bool {
        self.controllable.iter().all(|&b| b) && self.compatible_pairs.is_empty()
    }
}

pub fn audit_assumptions(
    modes: &[LinearMode],
    init: &[DataMatrices],
    lambda: f64,
    tol: &Tolerance,
) -> Result<AssumptionAudit> {
    let informative = init
        .par_iter()
        .map(|d| match synth_gain(d, lambda, tol, tol.psd_margin) {
            Ok(_) => Ok(true),
            Err(Error::NotInformative { .. } | Error::SynthesisInconclusive(_)) => Ok(false),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    let controllable = modes
        .iter()
        .map(|md| is_controllable(&md.a, &md.b, tol))
        .collect::<Result<Vec<_>>>()?;
    Ok(AssumptionAudit {
        informative,
        controllable,
        compatible_pairs: compatible_pairs(init, tol)?,
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path)?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRecord {
    pub a: MatrixRecord,
    pub b: MatrixRecord,
}

/// Ground-truth plant: dimensions, row-major mode matrices, signal, seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub seed: u64,
    pub signal: SwitchingSignal,
    pub modes: Vec<ModeRecord>,
}

impl PlantSpec {
    pub fn from_plant(plant: &SwitchedPlant, seed: u64) -> Self {
        Self {
            n: plant.n(),
            m: plant.m(),
            p: plant.p(),
            seed,
            signal: plant.signal.clone(),
            modes: plant
                .modes
                .iter()
                .map(|md| ModeRecord {
                    a: MatrixRecord::from(&md.a),
                    b: MatrixRecord::from(&md.b),
                })
                .collect(),
        }
    }

    pub fn to_plant(&self) -> Result<SwitchedPlant> {
        let modes = self
            .modes
            .iter()
            .map(|r| LinearMode::new(Matrix::try_from(&r.a)?, Matrix::try_from(&r.b)?))
            .collect::<Result<Vec<_>>>()?;
        let plant = SwitchedPlant::new(modes, self.signal.clone())
            .map_err(|e| Error::Schema(e.to_string()))?;
        if (plant.n(), plant.m(), plant.p()) != (self.n, self.m, self.p) {
            return Err(Error::Schema("plant dimensions disagree with its matrices".into()));
        }
        Ok(plant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub mode: usize,
    pub trajectory: String,
}

/// Binds mode indices to their trajectory files; paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub config: ScenarioConfig,
    pub plant: String,
    pub modes: Vec<TrajectoryEntry>,
}

pub const PLANT_FILE: &str = "plant.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GAINS_FILE: &str = "gains.json";

pub fn trajectory_file(mode: usize) -> String {
    format!("mode_{mode}.csv")
}

impl Manifest {
    pub fn from_file(path: &Path) -> Result<(Self, PathBuf)> {
        let manifest: Self = read_json(path)?;
        manifest.config.validate()?;
        if manifest.modes.len() != manifest.config.p
            || manifest.modes.iter().enumerate().any(|(i, e)| e.mode != i)
        {
            return Err(Error::Schema("manifest must list modes 0..p in order".into()));
        }
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, dir))
    }

    pub fn load_init(&self, dir: &Path) -> Result<Vec<DataMatrices>> {
        self.modes
            .iter()
            .map(|e| {
                let f = File::open(dir.join(&e.trajectory))?;
                DataMatrices::read_csv(BufReader::new(f), self.config.n, self.config.m)
            })
            .collect()
    }

    pub fn load_plant(&self, dir: &Path) -> Result<SwitchedPlant> {
        read_json::<PlantSpec>(&dir.join(&self.plant))?.to_plant()
    }
}

/// Write `plant.json`, one trajectory CSV per mode and `manifest.json`.
pub fn write_scenario(scenario: &Scenario, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let seed = scenario.config.seed;
    write_json(&dir.join(PLANT_FILE), &PlantSpec::from_plant(&scenario.plant, seed))?;
    let mut modes = Vec::with_capacity(scenario.init.len());
    for (i, d) in scenario.init.iter().enumerate() {
        let name = trajectory_file(i);
        d.write_csv(BufWriter::new(File::create(dir.join(&name))?))?;
        modes.push(TrajectoryEntry {
            mode: i,
            trajectory: name,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    write_json(
        &path,
        &Manifest {
            seed,
            config: scenario.config.clone(),
            plant: PLANT_FILE.into(),
            modes,
        },
    )?;
    Ok(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsFile {
    pub seed: u64,
    pub lambda: f64,
    pub gains: Vec<GainRecord>,
}

impl GainsFile {
    pub fn new(seed: u64, library: &ModeLibrary) -> Self {
        Self {
            seed,
            lambda: library.lambda(),
            gains: library.certs().iter().map(GainRecord::from).collect(),
        }
    }

    pub fn certs(&self) -> Result<Vec<GainCertificate>> {
        self.gains
            .iter()
            .map(|g| GainCertificate::try_from(g).map_err(|e| Error::Schema(e.to_string())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            n: 2,
            m: 1,
            p: 3,
            t_init: 3,
            horizon: 20,
            seed: 4,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = ScenarioConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ScenarioConfig>(&text).unwrap(), cfg);
        let minimal = r#"{"n":2,"m":1,"p":2,"t_init":3,"lambda":0.5,"u_max":1,
            "signal":{"kind":"adaptive","mean_dwell":5},"horizon":10,"seed":1}"#;
        let parsed: ScenarioConfig = serde_json::from_str(minimal).unwrap();
        assert_eq!(parsed.spectral_range, (0.5, 1.1));
        assert_eq!(parsed.reset_policy, ResetPolicy::NextState);
        parsed.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        for bad in [
            ScenarioConfig { lambda: 1.0, ..small() },
            ScenarioConfig { u_max: 0.0, ..small() },
            ScenarioConfig { horizon: 0, ..small() },
            ScenarioConfig { mode_seeds: Some(vec![1]), ..small() },
            ScenarioConfig {
                signal: SwitchingSignal::Precomputed { schedule: vec![(0, 5)] },
                ..small()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Schema(_))));
        }
        assert!(serde_json::from_str::<ScenarioConfig>(r#"{"n":2,"bogus":1}"#).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_passes_audit() {
        let cfg = small();
        let a = Scenario::generate(&cfg).unwrap();
        assert_eq!(a, Scenario::generate(&cfg).unwrap());
        let audit = audit_assumptions(&a.plant.modes, &a.init, cfg.lambda, &Tolerance::default()).unwrap();
        assert!(audit.informativity_holds());
        assert!(audit.separation_holds());
    }

    #[test]
    fn repeated_mode_seed_breaks_separation() {
        let cfg = ScenarioConfig {
            mode_seeds: Some(vec![11, 11, 12]),
            ..small()
        };
        let s = Scenario::generate(&cfg).unwrap();
        let audit = audit_assumptions(&s.plant.modes, &s.init, cfg.lambda, &Tolerance::default()).unwrap();
        assert_eq!(audit.compatible_pairs, vec![(0, 1)]);
        assert!(!audit.separation_holds());
    }

    #[test]
    fn files_round_trip() {
        let dir = std::env::temp_dir().join(format!("ddsc-scenario-{}", std::process::id()));
        let s = Scenario::generate(&small()).unwrap();
        let path = write_scenario(&s, &dir).unwrap();
        let (manifest, base) = Manifest::from_file(&path).unwrap();
        assert_eq!(manifest.seed, 4);
        assert_eq!(manifest.load_init(&base).unwrap(), s.init);
        assert_eq!(manifest.load_plant(&base).unwrap(), s.plant);
        let lib = s.library(&Tolerance::default()).unwrap();
        write_json(&dir.join(GAINS_FILE), &GainsFile::new(4, &lib)).unwrap();
        let gains: GainsFile = read_json(&dir.join(GAINS_FILE)).unwrap();
        assert_eq!(gains.certs().unwrap(), lib.certs());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
