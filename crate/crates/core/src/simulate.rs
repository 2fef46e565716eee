//! Closed-loop harness: per step the controller acts, the plant moves and
//! the controller observes the result.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{ModeLibrary, Phase, ResetPolicy, SwitchedController};
use crate::data::{parse_fields, DataMatrices, MatchSet};
use crate::detection::{detect_input, detect_update, DetectionState};
use crate::error::{Error, Result};
use crate::linalg::{Tolerance, Vector};
use crate::plant::{SignalState, SwitchedPlant};

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vector,
    pub u: Vector,
    pub sigma_true: usize,
    /// Controller's mode estimate at `t` (none before the first detection
    /// completes).
    pub sigma_d: Option<usize>,
    pub phase: Phase,
    /// `x(t)ᵀ P_{σ_d(t)} x(t)`.
    pub v_value: Option<f64>,
    pub trigger_fired: bool,
    /// Match set after this step's pruning, on detection steps.
    pub matches: Option<MatchSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub seed: u64,
    pub u_max: f64,
    pub lambda: f64,
    pub reset_policy: ResetPolicy,
    /// First instants of the detection phases.
    pub detect_starts: Vec<usize>,
    /// First instants of the stabilization phases.
    pub stabilize_starts: Vec<usize>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub meta: RunMeta,
    pub steps: Vec<StepRecord>,
    /// `x(H)` for horizon `H`.
    pub final_x: Vector,
}

#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub log: Box<RunLog>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run failed after {} steps: {}", self.log.steps.len(), self.error)
    }
}

impl std::error::Error for RunFailure {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub u_max: f64,
    pub reset_policy: ResetPolicy,
    pub tol: Tolerance,
}

impl RunOptions {
    pub fn new(u_max: f64) -> Self {
        Self {
            u_max,
            reset_policy: ResetPolicy::default(),
            tol: Tolerance::default(),
        }
    }
}

impl RunLog {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// `x(t)` for `0 ≤ t ≤ H`.
    pub fn state(&self, t: usize) -> &Vector {
        if t == self.steps.len() {
            &self.final_x
        } else {
            &self.steps[t].x
        }
    }

    pub fn detecting(&self, t: usize) -> bool {
        self.steps[t].phase == Phase::Detect
    }

    /// `[start, end)` of every detection phase; a phase still open at the
    /// horizon ends there.
    pub fn detection_phases(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = None;
        for s in &self.steps {
            match (s.phase, start) {
                (Phase::Detect, None) => start = Some(s.t),
                (Phase::Stabilize, Some(b)) => {
                    out.push((b, s.t));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(b) = start {
            out.push((b, self.steps.len()));
        }
        out
    }

    /// Lengths of the detection phases that completed within the horizon.
    pub fn completed_detection_lengths(&self) -> Vec<usize> {
        let h = self.steps.len();
        self.detection_phases()
            .into_iter()
            .filter(|&(_, e)| e < h)
            .map(|(b, e)| e - b)
            .collect()
    }

    /// Largest `|x(t+1) - A_σ x(t) - B_σ u(t)|` over the log.
    pub fn transition_residual(&self, plant: &SwitchedPlant) -> f64 {
        (0..self.steps.len())
            .map(|t| {
                let s = &self.steps[t];
                (self.state(t + 1) - plant.step(s.sigma_true, &s.x, &s.u)).amax()
            })
            .fold(0.0, f64::max)
    }

    pub fn max_state_norm(&self) -> f64 {
        (0..=self.steps.len())
            .map(|t| self.state(t).norm())
            .fold(0.0, f64::max)
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((1..=self.meta.n).map(|i| format!("x{i}")));
        h.extend((1..=self.meta.m).map(|i| format!("u{i}")));
        h.extend(
            ["sigma", "sigma_d", "phase", "v", "trigger", "matches"]
                .iter()
                .map(|s| s.to_string()),
        );
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let (n, m) = (self.meta.n, self.meta.m);
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.header())?;
        for s in &self.steps {
            let mut row = vec![s.t.to_string()];
            row.extend(s.x.iter().map(|v| v.to_string()));
            row.extend(s.u.iter().map(|v| v.to_string()));
            row.push(s.sigma_true.to_string());
            row.push(s.sigma_d.map(|v| v.to_string()).unwrap_or_default());
            row.push(s.phase.to_string());
            row.push(s.v_value.map(|v| v.to_string()).unwrap_or_default());
            row.push(u8::from(s.trigger_fired).to_string());
            row.push(
                s.matches
                    .as_ref()
                    .map(|ms| ms.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";"))
                    .unwrap_or_default(),
            );
            w.write_record(&row)?;
        }
        let mut row = vec![self.steps.len().to_string()];
        row.extend(self.final_x.iter().map(|v| v.to_string()));
        row.extend(std::iter::repeat_n(String::new(), m + 6));
        debug_assert_eq!(row.len(), 1 + n + m + 6);
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, meta: RunMeta) -> Result<Self> {
        let (n, m) = (meta.n, meta.m);
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        let stub = RunLog {
            meta,
            steps: Vec::new(),
            final_x: Vector::zeros(n),
        };
        if header != stub.header() {
            return Err(Error::Schema(format!("unexpected run-log header {header:?}")));
        }
        let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
        let Some((last, body)) = rows.split_last() else {
            return Err(Error::Schema("run log has no rows".into()));
        };
        let opt_usize = |s: &str| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::Schema(format!("bad index {s:?}")))
            }
        };
        let base = 1 + n + m;
        let mut steps = Vec::with_capacity(body.len());
        for (i, rec) in body.iter().enumerate() {
            if rec.len() != base + 6 || rec[0].parse::<usize>().ok() != Some(i) {
                return Err(Error::Schema(format!("malformed run-log row {i}")));
            }
            let matches = if rec[base + 5].is_empty() {
                None
            } else {
                Some(MatchSet::from_modes(
                    rec[base + 5]
                        .split(';')
                        .map(|s| opt_usize(s)?.ok_or_else(|| Error::Schema("empty mode".into())))
                        .collect::<Result<Vec<_>>>()?,
                ))
            };
            steps.push(StepRecord {
                t: i,
                x: Vector::from_vec(parse_fields(rec, 1, n)?),
                u: Vector::from_vec(parse_fields(rec, 1 + n, m)?),
                sigma_true: opt_usize(&rec[base])?
                    .ok_or_else(|| Error::Schema("missing true mode".into()))?,
                sigma_d: opt_usize(&rec[base + 1])?,
                phase: rec[base + 2].parse()?,
                v_value: if rec[base + 3].is_empty() {
                    None
                } else {
                    Some(parse_fields(rec, base + 3, 1)?[0])
                },
                trigger_fired: match &rec[base + 4] {
                    "0" => false,
                    "1" => true,
                    other => return Err(Error::Schema(format!("bad trigger flag {other:?}"))),
                },
                matches,
            });
        }
        if last.get(0).and_then(|s| s.parse::<usize>().ok()) != Some(body.len()) {
            return Err(Error::Schema("final row has the wrong time index".into()));
        }
        let final_x = Vector::from_vec(parse_fields(last, 1, n)?);
        Ok(RunLog {
            meta: stub.meta,
            steps,
            final_x,
        })
    }

    /// Write `<stem>.csv` and `<stem>.json` into `dir`; returns both paths.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        self.write_csv(BufWriter::new(File::create(&csv_path)?))?;
        let mut jw = BufWriter::new(File::create(&json_path)?);
        serde_json::to_writer_pretty(&mut jw, &self.meta)?;
        jw.write_all(b"\n")?;
        jw.flush()?;
        Ok((csv_path, json_path))
    }

    /// Read a log from its CSV; the sidecar is the same path with a
    /// `.json` extension.
    pub fn read_files(csv_path: &Path) -> Result<Self> {
        let json_path = csv_path.with_extension("json");
        let meta: RunMeta = serde_json::from_reader(BufReader::new(File::open(&json_path)?))?;
        Self::read_csv(BufReader::new(File::open(csv_path)?), meta)
    }
}

/// Simulate `horizon` steps. The adaptive switching signal is seeded with
/// `seed`; on a controller error the partial log travels with the error.
pub fn run_closed_loop(
    plant: &SwitchedPlant,
    library: &ModeLibrary,
    x0: &Vector,
    horizon: usize,
    seed: u64,
    opts: &RunOptions,
) -> std::result::Result<RunLog, RunFailure> {
    let mut log = RunLog {
        meta: RunMeta {
            n: plant.n(),
            m: plant.m(),
            p: plant.p(),
            seed,
            u_max: opts.u_max,
            lambda: library.lambda(),
            reset_policy: opts.reset_policy,
            detect_starts: Vec::new(),
            stabilize_starts: Vec::new(),
            failure: None,
        },
        steps: Vec::with_capacity(horizon),
        final_x: x0.clone(),
    };
    let fail = |error: Error, mut log: RunLog| {
        log.meta.failure = Some(error.to_string());
        RunFailure {
            error,
            log: Box::new(log),
        }
    };
    if horizon == 0 {
        return Err(fail(Error::InvalidArgument("horizon must be at least 1".into()), log));
    }
    if plant.n() != library.n() || plant.m() != library.m() || plant.p() != library.p() {
        return Err(fail(
            Error::Dimension("library does not match the plant".into()),
            log,
        ));
    }
    let mut signal = match SignalState::new(&plant.signal, plant.p(), seed) {
        Ok(s) => s,
        Err(e) => return Err(fail(e, log)),
    };
    let mut ctl = match SwitchedController::new(library, x0, opts.u_max, opts.reset_policy, opts.tol) {
        Ok(c) => c,
        Err(e) => return Err(fail(e, log)),
    };

    let mut x = x0.clone();
    let mut prev_phase = None;
    for t in 0..horizon {
        let phase = ctl.phase();
        if prev_phase != Some(phase) {
            match phase {
                Phase::Detect => log.meta.detect_starts.push(t),
                Phase::Stabilize => log.meta.stabilize_starts.push(t),
            }
        }
        prev_phase = Some(phase);
        let sigma = signal.mode_at(t, phase == Phase::Detect);
        let sigma_d = ctl.sigma_d();
        let v_value = ctl.lyapunov(&x);
        let u = match ctl.control(&x) {
            Ok(u) => u,
            Err(e) => {
                log.final_x = x;
                return Err(fail(e, log));
            }
        };
        let next = plant.step(sigma, &x, &u);
        let obs = match ctl.observe(&x, &u, &next) {
            Ok(o) => o,
            Err(e) => {
                log.final_x = x;
                return Err(fail(e, log));
            }
        };
        log.steps.push(StepRecord {
            t,
            x,
            u,
            sigma_true: sigma,
            sigma_d,
            phase,
            v_value,
            trigger_fired: obs.triggered,
            matches: obs.matches,
        });
        x = next;
    }
    log.final_x = x;
    Ok(log)
}

/// Independent runs, one per seed, in parallel.
pub fn run_batch<F>(
    plant: &SwitchedPlant,
    library: &ModeLibrary,
    seeds: &[u64],
    initial_state: F,
    horizon: usize,
    opts: &RunOptions,
) -> Vec<std::result::Result<RunLog, RunFailure>>
where
    F: Fn(u64) -> Vector + Sync,
{
    seeds
        .par_iter()
        .map(|&s| run_closed_loop(plant, library, &initial_state(s), horizon, s, opts))
        .collect()
}

/// One step of an offline detection replay.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStep {
    pub t: usize,
    pub phase: Phase,
    pub sigma_d: Option<usize>,
    pub matches: Option<MatchSet>,
    /// The logged input equals the one detection would choose.
    pub input_agrees: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReplay {
    pub steps: Vec<ReplayStep>,
    /// Steps whose replayed estimate, match set or input differs from the
    /// log.
    pub mismatches: Vec<usize>,
}

impl DetectionReplay {
    pub fn reproduces_log(&self) -> bool {
        self.mismatches.is_empty()
    }

    /// `t,phase,sigma_d,matches`, matches joined with `;`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "phase", "sigma_d", "matches"])?;
        for s in &self.steps {
            w.write_record([
                s.t.to_string(),
                s.phase.to_string(),
                s.sigma_d.map(|v| v.to_string()).unwrap_or_default(),
                s.matches
                    .as_ref()
                    .map(|ms| ms.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";"))
                    .unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Re-run detection on the recorded states and inputs of every detection
/// phase, using only the initialization data, and rebuild the estimate
/// timeline. Phase boundaries come from the log.
pub fn replay_detection(log: &RunLog, init: &[DataMatrices], tol: &Tolerance) -> Result<DetectionReplay> {
    let p = init.len();
    if p != log.meta.p || init.iter().any(|d| d.n() != log.meta.n || d.m() != log.meta.m) {
        return Err(Error::Dimension("initialization data do not match the log".into()));
    }
    let h = log.horizon();
    let mut steps: Vec<ReplayStep> = log
        .steps
        .iter()
        .map(|s| ReplayStep {
            t: s.t,
            phase: s.phase,
            sigma_d: None,
            matches: None,
            input_agrees: true,
        })
        .collect();
    // resolved[t] = mode resolved by the transition out of step t.
    let mut resolved: Vec<Option<usize>> = vec![None; h];
    for (b, e) in log.detection_phases() {
        let online = if b > 0 && log.meta.reset_policy == ResetPolicy::SeedViolation {
            let mut d = DataMatrices::initial(log.state(b - 1), log.meta.m);
            d.push(&log.steps[b - 1].u, log.state(b))?;
            d
        } else {
            DataMatrices::initial(log.state(b), log.meta.m)
        };
        let mut st = DetectionState {
            online,
            matches: MatchSet::full(p),
            u_max: log.meta.u_max,
        };
        for t in b..e {
            let x = log.state(t);
            let u = &log.steps[t].u;
            steps[t].input_agrees = detect_input(&st, x, tol).map(|v| v == *u).unwrap_or(false);
            st = detect_update(&st, x, u, log.state(t + 1), init, tol)?;
            steps[t].matches = Some(st.matches.clone());
            if st.matches.len() == 1 {
                resolved[t] = st.matches.iter().next();
                break;
            }
        }
    }
    let mut current = None;
    for t in 0..h {
        steps[t].sigma_d = current;
        if let Some(theta) = resolved[t] {
            current = Some(theta);
        }
    }
    let mismatches = (0..h)
        .filter(|&t| {
            let (r, s) = (&steps[t], &log.steps[t]);
            r.sigma_d != s.sigma_d || r.matches != s.matches || !r.input_agrees
        })
        .collect();
    Ok(DetectionReplay { steps, mismatches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{gen_init_data, gen_modes, SwitchingSignal};

    fn scenario(seed: u64, p: usize, signal: SwitchingSignal) -> (SwitchedPlant, ModeLibrary) {
        let modes = gen_modes(seed, 3, 2, p, (0.6, 1.2)).unwrap();
        let init: Vec<DataMatrices> = modes
            .iter()
            .enumerate()
            .map(|(i, md)| gen_init_data(md, 4, seed + i as u64, 1.0, 1.0).unwrap())
            .collect();
        let lib = ModeLibrary::build(init, 0.8, &Tolerance::default()).unwrap();
        (SwitchedPlant::new(modes, signal).unwrap(), lib)
    }

    #[test]
    fn single_mode_converges() {
        let (plant, lib) = scenario(1, 1, SwitchingSignal::Adaptive { mean_dwell: 5.0 });
        let x0 = Vector::from_vec(vec![1.0, -1.0, 2.0]);
        let log = run_closed_loop(&plant, &lib, &x0, 80, 0, &RunOptions::new(1.0)).unwrap();
        assert_eq!(log.horizon(), 80);
        assert_eq!(log.meta.detect_starts, vec![0]);
        assert_eq!(log.meta.stabilize_starts.len(), 1);
        assert!(log.final_x.norm() < 1e-4 * x0.norm());
        assert_eq!(log.transition_residual(&plant), 0.0);
    }

    #[test]
    fn zero_start_without_switching_stays_small() {
        let (plant, lib) = scenario(2, 2, SwitchingSignal::Precomputed { schedule: vec![(0, 1)] });
        let log = run_closed_loop(&plant, &lib, &Vector::zeros(3), 60, 0, &RunOptions::new(1.0)).unwrap();
        assert!(log.steps[0].u.iter().all(|v| *v == 0.0));
        // The detection input is the only excitation; afterwards the state
        // decays again.
        assert!(log.meta.stabilize_starts.len() == 1);
        assert!(log.final_x.norm() < 1e-3);
        for s in &log.steps {
            assert!(s.u.norm() <= 1.0 + 1e-12 || s.phase == Phase::Stabilize);
        }
    }

    #[test]
    fn phases_interleave_and_replay_identically() {
        let (plant, lib) = scenario(3, 3, SwitchingSignal::Adaptive { mean_dwell: 8.0 });
        let x0 = Vector::from_vec(vec![0.5, 1.0, -0.3]);
        let opts = RunOptions::new(1.0);
        let a = run_closed_loop(&plant, &lib, &x0, 200, 11, &opts).unwrap();
        let b = run_closed_loop(&plant, &lib, &x0, 200, 11, &opts).unwrap();
        assert_eq!(a, b);
        let (dm, ds) = (&a.meta.detect_starts, &a.meta.stabilize_starts);
        assert!(dm.len() >= 2);
        for i in 0..ds.len() {
            assert!(dm[i] < ds[i]);
            if i + 1 < dm.len() {
                assert!(ds[i] < dm[i + 1]);
            }
        }
        for (b, e) in a.detection_phases() {
            assert!(e - b <= 5);
            // No switch inside a detection phase.
            assert!((b..e).all(|t| a.steps[t].sigma_true == a.steps[b].sigma_true));
        }
        assert_eq!(a.transition_residual(&plant), 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let (plant, lib) = scenario(4, 2, SwitchingSignal::Adaptive { mean_dwell: 6.0 });
        let x0 = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        let log = run_closed_loop(&plant, &lib, &x0, 50, 2, &RunOptions::new(0.5)).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let back = RunLog::read_csv(buf.as_slice(), log.meta.clone()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn batch_matches_single_runs() {
        let (plant, lib) = scenario(5, 2, SwitchingSignal::Adaptive { mean_dwell: 8.0 });
        let opts = RunOptions::new(1.0);
        let x0 = |s: u64| Vector::from_element(3, 1.0 + s as f64);
        let batch = run_batch(&plant, &lib, &[0, 1, 2], x0, 40, &opts);
        for (s, r) in batch.into_iter().enumerate() {
            let single = run_closed_loop(&plant, &lib, &x0(s as u64), 40, s as u64, &opts).unwrap();
            assert_eq!(r.unwrap(), single);
        }
    }

    #[test]
    fn detection_replay_reproduces_log() {
        let (plant, lib) = scenario(6, 3, SwitchingSignal::Adaptive { mean_dwell: 6.0 });
        let x0 = Vector::from_vec(vec![1.0, 0.0, -1.0]);
        for policy in [ResetPolicy::NextState, ResetPolicy::SeedViolation] {
            let opts = RunOptions {
                reset_policy: policy,
                ..RunOptions::new(1.0)
            };
            let log = run_closed_loop(&plant, &lib, &x0, 120, 9, &opts).unwrap();
            assert!(log.meta.detect_starts.len() > 2);
            let replay = replay_detection(&log, lib.init(), &Tolerance::default()).unwrap();
            assert!(replay.reproduces_log(), "{policy:?}: {:?}", replay.mismatches);

            let mut tampered = log.clone();
            let t = tampered.meta.detect_starts[1];
            tampered.steps[t + 1].sigma_d = Some((tampered.steps[t + 1].sigma_d.unwrap() + 1) % 3);
            let replay = replay_detection(&tampered, lib.init(), &Tolerance::default()).unwrap();
            assert_eq!(replay.mismatches, vec![t + 1]);
        }
    }
}
