//! `ddsc`: generate scenarios, synthesise gains, simulate the closed loop,
//! replay detection offline and analyse runs.
//!
//! Exit codes: 0 ok, 2 assumption or informativity failure, 3 controller
//! runtime error or failed audit, 4 I/O or schema error.

use std::fs::File;
use std::io::BufWriter;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddsc_core::analysis::analyze;
use ddsc_core::scenario::{
    audit_assumptions, read_json, write_json, write_scenario, GainsFile, Manifest, PlantSpec,
    GAINS_FILE,
};
use ddsc_core::simulate::{replay_detection, run_batch, RunLog};
use ddsc_core::{Error, ModeLibrary, ResetPolicy, RunOptions, Scenario, ScenarioConfig, Tolerance};

#[derive(Parser)]
#[command(name = "ddsc", version, about = "Data-driven switched controller toolbox")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a plant and per-mode trajectories, and audit the assumptions
    Gen(GenArgs),
    /// Synthesise one gain per mode from the recorded trajectories
    Synth(SynthArgs),
    /// Run the closed loop for one or more seeds
    Simulate(SimulateArgs),
    /// Replay mode detection on a recorded run
    Detect(DetectArgs),
    /// Fit switching parameters and audit the stability certificate of a run
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Scenario configuration (JSON); defaults to the built-in 5-mode setup
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the scenario seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Decay rate; defaults to the manifest's
    #[arg(long)]
    lambda: Option<f64>,
    /// Output directory; defaults to the manifest's
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Gains file; defaults to gains.json next to the manifest
    #[arg(long)]
    gains: Option<PathBuf>,
    /// Replace the manifest's run settings (signal, horizon, input bound)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seed range `a..b` (exclusive) or `a..=b`
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    umax: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Keep the violating transition in the detection buffer after a trigger
    #[arg(long)]
    seed_violation: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// Run-log CSV (its JSON sidecar must sit next to it)
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    gains: PathBuf,
    /// Ground-truth plant file
    #[arg(long)]
    plant: PathBuf,
    /// Comma-separated dwell parameters; defaults to the log's range
    #[arg(long, value_delimiter = ',')]
    tau_grid: Option<Vec<f64>>,
    /// Comma-separated activation fractions; defaults to the log's range
    #[arg(long, value_delimiter = ',')]
    eta_grid: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NotInformative { .. }
        | Error::AssumptionViolated(_)
        | Error::SynthesisInconclusive(_)
        | Error::ConditionUnsatisfied { .. }
        | Error::GenerationFailed(_)
        | Error::ExcitationFailed(_) => 2,
        Error::EmptyMatchSet
        | Error::NoExcitationDirection
        | Error::NoExactFit { .. }
        | Error::RecurrenceViolated { .. }
        | Error::CertificateViolated { .. } => 3,
        Error::NonFinite
        | Error::Dimension(_)
        | Error::InvalidArgument(_)
        | Error::Schema(_)
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => 4,
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Analyze(a) => cmd_analyze(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let mut config = match &a.config {
        Some(path) => ScenarioConfig::from_file(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let scenario = Scenario::generate(&config)?;
    let manifest = write_scenario(&scenario, &a.out)?;
    println!("wrote {}", manifest.display());
    let audit = audit_assumptions(&scenario.plant.modes, &scenario.init, config.lambda, &Tolerance::default())?;
    println!("assumption 1 (informative data): {}", pass(audit.informativity_holds()));
    for (i, ok) in audit.informative.iter().enumerate().filter(|(_, ok)| !**ok) {
        println!("  mode {i}: informative = {ok}");
    }
    println!("assumption 2 (controllable, pairwise incompatible): {}", pass(audit.separation_holds()));
    for (i, ok) in audit.controllable.iter().enumerate().filter(|(_, ok)| !**ok) {
        println!("  mode {i}: controllable = {ok}");
    }
    for (i, j) in &audit.compatible_pairs {
        println!("  modes {i} and {j}: compatible data");
    }
    match (audit.informativity_holds(), audit.separation_holds()) {
        (true, true) => Ok(()),
        (false, _) => Err(fail(2, "assumption 1 failed")),
        (_, false) => Err(fail(2, "assumption 2 failed")),
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let (manifest, dir) = Manifest::from_file(&a.manifest)?;
    let init = manifest.load_init(&dir)?;
    let lambda = a.lambda.unwrap_or(manifest.config.lambda);
    let library = ModeLibrary::build(init, lambda, &Tolerance::default())?;
    for (i, c) in library.certs().iter().enumerate() {
        println!("mode {i}: |K| = {:.4}", c.k.norm());
    }
    let out = a.out.unwrap_or(dir);
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    let path = out.join(GAINS_FILE);
    write_json(&path, &GainsFile::new(manifest.seed, &library))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn parse_seeds(spec: &str) -> Result<Range<u64>, Failure> {
    let bad = || fail(4, format!("bad seed range {spec:?}; expected a..b or a..=b"));
    let (lo, hi, inclusive) = if let Some((lo, hi)) = spec.split_once("..=") {
        (lo, hi, true)
    } else if let Some((lo, hi)) = spec.split_once("..") {
        (lo, hi, false)
    } else {
        return Err(bad());
    };
    let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
    let hi = if inclusive { hi.checked_add(1).ok_or_else(bad)? } else { hi };
    if hi <= lo {
        return Err(bad());
    }
    Ok(lo..hi)
}

fn load_library(manifest: &Manifest, dir: &Path, gains: &Path) -> Result<ModeLibrary, Failure> {
    let gains: GainsFile = read_json(gains)?;
    let init = manifest.load_init(dir)?;
    Ok(ModeLibrary::from_parts(init, gains.certs()?, &Tolerance::default())?)
}

fn cmd_simulate(a: SimulateArgs) -> CmdResult {
    let (manifest, dir) = Manifest::from_file(&a.manifest)?;
    let config = match &a.config {
        Some(path) => ScenarioConfig::from_file(path)?,
        None => manifest.config.clone(),
    };
    let mut plant = manifest.load_plant(&dir)?;
    config.signal.validate(plant.p()).map_err(|e| fail(4, e.to_string()))?;
    plant.signal = config.signal.clone();
    let library = load_library(&manifest, &dir, &a.gains.clone().unwrap_or_else(|| dir.join(GAINS_FILE)))?;

    let seeds: Vec<u64> = match (&a.seeds, a.seed) {
        (Some(spec), _) => parse_seeds(spec)?.collect(),
        (None, Some(s)) => vec![s],
        (None, None) => vec![config.seed],
    };
    let u_max = a.umax.unwrap_or(config.u_max);
    if !(u_max > 0.0 && u_max.is_finite()) {
        return Err(fail(4, format!("input bound {u_max} must be positive")));
    }
    let opts = RunOptions {
        reset_policy: if a.seed_violation {
            ResetPolicy::SeedViolation
        } else {
            config.reset_policy
        },
        ..RunOptions::new(u_max)
    };
    let horizon = a.horizon.unwrap_or(config.horizon);
    let runs = run_batch(&plant, &library, &seeds, |s| config.initial_state(s), horizon, &opts);

    let bound = plant.n() + plant.m();
    let mut worst: Option<u8> = None;
    for (seed, run) in seeds.iter().zip(runs) {
        let stem = format!("run_{seed}");
        let log = match run {
            Ok(log) => log,
            Err(f) => {
                f.log.write_files(&a.out, &stem)?;
                println!("seed {seed}: {}", f);
                worst = worst.max(Some(exit_code(&f.error)));
                continue;
            }
        };
        log.write_files(&a.out, &stem)?;
        let residual = log.transition_residual(&plant);
        let longest = log.completed_detection_lengths().into_iter().max().unwrap_or(0);
        let ok = residual == 0.0 && longest <= bound;
        println!(
            "seed {seed}: detections {} longest {longest} max |x| {:.4e} final |x| {:.4e} audit {}",
            log.meta.detect_starts.len(),
            log.max_state_norm(),
            log.final_x.norm(),
            pass(ok)
        );
        if !ok {
            worst = worst.max(Some(3));
        }
    }
    match worst {
        None => Ok(()),
        Some(code) => Err(fail(code, "at least one run failed")),
    }
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn out_dir(out: Option<PathBuf>, log: &Path) -> Result<PathBuf, Failure> {
    let dir = out.unwrap_or_else(|| log.parent().map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(&dir).map_err(Error::from)?;
    Ok(dir)
}

fn cmd_detect(a: DetectArgs) -> CmdResult {
    let (manifest, dir) = Manifest::from_file(&a.manifest)?;
    let log = RunLog::read_files(&a.log)?;
    let init = manifest.load_init(&dir)?;
    let replay = replay_detection(&log, &init, &Tolerance::default())?;
    let out = out_dir(a.out, &a.log)?;
    let path = out.join(format!("{}_detect.csv", stem_of(&a.log)));
    replay.write_csv(BufWriter::new(File::create(&path).map_err(Error::from)?))?;
    println!("wrote {}", path.display());
    if replay.reproduces_log() {
        println!("replay reproduces the logged estimates: pass");
        Ok(())
    } else {
        Err(fail(
            3,
            format!("replay differs from the log at steps {:?}", replay.mismatches),
        ))
    }
}

fn cmd_analyze(a: AnalyzeArgs) -> CmdResult {
    let log = RunLog::read_files(&a.log)?;
    let gains: GainsFile = read_json(&a.gains)?;
    let certs = gains.certs()?;
    let plant = read_json::<PlantSpec>(&a.plant)?.to_plant()?;
    if (plant.n(), plant.m(), plant.p()) != (log.meta.n, log.meta.m, log.meta.p) {
        return Err(fail(4, "plant does not match the log"));
    }
    let grids = match (&a.tau_grid, &a.eta_grid) {
        (None, None) => None,
        _ => {
            let (taus, etas) = ddsc_core::analysis::default_grids(&log);
            Some((a.tau_grid.clone().unwrap_or(taus), a.eta_grid.clone().unwrap_or(etas)))
        }
    };
    let report = analyze(
        &log,
        &plant.pairs(),
        &certs,
        grids.as_ref().map(|(t, e)| (t.as_slice(), e.as_slice())),
    )?;

    let out = out_dir(a.out, &a.log)?;
    let stem = stem_of(&a.log);
    let json = out.join(format!("{stem}_analysis.json"));
    write_json(&json, &report)?;
    let series = out.join(format!("{stem}_series.csv"));
    report.write_series(&log, BufWriter::new(File::create(&series).map_err(Error::from)?))?;
    println!("wrote {} and {}", json.display(), series.display());

    let s = &report.selected;
    println!(
        "selected tau {} N0 {} eta {} T0 {}: condition lhs {:.6} ({})",
        s.tau,
        s.n0,
        s.eta,
        s.t0,
        report.condition.lhs,
        pass(report.condition.holds)
    );
    match report.bound_audit {
        Some(b) => println!("bound audit: {} violations over {} steps ({})", b.violations, b.steps, pass(b.violations == 0)),
        None => println!("bound audit: skipped (a = {:.6} >= 1)", s.a),
    }
    let [c1, c2, c3] = report.certificate_cases;
    println!(
        "certificate: cases {c1}/{c2}/{c3}, {} violations ({})",
        report.certificate_violations.len(),
        pass(report.certificate_violations.is_empty())
    );
    if report.passed() {
        Ok(())
    } else if !report.condition.holds {
        Err(fail(2, "stability condition not satisfied"))
    } else {
        Err(fail(3, "stability audit failed"))
    }
}
