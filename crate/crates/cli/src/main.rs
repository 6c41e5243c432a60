use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use qproj_core::bangbang::{bangbangify, interval_mass_errors, primitive_error, BangBangError};
use qproj_core::lie::{chain_check, lie_galerkin_search, LieError, DEFAULT_RANK_TOL};
use qproj_core::model::ModelError;
use qproj_core::sim::{natural_semantics, Propagator, Semantics, SimError};
use qproj_core::synth::{verify_plan, ControlPlan, SynthError};
use qproj_core::{load_system, project_match, PiecewiseConstantControl, StateVector, SynthOptions, SystemModel};

const LONG_ABOUT: &str = "\
Certification, simulation and bang-bang synthesis for bilinear quantum systems
H(u) = H0 + u (H1 - H0) given in the eigenbasis of H0.

Conventions:
  * Levels are indexed from 1: level k is the k-th eigenvalue of H0 in
    nondecreasing order, and coupling entries [j, k, re, im] use 1-based j, k.
  * Units are dimensionless with hbar = 1: times are in units of 1/energy and
    the drift acts as exp(-i t H0).
  * State files are {\"cutoff\": n, \"coefficients\": [[re, im], ...]}; control
    files are {\"segments\": [[duration, value], ...], \"range\": ...}.

Exit codes: 0 success, 1 negative result (not certified, no chain, solver
budget exhausted), 2 usage, parse or precondition error.";

#[derive(Parser)]
#[command(name = "qproj", version, about = "Bang-bang control of bilinear quantum systems", long_about = LONG_ABOUT)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for the first order n in n0+1..=nmax where the Lie–Galerkin condition holds.
    Check(CheckArgs),
    /// Look for a non-resonant connectedness chain on the first levels.
    Chain(ChainArgs),
    /// Propagate a state under a piecewise-constant control.
    Simulate(SimulateArgs),
    /// Convert a bounded control into a {0, a}-valued one.
    Bangbang(BangbangArgs),
    /// Synthesize a {0, 1} control matching the first N coordinates of a target state.
    Synthesize(SynthesizeArgs),
    /// Re-simulate a plan file at several cutoffs.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    n0: usize,
    #[arg(long)]
    nmax: usize,
    /// Relative rank tolerance for the bracket closure.
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    rank_tol: f64,
    /// Certificate file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ChainArgs {
    #[arg(long)]
    system: PathBuf,
    /// Number of levels the chain must connect.
    #[arg(long)]
    levels: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    system: PathBuf,
    /// Control file, or a plan file whose bang-bang control is replayed.
    #[arg(long)]
    control: PathBuf,
    /// Initial state; for a plan file its stored initial state is the default.
    #[arg(long)]
    state: Option<PathBuf>,
    /// Number of levels kept in the simulation.
    #[arg(long)]
    cutoff: usize,
    /// Require every control value to be 0 or 1 and use H(0), H(1) directly.
    #[arg(long)]
    two_value: bool,
    /// Final state file; printed with the summary when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BangbangArgs {
    #[arg(long)]
    control: PathBuf,
    /// Upper value of the converted control.
    #[arg(long)]
    a: f64,
    /// Number of equal intervals.
    #[arg(long)]
    k: usize,
    /// Error table file.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Converted control file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    psi0: PathBuf,
    #[arg(long)]
    psi1: PathBuf,
    /// Number of leading coordinates to match.
    #[arg(long = "N")]
    big_n: usize,
    #[arg(long, default_value_t = 1e-2)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Simulation cutoff; four times the certified order when omitted.
    #[arg(long)]
    cutoff: Option<usize>,
    /// Upper bound of the intermediate pulses, in (0, 1).
    #[arg(long, default_value_t = qproj_core::synth::DEFAULT_DELTA)]
    delta: f64,
    /// Budget of simulations for the final solve.
    #[arg(long)]
    max_evals: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// Cutoffs at which to re-simulate.
    #[arg(long, value_delimiter = ',')]
    cutoffs: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure together with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: 2, error: error.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 2, error }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        let code = match e {
            SynthError::NotCertified { .. }
            | SynthError::NoRoute(_)
            | SynthError::PulseVerification { .. }
            | SynthError::RecurrenceCap { .. }
            | SynthError::WordUnsolved(_) => 1,
            _ => 2,
        };
        Failure { code, error: e.into() }
    }
}

macro_rules! usage_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::usage(e)
            }
        }
    )*};
}
usage_errors!(ModelError, SimError, BangBangError, LieError, std::io::Error);

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Check(a) => check(a),
        Command::Chain(a) => chain(a),
        Command::Simulate(a) => simulate(a),
        Command::Bangbang(a) => bangbang(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn system(path: &Path) -> Result<SystemModel, Failure> {
    load_system(path).with_context(|| format!("loading system {}", path.display())).map_err(Failure::usage)
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(Failure::usage)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn check(args: CheckArgs) -> Result<u8, Failure> {
    let sys = system(&args.system)?;
    let outcome = lie_galerkin_search(&sys, args.n0, args.nmax, args.rank_tol)?;
    emit(&outcome, args.out.as_deref())?;
    match &outcome.certified {
        Some(c) => {
            eprintln!("certified at n = {} (dim {}, depth {})", c.n, c.dim, c.depth_used);
            Ok(0)
        }
        None => {
            for a in &outcome.attempts {
                eprintln!("n = {}: {}", a.n, serde_json::to_string(&a.failure).unwrap_or_default());
            }
            Ok(1)
        }
    }
}

fn chain(args: ChainArgs) -> Result<u8, Failure> {
    let sys = system(&args.system)?;
    match chain_check(&sys, args.levels) {
        Ok(ch) => {
            let ok = ch.implies_lie_galerkin();
            let mut doc = ch.to_json();
            doc["implies_lie_galerkin"] = json!(ok);
            emit(&doc, args.out.as_deref())?;
            if !ch.nonresonant {
                eprintln!("resonant chain: {:?}", ch.resonance_witnesses);
            }
            if !ch.degeneracy_ok {
                eprintln!("degenerate levels coupled: {:?}", ch.degeneracy_witnesses);
            }
            Ok(if ok { 0 } else { 1 })
        }
        Err(LieError::Disconnected { levels, components }) => {
            emit(&json!({ "levels": levels, "result": "no chain", "components": components }), args.out.as_deref())?;
            eprintln!("no chain: the coupling graph has components {components:?}");
            Ok(1)
        }
        Err(e) => Err(e.into()),
    }
}

fn simulate(args: SimulateArgs) -> Result<u8, Failure> {
    let sys = system(&args.system)?;
    let text = std::fs::read_to_string(&args.control).with_context(|| format!("reading {}", args.control.display()))?;
    let doc: serde_json::Value = serde_json::from_str(&text).context("parsing control file")?;
    let plan = if doc.get("bang").is_some() { Some(ControlPlan::from_json(&text)?) } else { None };
    let control = match &plan {
        Some(p) => p.bang_control()?,
        None => Some(PiecewiseConstantControl::from_json(&text)?),
    };
    let state = match (&args.state, &plan) {
        (Some(path), _) => StateVector::load(path)?,
        (None, Some(p)) => p.initial_state(),
        (None, None) => return Err(Failure::usage(anyhow::anyhow!("--state is required for a control file"))),
    };
    let state = if state.cutoff() == args.cutoff {
        state
    } else if state.support() <= args.cutoff {
        state.resized(args.cutoff)
    } else {
        return Err(SimError::CutoffMismatch { state: state.cutoff(), expected: args.cutoff }.into());
    };
    let mut prop = Propagator::new(&sys, args.cutoff)?;
    let (out, total_time) = match &control {
        Some(u) => {
            let semantics = if args.two_value { Semantics::TwoValue } else { natural_semantics(u) };
            (StateVector::new(prop.apply(u, semantics, state.coefficients())?), u.total_time())
        }
        None => (state.clone(), 0.0),
    };
    let mut summary = json!({
        "cutoff": args.cutoff,
        "total_time": total_time,
        "initial_norm": state.norm(),
        "final_norm": out.norm(),
        "norm_defect": (out.norm() - state.norm()).abs(),
    });
    if let Some(p) = &plan {
        let target = p.target();
        let diff = out.project(target.len()) - &target;
        summary["residual"] = json!(diff.norm());
        summary["stored_residual"] = json!(p.residual);
    }
    match &args.out {
        Some(path) => {
            emit(&out.to_json(), Some(path))?;
            emit(&summary, None)?;
        }
        None => {
            summary["state"] = out.to_json();
            emit(&summary, None)?;
        }
    }
    Ok(0)
}

fn bangbang(args: BangbangArgs) -> Result<u8, Failure> {
    let u = PiecewiseConstantControl::load(&args.control)?;
    let w = bangbangify(&u, args.a, args.k)?;
    emit(&w.to_json(), args.out.as_deref())?;
    if let Some(path) = &args.report {
        let masses = interval_mass_errors(&u, &w, args.k)?;
        let delta = u.max_abs_value();
        let report = json!({
            "k": args.k,
            "a": args.a,
            "delta": delta,
            "total_time": u.total_time(),
            "primitive_error": primitive_error(&u, &w)?,
            "primitive_bound": (delta + args.a) * u.total_time() / args.k as f64,
            "max_interval_mass_error": masses.iter().copied().fold(0.0, f64::max),
            "segments": w.segments().len(),
        });
        emit(&report, Some(path))?;
    }
    Ok(0)
}

fn synthesize(args: SynthesizeArgs) -> Result<u8, Failure> {
    let sys = system(&args.system)?;
    let psi0 = StateVector::load(&args.psi0)?;
    let psi1 = StateVector::load(&args.psi1)?;
    let defaults = SynthOptions::default();
    let opts = SynthOptions {
        tol: args.tol,
        seed: args.seed,
        delta: args.delta,
        cutoff: args.cutoff,
        max_evaluations: args.max_evals.unwrap_or(defaults.max_evaluations),
        ..defaults
    };
    let plan = project_match(&sys, args.big_n, &psi0, &psi1, &opts)?;
    std::fs::write(&args.out, plan.to_json_string() + "\n").with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "residual {:.3e} at cutoff {}, {:.3e} at cutoff {}; {} solver evaluations",
        plan.residual, plan.cutoff, plan.residual_tail, plan.verify_cutoff, plan.evaluations
    );
    if plan.success {
        Ok(0)
    } else {
        eprintln!("tolerance {:e} not reached; best-effort plan written", plan.tol);
        Ok(1)
    }
}

fn verify(args: VerifyArgs) -> Result<u8, Failure> {
    let sys = system(&args.system)?;
    let text = std::fs::read_to_string(&args.plan).with_context(|| format!("reading {}", args.plan.display()))?;
    let plan = ControlPlan::from_json(&text)?;
    let cutoffs = if args.cutoffs.is_empty() { vec![plan.cutoff, plan.verify_cutoff] } else { args.cutoffs };
    let report = verify_plan(&sys, &plan, &cutoffs)?;
    emit(&report, args.out.as_deref())?;
    let ok = !report.mismatch && report.rows.iter().all(|r| r.residual <= plan.tol);
    Ok(if ok { 0 } else { 1 })
}
