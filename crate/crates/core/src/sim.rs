//! Propagators for piecewise-constant controls at a finite cutoff, the
//! interaction-frame propagator, and cutoff robustness scans.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{c, drift_phases, expm_skew, CMat, CVec, CompensatedSum, HermitianExp, C64};
use crate::model::{GalerkinPair, ModelError, SystemModel};

pub const UNITARITY_TOL: f64 = 1e-10;
pub const DEFAULT_STEP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid control: {0}")]
    InvalidControl(String),
    #[error("segment {index} has value {value}, outside {{0, 1}} required by two-value semantics")]
    NotTwoValued { index: usize, value: f64 },
    #[error("state has cutoff {state}, expected {expected}")]
    CutoffMismatch { state: usize, expected: usize },
    #[error("time {t} lies outside [0, {total}]")]
    TimeOutOfRange { t: f64, total: f64 },
    #[error("time {0} is too close to a control switch")]
    SegmentBoundary(f64),
    #[error("integrator step underflow at t = {0}")]
    StepUnderflow(f64),
    #[error("invalid cutoff list: {0}")]
    InvalidCutoffs(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Admissible control values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ValueRange {
    Interval { lo: f64, hi: f64 },
    /// The two-point set `{0, a}`.
    TwoValue { a: f64 },
}

impl ValueRange {
    pub fn contains(&self, v: f64) -> bool {
        match *self {
            ValueRange::Interval { lo, hi } => v >= lo && v <= hi,
            ValueRange::TwoValue { a } => v == 0.0 || v == a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub duration: f64,
    pub value: f64,
}

impl Segment {
    pub fn new(duration: f64, value: f64) -> Self {
        Segment { duration, value }
    }
}

/// `u = Σ u_j 1_[t_{j−1}, t_j)` with positive durations.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseConstantControl {
    segments: Vec<Segment>,
    range: ValueRange,
}

impl PiecewiseConstantControl {
    pub fn new(segments: Vec<Segment>, range: ValueRange) -> Result<Self, SimError> {
        if segments.is_empty() {
            return Err(SimError::InvalidControl("no segments".into()));
        }
        for (i, s) in segments.iter().enumerate() {
            if !(s.duration > 0.0 && s.duration.is_finite()) {
                return Err(SimError::InvalidControl(format!("segment {} has duration {}", i + 1, s.duration)));
            }
            if !s.value.is_finite() || !range.contains(s.value) {
                return Err(SimError::InvalidControl(format!(
                    "segment {} has value {} outside the declared range",
                    i + 1,
                    s.value
                )));
            }
        }
        Ok(PiecewiseConstantControl { segments, range })
    }

    /// Control with an interval range spanning its own values.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self, SimError> {
        let lo = segments.iter().map(|s| s.value).fold(f64::INFINITY, f64::min);
        let hi = segments.iter().map(|s| s.value).fold(f64::NEG_INFINITY, f64::max);
        Self::new(segments, ValueRange::Interval { lo: lo.min(0.0), hi: hi.max(0.0) })
    }

    pub fn constant(value: f64, duration: f64) -> Result<Self, SimError> {
        Self::from_segments(vec![Segment::new(duration, value)])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn total_time(&self) -> f64 {
        let mut acc = CompensatedSum::default();
        self.segments.iter().for_each(|s| acc.add(s.duration));
        acc.value()
    }

    /// Switching times `0 = t_0 < t_1 < … < t_m = T`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut acc = CompensatedSum::default();
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        out.push(0.0);
        for s in &self.segments {
            acc.add(s.duration);
            out.push(acc.value());
        }
        out
    }

    /// `∫_0^T |u|`.
    pub fn l1_norm(&self) -> f64 {
        let mut acc = CompensatedSum::default();
        self.segments.iter().for_each(|s| acc.add(s.duration * s.value.abs()));
        acc.value()
    }

    pub fn max_abs_value(&self) -> f64 {
        self.segments.iter().fold(0.0, |m, s| m.max(s.value.abs()))
    }

    /// Value on the segment containing `t` (right-continuous; the last value
    /// at `t = T`).
    pub fn value_at(&self, t: f64) -> f64 {
        value_in(&self.breakpoints(), &self.segments, t)
    }

    /// `∫_0^t u`, exact up to rounding since the primitive is piecewise linear.
    pub fn primitive(&self, t: f64) -> f64 {
        let mut acc = CompensatedSum::default();
        let mut start = 0.0;
        let bp = self.breakpoints();
        for (s, &end) in self.segments.iter().zip(&bp[1..]) {
            if t <= start {
                break;
            }
            let len = if t >= end { s.duration } else { t - start };
            acc.add(len * s.value);
            start = end;
        }
        acc.value()
    }

    /// The control followed by `other`.
    pub fn concat(&self, other: &PiecewiseConstantControl) -> Result<Self, SimError> {
        let mut segs = self.segments.clone();
        segs.extend_from_slice(&other.segments);
        let range = match (self.range, other.range) {
            (ValueRange::TwoValue { a }, ValueRange::TwoValue { a: b }) if a == b => self.range,
            _ => {
                return Self::from_segments(segs);
            }
        };
        Self::new(segs, range)
    }

    /// The restriction to `[0, t]`.
    pub fn truncated(&self, t: f64) -> Result<Self, SimError> {
        let mut segs = Vec::new();
        let mut start = 0.0;
        for (s, &end) in self.segments.iter().zip(&self.breakpoints()[1..]) {
            if t <= start {
                break;
            }
            let len = if t >= end { s.duration } else { t - start };
            if len > 0.0 {
                segs.push(Segment::new(len, s.value));
            }
            start = end;
        }
        Self::new(segs, self.range)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ControlFile::from(self)).expect("control is plain data")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let file: ControlFile = serde_json::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        file.try_into()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::from_json(&read(path.as_ref())?)
    }
}

fn value_in(breakpoints: &[f64], segments: &[Segment], t: f64) -> f64 {
    let idx = breakpoints[1..].partition_point(|&b| b <= t).min(segments.len() - 1);
    segments[idx].value
}

fn read(path: &Path) -> Result<String, SimError> {
    std::fs::read_to_string(path).map_err(|source| SimError::Io { path: path.display().to_string(), source })
}

/// The `range` entry of a control file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RangeFile {
    Interval([f64; 2]),
    TwoValue { two_value: f64 },
}

/// On-disk form of a control: `{"segments": [[duration, value], ...], "range": ...}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlFile {
    pub segments: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<RangeFile>,
}

impl From<&PiecewiseConstantControl> for ControlFile {
    fn from(u: &PiecewiseConstantControl) -> Self {
        let range = match u.range {
            ValueRange::Interval { lo, hi } => RangeFile::Interval([lo, hi]),
            ValueRange::TwoValue { a } => RangeFile::TwoValue { two_value: a },
        };
        ControlFile {
            segments: u.segments.iter().map(|s| [s.duration, s.value]).collect(),
            range: Some(range),
        }
    }
}

impl TryFrom<ControlFile> for PiecewiseConstantControl {
    type Error = SimError;

    fn try_from(f: ControlFile) -> Result<Self, SimError> {
        let segments = f.segments.iter().map(|&[d, v]| Segment::new(d, v)).collect();
        match f.range {
            None => Self::from_segments(segments),
            Some(RangeFile::Interval([lo, hi])) => Self::new(segments, ValueRange::Interval { lo, hi }),
            Some(RangeFile::TwoValue { two_value }) => Self::new(segments, ValueRange::TwoValue { a: two_value }),
        }
    }
}

/// Coordinates `⟨φ_k, ψ⟩`, `k = 1..=cutoff`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    coefficients: CVec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    cutoff: usize,
    coefficients: Vec<[f64; 2]>,
}

impl StateVector {
    pub fn new(coefficients: CVec) -> Self {
        StateVector { coefficients }
    }

    /// The eigenvector `φ_k` (1-based).
    pub fn basis(cutoff: usize, k: usize) -> Result<Self, SimError> {
        if k == 0 || k > cutoff {
            return Err(SimError::InvalidState(format!("level {k} outside 1..={cutoff}")));
        }
        let mut v = CVec::zeros(cutoff);
        v[k - 1] = c(1.0, 0.0);
        Ok(StateVector { coefficients: v })
    }

    pub fn cutoff(&self) -> usize {
        self.coefficients.len()
    }

    pub fn coefficients(&self) -> &CVec {
        &self.coefficients
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::vec_norm(&self.coefficients)
    }

    /// Zero-padded or truncated to `cutoff` levels.
    pub fn resized(&self, cutoff: usize) -> Self {
        let mut v = CVec::zeros(cutoff);
        for (k, z) in self.coefficients.iter().enumerate().take(cutoff) {
            v[k] = *z;
        }
        StateVector { coefficients: v }
    }

    /// `Π_n ψ`.
    pub fn project(&self, n: usize) -> CVec {
        self.resized(n).coefficients
    }

    /// Number of levels up to the last nonzero coefficient.
    pub fn support(&self) -> usize {
        self.coefficients.iter().rposition(|z| z.norm() > 0.0).map_or(0, |k| k + 1)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let f = StateFile {
            cutoff: self.cutoff(),
            coefficients: self.coefficients.iter().map(|z| [z.re, z.im]).collect(),
        };
        serde_json::to_value(f).expect("state is plain data")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let f: StateFile = serde_json::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        if f.coefficients.len() > f.cutoff {
            return Err(SimError::InvalidState(format!(
                "{} coefficients exceed cutoff {}",
                f.coefficients.len(),
                f.cutoff
            )));
        }
        if f.cutoff == 0 {
            return Err(SimError::InvalidState("cutoff must be at least 1".into()));
        }
        let v = CVec::from_iterator(f.coefficients.len(), f.coefficients.iter().map(|&[re, im]| c(re, im)));
        Ok(StateVector { coefficients: v }.resized(f.cutoff))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::from_json(&read(path.as_ref())?)
    }
}

/// How control values enter the Hamiltonian.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Semantics {
    /// Values must be 0 or 1; `H(0)` and `H(1)` are used directly, which is
    /// the only setting where a nonlinear-in-control model agrees with the
    /// bilinear one.
    TwoValue,
    /// `A + u·B` for arbitrary real `u`.
    Bilinear,
}

const CACHE_LIMIT: usize = 2048;

/// Segment exponentials at one cutoff, cached per distinct control value.
pub struct Propagator {
    pair: GalerkinPair,
    coupling: CMat,
    cache: HashMap<u64, HermitianExp>,
}

impl Propagator {
    pub fn new(system: &SystemModel, cutoff: usize) -> Result<Self, SimError> {
        let pair = system.truncate(cutoff)?;
        let coupling = pair.coupling();
        Ok(Propagator { pair, coupling, cache: HashMap::new() })
    }

    pub fn pair(&self) -> &GalerkinPair {
        &self.pair
    }

    fn exp_for(&mut self, value: f64) -> &HermitianExp {
        if self.cache.len() >= CACHE_LIMIT && !self.cache.contains_key(&value.to_bits()) {
            self.cache.clear();
        }
        let (h0, cp) = (&self.pair.h0, &self.coupling);
        self.cache
            .entry(value.to_bits())
            .or_insert_with(|| HermitianExp::new(&(h0 + cp * c(value, 0.0))))
    }

    /// `e^{−i dt H(u)}` at this cutoff.
    pub fn segment(&mut self, value: f64, dt: f64) -> CMat {
        if value == 0.0 {
            return drift_phases(&self.pair.eigenvalues, dt);
        }
        self.exp_for(value).unitary(dt)
    }

    pub fn apply_segment(&mut self, value: f64, dt: f64, v: &CVec) -> CVec {
        if value == 0.0 {
            let eig = &self.pair.eigenvalues;
            return CVec::from_fn(v.len(), |k, _| v[k] * C64::from_polar(1.0, -eig[k] * dt));
        }
        self.exp_for(value).apply(dt, v)
    }

    pub fn matrix(&mut self, control: &PiecewiseConstantControl, semantics: Semantics) -> Result<CMat, SimError> {
        check_semantics(control, semantics)?;
        let n = self.pair.n;
        let mut p = CMat::identity(n, n);
        for s in control.segments() {
            p = self.segment(s.value, s.duration) * p;
        }
        Ok(p)
    }

    pub fn apply(
        &mut self,
        control: &PiecewiseConstantControl,
        semantics: Semantics,
        v: &CVec,
    ) -> Result<CVec, SimError> {
        check_semantics(control, semantics)?;
        let mut w = v.clone();
        for s in control.segments() {
            w = self.apply_segment(s.value, s.duration, &w);
        }
        Ok(w)
    }
}

fn check_semantics(control: &PiecewiseConstantControl, semantics: Semantics) -> Result<(), SimError> {
    if semantics == Semantics::TwoValue {
        if let Some((index, s)) = control
            .segments()
            .iter()
            .enumerate()
            .find(|(_, s)| s.value != 0.0 && s.value != 1.0)
        {
            return Err(SimError::NotTwoValued { index: index + 1, value: s.value });
        }
    }
    Ok(())
}

/// Semantics implied by the values: two-value when every value is 0 or 1.
pub fn natural_semantics(control: &PiecewiseConstantControl) -> Semantics {
    if control.segments().iter().all(|s| s.value == 0.0 || s.value == 1.0) {
        Semantics::TwoValue
    } else {
        Semantics::Bilinear
    }
}

/// Applies the propagator of `control` to `state` at `cutoff`.
pub fn propagate(
    system: &SystemModel,
    control: &PiecewiseConstantControl,
    cutoff: usize,
    state: &StateVector,
    semantics: Semantics,
) -> Result<StateVector, SimError> {
    if state.cutoff() != cutoff {
        return Err(SimError::CutoffMismatch { state: state.cutoff(), expected: cutoff });
    }
    let mut prop = Propagator::new(system, cutoff)?;
    Ok(StateVector::new(prop.apply(control, semantics, state.coefficients())?))
}

pub fn propagator_matrix(
    system: &SystemModel,
    control: &PiecewiseConstantControl,
    cutoff: usize,
    semantics: Semantics,
) -> Result<CMat, SimError> {
    Propagator::new(system, cutoff)?.matrix(control, semantics)
}

/// `Θ^(N)(t) = e^{−t a} b e^{t a}`, i.e. `Θ_jk = b_jk e^{i(λ_j − λ_k)t}`.
pub fn theta(system: &SystemModel, t: f64, n: usize) -> Result<CMat, SimError> {
    let pair = system.truncate(n)?;
    Ok(theta_of(&pair.b, &pair.eigenvalues, t))
}

fn theta_of(b: &CMat, eig: &[f64], t: f64) -> CMat {
    CMat::from_fn(b.nrows(), b.ncols(), |j, k| b[(j, k)] * C64::from_polar(1.0, (eig[j] - eig[k]) * t))
}

/// Result of an adaptive interaction-frame integration.
#[derive(Clone, Debug)]
pub struct InteractionRun {
    /// `X_{t_i, s}` at the requested times.
    pub matrices: Vec<CMat>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

struct MagnusStepper<'a> {
    b: &'a CMat,
    eig: &'a [f64],
}

impl MagnusStepper<'_> {
    /// Fourth-order Magnus step for `X' = v Θ(t) X` over `[t, t + h]`.
    fn step(&self, v: f64, t: f64, h: f64) -> CMat {
        let r = 3f64.sqrt() / 6.0;
        let a1 = theta_of(self.b, self.eig, t + (0.5 - r) * h) * c(v, 0.0);
        let a2 = theta_of(self.b, self.eig, t + (0.5 + r) * h) * c(v, 0.0);
        let comm = &a2 * &a1 - &a1 * &a2;
        let omega = (&a1 + &a2) * c(h / 2.0, 0.0) + comm * c(3f64.sqrt() * h * h / 12.0, 0.0);
        expm_skew(&omega)
    }
}

/// `X^(N)_{t_i, s}(v)` for increasing `times`, all `≥ s`.
///
/// Each step is compared against two half steps; the half-step result is kept
/// when their difference is within `step_tol`.
pub fn interaction_propagator_at(
    system: &SystemModel,
    control: &PiecewiseConstantControl,
    n: usize,
    s: f64,
    times: &[f64],
    step_tol: f64,
) -> Result<InteractionRun, SimError> {
    let total = control.total_time();
    let slack = 1e-12 * total.max(1.0);
    if !(s >= 0.0 && s <= total + slack) {
        return Err(SimError::TimeOutOfRange { t: s, total });
    }
    if let Some(&t) = times.iter().find(|&&t| t < s || t > total + slack) {
        return Err(SimError::TimeOutOfRange { t, total });
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(SimError::InvalidControl("requested times must be nondecreasing".into()));
    }
    let pair = system.truncate(n)?;
    let stepper = MagnusStepper { b: &pair.b, eig: &pair.eigenvalues };
    let bp = control.breakpoints();

    // every switch and every requested time becomes a mandatory stop
    let mut stops: Vec<f64> = bp.iter().copied().filter(|&b| b > s).chain(times.iter().copied()).collect();
    stops.push(s);
    stops.sort_by(f64::total_cmp);
    stops.dedup();
    let end = times.last().copied().unwrap_or(s);
    stops.retain(|&x| x >= s && x <= end);

    let mut x = CMat::identity(n, n);
    let mut matrices = Vec::with_capacity(times.len());
    let mut next_time = 0;
    let mut accepted = 0;
    let mut rejected = 0;
    let omega_max = pair.eigenvalues.last().copied().unwrap_or(0.0) - pair.eigenvalues.first().copied().unwrap_or(0.0);
    let mut h = (0.1 / (1.0 + omega_max.abs())).max(1e-6);
    let mut t = s;
    for &stop in &stops {
        while next_time < times.len() && times[next_time] <= t {
            matrices.push(x.clone());
            next_time += 1;
        }
        if stop <= t {
            continue;
        }
        let v = value_in(&bp, control.segments(), 0.5 * (t + stop));
        if v == 0.0 {
            t = stop;
            continue;
        }
        while t < stop {
            let mut hh = h.min(stop - t);
            let last = hh >= stop - t;
            let full = stepper.step(v, t, hh);
            let half = stepper.step(v, t + hh / 2.0, hh / 2.0) * stepper.step(v, t, hh / 2.0);
            let err = crate::linalg::frobenius(&(&full - &half));
            if err <= step_tol {
                x = half * x;
                t = if last { stop } else { t + hh };
                accepted += 1;
                let grow = if err == 0.0 { 2.0 } else { (0.9 * (step_tol / err).powf(0.2)).clamp(0.2, 2.0) };
                if !last || grow < 1.0 {
                    h = hh * grow;
                }
            } else {
                rejected += 1;
                hh *= (0.9 * (step_tol / err).powf(0.2)).clamp(0.1, 0.5);
                h = hh;
                if hh < 1e-14 * (1.0 + t.abs()) {
                    return Err(SimError::StepUnderflow(t));
                }
            }
        }
    }
    while next_time < times.len() {
        matrices.push(x.clone());
        next_time += 1;
    }
    Ok(InteractionRun { matrices, accepted_steps: accepted, rejected_steps: rejected })
}

/// `X^(N)_{t,s}(v)`: the propagator of `v(·) Θ^(N)(·)` from `s` to `t`.
pub fn interaction_propagator(
    system: &SystemModel,
    control: &PiecewiseConstantControl,
    n: usize,
    s: f64,
    t: f64,
    step_tol: f64,
) -> Result<CMat, SimError> {
    let mut run = interaction_propagator_at(system, control, n, s, &[t], step_tol)?;
    Ok(run.matrices.pop().expect("one requested time"))
}

/// `e^{−t a} Υ_t` at cutoff `n`, built from segment exponentials. Equal to
/// `X^(N)_{t,0}` since the compressed drift is diagonal.
pub fn interaction_exact(
    system: &SystemModel,
    control: &PiecewiseConstantControl,
    n: usize,
    t: f64,
) -> Result<CMat, SimError> {
    let mut prop = Propagator::new(system, n)?;
    let upsilon = if t > 0.0 { prop.matrix(&control.truncated(t)?, Semantics::Bilinear)? } else { CMat::identity(n, n) };
    let eig = prop.pair().eigenvalues.clone();
    Ok(drift_phases(&eig, -t) * upsilon)
}

/// `|d/dt ⟨ψ, e^{−tA} Υ_t φ⟩ + ⟨u(t) Θ(t) ψ, e^{−tA} Υ_t φ⟩|` with the
/// derivative taken by central difference of width `h`.
pub fn interaction_derivative_check(
    system: &SystemModel,
    control: &PiecewiseConstantControl,
    psi: &StateVector,
    phi: &StateVector,
    t: f64,
    h: f64,
) -> Result<f64, SimError> {
    let n = psi.cutoff();
    if phi.cutoff() != n {
        return Err(SimError::CutoffMismatch { state: phi.cutoff(), expected: n });
    }
    let bp = control.breakpoints();
    if t - h <= 0.0 || t + h >= control.total_time() || bp.iter().any(|&b| (b - t).abs() <= h) {
        return Err(SimError::SegmentBoundary(t));
    }
    let mut prop = Propagator::new(system, n)?;
    let eig = prop.pair().eigenvalues.clone();
    let b = prop.pair().b.clone();
    let mut frame = |tau: f64| -> Result<CVec, SimError> {
        let moved = prop.apply(&control.truncated(tau)?, Semantics::Bilinear, phi.coefficients())?;
        Ok(drift_phases(&eig, -tau) * moved)
    };
    let plus = psi.coefficients().dotc(&frame(t + h)?);
    let minus = psi.coefficients().dotc(&frame(t - h)?);
    let derivative = (plus - minus) / c(2.0 * h, 0.0);
    let g = frame(t)?;
    let theta_psi = theta_of(&b, &eig, t) * psi.coefficients() * c(control.value_at(t), 0.0);
    Ok((derivative + theta_psi.dotc(&g)).norm())
}

/// `Π_n` of the propagated state at each cutoff.
pub fn tail_scan(
    system: &SystemModel,
    control: &PiecewiseConstantControl,
    cutoffs: &[usize],
    observable_n: usize,
    state: &StateVector,
) -> Result<Vec<(usize, CVec)>, SimError> {
    let Some(&first) = cutoffs.first() else {
        return Err(SimError::InvalidCutoffs("empty".into()));
    };
    if cutoffs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SimError::InvalidCutoffs("cutoffs must increase".into()));
    }
    if first <= observable_n {
        return Err(SimError::InvalidCutoffs(format!("smallest cutoff {first} must exceed {observable_n}")));
    }
    if state.support() > first {
        return Err(SimError::InvalidCutoffs(format!("state reaches level {}", state.support())));
    }
    cutoffs
        .iter()
        .map(|&cut| {
            let out = propagate(system, control, cut, &state.resized(cut), natural_semantics(control))?;
            Ok((cut, out.project(observable_n)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{op_norm, unitarity_defect, vec_norm};
    use crate::model::{builtin_family, parse_system, Params};
    use proptest::prelude::*;

    fn box_model() -> SystemModel {
        builtin_family("box_tridiagonal", &Params::new()).unwrap()
    }

    fn two_level() -> SystemModel {
        parse_system(r#"{"eigenvalues": [0, 1], "coupling": [[1,2,1,0]]}"#).unwrap()
    }

    fn pc(segs: &[(f64, f64)]) -> PiecewiseConstantControl {
        PiecewiseConstantControl::from_segments(segs.iter().map(|&(d, v)| Segment::new(d, v)).collect()).unwrap()
    }

    #[test]
    fn control_validation() {
        assert!(PiecewiseConstantControl::from_segments(vec![]).is_err());
        assert!(PiecewiseConstantControl::from_segments(vec![Segment::new(0.0, 1.0)]).is_err());
        let r = ValueRange::TwoValue { a: 1.0 };
        assert!(PiecewiseConstantControl::new(vec![Segment::new(1.0, 0.5)], r).is_err());
        let u = pc(&[(0.5, 0.3), (0.5, 0.1)]);
        assert_eq!(u.total_time(), 1.0);
        assert!((u.primitive(0.75) - 0.175).abs() < 1e-15);
        assert_eq!(u.value_at(0.5), 0.1);
        assert_eq!(u.value_at(1.0), 0.1);
    }

    #[test]
    fn control_file_round_trip() {
        let u = PiecewiseConstantControl::from_json(r#"{"segments": [[0.5, 0], [0.25, 2]], "range": {"two_value": 2}}"#)
            .unwrap();
        assert_eq!(u.range(), ValueRange::TwoValue { a: 2.0 });
        let back = PiecewiseConstantControl::from_json(&u.to_json().to_string()).unwrap();
        assert_eq!(back, u);
        assert!(PiecewiseConstantControl::from_json(r#"{"segments": [[1, 3]], "range": [0, 1]}"#).is_err());
    }

    #[test]
    fn state_file_pads_and_rejects_overflow() {
        let s = StateVector::from_json(r#"{"cutoff": 3, "coefficients": [[0.6, 0], [0, 0.8]]}"#).unwrap();
        assert_eq!(s.cutoff(), 3);
        assert!((s.norm() - 1.0).abs() < 1e-15);
        assert_eq!(s.support(), 2);
        assert!(StateVector::from_json(r#"{"cutoff": 1, "coefficients": [[1, 0], [0, 0]]}"#).is_err());
    }

    #[test]
    fn zero_control_is_free_evolution() {
        let m = box_model();
        let t = 0.7;
        let p = propagator_matrix(&m, &pc(&[(t, 0.0)]), 5, Semantics::TwoValue).unwrap();
        let expected = drift_phases(&m.eigenvalues(5).unwrap(), t);
        assert!(op_norm(&(p - expected)) < 1e-13);
    }

    #[test]
    fn rabi_closed_form() {
        // H = [[0,1],[1,1]]: exp(-itH) = e^{-it/2}(cos(wt) I - i sin(wt)/w (H - I/2)), w = √5/2
        let t = 1.3;
        let out = propagate(&two_level(), &pc(&[(t, 1.0)]), 2, &StateVector::basis(2, 1).unwrap(), Semantics::TwoValue)
            .unwrap();
        let w = 5f64.sqrt() / 2.0;
        let g = C64::from_polar(1.0, -t / 2.0);
        let e1 = g * c((w * t).cos(), 0.0) - g * c(0.0, (w * t).sin() / w) * c(-0.5, 0.0);
        let e2 = -g * c(0.0, (w * t).sin() / w);
        let o = out.coefficients();
        assert!((o[0] - e1).norm() < 1e-14 && (o[1] - e2).norm() < 1e-14);
    }

    #[test]
    fn two_value_semantics_rejects_other_values() {
        let err = propagator_matrix(&box_model(), &pc(&[(1.0, 0.5)]), 4, Semantics::TwoValue).unwrap_err();
        assert!(matches!(err, SimError::NotTwoValued { index: 1, .. }));
        assert!(propagator_matrix(&box_model(), &pc(&[(1.0, 0.5)]), 4, Semantics::Bilinear).is_ok());
    }

    #[test]
    fn reversal_and_concatenation() {
        let m = box_model();
        let u1 = pc(&[(0.3, 1.0), (0.2, 0.0)]);
        let u2 = pc(&[(0.1, 0.4), (0.6, 1.0)]);
        let p1 = propagator_matrix(&m, &u1, 6, Semantics::Bilinear).unwrap();
        let p2 = propagator_matrix(&m, &u2, 6, Semantics::Bilinear).unwrap();
        let p12 = propagator_matrix(&m, &u1.concat(&u2).unwrap(), 6, Semantics::Bilinear).unwrap();
        assert!(op_norm(&(p12 - &p2 * &p1)) < 1e-12);
        // a constant segment followed by its negative-time inverse
        let mut prop = Propagator::new(&m, 6).unwrap();
        let back = prop.segment(1.0, -0.4) * prop.segment(1.0, 0.4);
        assert!(op_norm(&(back - CMat::identity(6, 6))) < 1e-10);
    }

    #[test]
    fn theta_examples() {
        let m = box_model();
        let pair = m.truncate(2).unwrap();
        assert_eq!(theta(&m, 0.0, 2).unwrap(), pair.b);
        let t = std::f64::consts::PI / 3.0;
        let direct = drift_phases(&pair.eigenvalues, -t) * &pair.b * drift_phases(&pair.eigenvalues, t);
        let th = theta(&m, t, 2).unwrap();
        assert!(op_norm(&(th.clone() - direct)) < 1e-14);
        assert!((th[(0, 1)] - pair.b[(0, 1)] * C64::from_polar(1.0, -3.0 * t)).norm() < 1e-14);
        let diag = parse_system(r#"{"eigenvalues": [0, 1, 4], "coupling": [[1,1,0.5,0],[3,3,-1,0]]}"#).unwrap();
        assert_eq!(theta(&diag, 0.8, 3).unwrap(), diag.truncate(3).unwrap().b);
    }

    #[test]
    fn interaction_trivial_cases() {
        let m = box_model();
        let x = interaction_propagator(&m, &pc(&[(1.0, 0.0)]), 4, 0.0, 1.0, 1e-9).unwrap();
        assert_eq!(x, CMat::identity(4, 4));
        let diag = parse_system(r#"{"eigenvalues": [0, 1, 4], "coupling": [[1,1,0.5,0],[3,3,-1,0]]}"#).unwrap();
        let u = pc(&[(0.4, 0.2), (0.6, 0.7)]);
        let x = interaction_propagator(&diag, &u, 3, 0.0, 1.0, 1e-9).unwrap();
        let expected = expm_skew(&(diag.truncate(3).unwrap().b * c(u.l1_norm(), 0.0)));
        assert!(op_norm(&(x - expected)) < 1e-12);
    }

    #[test]
    fn interaction_matches_segment_exponentials() {
        let m = box_model();
        let u = pc(&[(0.3, 0.8), (0.25, 0.1), (0.45, 0.5)]);
        let run = interaction_propagator_at(&m, &u, 5, 0.0, &[0.2, 0.55, 1.0], 1e-10).unwrap();
        for (x, &t) in run.matrices.iter().zip(&[0.2, 0.55, 1.0]) {
            let exact = interaction_exact(&m, &u, 5, t).unwrap();
            assert!(op_norm(&(x - exact)) < 1e-8, "t={t}");
            assert!(unitarity_defect(x) < 1e-9);
        }
    }

    #[test]
    fn interaction_cocycle() {
        let m = box_model();
        let u = pc(&[(0.5, 0.6), (0.5, 0.2)]);
        let tol = 1e-10;
        let x_ts = interaction_propagator(&m, &u, 4, 0.3, 0.9, tol).unwrap();
        let x_sr = interaction_propagator(&m, &u, 4, 0.1, 0.3, tol).unwrap();
        let x_tr = interaction_propagator(&m, &u, 4, 0.1, 0.9, tol).unwrap();
        assert!(op_norm(&(x_ts * x_sr - x_tr)) < 10.0 * tol * 100.0);
    }

    #[test]
    fn derivative_identity() {
        let m = box_model();
        let psi = StateVector::basis(10, 1).unwrap();
        let zero = pc(&[(1.0, 0.0)]);
        assert!(interaction_derivative_check(&m, &zero, &psi, &psi, 0.5, 1e-3).unwrap() < 1e-12);
        let u = pc(&[(1.0, 0.3)]);
        let r1 = interaction_derivative_check(&m, &u, &psi, &psi, 0.5, 1e-4).unwrap();
        let r2 = interaction_derivative_check(&m, &u, &psi, &psi, 0.5, 5e-5).unwrap();
        assert!(r1 <= 1e-6, "{r1}");
        assert!((3.5..=4.5).contains(&(r1 / r2)), "{}", r1 / r2);
        assert!(matches!(
            interaction_derivative_check(&m, &pc(&[(0.5, 0.3), (0.5, 0.1)]), &psi, &psi, 0.5, 1e-4).unwrap_err(),
            SimError::SegmentBoundary(_)
        ));
    }

    #[test]
    fn tail_scan_cases() {
        let m = box_model();
        let psi = StateVector::basis(3, 1).unwrap();
        let free = tail_scan(&m, &pc(&[(1.0, 0.0)]), &[6, 10, 14], 3, &psi).unwrap();
        assert!(free.windows(2).all(|w| w[0].1 == w[1].1));
        let u = pc(&[(0.4, 0.6), (0.6, 0.2)]);
        let scan = tail_scan(&m, &u, &[12, 16, 20, 24], 3, &psi).unwrap();
        let diffs: Vec<f64> = scan.windows(2).map(|w| vec_norm(&(&w[1].1 - &w[0].1))).collect();
        assert!(diffs.iter().all(|&d| d < 1e-6), "{diffs:?}");
        assert!(tail_scan(&m, &u, &[3, 6], 3, &psi).is_err());
        assert!(tail_scan(&m, &u, &[8, 6], 3, &psi).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn propagation_preserves_norm(
            segs in prop::collection::vec((0.01f64..0.5, prop::bool::ANY), 1..20),
            level in 1usize..8,
        ) {
            let u = pc(&segs.iter().map(|&(d, on)| (d, if on { 1.0 } else { 0.0 })).collect::<Vec<_>>());
            let p = propagator_matrix(&box_model(), &u, 8, Semantics::TwoValue).unwrap();
            prop_assert!(unitarity_defect(&p) <= UNITARITY_TOL);
            let out = propagate(&box_model(), &u, 8, &StateVector::basis(8, level).unwrap(), Semantics::TwoValue).unwrap();
            prop_assert!((out.norm() - 1.0).abs() <= 1e-10);
        }
    }
}
