//! Conversion of `[0, δ]`-valued controls into `{0, a}`-valued ones with the
//! same mass on each of `k` equal intervals, and the convergence harness that
//! measures how the interaction-frame propagators approach each other.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{op_norm, CompensatedSum};
use crate::model::SystemModel;
use crate::sim::{interaction_propagator_at, PiecewiseConstantControl, Segment, SimError, ValueRange};

#[derive(Debug, Error)]
pub enum BangBangError {
    #[error("switch amplitude a = {a} is below the control maximum {delta}")]
    AmplitudeTooSmall { a: f64, delta: f64 },
    #[error("control takes the negative value {0}")]
    NegativeValue(f64),
    #[error("need k ≥ 1")]
    ZeroIntervals,
    #[error("horizons differ: {0} vs {1}")]
    HorizonMismatch(f64, f64),
    #[error("interval counts must increase: {0:?}")]
    UnsortedKs(Vec<usize>),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// `∫_lo^hi u`, summed with compensation.
pub fn integral_over(u: &PiecewiseConstantControl, lo: f64, hi: f64) -> f64 {
    let mut acc = CompensatedSum::default();
    let bp = u.breakpoints();
    for (s, w) in u.segments().iter().zip(bp.windows(2)) {
        let a = w[0].max(lo);
        let b = w[1].min(hi);
        if b > a {
            acc.add(s.value * (b - a));
        }
    }
    acc.value()
}

/// `∫ u` over each `[edges[i], edges[i+1]]`, for increasing `edges`, in one sweep.
pub fn interval_masses(u: &PiecewiseConstantControl, edges: &[f64]) -> Vec<f64> {
    let bp = u.breakpoints();
    let segs = u.segments();
    let mut first = 0;
    edges
        .windows(2)
        .map(|e| {
            while first < segs.len() && bp[first + 1] <= e[0] {
                first += 1;
            }
            let mut acc = CompensatedSum::default();
            let mut j = first;
            while j < segs.len() && bp[j] < e[1] {
                let len = bp[j + 1].min(e[1]) - bp[j].max(e[0]);
                if len > 0.0 {
                    acc.add(segs[j].value * len);
                }
                j += 1;
            }
            acc.value()
        })
        .collect()
}

/// Endpoints `h·T/k`, `h = 0..=k`.
pub fn interval_edges(total: f64, k: usize) -> Vec<f64> {
    (0..=k).map(|h| if h == k { total } else { total * h as f64 / k as f64 }).collect()
}

/// On each interval `I_h` emits `0` for `|I_h| − U_h/a`, then `a` for
/// `U_h/a`, where `U_h = ∫_{I_h} u`. Zero-length pieces are dropped.
pub fn bangbangify(u: &PiecewiseConstantControl, a: f64, k: usize) -> Result<PiecewiseConstantControl, BangBangError> {
    if k == 0 {
        return Err(BangBangError::ZeroIntervals);
    }
    let delta = u.segments().iter().map(|s| s.value).fold(0.0, f64::max);
    if let Some(s) = u.segments().iter().find(|s| s.value < 0.0) {
        return Err(BangBangError::NegativeValue(s.value));
    }
    // a equal to the largest value is admitted: the construction stays valid
    if a < delta {
        return Err(BangBangError::AmplitudeTooSmall { a, delta });
    }
    let edges = interval_edges(u.total_time(), k);
    let mut segments = Vec::with_capacity(2 * k);
    for (w, mass) in edges.windows(2).zip(interval_masses(u, &edges)) {
        let on = mass / a;
        let off = (w[1] - w[0]) - on;
        if off > 0.0 {
            segments.push(Segment::new(off, 0.0));
        }
        if on > 0.0 {
            segments.push(Segment::new(on, a));
        }
    }
    if segments.is_empty() {
        return Err(SimError::InvalidControl("zero-length control".into()).into());
    }
    Ok(PiecewiseConstantControl::new(segments, ValueRange::TwoValue { a })?)
}

/// `∫_0^t u` at each of the increasing `points`, in one sweep.
fn primitives_at(u: &PiecewiseConstantControl, points: &[f64]) -> Vec<f64> {
    let bp = u.breakpoints();
    let segs = u.segments();
    let mut out = Vec::with_capacity(points.len());
    let mut done = CompensatedSum::default();
    let mut idx = 0;
    for &t in points {
        while idx < segs.len() && bp[idx + 1] <= t {
            done.add(segs[idx].value * segs[idx].duration);
            idx += 1;
        }
        let partial = if idx < segs.len() && t > bp[idx] { segs[idx].value * (t - bp[idx]) } else { 0.0 };
        out.push(done.value() + partial);
    }
    out
}

fn check_horizons(u: &PiecewiseConstantControl, w: &PiecewiseConstantControl) -> Result<f64, BangBangError> {
    let (tu, tw) = (u.total_time(), w.total_time());
    if (tu - tw).abs() > 1e-12 * tu.max(1.0) {
        return Err(BangBangError::HorizonMismatch(tu, tw));
    }
    Ok(tu)
}

/// `sup_t |∫_0^t (u − w)|` over all switches of both controls plus a uniform
/// grid of ten points per segment. Exact at the switches, where the
/// difference of primitives attains its extrema.
pub fn primitive_error(u: &PiecewiseConstantControl, w: &PiecewiseConstantControl) -> Result<f64, BangBangError> {
    let total = check_horizons(u, w)?;
    let grid = 10 * (u.segments().len() + w.segments().len());
    let mut points: Vec<f64> = u.breakpoints();
    points.extend(w.breakpoints());
    points.extend((0..=grid).map(|i| total * i as f64 / grid as f64));
    points.sort_by(f64::total_cmp);
    points.dedup();
    let pu = primitives_at(u, &points);
    let pw = primitives_at(w, &points);
    Ok(pu.iter().zip(&pw).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// `|∫_{I_h} (u − w)|` for each of the `k` equal intervals.
pub fn interval_mass_errors(
    u: &PiecewiseConstantControl,
    w: &PiecewiseConstantControl,
    k: usize,
) -> Result<Vec<f64>, BangBangError> {
    let total = check_horizons(u, w)?;
    let edges = interval_edges(total, k);
    let mu = interval_masses(u, &edges);
    let mw = interval_masses(w, &edges);
    Ok(mu.iter().zip(&mw).map(|(x, y)| (x - y).abs()).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub k: usize,
    pub primitive_error: f64,
    pub propagator_error: f64,
}

/// Time grid used by [`convergence_run`].
pub const CONVERGENCE_GRID: usize = 20;

/// For each `k`, the primitive error of `bangbangify(u, a, k)` and the largest
/// `‖X_{t,s}(w_k) − X_{t,s}(u)‖` over a uniform `(s, t)` grid.
pub fn convergence_run(
    system: &SystemModel,
    u: &PiecewiseConstantControl,
    a: f64,
    ks: &[usize],
    n: usize,
    step_tol: f64,
) -> Result<Vec<ConvergenceRow>, BangBangError> {
    if ks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BangBangError::UnsortedKs(ks.to_vec()));
    }
    let total = u.total_time();
    let times = interval_edges(total, CONVERGENCE_GRID);
    let reference = interaction_propagator_at(system, u, n, 0.0, &times, step_tol)?.matrices;
    ks.iter()
        .map(|&k| {
            let w = bangbangify(u, a, k)?;
            let xs = interaction_propagator_at(system, &w, n, 0.0, &times, step_tol)?.matrices;
            let mut worst: f64 = 0.0;
            for j in 0..times.len() {
                for i in 0..j {
                    // X_{t,s} = X_{t,0} X_{s,0}^†
                    let xw = &xs[j] * xs[i].adjoint();
                    let xu = &reference[j] * reference[i].adjoint();
                    worst = worst.max(op_norm(&(xw - xu)));
                }
                worst = worst.max(op_norm(&(&xs[j] - &reference[j])));
            }
            Ok(ConvergenceRow { k, primitive_error: primitive_error(u, &w)?, propagator_error: worst })
        })
        .collect()
}
