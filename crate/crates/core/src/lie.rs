//! Generated Lie algebras, the Lie–Galerkin search and connectedness chains.
//!
//! Matrices in `u(n)` are handled as real vectors of length `2n²` under the
//! Hilbert–Schmidt inner product `⟨X, Y⟩ = Re tr(X†Y)`. The closure of a
//! generator set is computed by modified Gram–Schmidt over brackets of the
//! current basis, so the admitted elements form an orthonormal basis.
//!
//! Containment of `su(n)` is decided on the traceless projections
//! `X ↦ X − tr(X)/n · I` of the basis. This projection is a Lie algebra
//! homomorphism `u(n) → su(n)`, and `su(n)` is perfect, so if the projections
//! of a bracket-closed `L` span `su(n)` then `su(n) = [su(n), su(n)]` is
//! spanned by brackets of elements of `L` (the central parts drop out of
//! brackets), hence `su(n) ⊆ L`. The converse is immediate.

use std::collections::VecDeque;

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{c, skew_defect, CMat, C64, I};
use crate::model::{ModelError, SystemModel};
use crate::spectral::{gaps_equal, select, xi_set, SpectralError, XiSet, GAP_TOL, MAX_TAIL_LEVELS};

pub const DEFAULT_RANK_TOL: f64 = 1e-9;
/// Default `ν` used when sampling `W_n`.
pub const DEFAULT_NU: f64 = 0.25;
const TAIL_CONFIRM_WINDOW: usize = 256;

#[derive(Debug, Error)]
pub enum LieError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("generator {index} is not skew-Hermitian (defect {defect:e})")]
    NotSkewHermitian { index: usize, defect: f64 },
    #[error("ν = {0} lies outside the open interval (-1/2, 1/2)")]
    NuOutOfRange(f64),
    #[error("bracket closure stopped at depth cap {0} before closing")]
    NotClosed(usize),
    #[error("need n_max ≥ n0 + 1, got n0={n0}, n_max={n_max}")]
    EmptySearch { n0: usize, n_max: usize },
    #[error("coupling graph on the first {levels} levels is disconnected: {components:?}")]
    Disconnected { levels: usize, components: Vec<Vec<usize>> },
    #[error("need at least two levels, got {0}")]
    TooFewLevels(usize),
    #[error("tail is undecidable: {0}")]
    UndecidableTail(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `XY − YX`.
pub fn bracket(x: &CMat, y: &CMat) -> Result<CMat, LieError> {
    if x.shape() != y.shape() || x.nrows() != x.ncols() {
        return Err(LieError::ShapeMismatch(x.shape(), y.shape()));
    }
    Ok(x * y - y * x)
}

fn to_real(m: &CMat) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 * m.len());
    v.extend(m.iter().map(|z| z.re));
    v.extend(m.iter().map(|z| z.im));
    v
}

fn from_real(v: &[f64], n: usize) -> CMat {
    let half = n * n;
    CMat::from_iterator(n, n, (0..half).map(|i| C64::new(v[i], v[half + i])))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormal set of real vectors grown by twice-iterated Gram–Schmidt.
#[derive(Clone, Debug, Default)]
struct Orthonormal {
    vectors: Vec<Vec<f64>>,
}

impl Orthonormal {
    /// Residual of `v` after projection onto the span.
    fn residual(&self, v: &[f64]) -> Vec<f64> {
        let mut r = v.to_vec();
        for _ in 0..2 {
            for q in &self.vectors {
                let p = dot(q, &r);
                r.iter_mut().zip(q).for_each(|(ri, qi)| *ri -= p * qi);
            }
        }
        r
    }

    /// Admits `v` if its residual exceeds `tol` relative to `max(1, ‖v‖)`.
    fn admit(&mut self, v: &[f64], tol: f64) -> bool {
        let scale = norm(v).max(1.0);
        let r = self.residual(v);
        let rn = norm(&r);
        if rn > tol * scale {
            self.vectors.push(r.into_iter().map(|x| x / rn).collect());
            true
        } else {
            false
        }
    }
}

/// Which matrix collection generated an algebra.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CollectionTag {
    /// `{i H0^(n)} ∪ {i E_σ(H1^(n)) : σ ∈ Ξ_n}`
    M,
    /// `{A^(n), E_0(B^(n))} ∪ {E_0(B^(n)) + ν E_σ(B^(n))}`
    W,
    /// `{A^(n)} ∪ {E_σ(B^(n)) : σ ∈ Ξ_n}`
    V,
    Custom,
}

#[derive(Clone, Debug)]
pub struct GeneratorSet {
    pub tag: CollectionTag,
    pub n: usize,
    pub matrices: Vec<CMat>,
    pub labels: Vec<String>,
}

/// Real span closed under brackets, with an orthonormal basis.
#[derive(Clone, Debug)]
pub struct AlgebraBasis {
    pub n: usize,
    pub basis: Vec<CMat>,
    pub dim: usize,
    pub depth_used: usize,
    pub closed: bool,
    /// No bracket of basis elements survived the rank test.
    pub abelian: bool,
    pub generators_tag: CollectionTag,
    pub rank_tol: f64,
}

impl AlgebraBasis {
    /// Norm of the component of `m` orthogonal to the algebra.
    pub fn residual_norm(&self, m: &CMat) -> f64 {
        let ortho = Orthonormal { vectors: self.basis.iter().map(to_real).collect() };
        norm(&ortho.residual(&to_real(m)))
    }
}

/// Default depth cap `2n²`.
pub fn default_depth_cap(n: usize) -> usize {
    2 * n * n
}

/// Real Lie algebra generated by skew-Hermitian `generators`.
///
/// Generators sit at depth 1; a bracket of elements at depths `d1`, `d2` sits
/// at `max(d1, d2) + 1`. Brackets deeper than `depth_cap` are not formed, in
/// which case the result is reported with `closed == false`.
pub fn generated_algebra(
    generators: &[CMat],
    depth_cap: usize,
    rank_tol: f64,
) -> Result<AlgebraBasis, LieError> {
    generated_algebra_tagged(generators, depth_cap, rank_tol, CollectionTag::Custom)
}

pub fn generated_algebra_tagged(
    generators: &[CMat],
    depth_cap: usize,
    rank_tol: f64,
    tag: CollectionTag,
) -> Result<AlgebraBasis, LieError> {
    let n = generators.first().map(|g| g.nrows()).unwrap_or(0);
    for (index, g) in generators.iter().enumerate() {
        if g.shape() != (n, n) {
            return Err(LieError::ShapeMismatch((n, n), g.shape()));
        }
        let defect = skew_defect(g);
        let scale = g.iter().fold(1.0_f64, |acc, z| acc.max(z.norm()));
        if defect > 1e-12 * scale {
            return Err(LieError::NotSkewHermitian { index, defect });
        }
    }
    let full = n * n;
    let mut ortho = Orthonormal::default();
    let mut depth: Vec<usize> = Vec::new();
    for g in generators {
        if ortho.admit(&to_real(g), rank_tol) {
            depth.push(1);
        }
    }
    let mut abelian = true;
    let mut truncated = false;
    let mut i = 0;
    while i < ortho.vectors.len() && ortho.vectors.len() < full {
        let xi = from_real(&ortho.vectors[i], n);
        for j in 0..i {
            let d = depth[i].max(depth[j]) + 1;
            if d > depth_cap {
                truncated = true;
                continue;
            }
            let xj = from_real(&ortho.vectors[j], n);
            let br = &xi * &xj - &xj * &xi;
            let v = to_real(&br);
            if norm(&v) > rank_tol {
                abelian = false;
            }
            if ortho.admit(&v, rank_tol) {
                depth.push(d);
                if ortho.vectors.len() == full {
                    break;
                }
            }
        }
        i += 1;
    }
    let dim = ortho.vectors.len();
    let closed = dim == full || !truncated;
    let basis: Vec<CMat> = ortho.vectors.iter().map(|v| from_real(v, n)).collect();
    if dim == full {
        // u(n) itself is not abelian for n ≥ 2
        abelian = n < 2;
    }
    Ok(AlgebraBasis {
        n,
        basis,
        dim,
        depth_used: depth.iter().copied().max().unwrap_or(0),
        closed,
        abelian,
        generators_tag: tag,
        rank_tol,
    })
}

/// Real dimension of the span of the traceless projections of the basis.
pub fn traceless_dimension(basis: &AlgebraBasis) -> usize {
    let n = basis.n;
    let mut ortho = Orthonormal::default();
    for x in &basis.basis {
        let tr = x.trace() / n as f64;
        let mut p = x.clone();
        for k in 0..n {
            p[(k, k)] -= tr;
        }
        ortho.admit(&to_real(&p), basis.rank_tol);
    }
    ortho.vectors.len()
}

/// Whether the (closed) algebra contains `su(n)`.
pub fn contains_su(basis: &AlgebraBasis) -> Result<bool, LieError> {
    if !basis.closed {
        return Err(LieError::NotClosed(basis.depth_used));
    }
    let n = basis.n;
    Ok(traceless_dimension(basis) + 1 == n * n || n <= 1)
}

fn xi_selections(system: &SystemModel, n: usize) -> Result<(XiSet, crate::model::GalerkinPair), LieError> {
    let xi = xi_set(system, n)?;
    let pair = system.truncate(n)?;
    Ok((xi, pair))
}

/// `M_n = {i H0^(n)} ∪ {i E_σ(H1^(n)) : σ ∈ Ξ_n}`.
pub fn build_mn(system: &SystemModel, n: usize) -> Result<GeneratorSet, LieError> {
    let (xi, pair) = xi_selections(system, n)?;
    let mut matrices = vec![&pair.h0 * I];
    let mut labels = vec!["i*H0".to_string()];
    for &sigma in &xi.members {
        matrices.push(select(&pair.h1, sigma, &pair.eigenvalues) * I);
        labels.push(format!("i*E_{sigma}(H1)"));
    }
    Ok(GeneratorSet { tag: CollectionTag::M, n, matrices, labels })
}

/// `V_n = {A^(n)} ∪ {E_σ(B^(n)) : σ ∈ Ξ_n}`.
pub fn build_vn(system: &SystemModel, n: usize) -> Result<GeneratorSet, LieError> {
    let (xi, pair) = xi_selections(system, n)?;
    let mut matrices = vec![pair.a.clone()];
    let mut labels = vec!["A".to_string()];
    for &sigma in &xi.members {
        matrices.push(select(&pair.b, sigma, &pair.eigenvalues));
        labels.push(format!("E_{sigma}(B)"));
    }
    Ok(GeneratorSet { tag: CollectionTag::V, n, matrices, labels })
}

/// `W_n` sampled at the given `ν` values.
pub fn build_wn(system: &SystemModel, n: usize, nus: &[f64]) -> Result<GeneratorSet, LieError> {
    if let Some(&bad) = nus.iter().find(|&&nu| !(nu > -0.5 && nu < 0.5)) {
        return Err(LieError::NuOutOfRange(bad));
    }
    let (xi, pair) = xi_selections(system, n)?;
    let e0 = select(&pair.b, 0.0, &pair.eigenvalues);
    let mut matrices = vec![pair.a.clone(), e0.clone()];
    let mut labels = vec!["A".to_string(), "E_0(B)".to_string()];
    for sigma in xi.nonzero_members() {
        let es = select(&pair.b, sigma, &pair.eigenvalues);
        for &nu in nus {
            matrices.push(&e0 + &es * c(nu, 0.0));
            labels.push(format!("E_0(B)+{nu}*E_{sigma}(B)"));
        }
    }
    Ok(GeneratorSet { tag: CollectionTag::W, n, matrices, labels })
}

pub fn algebra_of(set: &GeneratorSet, depth_cap: usize, rank_tol: f64) -> Result<AlgebraBasis, LieError> {
    generated_algebra_tagged(&set.matrices, depth_cap, rank_tol, set.tag)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum FailureReason {
    /// `0 ∉ Ξ_n`.
    ZeroGapCoupled,
    /// All brackets vanish.
    Abelian,
    DepthCapReached { depth_cap: usize },
    DimensionDeficit { traceless_dim: usize, needed: usize },
}

#[derive(Clone, Debug, Serialize)]
pub struct Attempt {
    pub n: usize,
    pub zero_in_xi: bool,
    pub dim: Option<usize>,
    pub traceless_dim: Option<usize>,
    pub depth_used: Option<usize>,
    pub failure: Option<FailureReason>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LieGalerkinCertificate {
    pub n: usize,
    pub xi: XiSet,
    pub dim: usize,
    pub traceless_dim: usize,
    pub depth_used: usize,
    pub depth_cap: usize,
    pub rank_tol: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SearchOutcome {
    pub n0: usize,
    pub n_max: usize,
    pub certified: Option<LieGalerkinCertificate>,
    pub attempts: Vec<Attempt>,
    /// Only finitely many orders are examined.
    pub scope: &'static str,
}

/// Scans `n = n0+1 ..= n_max` for the first order where `0 ∈ Ξ_n` and
/// `Lie(M_n) ⊇ su(n)`.
pub fn lie_galerkin_search(
    system: &SystemModel,
    n0: usize,
    n_max: usize,
    rank_tol: f64,
) -> Result<SearchOutcome, LieError> {
    if n_max < n0 + 1 {
        return Err(LieError::EmptySearch { n0, n_max });
    }
    let mut attempts = Vec::new();
    let mut certified = None;
    for n in (n0 + 1)..=n_max {
        let xi = xi_set(system, n)?;
        let mut attempt = Attempt {
            n,
            zero_in_xi: xi.contains_zero(),
            dim: None,
            traceless_dim: None,
            depth_used: None,
            failure: None,
        };
        if !attempt.zero_in_xi {
            attempt.failure = Some(FailureReason::ZeroGapCoupled);
            attempts.push(attempt);
            continue;
        }
        let depth_cap = default_depth_cap(n);
        let algebra = algebra_of(&build_mn(system, n)?, depth_cap, rank_tol)?;
        attempt.dim = Some(algebra.dim);
        attempt.depth_used = Some(algebra.depth_used);
        let tdim = traceless_dimension(&algebra);
        attempt.traceless_dim = Some(tdim);
        let needed = n * n - 1;
        if !algebra.closed {
            attempt.failure = Some(FailureReason::DepthCapReached { depth_cap });
        } else if n >= 2 && algebra.abelian {
            attempt.failure = Some(FailureReason::Abelian);
        } else if contains_su(&algebra)? {
            certified = Some(LieGalerkinCertificate {
                n,
                xi,
                dim: algebra.dim,
                traceless_dim: tdim,
                depth_used: algebra.depth_used,
                depth_cap,
                rank_tol,
            });
            attempts.push(attempt);
            break;
        } else {
            attempt.failure = Some(FailureReason::DimensionDeficit { traceless_dim: tdim, needed });
        }
        attempts.push(attempt);
    }
    Ok(SearchOutcome {
        n0,
        n_max,
        certified,
        attempts,
        scope: "finite certificate over the scanned orders only",
    })
}

/// Whether `Lie(V_n)` and `Lie(M_n)` coincide.
pub fn vn_equivalence_check(system: &SystemModel, n: usize, rank_tol: f64) -> Result<bool, LieError> {
    let cap = default_depth_cap(n);
    let v = algebra_of(&build_vn(system, n)?, cap, rank_tol)?;
    let m = algebra_of(&build_mn(system, n)?, cap, rank_tol)?;
    if !v.closed {
        return Err(LieError::NotClosed(v.depth_used));
    }
    if !m.closed {
        return Err(LieError::NotClosed(m.depth_used));
    }
    let inside = |a: &AlgebraBasis, b: &AlgebraBasis| a.basis.iter().all(|x| b.residual_norm(x) < rank_tol);
    Ok(v.dim == m.dim && inside(&v, &m) && inside(&m, &v))
}

// ---------------------------------------------------------------------------
// Connectedness chains

#[derive(Clone, Debug, Serialize)]
pub struct ResonanceWitness {
    pub chain_pair: (usize, usize),
    pub resonant_pair: (usize, usize),
    pub gap: f64,
}

/// A connectedness chain with its non-resonance and degeneracy verdicts.
#[derive(Clone, Debug, Serialize)]
pub struct Chain {
    pub levels: usize,
    pub pairs: Vec<(usize, usize)>,
    pub nonresonant: bool,
    pub resonance_witnesses: Vec<ResonanceWitness>,
    /// `b_{l,k} = 0` whenever `l ≠ k` and `λ_l = λ_k`.
    pub degeneracy_ok: bool,
    pub degeneracy_witnesses: Vec<(usize, usize)>,
    /// Coupled pairs were compared up to this level index.
    pub tail_cutoff: usize,
    /// Extra levels over which the band gaps were confirmed to stay above the
    /// largest chain gap (0 when the support is finite).
    pub tail_window: usize,
}

impl Chain {
    /// Non-resonant chain plus degeneracy hypothesis: sufficient for the
    /// Lie–Galerkin condition.
    pub fn implies_lie_galerkin(&self) -> bool {
        self.nonresonant && self.degeneracy_ok
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("chain report is plain data")
    }
}

/// All coupled pairs `(t1 ≤ t2)` relevant for gaps up to `max_gap`, and the
/// index up to which they were enumerated.
fn coupled_pairs(
    system: &SystemModel,
    levels: usize,
    max_gap: f64,
) -> Result<(Vec<(usize, usize)>, usize, usize), LieError> {
    let coupling = system.coupling();
    let mut pairs: Vec<(usize, usize)> = coupling.explicit_entries().map(|(k, _)| k).collect();
    let mut cutoff = levels.max(pairs.iter().map(|p| p.1).max().unwrap_or(0));
    let mut window = 0;
    let tail_start = system.tail_start().unwrap_or(usize::MAX);
    for bd in coupling.band() {
        let d = bd.offset;
        let mut t = 1;
        let mut confirmed = 0;
        let mut escaped_at = None;
        loop {
            if t + d > MAX_TAIL_LEVELS {
                return Err(LieError::Spectral(SpectralError::TailCapExceeded));
            }
            let gap = match (system.eigenvalue(t), system.eigenvalue(t + d)) {
                (Ok(a), Ok(b)) => (b - a).abs(),
                _ => {
                    return Err(LieError::UndecidableTail(format!(
                        "band diagonal {d} couples levels past the listed eigenvalues"
                    )))
                }
            };
            let beyond = t >= levels && t >= tail_start && gap > max_gap + GAP_TOL;
            if beyond {
                escaped_at.get_or_insert(t);
                confirmed += 1;
                if confirmed >= TAIL_CONFIRM_WINDOW {
                    break;
                }
            } else {
                if escaped_at.is_some() {
                    // gap fell back below the threshold; keep enumerating
                    escaped_at = None;
                    confirmed = 0;
                }
                pairs.push((t, t + d));
            }
            t += 1;
        }
        let esc = escaped_at.expect("loop exits only after escaping");
        cutoff = cutoff.max(esc + d - 1);
        window = window.max(TAIL_CONFIRM_WINDOW);
    }
    pairs.sort_unstable();
    pairs.dedup();
    pairs.retain(|&(a, b)| coupling.is_coupled(a, b));
    Ok((pairs, cutoff, window))
}

/// Finds a connectedness chain among the first `levels` levels and checks
/// its non-resonance and the degeneracy hypothesis.
pub fn chain_check(system: &SystemModel, levels: usize) -> Result<Chain, LieError> {
    if levels < 2 {
        return Err(LieError::TooFewLevels(levels));
    }
    let eig = system.eigenvalues(levels)?;
    let coupling = system.coupling();
    let edge_gap = |a: usize, b: usize| (eig[a - 1] - eig[b - 1]).abs();

    // edges inside the requested levels, with how many edges share their gap
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for j in 1..=levels {
        for k in coupling.neighbours(j) {
            if k > j && k <= levels {
                edges.push((j, k));
            }
        }
    }
    let multiplicity = |g: f64| edges.iter().filter(|&&(a, b)| gaps_equal(edge_gap(a, b), g)).count();

    // breadth-first spanning tree from level 1, unique gaps first
    let mut parent: Vec<Option<usize>> = vec![None; levels + 1];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); levels + 1];
    let mut seen = vec![false; levels + 1];
    let mut queue = VecDeque::from([1]);
    seen[1] = true;
    while let Some(v) = queue.pop_front() {
        let mut nbrs: Vec<usize> = coupling
            .neighbours(v)
            .into_iter()
            .filter(|&k| k != v && k <= levels && !seen[k])
            .collect();
        nbrs.sort_by_key(|&k| (multiplicity(edge_gap(v, k)) > 1, k));
        for k in nbrs {
            seen[k] = true;
            parent[k] = Some(v);
            children[v].push(k);
            queue.push_back(k);
        }
    }
    if seen[1..].iter().any(|s| !s) {
        return Err(LieError::Disconnected { levels, components: components(system, levels) });
    }

    // linked walk over the tree, stopping once every level has been reached
    let mut tour: Vec<(usize, usize)> = Vec::new();
    let mut last_new = 0;
    let mut stack: Vec<(usize, usize)> = vec![(1, 0)];
    while let Some(&mut (v, ref mut next)) = stack.last_mut() {
        if *next < children[v].len() {
            let child = children[v][*next];
            *next += 1;
            tour.push((v, child));
            last_new = tour.len();
            stack.push((child, 0));
        } else {
            stack.pop();
            if let Some(&(p, _)) = stack.last() {
                tour.push((v, p));
            }
        }
    }
    tour.truncate(last_new);
    let _ = parent;

    let max_gap = tour.iter().map(|&(a, b)| edge_gap(a, b)).fold(0.0, f64::max);
    let (pairs, cutoff, window) = coupled_pairs(system, levels, max_gap)?;

    let mut witnesses = Vec::new();
    for &(s1, s2) in &tour {
        let g = edge_gap(s1, s2);
        if witnesses.iter().any(|w: &ResonanceWitness| w.chain_pair == (s1, s2)) {
            continue;
        }
        for &(t1, t2) in &pairs {
            if (t1, t2) == (s1, s2) || (t1, t2) == (s2, s1) {
                continue;
            }
            let gt = (system.eigenvalue(t2)? - system.eigenvalue(t1)?).abs();
            if gaps_equal(g, gt) {
                witnesses.push(ResonanceWitness { chain_pair: (s1, s2), resonant_pair: (t1, t2), gap: g });
                break;
            }
        }
    }

    let mut degeneracy_witnesses = Vec::new();
    let upto = cutoff.max(levels);
    let values = system.eigenvalues(upto).or_else(|_| system.eigenvalues(levels))?;
    for l in 1..=values.len() {
        for k in (l + 1)..=values.len() {
            if values[k - 1] - values[l - 1] > GAP_TOL {
                break;
            }
            if coupling.is_coupled(l, k) {
                degeneracy_witnesses.push((l, k));
            }
        }
    }

    Ok(Chain {
        levels,
        pairs: tour,
        nonresonant: witnesses.is_empty(),
        resonance_witnesses: witnesses,
        degeneracy_ok: degeneracy_witnesses.is_empty(),
        degeneracy_witnesses,
        tail_cutoff: cutoff,
        tail_window: window,
    })
}

fn components(system: &SystemModel, levels: usize) -> Vec<Vec<usize>> {
    let mut label = vec![0usize; levels + 1];
    let mut out = Vec::new();
    for start in 1..=levels {
        if label[start] != 0 {
            continue;
        }
        let id = out.len() + 1;
        let mut comp = vec![start];
        label[start] = id;
        let mut i = 0;
        while i < comp.len() {
            let v = comp[i];
            for k in system.coupling().neighbours(v) {
                if k <= levels && label[k] == 0 {
                    label[k] = id;
                    comp.push(k);
                }
            }
            i += 1;
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_family, parse_system, Params};

    fn box_model() -> SystemModel {
        builtin_family("box_tridiagonal", &Params::new()).unwrap()
    }

    fn zero_model() -> SystemModel {
        builtin_family("box_tridiagonal", &Params::from([("c".to_string(), 0.0.into())])).unwrap()
    }

    fn m2(a: [C64; 4]) -> CMat {
        CMat::from_row_slice(2, 2, &a)
    }

    #[test]
    fn bracket_examples() {
        let x = m2([c(0., 1.), c(0., 0.), c(0., 0.), c(0., -1.)]);
        let y = m2([c(0., 0.), c(1., 0.), c(-1., 0.), c(0., 0.)]);
        assert_eq!(bracket(&x, &x).unwrap(), CMat::zeros(2, 2));
        let expected = m2([c(0., 0.), c(0., 2.), c(0., 2.), c(0., 0.)]);
        assert_eq!(bracket(&x, &y).unwrap(), expected);
        let d1 = CMat::from_diagonal(&crate::linalg::CVec::from_vec(vec![c(0., 1.), c(0., 3.)]));
        let d2 = CMat::from_diagonal(&crate::linalg::CVec::from_vec(vec![c(0., -2.), c(0., 5.)]));
        assert_eq!(bracket(&d1, &d2).unwrap(), CMat::zeros(2, 2));
        assert!(bracket(&d1, &CMat::zeros(3, 3)).is_err());
    }

    #[test]
    fn su2_from_two_generators() {
        let x = m2([c(0., 1.), c(0., 0.), c(0., 0.), c(0., -1.)]);
        let y = m2([c(0., 0.), c(1., 0.), c(-1., 0.), c(0., 0.)]);
        let alg = generated_algebra(std::slice::from_ref(&x), 8, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(alg.dim, 1);
        assert!(alg.abelian);
        let alg = generated_algebra(&[x, y], 8, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(alg.dim, 3);
        assert_eq!(alg.depth_used, 2);
        assert!(contains_su(&alg).unwrap());
    }

    #[test]
    fn commuting_diagonals() {
        let d = |v: [f64; 3]| CMat::from_diagonal(&crate::linalg::CVec::from_iterator(3, v.iter().map(|&x| c(0., x))));
        let alg = generated_algebra(&[d([1., 0., 0.]), d([0., 1., 0.]), d([1., 1., 0.])], 18, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(alg.dim, 2);
        assert!(alg.closed && alg.abelian);
    }

    #[test]
    fn rejects_non_skew_generator() {
        let h = m2([c(1., 0.), c(0., 0.), c(0., 0.), c(0., 0.)]);
        assert!(matches!(
            generated_algebra(&[h], 8, DEFAULT_RANK_TOL).unwrap_err(),
            LieError::NotSkewHermitian { .. }
        ));
    }

    #[test]
    fn depth_cap_reports_open_closure() {
        let x = m2([c(0., 1.), c(0., 0.), c(0., 0.), c(0., -1.)]);
        let y = m2([c(0., 0.), c(1., 0.), c(-1., 0.), c(0., 0.)]);
        let alg = generated_algebra(&[x, y], 1, DEFAULT_RANK_TOL).unwrap();
        assert!(!alg.closed);
        assert!(matches!(contains_su(&alg).unwrap_err(), LieError::NotClosed(_)));
    }

    #[test]
    fn contains_su_small_cases() {
        // i·I plus one traceless element of u(2)
        let id = m2([c(0., 1.), c(0., 0.), c(0., 0.), c(0., 1.)]);
        let z = m2([c(0., 1.), c(0., 0.), c(0., 0.), c(0., -1.)]);
        let alg = generated_algebra(&[id, z], 8, DEFAULT_RANK_TOL).unwrap();
        assert!(!contains_su(&alg).unwrap());
    }

    #[test]
    fn collections_box_model() {
        let m = build_mn(&box_model(), 2).unwrap();
        assert_eq!(m.matrices.len(), 3); // i·H0, i·E_0, i·E_3
        let w = build_wn(&box_model(), 3, &[0.25]).unwrap();
        assert_eq!(w.matrices.len(), 2 + 3);
        let w = build_wn(&box_model(), 3, &[]).unwrap();
        assert_eq!(w.matrices.len(), 2);
        assert!(matches!(build_wn(&box_model(), 3, &[0.5]).unwrap_err(), LieError::NuOutOfRange(_)));
        let m1 = build_mn(&box_model(), 1).unwrap();
        assert!(m1.matrices.iter().all(|g| g.shape() == (1, 1)));
    }

    #[test]
    fn search_box_and_zero() {
        let out = lie_galerkin_search(&box_model(), 2, 8, DEFAULT_RANK_TOL).unwrap();
        let cert = out.certified.unwrap();
        assert_eq!(cert.n, 3);
        assert!(cert.traceless_dim >= 8);

        let out = lie_galerkin_search(&zero_model(), 1, 5, DEFAULT_RANK_TOL).unwrap();
        assert!(out.certified.is_none());
        assert!(out.attempts.iter().all(|a| a.failure == Some(FailureReason::Abelian)));
        assert!(lie_galerkin_search(&box_model(), 3, 3, DEFAULT_RANK_TOL).is_err());
    }

    #[test]
    fn search_with_resonant_crossing() {
        // b_{2,4} makes the gap 2 leak out of the first three levels
        let m = parse_system(
            r#"{"eigenvalues": [0, 1, 2.5, 4.25, 6.5], "coupling": [[1,2,1,0],[2,3,1,0],[3,4,1,0],[4,5,1,0],[2,4,0.3,0]]}"#,
        )
        .unwrap();
        let out = lie_galerkin_search(&m, 2, 5, DEFAULT_RANK_TOL).unwrap();
        assert!(out.certified.is_some(), "{:?}", out.attempts);
    }

    #[test]
    fn vn_and_mn_agree() {
        assert!(vn_equivalence_check(&box_model(), 3, DEFAULT_RANK_TOL).unwrap());
        assert!(vn_equivalence_check(&zero_model(), 3, DEFAULT_RANK_TOL).unwrap());
    }

    #[test]
    fn chain_examples() {
        let chain = chain_check(&box_model(), 5).unwrap();
        assert_eq!(chain.pairs, vec![(1, 2), (2, 3), (3, 4), (4, 5)]);
        assert!(chain.nonresonant && chain.degeneracy_ok);

        let split = parse_system(r#"{"eigenvalues": [0, 1, 2, 3], "coupling": [[1,2,1,0],[3,4,1,0]]}"#).unwrap();
        match chain_check(&split, 4).unwrap_err() {
            LieError::Disconnected { components, .. } => assert_eq!(components, vec![vec![1, 2], vec![3, 4]]),
            other => panic!("{other}"),
        }

        let equal = builtin_family(
            "custom_gaps",
            &Params::from([("eigenvalues".to_string(), vec![0.0, 1.0, 2.0].into())]),
        )
        .unwrap();
        let chain = chain_check(&equal, 3).unwrap();
        assert!(!chain.nonresonant);
        assert_eq!(chain.resonance_witnesses[0].chain_pair, (1, 2));
        assert_eq!(chain.resonance_witnesses[0].resonant_pair, (2, 3));
    }

    #[test]
    fn chain_walk_on_a_star() {
        let star = parse_system(r#"{"eigenvalues": [0, 1, 3, 7], "coupling": [[1,2,1,0],[1,3,1,0],[1,4,1,0]]}"#).unwrap();
        let chain = chain_check(&star, 4).unwrap();
        for w in chain.pairs.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
        let mut visited: Vec<usize> = chain.pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        visited.sort_unstable();
        visited.dedup();
        assert_eq!(visited, vec![1, 2, 3, 4]);
    }

    #[test]
    fn degeneracy_hypothesis() {
        let m = parse_system(r#"{"eigenvalues": [0, 1, 1, 3], "coupling": [[1,2,1,0],[2,3,1,0],[3,4,1,0]]}"#).unwrap();
        let chain = chain_check(&m, 4).unwrap();
        assert!(!chain.degeneracy_ok);
        assert_eq!(chain.degeneracy_witnesses, vec![(2, 3)]);
    }
}
