//! Spectral gaps `Σ_n`, gap selections `E_σ(M)` and the decoupled-gap sets `Ξ_n`.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{op_norm, CMat, C64};
use crate::model::{ModelError, SystemModel};

/// Absolute tolerance under which two gaps are considered equal.
pub const GAP_TOL: f64 = 1e-9;
/// Gaps closer than this (but farther than [`GAP_TOL`]) are flagged.
pub const NEAR_TOL: f64 = 1e-6;
/// Largest level index a tail scan may visit.
pub const MAX_TAIL_LEVELS: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("tail is undecidable: {0}")]
    UndecidableTail(String),
    #[error("tail scan exceeded {MAX_TAIL_LEVELS} levels")]
    TailCapExceeded,
    #[error("spectrum is not increasing at level {0} inside the declared monotone tail")]
    TailNotMonotone(usize),
    #[error("invalid order: {0}")]
    InvalidOrder(String),
}

#[inline]
pub fn gaps_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= GAP_TOL
}

/// `Σ_n` with, for each gap, the level pairs `(l, k)`, `l > k`, realizing it.
/// The zero gap lists degenerate pairs only; the diagonal is implied.
#[derive(Clone, Debug, Serialize)]
pub struct GapTable {
    pub n: usize,
    pub gaps: Vec<f64>,
    pub pair_index: Vec<Vec<(usize, usize)>>,
    /// Pairs of distinct gaps closer than [`NEAR_TOL`].
    pub near_coincidences: Vec<(f64, f64)>,
}

impl GapTable {
    pub fn from_eigenvalues(eigenvalues: &[f64]) -> Self {
        let n = eigenvalues.len();
        let mut raw: Vec<(f64, usize, usize)> = vec![(0.0, 0, 0)];
        for l in 1..=n {
            for k in 1..l {
                raw.push(((eigenvalues[l - 1] - eigenvalues[k - 1]).abs(), l, k));
            }
        }
        raw.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut gaps: Vec<f64> = Vec::new();
        let mut pair_index: Vec<Vec<(usize, usize)>> = Vec::new();
        for (g, l, k) in raw {
            match gaps.last() {
                Some(&last) if gaps_equal(last, g) => {}
                _ => {
                    gaps.push(g);
                    pair_index.push(Vec::new());
                }
            }
            if l > 0 {
                pair_index.last_mut().expect("pushed above").push((l, k));
            }
        }
        let near_coincidences = gaps
            .windows(2)
            .filter(|w| w[1] - w[0] < NEAR_TOL)
            .map(|w| (w[0], w[1]))
            .collect();
        GapTable { n, gaps, pair_index, near_coincidences }
    }

    pub fn position(&self, sigma: f64) -> Option<usize> {
        self.gaps.iter().position(|&g| gaps_equal(g, sigma))
    }

    pub fn contains(&self, sigma: f64) -> bool {
        self.position(sigma).is_some()
    }

    pub fn max_gap(&self) -> f64 {
        self.gaps.last().copied().unwrap_or(0.0)
    }
}

pub fn gap_table(system: &SystemModel, n: usize) -> Result<GapTable, SpectralError> {
    if n == 0 {
        return Err(SpectralError::InvalidOrder("n must be at least 1".into()));
    }
    Ok(GapTable::from_eigenvalues(&system.eigenvalues(n)?))
}

/// `E_σ(M)`: keeps the entries `(l, k)` with `|λ_l − λ_k| = σ` (within
/// [`GAP_TOL`]) and zeroes the rest.
pub fn select(m: &CMat, sigma: f64, eigenvalues: &[f64]) -> CMat {
    assert!(m.nrows() == m.ncols() && m.nrows() <= eigenvalues.len(), "selection needs a square matrix and its eigenvalues");
    CMat::from_fn(m.nrows(), m.ncols(), |r, c| {
        if gaps_equal((eigenvalues[r] - eigenvalues[c]).abs(), sigma) {
            m[(r, c)]
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// A gap selection together with its membership flags.
#[derive(Clone, Debug)]
pub struct GapSelection {
    pub sigma: f64,
    pub matrix: CMat,
    pub in_sigma_n: bool,
    pub in_xi_n: bool,
}

/// A gap of `Σ_n` removed from `Ξ_n`, with the coupled boundary-crossing pair
/// `(k, l)`, `k ≤ n < l`, that realizes it.
#[derive(Clone, Debug, Serialize)]
pub struct Exclusion {
    pub sigma: f64,
    pub witness: (usize, usize),
    pub coupling_modulus: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffReason {
    /// No level beyond the cutoff is coupled to the first `n`.
    CouplingSupport,
    /// Beyond the cutoff every gap to the first `n` levels exceeds `max Σ_n`.
    SpectralGrowth,
    /// As above, inferred from the tail declaration past a finite list.
    TailDeclaration,
}

/// Level index `L` past which no coupled pair `(k ≤ n, l > L)` has a gap in
/// `[0, max_gap]`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TailCutoff {
    pub level: usize,
    pub reason: CutoffReason,
}

/// Certified tail cutoff for the `n` first levels and gaps up to `max_gap`.
pub fn tail_cutoff(system: &SystemModel, n: usize, max_gap: f64) -> Result<TailCutoff, SpectralError> {
    let reach = system.coupling().support_reach(n);
    if reach <= n {
        return Ok(TailCutoff { level: n, reason: CutoffReason::CouplingSupport });
    }
    let lambda_n = system.eigenvalue(n)?;
    let tail_start = system.tail_start();
    let mut prev = lambda_n;
    let mut l = n + 1;
    while l <= reach {
        if l > MAX_TAIL_LEVELS {
            return Err(SpectralError::TailCapExceeded);
        }
        match system.eigenvalue(l) {
            Ok(v) => {
                let in_tail = tail_start.is_some_and(|s| l > s);
                if in_tail && v <= prev {
                    return Err(SpectralError::TailNotMonotone(l));
                }
                if tail_start.is_some_and(|s| l >= s) && v - lambda_n > max_gap + GAP_TOL {
                    return Ok(TailCutoff { level: l - 1, reason: CutoffReason::SpectralGrowth });
                }
                prev = v;
            }
            Err(ModelError::EigenvalueUnavailable { len, .. }) => {
                // past a finite list: only the declaration can settle the question
                let last = system.eigenvalue(len)?;
                return match tail_start {
                    Some(s) if s <= len && last - lambda_n >= max_gap + GAP_TOL => {
                        Ok(TailCutoff { level: len, reason: CutoffReason::TailDeclaration })
                    }
                    Some(_) => Err(SpectralError::UndecidableTail(format!(
                        "level {l} is coupled to the first {n} levels but lies past the {len} listed eigenvalues"
                    ))),
                    None => Err(SpectralError::UndecidableTail(format!(
                        "level {l} is coupled to the first {n} levels, the eigenvalue list stops at {len}, and no tail is declared"
                    ))),
                };
            }
            Err(e) => return Err(e.into()),
        }
        l += 1;
    }
    Ok(TailCutoff { level: reach, reason: CutoffReason::CouplingSupport })
}

/// `Ξ_n` with the certificate used to decide it.
#[derive(Clone, Debug, Serialize)]
pub struct XiSet {
    pub n: usize,
    pub sigma_n: GapTable,
    pub members: Vec<f64>,
    pub excluded: Vec<Exclusion>,
    pub tail_cutoff: TailCutoff,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub eigenvalues: Vec<f64>,
}

impl XiSet {
    pub fn contains(&self, sigma: f64) -> bool {
        self.members.iter().any(|&g| gaps_equal(g, sigma))
    }

    pub fn contains_zero(&self) -> bool {
        self.contains(0.0)
    }

    /// Nonzero members of `Ξ_n`.
    pub fn nonzero_members(&self) -> impl Iterator<Item = f64> + '_ {
        self.members.iter().copied().filter(|&g| !gaps_equal(g, 0.0))
    }

    /// `E_σ(M)` for an `n × n` matrix, flagged against `Σ_n` and `Ξ_n`.
    pub fn selection(&self, m: &CMat, sigma: f64) -> GapSelection {
        GapSelection {
            sigma,
            matrix: select(m, sigma, &self.eigenvalues),
            in_sigma_n: self.sigma_n.contains(sigma),
            in_xi_n: self.contains(sigma),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("certificate is plain data")
    }
}

/// Computes `Ξ_n = { σ ∈ Σ_n : no coupled pair k ≤ n < l has |λ_l − λ_k| = σ }`.
pub fn xi_set(system: &SystemModel, n: usize) -> Result<XiSet, SpectralError> {
    let sigma_n = gap_table(system, n)?;
    let eigenvalues = system.eigenvalues(n)?;
    let cutoff = tail_cutoff(system, n, sigma_n.max_gap())?;
    let mut excluded: Vec<Exclusion> = Vec::new();
    let mut warnings: Vec<String> = sigma_n
        .near_coincidences
        .iter()
        .map(|(a, b)| format!("gaps {a} and {b} of Σ_{n} differ by less than {NEAR_TOL}"))
        .collect();
    for k in 1..=n {
        for l in system.coupling().neighbours(k) {
            if l <= n || l > cutoff.level {
                continue;
            }
            let g = (system.eigenvalue(l)? - eigenvalues[k - 1]).abs();
            match sigma_n.position(g) {
                Some(pos) => {
                    let sigma = sigma_n.gaps[pos];
                    if !excluded.iter().any(|e| gaps_equal(e.sigma, sigma)) {
                        excluded.push(Exclusion {
                            sigma,
                            witness: (k, l),
                            coupling_modulus: system.coupling().get(k, l).norm(),
                        });
                    }
                }
                None => {
                    if sigma_n.gaps.iter().any(|&s| (s - g).abs() < NEAR_TOL) {
                        warnings.push(format!(
                            "crossing pair ({k}, {l}) has gap {g}, within {NEAR_TOL} of a gap of Σ_{n}"
                        ));
                    }
                }
            }
        }
    }
    excluded.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
    let members = sigma_n
        .gaps
        .iter()
        .copied()
        .filter(|&g| !excluded.iter().any(|e| gaps_equal(e.sigma, g)))
        .collect();
    Ok(XiSet { n, sigma_n, members, excluded, tail_cutoff: cutoff, warnings, eigenvalues })
}

/// Operator norm of `[Π_n, E_σ(H1^(N))]`. Vanishes exactly when no selected
/// entry couples the first `n` levels to levels `n+1..N`.
pub fn decoupling_check(system: &SystemModel, n: usize, sigma: f64, big_n: usize) -> Result<f64, SpectralError> {
    if n == 0 || big_n <= n {
        return Err(SpectralError::InvalidOrder(format!("need 1 ≤ n < N, got n={n}, N={big_n}")));
    }
    let pair = system.truncate(big_n)?;
    let e = select(&pair.h1, sigma, &pair.eigenvalues);
    let proj = CMat::from_fn(big_n, big_n, |r, c| {
        if r == c && r < n {
            C64::new(1.0, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let commutator = &proj * &e - &e * &proj;
    Ok(op_norm(&commutator))
}
