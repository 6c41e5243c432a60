//! System descriptions, Galerkin compressions and the bilinear reduction.
//!
//! A [`SystemModel`] stores the free spectrum `λ_1 ≤ λ_2 ≤ …` of `H(0)` and the
//! matrix elements `b_{j,k} = ⟨φ_j, (H(1) − H(0)) φ_k⟩` of the coupling in the
//! eigenbasis of `H(0)`. Everything downstream works on finite compressions of
//! these two objects.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use evalexpr::{
    build_operator_tree, ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Node,
    Value,
};
use serde::Deserialize;
use thiserror::Error;

use crate::linalg::{CMat, C64, I};

/// Entries whose Hermitian partners disagree by more than this are rejected.
pub const HERMITIAN_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read system description")]
    Io(#[from] std::io::Error),
    #[error("malformed system description: {0}")]
    Parse(String),
    #[error("coupling is not Hermitian at ({j}, {k}): {a} vs conj partner {b}")]
    NonHermitian { j: usize, k: usize, a: C64, b: C64 },
    #[error("eigenvalues must be nondecreasing: λ_{k} < λ_{prev}", prev = k - 1)]
    NotMonotone { k: usize },
    #[error("eigenvalue λ_{k} is not available (finite list of {len} values and no rule)")]
    EigenvalueUnavailable { k: usize, len: usize },
    #[error("tail is undecidable: {0}")]
    UndecidableTail(String),
    #[error("unknown model family `{0}`")]
    UnknownFamily(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("polarizability split does not sum to the declared coupling at ({j}, {k})")]
    PolarizabilityMismatch { j: usize, k: usize },
    #[error("coupling row-norm bound {computed} exceeds the declared bound {declared}")]
    BoundExceeded { computed: f64, declared: f64 },
    #[error("level indices are 1-based, got {0}")]
    ZeroIndex(usize),
    #[error("truncation order must be at least 1")]
    EmptyTruncation,
}

/// Closed-form eigenvalue rule `k ↦ λ_k`.
#[derive(Clone)]
pub enum EigenRule {
    /// `λ_k = k²`, the particle in a box.
    Square,
    /// A user expression in the variable `k`, e.g. `"k^2 + 0.5*k"`.
    Expr { source: String, tree: Node<DefaultNumericTypes> },
}

impl fmt::Debug for EigenRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EigenRule::Square => write!(f, "k^2"),
            EigenRule::Expr { source, .. } => write!(f, "{source}"),
        }
    }
}

impl EigenRule {
    pub fn parse(source: &str) -> Result<Self, ModelError> {
        // accept "lambda_k = k^2" as well as "k^2"
        let expr = match source.split_once('=') {
            Some((_, rhs)) => rhs.trim(),
            None => source.trim(),
        };
        if expr == "k^2" || expr == "k*k" {
            return Ok(EigenRule::Square);
        }
        let tree = build_operator_tree::<DefaultNumericTypes>(expr)
            .map_err(|e| ModelError::Parse(format!("eigenvalue rule `{source}`: {e}")))?;
        let rule = EigenRule::Expr { source: expr.to_string(), tree };
        rule.eval(1)?;
        Ok(rule)
    }

    pub fn eval(&self, k: usize) -> Result<f64, ModelError> {
        match self {
            EigenRule::Square => Ok((k * k) as f64),
            EigenRule::Expr { source, tree } => {
                let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
                ctx.set_value("k".into(), Value::Float(k as f64))
                    .map_err(|e| ModelError::Parse(e.to_string()))?;
                let v = tree
                    .eval_number_with_context(&ctx)
                    .map_err(|e| ModelError::Parse(format!("eigenvalue rule `{source}` at k={k}: {e}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(ModelError::Parse(format!("eigenvalue rule `{source}` is not finite at k={k}")))
                }
            }
        }
    }

    pub fn source(&self) -> String {
        format!("{self:?}")
    }
}

/// Free spectrum: an explicit prefix, optionally extended by a rule.
#[derive(Clone, Debug)]
pub struct Spectrum {
    values: Vec<f64>,
    rule: Option<EigenRule>,
}

impl Spectrum {
    pub fn list(values: Vec<f64>) -> Result<Self, ModelError> {
        for k in 1..values.len() {
            if values[k] < values[k - 1] {
                return Err(ModelError::NotMonotone { k: k + 1 });
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Parse("non-finite eigenvalue".into()));
        }
        Ok(Spectrum { values, rule: None })
    }

    pub fn rule(rule: EigenRule) -> Self {
        Spectrum { values: Vec::new(), rule: Some(rule) }
    }

    pub fn square() -> Self {
        Self::rule(EigenRule::Square)
    }

    /// Explicit prefix; the rule takes over beyond it.
    pub fn with_rule(values: Vec<f64>, rule: EigenRule) -> Result<Self, ModelError> {
        let mut s = Self::list(values)?;
        s.rule = Some(rule);
        Ok(s)
    }

    pub fn has_rule(&self) -> bool {
        self.rule.is_some()
    }

    pub fn rule_source(&self) -> Option<String> {
        self.rule.as_ref().map(EigenRule::source)
    }

    pub fn explicit_len(&self) -> usize {
        self.values.len()
    }

    /// Number of eigenvalues available, `None` when a rule makes it unbounded.
    pub fn available(&self) -> Option<usize> {
        if self.rule.is_some() {
            None
        } else {
            Some(self.values.len())
        }
    }

    /// `λ_k`, 1-based.
    pub fn get(&self, k: usize) -> Result<f64, ModelError> {
        if k == 0 {
            return Err(ModelError::ZeroIndex(k));
        }
        if k <= self.values.len() {
            return Ok(self.values[k - 1]);
        }
        match &self.rule {
            Some(rule) => rule.eval(k),
            None => Err(ModelError::EigenvalueUnavailable { k, len: self.values.len() }),
        }
    }

    /// `(λ_1, …, λ_n)`, checked to be nondecreasing.
    pub fn first(&self, n: usize) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(n);
        for k in 1..=n {
            let v = self.get(k)?;
            if let Some(&prev) = out.last() {
                if v < prev {
                    return Err(ModelError::NotMonotone { k });
                }
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// One constant diagonal of the coupling: `b_{k,k+offset} = value` for all `k ≥ 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandDiagonal {
    pub offset: usize,
    pub value: C64,
}

/// Hermitian sparse coupling `b_{j,k}`: finitely many explicit entries plus
/// constant band diagonals extending to infinity. Entries are stored for
/// `j ≤ k` only; the lower triangle is implied by Hermiticity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Coupling {
    entries: BTreeMap<(usize, usize), C64>,
    band: Vec<BandDiagonal>,
}

impl Coupling {
    pub fn zero() -> Self {
        Coupling::default()
    }

    /// Builds a coupling from declared `(j, k, value)` triples. One-sided
    /// declarations are mirrored; two-sided ones must agree up to
    /// [`HERMITIAN_TOL`] and are then averaged.
    pub fn from_entries(declared: &[(usize, usize, C64)]) -> Result<Self, ModelError> {
        let mut seen: BTreeMap<(usize, usize), Vec<(C64, usize, usize)>> = BTreeMap::new();
        for &(j, k, v) in declared {
            if j == 0 {
                return Err(ModelError::ZeroIndex(j));
            }
            if k == 0 {
                return Err(ModelError::ZeroIndex(k));
            }
            if !(v.re.is_finite() && v.im.is_finite()) {
                return Err(ModelError::Parse(format!("non-finite coupling at ({j}, {k})")));
            }
            let (key, oriented) = if j <= k { ((j, k), v) } else { ((k, j), v.conj()) };
            seen.entry(key).or_default().push((oriented, j, k));
        }
        let mut entries = BTreeMap::new();
        for ((j, k), values) in seen {
            let first = values[0].0;
            for &(other, oj, ok) in &values[1..] {
                if (other - first).norm() > HERMITIAN_TOL {
                    let raw = if oj <= ok { other } else { other.conj() };
                    return Err(ModelError::NonHermitian { j: oj, k: ok, a: raw, b: first });
                }
            }
            let mean = values.iter().map(|v| v.0).sum::<C64>() / values.len() as f64;
            if j == k {
                if mean.im.abs() > HERMITIAN_TOL {
                    return Err(ModelError::NonHermitian { j, k, a: mean, b: mean.conj() });
                }
                if mean.re != 0.0 {
                    entries.insert((j, k), C64::new(mean.re, 0.0));
                }
            } else if mean.norm() > 0.0 {
                entries.insert((j, k), mean);
            }
        }
        Ok(Coupling { entries, band: Vec::new() })
    }

    /// Constant band diagonals `(offset, value)`.
    pub fn banded(diagonals: &[(usize, C64)]) -> Result<Self, ModelError> {
        let mut c = Coupling::zero();
        c.add_band(diagonals)?;
        Ok(c)
    }

    fn add_band(&mut self, diagonals: &[(usize, C64)]) -> Result<(), ModelError> {
        for &(offset, value) in diagonals {
            if offset == 0 && value.im.abs() > HERMITIAN_TOL {
                return Err(ModelError::NonHermitian { j: 1, k: 1, a: value, b: value.conj() });
            }
            let value = if offset == 0 { C64::new(value.re, 0.0) } else { value };
            match self.band.iter_mut().find(|b| b.offset == offset) {
                Some(b) => b.value += value,
                None => self.band.push(BandDiagonal { offset, value }),
            }
        }
        self.band.retain(|b| b.value.norm() > 0.0);
        self.band.sort_by_key(|b| b.offset);
        Ok(())
    }

    pub fn with_band(mut self, diagonals: &[(usize, C64)]) -> Result<Self, ModelError> {
        self.add_band(diagonals)?;
        Ok(self)
    }

    pub fn band(&self) -> &[BandDiagonal] {
        &self.band
    }

    pub fn explicit_entries(&self) -> impl Iterator<Item = ((usize, usize), C64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty() && self.band.is_empty()
    }

    /// `b_{j,k}` (1-based).
    pub fn get(&self, j: usize, k: usize) -> C64 {
        if j > k {
            return self.get(k, j).conj();
        }
        let mut v = self.entries.get(&(j, k)).copied().unwrap_or_default();
        let d = k - j;
        for b in &self.band {
            if b.offset == d {
                v += b.value;
            }
        }
        v
    }

    pub fn is_coupled(&self, j: usize, k: usize) -> bool {
        self.get(j, k).norm() > 0.0
    }

    /// Levels `l` with `b_{j,l} ≠ 0`, sorted.
    pub fn neighbours(&self, j: usize) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for &(a, b) in self.entries.keys() {
            if a == j {
                out.push(b);
            } else if b == j {
                out.push(a);
            }
        }
        for bd in &self.band {
            out.push(j + bd.offset);
            if bd.offset > 0 && j > bd.offset {
                out.push(j - bd.offset);
            }
        }
        out.sort_unstable();
        out.dedup();
        out.retain(|&l| self.is_coupled(j, l));
        out
    }

    /// Largest level index `l` coupled to some level `≤ n`; `n` itself if none
    /// lies beyond `n`.
    pub fn support_reach(&self, n: usize) -> usize {
        let mut reach = n;
        for &(j, k) in self.entries.keys() {
            if j <= n {
                reach = reach.max(k);
            }
        }
        if let Some(max_off) = self.band.iter().map(|b| b.offset).max() {
            reach = reach.max(n + max_off);
        }
        reach
    }

    /// Supremum of row 1-norms over the declared support.
    pub fn row_norm_bound(&self) -> f64 {
        let mut rows: BTreeMap<usize, f64> = BTreeMap::new();
        for (&(j, k), v) in &self.entries {
            *rows.entry(j).or_default() += v.norm();
            if j != k {
                *rows.entry(k).or_default() += v.norm();
            }
        }
        let explicit = rows.values().copied().fold(0.0, f64::max);
        let band: f64 = self
            .band
            .iter()
            .map(|b| if b.offset == 0 { b.value.norm() } else { 2.0 * b.value.norm() })
            .sum();
        explicit + band
    }

    /// Elementwise sum.
    pub fn plus(&self, other: &Coupling) -> Coupling {
        let mut entries = self.entries.clone();
        for (&k, &v) in &other.entries {
            *entries.entry(k).or_default() += v;
        }
        entries.retain(|_, v| v.norm() > 0.0);
        let mut out = Coupling { entries, band: self.band.clone() };
        let extra: Vec<(usize, C64)> = other.band.iter().map(|b| (b.offset, b.value)).collect();
        out.add_band(&extra).expect("band diagonals already validated");
        out
    }

    /// `n × n` compression `(b_{j,k})_{j,k ≤ n}`.
    pub fn compress(&self, n: usize) -> CMat {
        CMat::from_fn(n, n, |r, c| self.get(r + 1, c + 1))
    }

    fn agrees_with(&self, other: &Coupling, upto: usize) -> Option<(usize, usize)> {
        for j in 1..=upto {
            for k in j..=upto {
                if (self.get(j, k) - other.get(j, k)).norm() > HERMITIAN_TOL {
                    return Some((j, k));
                }
            }
        }
        None
    }
}

/// The split `H(u) = H0 + u·W1 + u²·W2` of a polarizability model.
#[derive(Clone, Debug)]
pub struct Polarizability {
    pub w1: Coupling,
    pub w2: Coupling,
}

/// Declaration that the spectrum is strictly increasing and divergent from
/// `monotone_from` on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TailDeclaration {
    pub monotone_from: usize,
}

/// A validated system description. Immutable after construction.
#[derive(Clone, Debug)]
pub struct SystemModel {
    spectrum: Spectrum,
    coupling: Coupling,
    polarizability: Option<Polarizability>,
    tail: Option<TailDeclaration>,
    coupling_bound: f64,
}

impl SystemModel {
    pub fn new(
        spectrum: Spectrum,
        coupling: Coupling,
        tail: Option<TailDeclaration>,
    ) -> Result<Self, ModelError> {
        if let Some(t) = tail {
            if t.monotone_from == 0 {
                return Err(ModelError::ZeroIndex(0));
            }
        }
        let coupling_bound = coupling.row_norm_bound();
        if !coupling_bound.is_finite() {
            return Err(ModelError::Parse("coupling bound is not finite".into()));
        }
        Ok(SystemModel { spectrum, coupling, polarizability: None, tail, coupling_bound })
    }

    /// Polarizability model: the coupling is `W1 + W2`.
    pub fn with_polarizability(
        spectrum: Spectrum,
        w1: Coupling,
        w2: Coupling,
        tail: Option<TailDeclaration>,
    ) -> Result<Self, ModelError> {
        let coupling = w1.plus(&w2);
        let mut model = Self::new(spectrum, coupling, tail)?;
        model.polarizability = Some(Polarizability { w1, w2 });
        Ok(model)
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn polarizability(&self) -> Option<&Polarizability> {
        self.polarizability.as_ref()
    }

    pub fn tail(&self) -> Option<TailDeclaration> {
        self.tail
    }

    /// Index from which the spectrum may be treated as strictly increasing and
    /// divergent. A closed-form rule without a declaration is taken to be
    /// monotone from the first level; scans verify this as they go.
    pub fn tail_start(&self) -> Option<usize> {
        match (self.tail, self.spectrum.has_rule()) {
            (Some(t), _) => Some(t.monotone_from),
            (None, true) => Some(1),
            (None, false) => None,
        }
    }

    /// Certified upper bound on the row 1-norms of `H(1) − H(0)`.
    pub fn coupling_bound(&self) -> f64 {
        self.coupling_bound
    }

    pub fn eigenvalue(&self, k: usize) -> Result<f64, ModelError> {
        self.spectrum.get(k)
    }

    pub fn eigenvalues(&self, n: usize) -> Result<Vec<f64>, ModelError> {
        self.spectrum.first(n)
    }

    /// Galerkin compression at order `n`.
    pub fn truncate(&self, n: usize) -> Result<GalerkinPair, ModelError> {
        truncate(self, n)
    }
}

/// Compressed matrices `H0^(n)`, `H1^(n)` and their skew forms.
#[derive(Clone, Debug)]
pub struct GalerkinPair {
    pub n: usize,
    /// `diag(λ_1, …, λ_n)`.
    pub h0: CMat,
    /// `h0` plus the compression of the coupling.
    pub h1: CMat,
    /// `−i·h0`.
    pub a: CMat,
    /// `−i·(h1 − h0)`.
    pub b: CMat,
    pub eigenvalues: Vec<f64>,
}

impl GalerkinPair {
    /// The compression of the coupling, `h1 − h0`.
    pub fn coupling(&self) -> CMat {
        &self.h1 - &self.h0
    }
}

pub fn truncate(system: &SystemModel, n: usize) -> Result<GalerkinPair, ModelError> {
    if n == 0 {
        return Err(ModelError::EmptyTruncation);
    }
    let eigenvalues = system.eigenvalues(n)?;
    let h0 = CMat::from_fn(n, n, |r, c| {
        if r == c {
            C64::new(eigenvalues[r], 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let coupling = system.coupling.compress(n);
    let h1 = &h0 + &coupling;
    let a = &h0 * (-I);
    let b = coupling * (-I);
    Ok(GalerkinPair { n, h0, h1, a, b, eigenvalues })
}

/// Drift half of the bilinear reduction, `A = −i H(0)`.
#[derive(Clone, Copy, Debug)]
pub struct DriftOperator<'a> {
    system: &'a SystemModel,
}

impl DriftOperator<'_> {
    pub fn truncate(&self, n: usize) -> Result<CMat, ModelError> {
        Ok(truncate(self.system, n)?.a)
    }
}

/// Control half of the bilinear reduction, `B = −i (H(1) − H(0))`.
#[derive(Clone, Copy, Debug)]
pub struct CouplingOperator<'a> {
    system: &'a SystemModel,
}

impl CouplingOperator<'_> {
    pub fn truncate(&self, n: usize) -> Result<CMat, ModelError> {
        if n == 0 {
            return Err(ModelError::EmptyTruncation);
        }
        Ok(self.system.coupling.compress(n) * (-I))
    }

    /// Operator-norm bound of `B` (Schur test with the row-norm bound).
    pub fn norm_bound(&self) -> f64 {
        self.system.coupling_bound
    }

    pub fn is_zero(&self) -> bool {
        self.system.coupling.is_zero()
    }
}

/// `A = −i H(0)` and `B = −i (H(1) − H(0))` as operator handles.
#[derive(Clone, Copy, Debug)]
pub struct BilinearReduction<'a> {
    pub drift: DriftOperator<'a>,
    pub control: CouplingOperator<'a>,
}

pub fn bilinear_reduction(system: &SystemModel) -> BilinearReduction<'_> {
    BilinearReduction {
        drift: DriftOperator { system },
        control: CouplingOperator { system },
    }
}

// ---------------------------------------------------------------------------
// Built-in model families

/// A family parameter: a scalar or a list of reals.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(f64),
    List(Vec<f64>),
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::Scalar(v)
    }
}

impl From<Vec<f64>> for ParamValue {
    fn from(v: Vec<f64>) -> Self {
        ParamValue::List(v)
    }
}

pub type Params = BTreeMap<String, ParamValue>;

fn scalar(params: &Params, key: &str, default: f64) -> Result<f64, ModelError> {
    match params.get(key) {
        None => Ok(default),
        Some(ParamValue::Scalar(v)) if v.is_finite() => Ok(*v),
        Some(other) => Err(ModelError::InvalidParameter(format!("`{key}` must be a finite real, got {other:?}"))),
    }
}

/// Gallery of ready-made systems.
///
/// * `box_tridiagonal` (`c`, default 1): `λ_k = k²`, `b_{k,k+1} = c`.
/// * `polarizability_toy` (`c1`, `c2`, defaults 1 and 0.1): `λ_k = k²`,
///   `W1` tridiagonal with `c1`, `W2` diagonal with `c2`.
/// * `custom_gaps` (`eigenvalues` list, optional `couplings` list or scalar
///   `c`): finite ladder with `b_{k,k+1}` from `couplings`.
pub fn builtin_family(name: &str, params: &Params) -> Result<SystemModel, ModelError> {
    match name {
        "box_tridiagonal" => {
            let c = scalar(params, "c", 1.0)?;
            let coupling = Coupling::banded(&[(1, C64::new(c, 0.0))])?;
            SystemModel::new(Spectrum::square(), coupling, Some(TailDeclaration { monotone_from: 1 }))
        }
        "polarizability_toy" => {
            let c1 = scalar(params, "c1", 1.0)?;
            let c2 = scalar(params, "c2", 0.1)?;
            let w1 = Coupling::banded(&[(1, C64::new(c1, 0.0))])?;
            let w2 = Coupling::banded(&[(0, C64::new(c2, 0.0))])?;
            SystemModel::with_polarizability(
                Spectrum::square(),
                w1,
                w2,
                Some(TailDeclaration { monotone_from: 1 }),
            )
        }
        "custom_gaps" => {
            let values = match params.get("eigenvalues") {
                Some(ParamValue::List(v)) if !v.is_empty() => v.clone(),
                _ => {
                    return Err(ModelError::InvalidParameter(
                        "`eigenvalues` must be a nonempty list".into(),
                    ))
                }
            };
            let links = values.len().saturating_sub(1);
            let couplings = match params.get("couplings") {
                Some(ParamValue::List(c)) if c.len() == links => c.clone(),
                Some(ParamValue::List(c)) => {
                    return Err(ModelError::InvalidParameter(format!(
                        "`couplings` needs {links} entries, got {}",
                        c.len()
                    )))
                }
                _ => vec![scalar(params, "c", 1.0)?; links],
            };
            let entries: Vec<(usize, usize, C64)> = couplings
                .iter()
                .enumerate()
                .map(|(i, &c)| (i + 1, i + 2, C64::new(c, 0.0)))
                .collect();
            SystemModel::new(Spectrum::list(values)?, Coupling::from_entries(&entries)?, None)
        }
        other => Err(ModelError::UnknownFamily(other.to_string())),
    }
}

// ---------------------------------------------------------------------------
// JSON system description

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemDoc {
    eigenvalues: EigenDoc,
    #[serde(default)]
    coupling: Option<CouplingDoc>,
    #[serde(default)]
    polarizability: Option<PolarizabilityDoc>,
    #[serde(default)]
    tail: Option<TailDoc>,
    #[serde(default)]
    bound: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum EigenDoc {
    List(Vec<f64>),
    Rule {
        #[serde(default)]
        values: Vec<f64>,
        rule: String,
    },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum CouplingDoc {
    Entries(Vec<[f64; 4]>),
    Structured {
        #[serde(default)]
        entries: Vec<[f64; 4]>,
        #[serde(default)]
        band: Vec<[f64; 3]>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolarizabilityDoc {
    w1: CouplingDoc,
    w2: CouplingDoc,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TailDoc {
    monotone_from: usize,
}

fn index(x: f64, what: &str) -> Result<usize, ModelError> {
    if x.fract() != 0.0 || x < 1.0 || x > u32::MAX as f64 {
        return Err(ModelError::Parse(format!("{what} must be a positive integer, got {x}")));
    }
    Ok(x as usize)
}

impl CouplingDoc {
    fn build(&self) -> Result<Coupling, ModelError> {
        let (entries, band): (&[[f64; 4]], &[[f64; 3]]) = match self {
            CouplingDoc::Entries(e) => (e, &[]),
            CouplingDoc::Structured { entries, band } => (entries, band),
        };
        let triples = entries
            .iter()
            .map(|&[j, k, re, im]| Ok((index(j, "level index")?, index(k, "level index")?, C64::new(re, im))))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let diagonals = band
            .iter()
            .map(|&[off, re, im]| {
                if off.fract() != 0.0 || off < 0.0 {
                    return Err(ModelError::Parse(format!("band offset must be a nonnegative integer, got {off}")));
                }
                Ok((off as usize, C64::new(re, im)))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Coupling::from_entries(&triples)?.with_band(&diagonals)
    }
}

/// Parses a system description document.
pub fn parse_system(text: &str) -> Result<SystemModel, ModelError> {
    let doc: SystemDoc = serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
    let spectrum = match doc.eigenvalues {
        EigenDoc::List(v) => Spectrum::list(v)?,
        EigenDoc::Rule { values, rule } => Spectrum::with_rule(values, EigenRule::parse(&rule)?)?,
    };
    let tail = doc.tail.map(|t| TailDeclaration { monotone_from: t.monotone_from });
    let model = match (doc.coupling, doc.polarizability) {
        (coupling, Some(p)) => {
            let w1 = p.w1.build()?;
            let w2 = p.w2.build()?;
            let model = SystemModel::with_polarizability(spectrum, w1, w2, tail)?;
            if let Some(c) = coupling {
                let declared = c.build()?;
                let reach = declared
                    .support_reach(1)
                    .max(model.coupling.support_reach(1))
                    .max(declared.explicit_entries().map(|((_, k), _)| k).max().unwrap_or(1))
                    .max(8);
                if let Some((j, k)) = declared.agrees_with(&model.coupling, reach) {
                    return Err(ModelError::PolarizabilityMismatch { j, k });
                }
            }
            model
        }
        (Some(c), None) => SystemModel::new(spectrum, c.build()?, tail)?,
        (None, None) => SystemModel::new(spectrum, Coupling::zero(), tail)?,
    };
    if let Some(declared) = doc.bound {
        if model.coupling_bound > declared {
            return Err(ModelError::BoundExceeded { computed: model.coupling_bound, declared });
        }
    }
    Ok(model)
}

/// Reads and validates a system description file.
pub fn load_system(path: impl AsRef<Path>) -> Result<SystemModel, ModelError> {
    let text = std::fs::read_to_string(path)?;
    parse_system(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, skew_defect};

    fn box_model() -> SystemModel {
        builtin_family("box_tridiagonal", &Params::new()).unwrap()
    }

    #[test]
    fn loads_rule_and_band() {
        let m = parse_system(r#"{"eigenvalues": {"rule": "lambda_k = k^2"}, "coupling": {"band": [[1, 1, 0]]}}"#)
            .unwrap();
        assert_eq!(m.eigenvalues(4).unwrap(), vec![1.0, 4.0, 9.0, 16.0]);
        assert_eq!(m.coupling().get(3, 4), c(1.0, 0.0));
        assert_eq!(m.coupling().get(4, 3), c(1.0, 0.0));
        assert_eq!(m.coupling().get(1, 3), c(0.0, 0.0));
    }

    #[test]
    fn expression_rule() {
        let m = parse_system(r#"{"eigenvalues": {"rule": "2*k^2 + 0.5"}, "coupling": []}"#).unwrap();
        assert_eq!(m.eigenvalues(2).unwrap(), vec![2.5, 8.5]);
    }

    #[test]
    fn rejects_non_hermitian_pair() {
        let err = parse_system(r#"{"eigenvalues": [1, 2], "coupling": [[1, 2, 0, 1], [2, 1, 0, 1]]}"#).unwrap_err();
        assert!(matches!(err, ModelError::NonHermitian { .. }), "{err}");
    }

    #[test]
    fn mirrors_one_sided_and_averages_tiny_contradictions() {
        let m = parse_system(r#"{"eigenvalues": [1, 2], "coupling": [[2, 1, 0.5, 0.25], [1, 2, 0.5, -0.2500000000000001]]}"#)
            .unwrap();
        let b12 = m.coupling().get(1, 2);
        assert!((b12 - c(0.5, -0.25)).norm() < 1e-15);
        assert_eq!(m.coupling().get(2, 1), b12.conj());
    }

    #[test]
    fn complex_diagonal_is_rejected() {
        assert!(parse_system(r#"{"eigenvalues": [1, 2], "coupling": [[1, 1, 0.5, 0.1]]}"#).is_err());
    }

    #[test]
    fn polarizability_sum_rule() {
        let m = parse_system(
            r#"{"eigenvalues": {"rule": "k^2"},
                "polarizability": {"w1": {"band": [[1, 1, 0]]}, "w2": {"band": [[0, 0.1, 0]]}}}"#,
        )
        .unwrap();
        assert_eq!(m.coupling().get(2, 2), c(0.1, 0.0));
        assert_eq!(m.coupling().get(2, 3), c(1.0, 0.0));
        assert!(m.polarizability().is_some());
    }

    #[test]
    fn polarizability_mismatch_is_rejected() {
        let err = parse_system(
            r#"{"eigenvalues": {"rule": "k^2"}, "coupling": {"band": [[1, 1, 0]]},
                "polarizability": {"w1": {"band": [[1, 1, 0]]}, "w2": {"band": [[0, 0.1, 0]]}}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::PolarizabilityMismatch { .. }));
    }

    #[test]
    fn decreasing_list_is_rejected() {
        assert!(matches!(
            parse_system(r#"{"eigenvalues": [1, 3, 2]}"#).unwrap_err(),
            ModelError::NotMonotone { k: 3 }
        ));
    }

    #[test]
    fn parse_failure_is_reported() {
        assert!(matches!(parse_system("{ nope").unwrap_err(), ModelError::Parse(_)));
        assert!(matches!(
            parse_system(r#"{"eigenvalues": [1], "coupling": [[0, 1, 1, 0]]}"#).unwrap_err(),
            ModelError::Parse(_)
        ));
    }

    #[test]
    fn declared_bound_is_enforced() {
        assert!(parse_system(r#"{"eigenvalues": {"rule": "k^2"}, "coupling": {"band": [[1, 1, 0]]}, "bound": 2.0}"#).is_ok());
        assert!(matches!(
            parse_system(r#"{"eigenvalues": {"rule": "k^2"}, "coupling": {"band": [[1, 1, 0]]}, "bound": 1.5}"#)
                .unwrap_err(),
            ModelError::BoundExceeded { .. }
        ));
    }

    #[test]
    fn truncate_box_two_levels() {
        let g = box_model().truncate(2).unwrap();
        assert_eq!(g.h0, CMat::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c(4., 0.)]));
        assert_eq!(g.h1, CMat::from_row_slice(2, 2, &[c(1., 0.), c(1., 0.), c(1., 0.), c(4., 0.)]));
    }

    #[test]
    fn truncate_scalar_case() {
        let m = builtin_family("polarizability_toy", &Params::new()).unwrap();
        let g = m.truncate(1).unwrap();
        assert_eq!(g.h1[(0, 0)], c(1.1, 0.0));
    }

    #[test]
    fn truncate_skew_forms() {
        let g = box_model().truncate(3).unwrap();
        assert_eq!(g.a[(2, 2)], c(0.0, -9.0));
        assert_eq!(skew_defect(&g.a), 0.0);
        assert_eq!(skew_defect(&g.b), 0.0);
    }

    #[test]
    fn truncate_past_finite_list_fails() {
        let m = parse_system(r#"{"eigenvalues": [1, 2, 4]}"#).unwrap();
        assert!(matches!(m.truncate(4).unwrap_err(), ModelError::EigenvalueUnavailable { k: 4, len: 3 }));
        assert!(matches!(m.truncate(0).unwrap_err(), ModelError::EmptyTruncation));
    }

    #[test]
    fn reduction_box_model() {
        let m = box_model();
        let r = bilinear_reduction(&m);
        let a = r.drift.truncate(3).unwrap();
        let b = r.control.truncate(3).unwrap();
        assert_eq!(a[(1, 1)], c(0.0, -4.0));
        assert_eq!(b[(0, 1)], c(0.0, -1.0));
        assert_eq!(b[(1, 0)], c(0.0, -1.0));
        assert_eq!(b[(0, 2)], c(0.0, 0.0));
        assert_eq!(r.control.norm_bound(), 2.0);
    }

    #[test]
    fn reduction_zero_and_polarizability() {
        let zero = builtin_family("box_tridiagonal", &Params::from([("c".to_string(), 0.0.into())])).unwrap();
        let r = bilinear_reduction(&zero);
        assert!(r.control.is_zero());
        assert_eq!(r.control.truncate(4).unwrap(), CMat::zeros(4, 4));

        let pol = builtin_family("polarizability_toy", &Params::new()).unwrap();
        let b = bilinear_reduction(&pol).control.truncate(3).unwrap();
        assert!((b[(1, 1)] - c(0.0, -0.1)).norm() < 1e-15);
        assert_eq!(b[(1, 2)], c(0.0, -1.0));
    }

    #[test]
    fn families() {
        let m = box_model();
        assert_eq!(m.eigenvalues(4).unwrap(), vec![1.0, 4.0, 9.0, 16.0]);
        let g = builtin_family(
            "custom_gaps",
            &Params::from([("eigenvalues".to_string(), vec![1.0, 2.0, 4.0].into())]),
        )
        .unwrap();
        assert_eq!(g.coupling().get(2, 3), c(1.0, 0.0));
        assert!(g.tail_start().is_none());
        assert!(matches!(
            builtin_family("harmonic", &Params::new()).unwrap_err(),
            ModelError::UnknownFamily(_)
        ));
        assert!(matches!(
            builtin_family("custom_gaps", &Params::new()).unwrap_err(),
            ModelError::InvalidParameter(_)
        ));
    }
}
