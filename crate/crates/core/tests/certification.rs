use qproj_core::lie::{chain_check, lie_galerkin_search, FailureReason, LieError, DEFAULT_RANK_TOL};
use qproj_core::model::parse_system;
use qproj_core::sim::{propagate, Semantics};
use qproj_core::spectral::xi_set;
use qproj_core::{PiecewiseConstantControl, Segment, StateVector};

#[test]
fn file_described_ladder_certifies_and_chains() {
    let system = parse_system(
        r#"{"eigenvalues": [0, 1.3, 3.1, 5.8, 9.4], "coupling": [[1,2,1,0],[2,3,0.8,0],[3,4,1.1,0],[4,5,0.6,0]]}"#,
    )
    .unwrap();
    let chain = chain_check(&system, 5).unwrap();
    assert!(chain.implies_lie_galerkin());
    let out = lie_galerkin_search(&system, 2, 4, DEFAULT_RANK_TOL).unwrap();
    let cert = out.certified.unwrap();
    assert!(cert.traceless_dim + 1 >= cert.n * cert.n);
    assert!(xi_set(&system, cert.n).unwrap().contains_zero());
}

#[test]
fn resonant_and_disconnected_ladders() {
    let system = parse_system(r#"{"eigenvalues": [0, 1, 2, 3], "coupling": [[1,2,1,0],[2,3,1,0],[3,4,1,0]]}"#).unwrap();
    let chain = chain_check(&system, 4).unwrap();
    assert!(!chain.nonresonant);
    let split = parse_system(r#"{"eigenvalues": [0, 1, 5, 6], "coupling": [[1,2,1,0],[3,4,1,0]]}"#).unwrap();
    assert!(matches!(chain_check(&split, 4).unwrap_err(), LieError::Disconnected { .. }));
    // the first pair alone is controllable; the third level is isolated from it
    let out = lie_galerkin_search(&split, 1, 2, DEFAULT_RANK_TOL).unwrap();
    assert_eq!(out.certified.map(|c| c.n), Some(2));
    let out = lie_galerkin_search(&split, 2, 3, DEFAULT_RANK_TOL).unwrap();
    assert!(out.certified.is_none());
    // the gap of the first pair recurs at (3, 4), so only the drift survives
    assert_eq!(out.attempts[0].failure, Some(FailureReason::Abelian));
}

#[test]
fn diagonal_coupling_only_changes_phases() {
    let system = parse_system(r#"{"eigenvalues": [1, 2, 4], "coupling": [[1,1,0.5,0],[3,3,-1,0]]}"#).unwrap();
    let u = PiecewiseConstantControl::from_segments(vec![Segment::new(0.7, 1.0), Segment::new(0.4, 0.0)]).unwrap();
    let psi = StateVector::new(qproj_core::CVec::from_element(3, qproj_core::C64::new(3f64.sqrt().recip(), 0.0)));
    let out = propagate(&system, &u, 3, &psi, Semantics::TwoValue).unwrap();
    for (a, b) in out.coefficients().iter().zip(psi.coefficients().iter()) {
        assert!((a.norm() - b.norm()).abs() < 1e-14);
    }
}
