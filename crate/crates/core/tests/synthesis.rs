use qproj_core::synth::{project_match, verify_plan, ControlPlan, SynthOptions};
use qproj_core::{builtin_family, model::Params, CVec, StateVector, C64};

fn target_state() -> StateVector {
    let s = (1.0f64 - 0.36 - 0.25).sqrt();
    StateVector::new(CVec::from_vec(vec![C64::new(0.6, 0.0), C64::new(0.0, 0.5), C64::new(s, 0.0)]))
}

#[test]
fn box_target_on_two_levels_replays_from_file() {
    let system = builtin_family("box_tridiagonal", &Params::new()).unwrap();
    let psi0 = StateVector::basis(3, 1).unwrap();
    let plan = project_match(&system, 2, &psi0, &target_state(), &SynthOptions { seed: 7, ..SynthOptions::default() })
        .unwrap();
    assert!(plan.success);
    assert!(plan.residual <= plan.certificate.budget);

    let reloaded = ControlPlan::from_json(&plan.to_json_string()).unwrap();
    let report = verify_plan(&system, &reloaded, &[12, 20]).unwrap();
    assert!(!report.mismatch);
    assert!(report.rows.iter().all(|r| r.residual <= 1e-2));
    assert!((report.rows[0].residual - report.rows[1].residual).abs() <= 1e-3);
    assert!(report.switch_count > 0 && report.total_time > 0.0);
}

#[test]
fn budget_exhaustion_returns_flagged_plan() {
    let system = builtin_family("box_tridiagonal", &Params::new()).unwrap();
    let psi0 = StateVector::basis(3, 1).unwrap();
    let opts = SynthOptions { tol: 1e-9, max_evaluations: 3, max_restarts: 0, ..SynthOptions::default() };
    let plan = project_match(&system, 2, &psi0, &target_state(), &opts).unwrap();
    assert!(!plan.success);
    assert!(plan.residual > 1e-9);
}
