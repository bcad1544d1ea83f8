use iscap_core::ao_driver::{compare_schemes, reoptimize_digital, solve_instance, AoOptions, DesignResult, SchemeId, FEASIBILITY_RTOL};
use iscap_core::design::{constraint_report, ProblemData};
use iscap_core::power_models::total_power;
use iscap_core::scenario::{generate_scenario, Dimensions, Geometry, Scenario};

fn desk(seed: u64) -> Scenario {
    generate_scenario(seed, &Dimensions::desk(), &Geometry::default(), 3.0).unwrap()
}

fn check_result(scn: &Scenario, r: &DesignResult) {
    assert!(r.status.is_feasible(), "{}: {:?} {:?}", r.scheme, r.status, r.message);
    let d = r.design.as_ref().unwrap();
    let report = constraint_report(scn, d);
    assert!(report.satisfied(FEASIBILITY_RTOL), "{}: worst slack {}", r.scheme, report.worst());
    assert_eq!(r.report.as_ref().unwrap(), &report);
    assert_eq!(r.power.as_ref().unwrap(), &total_power(d, scn).unwrap());
    let mask = r.mask.as_ref().unwrap();
    assert_eq!(mask.ps_on.len(), d.n_tx());
    assert!(mask.ps_on.iter().all(|row| row.len() == d.n_rf()));
    for j in 0..d.n_rf() {
        assert_eq!(mask.rf_on[j], (0..d.n_tx()).any(|i| mask.ps_on[i][j]));
    }
    let best_candidate = r.candidates.iter().filter_map(|c| c.total_w).fold(f64::INFINITY, f64::min);
    assert!(r.total_w().unwrap() <= best_candidate + 1e-12, "{}: returned power above a feasible candidate", r.scheme);
}

#[test]
fn hybrid_schemes_are_feasible_and_consistent() {
    let scn = desk(5);
    let schemes = [SchemeId::Joint, SchemeId::NoOnoff, SchemeId::PsOnly, SchemeId::RfOnly];
    let results = compare_schemes(&scn, &schemes, &AoOptions::default());
    assert_eq!(results.iter().map(|r| r.scheme).collect::<Vec<_>>(), schemes);
    for r in &results {
        check_result(&scn, r);
    }
    let total = |s: SchemeId| results.iter().find(|r| r.scheme == s).unwrap().total_w().unwrap();
    for other in [SchemeId::NoOnoff, SchemeId::PsOnly, SchemeId::RfOnly] {
        assert!(total(SchemeId::Joint) <= total(other) + 1e-8);
    }
    let no_onoff = results.iter().find(|r| r.scheme == SchemeId::NoOnoff).unwrap();
    assert_eq!(no_onoff.design.as_ref().unwrap().ps_on_count(), 32);
    assert!(no_onoff.candidates.is_empty());
    let rf_only = results.iter().find(|r| r.scheme == SchemeId::RfOnly).unwrap();
    let d = rf_only.design.as_ref().unwrap();
    for j in 0..4 {
        let on = (0..8).filter(|&i| d.f[(i, j)].norm() > 0.0).count();
        assert!(on == 0 || on == 8, "rf_only leaves whole columns on or off");
    }
}

#[test]
fn solve_instance_is_deterministic() {
    let scn = desk(7);
    let opts = AoOptions::default();
    let a = solve_instance(&scn, SchemeId::RfOnly, &opts);
    let b = solve_instance(&scn, SchemeId::RfOnly, &opts);
    assert_eq!(a.design, b.design);
    assert_eq!(a.power, b.power);
    assert_eq!(a.candidates, b.candidates);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.csv_row(), b.csv_row());
}

#[test]
fn returned_mask_reproduces_power() {
    let scn = desk(6);
    let opts = AoOptions::default();
    let r = solve_instance(&scn, SchemeId::Joint, &opts);
    check_result(&scn, &r);
    let d = r.design.as_ref().unwrap();
    let data = ProblemData::new(&scn).unwrap();
    let again = reoptimize_digital(&data, &d.f, d, &opts).expect("returned configuration stays feasible");
    let p = total_power(&again, &scn).unwrap().total;
    let want = r.total_w().unwrap();
    assert!((p - want).abs() <= 1e-4 * want, "re-solved {p} vs returned {want}");
}

#[test]
fn fixed_pa_is_evaluated_with_linear_amplifier() {
    let scn = desk(2);
    let r = solve_instance(&scn, SchemeId::FixedPa, &AoOptions::default());
    let linear = scn.with_beta_pa(0.0);
    check_result(&linear, &r);
    let d = r.design.as_ref().unwrap();
    let radiated: f64 = d.per_antenna_power().iter().sum();
    assert!((r.power.as_ref().unwrap().p_pa - radiated / scn.hw.eta_max).abs() < 1e-12);
}
