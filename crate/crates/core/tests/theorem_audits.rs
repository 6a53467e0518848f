use mixopt_core::domain::RepetitionBudget;
use mixopt_core::pipeline::validate::{validate_theorems, ValidateConfig};

#[test]
fn bounds_hold_on_random_adds() {
    let rep = validate_theorems(&ValidateConfig {
        instances: 100,
        seed: 7,
        ..ValidateConfig::default()
    })
    .unwrap();
    let s = &rep.summary;
    println!("{s:?}");
    for r in rep.gap_rows.iter().filter(|r| !r.holds) {
        println!("gap bound violated: {r:?}");
    }
    for r in rep.add_rows.iter().filter(|r| !r.holds || !r.monotone) {
        println!("add audit: {r:?}");
    }
    assert_eq!(s.gap_feasible, s.gap_audits);
    assert_eq!(s.gap_holds, s.gap_feasible);
    assert_eq!(s.add_holds, s.add_feasible);
    assert!(s.monotone >= 95);
}

#[test]
fn tight_budgets_leave_less_room_for_new_domains() {
    // with R = 4000 the caps on reused domains stay feasible and added domains cap below 0.025
    let rep = validate_theorems(&ValidateConfig {
        instances: 20,
        seed: 8,
        budgets: vec![None, Some(RepetitionBudget::new(1.0, 4_000).unwrap())],
        ..ValidateConfig::default()
    })
    .unwrap();
    let m = &rep.summary.mean_one_minus_rho;
    println!("{:?}", rep.summary);
    assert!(m[1] < m[0], "{m:?}");
}
