use idw_core::oracle::{exact, level_irrelevance_test, random_instance, DEFAULT_SHIFTS};
use idw_core::{population_gram, potential_weights, solve_implicit_design, SolverTolerances};

#[test]
fn solver_agrees_with_shift_test() {
    let mut positives = 0;
    let mut negatives = 0;
    for seed in 0..60u64 {
        let inst = random_instance(seed).unwrap();
        let g = population_gram(&inst.spec, &inst.pop, &inst.design).unwrap();
        let pws = potential_weights(&inst.spec, &inst.pop, &g).unwrap();
        let report = solve_implicit_design(&pws, &inst.spec, &inst.pop, &SolverTolerances::default()).unwrap();
        let solver = report.contains(&inst.design, 1e-7);
        let shift =
            level_irrelevance_test(&inst.spec, &inst.pop, &inst.table, &inst.design, DEFAULT_SHIFTS, seed).unwrap();
        let ew = exact::potential_weights(&inst.spec, &inst.pop, &inst.exact_design).unwrap();
        let exact_solves = exact::solves(&ew, &inst.exact_design);
        println!("seed {seed} {} solver={solver} shift={:.3e} exact={exact_solves}", inst.family, shift.max_deviation);
        assert_eq!(solver, shift.passes(1e-9), "seed {seed}");
        assert_eq!(solver, exact_solves, "seed {seed}");
        if solver {
            positives += 1
        } else {
            negatives += 1
        }
    }
    println!("{positives} positive, {negatives} negative");
    assert!(positives >= 10 && negatives >= 10);
}
