//! End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
//! process exits nonzero when any check fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use idw_core::catalog::{
    angrist_design, event_study_design, interacted_t_design, kline_design, multivalued_design, owfe_check,
    saturated_interacted_design, transplant_residual, twfe_covariate_condition, twfe_design, unbalanced_twfe_condition,
    FractionalLinear,
};
use idw_core::estimators::{ate_weights, PatchedOptions};
use idw_core::model::{Centering, NamedCentering};
use idw_core::oracle::{
    exact, level_irrelevance_test, random_instance, summarize, Scenario, ScenarioSetup, DEFAULT_SHIFTS,
};
use idw_core::weights::weighted_outcome_sum;
use idw_core::{
    build_template, estimator_weights, fwl_residualize, implicit_estimand, patch_design, patched_estimate,
    population_gram, potential_weights, reparametrize, sample_gram, solve_implicit_design, CatalogMode, Design,
    DesignKind, ImplicitDesignReport, PatchPolicy, Population, RegressionSpec, SolverTolerances, TemplateOptions,
    TreatmentSet, Verdict,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Check = Result<String, String>;
type CheckFn = fn() -> Check;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(elapsed: Duration, limit: f64) -> Check {
    ensure!(elapsed.as_secs_f64() < limit, "took {:.2} s, limit {limit} s", elapsed.as_secs_f64());
    Ok(String::new())
}

fn tol() -> SolverTolerances {
    SolverTolerances::default()
}

fn solve_under(spec: &RegressionSpec, pop: &Population, truth: &Design) -> ImplicitDesignReport {
    let pws = potential_weights(spec, pop, &population_gram(spec, pop, truth).unwrap()).unwrap();
    solve_implicit_design(&pws, spec, pop, &tol()).unwrap()
}

fn gap(a: &Design, b: &Design) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..a.n() {
        for w in 0..a.levels() {
            m = m.max((a.prob(i, w) - b.prob(i, w)).abs());
        }
    }
    m
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, levels: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..levels).map(|_| rng.random_range(0.2..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn three_arm_example() -> Check {
    const TAU1: [[i64; 3]; 2] = [[-140, 41, 99], [-72, 171, -99]];
    const TAU2: [[i64; 3]; 2] = [[-160, 9, 151], [-52, -9, 61]];
    let start = Instant::now();
    let pop = Population::cross_section(vec!["x".into()], vec![vec![0.0], vec![1.0]]);
    let ts = TreatmentSet::multivalued(2).unwrap();
    let opts = TemplateOptions { covariates: vec!["x".into()], ..Default::default() };
    let spec = build_template("multivalued", &opts, &pop, &ts).unwrap();
    let truth = Design::new(vec![vec![0.5, 0.05, 0.45], vec![0.1, 0.45, 0.45]], DesignKind::True).unwrap();
    let pws = potential_weights(&spec, &pop, &population_gram(&spec, &pop, &truth).unwrap()).unwrap();
    let report = solve_implicit_design(&pws, &spec, &pop, &tol()).unwrap();
    ensure!(report.counts.unique == 2, "solution not unique: {:?}", report.counts);
    let design = report.design.as_ref().ok_or("no design")?;
    ensure!(gap(design, &truth) < 1e-12, "design gap {:e}", gap(design, &truth));
    let est = implicit_estimand(design, &pws).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        for w in 0..3 {
            worst = worst.max((est.omega[i][w][(0, 0)] - TAU1[i][w] as f64 / 106.0).abs());
            worst = worst.max((est.omega[i][w][(1, 0)] - TAU2[i][w] as f64 / 106.0).abs());
        }
    }
    ensure!(worst < 1e-12, "float table error {worst:e}");

    let probs = exact::design(&[vec![(1, 2), (1, 20), (9, 20)], vec![(1, 10), (9, 20), (9, 20)]]);
    let ew = exact::potential_weights(&spec, &pop, &probs).unwrap();
    let omega = exact::omega(&ew, &probs);
    for i in 0..2 {
        ensure!(
            exact::solve_unit(&ew.rho[i]) == exact::ExactUnit::Unique(probs[i].clone()),
            "exact unit {i} not unique"
        );
        for w in 0..3 {
            ensure!(*omega[i][w].get(0, 0) == exact::q(TAU1[i][w], 106), "exact cell ({i},{w}) row 0");
            ensure!(*omega[i][w].get(1, 0) == exact::q(TAU2[i][w], 106), "exact cell ({i},{w}) row 1");
        }
    }
    within(start.elapsed(), 1.0)?;
    Ok(format!("12 cells, float error {worst:.1e}, rational exact"))
}

fn interacted_fixed_point() -> Check {
    let start = Instant::now();
    let n = 100;
    let x: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64 / n as f64).powi(3)]).collect();
    let pop = Population::cross_section(vec!["x".into()], x.clone());
    let init: Vec<f64> = x
        .iter()
        .map(|r| {
            let l = 1.0 + (r[0] - 0.5) * 0.25;
            l / (1.0 + 2.0 * l)
        })
        .collect();
    let init = Design::binary(&init, DesignKind::Candidate).unwrap();
    let res = interacted_t_design(
        &pop,
        &TreatmentSet::binary(),
        &["x".into()],
        Centering::Named(NamedCentering::Ate),
        CatalogMode::FixedPoint(&init),
    )
    .map_err(|e| e.to_string())?;
    let f = FractionalLinear::from_result(&res).ok_or("no fractional-linear parameters")?;
    let expect =
        [(f.theta0, 0.3254446337090774), (f.theta1[0], 0.014146176384094272), (f.gamma2[0], 0.044263163071495276)];
    for (got, want) in expect {
        ensure!((got - want).abs() < 1e-9, "parameter {got} vs {want}");
    }
    let new_x: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64]).collect();
    let tr = transplant_residual(&f, &new_x, &x).map_err(|e| e.to_string())?;
    ensure!((tr.residual - 0.08293240507391064).abs() < 1e-9, "transplant residual {}", tr.residual);
    within(start.elapsed(), 5.0)?;
    Ok(format!("theta0={} theta1={} gamma2={} transplant residual={}", f.theta0, f.theta1[0], f.gamma2[0], tr.residual))
}

fn shift_oracle_equivalence() -> Check {
    let start = Instant::now();
    let (mut pos, mut neg) = (0, 0);
    for seed in 0..50u64 {
        let inst = random_instance(seed).map_err(|e| e.to_string())?;
        ensure!(inst.pop.n() <= 6 && inst.spec.levels() <= 3 && inst.pop.periods() <= 3, "instance {seed} too large");
        let report = solve_under(&inst.spec, &inst.pop, &inst.design);
        let solver = report.contains(&inst.design, 1e-7);
        let shift = level_irrelevance_test(&inst.spec, &inst.pop, &inst.table, &inst.design, DEFAULT_SHIFTS, seed)
            .map_err(|e| e.to_string())?;
        ensure!(shift.basis_swept, "seed {seed}: basis sweep skipped");
        ensure!(
            solver == shift.passes(1e-9),
            "seed {seed}: solver {solver}, shift deviation {:e}",
            shift.max_deviation
        );
        if solver {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    within(start.elapsed(), 30.0)?;
    Ok(format!("50 instances agree ({pos} level-irrelevant, {neg} not)"))
}

fn closed_forms_match_solver() -> Check {
    let start = Instant::now();
    let cols = vec!["x".to_string()];
    let opts = TemplateOptions { covariates: cols.clone(), ..Default::default() };
    let build = |name: &str, o: &TemplateOptions, pop: &Population, ts: &TreatmentSet, truth: &Design| {
        let mut o = o.clone();
        o.centering_design = Some(truth.clone());
        solve_under(&build_template(name, &o, pop, ts).unwrap(), pop, truth)
    };
    let mut worst: f64 = 0.0;
    let mut compare =
        |name: &str, seed: u64, rep: &ImplicitDesignReport, cat: &Design, gram: bool| -> Result<(), String> {
            let d = rep.design.as_ref().ok_or_else(|| format!("{name} seed {seed}: solver found no design"))?;
            let g = gap(d, cat);
            worst = worst.max(g);
            ensure!(g < 1e-8, "{name} seed {seed}: gap {g:e}");
            if gram {
                ensure!(rep.gram_consistent == Some(true), "{name} seed {seed}: not Gram-consistent");
            }
            Ok(())
        };
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(15..40usize);
        let pop = Population::cross_section(cols.clone(), (0..n).map(|_| vec![rng.random_range(0.0..1.0)]).collect());
        let ts = TreatmentSet::binary();
        let truth = Design::new(random_rows(&mut rng, n, 2), DesignKind::True).unwrap();
        let mode = CatalogMode::Population(&truth);

        let cat = angrist_design(&pop, &ts, &cols, mode).unwrap();
        compare("angrist", seed, &build("angrist", &opts, &pop, &ts, &truth), cat.design.as_ref().unwrap(), true)?;
        let cat = kline_design(&pop, &ts, &cols, mode).unwrap();
        compare("kline", seed, &build("kline", &opts, &pop, &ts, &truth), cat.design.as_ref().unwrap(), false)?;
        let t = Centering::At(rng.random_range(0.0..1.0));
        let cat = interacted_t_design(&pop, &ts, &cols, t, mode).unwrap();
        let it = TemplateOptions { t: Some(t), ..opts.clone() };
        compare(
            "interacted_t",
            seed,
            &build("interacted_t", &it, &pop, &ts, &truth),
            cat.design.as_ref().unwrap(),
            false,
        )?;

        let ts3 = TreatmentSet::multivalued(2).unwrap();
        let truth3 = Design::new(random_rows(&mut rng, n, 3), DesignKind::True).unwrap();
        let cat = multivalued_design(&pop, &ts3, &cols, CatalogMode::Population(&truth3)).unwrap();
        compare(
            "multivalued",
            seed,
            &build("multivalued", &opts, &pop, &ts3, &truth3),
            cat.design.as_ref().unwrap(),
            true,
        )?;

        let dpop = Population::cross_section(
            cols.clone(),
            (0..n).map(|_| vec![f64::from(rng.random_range(0..3u8))]).collect(),
        );
        let cat = saturated_interacted_design(&dpop, &ts, &cols, mode).unwrap();
        let rep = build("saturated_interacted", &opts, &dpop, &ts, &truth);
        compare("saturated_interacted", seed, &rep, cat.design.as_ref().unwrap(), true)?;

        let t_len = rng.random_range(3..=5usize);
        let mut cohorts: Vec<Option<usize>> = vec![None];
        cohorts.extend((1..t_len).map(Some));
        let pts = TreatmentSet::staggered(t_len, &cohorts).unwrap();
        let m = rng.random_range(8..20usize);
        let ppop = Population::panel(vec![], vec![vec![]; m], t_len);
        let ptruth = Design::new(random_rows(&mut rng, m, pts.len()), DesignKind::True).unwrap();
        let cat = twfe_design(&ppop, &pts, CatalogMode::Population(&ptruth)).unwrap();
        compare(
            "twfe",
            seed,
            &build("twfe", &TemplateOptions::default(), &ppop, &pts, &ptruth),
            cat.design.as_ref().unwrap(),
            true,
        )?;
        let es = TemplateOptions { event_times: vec![0, 1], ..Default::default() };
        let rep = build("event_study", &es, &ppop, &pts, &ptruth);
        let cat = event_study_design(&ppop, &pts, &[0, 1], CatalogMode::Population(&ptruth)).unwrap();
        ensure!(
            rep.contains(cat.design.as_ref().unwrap(), 1e-8),
            "event_study seed {seed}: closed form outside solution set"
        );
    }
    within(start.elapsed(), 60.0)?;
    Ok(format!("7 templates x 20 populations, max gap {worst:.1e}"))
}

/// Random regressors with an intercept; the contrast picks the first column.
fn random_spec(seed: u64) -> (RegressionSpec, Population, Design) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(6..=14usize);
    let levels = rng.random_range(2..=3usize);
    let periods = rng.random_range(1..=2usize);
    let k = rng.random_range(3..=5usize);
    let ts = if periods == 1 {
        TreatmentSet::multivalued(levels - 1).unwrap()
    } else {
        let paths = [vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        TreatmentSet::from_values(paths[..levels].to_vec()).unwrap()
    };
    let draws: Vec<Vec<Vec<Vec<f64>>>> = (0..n)
        .map(|_| {
            (0..levels)
                .map(|_| (0..periods).map(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect()).collect())
                .collect()
        })
        .collect();
    let mut contrast = DMatrix::zeros(1, k);
    contrast[(0, 0)] = 1.0;
    let spec = RegressionSpec::from_fn(n, ts, contrast, |i, t, w| {
        let mut z = draws[i][w][t].clone();
        z[k - 1] = 1.0;
        z
    })
    .unwrap();
    let design = Design::new(random_rows(&mut rng, n, levels), DesignKind::True).unwrap();
    (spec, Population::panel(vec![], vec![vec![]; n], periods), design)
}

fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(b.amax()).max(1e-300)
}

fn invariance_suite() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let (spec, pop, design) = random_spec(1000 + seed);
        let g = population_gram(&spec, &pop, &design).unwrap();
        let base = potential_weights(&spec, &pop, &g).unwrap();
        let fwl = fwl_residualize(&spec, &g, &[0]).unwrap();
        let after_fwl = potential_weights(&fwl, &pop, &population_gram(&fwl, &pop, &design).unwrap()).unwrap();
        let k = spec.n_regressors();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(k, k, |a, b| if a == b { 2.0 } else { 0.0 } + rng.random_range(-0.5..0.5));
        let rp = reparametrize(&spec, &m).unwrap();
        let after_rp = potential_weights(&rp, &pop, &population_gram(&rp, &pop, &design).unwrap()).unwrap();
        for i in 0..pop.n() {
            for w in 0..spec.levels() {
                worst = worst.max(rel_diff(base.rho(i, w), after_fwl.rho(i, w)));
                worst = worst.max(rel_diff(base.rho(i, w), after_rp.rho(i, w)));
            }
        }
    }
    ensure!(worst < 1e-9, "potential weights moved by {worst:e}");

    let mut ols_worst: f64 = 0.0;
    let mut used = 0;
    let mut seed = 0u64;
    while used < 50 {
        let (spec, pop, _) = random_spec(seed);
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        let levels = spec.levels();
        let w: Vec<usize> = (0..pop.n()).map(|i| if i < levels { i } else { rng.random_range(0..levels) }).collect();
        let y: Vec<Vec<f64>> =
            (0..pop.n()).map(|_| (0..spec.periods()).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let pop = pop
            .with_treatment(w.clone())
            .with_outcomes(y.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect());
        let g = sample_gram(&spec, &pop).unwrap();
        if g.is_singular() {
            continue;
        }
        used += 1;
        let pws = potential_weights(&spec, &pop, &g).unwrap();
        let tau = weighted_outcome_sum(&estimator_weights(&pws, &pop).unwrap(), &pop).unwrap();
        // Normal equations, solved independently of the Gram machinery.
        let kk = spec.n_regressors();
        let (mut xtx, mut xty) = (DMatrix::zeros(kk, kk), DVector::zeros(kk));
        for (i, &wi) in w.iter().enumerate() {
            for t in 0..spec.periods() {
                let row = spec.z(i, wi).row(t).transpose();
                xtx += &row * row.transpose();
                xty += &row * y[i][t];
            }
        }
        let beta = xtx.lu().solve(&xty).ok_or("singular normal equations")?;
        let ols = (spec.contrast() * beta)[0];
        ols_worst = ols_worst.max((tau[0] - ols).abs());
    }
    ensure!(ols_worst < 1e-8, "estimator weights differ from OLS by {ols_worst:e}");
    Ok(format!("FWL/reparametrization max rel diff {worst:.1e}; OLS max diff {ols_worst:.1e} on 50 instances"))
}

fn staggered_sets(t_len: usize) -> Vec<Vec<Option<usize>>> {
    let all: Vec<Option<usize>> = std::iter::once(None).chain((0..t_len).map(Some)).collect();
    (1u32..(1 << all.len()))
        .filter(|m| m.count_ones() >= 2)
        .map(|m| all.iter().enumerate().filter(|(j, _)| m & (1 << j) != 0).map(|(_, c)| *c).collect())
        .collect()
}

fn panel_fragility() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut sets = 0;
    for t_len in 2..=4 {
        for cohorts in staggered_sets(t_len) {
            // Staggered paths span 1_T exactly when an always-treated path is present.
            if cohorts.contains(&Some(0)) {
                continue;
            }
            sets += 1;
            let ts = TreatmentSet::staggered(t_len, &cohorts).unwrap();
            ensure!(owfe_check(&ts).unwrap().exists == Some(false), "{cohorts:?}: closed form admits a design");
            let pop = Population::panel(vec![], vec![vec![]; 4], t_len);
            let truth = Design::new(random_rows(&mut rng, 4, ts.len()), DesignKind::True).unwrap();
            let spec = build_template("owfe", &TemplateOptions::default(), &pop, &ts).unwrap();
            let rep = solve_under(&spec, &pop, &truth);
            if cohorts.contains(&None) {
                // The only solution is a point mass on the never-treated path,
                // whose Gram matrix vanishes.
                let degenerate =
                    rep.design.as_ref().is_some_and(|d| (0..d.n()).all(|i| (d.prob(i, 0) - 1.0).abs() < 1e-9));
                ensure!(
                    rep.verdict == Verdict::GramInconsistent && degenerate,
                    "{cohorts:?}: solver verdict {:?}",
                    rep.verdict
                );
            } else {
                ensure!(rep.verdict == Verdict::Nonexistent, "{cohorts:?}: solver verdict {:?}", rep.verdict);
            }
        }
    }

    // Two paths plus 1_T span a plane in R^4, so generic covariate paths leave it.
    let t_len = 4;
    let ts = TreatmentSet::staggered(t_len, &[None, Some(2)]).unwrap();
    let n = 30;
    let base: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| (0..t_len).map(|t| vec![base[i] * (1.0 + 0.4 * t as f64) + rng.random_range(-0.3..0.3)]).collect())
        .collect();
    let pop =
        Population::panel(vec!["x".into()], x.iter().map(|r| r[0].clone()).collect(), t_len).with_varying_covariates(x);
    let rows: Vec<Vec<f64>> = base.iter().map(|b| vec![0.5 - 0.3 * b, 0.5 + 0.3 * b]).collect();
    let truth = Design::new(rows, DesignKind::True).unwrap();
    let cov = twfe_covariate_condition(&pop, &ts, &["x".into()], CatalogMode::Population(&truth)).unwrap();
    let beta = cov.parameter("beta_w_to_x").unwrap()[0];
    let span = cov.condition("span_membership").unwrap();
    ensure!(beta.abs() > 1e-6, "beta_w_to_x vanished: {beta:e}");
    ensure!(!span.holds && span.slack > 0.0, "span distance {:e} within {:e}", span.slack, span.threshold);

    let (t_len, n) = (4, 60);
    let ts = TreatmentSet::staggered(t_len, &[None, Some(1), Some(2)]).unwrap();
    let mask: Vec<Vec<bool>> = (0..n).map(|i| (0..t_len).map(|t| !(i < n / 2 && t == t_len - 1)).collect()).collect();
    let pop = Population::panel(vec![], vec![vec![]; n], t_len).with_observed_periods(mask);
    let hetero: Vec<Vec<f64>> =
        (0..n).map(|i| if i < n / 2 { vec![0.2, 0.6, 0.2] } else { vec![0.5, 0.1, 0.4] }).collect();
    let hetero = Design::new(hetero, DesignKind::True).unwrap();
    let bad = unbalanced_twfe_condition(&pop, &ts, CatalogMode::Population(&hetero)).unwrap();
    let slack = bad.condition("missingness_uncorrelated").unwrap().slack;
    ensure!(bad.exists == Some(false) && slack > 1e-8, "adoption-correlated missingness passed (slack {slack:e})");
    let flat = Design::constant(&[0.35, 0.35, 0.3], n, DesignKind::True).unwrap();
    let good = unbalanced_twfe_condition(&pop, &ts, CatalogMode::Population(&flat)).unwrap();
    ensure!(good.exists == Some(true), "constant design failed the missingness condition");
    within(start.elapsed(), 5.0)?;
    Ok(format!("{sets} path sets nonexistent; span distance {:.3e}; missingness slack {slack:.3e}", span.slack))
}

fn forbidden_comparisons() -> Check {
    let start = Instant::now();
    let mut min_post: f64 = f64::INFINITY;
    let mut cases = 0;
    for t_len in 2..=6 {
        for a in 1..t_len {
            let ts = TreatmentSet::staggered(t_len, &[None, Some(a)]).unwrap();
            for step in 1..10 {
                let p = step as f64 / 10.0;
                let pop = Population::panel(vec![], vec![vec![]; 2], t_len);
                let truth = Design::constant(&[1.0 - p, p], 2, DesignKind::True).unwrap();
                let spec = build_template("twfe", &TemplateOptions::default(), &pop, &ts).unwrap();
                let pws = potential_weights(&spec, &pop, &population_gram(&spec, &pop, &truth).unwrap()).unwrap();
                for i in 0..2 {
                    for t in a..t_len {
                        min_post = min_post.min(pws.rho(i, 1)[(0, t)]);
                    }
                }
                cases += 1;
            }
        }
    }
    ensure!(min_post >= -1e-12, "negative post-treatment weight {min_post:e}");

    let mut two_cohort = 0;
    for t_len in 3..=6 {
        for early in 1..t_len {
            for late in early + 1..t_len {
                let ts = TreatmentSet::staggered(t_len, &[Some(early), Some(late)]).unwrap();
                let pop = Population::panel(vec![], vec![vec![]; 2], t_len);
                let truth = Design::constant(&[0.5, 0.5], 2, DesignKind::True).unwrap();
                let spec = build_template("twfe", &TemplateOptions::default(), &pop, &ts).unwrap();
                let pws = potential_weights(&spec, &pop, &population_gram(&spec, &pop, &truth).unwrap()).unwrap();
                let last = pws.rho(0, 0)[(0, t_len - 1)];
                ensure!(last < 0.0, "T={t_len} cohorts {early},{late}: last-period weight {last}");
                two_cohort += 1;
            }
        }
    }
    within(start.elapsed(), 1.0)?;
    Ok(format!("{cases} single-path designs min post weight {min_post:.3e}; {two_cohort} two-cohort sets negative"))
}

fn consistency_monte_carlo() -> Check {
    let start = Instant::now();
    let mut points = Vec::new();
    for n in [200, 2000, 20000] {
        let setup = ScenarioSetup::new(Scenario::AngristLinear, n, 8).map_err(|e| e.to_string())?;
        let runs = (0..200u64)
            .into_par_iter()
            .map(|r| setup.replicate(r))
            .collect::<idw_core::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        points.push(summarize(&setup, &runs));
    }
    let errs: Vec<f64> = points.iter().map(|p| p.median_design_error).collect();
    ensure!(errs.windows(2).all(|w| w[1] < w[0]), "median design error not decreasing: {errs:?}");
    ensure!(errs[2] < 0.05, "median design error at n=20000 is {}", errs[2]);
    within(start.elapsed(), 300.0)?;
    Ok(format!("median max|pi_hat - pi*| = {:.4} / {:.4} / {:.4}", errs[0], errs[1], errs[2]))
}

fn patching_recovers_strata() -> Check {
    let start = Instant::now();
    let per = 500;
    let strata_pi = [0.25, 0.75, 0.35, 0.65];
    let effect = [1.0, 4.0, 0.0, 2.0];
    let base = [0.0, 1.0, 0.5, 2.0];
    let n = 4 * per;
    let x: Vec<usize> = (0..n).map(|i| i / per).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y0: Vec<f64> = x.iter().map(|&s| base[s] + rng.random_range(-1.0..1.0)).collect();
    let y1: Vec<f64> = x.iter().enumerate().map(|(i, &s)| y0[i] + effect[s] + rng.random_range(-0.5..0.5)).collect();
    let target = (0..n).map(|i| y1[i] - y0[i]).sum::<f64>() / n as f64;
    let pop = Population::cross_section(vec!["x".into()], x.iter().map(|&s| vec![s as f64]).collect());
    let opts = TemplateOptions { covariates: vec!["x".into()], ..Default::default() };
    let reps = 1000u64;
    let draws = (0..reps)
        .into_par_iter()
        .map(|r| -> idw_core::Result<(f64, f64)> {
            let mut rng = idw_core::oracle::rng_stream(99, r);
            let w: Vec<usize> = x.iter().map(|&s| usize::from(rng.random::<f64>() < strata_pi[s])).collect();
            let y: Vec<f64> = (0..n).map(|i| if w[i] == 1 { y1[i] } else { y0[i] }).collect();
            let obs = pop.clone().with_treatment(w).with_scalar_outcomes(&y);
            let spec = build_template("angrist", &opts, &obs, &TreatmentSet::binary())?;
            let pws = potential_weights(&spec, &obs, &sample_gram(&spec, &obs)?)?;
            let raw = weighted_outcome_sum(&estimator_weights(&pws, &obs)?, &obs)?[0];
            let report = solve_implicit_design(&pws, &spec, &obs, &tol())?;
            let implicit = report.design.ok_or(idw_core::Error::Invalid("no implicit design".into()))?;
            let pd = patch_design(&implicit, &obs, PatchPolicy::FixedBins(4))?;
            let est = patched_estimate(&pd, &obs, &ate_weights(n, &pd.excluded), PatchedOptions { stabilized: false })?;
            Ok((raw, est.estimate[0]))
        })
        .collect::<idw_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let stats = |v: Vec<f64>| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        (m - target, sd / (v.len() as f64).sqrt())
    };
    let (raw_bias, raw_se) = stats(draws.iter().map(|d| d.0).collect());
    let (patched_bias, patched_se) = stats(draws.iter().map(|d| d.1).collect());
    ensure!(patched_bias.abs() < 3.0 * patched_se, "patched bias {patched_bias:.4} vs 3 SE {:.4}", 3.0 * patched_se);
    ensure!(raw_bias.abs() > 3.0 * raw_se, "regression bias {raw_bias:.4} within 3 SE {:.4}", 3.0 * raw_se);
    within(start.elapsed(), 120.0)?;
    Ok(format!(
        "patched bias {patched_bias:.4} (SE {patched_se:.4}); regression bias {raw_bias:.4} (SE {raw_se:.4}); target {target:.4}"
    ))
}

fn cli_determinism() -> Check {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("analyze.json");
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for d in &dirs {
        let out = Command::new(env!("CARGO_BIN_EXE_idw"))
            .args([
                "analyze",
                "--config",
                config.to_str().unwrap(),
                "--seed",
                "17",
                "--out",
                d.path().to_str().unwrap(),
            ])
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(out.status.success(), "analyze failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut bytes = 0;
    for f in ["report.json", "design.csv", "weights.csv"] {
        let a = std::fs::read(dirs[0].path().join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(f)).map_err(|e| e.to_string())?;
        ensure!(a == b, "{f} differs between runs");
        bytes += a.len();
    }
    Ok(format!("report.json, design.csv, weights.csv identical ({bytes} bytes)"))
}

fn main() {
    let checks: [(&str, CheckFn); 10] = [
        ("three-arm weight table, float and rational", three_arm_example),
        ("interacted fixed point and transplant residual", interacted_fixed_point),
        ("solver vs brute-force level-shift oracle", shift_oracle_equivalence),
        ("closed forms vs generic solver, Gram consistency", closed_forms_match_solver),
        ("FWL, reparametrization and OLS invariance", invariance_suite),
        ("panel fragility: one-way FE, covariates, missingness", panel_fragility),
        ("forbidden comparisons in staggered TWFE", forbidden_comparisons),
        ("consistency Monte Carlo, linear design", consistency_monte_carlo),
        ("patching recovers the stratified effect", patching_recovers_strata),
        ("byte-identical analyze reports", cli_determinism),
    ];
    let mut failed = 0;
    for (k, (name, f)) in checks.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} [{secs:.2} s]: {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} [{secs:.2} s]: {why}", k + 1);
            }
        }
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
