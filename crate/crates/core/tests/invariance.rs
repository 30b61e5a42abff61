use idw_core::estimators::{ate_weights, ipw_estimate, patch_design, trimmed_ate, PatchPolicy, DIVISION_GUARD};
use idw_core::weights::weighted_outcome_sum;
use idw_core::{
    estimator_weights, fwl_residualize, population_gram, potential_weights, reparametrize, sample_gram, Design,
    DesignKind, Population, RegressionSpec, TreatmentSet,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    spec: RegressionSpec,
    pop: Population,
    design: Design,
}

/// Random regressors with an intercept, contrast on the leading column.
fn case(seed: u64) -> Case {
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
    let probs = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..levels).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let design = Design::new(probs, DesignKind::True).unwrap();
    let pop = Population::panel(vec![], vec![vec![]; n], periods);
    Case { spec, pop, design }
}

fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax()).max(1e-300);
    (a - b).amax() / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn fwl_keeps_potential_weights(seed in any::<u64>()) {
        let c = case(seed);
        let g = population_gram(&c.spec, &c.pop, &c.design).unwrap();
        let base = potential_weights(&c.spec, &c.pop, &g).unwrap();
        let keep = [0usize];
        let r = fwl_residualize(&c.spec, &g, &keep).unwrap();
        let g2 = population_gram(&r, &c.pop, &c.design).unwrap();
        let after = potential_weights(&r, &c.pop, &g2).unwrap();
        for i in 0..c.pop.n() {
            for w in 0..c.spec.levels() {
                prop_assert!(rel_diff(base.rho(i, w), after.rho(i, w)) < 1e-9);
            }
        }
    }

    #[test]
    fn reparametrization_keeps_potential_weights(seed in any::<u64>()) {
        let c = case(seed);
        let k = c.spec.n_regressors();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let m = DMatrix::from_fn(k, k, |a, b| if a == b { 2.0 } else { 0.0 } + rng.random_range(-0.5..0.5));
        let r = reparametrize(&c.spec, &m).unwrap();
        let base = potential_weights(&c.spec, &c.pop, &population_gram(&c.spec, &c.pop, &c.design).unwrap()).unwrap();
        let after = potential_weights(&r, &c.pop, &population_gram(&r, &c.pop, &c.design).unwrap()).unwrap();
        for i in 0..c.pop.n() {
            for w in 0..c.spec.levels() {
                prop_assert!(rel_diff(base.rho(i, w), after.rho(i, w)) < 1e-9);
            }
        }
    }
}

/// Λβ̂ from stacked normal equations.
fn ols_contrast(spec: &RegressionSpec, w: &[usize], y: &[Vec<f64>]) -> Vec<f64> {
    let k = spec.n_regressors();
    let mut xtx = DMatrix::zeros(k, k);
    let mut xty = DVector::zeros(k);
    for (i, &wi) in w.iter().enumerate() {
        let z = spec.z(i, wi);
        for t in 0..spec.periods() {
            let row = z.row(t).transpose();
            xtx += &row * row.transpose();
            xty += &row * y[i][t];
        }
    }
    let beta = xtx.lu().solve(&xty).unwrap();
    (spec.contrast() * beta).iter().cloned().collect()
}

fn observed(c: &Case, seed: u64) -> (Population, Vec<usize>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let n = c.pop.n();
    let levels = c.spec.levels();
    let w: Vec<usize> = (0..n).map(|i| if i < levels { i } else { rng.random_range(0..levels) }).collect();
    let y: Vec<Vec<f64>> =
        (0..n).map(|_| (0..c.spec.periods()).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let pop = c
        .pop
        .clone()
        .with_treatment(w.clone())
        .with_outcomes(y.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect());
    (pop, w, y)
}

#[test]
fn estimator_weights_reproduce_ols() {
    for seed in 0..50u64 {
        let c = case(seed);
        let (pop, w, y) = observed(&c, seed);
        let g = sample_gram(&c.spec, &pop).unwrap();
        if g.is_singular() {
            continue;
        }
        let pws = potential_weights(&c.spec, &pop, &g).unwrap();
        let ew = estimator_weights(&pws, &pop).unwrap();
        let tau = weighted_outcome_sum(&ew, &pop).unwrap();
        let ols = ols_contrast(&c.spec, &w, &y);
        assert!((tau[0] - ols[0]).abs() < 1e-8, "seed {seed}: {} vs {}", tau[0], ols[0]);

        // Point-mass IPW with ω = ρ̂π.
        let pm = Design::point_mass(&w, c.spec.levels()).unwrap();
        let omega: Vec<Vec<DMatrix<f64>>> =
            (0..pop.n()).map(|i| (0..c.spec.levels()).map(|l| pws.rho(i, l) * pm.prob(i, l)).collect()).collect();
        let ipw = ipw_estimate(&pm, &pop, &omega, DIVISION_GUARD).unwrap();
        assert!((ipw.estimate[0] - ols[0]).abs() < 1e-9);
    }
}

#[test]
fn trimming_at_zero_and_repatching() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 200;
    let pi: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let w: Vec<usize> = pi.iter().map(|&p| usize::from(rng.random::<f64>() < p)).collect();
    let y: Vec<f64> = (0..n).map(|i| w[i] as f64 + rng.random_range(-1.0..1.0)).collect();
    let pop = Population::cross_section(vec![], vec![vec![]; n]).with_treatment(w).with_scalar_outcomes(&y);
    let d = Design::binary(&pi, DesignKind::True).unwrap();
    let plain = ipw_estimate(&d, &pop, &ate_weights(n, &[]), DIVISION_GUARD).unwrap();
    let t = trimmed_ate(&d, &pop, 0.0).unwrap();
    assert!((plain.estimate[0] - t.estimate).abs() < 1e-12);
    for policy in [PatchPolicy::FixedBins(5), PatchPolicy::Quantile(6), PatchPolicy::Recursive(Default::default())] {
        let pd = patch_design(&d, &pop, policy).unwrap();
        let again = pd.repatch(&pop).unwrap();
        assert_eq!(again.patched_probs, pd.patched_probs);
        assert!(pd.patched_probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
