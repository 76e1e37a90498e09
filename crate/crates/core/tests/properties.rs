mod common;

use common::checks::*;
use common::min_eigenvalue;
use grplasso_te::data::default_design;
use grplasso_te::diagnostics::sparse_eig;
use grplasso_te::effects::{estimate_mu, estimate_mu_cond, influence_values, Estimand};
use grplasso_te::refit::RefitPlan;
use grplasso_te::solver::{
    fit_grouplasso_linear, fit_grouplasso_logistic, kkt_residuals, lambda_max_linear, lambda_max_logistic,
    SolverConfig,
};
use grplasso_te::stats::mean;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::Rng;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0x6c61_7373),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn logistic_gradient_matches_finite_differences(seed in any::<u64>(), levels in 2usize..4) {
        let err = logistic_gradient_error(seed, levels);
        prop_assert!(err < 1e-6, "relative error {err:e}");
    }

    #[test]
    fn linear_gradient_matches_finite_differences(seed in any::<u64>(), levels in 2usize..4) {
        let err = linear_gradient_error(seed, levels);
        prop_assert!(err < 1e-6, "relative error {err:e}");
    }

    #[test]
    fn prox_satisfies_optimality(seed in any::<u64>()) {
        let r = prox_residual(seed);
        prop_assert!(r < 1e-12, "residual {r:e}");
    }

    #[test]
    fn mlogit_rows_sum_to_one(seed in any::<u64>(), span in prop::sample::select(vec![1.0, 30.0, 700.0])) {
        let e = mlogit_normalization_error(seed, span);
        prop_assert!(e < 1e-12, "error {e:e}");
    }

    #[test]
    fn variance_matrices_are_psd(seed in any::<u64>(), levels in 2usize..5) {
        let lo = variance_min_eigenvalue(seed, levels);
        prop_assert!(lo > -1e-10, "min eigenvalue {lo:e}");
    }

    #[test]
    fn standardized_columns_have_unit_second_moment(seed in any::<u64>()) {
        let e = standardization_error(seed);
        prop_assert!(e < 1e-10, "error {e:e}");
    }

    #[test]
    fn influence_values_average_to_zero(seed in any::<u64>(), levels in 2usize..4) {
        let ds = random_dataset(seed, 50, 2, levels);
        let nuis = random_nuisances(seed.rotate_left(7), &ds);
        let est = estimate_mu(&ds, &nuis).unwrap();
        for t in 0..levels {
            let psi = influence_values(&ds, &nuis, Estimand::Mu(t), est.mu_hat[t]).unwrap();
            let m = mean(psi);
            prop_assert!(m.abs() < 1e-12, "mu{t}: {m:e}");
            for tp in 0..levels {
                let point = estimate_mu_cond(&ds, &nuis, t, tp).unwrap();
                let psi = influence_values(&ds, &nuis, Estimand::MuCond(t, tp), point).unwrap();
                let m = mean(psi);
                prop_assert!(m.abs() < 1e-12, "mu{t},{tp}: {m:e}");
            }
        }
    }

    #[test]
    fn same_level_conditional_mean_is_the_group_mean(seed in any::<u64>(), levels in 2usize..4) {
        let ds = random_dataset(seed, 30, 2, levels);
        let nuis = random_nuisances(seed ^ 1, &ds);
        for t in 0..levels {
            let group = (0..ds.n()).filter(|&i| ds.d()[i] == t).map(|i| ds.y()[i]);
            let expected = mean(group);
            prop_assert_eq!(estimate_mu_cond(&ds, &nuis, t, t).unwrap().to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn back_transformed_coefficients_reproduce_fitted_values(seed in any::<u64>()) {
        let ds = random_dataset(seed, 25, 4, 2);
        let dm = default_design(&ds).unwrap();
        let mut r = rng(seed ^ 3);
        let coef = Array2::from_shape_fn((dm.p(), 2), |_| r.gen_range(-1.0..1.0));
        let raw = dm.back_transform(&coef);
        let fitted = dm.x_star().dot(&coef);
        let x = ds.x_raw();
        for i in 0..ds.n() {
            for t in 0..2 {
                let mut v = raw[[0, t]];
                for j in 0..x.ncols() {
                    v += x[[i, j]] * raw[[j + 1, t]];
                }
                let tol = 1e-10 * (1.0 + fitted[[i, t]].abs());
                prop_assert!((v - fitted[[i, t]]).abs() < tol, "{v} vs {}", fitted[[i, t]]);
            }
        }
    }

    #[test]
    fn refit_support_contains_selected_and_forced(
        selected in prop::collection::vec(1usize..12, 0..5),
        forced in prop::collection::vec(0usize..12, 0..4),
        other in prop::collection::vec(1usize..12, 0..4),
    ) {
        let ds = random_dataset(9, 40, 11, 2);
        let dm = default_design(&ds).unwrap();
        let support = RefitPlan::new(&selected, &forced).with_union(&other).support(&dm).unwrap();
        for j in selected.iter().chain(&forced).chain(&other).filter(|&&j| dm.is_penalized(j)) {
            prop_assert!(support.contains(j), "{j} missing from {support:?}");
        }
        prop_assert!(!support.contains(&0));
        prop_assert!(support.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sparse_eigenvalues_are_monotone_in_the_support(seed in any::<u64>(), cut in 1usize..6) {
        let ds = random_dataset(seed, 30, 6, 2);
        let dm = default_design(&ds).unwrap();
        let q = dm.gram();
        let small: Vec<usize> = (1..=cut).collect();
        let big: Vec<usize> = (0..dm.p()).collect();
        let (lo_s, hi_s) = sparse_eig(&q, &small).unwrap();
        let (lo_b, hi_b) = sparse_eig(&q, &big).unwrap();
        prop_assert!(lo_b <= lo_s + 1e-12 && hi_s <= hi_b + 1e-12);
        let dense: Vec<Vec<f64>> = q.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
        prop_assert!((min_eigenvalue(&dense).max(0.0) - lo_b).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(config(16))]

    /// Rescaling a raw covariate leaves the standardized design, and hence
    /// the fits, unchanged.
    #[test]
    fn fits_are_invariant_to_covariate_scale(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let ds = random_dataset(seed, 60, 3, 2);
        let mut x = ds.x_raw().to_owned();
        x.column_mut(1).mapv_inplace(|v| v * c);
        let scaled = grplasso_te::data::Dataset::new(ds.y().to_vec(), ds.d().to_vec(), x, ds.column_names().to_vec()).unwrap();
        let (dm, dm2) = (default_design(&ds).unwrap(), default_design(&scaled).unwrap());
        let cfg = SolverConfig::default();
        let lam = 0.3 * lambda_max_logistic(&ds, &dm);
        let a = fit_grouplasso_logistic(&ds, &dm, lam, &cfg).unwrap();
        let b = fit_grouplasso_logistic(&scaled, &dm2, lam, &cfg).unwrap();
        prop_assert!((a.objective - b.objective).abs() < 1e-9);
        let diff = (&a.probabilities(&dm) - &b.probabilities(&dm2)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        prop_assert!(diff < 1e-6, "probabilities differ by {diff:e}");
        let lam = 0.3 * lambda_max_linear(&ds, &dm).unwrap();
        let a = fit_grouplasso_linear(&ds, &dm, lam, &cfg).unwrap();
        let b = fit_grouplasso_linear(&scaled, &dm2, lam, &cfg).unwrap();
        let diff = (&a.fitted(&dm) - &b.fitted(&dm2)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        prop_assert!(diff < 1e-6, "fitted values differ by {diff:e}");
    }

    #[test]
    fn converged_fits_satisfy_kkt(seed in any::<u64>(), frac in 0.05f64..0.9, levels in 2usize..4) {
        let ds = random_dataset(seed, 80, 5, levels);
        let dm = default_design(&ds).unwrap();
        let cfg = SolverConfig::default();
        let lam = frac * lambda_max_logistic(&ds, &dm);
        let fit = fit_grouplasso_logistic(&ds, &dm, lam, &cfg).unwrap();
        prop_assume!(fit.converged);
        let k = kkt_residuals(&fit, &ds, &dm).unwrap();
        prop_assert!(k.max_active_gap < 1e-5 * lam, "logistic gap {:e}", k.max_active_gap);
        prop_assert!(k.min_inactive_slack >= -1e-6);
        let lam = frac * lambda_max_linear(&ds, &dm).unwrap();
        let fit = fit_grouplasso_linear(&ds, &dm, lam, &cfg).unwrap();
        prop_assume!(fit.converged);
        let k = kkt_residuals(&fit, &ds, &dm).unwrap();
        prop_assert!(k.max_active_gap < 1e-5 * lam, "linear gap {:e}", k.max_active_gap);
        prop_assert!(k.min_inactive_slack >= -1e-6);
    }
}
