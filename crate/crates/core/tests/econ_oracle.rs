//! Fixed-effects estimates against brute-force dummy-variable OLS.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tastetrace::econ::{fe_ols, hc0_std_errors, FitResult, ModelSpec, Panel, PanelObservation, Term};

fn random_panel(seed: u64, n_units: usize, n_periods: i64) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut panel = Panel::new("y", ["x1", "x2"]);
    for u in 0..n_units {
        let alpha: f64 = rng.random_range(-3.0..3.0);
        let mut periods: Vec<i64> = (0..n_periods).filter(|_| rng.random_bool(0.8)).collect();
        while periods.len() < 2 {
            let p = rng.random_range(0..n_periods);
            if !periods.contains(&p) {
                periods.push(p);
            }
        }
        periods.sort();
        for p in periods {
            let x1: f64 = rng.random_range(-2.0..2.0) + 0.3 * alpha;
            let x2: f64 = rng.random_range(-1.0..1.0);
            let e: f64 = rng.random_range(-1.0..1.0) * (1.0 + x1.abs());
            panel
                .push(PanelObservation {
                    unit_id: format!("u{u}"),
                    period: p,
                    outcome: alpha + 0.5 * x1 - 0.2 * x2 + 0.1 * x1 * x2 + 0.05 * p as f64 + e,
                    regressors: vec![x1, x2],
                    cluster_id: None,
                })
                .unwrap();
        }
    }
    panel
}

struct Lsdv {
    names: Vec<String>,
    coefficients: Vec<f64>,
    /// Unscaled sandwich over the named (non-unit) columns.
    sandwich: DMatrix<f64>,
    full_rank: bool,
}

/// OLS with one dummy per unit, solved from the normal equations.
fn lsdv(panel: &Panel, terms: &[Term]) -> Lsdv {
    let n = panel.len();
    let units: Vec<&String> = panel.units.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let periods: Vec<i64> = panel.periods.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut names: Vec<String> = terms.iter().map(Term::name).collect();
    let mut cols: Vec<Vec<f64>> = terms.iter().map(|t| t.evaluate(panel).unwrap()).collect();
    for p in &periods[1..] {
        names.push(format!("period[{p}]"));
        cols.push(panel.periods.iter().map(|q| if q == p { 1.0 } else { 0.0 }).collect());
    }
    let named = cols.len();
    for u in &units {
        cols.push(panel.units.iter().map(|v| if v == *u { 1.0 } else { 0.0 }).collect());
    }
    let k = cols.len();
    let x = DMatrix::from_fn(n, k, |i, j| cols[j][i]);
    let full_rank = x.clone().svd(false, false).rank(1e-9) == k;
    let y = DVector::from_column_slice(&panel.outcome);
    let xtx = x.transpose() * &x;
    let lu = xtx.clone().lu();
    let beta = lu.solve(&(x.transpose() * &y)).unwrap();
    let inv = lu.try_inverse().unwrap();
    let e = &y - &x * &beta;
    let mut by_unit: BTreeMap<&String, DVector<f64>> = BTreeMap::new();
    for i in 0..n {
        let s = by_unit.entry(&panel.units[i]).or_insert_with(|| DVector::zeros(k));
        for j in 0..k {
            s[j] += x[(i, j)] * e[i];
        }
    }
    let mut meat = DMatrix::zeros(k, k);
    for s in by_unit.values() {
        for a in 0..k {
            for b in 0..k {
                meat[(a, b)] += s[a] * s[b];
            }
        }
    }
    let full = &inv * meat * &inv;
    Lsdv {
        names,
        coefficients: beta.iter().take(named).copied().collect(),
        sandwich: full.view((0, 0), (named, named)).into_owned(),
        full_rank,
    }
}

fn spec(terms: &[Term]) -> ModelSpec {
    ModelSpec {
        terms: terms.to_vec(),
        ..ModelSpec::default()
    }
}

fn terms() -> Vec<Term> {
    vec![
        Term::Var("x1".into()),
        Term::Var("x2".into()),
        Term::Product("x1".into(), "x2".into()),
        Term::Square("x1".into()),
    ]
}

fn check_against_lsdv(fit: &FitResult, oracle: &Lsdv) -> Result<(), TestCaseError> {
    prop_assert_eq!(&fit.names, &oracle.names);
    for (a, b) in fit.coefficients.iter().zip(&oracle.coefficients) {
        prop_assert!((a - b).abs() <= 1e-8, "coefficient {} vs {}", a, b);
    }
    let g = fit.n_clusters as f64;
    let n = fit.n_obs as f64;
    let k = (fit.names.len() + 1) as f64;
    let c = g / (g - 1.0) * (n - 1.0) / (n - k);
    prop_assert!((fit.small_sample_factor - c).abs() < 1e-14);
    let m = fit.names.len();
    for i in 0..m {
        for j in 0..m {
            let expect = c * oracle.sandwich[(i, j)];
            let got = fit.covariance_at(i, j);
            prop_assert!((got - expect).abs() <= 1e-10 * expect.abs().max(1.0), "cov[{},{}] {} vs {}", i, j, got, expect);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn within_estimator_equals_dummy_variable_ols(seed in any::<u64>(), n_units in 10usize..=100, n_periods in 3i64..7) {
        let panel = random_panel(seed, n_units, n_periods);
        let oracle = lsdv(&panel, &terms());
        prop_assume!(oracle.full_rank);
        let fit = fe_ols(&panel, &spec(&terms())).unwrap();
        check_against_lsdv(&fit, &oracle)?;
    }

    #[test]
    fn sandwich_equals_brute_force_on_few_clusters(seed in any::<u64>(), n_units in 3usize..=10, n_periods in 3i64..9) {
        let panel = random_panel(seed, n_units, n_periods);
        let t = vec![Term::Var("x1".into()), Term::Var("x2".into())];
        let oracle = lsdv(&panel, &t);
        prop_assume!(oracle.full_rank);
        let fit = fe_ols(&panel, &spec(&t)).unwrap();
        check_against_lsdv(&fit, &oracle)?;
    }

    #[test]
    fn outcome_shifts_are_absorbed(seed in any::<u64>(), c in -100.0f64..100.0, unit_shift in -100.0f64..100.0) {
        let panel = random_panel(seed, 20, 5);
        let mut shifted = panel.clone();
        for (y, u) in shifted.outcome.iter_mut().zip(&panel.units) {
            *y += c + if u == "u3" { unit_shift } else { 0.0 };
        }
        let a = fe_ols(&panel, &spec(&terms())).unwrap();
        let b = fe_ols(&shifted, &spec(&terms())).unwrap();
        for (p, q) in a.coefficients.iter().zip(&b.coefficients) {
            prop_assert!((p - q).abs() <= 1e-8);
        }
    }

    #[test]
    fn singleton_clusters_give_hc0(seed in any::<u64>(), n in 10usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut panel = Panel::new("y", ["x1", "x2"]);
        let mut xs = vec![Vec::new(), Vec::new()];
        for i in 0..n {
            let x1: f64 = rng.random_range(-2.0..2.0);
            let x2: f64 = rng.random_range(-2.0..2.0);
            let y = 1.0 + x1 - x2 + rng.random_range(-1.0..1.0) * (1.0 + x1 * x1);
            xs[0].push(x1);
            xs[1].push(x2);
            panel.push(PanelObservation { unit_id: format!("u{i}"), period: 0, outcome: y, regressors: vec![x1, x2], cluster_id: None }).unwrap();
        }
        let pooled = ModelSpec {
            terms: vec![Term::Var("x1".into()), Term::Var("x2".into())],
            unit_effects: false,
            period_effects: false,
            small_sample_correction: false,
        };
        let fit = fe_ols(&panel, &pooled).unwrap();
        let hc = hc0_std_errors(&panel.outcome, &xs).unwrap();
        // hc0 orders the intercept first; the fit orders it after the regressors.
        let reordered = [hc[1], hc[2], hc[0]];
        for (a, b) in fit.std_errors.iter().zip(&reordered) {
            prop_assert!((a - b).abs() <= 1e-10 * b.max(1.0));
        }
    }
}

#[test]
fn rank_deficient_draw_is_detected() {
    let panel = random_panel(10428578271431039638, 3, 4);
    let t = vec![Term::Var("x1".into()), Term::Var("x2".into())];
    assert!(!lsdv(&panel, &t).full_rank);
    let fit = fe_ols(&panel, &spec(&t)).unwrap();
    assert_eq!(fit.names.len(), 4);
}

#[test]
fn covariance_is_positive_semidefinite() {
    let panel = random_panel(11, 40, 6);
    let fit = fe_ols(&panel, &spec(&terms())).unwrap();
    let m = fit.names.len();
    let cov = DMatrix::from_fn(m, m, |i, j| fit.covariance_at(i, j));
    let eig = cov.symmetric_eigen();
    assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12));
    for (i, se) in fit.std_errors.iter().enumerate() {
        assert!((se * se - fit.covariance_at(i, i)).abs() < 1e-14);
    }
    assert!(fit.r2_within > 0.0 && fit.r2_within <= 1.0);
    assert!((0.0..=1.0).contains(&fit.r2_overall));
    assert!((0.0..=1.0).contains(&fit.r2_between));
}
