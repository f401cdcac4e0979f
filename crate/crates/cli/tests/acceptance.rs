//! End-to-end acceptance checks, one line per criterion.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tastetrace::calendar::Month;
use tastetrace::econ::{
    derive_seed, did_estimate, event_study, fe_ols, granger_anticipation_test, ks_uniform_distance, monte_carlo,
    pretrend_test, DidSpec, ModelSpec, Panel, PanelObservation, Term,
};
use tastetrace::embed::{
    artist_similarity_report, build_vocabulary, cbow_step, train_s2v, StepScratch, TrainingConfig, WeightRows,
};
use tastetrace::geo::{haversine_km, CityLocation};
use tastetrace::ingest::{filter_streams, sessionize_all, SESSION_GAP_SECONDS, TRAINING_MIN_DURATION};
use tastetrace::metrics::{taste_adaptation, taste_exploration, ExplorationWindow};
use tastetrace::synth::{generate_did_panel, generate_panel, generate_sessions, SynthConfig};
use tastetrace::taste::GlobalMean;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_time(started: Instant, limit: Duration, detail: String, ok: bool) -> Check {
    let elapsed = started.elapsed();
    let detail = format!("{detail}; {:.2}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs());
    ensure(ok && elapsed < limit, detail)
}

fn embedding_separation() -> Check {
    let started = Instant::now();
    let config = SynthConfig {
        seed: 11,
        n_users: 300,
        n_artists: 200,
        songs_per_artist: 5,
        sessions_per_user: 100,
        ..SynthConfig::default()
    };
    let synth = generate_sessions(&config).map_err(|e| e.to_string())?;
    let (kept, _) = filter_streams(synth.events, TRAINING_MIN_DURATION);
    let (users, report) = sessionize_all(kept, SESSION_GAP_SECONDS);
    let sessions: Vec<Vec<String>> = users
        .iter()
        .flat_map(|u| u.sessions.iter().map(|s| s.items.iter().map(|i| i.track_id.clone()).collect()))
        .collect();
    let train = TrainingConfig {
        dimension: 50,
        epochs: 5,
        workers: 1,
        seed: 5,
        ..TrainingConfig::default()
    };
    let corpus = build_vocabulary(&sessions, train.min_count).map_err(|e| e.to_string())?;
    let space = train_s2v(&corpus, &train).map_err(|e| e.to_string())?;
    let genres: HashMap<String, String> = synth
        .truth
        .track_genre
        .iter()
        .map(|(t, g)| (t.clone(), format!("g{g}")))
        .collect();
    let artists: HashMap<String, String> = synth.truth.track_artist.clone().into_iter().collect();
    let clusters = artist_similarity_report(&space, &genres).map_err(|e| e.to_string())?;
    let by_artist = artist_similarity_report(&space, &artists).map_err(|e| e.to_string())?;
    let gap = clusters.within - clusters.cross;
    within_time(
        started,
        Duration::from_secs(120),
        format!(
            "{} songs, {} sessions; cluster within {:.3} vs cross {:.3} (gap {:.3} >= 0.15); artist t = {:.1} > 0",
            space.len(),
            report.sessions,
            clusters.within,
            clusters.cross,
            gap,
            by_artist.t_statistic
        ),
        space.len() <= 2000 && report.sessions <= 50_000 && gap >= 0.15 && by_artist.t_statistic > 0.0,
    )
}

/// Plain f64 weights for exact finite differences.
struct Dense {
    dim: usize,
    values: RefCell<Vec<f64>>,
}

impl WeightRows for Dense {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn load(&self, row: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.values.borrow()[row * self.dim..(row + 1) * self.dim]);
    }

    fn add_scaled(&self, row: usize, delta: &[f64], scale: f64) {
        let mut v = self.values.borrow_mut();
        for (x, d) in v[row * self.dim..(row + 1) * self.dim].iter_mut().zip(delta) {
            *x += scale * d;
        }
    }
}

/// Negative-sampling CBOW loss written out from its definition.
fn reference_loss(w_in: &[f64], w_out: &[f64], dim: usize, context: &[usize], target: usize, negatives: &[usize]) -> f64 {
    let mut h = vec![0.0; dim];
    for &c in context {
        for k in 0..dim {
            h[k] += w_in[c * dim + k] / context.len() as f64;
        }
    }
    let dot = |w: usize| (0..dim).map(|k| w_out[w * dim + k] * h[k]).sum::<f64>();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut loss = -sig(dot(target)).ln();
    for &n in negatives {
        loss -= sig(-dot(n)).ln();
    }
    loss
}

fn gradient_check() -> Check {
    let started = Instant::now();
    let corpus = build_vocabulary(&[vec!["a", "b", "c"], vec!["c", "b", "a"], vec!["b", "a", "c"]], 1)
        .map_err(|e| e.to_string())?;
    let v = corpus.vocabulary.len();
    let dim = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w_in: Vec<f64> = (0..v * dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    let w_out: Vec<f64> = (0..v * dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    let (context, target, negatives) = ([0u32, 2], 1u32, [0u32, 2]);
    let ctx: Vec<usize> = context.iter().map(|&c| c as usize).collect();
    let neg: Vec<usize> = negatives.iter().map(|&c| c as usize).collect();

    let input = Dense { dim, values: RefCell::new(w_in.clone()) };
    let output = Dense { dim, values: RefCell::new(w_out.clone()) };
    let loss = cbow_step(&input, &output, &context, target, &negatives, 1.0, &mut StepScratch::new(dim));
    let analytic: Vec<f64> = w_in
        .iter()
        .zip(input.values.borrow().iter())
        .chain(w_out.iter().zip(output.values.borrow().iter()))
        .map(|(before, after)| before - after)
        .collect();

    let h = 1e-5;
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..2 * v * dim {
        let mut plus = (w_in.clone(), w_out.clone());
        let mut minus = (w_in.clone(), w_out.clone());
        if i < v * dim {
            plus.0[i] += h;
            minus.0[i] -= h;
        } else {
            plus.1[i - v * dim] += h;
            minus.1[i - v * dim] -= h;
        }
        let lp = reference_loss(&plus.0, &plus.1, dim, &ctx, target as usize, &neg);
        let lm = reference_loss(&minus.0, &minus.1, dim, &ctx, target as usize, &neg);
        numeric.push((lp - lm) / (2.0 * h));
    }
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let rel = norm(&diff) / norm(&analytic).max(norm(&numeric));
    let worst = analytic
        .iter()
        .zip(&numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) > 1e-6)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    let loss_ok = (loss - reference_loss(&w_in, &w_out, dim, &ctx, target as usize, &neg)).abs() < 1e-12;
    within_time(
        started,
        Duration::from_secs(1),
        format!("relative error {rel:.2e} overall, worst component {worst:.2e} (<= 1e-4)"),
        rel <= 1e-4 && worst <= 1e-4 && loss_ok,
    )
}

fn random_panel(seed: u64, n_units: usize, n_periods: i64) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut panel = Panel::new("y", ["x1", "x2"]);
    for u in 0..n_units {
        let alpha: f64 = rng.random_range(-3.0..3.0);
        for p in 0..n_periods {
            if rng.random_bool(0.15) && p > 1 {
                continue;
            }
            let x1: f64 = rng.random_range(-2.0..2.0) + 0.3 * alpha;
            let x2: f64 = rng.random_range(-1.0..1.0);
            let e: f64 = rng.random_range(-1.0..1.0) * (1.0 + x1.abs());
            panel
                .push(PanelObservation {
                    unit_id: format!("u{u:03}"),
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

/// Dummy-variable OLS from the normal equations with a brute-force
/// cluster sandwich; returns named coefficients and the scaled covariance.
fn dummy_ols(panel: &Panel, terms: &[Term]) -> (Vec<String>, Vec<f64>, DMatrix<f64>) {
    let n = panel.len();
    let units: Vec<&String> = panel.units.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let periods: Vec<i64> = panel.periods.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut names: Vec<String> = terms.iter().map(Term::name).collect();
    let mut cols: Vec<Vec<f64>> = terms.iter().map(|t| t.evaluate(panel).unwrap()).collect();
    for p in &periods[1..] {
        names.push(format!("period[{p}]"));
        cols.push(panel.periods.iter().map(|q| f64::from(u8::from(q == p))).collect());
    }
    let named = cols.len();
    for u in &units {
        cols.push(panel.units.iter().map(|v| f64::from(u8::from(v == *u))).collect());
    }
    let k = cols.len();
    let x = DMatrix::from_fn(n, k, |i, j| cols[j][i]);
    let y = DVector::from_column_slice(&panel.outcome);
    let lu = (x.transpose() * &x).lu();
    let beta = lu.solve(&(x.transpose() * &y)).unwrap();
    let inv = lu.try_inverse().unwrap();
    let e = &y - &x * &beta;
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for u in &units {
        let mut s = DVector::<f64>::zeros(k);
        for i in (0..n).filter(|&i| &panel.units[i] == *u) {
            for j in 0..k {
                s[j] += x[(i, j)] * e[i];
            }
        }
        meat += &s * s.transpose();
    }
    let g = units.len() as f64;
    let c = g / (g - 1.0) * (n as f64 - 1.0) / (n as f64 - (named + 1) as f64);
    let cov = (&inv * meat * &inv).view((0, 0), (named, named)).into_owned() * c;
    (names, beta.iter().take(named).copied().collect(), cov)
}

fn estimator_oracle() -> Check {
    let started = Instant::now();
    let terms = vec![
        Term::Var("x1".into()),
        Term::Var("x2".into()),
        Term::Product("x1".into(), "x2".into()),
        Term::Square("x1".into()),
    ];
    let spec = ModelSpec {
        terms: terms.clone(),
        ..ModelSpec::default()
    };
    let (mut coef_err, mut cov_err) = (0.0f64, 0.0f64);
    let mut instances = 0;
    for (seed, n_units, n_periods) in [(1, 10, 4), (2, 25, 5), (3, 50, 3), (4, 75, 6), (5, 100, 5), (6, 100, 8)] {
        let panel = random_panel(seed, n_units, n_periods);
        let fit = fe_ols(&panel, &spec).map_err(|e| e.to_string())?;
        let (names, beta, cov) = dummy_ols(&panel, &terms);
        if fit.names != names {
            return Err(format!("term order {:?} vs {:?}", fit.names, names));
        }
        for (i, b) in beta.iter().enumerate() {
            coef_err = coef_err.max((fit.coefficients[i] - b).abs());
            for j in 0..beta.len() {
                cov_err = cov_err.max((fit.covariance_at(i, j) - cov[(i, j)]).abs());
            }
        }
        instances += 1;
    }
    within_time(
        started,
        Duration::from_secs(10),
        format!("{instances} instances up to 100 units; max |coef diff| {coef_err:.1e} (<= 1e-8), max |cov diff| {cov_err:.1e} (<= 1e-10)"),
        coef_err <= 1e-8 && cov_err <= 1e-10,
    )
}

fn coefficient_recovery() -> Check {
    let started = Instant::now();
    let config = SynthConfig::default();
    let synth = generate_panel(&config).map_err(|e| e.to_string())?;
    let truth = &synth.truth;
    let mut panel = synth.panel.clone();
    panel
        .standardize(&truth.standardize, &truth.log_transform)
        .map_err(|e| e.to_string())?;
    let terms = truth
        .terms
        .iter()
        .map(|t| Term::parse(t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let fit = fe_ols(
        &panel,
        &ModelSpec {
            terms,
            ..ModelSpec::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let users: BTreeSet<&String> = panel.units.iter().collect();
    let months: BTreeSet<i64> = panel.periods.iter().copied().collect();
    let mut ok = users.len() == 2000 && months.len() == 24;
    let mut parts = Vec::new();
    for name in &truth.terms {
        let e = fit.estimate(name).map_err(|e| e.to_string())?;
        let z = (e.coefficient - truth.coefficients[name]) / e.std_error;
        ok &= z.abs() <= 3.0;
        parts.push(format!("{name} {:.3} vs {:.3} (z {z:+.2})", e.coefficient, truth.coefficients[name]));
    }
    within_time(
        started,
        Duration::from_secs(30),
        format!("{} users x {} months; {}", users.len(), months.len(), parts.join(", ")),
        ok,
    )
}

fn did_config(seed: u64, f: impl FnOnce(&mut SynthConfig)) -> SynthConfig {
    let mut c = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    f(&mut c);
    c
}

fn did_calibration() -> Check {
    let started = Instant::now();
    let spec = DidSpec::default();
    let planted = generate_did_panel(&did_config(17, |_| {})).map_err(|e| e.to_string())?;
    let est = did_estimate(&planted.panel, &spec).map_err(|e| e.to_string())?;
    let z = (est.atet.coefficient - planted.truth.atet) / est.atet.std_error;
    let recovered = z.abs() <= 3.0;

    let draws = 500;
    let null = |c: &mut SynthConfig| {
        c.did.atet = 0.0;
        c.did.n_units = 200;
        c.did.weeks = 12;
        c.did.treatment_index = 6;
    };
    let results: Vec<Result<(f64, f64), String>> = monte_carlo(23, draws, |seed| {
        let d = generate_did_panel(&did_config(seed, null)).map_err(|e| e.to_string())?;
        let atet = did_estimate(&d.panel, &spec).map_err(|e| e.to_string())?;
        let trend = pretrend_test(&d.panel, &spec).map_err(|e| e.to_string())?;
        Ok((atet.atet.p_value, trend.p_value))
    });
    let results: Vec<(f64, f64)> = results.into_iter().collect::<Result<_, _>>()?;
    let rate = results.iter().filter(|(p, _)| *p < 0.05).count() as f64 / draws as f64;
    let ks = ks_uniform_distance(&results.iter().map(|r| r.1).collect::<Vec<_>>());

    let anticipating = generate_did_panel(&did_config(derive_seed(29, 0), |c| c.did.anticipation_weeks = 2))
        .map_err(|e| e.to_string())?;
    let granger = granger_anticipation_test(&anticipating.panel, &spec, 2).map_err(|e| e.to_string())?;

    within_time(
        started,
        Duration::from_secs(300),
        format!(
            "ATET {:.4} vs {:.3} (z {z:+.2}); null rejection {rate:.3} over {draws} draws (0.03..=0.07); pretrend KS {ks:.3} (< 0.1); anticipation p {:.1e} (< 0.01)",
            est.atet.coefficient, planted.truth.atet, granger.wald.p_value
        ),
        recovered && (0.03..=0.07).contains(&rate) && ks < 0.1 && granger.wald.p_value < 0.01,
    )
}

fn event_study_consistency() -> Check {
    let spec = DidSpec {
        controls: false,
        ..DidSpec::default()
    };
    let exact = generate_did_panel(&did_config(31, |c| {
        c.did.noise_sd = 0.0;
        c.did.control_coefficients = vec![0.0, 0.0];
        c.did.n_units = 400;
    }))
    .map_err(|e| e.to_string())?;
    let atet = did_estimate(&exact.panel, &spec).map_err(|e| e.to_string())?.atet.coefficient;
    let es = event_study(&exact.panel, &spec).map_err(|e| e.to_string())?;
    let reference = es
        .points
        .iter()
        .find(|p| p.relative_period == -1)
        .ok_or("no reference point")?;
    let gap = (es.mean_post() - atet).abs();

    let noisy = generate_did_panel(&did_config(37, |c| {
        c.did.control_coefficients = vec![0.0, 0.0];
        c.did.n_units = 400;
    }))
    .map_err(|e| e.to_string())?;
    let noisy_atet = did_estimate(&noisy.panel, &spec).map_err(|e| e.to_string())?.atet.coefficient;
    let noisy_es = event_study(&noisy.panel, &spec).map_err(|e| e.to_string())?;
    let identity = (noisy_es.mean_post() - noisy_es.mean_pre() - noisy_atet).abs();
    ensure(
        gap <= 1e-6 && reference.coefficient == 0.0 && identity <= 1e-6,
        format!(
            "|mean post - ATET| {gap:.1e} (<= 1e-6); reference week coefficient {}; with noise |post - pre - ATET| {identity:.1e}",
            reference.coefficient
        ),
    )
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn metric_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut failures = Vec::new();

    let mut max_exploration = 0.0f64;
    let mut min_exploration = f64::INFINITY;
    for _ in 0..500 {
        let dim = rng.random_range(2..6);
        let mut history = BTreeMap::new();
        for m in 0..8 {
            if m == 7 || rng.random_bool(0.7) {
                history.insert(Month(24_000 + m), (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
            }
        }
        for window in [ExplorationWindow::PriorMonth, ExplorationWindow::Prior6Months, ExplorationWindow::Cumulative] {
            if let Some(e) = taste_exploration(&history, Month(24_007), window) {
                max_exploration = max_exploration.max(e.value);
                min_exploration = min_exploration.min(e.value);
            }
        }
    }
    if !(min_exploration >= 0.0 && max_exploration <= 2.0) {
        failures.push(format!("exploration range [{min_exploration}, {max_exploration}]"));
    }

    let c = [0.6, 0.8, 0.0];
    let orth = [0.8, -0.6, 0.0];
    let fixtures = [(c, c, 0.0), (c, orth, 1.0), (orth, c, -1.0)];
    for (visit, home, expect) in fixtures {
        let got = taste_adaptation(&visit, &home, &c).map_err(|e| e.to_string())?;
        if (got - expect).abs() > 1e-12 {
            failures.push(format!("adaptation fixture {got} vs {expect}"));
        }
    }
    let mut antisymmetry = 0.0f64;
    for _ in 0..1000 {
        let v: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let a = taste_adaptation(&v[0], &v[1], &v[2]).map_err(|e| e.to_string())?;
        let b = taste_adaptation(&v[1], &v[0], &v[2]).map_err(|e| e.to_string())?;
        let oracle = cosine(&v[0], &v[2]) - cosine(&v[1], &v[2]);
        antisymmetry = antisymmetry.max((a + b).abs()).max((a - oracle).abs());
    }
    if antisymmetry > 1e-12 {
        failures.push(format!("adaptation antisymmetry {antisymmetry:.1e}"));
    }

    let mut loo = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..30);
        let vs: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let g = GlobalMean::new(vs.iter().map(Vec::as_slice)).map_err(|e| e.to_string())?;
        for focal in 0..n {
            let got = g.leave_one_out(Some(&vs[focal])).map_err(|e| e.to_string())?;
            for k in 0..8 {
                let expect = (0..n).filter(|&j| j != focal).map(|j| vs[j][k]).sum::<f64>() / (n - 1) as f64;
                loo = loo.max((got[k] - expect).abs());
            }
        }
    }
    if loo > 1e-10 {
        failures.push(format!("leave-one-out {loo:.1e}"));
    }

    let city = |rng: &mut ChaCha8Rng| {
        CityLocation::new("x", rng.random_range(-90.0..=90.0), rng.random_range(-180.0..=180.0), "K").unwrap()
    };
    let (mut asym, mut triangle) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (a, b, c) = (city(&mut rng), city(&mut rng), city(&mut rng));
        let ab = haversine_km(&a, &b).map_err(|e| e.to_string())?;
        let ba = haversine_km(&b, &a).map_err(|e| e.to_string())?;
        let bc = haversine_km(&b, &c).map_err(|e| e.to_string())?;
        let ac = haversine_km(&a, &c).map_err(|e| e.to_string())?;
        asym = asym.max((ab - ba).abs());
        triangle = triangle.max(ac - ab - bc);
    }
    if asym > 1e-9 || triangle > 1e-9 {
        failures.push(format!("haversine asymmetry {asym:.1e}, triangle excess {triangle:.1e}"));
    }

    let london = CityLocation::new("london", 51.5074, -0.1278, "GB").map_err(|e| e.to_string())?;
    let paris = CityLocation::new("paris", 48.8566, 2.3522, "FR").map_err(|e| e.to_string())?;
    let km = haversine_km(&london, &paris).map_err(|e| e.to_string())?;
    let oracle = 343.556_534_880_883_6;
    let rel = (km - oracle).abs() / oracle;
    if rel > 0.005 {
        failures.push(format!("London-Paris {km} km"));
    }
    let summary = format!(
        "exploration in [{min_exploration:.3}, {max_exploration:.3}]; adaptation fixtures + antisymmetry {antisymmetry:.1e}; leave-one-out {loo:.1e}; haversine 1000 triples; London-Paris {km:.3} km (rel err {rel:.1e})"
    );
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; failed: {}", failures.join("; ")))
    }
}

fn artifact_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            if rel == "timings" {
                continue;
            }
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("config.toml");
    fs::write(
        &cfg,
        "seed = 9\nworkers = 1\n[train]\ndimension = 16\nepochs = 3\nnegative = 5\n\
         [synth]\nn_users = 40\nsessions_per_user = 80\n[synth.panel]\nn_users = 100\n[synth.did]\nn_units = 100\n",
    )
    .map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for run in ["first", "second"] {
        let out = dir.path().join(run);
        let o = Command::new(env!("CARGO_BIN_EXE_tastetrace"))
            .args(["run", "all", "--config"])
            .arg(&cfg)
            .env("TASTETRACE_OUTPUT_DIR", &out)
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("run all failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        trees.push(artifact_tree(&out));
    }
    let differing: Vec<&String> = trees[0]
        .iter()
        .filter(|(k, v)| trees[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    ensure(
        differing.is_empty() && trees[0].len() == trees[1].len() && !trees[0].is_empty(),
        format!("{} artifacts compared, {} differ {:?}", trees[0].len(), differing.len(), differing),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("embedding separation", embedding_separation),
        ("gradient check", gradient_check),
        ("estimator oracle equivalence", estimator_oracle),
        ("coefficient recovery", coefficient_recovery),
        ("DiD recovery and calibration", did_calibration),
        ("event-study consistency", event_study_consistency),
        ("metric invariants", metric_invariants),
        ("pipeline determinism", pipeline_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
