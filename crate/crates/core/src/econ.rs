//! Panel estimation: z-score standardization, fixed-effects OLS with
//! cluster-robust covariance, and the difference-in-differences suite
//! (ATET, linear pre-trend test, anticipation test, event study).
//!
//! Unit fixed effects are absorbed by demeaning within unit; period effects
//! enter as explicit dummies. Collinear columns are found by a greedy
//! Gram-Schmidt pass in column order: regressors of interest come first and
//! are fatal to drop, dummies and absorbed main effects after them are
//! dropped silently and reported. Coefficients come from a Householder QR
//! solve, never from inverting the normal equations.
//!
//! The cluster-robust covariance is
//!
//! `V = c (X'X)^-1 (Σ_g X_g' e_g e_g' X_g) (X'X)^-1`,
//! `c = G/(G-1) * (N-1)/(N-K)`,
//!
//! where `K` counts the estimated columns plus the constant absorbed with the
//! unit effects.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};

use crate::error::{Error, Result};
use crate::table::Table;

/// Relative residual norm below which a column counts as collinear.
const COLLINEARITY_TOL: f64 = 1e-9;

/// `x -> (x - mean) / sd` with the sample (n - 1) standard deviation,
/// optionally after `x -> ln(1 + x)`.
pub fn standardize(values: &[f64], log_transform: bool, name: &str) -> Result<Vec<f64>> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("`{name}` needs at least 2 values")));
    }
    let xs: Vec<f64> = if log_transform {
        values
            .iter()
            .map(|&x| {
                if x > -1.0 {
                    Ok(x.ln_1p())
                } else {
                    Err(Error::arg(format!("`{name}`: ln(1 + {x}) undefined")))
                }
            })
            .collect::<Result<_>>()?
    } else {
        values.to_vec()
    };
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) || sd < 1e-12 * mean.abs().max(1.0) {
        return Err(Error::InsufficientData(format!("`{name}` has zero variance")));
    }
    Ok(xs.iter().map(|x| (x - mean) / sd).collect())
}

/// One user-period row.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelObservation {
    pub unit_id: String,
    pub period: i64,
    pub outcome: f64,
    /// Values in the panel's variable order.
    pub regressors: Vec<f64>,
    /// Defaults to the unit.
    pub cluster_id: Option<String>,
}

/// Column-oriented panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub outcome_name: String,
    pub units: Vec<String>,
    pub periods: Vec<i64>,
    pub clusters: Vec<String>,
    pub outcome: Vec<f64>,
    pub variables: Vec<(String, Vec<f64>)>,
}

impl Panel {
    pub fn new<S: Into<String>>(outcome_name: &str, variables: impl IntoIterator<Item = S>) -> Self {
        Panel {
            outcome_name: outcome_name.to_string(),
            units: Vec::new(),
            periods: Vec::new(),
            clusters: Vec::new(),
            outcome: Vec::new(),
            variables: variables.into_iter().map(|v| (v.into(), Vec::new())).collect(),
        }
    }

    pub fn push(&mut self, obs: PanelObservation) -> Result<()> {
        if obs.regressors.len() != self.variables.len() {
            return Err(Error::arg(format!(
                "{} regressor values for {} variables",
                obs.regressors.len(),
                self.variables.len()
            )));
        }
        if !obs.outcome.is_finite() || obs.regressors.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg(format!("non-finite value for unit {}", obs.unit_id)));
        }
        self.clusters.push(obs.cluster_id.unwrap_or_else(|| obs.unit_id.clone()));
        self.units.push(obs.unit_id);
        self.periods.push(obs.period);
        self.outcome.push(obs.outcome);
        for ((_, col), v) in self.variables.iter_mut().zip(obs.regressors) {
            col.push(v);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcome.is_empty()
    }

    pub fn variable(&self, name: &str) -> Result<&[f64]> {
        if name == self.outcome_name {
            return Ok(&self.outcome);
        }
        self.variables
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::NotFound(format!("variable `{name}`")))
    }

    fn variable_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        if name == self.outcome_name {
            return Ok(&mut self.outcome);
        }
        self.variables
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::NotFound(format!("variable `{name}`")))
    }

    /// Standardizes each listed variable (the outcome may be listed by name)
    /// over the full panel, log-transforming those in `log_transform` first.
    pub fn standardize(&mut self, variables: &[String], log_transform: &[String]) -> Result<()> {
        for name in variables {
            let log = log_transform.contains(name);
            let z = standardize(self.variable(name)?, log, name)?;
            *self.variable_mut(name)? = z;
        }
        Ok(())
    }

    /// Replaces each listed variable with its value in the unit's previous
    /// period. Rows without an observed previous period are deleted;
    /// returns the number deleted.
    pub fn lag(&mut self, variables: &[String]) -> Result<usize> {
        if variables.is_empty() {
            return Ok(0);
        }
        let mut at: HashMap<(&str, i64), usize> = HashMap::new();
        for (i, (u, p)) in self.units.iter().zip(&self.periods).enumerate() {
            at.insert((u.as_str(), *p), i);
        }
        let prev: Vec<Option<usize>> = (0..self.len())
            .map(|i| at.get(&(self.units[i].as_str(), self.periods[i] - 1)).copied())
            .collect();
        for name in variables {
            let src = self.variable(name)?.to_vec();
            let col = self.variable_mut(name)?;
            for (i, p) in prev.iter().enumerate() {
                col[i] = p.map_or(f64::NAN, |j| src[j]);
            }
        }
        let keep: Vec<bool> = prev.iter().map(Option::is_some).collect();
        Ok(self.retain_rows(&keep))
    }

    /// Keeps rows where `keep` is true; returns the number removed.
    pub fn retain_rows(&mut self, keep: &[bool]) -> usize {
        fn filter<T: Clone>(v: &mut Vec<T>, keep: &[bool]) {
            let mut i = 0;
            v.retain(|_| {
                let k = keep[i];
                i += 1;
                k
            });
        }
        let before = self.len();
        filter(&mut self.units, keep);
        filter(&mut self.periods, keep);
        filter(&mut self.clusters, keep);
        filter(&mut self.outcome, keep);
        for (_, col) in &mut self.variables {
            filter(col, keep);
        }
        before - self.len()
    }

    /// Drops units observed in fewer than `min_periods` periods; returns the
    /// number of rows removed.
    pub fn drop_short_units(&mut self, min_periods: usize) -> usize {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for u in &self.units {
            *counts.entry(u.as_str()).or_default() += 1;
        }
        let keep: Vec<bool> = self.units.iter().map(|u| counts[u.as_str()] >= min_periods).collect();
        self.retain_rows(&keep)
    }
}

/// A regressor built from panel variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Var(String),
    Square(String),
    Product(String, String),
}

impl Term {
    pub fn name(&self) -> String {
        match self {
            Term::Var(v) => v.clone(),
            Term::Square(v) => format!("{v}^2"),
            Term::Product(a, b) => format!("{a}*{b}"),
        }
    }

    /// Parses `x`, `x^2` or `a*b`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(v) = s.strip_suffix("^2") {
            return Ok(Term::Square(v.trim().to_string()));
        }
        if let Some((a, b)) = s.split_once('*') {
            return Ok(Term::Product(a.trim().to_string(), b.trim().to_string()));
        }
        if s.is_empty() {
            return Err(Error::arg("empty term"));
        }
        Ok(Term::Var(s.to_string()))
    }

    pub fn evaluate(&self, panel: &Panel) -> Result<Vec<f64>> {
        Ok(match self {
            Term::Var(v) => panel.variable(v)?.to_vec(),
            Term::Square(v) => panel.variable(v)?.iter().map(|x| x * x).collect(),
            Term::Product(a, b) => {
                let (a, b) = (panel.variable(a)?, panel.variable(b)?);
                a.iter().zip(b).map(|(x, y)| x * y).collect()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub terms: Vec<Term>,
    pub unit_effects: bool,
    pub period_effects: bool,
    /// Apply the G/(G-1) * (N-1)/(N-K) factor.
    pub small_sample_correction: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            terms: Vec::new(),
            unit_effects: true,
            period_effects: true,
            small_sample_correction: true,
        }
    }
}

/// Estimated model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    /// Estimated columns, in design order (regressors, intercept, dummies,
    /// main effects).
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Row-major `names.len()` square matrix.
    pub covariance: Vec<f64>,
    pub r2_within: f64,
    pub r2_between: f64,
    pub r2_overall: f64,
    pub n_obs: usize,
    pub n_units: usize,
    pub n_clusters: usize,
    /// Columns dropped as collinear.
    pub dropped: Vec<String>,
    pub small_sample_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub coefficient: f64,
    pub std_error: f64,
    /// Two-sided, normal approximation.
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldTest {
    pub f_statistic: f64,
    pub df_num: usize,
    pub df_den: usize,
    pub p_value: f64,
}

pub fn normal_p_value(z: f64) -> f64 {
    let n = Normal::standard();
    (2.0 * (1.0 - n.cdf(z.abs()))).clamp(0.0, 1.0)
}

fn f_p_value(f: f64, df1: usize, df2: usize) -> f64 {
    if !(f > 0.0) {
        return 1.0;
    }
    match FisherSnedecor::new(df1 as f64, df2.max(1) as f64) {
        Ok(d) => (1.0 - d.cdf(f)).clamp(0.0, 1.0),
        Err(_) => f64::NAN,
    }
}

impl FitResult {
    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn covariance_at(&self, i: usize, j: usize) -> f64 {
        self.covariance[i * self.names.len() + j]
    }

    pub fn estimate(&self, name: &str) -> Result<Estimate> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::NotFound(format!("coefficient `{name}`")))?;
        let (b, se) = (self.coefficients[i], self.std_errors[i]);
        Ok(Estimate {
            coefficient: b,
            std_error: se,
            p_value: if se > 0.0 {
                normal_p_value(b / se)
            } else if b == 0.0 {
                1.0
            } else {
                0.0
            },
        })
    }

    /// Joint test that the named coefficients are all zero, F with
    /// (q, G - 1) degrees of freedom.
    pub fn wald_test(&self, names: &[String]) -> Result<WaldTest> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.position(n).ok_or_else(|| Error::NotFound(format!("coefficient `{n}`"))))
            .collect::<Result<_>>()?;
        let q = idx.len();
        if q == 0 {
            return Err(Error::arg("empty hypothesis"));
        }
        let b = DVector::from_iterator(q, idx.iter().map(|&i| self.coefficients[i]));
        let v = DMatrix::from_fn(q, q, |r, c| self.covariance_at(idx[r], idx[c]));
        let df_den = self.n_clusters.saturating_sub(1);
        if b.iter().all(|&x| x == 0.0) {
            return Ok(WaldTest {
                f_statistic: 0.0,
                df_num: q,
                df_den,
                p_value: 1.0,
            });
        }
        let vinv = v
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| v.pseudo_inverse(1e-12).ok())
            .ok_or_else(|| Error::Numerical("cannot invert covariance block".into()))?;
        let w = (b.transpose() * vinv * &b)[(0, 0)];
        let f = w / q as f64;
        Ok(WaldTest {
            f_statistic: f,
            df_num: q,
            df_den,
            p_value: f_p_value(f, q, df_den),
        })
    }
}

/// Everything the least-squares core needs, before demeaning.
#[derive(Debug, Clone, Default)]
pub struct Design {
    pub y: Vec<f64>,
    pub units: Vec<usize>,
    pub periods: Vec<i64>,
    pub clusters: Vec<usize>,
    /// Columns whose loss to collinearity is fatal.
    pub core: Vec<(String, Vec<f64>)>,
    /// Columns placed after the period dummies and dropped silently.
    pub nuisance: Vec<(String, Vec<f64>)>,
    pub unit_effects: bool,
    pub period_effects: bool,
    pub small_sample_correction: bool,
}

fn index_ids<'a>(ids: impl IntoIterator<Item = &'a String>) -> Vec<usize> {
    let mut map: HashMap<&str, usize> = HashMap::new();
    ids.into_iter()
        .map(|s| {
            let next = map.len();
            *map.entry(s.as_str()).or_insert(next)
        })
        .collect()
}

fn group_means(values: &[f64], groups: &[usize], n_groups: usize) -> Vec<f64> {
    let mut sum = vec![0.0; n_groups];
    let mut cnt = vec![0usize; n_groups];
    for (v, &g) in values.iter().zip(groups) {
        sum[g] += v;
        cnt[g] += 1;
    }
    sum.iter().zip(&cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

fn demean(values: &[f64], groups: &[usize], n_groups: usize) -> Vec<f64> {
    let means = group_means(values, groups, n_groups);
    values.iter().zip(groups).map(|(v, &g)| v - means[g]).collect()
}

fn correlation_sq(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.len() < 2 {
        return f64::NAN;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab * sab / (saa * sbb)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits the design. See the module docs for the estimator.
pub fn fit_design(design: Design) -> Result<FitResult> {
    let n = design.y.len();
    if n == 0 {
        return Err(Error::InsufficientData("empty estimation sample".into()));
    }
    let n_units = design.units.iter().copied().max().map_or(0, |m| m + 1);
    let n_clusters = design.clusters.iter().copied().collect::<BTreeSet<_>>().len();

    // Raw columns in design order, with a flag for fatal loss.
    let mut columns: Vec<(String, Vec<f64>, bool)> = design
        .core
        .into_iter()
        .map(|(name, col)| (name, col, true))
        .collect();
    if !design.unit_effects {
        columns.push(("_cons".into(), vec![1.0; n], false));
    }
    if design.period_effects {
        let periods: BTreeSet<i64> = design.periods.iter().copied().collect();
        // The first period is the omitted category.
        for p in periods.into_iter().skip(1) {
            let col = design.periods.iter().map(|&q| f64::from(u8::from(q == p))).collect();
            columns.push((format!("period[{p}]"), col, false));
        }
    }
    columns.extend(design.nuisance.into_iter().map(|(name, col)| (name, col, false)));
    for (name, col, _) in &columns {
        if col.len() != n {
            return Err(Error::arg(format!("column `{name}` has {} rows, expected {n}", col.len())));
        }
    }

    let transform = |v: &[f64]| -> Vec<f64> {
        if design.unit_effects {
            demean(v, &design.units, n_units)
        } else {
            v.to_vec()
        }
    };
    let y = transform(&design.y);

    // Greedy rank-revealing pass: keep a column only if it adds a direction.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut dropped = Vec::new();
    for (name, raw, fatal) in columns {
        let scale = dot(&raw, &raw).sqrt().max(f64::MIN_POSITIVE);
        let col = transform(&raw);
        let mut r = col.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &r);
                r.iter_mut().zip(q).for_each(|(ri, qi)| *ri -= c * qi);
            }
        }
        let rn = dot(&r, &r).sqrt();
        if rn <= COLLINEARITY_TOL * scale {
            if fatal {
                return Err(Error::RankDeficient(format!(
                    "regressor `{name}` is collinear with earlier regressors or the fixed effects"
                )));
            }
            dropped.push(name);
            continue;
        }
        basis.push(r.iter().map(|x| x / rn).collect());
        kept.push((name, col, raw));
    }
    let k = kept.len();
    if k == 0 {
        return Err(Error::RankDeficient("no estimable columns".into()));
    }
    if n <= k {
        return Err(Error::InsufficientData(format!("{n} observations for {k} columns")));
    }

    let x = DMatrix::from_fn(n, k, |i, j| kept[j].1[i]);
    let yv = DVector::from_column_slice(&y);
    let qr = x.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numerical("singular R in QR solve".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::Numerical("singular R in QR solve".into()))?;
    let bread = &r_inv * r_inv.transpose();

    let resid = &yv - &x * &beta;
    let mut scores: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    for i in 0..n {
        let s = scores.entry(design.clusters[i]).or_insert_with(|| DVector::zeros(k));
        for j in 0..k {
            s[j] += x[(i, j)] * resid[i];
        }
    }
    let mut meat = DMatrix::zeros(k, k);
    for s in scores.values() {
        meat += s * s.transpose();
    }
    let g = n_clusters as f64;
    let k_total = k + usize::from(design.unit_effects);
    let factor = if design.small_sample_correction && n_clusters > 1 && n > k_total {
        (g / (g - 1.0)) * ((n as f64 - 1.0) / (n - k_total) as f64)
    } else {
        1.0
    };
    let mut cov = &bread * meat * &bread * factor;
    // Symmetrize away rounding.
    cov = (&cov + cov.transpose()) * 0.5;

    let coefficients: Vec<f64> = beta.iter().copied().collect();
    if coefficients.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numerical("non-finite coefficient".into()));
    }
    let std_errors: Vec<f64> = (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();

    let rss = resid.norm_squared();
    let tss = if design.unit_effects {
        dot(&y, &y)
    } else {
        let m = y.iter().sum::<f64>() / n as f64;
        y.iter().map(|v| (v - m).powi(2)).sum()
    };
    let r2_within = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    // Linear prediction on the untransformed regressors, excluding the
    // intercept and absorbed effects.
    let mut xb = vec![0.0; n];
    for ((name, _, raw), b) in kept.iter().zip(&coefficients) {
        if name == "_cons" {
            continue;
        }
        xb.iter_mut().zip(raw).for_each(|(p, v)| *p += b * v);
    }
    let r2_overall = correlation_sq(&xb, &design.y);
    let r2_between = correlation_sq(
        &group_means(&xb, &design.units, n_units),
        &group_means(&design.y, &design.units, n_units),
    );

    Ok(FitResult {
        names: kept.into_iter().map(|(name, _, _)| name).collect(),
        coefficients,
        std_errors,
        covariance: cov.transpose().iter().copied().collect(),
        r2_within,
        r2_between,
        r2_overall,
        n_obs: n,
        n_units,
        n_clusters,
        dropped,
        small_sample_factor: factor,
    })
}

/// Fixed-effects OLS of the panel outcome on `spec.terms`, clustered on the
/// panel's cluster ids. Units seen in fewer than two periods should be
/// removed beforehand ([`Panel::drop_short_units`]) when unit effects are on.
pub fn fe_ols(panel: &Panel, spec: &ModelSpec) -> Result<FitResult> {
    if spec.terms.is_empty() {
        return Err(Error::arg("model has no regressors"));
    }
    let core = spec
        .terms
        .iter()
        .map(|t| Ok((t.name(), t.evaluate(panel)?)))
        .collect::<Result<Vec<_>>>()?;
    fit_design(Design {
        y: panel.outcome.clone(),
        units: index_ids(&panel.units),
        periods: panel.periods.clone(),
        clusters: index_ids(&panel.clusters),
        core,
        nuisance: Vec::new(),
        unit_effects: spec.unit_effects,
        period_effects: spec.period_effects,
        small_sample_correction: spec.small_sample_correction,
    })
}

/// Cluster-robust standard errors without the small-sample factor, and
/// heteroskedasticity-robust (HC0) standard errors, for a pooled OLS of `y`
/// on `x` columns plus an intercept. Used to check that the two coincide
/// with singleton clusters.
pub fn hc0_std_errors(y: &[f64], x: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = y.len();
    let k = x.len() + 1;
    let xm = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { x[j - 1][i] });
    let qr = xm.clone().qr();
    let r = qr.r();
    let beta = r
        .solve_upper_triangular(&(qr.q().transpose() * DVector::from_column_slice(y)))
        .ok_or_else(|| Error::Numerical("singular design".into()))?;
    let e = DVector::from_column_slice(y) - &xm * beta;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::Numerical("singular design".into()))?;
    let bread = &r_inv * r_inv.transpose();
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let row = xm.row(i).transpose();
        meat += &row * row.transpose() * (e[i] * e[i]);
    }
    let v = &bread * meat * &bread;
    Ok((0..k).map(|j| v[(j, j)].sqrt()).collect())
}

/// Side-by-side coefficient table: one row per regressor (dummies
/// omitted), a coefficient and a standard-error column per model, then
/// fit statistics. Blank cells mark regressors absent from a model.
pub fn coefficient_table(models: &[(String, &FitResult)]) -> Table {
    let mut columns = vec!["term".to_string()];
    for (name, _) in models {
        columns.push(format!("{name}_coef"));
        columns.push(format!("{name}_se"));
    }
    let mut table = Table::new(columns);
    let mut terms: Vec<&str> = Vec::new();
    for (_, fit) in models {
        for n in &fit.names {
            if !n.starts_with("period[") && !terms.contains(&n.as_str()) {
                terms.push(n);
            }
        }
    }
    for term in terms {
        let mut row = vec![term.to_string()];
        for (_, fit) in models {
            match fit.position(term) {
                Some(i) => {
                    row.push(format!("{:.6}", fit.coefficients[i]));
                    row.push(format!("{:.6}", fit.std_errors[i]));
                }
                None => row.extend([String::new(), String::new()]),
            }
        }
        table.push(row);
    }
    let stats: [(&str, fn(&FitResult) -> String); 6] = [
        ("r2_within", |f| format!("{:.6}", f.r2_within)),
        ("r2_between", |f| format!("{:.6}", f.r2_between)),
        ("r2_overall", |f| format!("{:.6}", f.r2_overall)),
        ("n_obs", |f| f.n_obs.to_string()),
        ("n_units", |f| f.n_units.to_string()),
        ("n_clusters", |f| f.n_clusters.to_string()),
    ];
    for (label, value) in stats {
        let mut row = vec![label.to_string()];
        for (_, fit) in models {
            row.push(value(fit));
            row.push(String::new());
        }
        table.push(row);
    }
    table
}

// ---------------------------------------------------------------------------
// Difference in differences

/// One unit-week row of the treatment panel.
#[derive(Debug, Clone, PartialEq)]
pub struct DidObservation {
    pub unit_id: String,
    pub period: i64,
    pub outcome: f64,
    pub treated: bool,
    /// Values in the panel's control order, unlagged.
    pub controls: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DidPanel {
    pub control_names: Vec<String>,
    pub observations: Vec<DidObservation>,
    /// First treated period; `post` is `period >= treatment_period`.
    pub treatment_period: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DidSpec {
    pub unit_effects: bool,
    pub period_effects: bool,
    pub controls: bool,
    /// Use each control's previous-period value, dropping rows without one.
    pub lag_controls: bool,
    pub small_sample_correction: bool,
}

impl Default for DidSpec {
    fn default() -> Self {
        DidSpec {
            unit_effects: true,
            period_effects: true,
            controls: true,
            lag_controls: true,
            small_sample_correction: true,
        }
    }
}

pub const ATET: &str = "treated*post";

/// Rows of a DiD panel after lagging, as flat columns.
struct DidFrame {
    y: Vec<f64>,
    units: Vec<usize>,
    periods: Vec<i64>,
    treated: Vec<f64>,
    controls: Vec<(String, Vec<f64>)>,
    treatment_period: i64,
}

impl DidFrame {
    fn build(panel: &DidPanel, spec: &DidSpec) -> Result<(Self, usize)> {
        let obs = &panel.observations;
        let k = panel.control_names.len();
        if obs.iter().any(|o| o.controls.len() != k) {
            return Err(Error::arg("control vector length mismatch"));
        }
        let mut at: HashMap<(&str, i64), usize> = HashMap::new();
        for (i, o) in obs.iter().enumerate() {
            at.insert((o.unit_id.as_str(), o.period), i);
        }
        let use_controls = spec.controls && k > 0;
        let mut rows = Vec::with_capacity(obs.len());
        let mut deleted = 0;
        for (i, o) in obs.iter().enumerate() {
            let src = if use_controls && spec.lag_controls {
                match at.get(&(o.unit_id.as_str(), o.period - 1)) {
                    Some(&j) => Some(j),
                    None => {
                        deleted += 1;
                        continue;
                    }
                }
            } else {
                Some(i)
            };
            rows.push((i, src));
        }
        let unit_ids = index_ids(rows.iter().map(|&(i, _)| &obs[i].unit_id));
        let controls = if use_controls {
            panel
                .control_names
                .iter()
                .enumerate()
                .map(|(c, name)| {
                    let col = rows
                        .iter()
                        .map(|&(_, src)| obs[src.expect("source row")].controls[c])
                        .collect();
                    let label = if spec.lag_controls {
                        format!("L.{name}")
                    } else {
                        name.clone()
                    };
                    (label, col)
                })
                .collect()
        } else {
            Vec::new()
        };
        let frame = DidFrame {
            y: rows.iter().map(|&(i, _)| obs[i].outcome).collect(),
            units: unit_ids,
            periods: rows.iter().map(|&(i, _)| obs[i].period).collect(),
            treated: rows.iter().map(|&(i, _)| f64::from(u8::from(obs[i].treated))).collect(),
            controls,
            treatment_period: panel.treatment_period,
        };
        frame.check_groups()?;
        Ok((frame, deleted))
    }

    fn post(&self) -> Vec<f64> {
        self.periods
            .iter()
            .map(|&p| f64::from(u8::from(p >= self.treatment_period)))
            .collect()
    }

    fn check_groups(&self) -> Result<()> {
        let mut seen = [[false; 2]; 2];
        for (t, p) in self.treated.iter().zip(&self.periods) {
            seen[(*t > 0.5) as usize][(*p >= self.treatment_period) as usize] = true;
        }
        for (g, name) in [(0, "control"), (1, "treated")] {
            for (q, when) in [(0, "pre"), (1, "post")] {
                if !seen[g][q] {
                    return Err(Error::InsufficientData(format!(
                        "{name} group has no {when}-treatment observations"
                    )));
                }
            }
        }
        Ok(())
    }

    fn interaction(&self, indicator: impl Fn(i64) -> bool) -> Vec<f64> {
        self.treated
            .iter()
            .zip(&self.periods)
            .map(|(t, &p)| if indicator(p) { *t } else { 0.0 })
            .collect()
    }

    fn pre_periods(&self) -> BTreeSet<i64> {
        self.periods.iter().copied().filter(|&p| p < self.treatment_period).collect()
    }

    /// Design with `core` first, controls next, then `treated` and `post`
    /// main effects as droppable columns.
    fn design(&self, core: Vec<(String, Vec<f64>)>, spec: &DidSpec) -> Design {
        let mut cols = core;
        cols.extend(self.controls.iter().cloned());
        Design {
            y: self.y.clone(),
            units: self.units.clone(),
            periods: self.periods.clone(),
            clusters: self.units.clone(),
            core: cols,
            nuisance: vec![("treated".into(), self.treated.clone()), ("post".into(), self.post())],
            unit_effects: spec.unit_effects,
            period_effects: spec.period_effects,
            small_sample_correction: spec.small_sample_correction,
        }
    }

    fn subset(&self, keep: impl Fn(usize) -> bool) -> DidFrame {
        let idx: Vec<usize> = (0..self.y.len()).filter(|&i| keep(i)).collect();
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        DidFrame {
            y: pick(&self.y),
            units: idx.iter().map(|&i| self.units[i]).collect(),
            periods: idx.iter().map(|&i| self.periods[i]).collect(),
            treated: pick(&self.treated),
            controls: self.controls.iter().map(|(n, c)| (n.clone(), pick(c))).collect(),
            treatment_period: self.treatment_period,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtetResult {
    pub atet: Estimate,
    pub fit: FitResult,
    /// Rows deleted for lack of a lagged control.
    pub lag_deleted: usize,
}

/// Two-way DiD: outcome on treated×post, lagged controls, unit and period
/// effects, clustered on unit. `treated` and `post` main effects are
/// absorbed (and reported as dropped) when the fixed effects are on.
pub fn did_estimate(panel: &DidPanel, spec: &DidSpec) -> Result<AtetResult> {
    let (frame, lag_deleted) = DidFrame::build(panel, spec)?;
    let post = frame.post();
    let inter: Vec<f64> = frame.treated.iter().zip(&post).map(|(t, p)| t * p).collect();
    let fit = fit_design(frame.design(vec![(ATET.into(), inter)], spec))?;
    Ok(AtetResult {
        atet: fit.estimate(ATET)?,
        fit,
        lag_deleted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrendTest {
    /// Treated-minus-control difference in linear pre-treatment slopes.
    pub slope_difference: f64,
    pub std_error: f64,
    pub f_statistic: f64,
    pub p_value: f64,
}

pub const TREND_DIFF: &str = "treated*trend";

/// Fits pre-treatment rows with a treated-specific linear time trend and
/// tests that the slope difference is zero.
pub fn pretrend_test(panel: &DidPanel, spec: &DidSpec) -> Result<TrendTest> {
    let (frame, _) = DidFrame::build(panel, spec)?;
    let pre = frame.pre_periods();
    if pre.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} pre-treatment periods, need 3",
            pre.len()
        )));
    }
    let t0 = frame.treatment_period;
    let sub = frame.subset(|i| frame.periods[i] < t0);
    let trend: Vec<f64> = sub
        .treated
        .iter()
        .zip(&sub.periods)
        .map(|(t, &p)| t * (p - t0) as f64)
        .collect();
    let mut design = sub.design(vec![(TREND_DIFF.into(), trend.clone())], spec);
    if !spec.period_effects {
        // Common linear trend for both groups.
        let common: Vec<f64> = sub.periods.iter().map(|&p| (p - t0) as f64).collect();
        design.nuisance.insert(0, ("trend".into(), common));
    }
    let fit = fit_design(design)?;
    let est = fit.estimate(TREND_DIFF)?;
    let wald = fit.wald_test(&[TREND_DIFF.to_string()])?;
    Ok(TrendTest {
        slope_difference: est.coefficient,
        std_error: est.std_error,
        f_statistic: wald.f_statistic,
        p_value: wald.p_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnticipationTest {
    pub wald: WaldTest,
    /// Coefficient on treated×(period = T - k), for k = 1..=n_leads.
    pub leads: Vec<Estimate>,
}

pub fn lead_name(k: usize) -> String {
    format!("treated*lead{k}")
}

/// Adds treated×(period = T - k) dummies for k = 1..=n_leads to the DiD
/// model and jointly tests them.
pub fn granger_anticipation_test(panel: &DidPanel, spec: &DidSpec, n_leads: usize) -> Result<AnticipationTest> {
    if n_leads == 0 {
        return Err(Error::arg("n_leads must be >= 1"));
    }
    let (frame, _) = DidFrame::build(panel, spec)?;
    let pre = frame.pre_periods().len();
    if n_leads >= pre {
        return Err(Error::InsufficientData(format!(
            "{n_leads} leads exhaust the {pre} pre-treatment periods"
        )));
    }
    let t0 = frame.treatment_period;
    let post = frame.post();
    let mut core = vec![(
        ATET.to_string(),
        frame.treated.iter().zip(&post).map(|(t, p)| t * p).collect::<Vec<_>>(),
    )];
    for k in 1..=n_leads {
        core.push((lead_name(k), frame.interaction(|p| p == t0 - k as i64)));
    }
    let fit = fit_design(frame.design(core, spec))?;
    let names: Vec<String> = (1..=n_leads).map(lead_name).collect();
    Ok(AnticipationTest {
        wald: fit.wald_test(&names)?,
        leads: names.iter().map(|n| fit.estimate(n)).collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventStudyPoint {
    /// Period minus treatment period; the reference is -1.
    pub relative_period: i64,
    pub coefficient: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventStudy {
    pub points: Vec<EventStudyPoint>,
    pub fit: FitResult,
}

impl EventStudy {
    pub fn mean_post(&self) -> f64 {
        mean(self.points.iter().filter(|p| p.relative_period >= 0).map(|p| p.coefficient))
    }

    pub fn mean_pre(&self) -> f64 {
        mean(self.points.iter().filter(|p| p.relative_period < 0).map(|p| p.coefficient))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn relative_name(rel: i64) -> String {
    format!("treated*rel[{rel}]")
}

/// Treated×period dummies for every period except the last pre-treatment
/// one, whose coefficient is reported as exactly zero.
pub fn event_study(panel: &DidPanel, spec: &DidSpec) -> Result<EventStudy> {
    let (frame, _) = DidFrame::build(panel, spec)?;
    let t0 = frame.treatment_period;
    let reference = t0 - 1;
    let periods: BTreeSet<i64> = frame.periods.iter().copied().collect();
    if !periods.contains(&reference) {
        return Err(Error::InsufficientData("reference period (T - 1) not observed".into()));
    }
    let core: Vec<(String, Vec<f64>)> = periods
        .iter()
        .filter(|&&p| p != reference)
        .map(|&p| (relative_name(p - t0), frame.interaction(|q| q == p)))
        .collect();
    let fit = fit_design(frame.design(core, spec))?;
    let points = periods
        .iter()
        .map(|&p| {
            let rel = p - t0;
            if p == reference {
                return Ok(EventStudyPoint {
                    relative_period: rel,
                    coefficient: 0.0,
                    std_error: 0.0,
                    ci_low: 0.0,
                    ci_high: 0.0,
                });
            }
            let e = fit.estimate(&relative_name(rel))?;
            Ok(EventStudyPoint {
                relative_period: rel,
                coefficient: e.coefficient,
                std_error: e.std_error,
                ci_low: e.coefficient - 1.96 * e.std_error,
                ci_high: e.coefficient + 1.96 * e.std_error,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EventStudy { points, fit })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DidResult {
    pub atet: AtetResult,
    pub pretrend: TrendTest,
    pub granger: AnticipationTest,
    pub event_study: EventStudy,
}

/// The full suite on one panel.
pub fn did_analysis(panel: &DidPanel, spec: &DidSpec, n_leads: usize) -> Result<DidResult> {
    Ok(DidResult {
        atet: did_estimate(panel, spec)?,
        pretrend: pretrend_test(panel, spec)?,
        granger: granger_anticipation_test(panel, spec, n_leads)?,
        event_study: event_study(panel, spec)?,
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo helpers

/// SplitMix64 step; derives independent per-draw seeds from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `draw(seed)` for `draws` derived seeds in parallel; results are in
/// draw order regardless of scheduling.
pub fn monte_carlo<T, F>(master_seed: u64, draws: usize, draw: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync,
{
    (0..draws as u64)
        .into_par_iter()
        .map(|i| draw(derive_seed(master_seed, i)))
        .collect()
}

/// Kolmogorov-Smirnov distance between a sample and Uniform(0, 1).
pub fn ks_uniform_distance(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}
