//! Dependent variables and controls computed from taste vectors and streams:
//! taste exploration, taste adaptation, distance from global taste, the
//! listening controls, and chart overlap.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::Hash;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calendar::{date_of, weeks_between, year_of, Month, Week};
use crate::embed::{cosine_distance, cosine_similarity};
use crate::error::{Error, Result};
use crate::geo::{haversine_km, monthly_travel_distance, Gazetteer, TravelMode};
use crate::ingest::{Origin, StreamEvent};
use crate::table::{fmt_opt, Table};
use crate::taste::{GlobalMean, HomeAssignment, TasteVector};

/// A calendar bucket with integer arithmetic.
pub trait Period: Copy + Ord + Hash + std::fmt::Display {
    fn index(self) -> i64;
    fn from_timestamp(ts: i64) -> Self;
}

impl Period for Month {
    fn index(self) -> i64 {
        i64::from(self.0)
    }
    fn from_timestamp(ts: i64) -> Self {
        Month::from_timestamp(ts)
    }
}

impl Period for Week {
    fn index(self) -> i64 {
        self.0
    }
    fn from_timestamp(ts: i64) -> Self {
        Week::from_timestamp(ts)
    }
}

/// Which earlier periods form the baseline taste.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationWindow {
    /// Only `t - 1`.
    PriorMonth,
    /// `t - 6 ..= t - 1`.
    #[default]
    #[serde(rename = "prior_6_months")]
    Prior6Months,
    /// Every period before `t`.
    Cumulative,
}

impl ExplorationWindow {
    pub fn as_str(self) -> &'static str {
        match self {
            ExplorationWindow::PriorMonth => "prior_month",
            ExplorationWindow::Prior6Months => "prior_6_months",
            ExplorationWindow::Cumulative => "cumulative",
        }
    }

    fn span(self) -> Option<i64> {
        match self {
            ExplorationWindow::PriorMonth => Some(1),
            ExplorationWindow::Prior6Months => Some(6),
            ExplorationWindow::Cumulative => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exploration {
    /// Cosine distance in [0, 2].
    pub value: f64,
    /// Share of the window's periods that had a vector.
    pub coverage: f64,
}

/// Cosine distance between the period-`t` vector and the unweighted mean of
/// the available prior vectors in the window. `None` when either side is
/// missing or degenerate.
pub fn taste_exploration<P: Period>(
    history: &BTreeMap<P, Vec<f64>>,
    t: P,
    window: ExplorationWindow,
) -> Option<Exploration> {
    let current = history.get(&t)?;
    let first = history.keys().next()?.index();
    let (lo, expected) = match window.span() {
        Some(n) => (t.index() - n, n),
        None => (first, t.index() - first),
    };
    let prior: Vec<&Vec<f64>> = history
        .iter()
        .filter(|(p, _)| p.index() >= lo && p.index() < t.index())
        .map(|(_, v)| v)
        .collect();
    if prior.is_empty() || expected <= 0 {
        return None;
    }
    let dim = current.len();
    let mut baseline = vec![0.0; dim];
    for v in &prior {
        for (b, x) in baseline.iter_mut().zip(v.iter()) {
            *b += x;
        }
    }
    baseline.iter_mut().for_each(|b| *b /= prior.len() as f64);
    let value = cosine_distance(current, &baseline).ok()?;
    Some(Exploration {
        value,
        coverage: prior.len() as f64 / expected as f64,
    })
}

/// `cos(UV_{i,c,t}, CV_c) - cos(UV_{i,h}, CV_c)`, in [-2, 2].
pub fn taste_adaptation(user_in_city: &[f64], user_home: &[f64], city: &[f64]) -> Result<f64> {
    Ok(cosine_similarity(user_in_city, city)? - cosine_similarity(user_home, city)?)
}

/// Cosine distance between a user's vector and everyone else's mean.
pub fn distance_from_global_taste(user: &[f64], global_loo: &[f64]) -> Result<f64> {
    cosine_distance(user, global_loo)
}

/// |A ∩ B| / |A ∪ B| for two non-empty track sets.
pub fn jaccard_chart_similarity<T: Eq + Hash>(a: &HashSet<T>, b: &HashSet<T>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("chart sets must be non-empty"));
    }
    let inter = a.intersection(b).count();
    Ok(inter as f64 / (a.len() + b.len() - inter) as f64)
}

/// Whole weeks from release to listen, clamped at zero. The flag is set when
/// the release date lies after the listen.
pub fn listen_age_weeks(release: NaiveDate, listen_ts: i64) -> (i64, bool) {
    let w = weeks_between(release, date_of(listen_ts));
    if w < 0 {
        (0, true)
    } else {
        (w, false)
    }
}

/// Largest listen-age over every stream with a known release date.
pub fn max_listen_age_weeks<'a, I>(events: I) -> i64
where
    I: IntoIterator<Item = &'a StreamEvent>,
{
    events
        .into_iter()
        .filter_map(|e| e.release_date.map(|r| listen_age_weeks(r, e.start).0))
        .max()
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Controls {
    pub listening_count: usize,
    pub algorithmic_guidedness: f64,
    /// Mean of `max_listen_age - listen_age` over streams with a release date.
    pub mean_song_recency: Option<f64>,
    pub recency_anomalies: usize,
}

/// Listening count, algorithmic share and mean song recency for one
/// user-period.
pub fn control_metrics<'a, I>(events: I, max_listen_age: i64, algorithmic: &[Origin]) -> Result<Controls>
where
    I: IntoIterator<Item = &'a StreamEvent>,
{
    let mut count = 0usize;
    let mut algo = 0usize;
    let mut recency_sum = 0.0;
    let mut recency_n = 0usize;
    let mut anomalies = 0usize;
    for e in events {
        count += 1;
        if algorithmic.contains(&e.origin) {
            algo += 1;
        }
        if let Some(r) = e.release_date {
            let (age, anomaly) = listen_age_weeks(r, e.start);
            anomalies += anomaly as usize;
            recency_sum += (max_listen_age - age) as f64;
            recency_n += 1;
        }
    }
    if count == 0 {
        return Err(Error::InsufficientData("no streams in period".into()));
    }
    Ok(Controls {
        listening_count: count,
        algorithmic_guidedness: algo as f64 / count as f64,
        mean_song_recency: (recency_n > 0).then(|| recency_sum / recency_n as f64),
        recency_anomalies: anomalies,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    pub window: ExplorationWindow,
    pub travel_mode: TravelMode,
    /// Origins counted as algorithmic recommendations.
    pub algorithmic_origins: Vec<Origin>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            window: ExplorationWindow::Prior6Months,
            travel_mode: TravelMode::Sum,
            algorithmic_origins: vec![Origin::Algorithmic],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserMonthMetrics {
    pub user_id: String,
    pub month: Month,
    pub taste_exploration: Option<f64>,
    pub exploration_coverage: Option<f64>,
    pub window: ExplorationWindow,
    pub distance_from_global_taste: Option<f64>,
    pub travel_distance_km: Option<f64>,
    pub listening_count: usize,
    pub algorithmic_guidedness: f64,
    pub mean_song_recency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserCityMonthMetrics {
    pub user_id: String,
    pub city_id: String,
    pub month: Month,
    pub taste_adaptation: f64,
    pub taste_distance_to_city: f64,
    pub geo_distance_to_city_km: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: usize,
    pub missing_exploration: usize,
    pub missing_global: usize,
    pub missing_home: usize,
    pub unknown_travel_cities: usize,
    pub recency_anomalies: usize,
    /// Visits skipped because the visited city has no taste vector.
    pub cities_without_vector: usize,
    /// Visits skipped because the user lacks a home vector or home-city vector.
    pub missing_user_home: usize,
}

/// Groups stream indices by (user, period).
fn group_by_user_period<P: Period>(events: &[StreamEvent]) -> BTreeMap<(String, P), Vec<usize>> {
    let mut groups: BTreeMap<(String, P), Vec<usize>> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        groups
            .entry((e.user_id.clone(), P::from_timestamp(e.start)))
            .or_default()
            .push(i);
    }
    groups
}

/// Per-user history of period vectors.
fn histories<P: Period>(vectors: &BTreeMap<(String, P), TasteVector>) -> BTreeMap<&str, BTreeMap<P, Vec<f64>>> {
    let mut out: BTreeMap<&str, BTreeMap<P, Vec<f64>>> = BTreeMap::new();
    for ((user, p), tv) in vectors {
        out.entry(user.as_str()).or_default().insert(*p, tv.vector.clone());
    }
    out
}

/// One row per user-month with at least one stream. `events` should already
/// be filtered with the metric duration threshold.
pub fn compute_user_month_metrics(
    events: &[StreamEvent],
    user_month_vectors: &BTreeMap<(String, Month), TasteVector>,
    yearly_homes: &BTreeMap<(String, i32), HomeAssignment>,
    gazetteer: &Gazetteer,
    options: &MetricOptions,
) -> Result<(Vec<UserMonthMetrics>, MetricReport)> {
    let max_age = max_listen_age_weeks(events);
    let hist = histories(user_month_vectors);
    let mut by_month: BTreeMap<Month, Vec<(&str, &[f64])>> = BTreeMap::new();
    for ((user, m), tv) in user_month_vectors {
        by_month.entry(*m).or_default().push((user, &tv.vector));
    }
    let globals: BTreeMap<Month, GlobalMean> = by_month
        .iter()
        .filter_map(|(m, vs)| GlobalMean::new(vs.iter().map(|(_, v)| *v)).ok().map(|g| (*m, g)))
        .collect();

    let mut report = MetricReport::default();
    let mut rows = Vec::new();
    for ((user, month), idx) in group_by_user_period::<Month>(events) {
        let streams = idx.iter().map(|&i| &events[i]);
        let controls = control_metrics(streams.clone(), max_age, &options.algorithmic_origins)?;
        report.recency_anomalies += controls.recency_anomalies;

        let exploration = hist
            .get(user.as_str())
            .and_then(|h| taste_exploration(h, month, options.window));
        report.missing_exploration += exploration.is_none() as usize;

        let own = user_month_vectors.get(&(user.clone(), month));
        let global = match (own, globals.get(&month)) {
            (Some(v), Some(g)) => distance_from_global_taste(&v.vector, &g.leave_one_out(Some(&v.vector))?).ok(),
            _ => None,
        };
        report.missing_global += global.is_none() as usize;

        let home = yearly_homes
            .get(&(user.clone(), month.year()))
            .and_then(|h| gazetteer.get(&h.home_city_id));
        let travel = match home {
            Some(home) => {
                let t = monthly_travel_distance(home, streams.map(|e| e.city_id.as_str()), gazetteer, options.travel_mode)?;
                report.unknown_travel_cities += t.unknown_cities;
                Some(t.km)
            }
            None => {
                report.missing_home += 1;
                None
            }
        };

        rows.push(UserMonthMetrics {
            user_id: user,
            month,
            taste_exploration: exploration.map(|e| e.value),
            exploration_coverage: exploration.map(|e| e.coverage),
            window: options.window,
            distance_from_global_taste: global,
            travel_distance_km: travel,
            listening_count: controls.listening_count,
            algorithmic_guidedness: controls.algorithmic_guidedness,
            mean_song_recency: controls.mean_song_recency,
        });
    }
    report.rows = rows.len();
    Ok((rows, report))
}

/// One row per visit of a user to a non-home city in a month, when every
/// vector the adaptation needs exists.
pub fn compute_user_city_month_metrics(
    user_city_month_vectors: &BTreeMap<(String, String, Month), TasteVector>,
    user_home_vectors: &BTreeMap<String, TasteVector>,
    homes: &BTreeMap<String, HomeAssignment>,
    city_vectors: &BTreeMap<String, TasteVector>,
    gazetteer: &Gazetteer,
) -> Result<(Vec<UserCityMonthMetrics>, MetricReport)> {
    let mut report = MetricReport::default();
    let mut rows = Vec::new();
    for ((user, city, month), visit) in user_city_month_vectors {
        let Some(home) = homes.get(user) else {
            report.missing_home += 1;
            continue;
        };
        if home.home_city_id == *city {
            continue;
        }
        let Some(city_vec) = city_vectors.get(city) else {
            report.cities_without_vector += 1;
            continue;
        };
        let (Some(user_home), Some(home_city_vec)) =
            (user_home_vectors.get(user), city_vectors.get(&home.home_city_id))
        else {
            report.missing_user_home += 1;
            continue;
        };
        let (Some(home_loc), Some(city_loc)) = (gazetteer.get(&home.home_city_id), gazetteer.get(city)) else {
            report.unknown_travel_cities += 1;
            continue;
        };
        rows.push(UserCityMonthMetrics {
            user_id: user.clone(),
            city_id: city.clone(),
            month: *month,
            taste_adaptation: taste_adaptation(&visit.vector, &user_home.vector, &city_vec.vector)?,
            taste_distance_to_city: cosine_distance(&home_city_vec.vector, &city_vec.vector)?,
            geo_distance_to_city_km: haversine_km(home_loc, city_loc)?,
        });
    }
    report.rows = rows.len();
    Ok((rows, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserWeekMetrics {
    pub user_id: String,
    pub week: Week,
    pub country_id: Option<String>,
    pub taste_exploration: Option<f64>,
    pub listening_count: usize,
    pub algorithmic_guidedness: f64,
    pub mean_song_recency: Option<f64>,
    pub distance_from_national_taste: Option<f64>,
    pub travel_distance_km: Option<f64>,
}

/// Weekly panel rows. Exploration uses weekly vectors with `window` counted
/// in weeks; national taste is the home country's vector.
pub fn compute_user_week_metrics(
    events: &[StreamEvent],
    user_week_vectors: &BTreeMap<(String, Week), TasteVector>,
    homes: &BTreeMap<String, HomeAssignment>,
    country_vectors: &BTreeMap<String, TasteVector>,
    gazetteer: &Gazetteer,
    options: &MetricOptions,
) -> Result<(Vec<UserWeekMetrics>, MetricReport)> {
    let max_age = max_listen_age_weeks(events);
    let hist = histories(user_week_vectors);
    let mut report = MetricReport::default();
    let mut rows = Vec::new();
    for ((user, week), idx) in group_by_user_period::<Week>(events) {
        let streams = idx.iter().map(|&i| &events[i]);
        let controls = control_metrics(streams.clone(), max_age, &options.algorithmic_origins)?;
        report.recency_anomalies += controls.recency_anomalies;
        let exploration = hist
            .get(user.as_str())
            .and_then(|h| taste_exploration(h, week, options.window));
        report.missing_exploration += exploration.is_none() as usize;

        let home = homes.get(&user).and_then(|h| gazetteer.get(&h.home_city_id));
        let country = home.map(|h| h.country_id.clone());
        let national = match (user_week_vectors.get(&(user.clone(), week)), country.as_ref().and_then(|c| country_vectors.get(c))) {
            (Some(u), Some(c)) => cosine_distance(&u.vector, &c.vector).ok(),
            _ => None,
        };
        let travel = match home {
            Some(h) => {
                let t = monthly_travel_distance(h, streams.map(|e| e.city_id.as_str()), gazetteer, options.travel_mode)?;
                report.unknown_travel_cities += t.unknown_cities;
                Some(t.km)
            }
            None => {
                report.missing_home += 1;
                None
            }
        };
        rows.push(UserWeekMetrics {
            user_id: user,
            week,
            country_id: country,
            taste_exploration: exploration.map(|e| e.value),
            listening_count: controls.listening_count,
            algorithmic_guidedness: controls.algorithmic_guidedness,
            mean_song_recency: controls.mean_song_recency,
            distance_from_national_taste: national,
            travel_distance_km: travel,
        });
    }
    report.rows = rows.len();
    Ok((rows, report))
}

pub fn user_month_table(rows: &[UserMonthMetrics]) -> Table {
    let mut t = Table::new([
        "user_id",
        "month",
        "taste_exploration",
        "exploration_coverage",
        "exploration_window",
        "distance_from_global_taste",
        "travel_distance_km",
        "listening_count",
        "algorithmic_guidedness",
        "mean_song_recency",
    ]);
    for r in rows {
        t.push(vec![
            r.user_id.clone(),
            r.month.to_string(),
            fmt_opt(r.taste_exploration),
            fmt_opt(r.exploration_coverage),
            r.window.as_str().to_string(),
            fmt_opt(r.distance_from_global_taste),
            fmt_opt(r.travel_distance_km),
            r.listening_count.to_string(),
            r.algorithmic_guidedness.to_string(),
            fmt_opt(r.mean_song_recency),
        ]);
    }
    t
}

pub fn user_city_month_table(rows: &[UserCityMonthMetrics]) -> Table {
    let mut t = Table::new([
        "user_id",
        "city_id",
        "month",
        "taste_adaptation",
        "taste_distance_to_city",
        "geo_distance_to_city_km",
    ]);
    for r in rows {
        t.push(vec![
            r.user_id.clone(),
            r.city_id.clone(),
            r.month.to_string(),
            r.taste_adaptation.to_string(),
            r.taste_distance_to_city.to_string(),
            r.geo_distance_to_city_km.to_string(),
        ]);
    }
    t
}

pub fn user_week_table(rows: &[UserWeekMetrics]) -> Table {
    let mut t = Table::new([
        "user_id",
        "week",
        "country_id",
        "taste_exploration",
        "listening_count",
        "algorithmic_guidedness",
        "mean_song_recency",
        "distance_from_national_taste",
        "travel_distance_km",
    ]);
    for r in rows {
        t.push(vec![
            r.user_id.clone(),
            r.week.to_string(),
            r.country_id.clone().unwrap_or_default(),
            fmt_opt(r.taste_exploration),
            r.listening_count.to_string(),
            r.algorithmic_guidedness.to_string(),
            fmt_opt(r.mean_song_recency),
            fmt_opt(r.distance_from_national_taste),
            fmt_opt(r.travel_distance_km),
        ]);
    }
    t
}

/// Years covered by the events, for per-year home inference.
pub fn years_of(events: &[StreamEvent]) -> BTreeSet<i32> {
    events.iter().map(|e| year_of(e.start)).collect()
}
