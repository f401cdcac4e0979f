//! Taste vectors: centroids of song vectors at user, user-city, city,
//! country and leave-one-out global scope, plus home-city inference.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::calendar::{year_of, Month, Week};
use crate::embed::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::geo::Gazetteer;
use crate::ingest::StreamEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TasteScope {
    UserMonth,
    UserWeek,
    UserCityMonth,
    UserHome,
    UserOverall,
    City,
    Country,
    GlobalLoo,
}

impl TasteScope {
    pub fn as_str(self) -> &'static str {
        match self {
            TasteScope::UserMonth => "user_month",
            TasteScope::UserWeek => "user_week",
            TasteScope::UserCityMonth => "user_city_month",
            TasteScope::UserHome => "user_home",
            TasteScope::UserOverall => "user_overall",
            TasteScope::City => "city",
            TasteScope::Country => "country",
            TasteScope::GlobalLoo => "global_loo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "user_month" => TasteScope::UserMonth,
            "user_week" => TasteScope::UserWeek,
            "user_city_month" => TasteScope::UserCityMonth,
            "user_home" => TasteScope::UserHome,
            "user_overall" => TasteScope::UserOverall,
            "city" => TasteScope::City,
            "country" => TasteScope::Country,
            "global_loo" => TasteScope::GlobalLoo,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TasteKey {
    pub scope: TasteScope,
    pub user_id: Option<String>,
    pub city_id: Option<String>,
    pub country_id: Option<String>,
    pub month: Option<Month>,
    pub week: Option<Week>,
}

impl TasteKey {
    fn new(scope: TasteScope) -> Self {
        TasteKey {
            scope,
            user_id: None,
            city_id: None,
            country_id: None,
            month: None,
            week: None,
        }
    }

    pub fn user_month(user: &str, month: Month) -> Self {
        TasteKey {
            user_id: Some(user.into()),
            month: Some(month),
            ..TasteKey::new(TasteScope::UserMonth)
        }
    }

    pub fn user_week(user: &str, week: Week) -> Self {
        TasteKey {
            user_id: Some(user.into()),
            week: Some(week),
            ..TasteKey::new(TasteScope::UserWeek)
        }
    }

    pub fn user_city_month(user: &str, city: &str, month: Month) -> Self {
        TasteKey {
            user_id: Some(user.into()),
            city_id: Some(city.into()),
            month: Some(month),
            ..TasteKey::new(TasteScope::UserCityMonth)
        }
    }

    pub fn user_home(user: &str, city: &str) -> Self {
        TasteKey {
            user_id: Some(user.into()),
            city_id: Some(city.into()),
            ..TasteKey::new(TasteScope::UserHome)
        }
    }

    pub fn user_overall(user: &str) -> Self {
        TasteKey {
            user_id: Some(user.into()),
            ..TasteKey::new(TasteScope::UserOverall)
        }
    }

    pub fn city(city: &str, country: Option<&str>) -> Self {
        TasteKey {
            city_id: Some(city.into()),
            country_id: country.map(Into::into),
            ..TasteKey::new(TasteScope::City)
        }
    }

    pub fn country(country: &str) -> Self {
        TasteKey {
            country_id: Some(country.into()),
            ..TasteKey::new(TasteScope::Country)
        }
    }

    /// A single-line identifier, `scope|user|city|country|month|week` with
    /// empty components for absent fields.
    pub fn label(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.scope.as_str(),
            self.user_id.as_deref().unwrap_or(""),
            self.city_id.as_deref().unwrap_or(""),
            self.country_id.as_deref().unwrap_or(""),
            self.month.map(|m| m.to_string()).unwrap_or_default(),
            self.week.map(|w| w.to_string()).unwrap_or_default()
        )
    }

    pub fn parse_label(label: &str) -> Result<Self> {
        let parts: Vec<&str> = label.split('|').collect();
        let bad = || Error::Format(format!("bad taste key `{label}`"));
        if parts.len() != 6 {
            return Err(bad());
        }
        let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
        Ok(TasteKey {
            scope: TasteScope::parse(parts[0]).ok_or_else(bad)?,
            user_id: opt(parts[1]),
            city_id: opt(parts[2]),
            country_id: opt(parts[3]),
            month: if parts[4].is_empty() {
                None
            } else {
                Some(parts[4].parse()?)
            },
            week: if parts[5].is_empty() {
                None
            } else {
                Some(parts[5].parse()?)
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TasteVector {
    pub key: TasteKey,
    pub vector: Vec<f64>,
    /// Streams, users or cities behind the centroid, depending on scope.
    pub support: usize,
}

impl TasteVector {
    pub fn is_degenerate(&self) -> bool {
        is_zero(&self.vector)
    }
}

fn is_zero(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroid {
    pub vector: Vec<f64>,
    /// All-zero mean; excluded from distance computations downstream.
    pub degenerate: bool,
}

/// (Weighted) arithmetic mean of equal-length vectors, not normalized.
pub fn centroid<V, T>(vectors: &[V], weights: Option<&[f64]>) -> Result<Centroid>
where
    V: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    let first = vectors
        .first()
        .ok_or_else(|| Error::arg("centroid of an empty set"))?;
    let dim = first.as_ref().len();
    if let Some(w) = weights {
        if w.len() != vectors.len() {
            return Err(Error::arg(format!("{} weights for {} vectors", w.len(), vectors.len())));
        }
        if w.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::arg("weights must be positive"));
        }
    }
    let mut sum = vec![0.0; dim];
    let mut total = 0.0;
    for (i, v) in vectors.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::arg(format!("dimension mismatch: {} vs {dim}", v.len())));
        }
        let w = weights.map_or(1.0, |w| w[i]);
        for (s, &x) in sum.iter_mut().zip(v) {
            *s += w * x.into();
        }
        total += w;
    }
    sum.iter_mut().for_each(|s| *s /= total);
    let degenerate = is_zero(&sum);
    Ok(Centroid {
        vector: sum,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomeAssignment {
    pub user_id: String,
    /// `None` for a home inferred over the whole observation window.
    pub year: Option<i32>,
    pub home_city_id: String,
    /// Stream count and total seconds per city.
    pub evidence: BTreeMap<String, (usize, u64)>,
}

/// The city with the most streams; ties go to the larger total listening
/// duration, then to the lexicographically smallest city id. With `year`
/// set, only that calendar year's streams count.
pub fn infer_home_city<'a, I>(events: I, year: Option<i32>) -> Result<HomeAssignment>
where
    I: IntoIterator<Item = &'a StreamEvent>,
{
    let mut evidence: BTreeMap<String, (usize, u64)> = BTreeMap::new();
    let mut user = None;
    for e in events {
        if year.is_some_and(|y| year_of(e.start) != y) {
            continue;
        }
        user.get_or_insert_with(|| e.user_id.clone());
        let slot = evidence.entry(e.city_id.clone()).or_default();
        slot.0 += 1;
        slot.1 += u64::from(e.duration);
    }
    let user_id = user.ok_or_else(|| Error::InsufficientData("no streams to infer a home city".into()))?;
    // BTreeMap iterates in ascending id order, so `max_by` keeps the first
    // (smallest) id only if we reverse the id comparison.
    let home = evidence
        .iter()
        .max_by(|a, b| {
            a.1 .0
                .cmp(&b.1 .0)
                .then(a.1 .1.cmp(&b.1 .1))
                .then(b.0.cmp(a.0))
        })
        .map(|(c, _)| c.clone())
        .expect("evidence is non-empty");
    Ok(HomeAssignment {
        user_id,
        year,
        home_city_id: home,
        evidence,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StreamWeighting {
    /// Every stream counts, so a song played ten times weighs ten.
    #[default]
    PerStream,
    /// Each distinct song counts once.
    PerUniqueSong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationOptions {
    pub weighting: StreamWeighting,
    /// Fewest vocabulary streams behind an emitted vector.
    pub min_support: usize,
}

impl Default for AggregationOptions {
    fn default() -> Self {
        AggregationOptions {
            weighting: StreamWeighting::PerStream,
            min_support: 1,
        }
    }
}

/// Centroids of song vectors grouped by an arbitrary key.
#[derive(Debug, Clone, Default)]
pub struct Aggregate<K: Ord> {
    pub vectors: BTreeMap<K, TasteVector>,
    /// Streams whose track is not in the vocabulary.
    pub out_of_vocabulary: usize,
    /// Groups whose centroid came out all-zero.
    pub degenerate: usize,
}

/// Groups streams with `key_of` (returning `None` skips the stream) and takes
/// the centroid of each group's song vectors.
pub fn aggregate_streams<'a, I, K, F>(
    events: I,
    space: &EmbeddingSpace,
    options: AggregationOptions,
    mut key_of: F,
) -> Aggregate<K>
where
    I: IntoIterator<Item = &'a StreamEvent>,
    K: Ord + Clone,
    F: FnMut(&StreamEvent) -> Option<(K, TasteKey)>,
{
    struct Acc {
        key: TasteKey,
        sum: Vec<f64>,
        n: usize,
        seen: BTreeSet<usize>,
    }
    let dim = space.dimension();
    let mut groups: BTreeMap<K, Acc> = BTreeMap::new();
    let mut oov = 0;
    for e in events {
        let Some((k, tk)) = key_of(e) else { continue };
        let Some(idx) = space.index_of(&e.track_id) else {
            oov += 1;
            continue;
        };
        let acc = groups.entry(k).or_insert_with(|| Acc {
            key: tk,
            sum: vec![0.0; dim],
            n: 0,
            seen: BTreeSet::new(),
        });
        if options.weighting == StreamWeighting::PerUniqueSong && !acc.seen.insert(idx) {
            continue;
        }
        for (s, &x) in acc.sum.iter_mut().zip(space.row(idx)) {
            *s += f64::from(x);
        }
        acc.n += 1;
    }
    let mut out = Aggregate {
        vectors: BTreeMap::new(),
        out_of_vocabulary: oov,
        degenerate: 0,
    };
    for (k, acc) in groups {
        if acc.n < options.min_support.max(1) {
            continue;
        }
        let vector: Vec<f64> = acc.sum.iter().map(|s| s / acc.n as f64).collect();
        if is_zero(&vector) {
            out.degenerate += 1;
            continue;
        }
        out.vectors.insert(
            k,
            TasteVector {
                key: acc.key,
                vector,
                support: acc.n,
            },
        );
    }
    out
}

pub type UserMonth = (String, Month);
pub type UserCityMonth = (String, String, Month);

/// Per user-month centroid of every stream's song vector.
pub fn build_user_month_vectors(
    events: &[StreamEvent],
    space: &EmbeddingSpace,
    options: AggregationOptions,
) -> Aggregate<UserMonth> {
    aggregate_streams(events, space, options, |e| {
        let m = Month::from_timestamp(e.start);
        Some(((e.user_id.clone(), m), TasteKey::user_month(&e.user_id, m)))
    })
}

pub type UserWeek = (String, Week);

/// Per user-ISO-week centroids.
pub fn build_user_week_vectors(
    events: &[StreamEvent],
    space: &EmbeddingSpace,
    options: AggregationOptions,
) -> Aggregate<UserWeek> {
    aggregate_streams(events, space, options, |e| {
        let w = Week::from_timestamp(e.start);
        Some(((e.user_id.clone(), w), TasteKey::user_week(&e.user_id, w)))
    })
}

/// Per user-city-month centroids, using only streams geolocated in the city.
pub fn build_user_city_month_vectors(
    events: &[StreamEvent],
    space: &EmbeddingSpace,
    options: AggregationOptions,
) -> Aggregate<UserCityMonth> {
    aggregate_streams(events, space, options, |e| {
        let m = Month::from_timestamp(e.start);
        Some((
            (e.user_id.clone(), e.city_id.clone(), m),
            TasteKey::user_city_month(&e.user_id, &e.city_id, m),
        ))
    })
}

/// One user's vector for streams in `city` during `month`, or `None` when
/// no vocabulary stream qualifies.
pub fn build_user_city_month_vector(
    events: &[StreamEvent],
    space: &EmbeddingSpace,
    user: &str,
    city: &str,
    month: Month,
    options: AggregationOptions,
) -> Option<TasteVector> {
    let agg = aggregate_streams(events, space, options, |e| {
        (e.user_id == user && e.city_id == city && Month::from_timestamp(e.start) == month)
            .then(|| ((), TasteKey::user_city_month(user, city, month)))
    });
    agg.vectors.into_values().next()
}

/// Per-user centroid over the whole observation window.
pub fn build_user_overall_vectors(
    events: &[StreamEvent],
    space: &EmbeddingSpace,
    options: AggregationOptions,
) -> Aggregate<String> {
    aggregate_streams(events, space, options, |e| {
        Some((e.user_id.clone(), TasteKey::user_overall(&e.user_id)))
    })
}

/// Per-user centroid of streams in the user's home city over the whole window.
pub fn build_user_home_vectors(
    events: &[StreamEvent],
    space: &EmbeddingSpace,
    homes: &BTreeMap<String, String>,
    options: AggregationOptions,
) -> Aggregate<String> {
    aggregate_streams(events, space, options, |e| {
        let home = homes.get(&e.user_id)?;
        (*home == e.city_id).then(|| (e.user_id.clone(), TasteKey::user_home(&e.user_id, home)))
    })
}

#[derive(Debug, Clone, Default)]
pub struct LocationVectors {
    pub cities: BTreeMap<String, TasteVector>,
    pub countries: BTreeMap<String, TasteVector>,
    /// Home cities missing from the gazetteer (no country).
    pub unlocated_cities: usize,
}

/// City vector: unweighted mean of its home users' overall vectors. Country
/// vector: unweighted mean of its cities' vectors. Cities with no home users
/// get no vector.
pub fn build_location_vectors(
    user_vectors: &BTreeMap<String, TasteVector>,
    homes: &BTreeMap<String, String>,
    gazetteer: &Gazetteer,
) -> Result<LocationVectors> {
    let mut by_city: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
    for (user, v) in user_vectors {
        let home = homes
            .get(user)
            .ok_or_else(|| Error::arg(format!("user {user} has no home assignment")))?;
        by_city.entry(home.as_str()).or_default().push(&v.vector);
    }
    let mut out = LocationVectors::default();
    let mut by_country: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (city, vs) in by_city {
        let c = centroid(&vs, None)?;
        if c.degenerate {
            continue;
        }
        let country = gazetteer.country_of(city);
        match country {
            Some(cc) => by_country.entry(cc.to_string()).or_default().push(c.vector.clone()),
            None => out.unlocated_cities += 1,
        }
        out.cities.insert(
            city.to_string(),
            TasteVector {
                key: TasteKey::city(city, country),
                vector: c.vector,
                support: vs.len(),
            },
        );
    }
    for (country, vs) in by_country {
        let c = centroid(&vs, None)?;
        if c.degenerate {
            continue;
        }
        out.countries.insert(
            country.clone(),
            TasteVector {
                key: TasteKey::country(&country),
                vector: c.vector,
                support: vs.len(),
            },
        );
    }
    Ok(out)
}

/// Unweighted mean of every other user's vector for one month.
pub fn build_global_vector_loo(
    month_vectors: &BTreeMap<String, Vec<f64>>,
    focal_user: &str,
) -> Result<Vec<f64>> {
    GlobalMean::new(month_vectors.values().map(Vec::as_slice))?
        .leave_one_out(month_vectors.get(focal_user).map(Vec::as_slice))
}

/// Sum of a month's user vectors, for O(d) leave-one-out means.
#[derive(Debug, Clone)]
pub struct GlobalMean {
    sum: Vec<f64>,
    n: usize,
}

impl GlobalMean {
    pub fn new<'a, I>(vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut sum: Vec<f64> = Vec::new();
        let mut n = 0;
        for v in vectors {
            if sum.is_empty() {
                sum = vec![0.0; v.len()];
            } else if v.len() != sum.len() {
                return Err(Error::arg("dimension mismatch in global mean"));
            }
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            n += 1;
        }
        if n < 2 {
            return Err(Error::InsufficientData(format!(
                "{n} users with vectors this period, need 2"
            )));
        }
        Ok(GlobalMean { sum, n })
    }

    pub fn users(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    /// Mean without `focal`; `None` means the focal user has no vector this
    /// period and the full mean is returned.
    pub fn leave_one_out(&self, focal: Option<&[f64]>) -> Result<Vec<f64>> {
        match focal {
            None => Ok(self.mean()),
            Some(f) => {
                if f.len() != self.sum.len() {
                    return Err(Error::arg("dimension mismatch in global mean"));
                }
                let k = (self.n - 1) as f64;
                Ok(self.sum.iter().zip(f).map(|(s, x)| (s - x) / k).collect())
            }
        }
    }
}

/// Whole-window home of every user.
pub fn primary_homes(events: &[StreamEvent]) -> Result<BTreeMap<String, HomeAssignment>> {
    let mut by_user: HashMap<&str, Vec<&StreamEvent>> = HashMap::new();
    for e in events {
        by_user.entry(e.user_id.as_str()).or_default().push(e);
    }
    let mut out = BTreeMap::new();
    for (user, evs) in by_user {
        out.insert(user.to_string(), infer_home_city(evs, None)?);
    }
    Ok(out)
}

/// Per-year homes for every user-year with streams.
pub fn yearly_homes(events: &[StreamEvent]) -> Result<BTreeMap<(String, i32), HomeAssignment>> {
    let mut by_user_year: HashMap<(&str, i32), Vec<&StreamEvent>> = HashMap::new();
    for e in events {
        by_user_year
            .entry((e.user_id.as_str(), year_of(e.start)))
            .or_default()
            .push(e);
    }
    let mut out = BTreeMap::new();
    for ((user, year), evs) in by_user_year {
        out.insert((user.to_string(), year), infer_home_city(evs, Some(year))?);
    }
    Ok(out)
}
