//! Synthetic data with planted ground truth: a genre-clustered catalog and
//! listening sessions, a monthly estimation panel with known coefficients,
//! and a weekly two-country treatment panel with a known ATET.
//!
//! Every generator draws from a single ChaCha8 stream seeded from the
//! config, so identical configs produce identical output on every platform.

use std::collections::BTreeMap;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::calendar::{timestamp_of, Month, Week};
use crate::econ::{DidObservation, DidPanel, Panel, PanelObservation, Term};
use crate::error::{Error, Result};
use crate::geo::CityLocation;
use crate::ingest::{Origin, StreamEvent, TrackMeta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_cities: usize,
    pub n_countries: usize,
    pub n_artists: usize,
    pub songs_per_artist: usize,
    pub n_genres: usize,
    /// Probability that a song is drawn from the session's genre rather
    /// than uniformly from the catalog.
    pub within_genre_session_prob: f64,
    /// Probability that a session's genre is the user's favourite.
    pub user_genre_loyalty: f64,
    /// Probability that a session's genre is the current city's genre.
    pub city_genre_affinity: f64,
    /// Probability that a user spends a given month away from home.
    pub travel_prob: f64,
    pub sessions_per_user: usize,
    pub min_session_length: usize,
    pub max_session_length: usize,
    /// Probability that a non-opening stream is shorter than a minute.
    pub short_stream_prob: f64,
    pub algorithmic_prob: f64,
    pub missing_release_prob: f64,
    /// First month of the observation window, `YYYY-MM`.
    pub start_month: String,
    pub months: usize,
    pub panel: PanelSynth,
    pub did: DidSynth,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_users: 60,
            n_cities: 12,
            n_countries: 3,
            n_artists: 40,
            songs_per_artist: 5,
            n_genres: 4,
            within_genre_session_prob: 0.9,
            user_genre_loyalty: 0.5,
            city_genre_affinity: 0.2,
            travel_prob: 0.15,
            sessions_per_user: 120,
            min_session_length: 3,
            max_session_length: 12,
            short_stream_prob: 0.05,
            algorithmic_prob: 0.3,
            missing_release_prob: 0.02,
            start_month: "2019-01".into(),
            months: 24,
            panel: PanelSynth::default(),
            did: DidSynth::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTerm {
    /// `x`, `x^2` or `a*b` over the base variables.
    pub term: String,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelSynth {
    pub n_users: usize,
    pub months: usize,
    pub noise_sd: f64,
    pub user_effect_sd: f64,
    pub period_effect_sd: f64,
    pub planted: Vec<PlantedTerm>,
}

impl Default for PanelSynth {
    fn default() -> Self {
        let t = |term: &str, coefficient| PlantedTerm {
            term: term.into(),
            coefficient,
        };
        PanelSynth {
            n_users: 2000,
            months: 24,
            noise_sd: 1.0,
            user_effect_sd: 1.0,
            period_effect_sd: 0.3,
            planted: vec![
                t("travel", 0.05),
                t("algorithmic", 0.40),
                t("travel^2", -0.25),
                t("travel*algorithmic", 0.10),
                t("listens", 0.15),
            ],
        }
    }
}

/// Base variables of the synthetic monthly panel.
pub const PANEL_VARIABLES: [&str; 3] = ["travel", "algorithmic", "listens"];
/// Base variables log-transformed before standardizing.
pub const PANEL_LOG_VARIABLES: [&str; 2] = ["travel", "listens"];
pub const PANEL_OUTCOME: &str = "exploration";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EffectProfile {
    Step,
    /// Linear build-up reaching the full effect after `weeks` weeks.
    Ramp { weeks: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DidSynth {
    pub n_units: usize,
    pub treated_share: f64,
    pub weeks: usize,
    /// Index (from 0) of the first treated week.
    pub treatment_index: usize,
    /// First week, `YYYY-Www`.
    pub start_week: String,
    pub atet: f64,
    pub profile: EffectProfile,
    /// Extra treated-group slope per week before treatment.
    pub pretrend_slope: f64,
    /// Weeks before the nominal treatment week at which the effect starts.
    pub anticipation_weeks: usize,
    pub noise_sd: f64,
    pub unit_effect_sd: f64,
    pub period_effect_sd: f64,
    /// Effect of each control's previous-week value on the outcome.
    pub control_coefficients: Vec<f64>,
    pub treated_country: String,
    pub control_country: String,
}

impl Default for DidSynth {
    fn default() -> Self {
        DidSynth {
            n_units: 2000,
            treated_share: 0.5,
            weeks: 20,
            treatment_index: 10,
            start_week: "2020-W02".into(),
            atet: 0.023,
            profile: EffectProfile::Step,
            pretrend_slope: 0.0,
            anticipation_weeks: 0,
            noise_sd: 0.1,
            unit_effect_sd: 1.0,
            period_effect_sd: 0.2,
            control_coefficients: vec![0.05, -0.03],
            treated_country: "FR".into(),
            control_country: "DE".into(),
        }
    }
}

pub const DID_CONTROLS: [&str; 2] = ["listens", "algorithmic"];

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::arg(format!("{name} = {p} is not a probability")))
    }
}

fn check_count(name: &str, n: usize) -> Result<()> {
    if n >= 1 {
        Ok(())
    } else {
        Err(Error::arg(format!("{name} must be >= 1")))
    }
}

fn check_sd(name: &str, sd: f64) -> Result<()> {
    if sd >= 0.0 && sd.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("{name} = {sd} must be finite and >= 0")))
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, n) in [
            ("n_users", self.n_users),
            ("n_cities", self.n_cities),
            ("n_countries", self.n_countries),
            ("n_artists", self.n_artists),
            ("songs_per_artist", self.songs_per_artist),
            ("n_genres", self.n_genres),
            ("sessions_per_user", self.sessions_per_user),
            ("min_session_length", self.min_session_length),
            ("months", self.months),
        ] {
            check_count(name, n)?;
        }
        for (name, p) in [
            ("within_genre_session_prob", self.within_genre_session_prob),
            ("user_genre_loyalty", self.user_genre_loyalty),
            ("city_genre_affinity", self.city_genre_affinity),
            ("travel_prob", self.travel_prob),
            ("short_stream_prob", self.short_stream_prob),
            ("algorithmic_prob", self.algorithmic_prob),
            ("missing_release_prob", self.missing_release_prob),
        ] {
            check_prob(name, p)?;
        }
        if self.user_genre_loyalty + self.city_genre_affinity > 1.0 {
            return Err(Error::arg("user_genre_loyalty + city_genre_affinity exceeds 1"));
        }
        if self.max_session_length < self.min_session_length {
            return Err(Error::arg("max_session_length < min_session_length"));
        }
        if self.max_session_length > MAX_SESSION_SONGS {
            return Err(Error::arg(format!("max_session_length exceeds {MAX_SESSION_SONGS}")));
        }
        if self.n_countries > self.n_cities {
            return Err(Error::arg("n_countries exceeds n_cities"));
        }
        if self.n_genres > self.n_artists {
            return Err(Error::arg("n_genres exceeds n_artists; some genres would have no songs"));
        }
        let start = self.window_start()?;
        let span = timestamp_of(self.window_end()?) - timestamp_of(start);
        if span / (self.sessions_per_user as i64) < 2 * MAX_SESSION_SPAN + 3600 {
            return Err(Error::arg("sessions_per_user too large for the observation window"));
        }
        self.panel.validate()?;
        self.did.validate()
    }

    fn window_start(&self) -> Result<NaiveDate> {
        let m: Month = self.start_month.parse()?;
        NaiveDate::from_ymd_opt(m.year(), m.month(), 1).ok_or_else(|| Error::arg("bad start_month"))
    }

    fn window_end(&self) -> Result<NaiveDate> {
        let m = self.start_month.parse::<Month>()?.offset(self.months as i32);
        NaiveDate::from_ymd_opt(m.year(), m.month(), 1).ok_or_else(|| Error::arg("bad window end"))
    }

    /// Observation window `[start, end)` in UTC seconds.
    pub fn window(&self) -> Result<(i64, i64)> {
        Ok((timestamp_of(self.window_start()?), timestamp_of(self.window_end()?)))
    }
}

impl PanelSynth {
    pub fn validate(&self) -> Result<()> {
        check_count("panel.n_users", self.n_users)?;
        if self.months < 2 {
            return Err(Error::arg("panel.months must be >= 2"));
        }
        check_sd("panel.noise_sd", self.noise_sd)?;
        check_sd("panel.user_effect_sd", self.user_effect_sd)?;
        check_sd("panel.period_effect_sd", self.period_effect_sd)?;
        for p in &self.planted {
            let term = Term::parse(&p.term)?;
            let vars: Vec<&String> = match &term {
                Term::Var(v) | Term::Square(v) => vec![v],
                Term::Product(a, b) => vec![a, b],
            };
            if let Some(v) = vars.iter().find(|v| !PANEL_VARIABLES.contains(&v.as_str())) {
                return Err(Error::arg(format!("panel.planted: unknown variable `{v}`")));
            }
        }
        Ok(())
    }
}

impl DidSynth {
    pub fn validate(&self) -> Result<()> {
        check_count("did.n_units", self.n_units)?;
        check_prob("did.treated_share", self.treated_share)?;
        let treated = self.n_treated();
        if treated == 0 || treated == self.n_units {
            return Err(Error::arg("did.treated_share leaves a group empty"));
        }
        if self.treatment_index == 0 || self.treatment_index >= self.weeks {
            return Err(Error::arg("did.treatment_index must fall strictly inside the weeks"));
        }
        if self.anticipation_weeks >= self.treatment_index {
            return Err(Error::arg("did.anticipation_weeks exceeds the pre-period"));
        }
        if let EffectProfile::Ramp { weeks: 0 } = self.profile {
            return Err(Error::arg("did.profile ramp needs weeks >= 1"));
        }
        if self.control_coefficients.len() != DID_CONTROLS.len() {
            return Err(Error::arg(format!(
                "did.control_coefficients needs {} values",
                DID_CONTROLS.len()
            )));
        }
        check_sd("did.noise_sd", self.noise_sd)?;
        check_sd("did.unit_effect_sd", self.unit_effect_sd)?;
        check_sd("did.period_effect_sd", self.period_effect_sd)?;
        self.start_week.parse::<Week>()?;
        if self.treated_country == self.control_country {
            return Err(Error::arg("did treated and control countries must differ"));
        }
        Ok(())
    }

    pub fn n_treated(&self) -> usize {
        (self.n_units as f64 * self.treated_share).round() as usize
    }

    /// Planted effect on the treated group in week index `t`.
    pub fn effect(&self, t: usize) -> f64 {
        let onset = self.treatment_index - self.anticipation_weeks;
        if t < onset {
            return 0.0;
        }
        match self.profile {
            EffectProfile::Step => self.atet,
            EffectProfile::Ramp { weeks } => self.atet * (((t - onset + 1) as f64) / weeks as f64).min(1.0),
        }
    }
}

// ---------------------------------------------------------------------------
// Sessions

/// Longest possible session span in seconds.
const MAX_SESSION_SPAN: i64 = MAX_SESSION_SONGS as i64 * (MAX_DURATION as i64 + MAX_INNER_GAP);
const MAX_INNER_GAP: i64 = 120;
const MAX_DURATION: u32 = 420;
const MAX_SESSION_SONGS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTruth {
    pub track_genre: BTreeMap<String, usize>,
    pub track_artist: BTreeMap<String, String>,
    pub artist_genre: BTreeMap<String, usize>,
    /// Planted genre of each session, in event order.
    pub session_genres: Vec<usize>,
    pub homes: BTreeMap<String, String>,
    /// `(user, month, destination city)` for every travel month.
    pub travel: Vec<(String, String, String)>,
    pub city_genre: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSessions {
    /// Sorted by user, then start time.
    pub events: Vec<StreamEvent>,
    /// Planted per-user session index of each event.
    pub session_ids: Vec<u32>,
    pub tracks: Vec<TrackMeta>,
    pub cities: Vec<CityLocation>,
    pub truth: SessionTruth,
}

pub fn track_id(artist: usize, k: usize) -> String {
    format!("t{artist:04}_{k:02}")
}

pub fn artist_id(artist: usize) -> String {
    format!("a{artist:04}")
}

pub fn city_id(c: usize) -> String {
    format!("c{c:03}")
}

pub fn country_id(k: usize) -> String {
    format!("K{k:02}")
}

pub fn user_id(u: usize) -> String {
    format!("u{u:05}")
}

/// Catalog, cities, users and listening sessions.
pub fn generate_sessions(config: &SynthConfig) -> Result<SynthSessions> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let window_start = config.window_start()?;
    let (start_ts, end_ts) = config.window()?;

    // Catalog: artist a belongs to genre a mod n_genres.
    let mut tracks = Vec::new();
    let mut by_genre: Vec<Vec<usize>> = vec![Vec::new(); config.n_genres];
    let mut truth = SessionTruth {
        track_genre: BTreeMap::new(),
        track_artist: BTreeMap::new(),
        artist_genre: BTreeMap::new(),
        session_genres: Vec::new(),
        homes: BTreeMap::new(),
        travel: Vec::new(),
        city_genre: BTreeMap::new(),
    };
    for a in 0..config.n_artists {
        let genre = a % config.n_genres;
        truth.artist_genre.insert(artist_id(a), genre);
        for k in 0..config.songs_per_artist {
            let id = track_id(a, k);
            let release = if rng.random_bool(config.missing_release_prob) {
                None
            } else {
                window_start.checked_sub_days(Days::new(rng.random_range(1..3650)))
            };
            by_genre[genre].push(tracks.len());
            truth.track_genre.insert(id.clone(), genre);
            truth.track_artist.insert(id.clone(), artist_id(a));
            tracks.push(TrackMeta {
                track_id: id,
                artist_id: artist_id(a),
                release_date: release,
            });
        }
    }

    let mut cities = Vec::new();
    for c in 0..config.n_cities {
        let lat = rng.random_range(36.0..60.0);
        let lon = rng.random_range(-9.0..28.0);
        cities.push(CityLocation::new(city_id(c), lat, lon, country_id(c % config.n_countries))?);
        truth.city_genre.insert(city_id(c), c % config.n_genres);
    }

    let slot = (end_ts - start_ts) / config.sessions_per_user as i64;
    let mut events = Vec::new();
    let mut session_ids = Vec::new();
    for u in 0..config.n_users {
        let user = user_id(u);
        let home = rng.random_range(0..config.n_cities);
        let favourite = rng.random_range(0..config.n_genres);
        truth.homes.insert(user.clone(), city_id(home));
        let mut away: BTreeMap<usize, usize> = BTreeMap::new();
        if config.n_cities > 1 {
            for m in 0..config.months {
                if rng.random_bool(config.travel_prob) {
                    let mut dest = rng.random_range(0..config.n_cities - 1);
                    if dest >= home {
                        dest += 1;
                    }
                    away.insert(m, dest);
                    let month = config.start_month.parse::<Month>()?.offset(m as i32);
                    truth.travel.push((user.clone(), month.to_string(), city_id(dest)));
                }
            }
        }
        let first_month = config.start_month.parse::<Month>()?;
        for s in 0..config.sessions_per_user {
            let mut t = start_ts + s as i64 * slot + rng.random_range(0..slot - MAX_SESSION_SPAN - 3600);
            let month_index = (Month::from_timestamp(t).0 - first_month.0) as usize;
            let city = away.get(&month_index).copied().unwrap_or(home);
            let r: f64 = rng.random();
            let genre = if r < config.city_genre_affinity {
                city % config.n_genres
            } else if r < config.city_genre_affinity + config.user_genre_loyalty {
                favourite
            } else {
                rng.random_range(0..config.n_genres)
            };
            truth.session_genres.push(genre);
            let length = rng.random_range(config.min_session_length..=config.max_session_length);
            for i in 0..length {
                let ti = if rng.random_bool(config.within_genre_session_prob) {
                    by_genre[genre][rng.random_range(0..by_genre[genre].len())]
                } else {
                    rng.random_range(0..tracks.len())
                };
                let short = i > 0 && rng.random_bool(config.short_stream_prob);
                let duration: u32 = if short {
                    rng.random_range(10..60)
                } else {
                    rng.random_range(60..=MAX_DURATION)
                };
                let origin = if rng.random_bool(config.algorithmic_prob) {
                    Origin::Algorithmic
                } else if rng.random_bool(0.6) {
                    Origin::Collection
                } else {
                    Origin::Editorial
                };
                let track = &tracks[ti];
                events.push(StreamEvent {
                    user_id: user.clone(),
                    track_id: track.track_id.clone(),
                    artist_id: track.artist_id.clone(),
                    origin,
                    start: t,
                    duration,
                    skipped: duration < 30,
                    platform: if rng.random_bool(0.7) { "mobile" } else { "desktop" }.into(),
                    city_id: city_id(city),
                    release_date: track.release_date,
                });
                session_ids.push(s as u32);
                t += i64::from(duration) + rng.random_range(0..=MAX_INNER_GAP);
            }
        }
    }
    Ok(SynthSessions {
        events,
        session_ids,
        tracks,
        cities,
        truth,
    })
}

// ---------------------------------------------------------------------------
// Monthly panel

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelTruth {
    pub outcome: String,
    /// Planted coefficients on terms of the standardized base variables.
    pub coefficients: BTreeMap<String, f64>,
    pub terms: Vec<String>,
    pub log_transform: Vec<String>,
    pub standardize: Vec<String>,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPanel {
    /// Raw (untransformed) base variables.
    pub panel: Panel,
    pub truth: PanelTruth,
}

fn zscore(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    xs.iter().map(|x| (x - mean) / sd).collect()
}

/// Monthly user panel: outcome = planted terms of the standardized base
/// variables + user effect + month effect + noise.
pub fn generate_panel(config: &SynthConfig) -> Result<SynthPanel> {
    let cfg = &config.panel;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let first: Month = config.start_month.parse()?;

    let month_effects: Vec<f64> = (0..cfg.months)
        .map(|_| cfg.period_effect_sd * std_normal.sample(&mut rng))
        .collect();
    let n = cfg.n_users * cfg.months;
    let mut units = Vec::with_capacity(n);
    let mut periods = Vec::with_capacity(n);
    let mut base: [Vec<f64>; 3] = Default::default();
    let mut fixed = Vec::with_capacity(n);
    for u in 0..cfg.n_users {
        let alpha = cfg.user_effect_sd * std_normal.sample(&mut rng);
        // Shared propensity correlates the regressors within and across users.
        let propensity = std_normal.sample(&mut rng);
        let mobility = LogNormal::new(5.0 + 0.5 * propensity, 1.0).expect("valid lognormal");
        let volume = LogNormal::new(4.0 + 0.3 * alpha, 0.6).expect("valid lognormal");
        for (m, gamma) in month_effects.iter().enumerate() {
            let travel = if rng.random_bool(0.4) { 0.0 } else { mobility.sample(&mut rng) };
            let logit = 0.5 * propensity - 0.5 + std_normal.sample(&mut rng);
            let algorithmic = 1.0 / (1.0 + (-logit).exp());
            let listens = volume.sample(&mut rng).round();
            base[0].push(travel);
            base[1].push(algorithmic);
            base[2].push(listens);
            units.push(user_id(u));
            periods.push(i64::from(first.offset(m as i32).0));
            fixed.push(alpha + gamma);
        }
    }

    let z: BTreeMap<&str, Vec<f64>> = PANEL_VARIABLES
        .iter()
        .zip(&base)
        .map(|(&name, raw)| {
            let t: Vec<f64> = if PANEL_LOG_VARIABLES.contains(&name) {
                raw.iter().map(|x| (1.0 + x).ln()).collect()
            } else {
                raw.clone()
            };
            (name, zscore(&t))
        })
        .collect();
    let mut y = fixed;
    let mut coefficients = BTreeMap::new();
    let mut terms = Vec::new();
    for p in &cfg.planted {
        let term = Term::parse(&p.term)?;
        let value = |i: usize| match &term {
            Term::Var(v) => z[v.as_str()][i],
            Term::Square(v) => z[v.as_str()][i].powi(2),
            Term::Product(a, b) => z[a.as_str()][i] * z[b.as_str()][i],
        };
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += p.coefficient * value(i);
        }
        coefficients.insert(term.name(), p.coefficient);
        terms.push(term.name());
    }
    for yi in &mut y {
        *yi += cfg.noise_sd * std_normal.sample(&mut rng);
    }

    let mut panel = Panel::new(PANEL_OUTCOME, PANEL_VARIABLES);
    for i in 0..n {
        panel.push(PanelObservation {
            unit_id: units[i].clone(),
            period: periods[i],
            outcome: y[i],
            regressors: base.iter().map(|col| col[i]).collect(),
            cluster_id: None,
        })?;
    }
    Ok(SynthPanel {
        panel,
        truth: PanelTruth {
            outcome: PANEL_OUTCOME.into(),
            coefficients,
            terms,
            log_transform: PANEL_LOG_VARIABLES.iter().map(|s| s.to_string()).collect(),
            standardize: PANEL_VARIABLES.iter().map(|s| s.to_string()).collect(),
            noise_sd: cfg.noise_sd,
        },
    })
}

// ---------------------------------------------------------------------------
// Treatment panel

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidTruth {
    pub atet: f64,
    pub profile: EffectProfile,
    pub treatment_week: String,
    pub treatment_period: i64,
    pub pretrend_slope: f64,
    pub anticipation_weeks: usize,
    /// Planted effect per relative week (week minus treatment week).
    pub effects: BTreeMap<i64, f64>,
    pub control_coefficients: BTreeMap<String, f64>,
    pub treated_country: String,
    pub control_country: String,
    pub n_treated: usize,
    pub n_control: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDid {
    pub panel: DidPanel,
    /// Country of each unit.
    pub countries: BTreeMap<String, String>,
    pub truth: DidTruth,
}

/// Balanced weekly panel of treated-country and control-country units.
/// Periods are ISO week numbers ([`Week`]`.0`).
pub fn generate_did_panel(config: &SynthConfig) -> Result<SynthDid> {
    let cfg = &config.did;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let start: Week = cfg.start_week.parse()?;
    let t0 = cfg.treatment_index;
    let n_treated = cfg.n_treated();

    let week_effects: Vec<f64> = (0..cfg.weeks)
        .map(|_| cfg.period_effect_sd * std_normal.sample(&mut rng))
        .collect();
    let mut observations = Vec::with_capacity(cfg.n_units * cfg.weeks);
    let mut countries = BTreeMap::new();
    for u in 0..cfg.n_units {
        let treated = u < n_treated;
        let unit = user_id(u);
        countries.insert(
            unit.clone(),
            if treated { &cfg.treated_country } else { &cfg.control_country }.clone(),
        );
        let alpha = cfg.unit_effect_sd * std_normal.sample(&mut rng);
        let means = [std_normal.sample(&mut rng), std_normal.sample(&mut rng)];
        let mut prev: Option<[f64; 2]> = None;
        for (t, gamma) in week_effects.iter().enumerate() {
            let controls = [
                means[0] + std_normal.sample(&mut rng),
                means[1] + std_normal.sample(&mut rng),
            ];
            let mut y = alpha + gamma;
            if let Some(p) = prev {
                y += p.iter().zip(&cfg.control_coefficients).map(|(c, b)| c * b).sum::<f64>();
            }
            if treated {
                y += cfg.effect(t);
                if t < t0 {
                    y += cfg.pretrend_slope * (t as f64 - t0 as f64);
                }
            }
            y += cfg.noise_sd * std_normal.sample(&mut rng);
            observations.push(DidObservation {
                unit_id: unit.clone(),
                period: start.offset(t as i64).0,
                outcome: y,
                treated,
                controls: controls.to_vec(),
            });
            prev = Some(controls);
        }
    }
    let treatment = start.offset(t0 as i64);
    Ok(SynthDid {
        panel: DidPanel {
            control_names: DID_CONTROLS.iter().map(|s| s.to_string()).collect(),
            observations,
            treatment_period: treatment.0,
        },
        countries,
        truth: DidTruth {
            atet: cfg.atet,
            profile: cfg.profile,
            treatment_week: treatment.to_string(),
            treatment_period: treatment.0,
            pretrend_slope: cfg.pretrend_slope,
            anticipation_weeks: cfg.anticipation_weeks,
            effects: (0..cfg.weeks).map(|t| (t as i64 - t0 as i64, cfg.effect(t))).collect(),
            control_coefficients: DID_CONTROLS
                .iter()
                .zip(&cfg.control_coefficients)
                .map(|(n, c)| (n.to_string(), *c))
                .collect(),
            treated_country: cfg.treated_country.clone(),
            control_country: cfg.control_country.clone(),
            n_treated,
            n_control: cfg.n_units - n_treated,
        },
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::ingest::segment_sessions;

    fn small() -> SynthConfig {
        SynthConfig {
            n_users: 6,
            sessions_per_user: 30,
            months: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn validation() {
        assert!(SynthConfig::default().validate().is_ok());
        for bad in [
            SynthConfig { songs_per_artist: 0, ..small() },
            SynthConfig { within_genre_session_prob: 1.5, ..small() },
            SynthConfig { max_session_length: 1, ..small() },
            SynthConfig { sessions_per_user: 100_000, ..small() },
            SynthConfig { start_month: "2019-13".into(), ..small() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        let mut c = small();
        c.did.anticipation_weeks = 10;
        assert!(c.validate().is_err());
        let mut c = small();
        c.panel.planted[0].term = "nope".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn sessions_are_deterministic() {
        let a = generate_sessions(&small()).unwrap();
        let b = generate_sessions(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_sessions(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn resegmentation_recovers_planted_sessions() {
        let s = generate_sessions(&small()).unwrap();
        let mut start = 0;
        while start < s.events.len() {
            let user = &s.events[start].user_id;
            let end = start + s.events[start..].iter().take_while(|e| &e.user_id == user).count();
            let seg = segment_sessions(s.events[start..end].to_vec(), 300);
            assert_eq!(seg.session_ids, s.session_ids[start..end]);
            assert_eq!(seg.overlaps, 0);
            start = end;
        }
    }

    #[test]
    fn full_loyalty_gives_single_genre_sessions() {
        let cfg = SynthConfig {
            within_genre_session_prob: 1.0,
            ..small()
        };
        let s = generate_sessions(&cfg).unwrap();
        let mut genres: BTreeMap<(String, u32), BTreeSet<usize>> = BTreeMap::new();
        for (e, sid) in s.events.iter().zip(&s.session_ids) {
            genres
                .entry((e.user_id.clone(), *sid))
                .or_default()
                .insert(s.truth.track_genre[&e.track_id]);
        }
        assert!(genres.values().all(|g| g.len() == 1));
    }

    #[test]
    fn events_lie_in_window_and_openers_are_long() {
        let cfg = small();
        let (lo, hi) = cfg.window().unwrap();
        let s = generate_sessions(&cfg).unwrap();
        for (i, e) in s.events.iter().enumerate() {
            assert!(e.start >= lo && e.end() < hi);
            let opener = i == 0 || s.session_ids[i - 1] != s.session_ids[i] || s.events[i - 1].user_id != e.user_id;
            if opener {
                assert!(e.duration >= 60);
            }
        }
    }

    #[test]
    fn panel_is_balanced_and_deterministic() {
        let mut cfg = small();
        cfg.panel.n_users = 20;
        cfg.panel.months = 5;
        let a = generate_panel(&cfg).unwrap();
        assert_eq!(a, generate_panel(&cfg).unwrap());
        assert_eq!(a.panel.len(), 100);
        assert_eq!(a.truth.coefficients["travel^2"], -0.25);
    }

    #[test]
    fn did_effect_profiles() {
        let mut d = DidSynth {
            treatment_index: 5,
            ..DidSynth::default()
        };
        assert_eq!(d.effect(4), 0.0);
        assert_eq!(d.effect(5), 0.023);
        d.anticipation_weeks = 2;
        assert_eq!(d.effect(3), 0.023);
        assert_eq!(d.effect(2), 0.0);
        d.anticipation_weeks = 0;
        d.profile = EffectProfile::Ramp { weeks: 4 };
        assert!((d.effect(5) - 0.023 / 4.0).abs() < 1e-15);
        assert_eq!(d.effect(8), 0.023);
        assert_eq!(d.effect(20), 0.023);
    }

    #[test]
    fn did_panel_shape() {
        let mut cfg = small();
        cfg.did.n_units = 10;
        let d = generate_did_panel(&cfg).unwrap();
        assert_eq!(d.panel.observations.len(), 10 * 20);
        assert_eq!(d.truth.n_treated, 5);
        assert_eq!(d.truth.treatment_week, "2020-W12");
        assert_eq!(d.truth.effects[&-1], 0.0);
        assert_eq!(d.truth.effects[&0], 0.023);
        assert_eq!(d.countries["u00000"], "FR");
    }
}
