use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tastetrace::calendar::Week;
use tastetrace::econ::Term;
use tastetrace::embed::TrainingConfig;
use tastetrace::ingest::LogSchema;
use tastetrace::metrics::MetricOptions;
use tastetrace::synth::SynthConfig;
use tastetrace::taste::AggregationOptions;

use crate::exit::{config_error, Failure};

pub const OUTPUT_DIR_ENV: &str = "TASTETRACE_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds training and the synthetic generators; overrides `train.seed`
    /// and `synth.seed`.
    pub seed: u64,
    /// Worker threads; overrides `train.workers`.
    pub workers: usize,
    pub output_dir: PathBuf,
    pub input: InputConfig,
    pub ingest: IngestConfig,
    pub train: TrainingConfig,
    pub taste: AggregationOptions,
    pub metrics: MetricOptions,
    pub regress: RegressConfig,
    pub did: DidConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            workers: 1,
            output_dir: PathBuf::from("tastetrace-out"),
            input: InputConfig::default(),
            ingest: IngestConfig::default(),
            train: TrainingConfig::default(),
            taste: AggregationOptions::default(),
            metrics: MetricOptions::default(),
            regress: RegressConfig::default(),
            did: DidConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Raw inputs. When `log` is unset the pipeline runs on the `synth` stage's
/// output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub log: Option<PathBuf>,
    pub gazetteer: Option<PathBuf>,
    pub tracks: Option<PathBuf>,
    pub schema: LogSchema,
    /// Observation window as `YYYY-MM-DD` dates, end exclusive.
    pub window_start: Option<String>,
    pub window_end: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub session_gap_seconds: i64,
    pub training_min_duration: u32,
    pub metric_min_duration: u32,
    pub max_malformed_fraction: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            session_gap_seconds: tastetrace::ingest::SESSION_GAP_SECONDS,
            training_min_duration: tastetrace::ingest::TRAINING_MIN_DURATION,
            metric_min_duration: tastetrace::ingest::METRIC_MIN_DURATION,
            max_malformed_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    /// `user_month` or `user_city_month`, or a path to a tab-separated panel.
    pub table: String,
    pub unit_column: String,
    pub period_column: String,
    pub outcome: String,
    /// `x`, `x^2` or `a*b`.
    pub terms: Vec<String>,
    pub log_transform: Vec<String>,
    /// Variables to z-score; all model variables when unset.
    pub standardize: Option<Vec<String>>,
    pub unit_effects: bool,
    pub period_effects: bool,
    pub small_sample_correction: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            name: String::new(),
            table: "user_month".into(),
            unit_column: "user_id".into(),
            period_column: "month".into(),
            outcome: "taste_exploration".into(),
            terms: Vec::new(),
            log_transform: Vec::new(),
            standardize: None,
            unit_effects: true,
            period_effects: true,
            small_sample_correction: true,
        }
    }
}

impl ModelConfig {
    pub fn parsed_terms(&self) -> tastetrace::Result<Vec<Term>> {
        self.terms.iter().map(|t| Term::parse(t)).collect()
    }

    /// Base variables referenced by the terms, in first-use order.
    pub fn base_variables(&self) -> tastetrace::Result<Vec<String>> {
        let mut out: Vec<String> = Vec::new();
        for t in self.parsed_terms()? {
            let vars = match t {
                Term::Var(v) | Term::Square(v) => vec![v],
                Term::Product(a, b) => vec![a, b],
            };
            for v in vars {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressConfig {
    pub models: Vec<ModelConfig>,
}

impl Default for RegressConfig {
    fn default() -> Self {
        let controls = ["listening_count", "algorithmic_guidedness", "mean_song_recency"];
        let exploration = |name: &str, extra: &[&str]| ModelConfig {
            name: name.into(),
            terms: controls.iter().chain(extra).map(|s| s.to_string()).collect(),
            log_transform: vec!["listening_count".into(), "travel_distance_km".into()],
            ..ModelConfig::default()
        };
        RegressConfig {
            models: vec![
                exploration("exploration_1", &[]),
                exploration("exploration_2", &["travel_distance_km"]),
                exploration("exploration_3", &["travel_distance_km", "travel_distance_km^2"]),
                exploration(
                    "exploration_4",
                    &[
                        "travel_distance_km",
                        "travel_distance_km^2",
                        "travel_distance_km*algorithmic_guidedness",
                    ],
                ),
                ModelConfig {
                    name: "adaptation_1".into(),
                    table: "user_city_month".into(),
                    outcome: "taste_adaptation".into(),
                    terms: vec!["taste_distance_to_city".into(), "geo_distance_to_city_km".into()],
                    log_transform: vec!["geo_distance_to_city_km".into()],
                    ..ModelConfig::default()
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DidConfig {
    /// Weekly panel; the `metrics` stage's user-week table when unset.
    pub panel: Option<PathBuf>,
    pub unit_column: String,
    pub period_column: String,
    pub country_column: String,
    pub outcome: String,
    pub controls: Vec<String>,
    pub log_transform: Vec<String>,
    pub standardize: bool,
    pub treated_countries: Vec<String>,
    /// Every other country when empty.
    pub control_countries: Vec<String>,
    /// First treated ISO week, `YYYY-Www`.
    pub treatment_week: String,
    /// Weeks kept on each side of the treatment week.
    pub window_weeks: i64,
    pub n_leads: usize,
}

impl Default for DidConfig {
    fn default() -> Self {
        DidConfig {
            panel: None,
            unit_column: "user_id".into(),
            period_column: "week".into(),
            country_column: "country_id".into(),
            outcome: "taste_exploration".into(),
            controls: vec![
                "listening_count".into(),
                "algorithmic_guidedness".into(),
                "mean_song_recency".into(),
            ],
            log_transform: vec!["listening_count".into()],
            standardize: true,
            treated_countries: vec!["K00".into()],
            control_countries: Vec::new(),
            treatment_week: "2020-W12".into(),
            window_weeks: 10,
            n_leads: 2,
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML file; relative input paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        let mut config: PipelineConfig =
            toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            config.input.log.as_mut(),
            config.input.gazetteer.as_mut(),
            config.input.tracks.as_mut(),
            config.did.panel.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        resolve(&mut config.output_dir);
        for m in &mut config.regress.models {
            if m.table.ends_with(".tsv") && Path::new(&m.table).is_relative() {
                m.table = base.join(&m.table).to_string_lossy().into_owned();
            }
        }
        Ok(config)
    }

    /// Applies command-line and environment overrides, then validates.
    pub fn finish(mut self, seed: Option<u64>, workers: Option<usize>) -> Result<Self, Failure> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(w) = workers {
            self.workers = w;
        }
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            self.output_dir = PathBuf::from(dir);
        }
        self.train.seed = self.seed;
        self.train.workers = self.workers;
        self.synth.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn uses_synth(&self) -> bool {
        self.input.log.is_none()
    }

    fn validate(&self) -> Result<(), Failure> {
        let field = |path: &str, msg: String| config_error(format!("{path}: {msg}"));
        if self.workers == 0 {
            return Err(field("workers", "must be >= 1".into()));
        }
        if let Some(log) = &self.input.log {
            if !log.is_file() {
                return Err(field("input.log", format!("{} does not exist", log.display())));
            }
            if self.input.gazetteer.is_none() {
                return Err(field("input.gazetteer", "required when input.log is set".into()));
            }
        }
        for (name, p) in [
            ("input.gazetteer", &self.input.gazetteer),
            ("input.tracks", &self.input.tracks),
            ("did.panel", &self.did.panel),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(field(name, format!("{} does not exist", p.display())));
                }
            }
        }
        for (name, d) in [("input.window_start", &self.input.window_start), ("input.window_end", &self.input.window_end)] {
            if let Some(d) = d {
                chrono::NaiveDate::parse_from_str(d, "%Y-%m-%d")
                    .map_err(|e| field(name, format!("`{d}`: {e}")))?;
            }
        }
        if self.ingest.session_gap_seconds < 0 {
            return Err(field("ingest.session_gap_seconds", "must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ingest.max_malformed_fraction) {
            return Err(field("ingest.max_malformed_fraction", "must be in [0, 1]".into()));
        }
        self.train.validate().map_err(|e| field("train", e.to_string()))?;
        if self.uses_synth() {
            self.synth.validate().map_err(|e| field("synth", e.to_string()))?;
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, m) in self.regress.models.iter().enumerate() {
            let path = format!("regress.models[{i}]");
            if m.name.is_empty() || !names.insert(&m.name) {
                return Err(field(&format!("{path}.name"), "must be non-empty and unique".into()));
            }
            if m.terms.is_empty() {
                return Err(field(&format!("{path}.terms"), "must not be empty".into()));
            }
            m.parsed_terms().map_err(|e| field(&format!("{path}.terms"), e.to_string()))?;
            let is_path = m.table.ends_with(".tsv");
            if !is_path && !["user_month", "user_city_month"].contains(&m.table.as_str()) {
                return Err(field(&format!("{path}.table"), format!("unknown table `{}`", m.table)));
            }
            if is_path && !Path::new(&m.table).is_file() {
                return Err(field(&format!("{path}.table"), format!("{} does not exist", m.table)));
            }
        }
        let d = &self.did;
        d.treatment_week
            .parse::<Week>()
            .map_err(|e| field("did.treatment_week", e.to_string()))?;
        if d.treated_countries.is_empty() {
            return Err(field("did.treated_countries", "must not be empty".into()));
        }
        if d.control_countries.iter().any(|c| d.treated_countries.contains(c)) {
            return Err(field("did.control_countries", "overlaps did.treated_countries".into()));
        }
        if d.n_leads == 0 {
            return Err(field("did.n_leads", "must be >= 1".into()));
        }
        if d.window_weeks < 2 {
            return Err(field("did.window_weeks", "must be >= 2".into()));
        }
        Ok(())
    }

    /// Observation window in UTC seconds.
    pub fn window(&self) -> Option<(i64, i64)> {
        let parse = |d: &Option<String>| {
            d.as_ref()
                .and_then(|s| chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").ok())
                .map(tastetrace::calendar::timestamp_of)
        };
        match (parse(&self.input.window_start), parse(&self.input.window_end)) {
            (None, None) => None,
            (s, e) => Some((s.unwrap_or(i64::MIN), e.unwrap_or(i64::MAX))),
        }
    }
}
