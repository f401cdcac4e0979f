use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};
use tastetrace::calendar::{Month, Week};
use tastetrace::econ::{
    coefficient_table, did_analysis, did_estimate, fe_ols, DidSpec, Estimate, FitResult, ModelSpec,
};
use tastetrace::embed::{artist_similarity_report, build_vocabulary, train_s2v, EmbeddingSpace};
use tastetrace::geo::Gazetteer;
use tastetrace::ingest::{
    filter_streams, join_track_metadata, parse_stream_log, parse_track_metadata, sessionize_all, write_stream_log,
    write_track_metadata, LogSchema, ParseOptions, StreamEvent,
};
use tastetrace::metrics::{
    compute_user_city_month_metrics, compute_user_month_metrics, compute_user_week_metrics, user_city_month_table,
    user_month_table, user_week_table,
};
use tastetrace::store::VectorStore;
use tastetrace::synth::{generate_did_panel, generate_panel, generate_sessions, DID_CONTROLS, PANEL_VARIABLES};
use tastetrace::table::Table;
use tastetrace::taste::{
    build_location_vectors, build_user_city_month_vectors, build_user_home_vectors, build_user_month_vectors, build_user_overall_vectors,
    build_user_week_vectors, primary_homes, yearly_homes, TasteKey, TasteVector,
};

use crate::artifact::{
    digest_all, outputs_intact, read_manifest, sha256_json, write_atomic, write_json,
    Manifest, MANIFEST,
};
use crate::config::PipelineConfig;
use crate::exit::Failure;
use crate::panels::{did_panel, model_panel, parse_period};
use crate::plot::{Chart, Point, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Ingest,
    Train,
    Vectors,
    Metrics,
    Regress,
    Did,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Train,
        Stage::Vectors,
        Stage::Metrics,
        Stage::Regress,
        Stage::Did,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Train => "train",
            Stage::Vectors => "vectors",
            Stage::Metrics => "metrics",
            Stage::Regress => "regress",
            Stage::Did => "did",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this stage reads, in pipeline order.
    pub fn dependencies(self, config: &PipelineConfig) -> Vec<Stage> {
        match self {
            Stage::Synth => vec![],
            Stage::Ingest if config.uses_synth() => vec![Stage::Synth],
            Stage::Ingest => vec![],
            Stage::Train => vec![Stage::Ingest],
            Stage::Vectors => vec![Stage::Ingest, Stage::Train],
            Stage::Metrics => vec![Stage::Ingest, Stage::Vectors],
            Stage::Regress => vec![Stage::Metrics],
            Stage::Did if config.did.panel.is_some() => vec![],
            Stage::Did => vec![Stage::Metrics],
            Stage::Report => vec![Stage::Metrics, Stage::Regress, Stage::Did],
        }
    }

    /// Stages `run all` executes.
    pub fn pipeline(config: &PipelineConfig) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| *s != Stage::Synth || config.uses_synth())
            .collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

pub struct Runner<'a> {
    config: &'a PipelineConfig,
    root: PathBuf,
    config_hash: String,
}

fn stage_table(path: &Path) -> anyhow::Result<Table> {
    Table::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write_table(path: &Path, table: &Table) -> anyhow::Result<()> {
    write_atomic(path, |w| Ok(table.write(w)?))
}

fn write_store(path: &Path, store: &VectorStore) -> anyhow::Result<()> {
    write_atomic(path, |w| Ok(store.write(w)?))
}

fn read_store(path: &Path) -> anyhow::Result<VectorStore> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(VectorStore::read(std::io::BufReader::new(f))?)
}

fn error_json(e: impl fmt::Display) -> Value {
    json!({ "error": e.to_string() })
}

/// Events in file order grouped into session token lists.
fn sessions_of(events: &[StreamEvent], ids: &[u32]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    let mut last: Option<(&str, u32)> = None;
    for (e, &sid) in events.iter().zip(ids) {
        let key = (e.user_id.as_str(), sid);
        if last != Some(key) {
            out.push(Vec::new());
            last = Some(key);
        }
        if let Some(s) = out.last_mut() {
            s.push(e.track_id.clone());
        }
    }
    out
}

fn taste_store<'a, I>(vectors: I, dimension: usize) -> anyhow::Result<VectorStore>
where
    I: IntoIterator<Item = &'a TasteVector>,
{
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for tv in vectors {
        ids.push(tv.key.label());
        values.extend(tv.vector.iter().map(|&v| v as f32));
    }
    Ok(VectorStore::new(dimension, ids, values)?)
}

/// Taste vectors read back from a store, keyed by their parsed keys.
fn load_taste(path: &Path, support: &HashMap<String, usize>) -> anyhow::Result<Vec<TasteVector>> {
    let store = read_store(path)?;
    (0..store.ids.len())
        .map(|i| {
            let label = &store.ids[i];
            Ok(TasteVector {
                key: TasteKey::parse_label(label)?,
                vector: store.row(i).iter().map(|&v| f64::from(v)).collect(),
                support: support.get(label).copied().unwrap_or(0),
            })
        })
        .collect()
}

fn estimates(fit: &FitResult) -> BTreeMap<String, Value> {
    fit.names
        .iter()
        .filter(|n| !n.starts_with("period["))
        .filter_map(|n| fit.estimate(n).ok().map(|e| (n.clone(), estimate_json(&e))))
        .collect()
}

fn estimate_json(e: &Estimate) -> Value {
    json!({ "coefficient": e.coefficient, "std_error": e.std_error, "p_value": e.p_value })
}

fn fit_summary(fit: &FitResult) -> Value {
    json!({
        "estimates": estimates(fit),
        "dropped": fit.dropped,
        "r2_within": fit.r2_within,
        "r2_between": fit.r2_between,
        "r2_overall": fit.r2_overall,
        "n_obs": fit.n_obs,
        "n_units": fit.n_units,
        "n_clusters": fit.n_clusters,
        "small_sample_factor": fit.small_sample_factor,
    })
}

#[derive(Serialize)]
struct Timing<'a> {
    stage: &'a str,
    seconds: f64,
    up_to_date: bool,
}

impl<'a> Runner<'a> {
    pub fn new(config: &'a PipelineConfig) -> anyhow::Result<Self> {
        let mut hashed = config.clone();
        hashed.output_dir = PathBuf::new();
        Ok(Runner {
            config,
            root: config.output_dir.clone(),
            config_hash: sha256_json(&hashed)?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    fn path(&self, stage: Stage, file: &str) -> PathBuf {
        self.dir(stage).join(file)
    }

    /// Direct dependencies and everything they depend on, in pipeline order.
    fn ancestors(&self, stage: Stage) -> Vec<Stage> {
        let mut all = Vec::new();
        let mut stack = stage.dependencies(self.config);
        while let Some(s) = stack.pop() {
            if !all.contains(&s) {
                all.push(s);
                stack.extend(s.dependencies(self.config));
            }
        }
        all.sort();
        all
    }

    /// Manifests of the direct dependencies; fails naming the earliest
    /// upstream stage without intact outputs.
    fn check_upstream(&self, stage: Stage) -> Result<Vec<Manifest>, Failure> {
        let direct = stage.dependencies(self.config);
        let mut manifests = Vec::new();
        for dep in self.ancestors(stage) {
            let detail = match read_manifest(&self.dir(dep)) {
                None => format!("no manifest under {}", self.dir(dep).display()),
                Some(m) if !outputs_intact(&self.root, &m) => {
                    format!("outputs under {} changed since it ran", self.dir(dep).display())
                }
                Some(m) => {
                    if direct.contains(&dep) {
                        manifests.push(m);
                    }
                    continue;
                }
            };
            return Err(Failure::MissingUpstream {
                stage: dep.name().into(),
                detail,
            });
        }
        Ok(manifests)
    }

    fn external_inputs(&self, stage: Stage) -> Vec<PathBuf> {
        let c = self.config;
        let mut out = Vec::new();
        match stage {
            Stage::Ingest => {
                out.extend(c.input.log.clone());
                out.extend(c.input.tracks.clone());
            }
            Stage::Vectors | Stage::Metrics => out.extend(c.input.gazetteer.clone()),
            Stage::Regress => out.extend(
                c.regress
                    .models
                    .iter()
                    .filter(|m| m.table.ends_with(".tsv"))
                    .map(|m| PathBuf::from(&m.table)),
            ),
            Stage::Did => out.extend(c.did.panel.clone()),
            _ => {}
        }
        out.sort();
        out.dedup();
        out
    }

    /// Runs one stage, skipping it when its manifest shows the same
    /// configuration, inputs and intact outputs.
    pub fn run(&self, stage: Stage) -> Result<Outcome, Failure> {
        let started = Instant::now();
        let upstream = self.check_upstream(stage)?;
        let mut inputs = BTreeMap::new();
        for m in &upstream {
            inputs.extend(m.outputs.clone());
        }
        inputs.extend(digest_all(&self.root, &self.external_inputs(stage))?);
        let mut manifest = Manifest {
            stage: stage.name().into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
            workers: self.config.workers,
            inputs,
            outputs: BTreeMap::new(),
        };
        let dir = self.dir(stage);
        let outcome = match read_manifest(&dir) {
            Some(old)
                if Manifest {
                    outputs: BTreeMap::new(),
                    ..old.clone()
                } == manifest
                    && outputs_intact(&self.root, &old) =>
            {
                log::info!("{stage}: up to date");
                Outcome::UpToDate
            }
            _ => {
                if dir.exists() {
                    fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
                }
                fs::create_dir_all(&dir)?;
                log::info!("{stage}: running");
                let mut outputs = match stage {
                    Stage::Synth => self.synth(),
                    Stage::Ingest => self.ingest(),
                    Stage::Train => self.train(),
                    Stage::Vectors => self.vectors(),
                    Stage::Metrics => self.metrics(),
                    Stage::Regress => self.regress(),
                    Stage::Did => self.did(),
                    Stage::Report => self.report(),
                }
                .with_context(|| format!("stage `{stage}`"))?;
                outputs.sort();
                manifest.outputs = digest_all(&self.root, &outputs)?;
                write_json(&dir.join(MANIFEST), &manifest)?;
                Outcome::Ran
            }
        };
        write_json(
            &self.root.join("timings").join(format!("{stage}.json")),
            &Timing {
                stage: stage.name(),
                seconds: started.elapsed().as_secs_f64(),
                up_to_date: outcome == Outcome::UpToDate,
            },
        )?;
        Ok(outcome)
    }

    fn gazetteer_path(&self) -> PathBuf {
        self.config
            .input
            .gazetteer
            .clone()
            .unwrap_or_else(|| self.path(Stage::Synth, "cities.tsv"))
    }

    fn read_streams(&self, file: &str) -> anyhow::Result<(Vec<StreamEvent>, Vec<u32>)> {
        let path = self.path(Stage::Ingest, file);
        let parsed = parse_stream_log(
            &path,
            &LogSchema::default().sessionized(),
            ParseOptions {
                max_malformed_fraction: 0.0,
                window: None,
            },
        )?;
        let ids = parsed.session_ids.context("session ids missing")?;
        Ok((parsed.events, ids))
    }

    fn synth(&self) -> anyhow::Result<Vec<PathBuf>> {
        let cfg = &self.config.synth;
        let mut out = Vec::new();
        let sessions = generate_sessions(cfg)?;
        let p = self.path(Stage::Synth, "streams.tsv");
        write_atomic(&p, |w| Ok(write_stream_log(w, &LogSchema::default(), &sessions.events, None)?))?;
        out.push(p);
        let p = self.path(Stage::Synth, "tracks.tsv");
        write_atomic(&p, |w| Ok(write_track_metadata(w, &sessions.tracks)?))?;
        out.push(p);
        let p = self.path(Stage::Synth, "cities.tsv");
        let gaz = Gazetteer::new(sessions.cities.clone())?;
        write_atomic(&p, |w| Ok(gaz.write(w)?))?;
        out.push(p);
        let p = self.path(Stage::Synth, "sessions_truth.json");
        write_json(&p, &sessions.truth)?;
        out.push(p);

        let panel = generate_panel(cfg)?;
        let mut t = Table::new(["user_id", "month", "exploration"].into_iter().chain(PANEL_VARIABLES));
        for i in 0..panel.panel.len() {
            let mut row = vec![
                panel.panel.units[i].clone(),
                Month(i32::try_from(panel.panel.periods[i])?).to_string(),
                panel.panel.outcome[i].to_string(),
            ];
            for name in PANEL_VARIABLES {
                row.push(panel.panel.variable(name)?[i].to_string());
            }
            t.push(row);
        }
        let p = self.path(Stage::Synth, "panel.tsv");
        write_table(&p, &t)?;
        out.push(p);
        let p = self.path(Stage::Synth, "panel_truth.json");
        write_json(&p, &panel.truth)?;
        out.push(p);

        let did = generate_did_panel(cfg)?;
        let mut t = Table::new(
            ["user_id", "week", "country_id", "taste_exploration"]
                .into_iter()
                .chain(DID_CONTROLS),
        );
        for o in &did.panel.observations {
            let mut row = vec![
                o.unit_id.clone(),
                Week(o.period).to_string(),
                did.countries.get(&o.unit_id).cloned().unwrap_or_default(),
                o.outcome.to_string(),
            ];
            row.extend(o.controls.iter().map(|v| v.to_string()));
            t.push(row);
        }
        let p = self.path(Stage::Synth, "did_panel.tsv");
        write_table(&p, &t)?;
        out.push(p);
        let p = self.path(Stage::Synth, "did_truth.json");
        write_json(&p, &did.truth)?;
        out.push(p);
        Ok(out)
    }

    fn ingest(&self) -> anyhow::Result<Vec<PathBuf>> {
        let c = self.config;
        let synth = c.uses_synth();
        let log_path = c.input.log.clone().unwrap_or_else(|| self.path(Stage::Synth, "streams.tsv"));
        let schema = if synth { LogSchema::default() } else { c.input.schema.clone() };
        let window = match c.window() {
            Some(w) => Some(w),
            None if synth => Some(c.synth.window()?),
            None => None,
        };
        let parsed = parse_stream_log(
            &log_path,
            &schema,
            ParseOptions {
                max_malformed_fraction: c.ingest.max_malformed_fraction,
                window,
            },
        )?;
        let mut events = parsed.events;
        let tracks = match &c.input.tracks {
            Some(p) => Some(p.clone()),
            None if synth => Some(self.path(Stage::Synth, "tracks.tsv")),
            None => None,
        };
        let missing_release = match tracks {
            Some(p) => join_track_metadata(&mut events, &parse_track_metadata(&p)?),
            None => events.iter().filter(|e| e.release_date.is_none()).count(),
        };
        let mut out = Vec::new();
        let mut report = json!({ "parse": parsed.report, "missing_release_date": missing_release });
        for (name, min) in [
            ("training", c.ingest.training_min_duration),
            ("metric", c.ingest.metric_min_duration),
        ] {
            let (kept, filter) = filter_streams(events.clone(), min);
            let (users, sessions) = sessionize_all(kept, c.ingest.session_gap_seconds);
            let mut evs = Vec::new();
            let mut ids = Vec::new();
            for u in users {
                evs.extend(u.events);
                ids.extend(u.session_ids);
            }
            let p = self.path(Stage::Ingest, &format!("{name}_streams.tsv"));
            write_atomic(&p, |w| Ok(write_stream_log(w, &LogSchema::default(), &evs, Some(&ids))?))?;
            out.push(p);
            report[name] = json!({ "min_duration": min, "filter": filter, "sessions": sessions });
        }
        let p = self.path(Stage::Ingest, "report.json");
        write_json(&p, &report)?;
        out.push(p);
        Ok(out)
    }

    fn train(&self) -> anyhow::Result<Vec<PathBuf>> {
        let (events, ids) = self.read_streams("training_streams.tsv")?;
        let sessions = sessions_of(&events, &ids);
        let corpus = build_vocabulary(&sessions, self.config.train.min_count)?;
        let space = train_s2v(&corpus, &self.config.train)?;
        let mut out = Vec::new();
        let store = VectorStore::new(space.dimension(), space.vocabulary().to_vec(), space.raw_vectors().to_vec())?;
        let p = self.path(Stage::Train, "songs.s2vb");
        write_store(&p, &store)?;
        out.push(p);
        let mut loss = Table::new(["epoch", "loss"]);
        for (i, l) in space.loss_trace.iter().enumerate() {
            loss.push(vec![(i + 1).to_string(), l.to_string()]);
        }
        let p = self.path(Stage::Train, "loss.tsv");
        write_table(&p, &loss)?;
        out.push(p);
        let artists: HashMap<String, String> = events
            .iter()
            .map(|e| (e.track_id.clone(), e.artist_id.clone()))
            .collect();
        let similarity = match artist_similarity_report(&space, &artists) {
            Ok(s) => serde_json::to_value(s)?,
            Err(e) => error_json(e),
        };
        let report = json!({
            "sessions": corpus.sessions.len(),
            "vocabulary": corpus.vocabulary.len(),
            "tokens": corpus.tokens(),
            "dimension": space.dimension(),
            "zero_vectors": space.zero_vectors().len(),
            "artist_similarity": similarity,
        });
        let p = self.path(Stage::Train, "report.json");
        write_json(&p, &report)?;
        out.push(p);
        Ok(out)
    }

    fn space(&self) -> anyhow::Result<EmbeddingSpace> {
        let store = read_store(&self.path(Stage::Train, "songs.s2vb"))?;
        Ok(EmbeddingSpace::from_parts(store.dimension, store.ids, store.values)?)
    }

    fn vectors(&self) -> anyhow::Result<Vec<PathBuf>> {
        let (events, _) = self.read_streams("metric_streams.tsv")?;
        let space = self.space()?;
        let gaz = Gazetteer::load(&self.gazetteer_path())?;
        let opts = self.config.taste;
        let dim = space.dimension();
        let homes = primary_homes(&events)?;
        let home_city: BTreeMap<String, String> =
            homes.iter().map(|(u, h)| (u.clone(), h.home_city_id.clone())).collect();
        let um = build_user_month_vectors(&events, &space, opts);
        let uw = build_user_week_vectors(&events, &space, opts);
        let ucm = build_user_city_month_vectors(&events, &space, opts);
        let uh = build_user_home_vectors(&events, &space, &home_city, opts);
        let overall = build_user_overall_vectors(&events, &space, opts);
        let loc = build_location_vectors(&overall.vectors, &home_city, &gaz)?;

        let mut out = Vec::new();
        let mut support = Table::new(["key", "support"]);
        let mut counts = BTreeMap::new();
        let sets: [(&str, Vec<&TasteVector>, usize, usize); 7] = [
            ("user_month", um.vectors.values().collect(), um.out_of_vocabulary, um.degenerate),
            ("user_week", uw.vectors.values().collect(), uw.out_of_vocabulary, uw.degenerate),
            ("user_city_month", ucm.vectors.values().collect(), ucm.out_of_vocabulary, ucm.degenerate),
            ("user_home", uh.vectors.values().collect(), uh.out_of_vocabulary, uh.degenerate),
            ("user_overall", overall.vectors.values().collect(), overall.out_of_vocabulary, overall.degenerate),
            ("city", loc.cities.values().collect(), 0, 0),
            ("country", loc.countries.values().collect(), 0, 0),
        ];
        for (name, vs, oov, degenerate) in sets {
            for tv in &vs {
                support.push(vec![tv.key.label(), tv.support.to_string()]);
            }
            counts.insert(name, json!({ "vectors": vs.len(), "out_of_vocabulary": oov, "degenerate": degenerate }));
            let p = self.path(Stage::Vectors, &format!("{name}.s2vb"));
            write_store(&p, &taste_store(vs, dim)?)?;
            out.push(p);
        }
        let p = self.path(Stage::Vectors, "support.tsv");
        write_table(&p, &support)?;
        out.push(p);

        let mut home_table = Table::new(["user_id", "year", "home_city_id"]);
        for (user, h) in &homes {
            home_table.push(vec![user.clone(), "all".into(), h.home_city_id.clone()]);
        }
        for ((user, year), h) in yearly_homes(&events)? {
            home_table.push(vec![user, year.to_string(), h.home_city_id]);
        }
        let p = self.path(Stage::Vectors, "homes.tsv");
        write_table(&p, &home_table)?;
        out.push(p);
        let p = self.path(Stage::Vectors, "report.json");
        write_json(&p, &json!({ "sets": counts, "unlocated_cities": loc.unlocated_cities }))?;
        out.push(p);
        Ok(out)
    }

    fn metrics(&self) -> anyhow::Result<Vec<PathBuf>> {
        let (events, _) = self.read_streams("metric_streams.tsv")?;
        let gaz = Gazetteer::load(&self.gazetteer_path())?;
        let support_table = stage_table(&self.path(Stage::Vectors, "support.tsv"))?;
        let support: HashMap<String, usize> = support_table
            .rows
            .iter()
            .filter_map(|r| Some((r[0].clone(), r[1].parse().ok()?)))
            .collect();
        let load = |name: &str| load_taste(&self.path(Stage::Vectors, &format!("{name}.s2vb")), &support);
        let missing = |what: &str| anyhow::anyhow!("vector key without {what}");

        let mut um = BTreeMap::new();
        for tv in load("user_month")? {
            let k = (tv.key.user_id.clone().ok_or_else(|| missing("user"))?, tv.key.month.ok_or_else(|| missing("month"))?);
            um.insert(k, tv);
        }
        let mut uw = BTreeMap::new();
        for tv in load("user_week")? {
            let k = (tv.key.user_id.clone().ok_or_else(|| missing("user"))?, tv.key.week.ok_or_else(|| missing("week"))?);
            uw.insert(k, tv);
        }
        let mut ucm = BTreeMap::new();
        for tv in load("user_city_month")? {
            let k = (
                tv.key.user_id.clone().ok_or_else(|| missing("user"))?,
                tv.key.city_id.clone().ok_or_else(|| missing("city"))?,
                tv.key.month.ok_or_else(|| missing("month"))?,
            );
            ucm.insert(k, tv);
        }
        let mut uh = BTreeMap::new();
        for tv in load("user_home")? {
            uh.insert(tv.key.user_id.clone().ok_or_else(|| missing("user"))?, tv);
        }
        let mut cities = BTreeMap::new();
        for tv in load("city")? {
            cities.insert(tv.key.city_id.clone().ok_or_else(|| missing("city"))?, tv);
        }
        let mut countries = BTreeMap::new();
        for tv in load("country")? {
            countries.insert(tv.key.country_id.clone().ok_or_else(|| missing("country"))?, tv);
        }

        let homes = primary_homes(&events)?;
        let yearly = yearly_homes(&events)?;
        let opts = &self.config.metrics;
        let (month_rows, month_report) = compute_user_month_metrics(&events, &um, &yearly, &gaz, opts)?;
        let (city_rows, city_report) = compute_user_city_month_metrics(&ucm, &uh, &homes, &cities, &gaz)?;
        let (week_rows, week_report) = compute_user_week_metrics(&events, &uw, &homes, &countries, &gaz, opts)?;

        let mut out = Vec::new();
        for (name, table) in [
            ("user_month.tsv", user_month_table(&month_rows)),
            ("user_city_month.tsv", user_city_month_table(&city_rows)),
            ("user_week.tsv", user_week_table(&week_rows)),
        ] {
            let p = self.path(Stage::Metrics, name);
            write_table(&p, &table)?;
            out.push(p);
        }
        let p = self.path(Stage::Metrics, "report.json");
        write_json(
            &p,
            &json!({
                "window": opts.window.as_str(),
                "user_month": month_report,
                "user_city_month": city_report,
                "user_week": week_report,
            }),
        )?;
        out.push(p);
        Ok(out)
    }

    fn regress(&self) -> anyhow::Result<Vec<PathBuf>> {
        let mut tables: BTreeMap<String, Table> = BTreeMap::new();
        let mut fits: Vec<(String, FitResult)> = Vec::new();
        let mut results = BTreeMap::new();
        for model in &self.config.regress.models {
            let path = if model.table.ends_with(".tsv") {
                PathBuf::from(&model.table)
            } else {
                self.path(Stage::Metrics, &format!("{}.tsv", model.table))
            };
            let key = path.to_string_lossy().into_owned();
            if !tables.contains_key(&key) {
                tables.insert(key.clone(), stage_table(&path)?);
            }
            let fitted = (|| -> anyhow::Result<_> {
                let (panel, sample) = model_panel(&tables[&key], model)?;
                let spec = ModelSpec {
                    terms: model.parsed_terms()?,
                    unit_effects: model.unit_effects,
                    period_effects: model.period_effects,
                    small_sample_correction: model.small_sample_correction,
                };
                Ok((fe_ols(&panel, &spec)?, sample))
            })();
            let entry = match fitted {
                Ok((fit, sample)) => {
                    let mut v = fit_summary(&fit);
                    v["sample"] = serde_json::to_value(&sample)?;
                    fits.push((model.name.clone(), fit));
                    v
                }
                Err(e) => {
                    log::warn!("model {}: {e:#}", model.name);
                    error_json(format!("{e:#}"))
                }
            };
            results.insert(model.name.clone(), entry);
        }
        let refs: Vec<(String, &FitResult)> = fits.iter().map(|(n, f)| (n.clone(), f)).collect();
        let mut out = Vec::new();
        let p = self.path(Stage::Regress, "coefficients.tsv");
        write_table(&p, &coefficient_table(&refs))?;
        out.push(p);
        let p = self.path(Stage::Regress, "results.json");
        write_json(&p, &results)?;
        out.push(p);
        Ok(out)
    }

    fn did(&self) -> anyhow::Result<Vec<PathBuf>> {
        let cfg = &self.config.did;
        let path = cfg
            .panel
            .clone()
            .unwrap_or_else(|| self.path(Stage::Metrics, "user_week.tsv"));
        let table = stage_table(&path)?;
        let (panel, sample) = did_panel(&table, cfg)?;
        let specs = [
            (false, false, false),
            (true, false, false),
            (false, true, false),
            (true, true, false),
            (false, false, true),
            (true, false, true),
            (true, true, true),
        ];
        let mut fits = Vec::new();
        let mut models = BTreeMap::new();
        for (i, &(unit_effects, period_effects, controls)) in specs.iter().enumerate() {
            let name = format!("did_{}", i + 1);
            let spec = DidSpec {
                unit_effects,
                period_effects,
                controls,
                ..DidSpec::default()
            };
            let entry = match did_estimate(&panel, &spec) {
                Ok(r) => {
                    let mut v = fit_summary(&r.fit);
                    v["atet"] = estimate_json(&r.atet);
                    v["lag_deleted"] = json!(r.lag_deleted);
                    v["unit_effects"] = json!(unit_effects);
                    v["period_effects"] = json!(period_effects);
                    v["controls"] = json!(controls);
                    fits.push((name.clone(), r.fit));
                    v
                }
                Err(e) => error_json(e),
            };
            models.insert(name, entry);
        }
        let mut out = Vec::new();
        let refs: Vec<(String, &FitResult)> = fits.iter().map(|(n, f)| (n.clone(), f)).collect();
        let p = self.path(Stage::Did, "coefficients.tsv");
        write_table(&p, &coefficient_table(&refs))?;
        out.push(p);

        let mut es_table = Table::new(["relative_period", "coefficient", "std_error", "ci_low", "ci_high"]);
        let analysis = match did_analysis(&panel, &DidSpec::default(), cfg.n_leads) {
            Ok(a) => {
                for pt in &a.event_study.points {
                    es_table.push(vec![
                        pt.relative_period.to_string(),
                        pt.coefficient.to_string(),
                        pt.std_error.to_string(),
                        pt.ci_low.to_string(),
                        pt.ci_high.to_string(),
                    ]);
                }
                json!({
                    "atet": estimate_json(&a.atet.atet),
                    "pretrend": a.pretrend,
                    "anticipation": { "wald": a.granger.wald, "leads": a.granger.leads },
                    "event_study_mean_post": a.event_study.mean_post(),
                    "event_study_mean_pre": a.event_study.mean_pre(),
                })
            }
            Err(e) => error_json(e),
        };
        let p = self.path(Stage::Did, "event_study.tsv");
        write_table(&p, &es_table)?;
        out.push(p);
        let p = self.path(Stage::Did, "results.json");
        write_json(
            &p,
            &json!({
                "treatment_week": cfg.treatment_week,
                "treated_countries": cfg.treated_countries,
                "sample": sample,
                "models": models,
                "diagnostics": analysis,
            }),
        )?;
        out.push(p);
        Ok(out)
    }

    fn report(&self) -> anyhow::Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        let months = stage_table(&self.path(Stage::Metrics, "user_month.tsv"))?;

        let expl = months.column("taste_exploration")?;
        let travel = months.column("travel_distance_km")?;
        let mut pairs = Vec::new();
        for r in 0..months.rows.len() {
            if let (Some(y), Some(x)) = (months.number(r, expl)?, months.number(r, travel)?) {
                pairs.push((x.max(0.0).ln_1p(), y));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let bins = 10.min(pairs.len());
        let mut binned = Vec::new();
        for b in 0..bins {
            let chunk = &pairs[b * pairs.len() / bins..(b + 1) * pairs.len() / bins];
            let n = chunk.len() as f64;
            let mx = chunk.iter().map(|p| p.0).sum::<f64>() / n;
            let my = chunk.iter().map(|p| p.1).sum::<f64>() / n;
            let sd = (chunk.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            binned.push(Point { x: mx, y: my, err: Some(1.96 * sd / n.sqrt()) });
        }
        let mut chart = Chart::new("Exploration by travel distance", "ln(1 + travel km), decile means", "taste exploration");
        chart.series.push(Series::Line(binned.clone()));
        chart.series.push(Series::Markers(binned));
        let p = self.path(Stage::Report, "exploration_vs_travel.svg");
        write_atomic(&p, |w| Ok(std::io::Write::write_all(w, chart.to_svg().as_bytes())?))?;
        out.push(p);

        let es = stage_table(&self.path(Stage::Did, "event_study.tsv"))?;
        let mut points = Vec::new();
        for r in 0..es.rows.len() {
            let rel: f64 = es.rows[r][0].parse()?;
            let coef = es.number(r, 1)?.unwrap_or(f64::NAN);
            let se = es.number(r, 2)?.unwrap_or(0.0);
            points.push(Point { x: rel, y: coef, err: Some(1.96 * se) });
        }
        let mut chart = Chart::new("Event study", "weeks relative to treatment", "effect on exploration (sd)");
        chart.series.push(Series::Markers(points.clone()));
        chart.series.push(Series::Line(points));
        chart.h_lines.push(0.0);
        chart.v_lines.push(-0.5);
        let p = self.path(Stage::Report, "event_study.svg");
        write_atomic(&p, |w| Ok(std::io::Write::write_all(w, chart.to_svg().as_bytes())?))?;
        out.push(p);

        let month_col = months.column("month")?;
        let global = months.column("distance_from_global_taste")?;
        let mut by_month: BTreeMap<i64, [(f64, usize); 2]> = BTreeMap::new();
        for r in 0..months.rows.len() {
            let m = parse_period(&months.rows[r][month_col])?;
            let e = by_month.entry(m).or_default();
            for (slot, col) in [expl, global].into_iter().enumerate() {
                if let Some(v) = months.number(r, col)? {
                    e[slot].0 += v;
                    e[slot].1 += 1;
                }
            }
        }
        let mut chart = Chart::new("Monthly means", "month", "cosine distance");
        for slot in 0..2 {
            chart.series.push(Series::Line(
                by_month
                    .iter()
                    .filter(|(_, v)| v[slot].1 > 0)
                    .map(|(m, v)| Point { x: *m as f64, y: v[slot].0 / v[slot].1 as f64, err: None })
                    .collect(),
            ));
        }
        let step = (by_month.len() / 6).max(1);
        chart.x_ticks = Some(
            by_month
                .keys()
                .step_by(step)
                .map(|&m| (m as f64, i32::try_from(m).map(|m| Month(m).to_string()).unwrap_or_default()))
                .collect(),
        );
        let p = self.path(Stage::Report, "monthly_trends.svg");
        write_atomic(&p, |w| Ok(std::io::Write::write_all(w, chart.to_svg().as_bytes())?))?;
        out.push(p);

        let p = self.path(Stage::Report, "summary.md");
        let summary = self.summary(&months)?;
        write_atomic(&p, |w| Ok(std::io::Write::write_all(w, summary.as_bytes())?))?;
        out.push(p);
        Ok(out)
    }

    fn summary(&self, months: &Table) -> anyhow::Result<String> {
        use std::fmt::Write as _;
        let read = |stage: Stage, file: &str| -> anyhow::Result<Value> {
            let path = self.path(stage, file);
            Ok(serde_json::from_slice(&fs::read(&path).with_context(|| format!("reading {}", path.display()))?)?)
        };
        let num = |v: &Value| v.as_f64().map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".into());
        let mut s = String::new();
        writeln!(s, "# tastetrace summary\n")?;
        writeln!(s, "Output directory stages: {}.\n", Stage::pipeline(self.config).iter().map(|s| s.name()).collect::<Vec<_>>().join(", "))?;
        writeln!(s, "User-month rows: {}.\n", months.rows.len())?;

        writeln!(s, "## Panel regressions\n")?;
        let regress = read(Stage::Regress, "results.json")?;
        if let Some(models) = regress.as_object() {
            for (name, m) in models {
                if let Some(err) = m.get("error") {
                    writeln!(s, "- **{name}**: not estimated ({})", err.as_str().unwrap_or_default())?;
                    continue;
                }
                writeln!(s, "- **{name}** (N = {}, units = {}, R² within = {})", m["n_obs"], m["n_units"], num(&m["r2_within"]))?;
                if let Some(est) = m["estimates"].as_object() {
                    for (term, e) in est {
                        writeln!(
                            s,
                            "  - `{term}`: {} (SE {}, p = {})",
                            num(&e["coefficient"]),
                            num(&e["std_error"]),
                            num(&e["p_value"])
                        )?;
                    }
                }
            }
        }

        writeln!(s, "\n## Treatment effect\n")?;
        let did = read(Stage::Did, "results.json")?;
        writeln!(s, "Treatment week {}, treated countries {}.\n", did["treatment_week"].as_str().unwrap_or_default(), did["treated_countries"])?;
        if let Some(models) = did["models"].as_object() {
            writeln!(s, "| model | unit FE | week FE | controls | ATET | SE | p |")?;
            writeln!(s, "|---|---|---|---|---|---|---|")?;
            for (name, m) in models {
                if let Some(err) = m.get("error") {
                    writeln!(s, "| {name} | | | | {} | | |", err.as_str().unwrap_or_default())?;
                } else {
                    writeln!(
                        s,
                        "| {name} | {} | {} | {} | {} | {} | {} |",
                        m["unit_effects"],
                        m["period_effects"],
                        m["controls"],
                        num(&m["atet"]["coefficient"]),
                        num(&m["atet"]["std_error"]),
                        num(&m["atet"]["p_value"])
                    )?;
                }
            }
        }
        let d = &did["diagnostics"];
        if let Some(err) = d.get("error") {
            writeln!(s, "\nDiagnostics unavailable: {}", err.as_str().unwrap_or_default())?;
        } else {
            writeln!(
                s,
                "\nDifferential pre-trend slope {} (p = {}); anticipation F = {} (p = {}).",
                num(&d["pretrend"]["slope_difference"]),
                num(&d["pretrend"]["p_value"]),
                num(&d["anticipation"]["wald"]["f_statistic"]),
                num(&d["anticipation"]["wald"]["p_value"])
            )?;
            writeln!(
                s,
                "Event-study mean post-treatment effect {}, mean pre-treatment {}.",
                num(&d["event_study_mean_post"]),
                num(&d["event_study_mean_pre"])
            )?;
        }
        writeln!(s, "\nFigures: `exploration_vs_travel.svg`, `event_study.svg`, `monthly_trends.svg`.")?;
        Ok(s)
    }
}

/// Runs `stages` in order; `MissingUpstream` from any stage aborts the rest.
pub fn run_stages(config: &PipelineConfig, stages: &[Stage]) -> Result<Vec<(Stage, Outcome)>, Failure> {
    let runner = Runner::new(config)?;
    fs::create_dir_all(runner.root()).map_err(anyhow::Error::from)?;
    let mut done = Vec::new();
    for &s in stages {
        done.push((s, runner.run(s)?));
    }
    Ok(done)
}
