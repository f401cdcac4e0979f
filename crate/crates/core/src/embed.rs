//! Song embeddings trained on listening sessions with CBOW and negative
//! sampling, plus similarity queries over the trained space.
//!
//! Each session is a sentence and each track a word. For every position the
//! mean of the input vectors of up to `window` predecessors and `window`
//! successors (never crossing a session boundary) is scored against the
//! target's output vector and against `negative` noise tracks drawn from the
//! unigram distribution raised to the 3/4 power.
//!
//! Multi-worker training shares both weight matrices without locks. Weights
//! are stored as relaxed atomics, so concurrent updates may overwrite each
//! other but never tear or invoke undefined behaviour.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub dimension: usize,
    pub window: usize,
    pub min_count: u64,
    /// Full passes over the session corpus.
    pub epochs: usize,
    pub negative: usize,
    pub seed: u64,
    pub start_learning_rate: f64,
    pub end_learning_rate: f64,
    pub workers: usize,
    /// Upper bound on the two weight matrices, in bytes.
    pub memory_budget_bytes: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            dimension: 300,
            window: 3,
            min_count: 2,
            epochs: 100,
            negative: 20,
            seed: 1,
            start_learning_rate: 0.025,
            end_learning_rate: 1e-4,
            workers: 1,
            memory_budget_bytes: 8 << 30,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension < 2 {
            return Err(Error::arg("dimension must be >= 2"));
        }
        if self.window < 1 {
            return Err(Error::arg("window must be >= 1"));
        }
        if self.epochs < 1 {
            return Err(Error::arg("epochs must be >= 1"));
        }
        if self.workers < 1 {
            return Err(Error::arg("workers must be >= 1"));
        }
        if !(self.start_learning_rate > 0.0 && self.end_learning_rate >= 0.0) {
            return Err(Error::arg("learning rates must be positive"));
        }
        Ok(())
    }

    /// Linear decay from the start to the end rate over training progress in [0, 1].
    pub fn learning_rate(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.start_learning_rate - (self.start_learning_rate - self.end_learning_rate) * p
    }
}

/// Sessions as vocabulary indices, with the unigram table.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingCorpus {
    pub vocabulary: Vec<String>,
    /// Corpus frequency of each vocabulary entry.
    pub counts: Vec<u64>,
    pub sessions: Vec<Vec<u32>>,
}

impl TrainingCorpus {
    pub fn tokens(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Drops tracks seen fewer than `min_count` times and sessions left empty.
/// Vocabulary is ordered by descending frequency, then track id.
pub fn build_vocabulary<S, T>(sessions: &[S], min_count: u64) -> Result<TrainingCorpus>
where
    S: AsRef<[T]>,
    T: AsRef<str>,
{
    if sessions.is_empty() {
        return Err(Error::CorpusTooSparse("no sessions".into()));
    }
    let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
    for s in sessions {
        for t in s.as_ref() {
            *freq.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, u64)> = freq.into_iter().filter(|&(_, c)| c >= min_count).collect();
    if kept.is_empty() {
        return Err(Error::CorpusTooSparse(format!(
            "no track appears at least {min_count} times"
        )));
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let index: HashMap<&str, u32> = kept.iter().enumerate().map(|(i, (t, _))| (*t, i as u32)).collect();
    let encoded: Vec<Vec<u32>> = sessions
        .iter()
        .map(|s| s.as_ref().iter().filter_map(|t| index.get(t.as_ref()).copied()).collect::<Vec<_>>())
        .filter(|s: &Vec<u32>| !s.is_empty())
        .collect();
    Ok(TrainingCorpus {
        vocabulary: kept.iter().map(|(t, _)| t.to_string()).collect(),
        counts: kept.iter().map(|&(_, c)| c).collect(),
        sessions: encoded,
    })
}

/// Row-major weight matrix read and written through a shared reference.
pub trait WeightRows {
    fn dimension(&self) -> usize;
    fn load(&self, row: usize, out: &mut [f64]);
    /// `row += scale * delta`.
    fn add_scaled(&self, row: usize, delta: &[f64], scale: f64);
}

/// f32 weights behind relaxed atomics; safe to update from several threads.
pub struct SharedMatrix {
    dim: usize,
    cells: Vec<AtomicU32>,
}

impl SharedMatrix {
    fn from_values(dim: usize, values: impl IntoIterator<Item = f32>) -> Self {
        SharedMatrix {
            dim,
            cells: values.into_iter().map(|v| AtomicU32::new(v.to_bits())).collect(),
        }
    }

    fn into_values(self) -> Vec<f32> {
        self.cells.into_iter().map(|c| f32::from_bits(c.into_inner())).collect()
    }
}

impl WeightRows for SharedMatrix {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn load(&self, row: usize, out: &mut [f64]) {
        let cells = &self.cells[row * self.dim..(row + 1) * self.dim];
        for (o, c) in out.iter_mut().zip(cells) {
            *o = f64::from(f32::from_bits(c.load(Ordering::Relaxed)));
        }
    }

    fn add_scaled(&self, row: usize, delta: &[f64], scale: f64) {
        let cells = &self.cells[row * self.dim..(row + 1) * self.dim];
        for (c, d) in cells.iter().zip(delta) {
            let v = f64::from(f32::from_bits(c.load(Ordering::Relaxed)));
            c.store(((v + scale * d) as f32).to_bits(), Ordering::Relaxed);
        }
    }
}

/// Reusable buffers for [`cbow_step`].
#[derive(Debug, Clone)]
pub struct StepScratch {
    hidden: Vec<f64>,
    grad_hidden: Vec<f64>,
    row: Vec<f64>,
}

impl StepScratch {
    pub fn new(dim: usize) -> Self {
        StepScratch {
            hidden: vec![0.0; dim],
            grad_hidden: vec![0.0; dim],
            row: vec![0.0; dim],
        }
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One stochastic-gradient step on the CBOW negative-sampling objective
///
/// `L = -log σ(u_target · h) - Σ_n log σ(-u_n · h)`, with `h` the mean of the
/// context input vectors,
///
/// moving every touched row by `-learning_rate * ∂L/∂row`. Returns `L`
/// evaluated before the step. Output rows are updated in sequence, so a
/// track repeated among the negatives sees its own earlier update.
pub fn cbow_step<M: WeightRows>(
    input: &M,
    output: &M,
    context: &[u32],
    target: u32,
    negatives: &[u32],
    learning_rate: f64,
    scratch: &mut StepScratch,
) -> f64 {
    if context.is_empty() {
        return 0.0;
    }
    let StepScratch {
        hidden,
        grad_hidden,
        row,
    } = scratch;
    hidden.iter_mut().for_each(|h| *h = 0.0);
    for &c in context {
        input.load(c as usize, row);
        for (h, r) in hidden.iter_mut().zip(row.iter()) {
            *h += r;
        }
    }
    let inv = 1.0 / context.len() as f64;
    hidden.iter_mut().for_each(|h| *h *= inv);
    grad_hidden.iter_mut().for_each(|g| *g = 0.0);

    let mut loss = 0.0;
    let words = std::iter::once((target, 1.0)).chain(negatives.iter().map(|&n| (n, 0.0)));
    for (word, label) in words {
        output.load(word as usize, row);
        let score: f64 = row.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum();
        loss -= if label > 0.0 {
            log_sigmoid(score)
        } else {
            log_sigmoid(-score)
        };
        // ∂L/∂score = σ(score) - label
        let g = sigmoid(score) - label;
        for (gh, r) in grad_hidden.iter_mut().zip(row.iter()) {
            *gh += g * r;
        }
        output.add_scaled(word as usize, hidden, -learning_rate * g);
    }
    for &c in context {
        input.add_scaled(c as usize, grad_hidden, -learning_rate * inv);
    }
    loss
}

/// Cumulative unigram^0.75 table for drawing noise tracks.
#[derive(Debug, Clone)]
pub struct NoiseTable {
    cumulative: Vec<f64>,
}

impl NoiseTable {
    pub fn new(counts: &[u64]) -> Self {
        let mut acc = 0.0;
        let cumulative = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(0.75);
                acc
            })
            .collect();
        NoiseTable { cumulative }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let total = *self.cumulative.last().unwrap_or(&0.0);
        let u = rng.random::<f64>() * total;
        let idx = self.cumulative.partition_point(|&c| c <= u);
        idx.min(self.cumulative.len() - 1) as u32
    }
}

const MAX_NOISE_REDRAWS: usize = 16;

/// Draws `k` noise tracks, re-drawing any that is the target or occurs in the
/// context. Gives up on a slot after a bounded number of redraws (tiny
/// vocabularies), so fewer than `k` may be returned.
fn draw_negatives<R: Rng>(
    table: &NoiseTable,
    rng: &mut R,
    k: usize,
    target: u32,
    context: &[u32],
    out: &mut Vec<u32>,
) {
    out.clear();
    for _ in 0..k {
        for _ in 0..MAX_NOISE_REDRAWS {
            let n = table.sample(rng);
            if n != target && !context.contains(&n) {
                out.push(n);
                break;
            }
        }
    }
}

/// Trained vectors, one row per vocabulary track.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpace {
    dimension: usize,
    vocabulary: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f32>,
    pub config: TrainingConfig,
    /// Mean per-step loss of each epoch.
    pub loss_trace: Vec<f64>,
}

impl EmbeddingSpace {
    pub fn from_parts(dimension: usize, vocabulary: Vec<String>, vectors: Vec<f32>) -> Result<Self> {
        if dimension == 0 || vectors.len() != dimension * vocabulary.len() {
            return Err(Error::Format(format!(
                "{} values cannot form {} vectors of dimension {dimension}",
                vectors.len(),
                vocabulary.len()
            )));
        }
        let mut index = HashMap::with_capacity(vocabulary.len());
        for (i, t) in vocabulary.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate track id {t}")));
            }
        }
        Ok(EmbeddingSpace {
            dimension,
            vocabulary,
            index,
            vectors,
            config: TrainingConfig {
                dimension,
                ..TrainingConfig::default()
            },
            loss_trace: Vec::new(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocabulary.is_empty()
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn index_of(&self, track_id: &str) -> Option<usize> {
        self.index.get(track_id).copied()
    }

    pub fn row(&self, idx: usize) -> &[f32] {
        &self.vectors[idx * self.dimension..(idx + 1) * self.dimension]
    }

    pub fn get(&self, track_id: &str) -> Option<&[f32]> {
        self.index_of(track_id).map(|i| self.row(i))
    }

    pub fn raw_vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// Vocabulary entries whose vector is all zeros.
    pub fn zero_vectors(&self) -> Vec<&str> {
        (0..self.len())
            .filter(|&i| self.row(i).iter().all(|&v| v == 0.0))
            .map(|i| self.vocabulary[i].as_str())
            .collect()
    }

    /// Multiplies one vector by `factor` (used to check scale invariance).
    pub fn scale_row(&mut self, idx: usize, factor: f32) {
        let d = self.dimension;
        self.vectors[idx * d..(idx + 1) * d].iter_mut().for_each(|v| *v *= factor);
    }
}

/// Trains CBOW with negative sampling. With `workers == 1` the result is a
/// pure function of the corpus and config.
pub fn train_s2v(corpus: &TrainingCorpus, config: &TrainingConfig) -> Result<EmbeddingSpace> {
    config.validate()?;
    let vocab = corpus.vocabulary.len();
    if vocab == 0 || corpus.sessions.iter().all(|s| s.is_empty()) {
        return Err(Error::CorpusTooSparse("empty training corpus".into()));
    }
    if let Some(bad) = corpus.sessions.iter().flatten().find(|&&t| t as usize >= vocab) {
        return Err(Error::arg(format!("track index {bad} outside vocabulary of {vocab}")));
    }
    let needed = 2 * (vocab as u64) * (config.dimension as u64) * 4;
    if needed > config.memory_budget_bytes {
        return Err(Error::arg(format!(
            "{vocab} tracks x {} dims needs ~{} MiB of weights, budget is {} MiB",
            config.dimension,
            needed >> 20,
            config.memory_budget_bytes >> 20
        )));
    }

    let dim = config.dimension;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = 0.5 / dim as f64;
    let input = SharedMatrix::from_values(
        dim,
        (0..vocab * dim).map(|_| init_rng.random_range(-bound..bound) as f32),
    );
    let output = SharedMatrix::from_values(dim, std::iter::repeat_n(0.0f32, vocab * dim));
    let noise = NoiseTable::new(&corpus.counts);

    let tokens_per_epoch: u64 = corpus.sessions.iter().map(|s| s.len() as u64).sum();
    let total_tokens = (tokens_per_epoch * config.epochs as u64).max(1);
    let processed = AtomicU64::new(0);
    let failed = AtomicBool::new(false);

    let workers = config.workers.min(corpus.sessions.len()).max(1);
    let chunk = corpus.sessions.len().div_ceil(workers);
    let parts: Vec<&[Vec<u32>]> = corpus.sessions.chunks(chunk).collect();

    let run_worker = |worker: usize, sessions: &[Vec<u32>]| -> Result<(Vec<f64>, Vec<u64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(worker as u64 + 1);
        let mut scratch = StepScratch::new(dim);
        let mut context = Vec::with_capacity(2 * config.window);
        let mut negatives = Vec::with_capacity(config.negative);
        let mut loss_sum = vec![0.0; config.epochs];
        let mut steps = vec![0u64; config.epochs];
        for epoch in 0..config.epochs {
            for session in sessions {
                if failed.load(Ordering::Relaxed) {
                    return Ok((loss_sum, steps));
                }
                let done = processed.fetch_add(session.len() as u64, Ordering::Relaxed);
                let lr = config.learning_rate(done as f64 / total_tokens as f64);
                for pos in 0..session.len() {
                    context.clear();
                    let lo = pos.saturating_sub(config.window);
                    let hi = (pos + config.window + 1).min(session.len());
                    context.extend(session[lo..pos].iter().chain(&session[pos + 1..hi]));
                    if context.is_empty() {
                        continue;
                    }
                    let target = session[pos];
                    draw_negatives(&noise, &mut rng, config.negative, target, &context, &mut negatives);
                    let loss = cbow_step(&input, &output, &context, target, &negatives, lr, &mut scratch);
                    if !loss.is_finite() {
                        failed.store(true, Ordering::Relaxed);
                        return Err(Error::Numerical(format!(
                            "non-finite loss at epoch {epoch}, step {} (worker {worker})",
                            steps[epoch]
                        )));
                    }
                    loss_sum[epoch] += loss;
                    steps[epoch] += 1;
                }
            }
        }
        Ok((loss_sum, steps))
    };

    let results: Vec<Result<(Vec<f64>, Vec<u64>)>> = if parts.len() == 1 {
        vec![run_worker(0, parts[0])]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = parts
                .iter()
                .enumerate()
                .map(|(w, part)| {
                    let run = &run_worker;
                    scope.spawn(move || run(w, part))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training worker panicked"))
                .collect()
        })
    };

    let mut loss_sum = vec![0.0; config.epochs];
    let mut steps = vec![0u64; config.epochs];
    for r in results {
        let (l, s) = r?;
        for e in 0..config.epochs {
            loss_sum[e] += l[e];
            steps[e] += s[e];
        }
    }
    let loss_trace = loss_sum
        .iter()
        .zip(&steps)
        .map(|(&l, &s)| if s == 0 { 0.0 } else { l / s as f64 })
        .collect();

    let mut space = EmbeddingSpace::from_parts(dim, corpus.vocabulary.clone(), input.into_values())?;
    space.config = config.clone();
    space.loss_trace = loss_trace;
    let zeros = space.zero_vectors();
    if !zeros.is_empty() {
        log::warn!("{} tracks have all-zero vectors after training", zeros.len());
    }
    Ok(space)
}

fn norm<T: Copy + Into<f64>>(v: &[T]) -> f64 {
    v.iter().map(|&x| {
        let x: f64 = x.into();
        x * x
    })
    .sum::<f64>()
    .sqrt()
}

/// Cosine similarity in [-1, 1]. Zero-norm inputs are an error.
pub fn cosine_similarity<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateVector("cosine of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 - cosine_similarity`, in [0, 2].
pub fn cosine_distance<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    cosine_similarity(a, b).map(|s| 1.0 - s)
}

/// Exact top-`k` neighbours by cosine similarity, excluding the query.
/// Ties go to the lower vocabulary index.
pub fn nearest_songs(space: &EmbeddingSpace, track_id: &str, k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::arg("k must be >= 1"));
    }
    let q = space
        .index_of(track_id)
        .ok_or_else(|| Error::NotFound(format!("track {track_id} not in vocabulary")))?;
    let query = space.row(q);
    let mut scored = Vec::with_capacity(space.len().saturating_sub(1));
    for i in (0..space.len()).filter(|&i| i != q) {
        scored.push((i, cosine_similarity(query, space.row(i))?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(i, s)| (space.vocabulary[i].clone(), s))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArtistSimilarity {
    pub within: f64,
    pub cross: f64,
    /// Paired t statistic over artists on `within - cross`.
    pub t_statistic: f64,
    pub artists: usize,
}

/// Mean pairwise cosine among each artist's tracks against the mean cosine to
/// every other artist's tracks, both averaged over artists with at least two
/// vocabulary tracks.
pub fn artist_similarity_report(
    space: &EmbeddingSpace,
    track_artist: &HashMap<String, String>,
) -> Result<ArtistSimilarity> {
    let dim = space.dimension();
    let mut by_artist: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (track, artist) in track_artist {
        if let Some(i) = space.index_of(track) {
            by_artist.entry(artist.as_str()).or_default().push(i);
        }
    }
    by_artist.retain(|_, v| v.len() >= 2);
    for v in by_artist.values_mut() {
        v.sort_unstable();
    }
    if by_artist.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} artists with >= 2 vocabulary tracks, need 2",
            by_artist.len()
        )));
    }

    // With unit vectors, sums of pairwise cosines reduce to dot products of sums.
    let unit = |i: usize| -> Result<Vec<f64>> {
        let r = space.row(i);
        let n = norm(r);
        if n == 0.0 {
            return Err(Error::DegenerateVector(format!("track {}", space.vocabulary[i])));
        }
        Ok(r.iter().map(|&v| f64::from(v) / n).collect())
    };
    let members: Vec<usize> = by_artist.values().flatten().copied().collect();
    let mut total = vec![0.0; dim];
    let mut artist_sums = Vec::with_capacity(by_artist.len());
    for tracks in by_artist.values() {
        let mut s = vec![0.0; dim];
        for &i in tracks {
            for (a, b) in s.iter_mut().zip(unit(i)?) {
                *a += b;
            }
        }
        for (t, v) in total.iter_mut().zip(&s) {
            *t += v;
        }
        artist_sums.push(s);
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut diffs = Vec::with_capacity(by_artist.len());
    let (mut within_sum, mut cross_sum) = (0.0, 0.0);
    for (tracks, s) in by_artist.values().zip(&artist_sums) {
        let n = tracks.len() as f64;
        let others = (members.len() - tracks.len()) as f64;
        let within = (dot(s, s) - n) / (n * (n - 1.0));
        let rest: Vec<f64> = total.iter().zip(s).map(|(t, v)| t - v).collect();
        let cross = dot(s, &rest) / (n * others);
        within_sum += within;
        cross_sum += cross;
        diffs.push(within - cross);
    }
    let k = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / k;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let t_statistic = if var > 0.0 {
        mean / (var / k).sqrt()
    } else if mean == 0.0 {
        0.0
    } else {
        mean.signum() * f64::INFINITY
    };
    Ok(ArtistSimilarity {
        within: within_sum / k,
        cross: cross_sum / k,
        t_statistic,
        artists: diffs.len(),
    })
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;

    use proptest::prelude::*;

    use rand::Rng;

    use super::*;

    struct DenseRows {
        dim: usize,
        data: RefCell<Vec<f64>>,
    }

    impl WeightRows for DenseRows {
        fn dimension(&self) -> usize {
            self.dim
        }
        fn load(&self, row: usize, out: &mut [f64]) {
            out.copy_from_slice(&self.data.borrow()[row * self.dim..(row + 1) * self.dim]);
        }
        fn add_scaled(&self, row: usize, delta: &[f64], scale: f64) {
            let mut d = self.data.borrow_mut();
            for (v, x) in d[row * self.dim..(row + 1) * self.dim].iter_mut().zip(delta) {
                *v += scale * x;
            }
        }
    }

    #[test]
    fn vocabulary_prunes_rare_tracks() {
        let sessions = vec![vec!["a", "b"], vec!["a"]];
        let c = build_vocabulary(&sessions, 2).unwrap();
        assert_eq!(c.vocabulary, vec!["a"]);
        assert_eq!(c.sessions, vec![vec![0], vec![0]]);
        assert_eq!(c.counts, vec![2]);

        let c = build_vocabulary(&sessions, 1).unwrap();
        assert_eq!(c.vocabulary, vec!["a", "b"]);
        assert_eq!(c.tokens(), 3);

        let err = build_vocabulary(&[vec!["x"]], 2).unwrap_err();
        assert!(matches!(err, Error::CorpusTooSparse(_)));
    }

    #[test]
    fn empty_corpus_is_too_sparse() {
        let corpus = TrainingCorpus {
            vocabulary: vec![],
            counts: vec![],
            sessions: vec![],
        };
        let err = train_s2v(&corpus, &TrainingConfig::default()).unwrap_err();
        assert!(err.to_string().contains("corpus too sparse"));
    }

    #[test]
    fn bad_config_is_rejected() {
        let corpus = build_vocabulary(&[vec!["a", "b", "a", "b"]], 1).unwrap();
        for cfg in [
            TrainingConfig { window: 0, ..TrainingConfig::default() },
            TrainingConfig { dimension: 1, ..TrainingConfig::default() },
        ] {
            assert!(matches!(train_s2v(&corpus, &cfg), Err(Error::InvalidArgument(_))));
        }
        let huge = TrainingConfig {
            memory_budget_bytes: 1024,
            ..TrainingConfig::default()
        };
        let err = train_s2v(&corpus, &huge).unwrap_err();
        assert!(err.to_string().contains("MiB"));
    }

    #[test]
    fn cbow_step_moves_target_toward_context() {
        let dim = 4;
        let input = DenseRows {
            dim,
            data: RefCell::new(vec![0.1, 0.2, -0.1, 0.3, 0.0, 0.1, 0.2, 0.0, 0.3, -0.2, 0.1, 0.1]),
        };
        let output = DenseRows {
            dim,
            data: RefCell::new(vec![0.0; 3 * dim]),
        };
        let mut scratch = StepScratch::new(dim);
        let first = cbow_step(&input, &output, &[0], 1, &[2], 0.5, &mut scratch);
        assert!((first - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let mut last = first;
        for _ in 0..50 {
            last = cbow_step(&input, &output, &[0], 1, &[2], 0.5, &mut scratch);
        }
        assert!(last < first);
    }

    #[test]
    fn noise_table_follows_smoothed_unigram() {
        let table = NoiseTable::new(&[16, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let zeros = (0..n).filter(|_| table.sample(&mut rng) == 0).count();
        let expected = 8.0 / 9.0; // 16^0.75 = 8
        assert!(((zeros as f64 / n as f64) - expected).abs() < 0.01);
    }

    #[test]
    fn negatives_avoid_target_and_context() {
        let table = NoiseTable::new(&[5, 5, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut out = Vec::new();
        draw_negatives(&table, &mut rng, 50, 0, &[1, 2], &mut out);
        assert!(out.iter().all(|&n| n == 3));
        draw_negatives(&table, &mut rng, 5, 0, &[1, 2, 3], &mut out);
        assert!(out.is_empty());
    }

    fn toy_space() -> EmbeddingSpace {
        EmbeddingSpace::from_parts(
            2,
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.9, 0.1],
        )
        .unwrap()
    }

    #[test]
    fn cosine_fixtures() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_distance(&v, &v).unwrap().abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let neg = [-0.3, 1.2, -2.0];
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((cosine_distance(&v, &neg).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector(_))
        ));
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn nearest_songs_ranks_and_breaks_ties() {
        let space = toy_space();
        let all = nearest_songs(&space, "a", 3).unwrap();
        let names: Vec<&str> = all.iter().map(|(t, _)| t.as_str()).collect();
        // b and d are identical; b has the lower index.
        assert_eq!(names, vec!["b", "d", "c"]);
        assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(matches!(nearest_songs(&space, "a", 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(nearest_songs(&space, "zz", 1), Err(Error::NotFound(_))));
    }

    #[test]
    fn artist_report_on_orthogonal_artists() {
        let space = EmbeddingSpace::from_parts(
            3,
            (0..6).map(|i| format!("t{i}")).collect(),
            vec![
                1.0, 0.0, 0.0, 2.0, 0.0, 0.0, // artist x
                0.0, 1.0, 0.0, 0.0, 3.0, 0.0, // artist y
                0.0, 0.0, 1.0, 0.0, 0.0, 1.0, // artist z
            ],
        )
        .unwrap();
        let map: HashMap<String, String> = (0..6)
            .map(|i| (format!("t{i}"), ["x", "y", "z"][i / 2].to_string()))
            .collect();
        let r = artist_similarity_report(&space, &map).unwrap();
        assert!((r.within - 1.0).abs() < 1e-12);
        assert!(r.cross.abs() < 1e-12);
        assert_eq!(r.artists, 3);

        let lonely: HashMap<String, String> = [("t0".to_string(), "x".to_string())].into();
        assert!(matches!(
            artist_similarity_report(&space, &lonely),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn artist_report_matches_pairwise_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 12;
        let values: Vec<f32> = (0..n * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let space = EmbeddingSpace::from_parts(5, (0..n).map(|i| format!("t{i}")).collect(), values).unwrap();
        let artist_of = |i: usize| format!("a{}", [0, 0, 0, 1, 1, 2, 2, 2, 2, 3, 3, 4][i]);
        let map: HashMap<String, String> = (0..n).map(|i| (format!("t{i}"), artist_of(i))).collect();
        let r = artist_similarity_report(&space, &map).unwrap();

        let cos = |i: usize, j: usize| cosine_similarity(space.row(i), space.row(j)).unwrap();
        let mut diffs = Vec::new();
        let (mut w_sum, mut c_sum) = (0.0, 0.0);
        for a in ["a0", "a1", "a2", "a3"] {
            let mine: Vec<usize> = (0..n).filter(|&i| artist_of(i) == a).collect();
            let rest: Vec<usize> = (0..n).filter(|&i| artist_of(i) != a && artist_of(i) != "a4").collect();
            let mut w = Vec::new();
            for &i in &mine {
                for &j in &mine {
                    if i != j {
                        w.push(cos(i, j));
                    }
                }
            }
            let c: Vec<f64> = mine.iter().flat_map(|&i| rest.iter().map(move |&j| (i, j))).map(|(i, j)| cos(i, j)).collect();
            let wm = w.iter().sum::<f64>() / w.len() as f64;
            let cm = c.iter().sum::<f64>() / c.len() as f64;
            w_sum += wm;
            c_sum += cm;
            diffs.push(wm - cm);
        }
        assert!((r.within - w_sum / 4.0).abs() < 1e-10);
        assert!((r.cross - c_sum / 4.0).abs() < 1e-10);
        let mean = diffs.iter().sum::<f64>() / 4.0;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((r.t_statistic - mean / (sd / 2.0)).abs() < 1e-8);
    }

    #[test]
    fn single_worker_training_is_deterministic() {
        let sessions: Vec<Vec<String>> = (0..60)
            .map(|s| (0..6).map(|i| format!("t{}", (s * 7 + i * 3) % 15)).collect())
            .collect();
        let corpus = build_vocabulary(&sessions, 2).unwrap();
        let cfg = TrainingConfig {
            dimension: 8,
            epochs: 3,
            negative: 3,
            ..TrainingConfig::default()
        };
        let a = train_s2v(&corpus, &cfg).unwrap();
        let b = train_s2v(&corpus, &cfg).unwrap();
        assert_eq!(a.raw_vectors(), b.raw_vectors());
        assert_eq!(a.loss_trace.len(), 3);
        assert!(a.zero_vectors().is_empty());
    }

    proptest! {
        #[test]
        fn raising_min_count_never_adds_tracks(
            sessions in prop::collection::vec(prop::collection::vec(0u8..12, 1..8), 1..20),
            lo in 1u64..4,
            extra in 0u64..3,
        ) {
            let sessions: Vec<Vec<String>> = sessions.iter().map(|s| s.iter().map(|t| t.to_string()).collect()).collect();
            let hi = lo + extra;
            if let Ok(strict) = build_vocabulary(&sessions, hi) {
                let loose = build_vocabulary(&sessions, lo).unwrap();
                prop_assert!(strict.vocabulary.iter().all(|t| loose.vocabulary.contains(t)));
                prop_assert_eq!(strict.tokens(), strict.sessions.iter().map(|s| s.len() as u64).sum::<u64>());
            }
        }

        #[test]
        fn rankings_are_scale_invariant(factors in prop::collection::vec(0.01f32..100.0, 4)) {
            let base = toy_space();
            let mut scaled = base.clone();
            for (i, f) in factors.iter().enumerate() {
                scaled.scale_row(i, *f);
            }
            for t in ["a", "b", "c"] {
                let x = nearest_songs(&base, t, 3).unwrap();
                let y = nearest_songs(&scaled, t, 3).unwrap();
                for (p, q) in x.iter().zip(&y) {
                    prop_assert!((p.1 - q.1).abs() < 1e-6);
                }
            }
        }
    }
}
