//! Triplet (identification) and contrastive (verification) training with Adam and
//! writer-level k-fold cross-validation.
//!
//! Every batch is a set of snippets drawn from a few training writers. The loss
//! lives in its own small graph over the batch embeddings; its embedding
//! gradients are pushed back through each snippet's forward graph and the
//! per-snippet parameter gradients are summed in batch order, so results do not
//! depend on how many worker threads ran the forward passes.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::corpus::{extract_snippets, Corpus, PageRecord, SamplingMode, Snippet, WriterSplit, RETRIES_PER_SNIPPET};
use crate::error::{Error, Result};
use crate::metrics::{self, choose_threshold, evaluate_map, evaluate_map_subset, evaluate_verification};
use crate::model::{EmbeddingNetwork, ModelConfig, Provenance};
use crate::synth::mix;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Writer identification: triplet loss, selected by mAP.
    Wi,
    /// Writer verification: contrastive loss, selected by pair accuracy.
    Wv,
}

impl Task {
    pub fn loss_name(self) -> &'static str {
        match self {
            Task::Wi => "triplet",
            Task::Wv => "contrastive",
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Wi => "map",
            Task::Wv => "accuracy",
        }
    }
}

/// Which split picks the best epoch (and the best fold).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Held-out validation writers from the training pool.
    Validation,
    /// The test writers themselves. Optimistic: the reported test metric is
    /// also the selection criterion.
    Test,
    /// No early stopping: the last epoch. Folds are still ranked by their
    /// validation metric.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    /// Triplet margin (identification) or contrastive margin (verification),
    /// both on cosine distance.
    pub margin: f32,
    pub learning_rate: f32,
    /// Snippets per batch.
    pub batch_size: usize,
    /// Distinct writers drawn per batch (capped by the training writers available).
    pub writers_per_batch: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub folds: usize,
    pub min_ink: f64,
    /// Pairs per class for verification validation/test sets.
    pub eval_pairs: usize,
    pub selection: Selection,
    pub seed: u64,
    /// Snippet size is `model.input_size`.
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn wi() -> Self {
        Self {
            task: Task::Wi,
            margin: 0.3,
            learning_rate: 0.001,
            batch_size: 32,
            writers_per_batch: 4,
            batches_per_epoch: 8,
            epochs: 20,
            folds: 4,
            min_ink: 0.02,
            eval_pairs: 200,
            selection: Selection::Validation,
            seed: 0,
            model: ModelConfig::default(),
        }
    }

    pub fn wv() -> Self {
        Self {
            task: Task::Wv,
            margin: 0.5,
            learning_rate: 0.001,
            ..Self::wi()
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Wi => Self::wi(),
            Task::Wv => Self::wv(),
        }
    }

    pub fn snippet_size(&self) -> usize {
        self.model.input_size
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.writers_per_batch < 2 {
            return bad("writers_per_batch must be at least 2".into());
        }
        if self.batch_size < 2 * self.writers_per_batch {
            return bad(format!(
                "batch_size {} cannot hold two snippets for each of {} writers",
                self.batch_size, self.writers_per_batch
            ));
        }
        if !(0.0..1.0).contains(&self.min_ink) {
            return bad(format!("min_ink {} outside [0, 1)", self.min_ink));
        }
        if self.eval_pairs == 0 {
            return bad("eval_pairs must be positive".into());
        }
        Ok(())
    }
}

/// `max(0, d_ap - d_an + margin)`.
pub fn triplet_loss(d_ap: f32, d_an: f32, margin: f32) -> f32 {
    (d_ap - d_an + margin).max(0.0)
}

/// `d²` for same-writer pairs, `max(0, margin - d)²` otherwise.
pub fn contrastive_loss(d: f32, same_writer: bool, margin: f32) -> f32 {
    if same_writer {
        d * d
    } else {
        (margin - d).max(0.0).powi(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamConfig {
    pub fn new(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape(format!(
            "adam_step got {} parameters, {} gradients and {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(Error::Shape(format!(
                "parameter {i} has shape {:?} but its gradient has {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Index triples or pairs into [`Batch::snippets`].
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// `(anchor, positive, negative)`.
    Triplets(Vec<(usize, usize, usize)>),
    /// `(a, b, same_writer)`.
    Pairs(Vec<(usize, usize, bool)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub snippets: Vec<Snippet>,
    pub objective: Objective,
}

fn distance(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let cos = g.cosine_similarity(a, b)?;
    let neg = g.scale(cos, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Mean batch loss built over embedding nodes.
fn objective_graph(g: &mut Graph, embeddings: &[NodeId], objective: &Objective, margin: f32) -> Result<NodeId> {
    let mut terms = Vec::new();
    match objective {
        Objective::Triplets(triplets) => {
            for &(a, p, n) in triplets {
                let d_ap = distance(g, embeddings[a], embeddings[p])?;
                let d_an = distance(g, embeddings[a], embeddings[n])?;
                let diff = g.sub(d_ap, d_an)?;
                let shifted = g.add_scalar(diff, margin)?;
                terms.push(g.relu(shifted)?);
            }
        }
        Objective::Pairs(pairs) => {
            for &(a, b, same) in pairs {
                let d = distance(g, embeddings[a], embeddings[b])?;
                let term = if same {
                    g.square(d)?
                } else {
                    let neg = g.scale(d, -1.0)?;
                    let gap = g.add_scalar(neg, margin)?;
                    let hinge = g.relu(gap)?;
                    g.square(hinge)?
                };
                terms.push(term);
            }
        }
    }
    let Some((&first, rest)) = terms.split_first() else {
        return Err(Error::Precondition("batch objective has no terms".into()));
    };
    let mut total = first;
    for &t in rest {
        total = g.add(total, t)?;
    }
    g.scale(total, 1.0 / terms.len() as f32)
}

struct SnippetPass {
    graph: Graph,
    params: Vec<NodeId>,
    embedding: NodeId,
}

fn forward_passes(net: &EmbeddingNetwork, snippets: &[Snippet], trainable: bool) -> Result<Vec<SnippetPass>> {
    snippets
        .par_iter()
        .map(|s| {
            let mut graph = Graph::new();
            let params = net.attach(&mut graph, trainable);
            let input = graph.constant(s.pixels.clone());
            let embedding = net.forward(&mut graph, &params, input)?.embedding;
            Ok(SnippetPass {
                graph,
                params,
                embedding,
            })
        })
        .collect()
}

fn loss_of(passes: &[SnippetPass], batch: &Batch, margin: f32) -> Result<(Graph, Vec<NodeId>, NodeId, f32)> {
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = passes
        .iter()
        .map(|p| g.variable(p.graph.value(p.embedding).clone()))
        .collect();
    let loss = objective_graph(&mut g, &nodes, &batch.objective, margin)?;
    let value = g.value(loss).item().expect("loss is scalar");
    if !value.is_finite() {
        return Err(Error::Divergence(format!("batch loss became {value}")));
    }
    Ok((g, nodes, loss, value))
}

/// Mean loss of `batch` under `net`.
pub fn batch_loss(net: &EmbeddingNetwork, batch: &Batch, margin: f32) -> Result<f32> {
    let passes = forward_passes(net, &batch.snippets, false)?;
    Ok(loss_of(&passes, batch, margin)?.3)
}

/// Mean loss and its gradient with respect to every network parameter.
pub fn batch_gradients(net: &EmbeddingNetwork, batch: &Batch, margin: f32) -> Result<(f32, Vec<Tensor>)> {
    let passes = forward_passes(net, &batch.snippets, true)?;
    let (g, nodes, loss, value) = loss_of(&passes, batch, margin)?;
    let mut embedding_grads = g.backward(loss)?;
    let seeds: Vec<Tensor> = nodes
        .iter()
        .map(|&n| embedding_grads.take(n).expect("embedding leaf is differentiable"))
        .collect();
    let per_snippet: Vec<Vec<Tensor>> = passes
        .into_par_iter()
        .zip(seeds)
        .map(|(mut pass, seed)| {
            let seed = pass.graph.constant(seed);
            let scalar = pass.graph.dot(pass.embedding, seed)?;
            let mut grads = pass.graph.backward(scalar)?;
            Ok(pass
                .params
                .iter()
                .map(|&p| grads.take(p).expect("parameter leaf is differentiable"))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut total: Vec<Vec<f32>> = net.params.iter().map(|p| vec![0.0; p.len()]).collect();
    for grads in &per_snippet {
        for (acc, g) in total.iter_mut().zip(grads) {
            for (a, &v) in acc.iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    let grads = total
        .into_iter()
        .zip(&net.params)
        .map(|(data, p)| Tensor::new(p.shape().to_vec(), data))
        .collect::<Result<Vec<_>>>()?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence("non-finite parameter gradient".into()));
    }
    Ok((value, grads))
}

/// Assigns pool writers to folds round-robin, in pool order.
pub fn fold_partition(pool: &[String], folds: usize) -> Result<Vec<Vec<String>>> {
    if folds < 2 {
        return Err(Error::Config(format!("folds must be at least 2, got {folds}")));
    }
    if pool.len() < folds {
        return Err(Error::Precondition(format!(
            "{} training-pool writers cannot fill {folds} folds",
            pool.len()
        )));
    }
    let mut parts = vec![Vec::new(); folds];
    for (i, w) in pool.iter().enumerate() {
        parts[i % folds].push(w.clone());
    }
    Ok(parts)
}

fn random_snippet(page: &PageRecord, size: usize, min_ink: f64, rng: &mut ChaCha8Rng) -> Result<Snippet> {
    if size > page.width || size > page.height {
        return Err(Error::Precondition(format!("page {} is smaller than {size}px", page.page_id)));
    }
    for _ in 0..RETRIES_PER_SNIPPET {
        let row = rng.gen_range(0..=page.height - size);
        let col = rng.gen_range(0..=page.width - size);
        let s = page.snippet_at(row, col, size)?;
        if s.ink_fraction >= min_ink {
            return Ok(s);
        }
    }
    Err(Error::Data(format!(
        "page {} yielded no {size}px snippet with ink >= {min_ink} in {RETRIES_PER_SNIPPET} draws",
        page.page_id
    )))
}

/// Draws one batch: a few writers, near-equal snippet counts each, then every
/// same-writer pair as anchor/positive (or positive pair) with randomly chosen
/// partners from other writers.
pub fn sample_batch(
    writers: &[(String, Vec<&PageRecord>)],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if writers.len() < 2 {
        return Err(Error::Precondition("a batch needs at least 2 training writers".into()));
    }
    let p = config.writers_per_batch.min(writers.len());
    let chosen = index::sample(rng, writers.len(), p).into_vec();
    let mut snippets = Vec::with_capacity(config.batch_size);
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(p);
    for (k, &w) in chosen.iter().enumerate() {
        let count = config.batch_size / p + usize::from(k < config.batch_size % p);
        let pages = &writers[w].1;
        let mut group = Vec::with_capacity(count);
        for _ in 0..count {
            let page = pages[rng.gen_range(0..pages.len())];
            group.push(snippets.len());
            snippets.push(random_snippet(page, config.snippet_size(), config.min_ink, rng)?);
        }
        groups.push(group);
    }
    let owner: Vec<usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(k, g)| g.iter().map(move |_| k))
        .collect();
    let other = |rng: &mut ChaCha8Rng, k: usize| loop {
        let j = rng.gen_range(0..snippets.len());
        if owner[j] != k {
            return j;
        }
    };
    let objective = match config.task {
        Task::Wi => {
            let mut triplets = Vec::new();
            for (k, g) in groups.iter().enumerate() {
                for (i, &a) in g.iter().enumerate() {
                    for &pos in &g[i + 1..] {
                        triplets.push((a, pos, other(rng, k)));
                    }
                }
            }
            Objective::Triplets(triplets)
        }
        Task::Wv => {
            let mut pairs = Vec::new();
            for (k, g) in groups.iter().enumerate() {
                for (i, &a) in g.iter().enumerate() {
                    for &b in &g[i + 1..] {
                        pairs.push((a, b, true));
                        let j = rng.gen_range(0..g.len());
                        pairs.push((g[j], other(rng, k), false));
                    }
                }
            }
            Objective::Pairs(pairs)
        }
    };
    Ok(Batch { snippets, objective })
}

/// Non-overlapping grid snippets of the given writers' pages, ordered by snippet id.
pub fn grid_snippets(corpus: &Corpus, writers: &[String], size: usize, min_ink: f64) -> Result<Vec<Snippet>> {
    let mut out = Vec::new();
    for w in writers {
        for page in corpus.pages_of(w) {
            out.extend(extract_snippets(page, size, SamplingMode::Grid, min_ink, 0, 0)?.snippets);
        }
    }
    out.sort_by_key(Snippet::id);
    Ok(out)
}

/// Embeds snippets on the worker pool; output order matches input order.
pub fn embed_all(net: &EmbeddingNetwork, snippets: &[Snippet]) -> Result<Vec<Tensor>> {
    snippets.par_iter().map(|s| net.embed(s)).collect()
}

/// Retrieval with the page descriptor = mean of its snippet embeddings.
pub fn page_level_map(snippets: &[Snippet], embeddings: &[Tensor]) -> Result<f64> {
    let mut pages: BTreeMap<&str, (&str, Vec<f32>, usize)> = BTreeMap::new();
    for (s, e) in snippets.iter().zip(embeddings) {
        let entry = pages
            .entry(&s.page_id)
            .or_insert_with(|| (&s.writer_id, vec![0.0; e.len()], 0));
        for (a, &v) in entry.1.iter_mut().zip(e.data()) {
            *a += v;
        }
        entry.2 += 1;
    }
    let descriptors: Vec<(Tensor, &str)> = pages
        .into_values()
        .map(|(w, sum, n)| (Tensor::from_vec(sum.into_iter().map(|v| v / n as f32).collect()), w))
        .collect();
    let items: Vec<(&Tensor, &str)> = descriptors.iter().map(|(t, w)| (t, *w)).collect();
    Ok(evaluate_map(&items)?.map)
}

/// Samples up to `n` same-writer pairs and `n` different-writer pairs. Same pairs
/// come from `query` snippets; different pairs join a query snippet with one from
/// `query ∪ others` of another writer.
fn sample_pairs(
    query: &[usize],
    others: &[usize],
    snippets: &[Snippet],
    n: usize,
    seed: u64,
) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for (i, &a) in query.iter().enumerate() {
        for &b in &query[i + 1..] {
            if snippets[a].writer_id == snippets[b].writer_id {
                same.push((a, b));
            } else {
                diff.push((a, b));
            }
        }
        for &b in others {
            if snippets[a].writer_id != snippets[b].writer_id {
                diff.push((a, b));
            }
        }
    }
    if same.is_empty() || diff.is_empty() {
        return Err(Error::Precondition("verification pairs need both same- and different-writer pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |v: Vec<(usize, usize)>| -> Vec<(usize, usize)> {
        let k = n.min(v.len());
        let mut idx = index::sample(&mut rng, v.len(), k).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| v[i]).collect()
    };
    let same = pick(same);
    let diff = pick(diff);
    let k = same.len().min(diff.len());
    Ok((same[..k].to_vec(), diff[..k].to_vec()))
}

fn scored_pairs(
    embeddings: &[Tensor],
    same: &[(usize, usize)],
    diff: &[(usize, usize)],
) -> Result<Vec<(f64, bool)>> {
    let score = |&(a, b): &(usize, usize), y| Ok((metrics::similarity(embeddings[a].data(), embeddings[b].data())?, y));
    same.iter()
        .map(|p| score(p, true))
        .chain(diff.iter().map(|p| score(p, false)))
        .collect()
}

/// A fixed evaluation set: snippets, the query subset, and (verification) pairs.
struct EvalSet {
    snippets: Vec<Snippet>,
    is_query: Vec<bool>,
    pairs: Option<(Vec<(usize, usize)>, Vec<(usize, usize)>)>,
}

impl EvalSet {
    fn new(
        corpus: &Corpus,
        queries: &[String],
        distractors: &[String],
        config: &TrainConfig,
        pair_seed: u64,
        pairs_across_distractors: bool,
    ) -> Result<Self> {
        let all: Vec<String> = queries.iter().chain(distractors).cloned().collect();
        let snippets = grid_snippets(corpus, &all, config.snippet_size(), config.min_ink)?;
        let is_query: Vec<bool> = snippets.iter().map(|s| queries.contains(&s.writer_id)).collect();
        let pairs = match config.task {
            Task::Wi => None,
            Task::Wv => {
                let q: Vec<usize> = (0..snippets.len()).filter(|&i| is_query[i]).collect();
                let o: Vec<usize> = if pairs_across_distractors {
                    (0..snippets.len()).filter(|&i| !is_query[i]).collect()
                } else {
                    Vec::new()
                };
                Some(sample_pairs(&q, &o, &snippets, config.eval_pairs, pair_seed)?)
            }
        };
        Ok(Self {
            snippets,
            is_query,
            pairs,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Evaluation {
    metric: f64,
    threshold: Option<f64>,
}

impl EvalSet {
    /// mAP over the query subset, or accuracy at `threshold` (chosen on this set
    /// when `None`).
    fn evaluate(&self, net: &EmbeddingNetwork, threshold: Option<f64>) -> Result<(Evaluation, Vec<Tensor>)> {
        let embeddings = embed_all(net, &self.snippets)?;
        let eval = match &self.pairs {
            None => {
                let items: Vec<(&Tensor, &str)> = embeddings
                    .iter()
                    .zip(&self.snippets)
                    .map(|(e, s)| (e, s.writer_id.as_str()))
                    .collect();
                Evaluation {
                    metric: evaluate_map_subset(&items, &self.is_query)?.map,
                    threshold: None,
                }
            }
            Some((same, diff)) => {
                let scored = scored_pairs(&embeddings, same, diff)?;
                let (t, acc) = match threshold {
                    Some(t) => (t, evaluate_verification(&scored, t)?),
                    None => choose_threshold(&scored)?,
                };
                Evaluation {
                    metric: acc,
                    threshold: Some(t),
                }
            }
        };
        Ok((eval, embeddings))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch; absent for the untrained epoch 0.
    pub mean_loss: Option<f64>,
    pub validation: f64,
    pub test: Option<f64>,
}

/// Everything about a fold except the network, as written to `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub training_writers: Vec<String>,
    pub validation_writers: Vec<String>,
    pub best_epoch: usize,
    pub validation_metric: f64,
    /// Identification: mAP of test-writer queries against a gallery of test and
    /// training-pool snippets. Verification: accuracy on balanced test-writer
    /// pairs at the validation threshold. When every writer is in the pool,
    /// the held-out fold stands in for the test writers and this equals the
    /// validation metric.
    pub test_metric: f64,
    /// Identification only: mAP with a gallery of test-writer snippets alone.
    pub test_map_test_only: Option<f64>,
    /// Identification only: page-level mAP over test pages.
    pub test_page_map: Option<f64>,
    pub threshold: Option<f64>,
    /// Per-batch training loss.
    pub loss_trace: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub metrics: FoldMetrics,
    pub network: EmbeddingNetwork,
}

fn epoch_seed(config: &TrainConfig, fold: usize, epoch: usize) -> u64 {
    mix(mix(mix(config.seed, 0x7a1), fold as u64), epoch as u64)
}

/// Trains fold `fold` of the split's training pool. `observe` sees every
/// training batch before its gradient step.
pub fn train_fold_observed(
    corpus: &Corpus,
    split: &WriterSplit,
    config: &TrainConfig,
    fold: usize,
    dataset: Option<&str>,
    observe: &mut dyn FnMut(&Batch),
) -> Result<FoldResult> {
    config.validate()?;
    let parts = fold_partition(&split.train_writers, config.folds)?;
    if fold >= config.folds {
        return Err(Error::Config(format!("fold {fold} out of range for {} folds", config.folds)));
    }
    let validation_writers = parts[fold].clone();
    let training_writers: Vec<String> = split
        .train_writers
        .iter()
        .filter(|w| !validation_writers.contains(w))
        .cloned()
        .collect();
    let pages: Vec<(String, Vec<&PageRecord>)> = training_writers
        .iter()
        .map(|w| (w.clone(), corpus.pages_of(w).collect::<Vec<_>>()))
        .collect();
    if let Some((w, _)) = pages.iter().find(|(_, p)| p.is_empty()) {
        return Err(Error::Data(format!("training writer {w} has no pages")));
    }

    // With no test writers outside the pool, the held-out fold is the test set.
    let cross_test = split.test_writers.is_empty();
    if cross_test && config.selection == Selection::Validation {
        return Err(Error::Config(
            "every writer is in the cross-validation pool, so the held-out fold is the test set; \
             use selection \"test\" or \"final\""
                .into(),
        ));
    }

    let fold_seed = mix(config.seed, 0xf01d + fold as u64);
    let validation = EvalSet::new(corpus, &validation_writers, &training_writers, config, fold_seed, true)?;
    let test = if cross_test {
        None
    } else {
        Some(EvalSet::new(corpus, &split.test_writers, &split.train_writers, config, mix(fold_seed, 1), false)?)
    };
    // verification thresholds must not be fit on the pairs they are scored on
    let calibration = if cross_test && config.task == Task::Wv {
        Some(EvalSet::new(corpus, &training_writers, &[], config, mix(fold_seed, 2), false)?)
    } else {
        None
    };
    let test_set = test.as_ref().unwrap_or(&validation);

    let mut net = EmbeddingNetwork::build(&config.model)?;
    let adam = AdamConfig::new(config.learning_rate);
    let mut state = AdamState::new(&net.params);

    let score = |net: &EmbeddingNetwork| -> Result<(Evaluation, Option<Evaluation>)> {
        if cross_test {
            let threshold = match &calibration {
                Some(c) => c.evaluate(net, None)?.0.threshold,
                None => None,
            };
            let (v, _) = validation.evaluate(net, threshold)?;
            return Ok((v, Some(v)));
        }
        let (v, _) = validation.evaluate(net, None)?;
        let t = match (config.selection, &test) {
            (Selection::Test, Some(test)) => Some(test.evaluate(net, v.threshold)?.0),
            _ => None,
        };
        Ok((v, t))
    };
    let selection_metric = |v: &Evaluation, t: &Option<Evaluation>| match config.selection {
        Selection::Test => t.expect("test evaluated under test selection").metric,
        Selection::Validation | Selection::Final => v.metric,
    };

    let (v0, t0) = score(&net)?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        mean_loss: None,
        validation: v0.metric,
        test: t0.map(|t| t.metric),
    }];
    let mut best = (0usize, selection_metric(&v0, &t0), v0, net.clone());
    let mut loss_trace = Vec::new();

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config, fold, epoch));
        let mut epoch_loss = 0.0;
        for _ in 0..config.batches_per_epoch {
            let batch = sample_batch(&pages, config, &mut rng)?;
            observe(&batch);
            let (loss, grads) = batch_gradients(&net, &batch, config.margin)
                .map_err(|e| divergence_context(e, fold, epoch))?;
            adam_step(&mut net.params, &grads, &mut state, &adam)?;
            if net.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence(format!("fold {fold} epoch {epoch}: parameters became non-finite")));
            }
            loss_trace.push(loss as f64);
            epoch_loss += loss as f64;
        }
        let (v, t) = score(&net)?;
        let m = selection_metric(&v, &t);
        epochs.push(EpochRecord {
            epoch,
            mean_loss: (config.batches_per_epoch > 0).then(|| epoch_loss / config.batches_per_epoch as f64),
            validation: v.metric,
            test: t.map(|t| t.metric),
        });
        if m > best.1 || config.selection == Selection::Final {
            best = (epoch, m, v, net.clone());
        }
    }

    let (best_epoch, _, best_validation, mut network) = best;
    let (test_eval, test_embeddings) = test_set.evaluate(&network, best_validation.threshold)?;
    let (test_map_test_only, test_page_map) = match config.task {
        Task::Wi => {
            let keep: Vec<usize> = (0..test_set.snippets.len()).filter(|&i| test_set.is_query[i]).collect();
            let snippets: Vec<Snippet> = keep.iter().map(|&i| test_set.snippets[i].clone()).collect();
            let embeddings: Vec<Tensor> = keep.iter().map(|&i| test_embeddings[i].clone()).collect();
            let items: Vec<(&Tensor, &str)> = embeddings
                .iter()
                .zip(&snippets)
                .map(|(e, s)| (e, s.writer_id.as_str()))
                .collect();
            (
                Some(evaluate_map(&items)?.map),
                Some(page_level_map(&snippets, &embeddings)?),
            )
        }
        Task::Wv => (None, None),
    };
    network.set_provenance(Provenance {
        loss: Some(config.task.loss_name().into()),
        dataset: dataset.map(String::from),
        fold: Some(fold),
        epoch: Some(best_epoch),
    });
    Ok(FoldResult {
        metrics: FoldMetrics {
            fold,
            training_writers,
            validation_writers,
            best_epoch,
            validation_metric: best_validation.metric,
            test_metric: test_eval.metric,
            test_map_test_only,
            test_page_map,
            threshold: best_validation.threshold,
            loss_trace,
            epochs,
        },
        network,
    })
}

fn divergence_context(e: Error, fold: usize, epoch: usize) -> Error {
    match e {
        Error::Divergence(msg) => Error::Divergence(format!("fold {fold} epoch {epoch}: {msg}")),
        Error::DegenerateEmbedding => {
            Error::Divergence(format!("fold {fold} epoch {epoch}: an embedding collapsed to zero"))
        }
        other => other,
    }
}

pub fn train_fold(corpus: &Corpus, split: &WriterSplit, config: &TrainConfig, fold: usize) -> Result<FoldResult> {
    train_fold_observed(corpus, split, config, fold, None, &mut |_| {})
}

/// `metrics.json`: every fold plus the selected one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub task: Task,
    pub metric: String,
    pub selection: Selection,
    pub split: WriterSplit,
    pub best_fold: usize,
    /// Test metric averaged over folds.
    pub mean_test_metric: f64,
    pub folds: Vec<FoldMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub best_fold: usize,
}

impl CrossValidation {
    pub fn best(&self) -> &FoldResult {
        &self.folds[self.best_fold]
    }

    pub fn report(&self, config: &TrainConfig, split: &WriterSplit) -> TrainingReport {
        TrainingReport {
            task: config.task,
            metric: config.task.metric_name().into(),
            selection: config.selection,
            split: split.clone(),
            best_fold: self.best_fold,
            mean_test_metric: self.folds.iter().map(|f| f.metrics.test_metric).sum::<f64>() / self.folds.len() as f64,
            folds: self.folds.iter().map(|f| f.metrics.clone()).collect(),
        }
    }
}

/// Runs every fold and picks the one with the highest selection metric
/// (earliest fold on ties).
pub fn cross_validate(
    corpus: &Corpus,
    split: &WriterSplit,
    config: &TrainConfig,
    dataset: Option<&str>,
) -> Result<CrossValidation> {
    let mut folds = Vec::with_capacity(config.folds);
    for fold in 0..config.folds {
        folds.push(train_fold_observed(corpus, split, config, fold, dataset, &mut |_| {})?);
    }
    let key = |f: &FoldResult| match config.selection {
        Selection::Test => f.metrics.test_metric,
        Selection::Validation | Selection::Final => f.metrics.validation_metric,
    };
    let mut best_fold = 0;
    for (i, f) in folds.iter().enumerate() {
        if key(f) > key(&folds[best_fold]) {
            best_fold = i;
        }
    }
    Ok(CrossValidation { folds, best_fold })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_loss(0.2, 0.6, 0.3), 0.0);
        assert!((triplet_loss(0.5, 0.6, 0.3) - 0.2).abs() < 1e-6);
        assert!((triplet_loss(0.4, 0.4, 0.3) - 0.3).abs() < 1e-7);
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(contrastive_loss(0.0, true, 0.7), 0.0);
        assert_eq!(contrastive_loss(0.6, false, 0.5), 0.0);
        assert!((contrastive_loss(0.2, false, 0.5) - 0.09).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut params = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let before = params.clone();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::zeros(&[2])], &mut state, &AdamConfig::new(0.1)).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = vec![Tensor::from_vec(vec![0.0, 0.0, 0.0])];
        let mut state = AdamState::new(&params);
        let g = Tensor::from_vec(vec![3.0, -0.5, 1e-3]);
        adam_step(&mut params, &[g], &mut state, &AdamConfig::new(0.01)).unwrap();
        for (&p, s) in params[0].data().iter().zip([-1.0f32, 1.0, -1.0]) {
            assert!((p - 0.01 * s).abs() < 1e-6, "{p}");
        }
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::new(&params);
        let r = adam_step(&mut params, &[Tensor::zeros(&[3])], &mut state, &AdamConfig::new(0.1));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn partition_arithmetic() {
        let pool: Vec<String> = (0..8).map(|i| format!("w{i}")).collect();
        let parts = fold_partition(&pool, 4).unwrap();
        assert!(parts.iter().all(|p| p.len() == 2));
        assert!(fold_partition(&pool[..3], 4).is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::wi().validate().is_ok());
        assert!(TrainConfig { margin: 0.0, ..TrainConfig::wi() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::wv() }.validate().is_err());
        assert!(TrainConfig { folds: 1, ..TrainConfig::wi() }.validate().is_err());
        assert_eq!(TrainConfig::wv().learning_rate, 0.001);
    }
}
