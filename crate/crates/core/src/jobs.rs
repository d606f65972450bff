//! Pipeline stages as serializable jobs. A [`JobSpec`] holds every resolved
//! setting and seed, is written next to its artifacts as `run-manifest.json`,
//! and replaying it reproduces the artifacts byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::corpus::{split_writers, Corpus, Snippet, SnippetId, WriterSplit, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::faithfulness::{aggregate_report, score_snippet, FaithfulnessReport, ReportConfig, ScoreConfig};
use crate::model::EmbeddingNetwork;
use crate::saliency::{overall_saliency_pair, pixelwise_saliency, point_specific_map, random_map, PixelwiseConfig, SaliencyMap};
use crate::synth::{mix, synth_generate, SynthConfig};
use crate::training::{cross_validate, grid_snippets, TrainConfig, TrainingReport};

pub const RUN_MANIFEST_FILE: &str = "run-manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const MODEL_FILE: &str = "model.gscm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Share of writers in the cross-validation pool; 1 pools every writer.
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { ratio: 0.75, seed: 0 }
    }
}

/// Which snippets a saliency or scoring job covers: explicit ids, or `count`
/// evenly spaced grid snippets with at least `min_ink` ink.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnippetSelection {
    pub ids: Option<Vec<String>>,
    pub writers: Option<Vec<String>>,
    pub count: usize,
    pub min_ink: f64,
}

impl Default for SnippetSelection {
    fn default() -> Self {
        Self {
            ids: None,
            writers: None,
            count: 100,
            min_ink: 0.02,
        }
    }
}

impl SnippetSelection {
    pub fn resolve(&self, corpus: &Corpus, size: usize) -> Result<Vec<Snippet>> {
        if let Some(ids) = &self.ids {
            return ids
                .iter()
                .map(|s| {
                    let id: SnippetId = s.parse()?;
                    if id.size != size {
                        return Err(Error::Precondition(format!(
                            "snippet {id} has size {}, the model expects {size}",
                            id.size
                        )));
                    }
                    corpus.snippet(&id)
                })
                .collect();
        }
        let writers = self.writers.clone().unwrap_or_else(|| corpus.writers());
        let all = grid_snippets(corpus, &writers, size, self.min_ink)?;
        if all.is_empty() || self.count == 0 {
            return Err(Error::Data(format!("no snippets ≥ min_ink {}", self.min_ink)));
        }
        if self.count >= all.len() {
            return Ok(all);
        }
        Ok((0..self.count).map(|i| all[i * all.len() / self.count].clone()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    Pixelwise,
    /// Similarity decomposition; without a reference the snippet is compared
    /// with itself.
    Overall,
    /// Point-specific map over the reference; saliency jobs only.
    Point,
    /// Uniform noise, the scoring control.
    Random,
}

impl Technique {
    pub fn name(self) -> &'static str {
        match self {
            Technique::Pixelwise => "pixelwise",
            Technique::Overall => "overall",
            Technique::Point => "point",
            Technique::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestJob {
    pub input: PathBuf,
    pub threshold: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub corpus: PathBuf,
    pub split: SplitSpec,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyJob {
    pub corpus: PathBuf,
    pub model: PathBuf,
    pub technique: Technique,
    pub snippets: SnippetSelection,
    /// Second snippet for overall and point-specific maps.
    pub reference: Option<String>,
    /// `(row, col)` in each selected snippet, for point-specific maps.
    pub point: Option<(usize, usize)>,
    pub pixelwise: PixelwiseConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreJob {
    pub corpus: PathBuf,
    pub model: PathBuf,
    pub technique: Technique,
    pub snippets: SnippetSelection,
    pub pixelwise: PixelwiseConfig,
    pub score: ScoreConfig,
}

/// `synth → train → saliency → score` in one output tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineJob {
    pub synth: SynthConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub technique: Technique,
    pub snippets: SnippetSelection,
    pub pixelwise: PixelwiseConfig,
    pub score: ScoreConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum Job {
    Synth(SynthConfig),
    Ingest(IngestJob),
    Train(TrainJob),
    Saliency(SaliencyJob),
    Score(ScoreJob),
    Pipeline(PipelineJob),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    #[serde(flatten)]
    pub job: Job,
    pub out: PathBuf,
}

/// `run-manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub spec: JobSpec,
}

impl RunManifest {
    pub fn new(spec: JobSpec) -> Self {
        Self {
            tool: "graphoscope".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            spec,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn validate_pixelwise(c: &PixelwiseConfig) -> Result<()> {
    if c.n == 0 {
        return Err(Error::Config("pixel-wise saliency needs n ≥ 1 variants".into()));
    }
    if !(0.0..1.0).contains(&c.mask_probability) {
        return Err(Error::Config(format!("mask probability {} outside [0, 1)", c.mask_probability)));
    }
    Ok(())
}

fn validate_split(s: &SplitSpec) -> Result<()> {
    if !(s.ratio > 0.0 && s.ratio <= 1.0) {
        return Err(Error::Config(format!("split ratio {} must lie in (0, 1]", s.ratio)));
    }
    Ok(())
}

fn validate_score_technique(t: Technique) -> Result<()> {
    if t == Technique::Point {
        return Err(Error::Config(
            "point-specific maps need a chosen point and reference; score with pixelwise, overall or random".into(),
        ));
    }
    Ok(())
}

impl JobSpec {
    /// Checks every embedded configuration before anything runs.
    pub fn validate(&self) -> Result<()> {
        match &self.job {
            Job::Synth(c) => {
                if c.writers < 2 || c.pages_per_writer == 0 {
                    return Err(Error::Config("synth needs at least 2 writers and 1 page each".into()));
                }
            }
            Job::Ingest(j) => {
                if !(0.0..=1.0).contains(&j.threshold) {
                    return Err(Error::Config(format!("threshold {} outside [0, 1]", j.threshold)));
                }
            }
            Job::Train(j) => {
                validate_split(&j.split)?;
                j.config.validate()?;
            }
            Job::Saliency(j) => {
                validate_pixelwise(&j.pixelwise)?;
                if j.technique == Technique::Point && (j.reference.is_none() || j.point.is_none()) {
                    return Err(Error::Config("point-specific maps need --reference and --point".into()));
                }
            }
            Job::Score(j) => {
                validate_pixelwise(&j.pixelwise)?;
                validate_score_technique(j.technique)?;
                j.score.validate()?;
            }
            Job::Pipeline(j) => {
                validate_split(&j.split)?;
                j.train.validate()?;
                validate_pixelwise(&j.pixelwise)?;
                validate_score_technique(j.technique)?;
                j.score.validate()?;
            }
        }
        Ok(())
    }
}

/// What a finished job produced, for the command line to print.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub kind: String,
    pub out: PathBuf,
    pub files: Vec<PathBuf>,
    /// Headline number: best-fold test metric for training, insertion AUC for
    /// scoring.
    pub headline: Option<(String, f64)>,
}

/// Validates, runs, and writes `run-manifest.json` into the output directory.
pub fn run(spec: &JobSpec) -> Result<RunSummary> {
    spec.validate()?;
    fs::create_dir_all(&spec.out)?;
    let out = &spec.out;
    let mut summary = match &spec.job {
        Job::Synth(c) => run_synth(c, out)?,
        Job::Ingest(j) => run_ingest(j, out)?,
        Job::Train(j) => {
            let corpus = load_corpus(&j.corpus)?;
            run_train(&corpus, &j.split, &j.config, &dataset_name(&j.corpus), out)?
        }
        Job::Saliency(j) => run_saliency(j, out)?,
        Job::Score(j) => {
            let corpus = load_corpus(&j.corpus)?;
            let model = EmbeddingNetwork::load(&j.model)?;
            run_score(&corpus, &model, j.technique, &j.snippets, &j.pixelwise, &j.score, out)?
        }
        Job::Pipeline(j) => run_pipeline(j, out)?,
    };
    let manifest = out.join(RUN_MANIFEST_FILE);
    fs::write(&manifest, canonical::to_file_string(&RunManifest::new(spec.clone()))?)?;
    summary.files.push(manifest);
    Ok(summary)
}

/// Reruns a recorded job, optionally into a different output directory.
pub fn replay(manifest: &Path, out: Option<&Path>) -> Result<RunSummary> {
    let mut spec = RunManifest::load(manifest)?.spec;
    if let Some(out) = out {
        spec.out = out.to_path_buf();
    }
    run(&spec)
}

/// Reads a corpus directory of `<writer>/<page>.png` files.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::ingest_dir(dir, DEFAULT_THRESHOLD)
}

fn dataset_name(corpus: &Path) -> String {
    corpus
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into())
}

fn summary(kind: &str, out: &Path) -> RunSummary {
    RunSummary {
        kind: kind.into(),
        out: out.to_path_buf(),
        files: Vec::new(),
        headline: None,
    }
}

fn run_synth(config: &SynthConfig, out: &Path) -> Result<RunSummary> {
    let synth = synth_generate(config)?;
    let manifest = synth.corpus.write_dir(out)?;
    let mut s = summary("synth", out);
    s.files = manifest
        .writers
        .iter()
        .flat_map(|w| w.pages.iter().map(|p| out.join(&p.file)))
        .collect();
    s.files.push(out.join(crate::corpus::MANIFEST_FILE));
    Ok(s)
}

fn run_ingest(job: &IngestJob, out: &Path) -> Result<RunSummary> {
    let corpus = Corpus::ingest_dir(&job.input, job.threshold)?;
    corpus.write_dir(out)?;
    let mut s = summary("ingest", out);
    s.files.push(out.join(crate::corpus::MANIFEST_FILE));
    Ok(s)
}

/// Cross-validates and writes `fold-<k>.gscm`, the selected fold as
/// `model.gscm`, and `metrics.json`.
pub fn run_train(
    corpus: &Corpus,
    split: &SplitSpec,
    config: &TrainConfig,
    dataset: &str,
    out: &Path,
) -> Result<RunSummary> {
    let writer_split: WriterSplit = split_writers(&corpus.writers(), split.ratio, split.seed)?;
    let cv = cross_validate(corpus, &writer_split, config, Some(dataset))?;
    fs::create_dir_all(out)?;
    let mut s = summary("train", out);
    for f in &cv.folds {
        let path = out.join(format!("fold-{}.gscm", f.metrics.fold));
        f.network.save(&path)?;
        s.files.push(path);
    }
    let model = out.join(MODEL_FILE);
    cv.best().network.save(&model)?;
    s.files.push(model);
    let report: TrainingReport = cv.report(config, &writer_split);
    let metrics = out.join(METRICS_FILE);
    fs::write(&metrics, canonical::to_file_string(&report)?)?;
    s.files.push(metrics);
    s.headline = Some((format!("best fold test {}", report.metric), cv.best().metrics.test_metric));
    Ok(s)
}

/// File stem for a snippet id (`:` is not portable in file names).
pub fn map_stem(id: &str) -> String {
    id.replace(':', "_")
}

/// The map a scoring run attaches to `snippet`.
pub fn scoring_map(
    model: &EmbeddingNetwork,
    snippet: &Snippet,
    technique: Technique,
    pixelwise: &PixelwiseConfig,
    seed: u64,
) -> Result<SaliencyMap> {
    let size = snippet.size();
    match technique {
        Technique::Pixelwise => pixelwise_saliency(model, snippet, pixelwise),
        Technique::Overall => Ok(overall_saliency_pair(model, snippet, snippet)?.0),
        Technique::Random => random_map(size, size, &snippet.id().to_string(), seed),
        Technique::Point => Err(Error::Config("point-specific maps are not scored".into())),
    }
}

fn random_seed_for(pixelwise: &PixelwiseConfig, index: usize) -> u64 {
    mix(mix(pixelwise.seed, 0x7a4d), index as u64)
}

fn run_saliency(job: &SaliencyJob, out: &Path) -> Result<RunSummary> {
    let corpus = load_corpus(&job.corpus)?;
    let model = EmbeddingNetwork::load(&job.model)?;
    let snippets = job.snippets.resolve(&corpus, model.input_size())?;
    let reference = match &job.reference {
        Some(r) => Some(corpus.snippet(&r.parse()?)?),
        None => None,
    };
    let maps: Vec<Vec<(String, SaliencyMap)>> = snippets
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let stem = map_stem(&q.id().to_string());
            Ok(match (job.technique, &reference) {
                (Technique::Overall, Some(r)) => {
                    let (mq, mr, _) = overall_saliency_pair(&model, q, r)?;
                    let pair = format!("{stem}__{}", map_stem(&r.id().to_string()));
                    vec![(format!("{pair}_query"), mq), (format!("{pair}_reference"), mr)]
                }
                (Technique::Point, Some(r)) => {
                    let point = job.point.expect("validated");
                    let m = point_specific_map(&model, q, r, point)?;
                    vec![(format!("{stem}__{}_point", map_stem(&r.id().to_string())), m)]
                }
                (t, _) => vec![(
                    format!("{stem}_{}", t.name()),
                    scoring_map(&model, q, t, &job.pixelwise, random_seed_for(&job.pixelwise, i))?,
                )],
            })
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    let mut s = summary("saliency", out);
    for (stem, map) in maps.into_iter().flatten() {
        let (png, json) = map.save(out, &stem)?;
        s.files.push(png);
        s.files.push(json);
    }
    Ok(s)
}

/// Maps and faithfulness scores for the selected snippets; writes
/// `report.json` and `report.csv`.
pub fn score_report(
    corpus: &Corpus,
    model: &EmbeddingNetwork,
    technique: Technique,
    selection: &SnippetSelection,
    pixelwise: &PixelwiseConfig,
    score: &ScoreConfig,
) -> Result<FaithfulnessReport> {
    validate_score_technique(technique)?;
    let snippets = selection.resolve(corpus, model.input_size())?;
    let outcomes: Vec<Result<_>> = snippets
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let map = scoring_map(model, s, technique, pixelwise, random_seed_for(pixelwise, i))?;
            score_snippet(model, &s.id().to_string(), &s.pixels, &map.values, score)
        })
        .collect();
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for (s, outcome) in snippets.iter().zip(outcomes) {
        match outcome {
            Ok(score) => scores.push(score),
            Err(e @ (Error::Divergence(_) | Error::Config(_))) => return Err(e),
            Err(e) => skipped.push((s.id().to_string(), e.to_string())),
        }
    }
    if scores.is_empty() {
        return Err(Error::Data(format!(
            "no snippets ≥ min_ink {} could be scored",
            selection.min_ink
        )));
    }
    aggregate_report(
        scores,
        skipped,
        ReportConfig {
            steps: score.steps,
            random_seed: score.random_seed,
            random_repeats: score.random_repeats,
            clamp_negative: score.clamp_negative,
            technique: technique.name().into(),
            model_id: format!("{:016x}", model.checksum()),
        },
    )
}

fn run_score(
    corpus: &Corpus,
    model: &EmbeddingNetwork,
    technique: Technique,
    selection: &SnippetSelection,
    pixelwise: &PixelwiseConfig,
    score: &ScoreConfig,
    out: &Path,
) -> Result<RunSummary> {
    let report = score_report(corpus, model, technique, selection, pixelwise, score)?;
    report.save(out)?;
    let mut s = summary("score", out);
    s.files = vec![out.join("report.json"), out.join("report.csv")];
    s.headline = Some(("auc_i".into(), report.auc_i));
    Ok(s)
}

fn run_pipeline(job: &PipelineJob, out: &Path) -> Result<RunSummary> {
    let corpus_dir = out.join("corpus");
    let mut s = summary("pipeline", out);
    s.files.extend(run_synth(&job.synth, &corpus_dir)?.files);
    // train and score on the pages as written, exactly as a separate run would
    let corpus = load_corpus(&corpus_dir)?;
    let train = run_train(&corpus, &job.split, &job.train, "corpus", &out.join("train"))?;
    s.files.extend(train.files);
    let model_path = out.join("train").join(MODEL_FILE);
    let saliency = SaliencyJob {
        corpus: corpus_dir.clone(),
        model: model_path.clone(),
        technique: job.technique,
        snippets: job.snippets.clone(),
        reference: None,
        point: None,
        pixelwise: job.pixelwise,
    };
    s.files.extend(run_saliency(&saliency, &out.join("saliency"))?.files);
    let model = EmbeddingNetwork::load(&model_path)?;
    let scored = run_score(
        &corpus,
        &model,
        job.technique,
        &job.snippets,
        &job.pixelwise,
        &job.score,
        &out.join("score"),
    )?;
    s.files.extend(scored.files);
    s.headline = scored.headline;
    Ok(s)
}
