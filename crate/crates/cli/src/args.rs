//! Command-line flags and their translation into [`JobSpec`]s.

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use graphoscope::faithfulness::ScoreConfig;
use graphoscope::jobs::{
    IngestJob, Job, JobSpec, SaliencyJob, ScoreJob, SnippetSelection, SplitSpec, Technique, TrainJob,
};
use graphoscope::saliency::PixelwiseConfig;
use graphoscope::synth::SynthConfig;
use graphoscope::training::{Selection, Task, TrainConfig};
use graphoscope::DepthPreset;
use serde::de::DeserializeOwned;

/// Parses a lowercase enum value through its serde name.
fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown value {s:?}"))
}

fn point(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected ROW,COL")?;
    let n = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((n(r)?, n(c)?))
}

#[derive(Debug, Parser)]
#[command(name = "graphoscope", version, about = "Handwriting embeddings, saliency maps and faithfulness scores")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic handwriting corpus.
    Synth(SynthArgs),
    /// Binarize a directory of `<writer>/<page>.png` scans into a corpus.
    Ingest(IngestArgs),
    /// Cross-validate an embedding network.
    Train(TrainArgs),
    /// Write saliency maps for selected snippets.
    Saliency(SaliencyArgs),
    /// Deletion/insertion faithfulness report.
    Score(ScoreArgs),
    /// Run a job described by a JSON job spec.
    Run {
        spec: PathBuf,
    },
    /// Rerun the job recorded in a `run-manifest.json`.
    Replay {
        manifest: PathBuf,
        /// Write to this directory instead of the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve snippets, embeddings, saliency and scores over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub writers: usize,
    #[arg(long, default_value_t = 4)]
    pub pages: usize,
    #[arg(long, default_value_t = 256)]
    pub page_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Luminance below this (in [0, 1]) is ink.
    #[arg(long, default_value_t = graphoscope::corpus::DEFAULT_THRESHOLD)]
    pub threshold: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `wi` (triplet loss, mAP) or `wv` (contrastive loss, accuracy).
    #[arg(long, value_parser = serde_value::<Task>, default_value = "wi")]
    pub task: Task,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long)]
    pub margin: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub writers_per_batch: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub min_ink: Option<f64>,
    #[arg(long)]
    pub eval_pairs: Option<usize>,
    /// `validation`, `test` or `final`.
    #[arg(long, value_parser = serde_value::<Selection>)]
    pub selection: Option<Selection>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Share of writers in the cross-validation pool; 1 pools all of them.
    #[arg(long, default_value_t = 0.75)]
    pub split_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, value_parser = serde_value::<DepthPreset>)]
    pub depth: Option<DepthPreset>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        let mut c = TrainConfig::for_task(self.task);
        c.seed = self.seed;
        c.model.seed = self.model_seed;
        macro_rules! set {
            ($($field:ident).+ = $value:expr) => {
                if let Some(v) = $value {
                    c.$($field).+ = v;
                }
            };
        }
        set!(epochs = self.epochs);
        set!(folds = self.folds);
        set!(learning_rate = self.learning_rate);
        set!(margin = self.margin);
        set!(batch_size = self.batch_size);
        set!(writers_per_batch = self.writers_per_batch);
        set!(batches_per_epoch = self.batches_per_epoch);
        set!(min_ink = self.min_ink);
        set!(eval_pairs = self.eval_pairs);
        set!(selection = self.selection);
        set!(model.depth_preset = self.depth);
        set!(model.base_channels = self.base_channels);
        set!(model.embedding_dim = self.embedding_dim);
        set!(model.input_size = self.input_size);
        c
    }
}

#[derive(Debug, Args)]
pub struct SelectionArgs {
    /// Explicit snippet ids (`page:row:col:size`); overrides the grid selection.
    #[arg(long = "snippet")]
    pub snippets: Vec<String>,
    /// Restrict the grid selection to these writers.
    #[arg(long = "writer")]
    pub writers: Vec<String>,
    /// Evenly spaced grid snippets to take.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0.02)]
    pub min_ink: f64,
}

impl SelectionArgs {
    fn selection(&self) -> SnippetSelection {
        SnippetSelection {
            ids: (!self.snippets.is_empty()).then(|| self.snippets.clone()),
            writers: (!self.writers.is_empty()).then(|| self.writers.clone()),
            count: self.count,
            min_ink: self.min_ink,
        }
    }
}

#[derive(Debug, Args)]
pub struct PixelwiseArgs {
    /// Masked variants averaged per pixel-wise map.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Probability of whitening a pixel in a variant.
    #[arg(long, default_value_t = 0.1)]
    pub p: f64,
    #[arg(long = "map-seed", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub signed: bool,
}

impl PixelwiseArgs {
    fn config(&self) -> PixelwiseConfig {
        PixelwiseConfig {
            n: self.n,
            mask_probability: self.p,
            seed: self.seed,
            signed: self.signed,
        }
    }
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `pixelwise`, `overall`, `point` or `random`.
    #[arg(long, value_parser = serde_value::<Technique>, default_value = "pixelwise")]
    pub technique: Technique,
    #[command(flatten)]
    pub select: SelectionArgs,
    /// Reference snippet for overall and point-specific maps.
    #[arg(long)]
    pub reference: Option<String>,
    /// `ROW,COL` in the query snippet.
    #[arg(long, value_parser = point)]
    pub point: Option<(usize, usize)>,
    #[command(flatten)]
    pub pixelwise: PixelwiseArgs,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `pixelwise`, `overall` or `random`.
    #[arg(long, value_parser = serde_value::<Technique>, default_value = "pixelwise")]
    pub technique: Technique,
    #[command(flatten)]
    pub select: SelectionArgs,
    #[command(flatten)]
    pub pixelwise: PixelwiseArgs,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub random_seed: u64,
    #[arg(long, default_value_t = 3)]
    pub random_repeats: usize,
    /// Keep negative similarities instead of clamping them to zero.
    #[arg(long)]
    pub no_clamp: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Model files; each is served under its file stem.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
}

/// The job a pipeline subcommand stands for; `None` for `replay` and `serve`.
pub fn job_spec(command: &Command) -> Option<JobSpec> {
    let (job, out) = match command {
        Command::Synth(a) => (
            Job::Synth(SynthConfig {
                writers: a.writers,
                pages_per_writer: a.pages,
                page_size: a.page_size,
                seed: a.seed,
            }),
            &a.out,
        ),
        Command::Ingest(a) => (
            Job::Ingest(IngestJob {
                input: a.input.clone(),
                threshold: a.threshold,
            }),
            &a.out,
        ),
        Command::Train(a) => (
            Job::Train(TrainJob {
                corpus: a.corpus.clone(),
                split: SplitSpec {
                    ratio: a.split_ratio,
                    seed: a.split_seed,
                },
                config: a.config(),
            }),
            &a.out,
        ),
        Command::Saliency(a) => (
            Job::Saliency(SaliencyJob {
                corpus: a.corpus.clone(),
                model: a.model.clone(),
                technique: a.technique,
                snippets: a.select.selection(),
                reference: a.reference.clone(),
                point: a.point,
                pixelwise: a.pixelwise.config(),
            }),
            &a.out,
        ),
        Command::Score(a) => (
            Job::Score(ScoreJob {
                corpus: a.corpus.clone(),
                model: a.model.clone(),
                technique: a.technique,
                snippets: a.select.selection(),
                pixelwise: a.pixelwise.config(),
                score: ScoreConfig {
                    steps: a.steps,
                    random_seed: a.random_seed,
                    random_repeats: a.random_repeats,
                    clamp_negative: !a.no_clamp,
                },
            }),
            &a.out,
        ),
        Command::Run { .. } | Command::Replay { .. } | Command::Serve(_) => return None,
    };
    Some(JobSpec { job, out: out.clone() })
}
