use std::fs;
use std::path::Path;

use graphoscope::jobs::*;
use graphoscope::synth::SynthConfig;
use graphoscope::training::{Selection, TrainConfig};
use graphoscope::{Error, ModelConfig};

fn tiny_pipeline(out: &Path) -> JobSpec {
    JobSpec {
        job: Job::Pipeline(PipelineJob {
            synth: SynthConfig {
                writers: 4,
                pages_per_writer: 2,
                page_size: 96,
                seed: 5,
            },
            split: SplitSpec { ratio: 1.0, seed: 1 },
            train: TrainConfig {
                batch_size: 8,
                writers_per_batch: 2,
                batches_per_epoch: 2,
                epochs: 1,
                folds: 2,
                selection: Selection::Final,
                model: ModelConfig {
                    base_channels: 4,
                    embedding_dim: 8,
                    input_size: 32,
                    ..ModelConfig::default()
                },
                ..TrainConfig::wi()
            },
            technique: Technique::Pixelwise,
            snippets: SnippetSelection {
                count: 3,
                ..SnippetSelection::default()
            },
            pixelwise: Default::default(),
            score: graphoscope::faithfulness::ScoreConfig {
                steps: 5,
                random_repeats: 2,
                ..Default::default()
            },
        }),
        out: out.to_path_buf(),
    }
}

fn files_below(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != RUN_MANIFEST_FILE {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_one_png_per_page_plus_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = JobSpec {
        job: Job::Synth(SynthConfig {
            writers: 8,
            pages_per_writer: 2,
            page_size: 64,
            seed: 7,
        }),
        out: dir.path().to_path_buf(),
    };
    let s = run(&spec).unwrap();
    let pngs = files_below(dir.path()).iter().filter(|(f, _)| f.ends_with(".png")).count();
    assert_eq!(pngs, 16);
    assert!(dir.path().join("manifest.json").exists());
    assert!(s.files.iter().any(|f| f.ends_with(RUN_MANIFEST_FILE)));
}

#[test]
fn pipeline_replay_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(&tiny_pipeline(a.path())).unwrap();
    replay(&a.path().join(RUN_MANIFEST_FILE), Some(b.path())).unwrap();
    let fa = files_below(a.path());
    let fb = files_below(b.path());
    assert!(fa.iter().any(|(f, _)| f == "score/report.json"));
    assert_eq!(fa.iter().filter(|(f, _)| f.starts_with("saliency/") && f.ends_with(".png")).count(), 3);
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
}

#[test]
fn scoring_with_no_qualifying_snippets_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");
    run(&JobSpec {
        job: Job::Synth(SynthConfig {
            writers: 2,
            pages_per_writer: 1,
            page_size: 64,
            seed: 0,
        }),
        out: corpus_dir.clone(),
    })
    .unwrap();
    let model = dir.path().join("m.gscm");
    graphoscope::EmbeddingNetwork::build(&ModelConfig {
        base_channels: 4,
        embedding_dim: 8,
        input_size: 32,
        ..ModelConfig::default()
    })
    .unwrap()
    .save(&model)
    .unwrap();
    let spec = JobSpec {
        job: Job::Score(ScoreJob {
            corpus: corpus_dir,
            model,
            technique: Technique::Random,
            snippets: SnippetSelection {
                min_ink: 1.0,
                ..SnippetSelection::default()
            },
            pixelwise: Default::default(),
            score: Default::default(),
        }),
        out: dir.path().join("score"),
    };
    let err = run(&spec).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("no snippets ≥ min_ink"), "{err}");
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_pipeline(&dir.path().join("never"));
    if let Job::Pipeline(p) = &mut spec.job {
        p.technique = Technique::Point;
    }
    let err = run(&spec).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(!dir.path().join("never").exists());
}

#[test]
fn job_specs_round_trip_through_canonical_json() {
    let spec = tiny_pipeline(Path::new("out"));
    let json = graphoscope::canonical::to_string(&RunManifest::new(spec.clone())).unwrap();
    assert!(json.contains(r#""kind":"pipeline""#));
    let back: RunManifest = serde_json::from_str(&json).unwrap();
    assert_eq!(back.spec, spec);
}
