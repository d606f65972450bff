//! Deletion/insertion faithfulness of saliency maps.
//!
//! Only ink pixels are ever altered. They are ranked by descending saliency
//! (ties broken by a seeded shuffle), cut into `steps` near-equal batches, and
//! either whitened one batch at a time (deletion, starting from the snippet) or
//! blackened one batch at a time (insertion, starting from a white page). The
//! clamped cosine similarity to the original snippet traces a curve over the
//! altered-ink fraction; its trapezoid area is compared against random
//! orderings.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::error::{Error, Result};
use crate::metrics;
use crate::saliency::Embedder;
use crate::synth::mix;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Deletion,
    Insertion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    Saliency,
    Random,
}

/// Images produced by altering a snippet batch by batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AlterationSequence {
    pub mode: Mode,
    /// `steps + 1` images (a single image when the snippet has no ink).
    pub images: Vec<Tensor>,
    /// Altered-ink fraction of each image.
    pub fractions: Vec<f64>,
    /// Ink pixel indices in alteration order.
    pub ranking: Vec<usize>,
    /// Sizes of the contiguous batches cut from `ranking`.
    pub batch_sizes: Vec<usize>,
    /// The snippet had no ink to alter.
    pub degenerate: bool,
}

/// Splits `total` into `parts` contiguous batches whose sizes differ by at most
/// one, larger batches first.
pub fn batch_sizes(total: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    let (base, extra) = (total / parts, total % parts);
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

/// Ink pixels ordered by descending saliency. The ink indices are shuffled
/// with `seed` first and then stably sorted, so equal values keep a seeded
/// random order and `None` (no map) yields the plain random order.
pub fn rank_ink(pixels: &[f32], saliency: Option<&[f64]>, seed: u64) -> Vec<usize> {
    let mut ink: Vec<usize> = (0..pixels.len()).filter(|&i| pixels[i] == 0.0).collect();
    ink.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if let Some(s) = saliency {
        ink.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    }
    ink
}

pub fn alter_sequence(
    pixels: &Tensor,
    saliency: Option<&[f64]>,
    mode: Mode,
    steps: usize,
    seed: u64,
) -> Result<AlterationSequence> {
    if steps == 0 {
        return Err(Error::Precondition("at least one alteration step is required".into()));
    }
    let data = pixels.data();
    if let Some(bad) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Precondition(format!("snippet is not binary (found {bad})")));
    }
    if let Some(s) = saliency {
        if s.len() != data.len() {
            return Err(Error::Shape(format!(
                "saliency map has {} values for a snippet of {} pixels",
                s.len(),
                data.len()
            )));
        }
    }
    let ranking = rank_ink(data, saliency, seed);
    if ranking.is_empty() {
        return Ok(AlterationSequence {
            mode,
            images: vec![pixels.clone()],
            fractions: vec![0.0],
            ranking,
            batch_sizes: Vec::new(),
            degenerate: true,
        });
    }
    let sizes = batch_sizes(ranking.len(), steps.min(ranking.len()));
    let (mut current, fill) = match mode {
        Mode::Deletion => (data.to_vec(), 1.0),
        Mode::Insertion => (vec![1.0; data.len()], 0.0),
    };
    let shape = pixels.shape().to_vec();
    let mut images = vec![Tensor::new(shape.clone(), current.clone())?];
    let mut fractions = vec![0.0];
    let mut done = 0;
    for &size in &sizes {
        for &i in &ranking[done..done + size] {
            current[i] = fill;
        }
        done += size;
        images.push(Tensor::new(shape.clone(), current.clone())?);
        fractions.push(done as f64 / ranking.len() as f64);
    }
    Ok(AlterationSequence {
        mode,
        images,
        fractions,
        ranking,
        batch_sizes: sizes,
        degenerate: false,
    })
}

/// Area under a piecewise-linear curve.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    pub mode: Mode,
    pub ordering: Ordering,
    pub seed: u64,
    pub fractions: Vec<f64>,
    pub similarities: Vec<f64>,
    pub auc: f64,
    /// Indices of points whose image embedded to a zero vector (recorded as 0).
    pub degenerate_points: Vec<usize>,
}

/// Similarity of every image to `original`, clamped below at zero when
/// `clamp_negative` is set.
pub fn similarity_curve<E: Embedder>(
    model: &E,
    original: &Tensor,
    sequence: &AlterationSequence,
    ordering: Ordering,
    seed: u64,
    clamp_negative: bool,
) -> Result<FaithfulnessCurve> {
    if let Some(img) = sequence.images.iter().find(|i| i.shape() != original.shape()) {
        return Err(Error::Shape(format!(
            "altered image {:?} does not match the original {:?}",
            img.shape(),
            original.shape()
        )));
    }
    let reference = model.embed_image(original)?;
    let sims: Vec<Option<f64>> = sequence
        .images
        .par_iter()
        .map(|img| -> Result<Option<f64>> {
            if img == original {
                return Ok(Some(1.0));
            }
            let e = model.embed_image(img)?;
            match metrics::similarity(reference.data(), e.data()) {
                Ok(s) => Ok(Some(if clamp_negative { s.max(0.0) } else { s })),
                Err(Error::DegenerateEmbedding) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let degenerate_points = (0..sims.len()).filter(|&i| sims[i].is_none()).collect();
    let similarities: Vec<f64> = sims.into_iter().map(|s| s.unwrap_or(0.0)).collect();
    Ok(FaithfulnessCurve {
        mode: sequence.mode,
        ordering,
        seed,
        auc: trapezoid(&sequence.fractions, &similarities),
        fractions: sequence.fractions.clone(),
        similarities,
        degenerate_points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub steps: usize,
    /// Seed of the first random ordering; the saliency ordering breaks ties
    /// with the same seed.
    pub random_seed: u64,
    pub random_repeats: usize,
    pub clamp_negative: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            random_seed: 0,
            random_repeats: 3,
            clamp_negative: true,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.random_repeats == 0 {
            return Err(Error::Config("random_repeats must be positive".into()));
        }
        Ok(())
    }

    /// Seed of random ordering `repeat`.
    pub fn repeat_seed(&self, repeat: usize) -> u64 {
        mix(self.random_seed, repeat as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnippetScore {
    pub snippet_id: String,
    pub s_del: f64,
    pub r_del: f64,
    pub s_ins: f64,
    pub r_ins: f64,
    pub curves: Vec<FaithfulnessCurve>,
}

/// Saliency-ordered and random deletion/insertion AUCs for one snippet. The
/// random AUCs are the mean over `random_repeats` orderings.
pub fn score_snippet<E: Embedder>(
    model: &E,
    snippet_id: &str,
    pixels: &Tensor,
    map: &[f64],
    config: &ScoreConfig,
) -> Result<SnippetScore> {
    config.validate()?;
    if !pixels.data().contains(&0.0) {
        return Err(Error::Precondition(format!("snippet {snippet_id} has no ink pixels")));
    }
    let mut jobs: Vec<(Mode, Ordering, u64)> = Vec::new();
    for mode in [Mode::Deletion, Mode::Insertion] {
        jobs.push((mode, Ordering::Saliency, config.repeat_seed(0)));
        for r in 0..config.random_repeats {
            jobs.push((mode, Ordering::Random, config.repeat_seed(r)));
        }
    }
    let curves: Vec<FaithfulnessCurve> = jobs
        .iter()
        .map(|&(mode, ordering, seed)| {
            let m = (ordering == Ordering::Saliency).then_some(map);
            let seq = alter_sequence(pixels, m, mode, config.steps, seed)?;
            similarity_curve(model, pixels, &seq, ordering, seed, config.clamp_negative)
        })
        .collect::<Result<_>>()?;
    let auc = |mode: Mode, ordering: Ordering| {
        let aucs: Vec<f64> = curves
            .iter()
            .filter(|c| c.mode == mode && c.ordering == ordering)
            .map(|c| c.auc)
            .collect();
        aucs.iter().sum::<f64>() / aucs.len() as f64
    };
    Ok(SnippetScore {
        snippet_id: snippet_id.to_string(),
        s_del: auc(Mode::Deletion, Ordering::Saliency),
        r_del: auc(Mode::Deletion, Ordering::Random),
        s_ins: auc(Mode::Insertion, Ordering::Saliency),
        r_ins: auc(Mode::Insertion, Ordering::Random),
        curves,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnippetRecord {
    pub snippet_id: String,
    pub s_del: f64,
    pub r_del: f64,
    pub s_ins: f64,
    pub r_ins: f64,
    /// 1 iff the saliency ordering deletes faster than random (`r_del > s_del`).
    pub d: u8,
    /// 1 iff the saliency ordering inserts faster than random (`s_ins > r_ins`).
    pub i: u8,
    pub curves: Vec<FaithfulnessCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub steps: usize,
    pub random_seed: u64,
    pub random_repeats: usize,
    pub clamp_negative: bool,
    pub technique: String,
    pub model_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub config: ReportConfig,
    pub records: Vec<SnippetRecord>,
    pub auc_d: f64,
    pub auc_i: f64,
    /// Snippets that could not be scored, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Indicators and percentages over scored snippets, kept in the given order.
pub fn aggregate_report(
    scores: Vec<SnippetScore>,
    skipped: Vec<(String, String)>,
    config: ReportConfig,
) -> Result<FaithfulnessReport> {
    if scores.is_empty() {
        return Err(Error::Precondition("a faithfulness report needs at least one scored snippet".into()));
    }
    let n = scores.len() as f64;
    let records: Vec<SnippetRecord> = scores
        .into_iter()
        .map(|s| SnippetRecord {
            d: u8::from(s.r_del > s.s_del),
            i: u8::from(s.s_ins > s.r_ins),
            snippet_id: s.snippet_id,
            s_del: s.s_del,
            r_del: s.r_del,
            s_ins: s.s_ins,
            r_ins: s.r_ins,
            curves: s.curves,
        })
        .collect();
    let count = |f: fn(&SnippetRecord) -> u8| records.iter().map(|r| f(r) as usize).sum::<usize>() as f64;
    Ok(FaithfulnessReport {
        auc_d: 100.0 * count(|r| r.d) / n,
        auc_i: 100.0 * count(|r| r.i) / n,
        config,
        records,
        skipped,
    })
}

impl FaithfulnessReport {
    pub fn to_json(&self) -> Result<String> {
        canonical::to_file_string(self)
    }

    /// One row per snippet: id, s_del, r_del, s_ins, r_ins, d, i.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["snippet_id", "s_del", "r_del", "s_ins", "r_ins", "d", "i"])
            .map_err(csv_error)?;
        for r in &self.records {
            w.write_record([
                r.snippet_id.clone(),
                canonical::format_float(r.s_del),
                canonical::format_float(r.r_del),
                canonical::format_float(r.s_ins),
                canonical::format_float(r.r_ins),
                r.d.to_string(),
                r.i.to_string(),
            ])
            .map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("report.csv"), self.to_csv()?)?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_equal_batches() {
        assert_eq!(batch_sizes(10, 3), vec![4, 3, 3]);
        assert_eq!(batch_sizes(6, 3), vec![2, 2, 2]);
        assert_eq!(batch_sizes(2, 2), vec![1, 1]);
    }

    #[test]
    fn one_step_deletion_removes_all_ink() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let seq = alter_sequence(&t, None, Mode::Deletion, 1, 3).unwrap();
        assert_eq!(seq.images.len(), 2);
        assert_eq!(seq.images[0], t);
        assert_eq!(seq.images[1].data(), &[1.0; 4]);
        assert_eq!(seq.fractions, vec![0.0, 1.0]);
    }

    #[test]
    fn steps_capped_by_ink() {
        let t = Tensor::new(vec![1, 1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let seq = alter_sequence(&t, None, Mode::Insertion, 50, 0).unwrap();
        assert_eq!(seq.batch_sizes, vec![1, 1]);
        assert_eq!(seq.fractions, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn no_ink_is_degenerate() {
        let t = Tensor::full(&[1, 2, 2], 1.0);
        let seq = alter_sequence(&t, None, Mode::Deletion, 4, 0).unwrap();
        assert!(seq.degenerate);
        assert_eq!(seq.images.len(), 1);
    }

    #[test]
    fn trapezoid_of_constant() {
        assert_eq!(trapezoid(&[0.0, 0.5, 1.0], &[1.0, 1.0, 1.0]), 1.0);
        assert_eq!(trapezoid(&[0.0, 1.0], &[0.0, 1.0]), 0.5);
    }
}
