//! Retrieval (mAP) and verification (thresholded accuracy) metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// Average precision per item; `None` for items that were not queried or had
    /// no relevant counterpart.
    pub average_precision: Vec<Option<f64>>,
    /// Queries without any relevant item.
    pub excluded: usize,
}

/// Cosine similarity in 64-bit, used by every ranking in this module.
pub fn similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    tensor::cosine(&a, &b).ok_or(Error::DegenerateEmbedding)
}

/// Full similarity matrix; `sim[i][i]` is unused.
pub fn similarity_matrix(embeddings: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    let n = embeddings.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = similarity(embeddings[i].data(), embeddings[j].data())?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    Ok(sim)
}

/// Average precision of query `q` given a similarity row. Other items are ranked
/// by descending similarity, ties broken by ascending index.
pub fn average_precision(q: usize, sim: &[f64], labels: &[&str]) -> Option<f64> {
    let mut order: Vec<usize> = (0..labels.len()).filter(|&j| j != q).collect();
    order.sort_by(|&a, &b| sim[b].total_cmp(&sim[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &j) in order.iter().enumerate() {
        if labels[j] == labels[q] {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// mAP where only items with `is_query[i]` act as queries; every item is in the gallery.
pub fn evaluate_map_subset(items: &[(&Tensor, &str)], is_query: &[bool]) -> Result<MapReport> {
    if items.len() < 2 {
        return Err(Error::Precondition(format!("mAP needs at least 2 items, got {}", items.len())));
    }
    let embeddings: Vec<&Tensor> = items.iter().map(|(e, _)| *e).collect();
    let labels: Vec<&str> = items.iter().map(|(_, l)| *l).collect();
    let sim = similarity_matrix(&embeddings)?;
    let mut average_precision = vec![None; items.len()];
    let mut excluded = 0;
    for q in 0..items.len() {
        if !is_query[q] {
            continue;
        }
        match self::average_precision(q, &sim[q], &labels) {
            Some(ap) => average_precision[q] = Some(ap),
            None => excluded += 1,
        }
    }
    let aps: Vec<f64> = average_precision.iter().flatten().copied().collect();
    if aps.is_empty() {
        return Err(Error::Precondition("every query lacks a relevant item; mAP is undefined".into()));
    }
    Ok(MapReport {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        average_precision,
        excluded,
    })
}

/// Mean average precision with every item used as a query in turn.
pub fn evaluate_map(items: &[(&Tensor, &str)]) -> Result<MapReport> {
    evaluate_map_subset(items, &vec![true; items.len()])
}

/// Predicts "same writer" iff `similarity >= threshold`.
pub fn evaluate_verification(pairs: &[(f64, bool)], threshold: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Precondition("verification accuracy of an empty pair list".into()));
    }
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::Precondition(format!("threshold {threshold} outside [-1, 1]")));
    }
    let correct = pairs.iter().filter(|&&(s, same)| (s >= threshold) == same).count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Sweeps thresholds at midpoints between adjacent distinct scores, plus one
/// below and one above every score, and returns the lowest threshold with the
/// best accuracy.
pub fn choose_threshold(pairs: &[(f64, bool)]) -> Result<(f64, f64)> {
    let positives = pairs.iter().filter(|p| p.1).count();
    if positives == 0 || positives == pairs.len() {
        return Err(Error::Precondition("threshold selection needs pairs of both classes".into()));
    }
    let mut scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut candidates = vec![-1.0];
    candidates.extend(scores.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    let max = *scores.last().unwrap();
    if max < 1.0 {
        candidates.push((max + 1.0) / 2.0);
    }
    let mut best = (candidates[0], evaluate_verification(pairs, candidates[0])?);
    for &t in &candidates[1..] {
        let acc = evaluate_verification(pairs, t)?;
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(best)
}
