//! The synthetic generator must not leak writer identity through global ink
//! statistics: a nearest-centroid classifier on ink-density features may not
//! exceed twice chance accuracy.

use std::collections::BTreeMap;

use graphoscope::corpus::{extract_snippets, SamplingMode};
use graphoscope::synth::{synth_generate, SynthConfig};
use graphoscope::Snippet;

/// Overall ink fraction plus the ink fraction of each quadrant.
fn ink_features(s: &Snippet) -> [f64; 5] {
    let n = s.size();
    let h = n / 2;
    let px = s.pixels.data();
    let mut f = [s.ink_fraction, 0.0, 0.0, 0.0, 0.0];
    for (q, (r0, c0)) in [(0, 0), (0, h), (h, 0), (h, h)].into_iter().enumerate() {
        let ink = (r0..r0 + h)
            .flat_map(|r| (c0..c0 + h).map(move |c| (r, c)))
            .filter(|&(r, c)| px[r * n + c] == 0.0)
            .count();
        f[q + 1] = ink as f64 / (h * h) as f64;
    }
    f
}

fn nearest_centroid_accuracy(seed: u64) -> (f64, usize) {
    let corpus = synth_generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
    .corpus;
    let mut sums: BTreeMap<String, ([f64; 5], usize)> = BTreeMap::new();
    let mut held_out = Vec::new();
    for page in &corpus.pages {
        let page_index: usize = page.page_id.rsplit('p').next().unwrap().parse().unwrap();
        for s in extract_snippets(page, 64, SamplingMode::Grid, 0.02, 0, 0).unwrap().snippets {
            let f = ink_features(&s);
            if page_index < 2 {
                let e = sums.entry(s.writer_id.clone()).or_insert(([0.0; 5], 0));
                e.0.iter_mut().zip(f).for_each(|(a, v)| *a += v);
                e.1 += 1;
            } else {
                held_out.push((s.writer_id.clone(), f));
            }
        }
    }
    let centroids: Vec<(String, [f64; 5])> = sums
        .into_iter()
        .map(|(w, (s, n))| (w, s.map(|v| v / n as f64)))
        .collect();
    let dist = |a: &[f64; 5], b: &[f64; 5]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let correct = held_out
        .iter()
        .filter(|(w, f)| {
            let best = centroids
                .iter()
                .min_by(|a, b| dist(&a.1, f).total_cmp(&dist(&b.1, f)))
                .unwrap();
            &best.0 == w
        })
        .count();
    (correct as f64 / held_out.len() as f64, centroids.len())
}

#[test]
fn ink_density_does_not_identify_writers() {
    for seed in 0..3 {
        let (acc, writers) = nearest_centroid_accuracy(seed);
        let chance = 1.0 / writers as f64;
        println!("seed {seed}: nearest-centroid accuracy {acc:.3} (chance {chance:.3})");
        assert!(acc <= 2.0 * chance, "seed {seed}: {acc} exceeds twice chance {chance}");
    }
}
