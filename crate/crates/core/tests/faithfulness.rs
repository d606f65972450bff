use graphoscope::autodiff::{Graph, NodeId};
use graphoscope::faithfulness::*;
use graphoscope::saliency::{pixelwise_saliency, Embedder, PixelwiseConfig};
use graphoscope::{EmbeddingNetwork, ModelConfig, Result, Snippet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pixels(seed: u64, size: usize, ink: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size).map(|_| if rng.gen_bool(ink) { 0.0 } else { 1.0 }).collect();
    Tensor::new(vec![1, size, size], data).unwrap()
}

/// Embedding `[mean ink inside a region, c]`: only ink in the region matters.
struct RegionInk {
    size: usize,
    mask: Tensor,
    c: f32,
}

impl RegionInk {
    fn new(size: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, c: f32) -> Self {
        let data = (0..size * size)
            .map(|i| f32::from(rows.contains(&(i / size)) && cols.contains(&(i % size))))
            .collect();
        Self {
            size,
            mask: Tensor::new(vec![1, size, size], data).unwrap(),
            c,
        }
    }

    fn is_inside(&self, i: usize) -> bool {
        self.mask.data()[i] == 1.0
    }
}

impl Embedder for RegionInk {
    fn input_size(&self) -> usize {
        self.size
    }

    fn embed_node(&self, g: &mut Graph, input: NodeId) -> Result<NodeId> {
        let neg = g.scale(input, -1.0)?;
        let ink = g.add_scalar(neg, 1.0)?;
        let mask = g.constant(self.mask.clone());
        let region = g.mul(ink, mask)?;
        let pooled = g.global_avg_pool(region)?;
        let w = g.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        let lifted = g.linear_no_bias(pooled, w)?;
        let offset = g.constant(Tensor::from_vec(vec![0.0, self.c]));
        g.add(lifted, offset)
    }
}

fn tiny_net() -> EmbeddingNetwork {
    EmbeddingNetwork::build(&ModelConfig {
        base_channels: 4,
        embedding_dim: 8,
        input_size: 32,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn endpoints_and_ink_only_alteration() {
    let net = tiny_net();
    let pixels = random_pixels(1, 32, 0.15);
    let snippet = Snippet::detached(pixels.clone(), "p").unwrap();
    let map = pixelwise_saliency(&net, &snippet, &PixelwiseConfig::default()).unwrap();
    let cfg = ScoreConfig {
        steps: 10,
        ..ScoreConfig::default()
    };
    let score = score_snippet(&net, "p", &pixels, &map.values, &cfg).unwrap();
    assert_eq!(score.curves.len(), 8);
    for curve in &score.curves {
        assert_eq!(curve.fractions[0], 0.0);
        assert_eq!(*curve.fractions.last().unwrap(), 1.0);
        assert!(curve.fractions.windows(2).all(|w| w[0] < w[1]));
        assert!((curve.auc - trapezoid(&curve.fractions, &curve.similarities)).abs() < 1e-9);
        match curve.mode {
            Mode::Deletion => assert!((curve.similarities[0] - 1.0).abs() < 1e-6),
            Mode::Insertion => assert!((curve.similarities.last().unwrap() - 1.0).abs() < 1e-6),
        }
        assert!(curve.similarities.iter().all(|s| (0.0..=1.0).contains(s)));
    }
    for mode in [Mode::Deletion, Mode::Insertion] {
        let seq = alter_sequence(&pixels, Some(&map.values), mode, 10, 3).unwrap();
        for img in &seq.images {
            for (a, o) in img.data().iter().zip(pixels.data()) {
                assert!(*o == 0.0 || *a == 1.0, "paper pixel was altered");
            }
        }
        let last = seq.images.last().unwrap();
        match mode {
            Mode::Deletion => assert!(last.data().iter().all(|&v| v == 1.0)),
            Mode::Insertion => {
                assert!(seq.images[0].data().iter().all(|&v| v == 1.0));
                assert_eq!(last, &pixels);
            }
        }
    }
}

#[test]
fn deletion_and_insertion_partition_the_ink() {
    let pixels = random_pixels(2, 24, 0.2);
    let sal: Vec<f64> = (0..pixels.len()).map(|i| ((i * 37) % 11) as f64).collect();
    for steps in [1, 3, 7, 50] {
        let del = alter_sequence(&pixels, Some(&sal), Mode::Deletion, steps, 4).unwrap();
        let ins = alter_sequence(&pixels, Some(&sal), Mode::Insertion, steps, 4).unwrap();
        assert_eq!(del.ranking, ins.ranking);
        assert_eq!(del.batch_sizes, ins.batch_sizes);
        assert_eq!(del.fractions, ins.fractions);
        // after t batches the two images hold complementary parts of the ink
        for (d, i) in del.images.iter().zip(&ins.images) {
            for k in 0..pixels.len() {
                let ink = pixels.data()[k] == 0.0;
                let (dk, ik) = (d.data()[k] == 0.0, i.data()[k] == 0.0);
                assert_eq!(dk || ik, ink);
                assert!(!(dk && ik));
            }
        }
    }
}

#[test]
fn uniform_saliency_matches_random_order() {
    let pixels = random_pixels(3, 32, 0.1);
    let uniform = vec![0.5; pixels.len()];
    for seed in 0..5 {
        assert_eq!(rank_ink(pixels.data(), Some(&uniform), seed), rank_ink(pixels.data(), None, seed));
    }
}

#[test]
fn map_following_the_random_order_scores_like_random() {
    let net = tiny_net();
    let pixels = random_pixels(4, 32, 0.12);
    let cfg = ScoreConfig {
        steps: 8,
        random_repeats: 1,
        ..ScoreConfig::default()
    };
    let order = rank_ink(pixels.data(), None, cfg.repeat_seed(0));
    let mut map = vec![0.0; pixels.len()];
    for (rank, &i) in order.iter().enumerate() {
        map[i] = 1.0 - rank as f64 / order.len() as f64;
    }
    let s = score_snippet(&net, "x", &pixels, &map, &cfg).unwrap();
    assert_eq!(s.s_del, s.r_del);
    assert_eq!(s.s_ins, s.r_ins);
}

#[test]
fn faithful_map_on_a_known_model_beats_random_deletion() {
    let model = RegionInk::new(32, 8..20, 4..16, 0.05);
    let cfg = |seed| ScoreConfig {
        steps: 10,
        random_seed: seed,
        random_repeats: 3,
        clamp_negative: true,
    };
    let mut wins = 0;
    for seed in 0..100 {
        let pixels = random_pixels(1000 + seed, 32, 0.1);
        let map: Vec<f64> = (0..pixels.len()).map(|i| f64::from(u8::from(model.is_inside(i)))).collect();
        let s = score_snippet(&model, "toy", &pixels, &map, &cfg(seed)).unwrap();
        if s.s_del < s.r_del {
            wins += 1;
        }
    }
    assert!(wins >= 95, "faithful map won {wins}/100");
}

#[test]
fn zero_ink_snippets_are_rejected() {
    let net = tiny_net();
    let white = Tensor::full(&[1, 32, 32], 1.0);
    let err = score_snippet(&net, "w", &white, &vec![0.0; 1024], &ScoreConfig::default()).unwrap_err();
    assert!(err.to_string().contains("no ink"));
}

fn score(id: &str, s_del: f64, r_del: f64, s_ins: f64, r_ins: f64) -> SnippetScore {
    SnippetScore {
        snippet_id: id.into(),
        s_del,
        r_del,
        s_ins,
        r_ins,
        curves: vec![],
    }
}

fn report_config() -> ReportConfig {
    ReportConfig {
        steps: 50,
        random_seed: 0,
        random_repeats: 3,
        clamp_negative: true,
        technique: "pixelwise".into(),
        model_id: "m".into(),
    }
}

#[test]
fn aggregate_examples() {
    let scores = vec![
        score("a", 0.1, 0.2, 0.5, 0.4),
        score("b", 0.1, 0.3, 0.5, 0.6),
        score("c", 0.4, 0.2, 0.5, 0.5),
        score("d", 0.0, 0.1, 0.9, 0.1),
    ];
    let r = aggregate_report(scores, vec![], report_config()).unwrap();
    assert_eq!(r.records.iter().map(|r| r.d).collect::<Vec<_>>(), vec![1, 1, 0, 1]);
    assert_eq!(r.auc_d, 75.0);
    assert_eq!(r.auc_i, 50.0);

    let ties = vec![score("a", 0.3, 0.3, 0.2, 0.2), score("b", 0.5, 0.5, 0.7, 0.7)];
    let r = aggregate_report(ties, vec![], report_config()).unwrap();
    assert_eq!((r.auc_d, r.auc_i), (0.0, 0.0));

    assert!(aggregate_report(vec![], vec![], report_config()).is_err());
}

#[test]
fn report_serializations_are_stable() {
    let scores = vec![score("a", 0.1, 0.2, 0.5, 0.4), score("b", 1.0 / 3.0, 0.3, 0.5, 0.6)];
    let r = aggregate_report(scores.clone(), vec![("z".into(), "no ink".into())], report_config()).unwrap();
    let again = aggregate_report(scores, vec![("z".into(), "no ink".into())], report_config()).unwrap();
    assert_eq!(r.to_json().unwrap(), again.to_json().unwrap());
    let csv = r.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "snippet_id,s_del,r_del,s_ins,r_ins,d,i");
    assert_eq!(lines[2], "b,0.333333333,0.3,0.5,0.6,0,0");
}

fn riemann(xs: &[f64], ys: &[f64], n: usize) -> f64 {
    let (a, b) = (xs[0], *xs.last().unwrap());
    let h = (b - a) / n as f64;
    let mut seg = 0;
    (0..n)
        .map(|k| {
            let x = a + (k as f64 + 0.5) * h;
            while seg + 2 < xs.len() && x > xs[seg + 1] {
                seg += 1;
            }
            let t = (x - xs[seg]) / (xs[seg + 1] - xs[seg]);
            h * (ys[seg] + t * (ys[seg + 1] - ys[seg]))
        })
        .sum()
}

proptest! {
    #[test]
    fn trapezoid_matches_a_fine_riemann_sum(
        gaps in proptest::collection::vec(0.01f64..1.0, 1..12),
        ys in proptest::collection::vec(0.0f64..1.0, 13),
    ) {
        let total: f64 = gaps.iter().sum();
        let mut xs = vec![0.0];
        for g in &gaps {
            xs.push(xs.last().unwrap() + g / total);
        }
        *xs.last_mut().unwrap() = 1.0;
        let ys = &ys[..xs.len()];
        prop_assert!((trapezoid(&xs, ys) - riemann(&xs, ys, 400_000)).abs() < 1e-6);
    }

    #[test]
    fn report_arithmetic_holds(vals in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..40)) {
        let scores: Vec<SnippetScore> = vals
            .iter()
            .enumerate()
            .map(|(k, &(a, b, c, d))| score(&k.to_string(), a, b, c, d))
            .collect();
        let r = aggregate_report(scores, vec![], report_config()).unwrap();
        let n = r.records.len() as f64;
        let not_d = r.records.iter().filter(|x| x.d == 0).count() as f64;
        prop_assert_eq!(r.auc_d + 100.0 * not_d / n, 100.0);
        for rec in &r.records {
            prop_assert_eq!(rec.d, u8::from(rec.r_del > rec.s_del));
            prop_assert_eq!(rec.i, u8::from(rec.s_ins > rec.r_ins));
        }
    }

    #[test]
    fn batches_are_near_equal(total in 1usize..500, parts in 1usize..60) {
        let parts = parts.min(total);
        let sizes = batch_sizes(total, parts);
        prop_assert_eq!(sizes.iter().sum::<usize>(), total);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }
}
