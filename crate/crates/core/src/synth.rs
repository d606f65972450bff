//! Seeded pseudo-handwriting pages for desk-scale experiments.
//!
//! All writers share one alphabet of stroke skeletons. Each writer distorts the
//! skeletons persistently (allographs) and renders them with its own
//! [`StyleParams`]. Line spacing is chosen per page so that page ink density
//! follows a page-level draw, not the writer's stroke width.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PageRecord};
use crate::error::{Error, Result};

const ALPHABET_SIZE: usize = 20;
const MARGIN: f64 = 6.0;
const ALLOGRAPH_JITTER: f64 = 0.06;

/// Inclusive bounds for every style parameter.
pub mod bounds {
    pub const SLANT_DEG: (f64, f64) = (-30.0, 30.0);
    pub const STROKE_WIDTH: (f64, f64) = (1.2, 2.8);
    pub const CURVATURE: (f64, f64) = (0.0, 0.6);
    pub const GLYPH_SPACING: (f64, f64) = (0.05, 0.5);
    pub const BASELINE_JITTER: (f64, f64) = (0.0, 2.5);
    pub const SIZE_JITTER: (f64, f64) = (0.0, 0.25);
    pub const GLYPH_HEIGHT: (f64, f64) = (12.0, 20.0);
    pub const ASPECT: (f64, f64) = (0.5, 1.0);
    /// Page-level target ink density, independent of the writer.
    pub const PAGE_INK: (f64, f64) = (0.07, 0.15);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub slant_deg: f64,
    pub stroke_width: f64,
    pub curvature: f64,
    pub glyph_spacing: f64,
    pub baseline_jitter: f64,
    pub size_jitter: f64,
    pub glyph_height: f64,
    pub aspect: f64,
}

fn within((lo, hi): (f64, f64), v: f64) -> bool {
    (lo..=hi).contains(&v)
}

impl StyleParams {
    pub fn draw(rng: &mut impl Rng) -> Self {
        let mut u = |(lo, hi): (f64, f64)| rng.gen_range(lo..=hi);
        Self {
            slant_deg: u(bounds::SLANT_DEG),
            stroke_width: u(bounds::STROKE_WIDTH),
            curvature: u(bounds::CURVATURE),
            glyph_spacing: u(bounds::GLYPH_SPACING),
            baseline_jitter: u(bounds::BASELINE_JITTER),
            size_jitter: u(bounds::SIZE_JITTER),
            glyph_height: u(bounds::GLYPH_HEIGHT),
            aspect: u(bounds::ASPECT),
        }
    }

    /// Latin-hypercube styles for `n` writers: each parameter range is cut into
    /// `n` strata and every writer gets a different stratum per parameter, so no
    /// two writers can coincide along any single style axis.
    pub fn draw_stratified(n: usize, rng: &mut impl Rng) -> Vec<Self> {
        let mut axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
            let mut strata: Vec<usize> = (0..n).collect();
            strata.shuffle(rng);
            strata
                .into_iter()
                .map(|k| lo + (hi - lo) * (k as f64 + rng.gen_range(0.0..1.0)) / n as f64)
                .collect()
        };
        let slant = axis(bounds::SLANT_DEG);
        let width = axis(bounds::STROKE_WIDTH);
        let curvature = axis(bounds::CURVATURE);
        let spacing = axis(bounds::GLYPH_SPACING);
        let baseline = axis(bounds::BASELINE_JITTER);
        let size = axis(bounds::SIZE_JITTER);
        let height = axis(bounds::GLYPH_HEIGHT);
        let aspect = axis(bounds::ASPECT);
        (0..n)
            .map(|w| Self {
                slant_deg: slant[w],
                stroke_width: width[w],
                curvature: curvature[w],
                glyph_spacing: spacing[w],
                baseline_jitter: baseline[w],
                size_jitter: size[w],
                glyph_height: height[w],
                aspect: aspect[w],
            })
            .collect()
    }

    pub fn within_bounds(&self) -> bool {
        within(bounds::SLANT_DEG, self.slant_deg)
            && within(bounds::STROKE_WIDTH, self.stroke_width)
            && within(bounds::CURVATURE, self.curvature)
            && within(bounds::GLYPH_SPACING, self.glyph_spacing)
            && within(bounds::BASELINE_JITTER, self.baseline_jitter)
            && within(bounds::SIZE_JITTER, self.size_jitter)
            && within(bounds::GLYPH_HEIGHT, self.glyph_height)
            && within(bounds::ASPECT, self.aspect)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub writers: usize,
    pub pages_per_writer: usize,
    pub page_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            writers: 8,
            pages_per_writer: 4,
            page_size: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub styles: BTreeMap<String, StyleParams>,
}

type Point = (f64, f64);
type Stroke = Vec<Point>;
type Glyph = Vec<Stroke>;

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn writer_id(index: usize) -> String {
    format!("w{index:02}")
}

pub fn page_id(writer: usize, page: usize) -> String {
    format!("{}_p{page}", writer_id(writer))
}

fn alphabet(seed: u64) -> Vec<Glyph> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xa1fa));
    (0..ALPHABET_SIZE)
        .map(|_| {
            let strokes = if rng.gen_bool(0.35) { 2 } else { 1 };
            (0..strokes)
                .map(|_| {
                    let n = rng.gen_range(3..=5);
                    (0..n).map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))).collect()
                })
                .collect()
        })
        .collect()
}

struct Writer {
    style: StyleParams,
    glyphs: Vec<Glyph>,
    bend: f64,
}

impl Writer {
    fn new(alphabet: &[Glyph], style: StyleParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let glyphs = alphabet
            .iter()
            .map(|g| {
                g.iter()
                    .map(|stroke| {
                        stroke
                            .iter()
                            .map(|&(x, y)| {
                                (
                                    (x + rng.gen_range(-ALLOGRAPH_JITTER..ALLOGRAPH_JITTER)).clamp(0.0, 1.0),
                                    (y + rng.gen_range(-ALLOGRAPH_JITTER..ALLOGRAPH_JITTER)).clamp(0.0, 1.0),
                                )
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let bend = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        Self { style, glyphs, bend }
    }
}

struct Canvas {
    size: usize,
    ink: Vec<bool>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            ink: vec![false; size * size],
        }
    }

    fn stamp(&mut self, (cx, cy): Point, radius: f64) {
        let r2 = radius * radius;
        let lo_x = (cx - radius).floor().max(0.0) as usize;
        let lo_y = (cy - radius).floor().max(0.0) as usize;
        let hi_x = ((cx + radius).ceil() as isize).min(self.size as isize - 1);
        let hi_y = ((cy + radius).ceil() as isize).min(self.size as isize - 1);
        if hi_x < 0 || hi_y < 0 {
            return;
        }
        for y in lo_y..=hi_y as usize {
            for x in lo_x..=hi_x as usize {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r2 {
                    self.ink[y * self.size + x] = true;
                }
            }
        }
    }

    /// Quadratic Bezier from `a` to `b` bent sideways by `bend` times the chord length.
    fn curve(&mut self, a: Point, b: Point, bend: f64, radius: f64) {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = (dx * dx + dy * dy).sqrt();
        let ctrl = ((a.0 + b.0) / 2.0 - dy * bend, (a.1 + b.1) / 2.0 + dx * bend);
        let steps = ((len * (1.0 + bend.abs()) / 0.4).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let u = 1.0 - t;
            let p = (
                u * u * a.0 + 2.0 * u * t * ctrl.0 + t * t * b.0,
                u * u * a.1 + 2.0 * u * t * ctrl.1 + t * t * b.1,
            );
            self.stamp(p, radius);
        }
    }

    fn ink_fraction(&self) -> f64 {
        self.ink.iter().filter(|&&i| i).count() as f64 / self.ink.len() as f64
    }
}

fn render_page(writer: &Writer, size: usize, page_seed: u64, line_spacing: f64) -> Canvas {
    let mut rng = ChaCha8Rng::seed_from_u64(page_seed);
    let st = &writer.style;
    let shear = st.slant_deg.to_radians().tan();
    let radius = st.stroke_width / 2.0;
    let mut canvas = Canvas::new(size);
    let mut baseline = MARGIN + st.glyph_height;
    let right = size as f64 - MARGIN;
    while baseline < size as f64 - MARGIN * 0.5 {
        let mut x = MARGIN + rng.gen_range(0.0..st.glyph_height);
        let mut word_left = rng.gen_range(2..=6);
        while x < right {
            let h = st.glyph_height * (1.0 + rng.gen_range(-st.size_jitter..=st.size_jitter));
            let w = h * st.aspect;
            let y0 = baseline + rng.gen_range(-st.baseline_jitter..=st.baseline_jitter);
            let glyph = &writer.glyphs[rng.gen_range(0..writer.glyphs.len())];
            let place = |(u, v): Point| (x + u * w + shear * (1.0 - v) * h, y0 - (1.0 - v) * h);
            for stroke in glyph {
                for (i, pair) in stroke.windows(2).enumerate() {
                    let sign = if i % 2 == 0 { writer.bend } else { -writer.bend };
                    canvas.curve(place(pair[0]), place(pair[1]), sign * st.curvature * 0.5, radius);
                }
            }
            x += w * (1.0 + st.glyph_spacing);
            word_left -= 1;
            if word_left == 0 {
                x += w * rng.gen_range(0.6..1.2);
                word_left = rng.gen_range(2..=6);
            }
        }
        baseline += line_spacing;
    }
    canvas
}

/// Generates `writers * pages_per_writer` binary pages of `page_size` squared pixels.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthCorpus> {
    if config.writers < 2 {
        return Err(Error::Config(format!("synthetic corpus needs at least 2 writers, got {}", config.writers)));
    }
    if config.pages_per_writer == 0 {
        return Err(Error::Config("pages_per_writer must be positive".into()));
    }
    if config.page_size < 64 {
        return Err(Error::Config(format!("page_size {} is below the 64px minimum", config.page_size)));
    }
    let glyphs = alphabet(config.seed);
    let mut pages = Vec::new();
    let mut styles = BTreeMap::new();
    let styles_rng = &mut ChaCha8Rng::seed_from_u64(mix(config.seed, 0x57e1));
    let drawn = StyleParams::draw_stratified(config.writers, styles_rng);
    for (w, style) in drawn.into_iter().enumerate() {
        let writer = Writer::new(&glyphs, style, mix(config.seed, 1 + w as u64));
        for p in 0..config.pages_per_writer {
            let page_seed = mix(mix(config.seed, 1 + w as u64), 0x1000 + p as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(mix(page_seed, 0xde45));
            let target = rng.gen_range(bounds::PAGE_INK.0..=bounds::PAGE_INK.1);
            let h = writer.style.glyph_height;
            let probe_spacing = 2.0 * h;
            let probe = render_page(&writer, config.page_size, page_seed, probe_spacing);
            let spacing = (probe_spacing * probe.ink_fraction() / target).clamp(1.1 * h, 4.0 * h);
            let canvas = render_page(&writer, config.page_size, page_seed, spacing);
            pages.push(PageRecord {
                writer_id: writer_id(w),
                page_id: page_id(w, p),
                width: config.page_size,
                height: config.page_size,
                pixels: canvas.ink.iter().map(|&i| if i { 0.0 } else { 1.0 }).collect(),
                source: None,
            });
        }
        styles.insert(writer_id(w), writer.style);
    }
    Ok(SynthCorpus {
        corpus: Corpus { pages },
        styles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_writers_have_distinct_styles() {
        let s = synth_generate(&SynthConfig {
            writers: 2,
            pages_per_writer: 1,
            page_size: 128,
            seed: 3,
        })
        .unwrap();
        assert_eq!(s.corpus.pages.len(), 2);
        assert_ne!(s.styles["w00"], s.styles["w01"]);
        assert!(s.styles.values().all(StyleParams::within_bounds));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            writers: 3,
            pages_per_writer: 2,
            page_size: 96,
            seed: 11,
        };
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
    }

    #[test]
    fn pages_of_one_writer_differ() {
        let s = synth_generate(&SynthConfig {
            writers: 2,
            pages_per_writer: 2,
            page_size: 128,
            seed: 5,
        })
        .unwrap();
        assert_ne!(s.corpus.pages[0].pixels, s.corpus.pages[1].pixels);
    }

    #[test]
    fn rejects_single_writer() {
        assert!(synth_generate(&SynthConfig {
            writers: 1,
            ..SynthConfig::default()
        })
        .is_err());
    }
}
