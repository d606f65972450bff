//! Pixel-wise gradient saliency and cosine-similarity decomposition maps.
//!
//! Pixel-wise maps differentiate `d = 1 - cos(embed(I), embed(white))` with
//! respect to the input pixels, averaged over randomly white-masked variants of
//! the snippet.
//!
//! The pair maps rely on the bias-free head. With the head folded into the
//! feature field (`Â[d, i, j] = Σ_c W[d, c] A[c, i, j]`) the embedding is just
//! `GAP(Â)`, so `x_q · x_r` splits into a sum over every pair of locations of
//! `Σ_k Â^q[k, i, j] Â^r[k, x, y]`. A point-specific map fixes `(i, j)`; an
//! overall map sums over it.

use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::{ImageBuffer, ImageFormat, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::canonical;
use crate::corpus::Snippet;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{EmbeddingNetwork, FeatureField};
use crate::synth::mix;
use crate::tensor::Tensor;

/// Anything that maps a `[1, S, S]` image to an embedding inside a graph.
/// Implemented by [`EmbeddingNetwork`]; tests use small hand-built models.
pub trait Embedder: Sync {
    fn input_size(&self) -> usize;

    /// Adds the embedding of `input` to `g` and returns its node.
    fn embed_node(&self, g: &mut Graph, input: NodeId) -> Result<NodeId>;

    fn embed_image(&self, pixels: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let input = g.constant(pixels.clone());
        let out = self.embed_node(&mut g, input)?;
        Ok(g.value(out).clone())
    }
}

impl Embedder for EmbeddingNetwork {
    fn input_size(&self) -> usize {
        EmbeddingNetwork::input_size(self)
    }

    fn embed_node(&self, g: &mut Graph, input: NodeId) -> Result<NodeId> {
        let params = self.attach(g, false);
        Ok(self.forward(g, &params, input)?.embedding)
    }

    fn embed_image(&self, pixels: &Tensor) -> Result<Tensor> {
        self.embed_pixels(pixels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyKind {
    PixelWise,
    Overall,
    PointSpecific,
    /// Uniform noise, the control for faithfulness scoring.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapMetadata {
    pub kind: SaliencyKind,
    pub source_id: String,
    pub counterpart_id: Option<String>,
    /// Selected `(row, col)` pixel in the query snippet.
    pub point: Option<(usize, usize)>,
    /// Feature cell the selected point falls into.
    pub coarse_cell: Option<(usize, usize)>,
    pub n: Option<usize>,
    pub mask_probability: Option<f64>,
    pub seed: Option<u64>,
    pub signed: Option<bool>,
    pub upsampling: Option<String>,
    pub degenerate: bool,
    pub normalizer: Option<f64>,
    pub similarity: Option<f64>,
}

impl MapMetadata {
    fn new(kind: SaliencyKind, source_id: &str) -> Self {
        Self {
            kind,
            source_id: source_id.to_string(),
            counterpart_id: None,
            point: None,
            coarse_cell: None,
            n: None,
            mask_probability: None,
            seed: None,
            signed: None,
            upsampling: None,
            degenerate: false,
            normalizer: None,
            similarity: None,
        }
    }
}

/// A row-major `[height, width]` raster in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub metadata: MapMetadata,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    height: usize,
    width: usize,
    #[serde(flatten)]
    metadata: MapMetadata,
}

impl SaliencyMap {
    fn from_raw(raw: &[f64], height: usize, width: usize, mut metadata: MapMetadata) -> Result<Self> {
        let (values, degenerate) = normalize_map(raw)?;
        metadata.degenerate = degenerate;
        Ok(Self {
            height,
            width,
            values,
            metadata,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// 16-bit grayscale, `round(65535 * v)`.
    pub fn to_image(&self) -> ImageBuffer<Luma<u16>, Vec<u16>> {
        let data: Vec<u16> = self.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, data).expect("raster matches its dimensions")
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_image().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Canonical-JSON sidecar: dimensions plus metadata.
    pub fn sidecar_json(&self) -> Result<String> {
        canonical::to_file_string(&Sidecar {
            height: self.height,
            width: self.width,
            metadata: self.metadata.clone(),
        })
    }

    /// Writes `<stem>.png` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let png = dir.join(format!("{stem}.png"));
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&png, self.png_bytes()?)?;
        std::fs::write(&json, self.sidecar_json()?)?;
        Ok((png, json))
    }

    /// Reads a map back from its PNG and sidecar; values are quantized to 16 bits.
    pub fn load(png: &Path, json: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(json)?)?;
        let img = image::open(png)?.into_luma16();
        if img.width() as usize != sidecar.width || img.height() as usize != sidecar.height {
            return Err(Error::Data(format!(
                "{} is {}x{} but its sidecar says {}x{}",
                png.display(),
                img.width(),
                img.height(),
                sidecar.width,
                sidecar.height
            )));
        }
        Ok(Self {
            height: sidecar.height,
            width: sidecar.width,
            values: img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
            metadata: sidecar.metadata,
        })
    }
}

/// Min-max normalization to `[0, 1]`. A constant raster becomes all zeros and
/// is flagged degenerate.
pub fn normalize_map(raw: &[f64]) -> Result<(Vec<f64>, bool)> {
    if raw.is_empty() {
        return Err(Error::Precondition("cannot normalize an empty raster".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("raster contains non-finite values".into()));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok((vec![0.0; raw.len()], true));
    }
    Ok((raw.iter().map(|&v| (v - min) / (max - min)).collect(), false))
}

/// Bilinear upsampling with cell centres aligned: coarse cell `i` sits at
/// pixel `(i + 0.5) * stride - 0.5`; pixels beyond the outermost centres take
/// the edge value.
pub fn upsample_field(coarse: &[f64], height: usize, width: usize, target: (usize, usize)) -> Result<Vec<f64>> {
    if height == 0 || width == 0 || coarse.len() != height * width {
        return Err(Error::Shape(format!(
            "coarse field of {} values does not match {height}x{width}",
            coarse.len()
        )));
    }
    let (th, tw) = target;
    let axis = |p: usize, n: usize, t: usize| -> (usize, usize, f64) {
        let u = ((p as f64 + 0.5) * n as f64 / t as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = u.floor() as usize;
        (i0, (i0 + 1).min(n - 1), u - i0 as f64)
    };
    let mut out = Vec::with_capacity(th * tw);
    for r in 0..th {
        let (r0, r1, t) = axis(r, height, th);
        for c in 0..tw {
            let (c0, c1, s) = axis(c, width, tw);
            let a = coarse[r0 * width + c0];
            let b = coarse[r0 * width + c1];
            let lo = coarse[r1 * width + c0];
            let hi = coarse[r1 * width + c1];
            let top = a + s * (b - a);
            let bottom = lo + s * (hi - lo);
            out.push(top + t * (bottom - top));
        }
    }
    Ok(out)
}

/// A map of independent uniform values: a saliency map that knows nothing.
pub fn random_map(height: usize, width: usize, source_id: &str, seed: u64) -> Result<SaliencyMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..height * width).map(|_| rng.gen()).collect();
    let mut meta = MapMetadata::new(SaliencyKind::Random, source_id);
    meta.seed = Some(seed);
    SaliencyMap::from_raw(&raw, height, width, meta)
}

// ---------------------------------------------------------------------------
// Pixel-wise saliency

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelwiseConfig {
    /// Number of masked variants averaged.
    pub n: usize,
    /// Probability of whitening each pixel in a variant.
    pub mask_probability: f64,
    pub seed: u64,
    /// Keep the sign of the averaged gradient instead of its magnitude.
    pub signed: bool,
}

impl Default for PixelwiseConfig {
    fn default() -> Self {
        Self {
            n: 4,
            mask_probability: 0.1,
            seed: 0,
            signed: false,
        }
    }
}

/// `n` copies of `pixels`, each pixel independently set to white with
/// probability `p`. Variant `i` depends only on `(seed, i)`.
pub fn smooth_variants(pixels: &Tensor, n: usize, p: f64, seed: u64) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::Precondition("at least one variant is required".into()));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Precondition(format!("mask probability {p} outside [0, 1)")));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
            let data = pixels.data().iter().map(|&v| if rng.gen::<f64>() < p { 1.0 } else { v }).collect();
            Tensor::new(pixels.shape().to_vec(), data)
        })
        .collect()
}

/// Pixel-wise saliency for one model, with the white-page embedding computed
/// once and reused.
pub struct PixelwiseExplainer<'a, E: Embedder> {
    model: &'a E,
    base: OnceLock<Tensor>,
}

impl<'a, E: Embedder> PixelwiseExplainer<'a, E> {
    pub fn new(model: &'a E) -> Self {
        Self {
            model,
            base: OnceLock::new(),
        }
    }

    /// Embedding of the all-white image.
    pub fn base_embedding(&self) -> Result<&Tensor> {
        if let Some(b) = self.base.get() {
            return Ok(b);
        }
        let s = self.model.input_size();
        let white = self.model.embed_image(&Tensor::full(&[1, s, s], 1.0))?;
        Ok(self.base.get_or_init(|| white))
    }

    /// `∂d/∂I` for `d = 1 - cos(embed(I), x_base)`.
    pub fn distance_gradient(&self, pixels: &Tensor) -> Result<Tensor> {
        let base = self.base_embedding()?.clone();
        let mut g = Graph::new();
        let input = g.variable(pixels.clone());
        let embedding = self.model.embed_node(&mut g, input)?;
        let b = g.constant(base);
        let sim = g.cosine_similarity(embedding, b)?;
        let neg = g.scale(sim, -1.0)?;
        let d = g.add_scalar(neg, 1.0)?;
        let mut grads = g.backward(d)?;
        Ok(grads.take(input).expect("input is a variable leaf"))
    }

    pub fn explain(&self, snippet: &Snippet, config: &PixelwiseConfig) -> Result<SaliencyMap> {
        let s = self.model.input_size();
        if snippet.pixels.shape() != [1, s, s] {
            return Err(Error::Shape(format!(
                "model expects {s}x{s} snippets, got {:?}",
                snippet.pixels.shape()
            )));
        }
        let variants = smooth_variants(&snippet.pixels, config.n, config.mask_probability, config.seed)?;
        let grads: Vec<Tensor> = variants
            .par_iter()
            .map(|v| self.distance_gradient(v))
            .collect::<Result<_>>()?;
        let mut mean = vec![0.0f64; s * s];
        for g in &grads {
            for (m, &v) in mean.iter_mut().zip(g.data()) {
                *m += v as f64;
            }
        }
        for m in &mut mean {
            *m /= config.n as f64;
            if !config.signed {
                *m = m.abs();
            }
        }
        let mut meta = MapMetadata::new(SaliencyKind::PixelWise, &snippet.id().to_string());
        meta.n = Some(config.n);
        meta.mask_probability = Some(config.mask_probability);
        meta.seed = Some(config.seed);
        meta.signed = Some(config.signed);
        SaliencyMap::from_raw(&mean, s, s, meta)
    }
}

pub fn pixelwise_saliency<E: Embedder>(model: &E, snippet: &Snippet, config: &PixelwiseConfig) -> Result<SaliencyMap> {
    PixelwiseExplainer::new(model).explain(snippet, config)
}

// ---------------------------------------------------------------------------
// Similarity decomposition

/// Unnormalized coarse map over one snippet's feature grid, with the constants
/// that turn its sum back into the cosine similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// `z = |x_q| |x_r| (H_q W_q) (H_r W_r)`.
    pub normalizer: f64,
    pub similarity: f64,
}

impl DecompositionField {
    /// `Σ values / z`; equals the similarity for overall fields.
    pub fn reconstructed_similarity(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.normalizer
    }
}

struct Side {
    id: String,
    size: (usize, usize),
    /// Head-folded field `[D, H', W']` in 64-bit.
    folded: Vec<f64>,
    height: usize,
    width: usize,
    stride: usize,
    /// Per-channel sum over locations.
    totals: Vec<f64>,
    embedding: Tensor,
}

impl Side {
    fn new(net: &EmbeddingNetwork, snippet: &Snippet) -> Result<Self> {
        let id = snippet.id().to_string();
        let (field, embedding) = net.features_and_embedding(&snippet.pixels, &id)?;
        let folded: FeatureField = net.fold_head(&field)?;
        let (d, h, w) = (folded.channels(), folded.height(), folded.width());
        let values: Vec<f64> = folded.values.data().iter().map(|&v| v as f64).collect();
        let totals = (0..d).map(|k| values[k * h * w..(k + 1) * h * w].iter().sum()).collect();
        Ok(Self {
            id,
            size: (snippet.size(), snippet.size()),
            folded: values,
            height: h,
            width: w,
            stride: folded.stride_to_input,
            totals,
            embedding,
        })
    }

    fn area(&self) -> usize {
        self.height * self.width
    }

    /// `Σ_k weights[k] * folded[k, loc]` for every location.
    fn project(&self, weights: &[f64]) -> Vec<f64> {
        let area = self.area();
        (0..area)
            .map(|loc| weights.iter().enumerate().map(|(k, &w)| w * self.folded[k * area + loc]).sum())
            .collect()
    }

    fn vector_at(&self, cell: (usize, usize)) -> Vec<f64> {
        let area = self.area();
        let loc = cell.0 * self.width + cell.1;
        (0..self.totals.len()).map(|k| self.folded[k * area + loc]).collect()
    }
}

/// Both snippets of a pair, embedded and head-folded once; maps for any
/// selected point are then cheap.
pub struct Decomposition {
    query: Side,
    reference: Side,
    similarity: f64,
    normalizer: f64,
}

impl Decomposition {
    pub fn new(net: &EmbeddingNetwork, query: &Snippet, reference: &Snippet) -> Result<Self> {
        let (q, r) = rayon::join(|| Side::new(net, query), || Side::new(net, reference));
        let (query, reference) = (q?, r?);
        let similarity = metrics::similarity(query.embedding.data(), reference.embedding.data())?;
        let norm = |t: &Tensor| t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let normalizer =
            norm(&query.embedding) * norm(&reference.embedding) * (query.area() * reference.area()) as f64;
        Ok(Self {
            query,
            reference,
            similarity,
            normalizer,
        })
    }

    /// `cos(embed(q), embed(r))`.
    pub fn similarity(&self) -> f64 {
        self.similarity
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    fn field(&self, side: &Side, values: Vec<f64>) -> DecompositionField {
        DecompositionField {
            height: side.height,
            width: side.width,
            values,
            normalizer: self.normalizer,
            similarity: self.similarity,
        }
    }

    /// Overall coarse map over the reference: `Σ_k (Σ_ij Â^q[k,i,j]) Â^r[k,x,y]`.
    pub fn overall_reference_field(&self) -> DecompositionField {
        self.field(&self.reference, self.reference.project(&self.query.totals))
    }

    /// Overall coarse map over the query, symmetric to the reference one.
    pub fn overall_query_field(&self) -> DecompositionField {
        self.field(&self.query, self.query.project(&self.reference.totals))
    }

    /// Feature cell of query pixel `(row, col)`.
    pub fn cell_of(&self, row: usize, col: usize) -> Result<(usize, usize)> {
        let (h, w) = self.query.size;
        if row >= h || col >= w {
            return Err(Error::Precondition(format!(
                "point ({row}, {col}) lies outside the {h}x{w} query snippet"
            )));
        }
        Ok((row / self.query.stride, col / self.query.stride))
    }

    /// Point-specific coarse map over the reference for query cell `(i, j)`.
    pub fn point_field(&self, cell: (usize, usize)) -> Result<DecompositionField> {
        if cell.0 >= self.query.height || cell.1 >= self.query.width {
            return Err(Error::Precondition(format!(
                "cell {cell:?} outside the {}x{} query feature grid",
                self.query.height, self.query.width
            )));
        }
        Ok(self.field(&self.reference, self.reference.project(&self.query.vector_at(cell))))
    }

    fn render(&self, side: &Side, field: &DecompositionField, mut meta: MapMetadata) -> Result<SaliencyMap> {
        let up = upsample_field(&field.values, field.height, field.width, side.size)?;
        meta.upsampling = Some("bilinear".into());
        meta.normalizer = Some(self.normalizer);
        meta.similarity = Some(self.similarity);
        SaliencyMap::from_raw(&up, side.size.0, side.size.1, meta)
    }

    /// Overall maps for the query and the reference.
    pub fn overall_maps(&self) -> Result<(SaliencyMap, SaliencyMap)> {
        let mut mq = MapMetadata::new(SaliencyKind::Overall, &self.query.id);
        mq.counterpart_id = Some(self.reference.id.clone());
        let mut mr = MapMetadata::new(SaliencyKind::Overall, &self.reference.id);
        mr.counterpart_id = Some(self.query.id.clone());
        Ok((
            self.render(&self.query, &self.overall_query_field(), mq)?,
            self.render(&self.reference, &self.overall_reference_field(), mr)?,
        ))
    }

    /// Map over the reference for the query pixel `(row, col)`.
    pub fn point_map(&self, row: usize, col: usize) -> Result<SaliencyMap> {
        let cell = self.cell_of(row, col)?;
        let field = self.point_field(cell)?;
        let mut meta = MapMetadata::new(SaliencyKind::PointSpecific, &self.reference.id);
        meta.counterpart_id = Some(self.query.id.clone());
        meta.point = Some((row, col));
        meta.coarse_cell = Some(cell);
        self.render(&self.reference, &field, meta)
    }
}

/// Overall maps for `q` and `r` plus their cosine similarity.
pub fn overall_saliency_pair(net: &EmbeddingNetwork, q: &Snippet, r: &Snippet) -> Result<(SaliencyMap, SaliencyMap, f64)> {
    let d = Decomposition::new(net, q, r)?;
    let (mq, mr) = d.overall_maps()?;
    Ok((mq, mr, d.similarity()))
}

pub fn point_specific_map(net: &EmbeddingNetwork, q: &Snippet, r: &Snippet, point: (usize, usize)) -> Result<SaliencyMap> {
    Decomposition::new(net, q, r)?.point_map(point.0, point.1)
}
