//! In-browser saliency demo. A synthetic page pair and a small untrained
//! network are built on the spot; the page asks for pixel-wise maps of the
//! query and point-specific maps over the reference, drawn as RGBA overlays.
//!
//! [`Inspector`] holds the logic as plain Rust so it can be exercised
//! natively; [`Demo`] is the thin `wasm-bindgen` wrapper.

use graphoscope::corpus::{Corpus, Snippet};
use graphoscope::saliency::{pixelwise_saliency, Decomposition, PixelwiseConfig, SaliencyMap};
use graphoscope::synth::{synth_generate, SynthConfig};
use graphoscope::training::grid_snippets;
use graphoscope::{EmbeddingNetwork, ModelConfig, Result};
use wasm_bindgen::prelude::*;

pub const SNIPPET: usize = 64;
const HEAT: [f64; 3] = [220.0, 30.0, 30.0];

pub struct Inspector {
    corpus: Corpus,
    net: EmbeddingNetwork,
    query: Snippet,
    reference: Snippet,
}

impl Inspector {
    pub fn new(seed: u64) -> Result<Self> {
        let corpus = synth_generate(&SynthConfig {
            writers: 2,
            pages_per_writer: 1,
            page_size: 192,
            seed,
        })?
        .corpus;
        let net = EmbeddingNetwork::build(&ModelConfig {
            base_channels: 4,
            embedding_dim: 16,
            input_size: SNIPPET,
            seed,
            ..ModelConfig::default()
        })?;
        let (query, reference) = pick_pair(&corpus, seed)?;
        Ok(Self {
            corpus,
            net,
            query,
            reference,
        })
    }

    /// Draws a different query/reference pair from the same pages.
    pub fn shuffle(&mut self, seed: u64) -> Result<()> {
        (self.query, self.reference) = pick_pair(&self.corpus, seed)?;
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.net.downsampling()
    }

    pub fn query(&self) -> &Snippet {
        &self.query
    }

    pub fn reference(&self) -> &Snippet {
        &self.reference
    }

    pub fn similarity(&self) -> Result<f64> {
        let q = self.net.embed(&self.query)?;
        let r = self.net.embed(&self.reference)?;
        Ok(graphoscope::cosine_similarity(&q, &r)? as f64)
    }

    pub fn pixelwise(&self, n: usize, p: f64, seed: u64) -> Result<SaliencyMap> {
        let config = PixelwiseConfig {
            n,
            mask_probability: p,
            seed,
            signed: false,
        };
        pixelwise_saliency(&self.net, &self.query, &config)
    }

    pub fn point(&self, row: usize, col: usize) -> Result<SaliencyMap> {
        Decomposition::new(&self.net, &self.query, &self.reference)?.point_map(row, col)
    }
}

fn pick_pair(corpus: &Corpus, seed: u64) -> Result<(Snippet, Snippet)> {
    let writers = corpus.writers();
    let pick = |w: &String, k: u64| -> Result<Snippet> {
        let grid = grid_snippets(corpus, std::slice::from_ref(w), SNIPPET, 0.05)?;
        if grid.is_empty() {
            return Err(graphoscope::Error::Data(format!("writer {w} has no inked snippets")));
        }
        Ok(grid[(k % grid.len() as u64) as usize].clone())
    };
    Ok((pick(&writers[0], seed)?, pick(&writers[1], seed / 7 + 3)?))
}

/// Grayscale snippet as RGBA.
pub fn snippet_rgba(s: &Snippet) -> Vec<u8> {
    overlay_rgba(s, None)
}

/// Snippet with `map` blended in red: alpha equals the map value, so a zero
/// map leaves the snippet untouched.
pub fn overlay_rgba(s: &Snippet, map: Option<&SaliencyMap>) -> Vec<u8> {
    let px = s.pixels.data();
    let mut out = Vec::with_capacity(px.len() * 4);
    for (i, &v) in px.iter().enumerate() {
        let base = v as f64 * 255.0;
        let a = map.map_or(0.0, |m| m.values[i]);
        for c in HEAT {
            out.push((base * (1.0 - a) + c * a).round() as u8);
        }
        out.push(255);
    }
    out
}

fn js(e: graphoscope::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    inner: Inspector,
    cell: Option<(usize, usize)>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Ok(Demo {
            inner: Inspector::new(seed as u64).map_err(js)?,
            cell: None,
        })
    }

    pub fn size(&self) -> usize {
        SNIPPET
    }

    pub fn stride(&self) -> usize {
        self.inner.stride()
    }

    #[wasm_bindgen(js_name = newPair)]
    pub fn new_pair(&mut self, seed: u32) -> Result<(), JsError> {
        self.cell = None;
        self.inner.shuffle(seed as u64).map_err(js)
    }

    pub fn similarity(&self) -> Result<f64, JsError> {
        self.inner.similarity().map_err(js)
    }

    #[wasm_bindgen(js_name = queryRgba)]
    pub fn query_rgba(&self) -> Vec<u8> {
        snippet_rgba(self.inner.query())
    }

    #[wasm_bindgen(js_name = referenceRgba)]
    pub fn reference_rgba(&self) -> Vec<u8> {
        snippet_rgba(self.inner.reference())
    }

    /// Pixel-wise map over the query, as an RGBA overlay.
    pub fn pixelwise(&self, n: usize, p: f64, seed: u32) -> Result<Vec<u8>, JsError> {
        let map = self.inner.pixelwise(n, p, seed as u64).map_err(js)?;
        Ok(overlay_rgba(self.inner.query(), Some(&map)))
    }

    /// Point-specific map over the reference for query pixel `(row, col)`.
    pub fn point(&mut self, row: usize, col: usize) -> Result<Vec<u8>, JsError> {
        let map = self.inner.point(row, col).map_err(js)?;
        self.cell = map.metadata.coarse_cell;
        Ok(overlay_rgba(self.inner.reference(), Some(&map)))
    }

    /// `"row,col"` of the feature cell behind the last point map.
    #[wasm_bindgen(js_name = lastCell)]
    pub fn last_cell(&self) -> Option<String> {
        self.cell.map(|(r, c)| format!("{r},{c}"))
    }
}
