//! Binarized handwriting pages, ink-constrained snippets and open-set writer splits.
//!
//! Pages live on disk as `<corpus>/<writer_id>/<page_id>.png`. Pixel values are
//! `0.0` for ink and `1.0` for paper.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct PageRecord {
    pub writer_id: String,
    pub page_id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major, `0.0` ink / `1.0` paper.
    pub pixels: Vec<f32>,
    pub source: Option<PathBuf>,
}

impl PageRecord {
    pub fn ink_fraction(&self) -> f64 {
        ink_fraction(&self.pixels).expect("page bitmaps are binary")
    }

    fn window(&self, row: usize, col: usize, size: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(size * size);
        for r in row..row + size {
            out.extend_from_slice(&self.pixels[r * self.width + col..r * self.width + col + size]);
        }
        out
    }

    pub fn snippet_at(&self, row: usize, col: usize, size: usize) -> Result<Snippet> {
        if size == 0 || row + size > self.height || col + size > self.width {
            return Err(Error::Precondition(format!(
                "snippet {row}:{col}:{size} exceeds page {} ({}x{})",
                self.page_id, self.height, self.width
            )));
        }
        let pixels = self.window(row, col, size);
        let ink = ink_fraction(&pixels)?;
        Ok(Snippet {
            pixels: Tensor::new(vec![1, size, size], pixels)?,
            writer_id: self.writer_id.clone(),
            page_id: self.page_id.clone(),
            origin: (row, col),
            ink_fraction: ink,
        })
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.pixels[y as usize * self.width + x as usize] > 0.5 { 255 } else { 0 }])
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snippet {
    /// `[1, S, S]`, binary.
    pub pixels: Tensor,
    pub writer_id: String,
    pub page_id: String,
    pub origin: (usize, usize),
    pub ink_fraction: f64,
}

impl Snippet {
    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn id(&self) -> SnippetId {
        SnippetId {
            page_id: self.page_id.clone(),
            row: self.origin.0,
            col: self.origin.1,
            size: self.size(),
        }
    }

    /// A snippet not tied to any page, e.g. the white reference image.
    pub fn detached(pixels: Tensor, label: &str) -> Result<Self> {
        let ink = ink_fraction(pixels.data())?;
        Ok(Self {
            pixels,
            writer_id: String::new(),
            page_id: label.to_string(),
            origin: (0, 0),
            ink_fraction: ink,
        })
    }

    pub fn white(size: usize) -> Self {
        Self::detached(Tensor::full(&[1, size, size], 1.0), "white").expect("white is binary")
    }

    pub fn to_image(&self) -> GrayImage {
        let s = self.size();
        GrayImage::from_fn(s as u32, s as u32, |x, y| {
            Luma([(self.pixels.data()[y as usize * s + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }

    /// 8-bit grayscale PNG.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.to_image().write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
        Ok(out)
    }
}

/// `<page_id>:<row>:<col>:<size>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SnippetId {
    pub page_id: String,
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl fmt::Display for SnippetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.page_id, self.row, self.col, self.size)
    }
}

impl FromStr for SnippetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.rsplitn(4, ':').collect();
        let bad = || Error::Precondition(format!("malformed snippet id {s:?}, expected <page>:<row>:<col>:<size>"));
        if parts.len() != 4 || parts[3].is_empty() {
            return Err(bad());
        }
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        Ok(Self {
            page_id: parts[3].to_string(),
            row: num(parts[2])?,
            col: num(parts[1])?,
            size: num(parts[0])?,
        })
    }
}

/// Fraction of `0.0` (ink) pixels. Rejects non-binary input.
pub fn ink_fraction(pixels: &[f32]) -> Result<f64> {
    if pixels.is_empty() {
        return Err(Error::Precondition("ink fraction of an empty raster".into()));
    }
    let mut ink = 0usize;
    for &p in pixels {
        if p == 0.0 {
            ink += 1;
        } else if p != 1.0 {
            return Err(Error::Precondition(format!("pixel value {p} is not binary")));
        }
    }
    Ok(ink as f64 / pixels.len() as f64)
}

pub fn binarize(luminance: &[u8], threshold: f32) -> Vec<f32> {
    luminance
        .iter()
        .map(|&l| if (l as f32 / 255.0) < threshold { 0.0 } else { 1.0 })
        .collect()
}

/// Splits a page path into `(writer_id, page_id)`.
///
/// The writer is the parent directory. A file stem whose prefix before the first
/// `-` or `_` names a different writer is ambiguous and rejected.
fn page_identity(path: &Path) -> Result<(String, String)> {
    let err = |reason: &str| Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| err("file name is not valid UTF-8"))?;
    let writer = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
        .ok_or_else(|| err("page is not inside a writer directory"))?;
    if stem.contains(':') || writer.contains(':') {
        return Err(err("identifiers must not contain ':'"));
    }
    if let Some(pos) = stem.find(['-', '_']) {
        let prefix = &stem[..pos];
        if prefix != writer {
            return Err(err(&format!(
                "ambiguous writer id: directory says {writer:?}, file name prefix says {prefix:?}"
            )));
        }
    }
    Ok((writer.to_string(), stem.to_string()))
}

/// Loads and binarizes a page: luminance below `threshold` becomes ink.
pub fn load_page(path: &Path, threshold: f32) -> Result<PageRecord> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("binarization threshold {threshold} must lie in (0, 1)")));
    }
    let (writer_id, page_id) = page_identity(path)?;
    let img = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(PageRecord {
        writer_id,
        page_id,
        width: w as usize,
        height: h as usize,
        pixels: binarize(gray.as_raw(), threshold),
        source: Some(path.to_path_buf()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Grid,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub snippets: Vec<Snippet>,
    /// How many requested random snippets could not be found within the retry budget.
    pub shortfall: Option<usize>,
}

pub const RETRIES_PER_SNIPPET: usize = 1000;

/// Grid mode tiles non-overlapping windows from the top-left corner and ignores
/// `count`; random mode rejection-samples seeded offsets until `count` snippets
/// pass `min_ink` or `1000 * count` draws are spent.
pub fn extract_snippets(
    page: &PageRecord,
    size: usize,
    mode: SamplingMode,
    min_ink: f64,
    count: usize,
    seed: u64,
) -> Result<Extraction> {
    if size == 0 || size > page.width || size > page.height {
        return Err(Error::Precondition(format!(
            "page {} ({}x{}) is too small for {size}px snippets",
            page.page_id, page.height, page.width
        )));
    }
    match mode {
        SamplingMode::Grid => {
            let mut snippets = Vec::new();
            for row in (0..=page.height - size).step_by(size) {
                for col in (0..=page.width - size).step_by(size) {
                    let s = page.snippet_at(row, col, size)?;
                    if s.ink_fraction >= min_ink {
                        snippets.push(s);
                    }
                }
            }
            Ok(Extraction {
                snippets,
                shortfall: None,
            })
        }
        SamplingMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut snippets = Vec::with_capacity(count);
            let budget = RETRIES_PER_SNIPPET * count;
            let mut draws = 0;
            while snippets.len() < count && draws < budget {
                draws += 1;
                let row = rng.gen_range(0..=page.height - size);
                let col = rng.gen_range(0..=page.width - size);
                let s = page.snippet_at(row, col, size)?;
                if s.ink_fraction >= min_ink {
                    snippets.push(s);
                }
            }
            let missing = count - snippets.len();
            Ok(Extraction {
                snippets,
                shortfall: (missing > 0).then_some(missing),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriterSplit {
    pub train_writers: Vec<String>,
    pub test_writers: Vec<String>,
    pub seed: u64,
}

impl WriterSplit {
    pub fn is_train(&self, writer: &str) -> bool {
        self.train_writers.iter().any(|w| w == writer)
    }

    pub fn is_test(&self, writer: &str) -> bool {
        self.test_writers.iter().any(|w| w == writer)
    }
}

/// Seeded open-set split: the first `ceil(ratio * n)` shuffled writers go to
/// the train/validation pool, the rest to test.
///
/// A ratio of exactly 1 puts every writer in the pool and leaves the test set
/// empty; cross-validation then scores each held-out fold as its test set.
pub fn split_writers<S: AsRef<str>>(writer_ids: &[S], ratio: f64, seed: u64) -> Result<WriterSplit> {
    let unique: BTreeSet<&str> = writer_ids.iter().map(|s| s.as_ref()).collect();
    if unique.len() < 2 {
        return Err(Error::Precondition(format!(
            "an open-set split needs at least 2 writers, got {}",
            unique.len()
        )));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie in (0, 1]")));
    }
    let mut ids: Vec<String> = unique.into_iter().map(String::from).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = if ratio == 1.0 {
        ids.len()
    } else {
        ((ratio * ids.len() as f64).ceil() as usize).clamp(1, ids.len() - 1)
    };
    let test_writers = ids.split_off(n_train);
    Ok(WriterSplit {
        train_writers: ids,
        test_writers,
        seed,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub pages: Vec<PageRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestPage {
    pub page_id: String,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestWriter {
    pub writer_id: String,
    pub pages: Vec<ManifestPage>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub writers: Vec<ManifestWriter>,
}

impl Corpus {
    pub fn writers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.pages.iter().map(|p| p.writer_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn pages_of<'a>(&'a self, writer: &'a str) -> impl Iterator<Item = &'a PageRecord> + 'a {
        self.pages.iter().filter(move |p| p.writer_id == writer)
    }

    pub fn page(&self, page_id: &str) -> Option<&PageRecord> {
        self.pages.iter().find(|p| p.page_id == page_id)
    }

    pub fn snippet(&self, id: &SnippetId) -> Result<Snippet> {
        let page = self
            .page(&id.page_id)
            .ok_or_else(|| Error::NotFound(format!("page {}", id.page_id)))?;
        page.snippet_at(id.row, id.col, id.size)
    }

    /// Loads every `<writer>/<page>.png` below `root`, sorted by path.
    pub fn ingest_dir(root: &Path, threshold: f32) -> Result<Self> {
        let mut paths = Vec::new();
        for entry in fs::read_dir(root)? {
            let dir = entry?.path();
            if !dir.is_dir() {
                continue;
            }
            for file in fs::read_dir(&dir)? {
                let p = file?.path();
                if p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true) {
                    paths.push(p);
                }
            }
        }
        paths.sort();
        let mut pages = Vec::with_capacity(paths.len());
        let mut seen = HashSet::new();
        for p in &paths {
            let page = load_page(p, threshold)?;
            if !seen.insert(page.page_id.clone()) {
                return Err(Error::Ingestion {
                    path: p.clone(),
                    reason: format!("duplicate page id {:?}", page.page_id),
                });
            }
            pages.push(page);
        }
        if pages.is_empty() {
            return Err(Error::Data(format!("no <writer>/<page>.png files under {}", root.display())));
        }
        Ok(Self { pages })
    }

    /// Writes pages as 8-bit PNGs plus `manifest.json`.
    pub fn write_dir(&self, root: &Path) -> Result<CorpusManifest> {
        for page in &self.pages {
            let dir = root.join(&page.writer_id);
            fs::create_dir_all(&dir)?;
            page.to_image().save(dir.join(format!("{}.png", page.page_id)))?;
        }
        let manifest = self.manifest(root)?;
        fs::write(root.join(MANIFEST_FILE), canonical::to_file_string(&manifest)?)?;
        Ok(manifest)
    }

    /// Manifest over the page files as they exist below `root`.
    pub fn manifest(&self, root: &Path) -> Result<CorpusManifest> {
        let mut by_writer: BTreeMap<&str, Vec<ManifestPage>> = BTreeMap::new();
        for page in &self.pages {
            let file = format!("{}/{}.png", page.writer_id, page.page_id);
            let bytes = fs::read(root.join(&file))?;
            by_writer.entry(&page.writer_id).or_default().push(ManifestPage {
                page_id: page.page_id.clone(),
                file,
                width: page.width,
                height: page.height,
                checksum: canonical::checksum_hex(&bytes),
            });
        }
        Ok(CorpusManifest {
            writers: by_writer
                .into_iter()
                .map(|(w, mut pages)| {
                    pages.sort_by(|a, b| a.page_id.cmp(&b.page_id));
                    ManifestWriter {
                        writer_id: w.to_string(),
                        pages,
                    }
                })
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page_from(pixels: Vec<f32>, width: usize, height: usize) -> PageRecord {
        PageRecord {
            writer_id: "w0".into(),
            page_id: "w0_p0".into(),
            width,
            height,
            pixels,
            source: None,
        }
    }

    #[test]
    fn ink_fraction_examples() {
        assert_eq!(ink_fraction(&[1.0; 16]).unwrap(), 0.0);
        assert_eq!(ink_fraction(&[0.0; 16]).unwrap(), 1.0);
        let mut px = vec![1.0; 4096];
        px[..82].fill(0.0);
        let f = ink_fraction(&px).unwrap();
        assert!((f - 0.02002).abs() < 1e-5);
        assert!(f >= 0.02);
        assert!(ink_fraction(&[0.5, 1.0]).is_err());
    }

    #[test]
    fn binarization_threshold() {
        assert_eq!(binarize(&[255, 0, 128, 127], 0.5), vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn load_page_binarizes_png() {
        let dir = tempfile::tempdir().unwrap();
        let wdir = dir.path().join("0007");
        fs::create_dir_all(&wdir).unwrap();
        for (name, value) in [("0007-1", 255u8), ("0007-2", 0), ("0007-3", 128)] {
            GrayImage::from_pixel(8, 6, Luma([value])).save(wdir.join(format!("{name}.png"))).unwrap();
        }
        let white = load_page(&wdir.join("0007-1.png"), 0.5).unwrap();
        assert_eq!(white.writer_id, "0007");
        assert_eq!(white.page_id, "0007-1");
        assert_eq!((white.width, white.height), (8, 6));
        assert_eq!(white.ink_fraction(), 0.0);
        assert_eq!(load_page(&wdir.join("0007-2.png"), 0.5).unwrap().ink_fraction(), 1.0);
        assert_eq!(load_page(&wdir.join("0007-3.png"), 0.5).unwrap().ink_fraction(), 0.0);
        assert!(load_page(&wdir.join("0007-3.png"), 1.0).is_err());
        assert!(matches!(load_page(&wdir.join("missing.png"), 0.5), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn ambiguous_writer_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let wdir = dir.path().join("alice");
        fs::create_dir_all(&wdir).unwrap();
        let p = wdir.join("bob_1.png");
        GrayImage::from_pixel(4, 4, Luma([255])).save(&p).unwrap();
        let err = load_page(&p, 0.5).unwrap_err();
        assert!(err.to_string().contains("ambiguous"), "{err}");
    }

    #[test]
    fn blank_page_yields_no_snippets() {
        let page = page_from(vec![1.0; 128 * 128], 128, 128);
        let grid = extract_snippets(&page, 64, SamplingMode::Grid, 0.02, 0, 0).unwrap();
        assert!(grid.snippets.is_empty());
        let random = extract_snippets(&page, 64, SamplingMode::Random, 0.02, 2, 0).unwrap();
        assert!(random.snippets.is_empty());
        assert_eq!(random.shortfall, Some(2));
    }

    #[test]
    fn window_with_82_ink_pixels_is_kept() {
        let mut px = vec![1.0; 64 * 64];
        px[..82].fill(0.0);
        let page = page_from(px, 64, 64);
        let e = extract_snippets(&page, 64, SamplingMode::Grid, 0.02, 0, 0).unwrap();
        assert_eq!(e.snippets.len(), 1);
        assert!((e.snippets[0].ink_fraction - 82.0 / 4096.0).abs() < 1e-12);
    }

    #[test]
    fn grid_tiling_count() {
        let page = page_from(vec![0.0; 800 * 800], 800, 800);
        let e = extract_snippets(&page, 400, SamplingMode::Grid, 0.02, 0, 0).unwrap();
        assert_eq!(e.snippets.len(), 4);
        let origins: Vec<_> = e.snippets.iter().map(|s| s.origin).collect();
        assert_eq!(origins, vec![(0, 0), (0, 400), (400, 0), (400, 400)]);
        assert!(extract_snippets(&page, 801, SamplingMode::Grid, 0.0, 0, 0).is_err());
    }

    #[test]
    fn random_mode_is_seeded() {
        let mut px = vec![1.0; 100 * 100];
        for (i, p) in px.iter_mut().enumerate() {
            if (i / 100 + i % 100) % 7 == 0 {
                *p = 0.0;
            }
        }
        let page = page_from(px, 100, 100);
        let a = extract_snippets(&page, 32, SamplingMode::Random, 0.05, 5, 9).unwrap();
        let b = extract_snippets(&page, 32, SamplingMode::Random, 0.05, 5, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.snippets.len(), 5);
        assert!(a.shortfall.is_none());
    }

    #[test]
    fn split_examples() {
        let ten: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let s = split_writers(&ten, 0.5, 1).unwrap();
        assert_eq!((s.train_writers.len(), s.test_writers.len()), (5, 5));
        assert_eq!(s, split_writers(&ten, 0.5, 1).unwrap());
        let s3 = split_writers(&["a", "b", "c"], 0.5, 4).unwrap();
        assert_eq!((s3.train_writers.len(), s3.test_writers.len()), (2, 1));
        assert!(split_writers(&["a"], 0.5, 0).is_err());
        let all = split_writers(&ten, 1.0, 2).unwrap();
        assert_eq!((all.train_writers.len(), all.test_writers.len()), (10, 0));
        assert!(split_writers(&ten, 1.5, 2).is_err());
    }

    #[test]
    fn snippet_id_round_trip() {
        let id: SnippetId = "w03_p1:64:128:64".parse().unwrap();
        assert_eq!(id.page_id, "w03_p1");
        assert_eq!((id.row, id.col, id.size), (64, 128, 64));
        assert_eq!(id.to_string(), "w03_p1:64:128:64");
        assert!("nope".parse::<SnippetId>().is_err());
        assert!("p:1:x:3".parse::<SnippetId>().is_err());
    }
}
