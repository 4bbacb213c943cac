//! Similar-case retrieval over the local slide library.
//!
//! Each slide is summarized by a fixed-length descriptor computed from a
//! thumbnail; queries are answered by an exact cosine scan of the whole
//! library. The index lives next to the store as one binary file and records
//! a digest of every slide's metadata document so staleness can be detected.
//!
//! Index file layout (little endian):
//!
//! ```text
//! magic   4 bytes  "SIDX"
//! version u32      1
//! dim     u32      descriptor length
//! count   u32      number of entries
//! entry*  { id_len u8, id bytes, meta_sha256 [u8; 32], dim x f64 }
//! ```

use std::cmp::Ordering;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pyramid::{self, Region, SlideMetadata};
use crate::raster::PixelBlock;
use crate::store::PyramidStore;

pub const HIST_BINS: usize = 8;
pub const THUMB_SIDE: usize = 8;
pub const DESCRIPTOR_LEN: usize = 3 * HIST_BINS + THUMB_SIDE * THUMB_SIDE;
pub const DEFAULT_K: usize = 5;
/// Longest side of the whole-slide thumbnail descriptors are computed from.
pub const THUMBNAIL_MAX_SIDE: u64 = 1024;

const MAGIC: &[u8; 4] = b"SIDX";
const VERSION: u32 = 1;

/// Turns pixels into a unit-norm feature vector.
pub trait Describer: Send + Sync {
    /// Length of every vector this describer produces.
    fn dim(&self) -> usize;
    fn describe(&self, pixels: &PixelBlock) -> Result<Vec<f64>>;
}

/// Per-channel 8-bin histograms followed by an 8x8 grayscale thumbnail.
#[derive(Debug, Default, Clone, Copy)]
pub struct HistogramThumbnail;

impl Describer for HistogramThumbnail {
    fn dim(&self) -> usize {
        DESCRIPTOR_LEN
    }

    fn describe(&self, pixels: &PixelBlock) -> Result<Vec<f64>> {
        compute_descriptor(pixels)
    }
}

fn luma(p: &[u8]) -> f64 {
    (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0
}

/// For each source index along an axis of length `n`, the (cell, overlap)
/// pairs it contributes to when the axis is cut into `cells` equal parts.
/// Coordinates are scaled by `cells` so overlaps are integers.
fn axis_weights(n: usize, cells: usize) -> Vec<Vec<(usize, u64)>> {
    (0..n)
        .map(|i| {
            let (lo, hi) = ((i * cells) as u64, ((i + 1) * cells) as u64);
            let first = (lo / n as u64) as usize;
            let last = (((hi - 1) / n as u64) as usize).min(cells - 1);
            (first..=last)
                .filter_map(|c| {
                    let c_lo = (c * n) as u64;
                    let c_hi = ((c + 1) * n) as u64;
                    let overlap = hi.min(c_hi).saturating_sub(lo.max(c_lo));
                    (overlap > 0).then_some((c, overlap))
                })
                .collect()
        })
        .collect()
}

/// The 88-dim histogram + thumbnail descriptor, L2-normalized.
pub fn compute_descriptor(pixels: &PixelBlock) -> Result<Vec<f64>> {
    if pixels.width == 0 || pixels.height == 0 || pixels.data.is_empty() {
        return Err(Error::Invalid("cannot describe an empty raster".into()));
    }
    if pixels.channels != 3 {
        return Err(Error::Invalid(format!(
            "descriptor needs RGB pixels, got {} channels",
            pixels.channels
        )));
    }
    let (w, h) = (pixels.width, pixels.height);
    let mut counts = [[0u64; HIST_BINS]; 3];
    let xw = axis_weights(w, THUMB_SIDE);
    let yw = axis_weights(h, THUMB_SIDE);
    let mut thumb = [0f64; THUMB_SIDE * THUMB_SIDE];
    let mut row_acc = [0f64; THUMB_SIDE];
    for (y, cells_y) in yw.iter().enumerate() {
        row_acc.fill(0.0);
        let row = pixels.row(y);
        for x in 0..w {
            let p = &row[x * 3..x * 3 + 3];
            for c in 0..3 {
                counts[c][(p[c] >> 5) as usize] += 1;
            }
            let g = luma(p);
            for &(cell, ox) in &xw[x] {
                row_acc[cell] += g * ox as f64;
            }
        }
        for &(cell_y, oy) in cells_y {
            for (cell_x, acc) in row_acc.iter().enumerate() {
                thumb[cell_y * THUMB_SIDE + cell_x] += acc * oy as f64;
            }
        }
    }
    // Scaled overlaps of one cell sum to w per axis.
    let cell_area = (w * h) as f64;
    let total = (w * h) as f64;
    let mut v = Vec::with_capacity(DESCRIPTOR_LEN);
    for channel in &counts {
        v.extend(channel.iter().map(|&n| n as f64 / total));
    }
    v.extend(thumb.iter().map(|s| s / cell_area));
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDescriptor {
    pub slide_id: String,
    pub vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_region: Option<Region>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub k: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { k: DEFAULT_K }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub slide_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryEcho {
    pub slide_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub query: QueryEcho,
    pub hits: Vec<SearchHit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub slide_id: String,
    pub meta_digest: [u8; 32],
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
}

/// Level whose longest side is the largest not exceeding the thumbnail size.
pub fn thumbnail_level(meta: &SlideMetadata) -> u32 {
    meta.levels()
        .filter(|l| l.width_px.max(l.height_px) <= THUMBNAIL_MAX_SIDE)
        .map(|l| l.level)
        .max()
        .unwrap_or(0)
}

pub fn thumbnail_region(meta: &SlideMetadata) -> Region {
    let level = thumbnail_level(meta);
    let spec = pyramid::level_spec(meta, level).expect("level from metadata");
    Region::new(level, 0, 0, spec.width_px, spec.height_px)
}

pub fn render_thumbnail(store: &PyramidStore, slide_id: &str) -> Result<PixelBlock> {
    let handle = store.open_slide(slide_id)?;
    store.render_region(slide_id, &thumbnail_region(&handle.meta), u64::MAX)
}

fn meta_digest(store: &PyramidStore, slide_id: &str) -> Result<[u8; 32]> {
    let path = store.layout().meta_path(slide_id);
    let bytes = fs::read(&path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).into())
}

impl SimilarityIndex {
    pub fn from_entries(dim: usize, mut entries: Vec<IndexEntry>) -> Result<Self> {
        for e in &entries {
            if e.vector.len() != dim {
                return Err(Error::Invalid(format!(
                    "descriptor for '{}' has {} dims, index expects {dim}",
                    e.slide_id,
                    e.vector.len()
                )));
            }
            if !e.vector.iter().all(|x| x.is_finite()) {
                return Err(Error::Invalid(format!("descriptor for '{}' is not finite", e.slide_id)));
            }
        }
        entries.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
        Ok(SimilarityIndex { dim, entries })
    }

    /// One whole-slide descriptor per slide in the store.
    pub fn build(store: &PyramidStore, describer: &dyn Describer) -> Result<Self> {
        let ids = store.layout().slide_ids()?;
        if ids.is_empty() {
            return Err(Error::Invalid("cannot index an empty store".into()));
        }
        let mut entries = Vec::with_capacity(ids.len());
        for id in ids {
            let meta_digest = store.open_slide(&id)?.meta_digest;
            let vector = describer.describe(&render_thumbnail(store, &id)?)?;
            entries.push(IndexEntry {
                slide_id: id,
                meta_digest,
                vector,
            });
        }
        SimilarityIndex::from_entries(describer.dim(), entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, slide_id: &str) -> Option<&IndexEntry> {
        self.entries
            .binary_search_by(|e| e.slide_id.as_str().cmp(slide_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Exact top-k by cosine similarity; ties go to the smaller slide id.
    pub fn search(&self, query: &[f64], cfg: &SearchConfig) -> Result<Vec<SearchHit>> {
        cfg.validate()?;
        if query.len() != self.dim {
            return Err(Error::Invalid(format!(
                "query has {} dims, index expects {}",
                query.len(),
                self.dim
            )));
        }
        let mut scored: Vec<SearchHit> = self
            .entries
            .iter()
            .map(|e| SearchHit {
                slide_id: e.slide_id.clone(),
                score: cosine(query, &e.vector),
            })
            .collect();
        scored.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.slide_id.cmp(&b.slide_id))
        });
        scored.truncate(cfg.k);
        Ok(scored)
    }

    /// Reasons the index no longer matches the store; empty when fresh.
    pub fn staleness(&self, store: &PyramidStore) -> Result<Vec<String>> {
        let ids = store.layout().slide_ids()?;
        let mut reasons = Vec::new();
        for id in &ids {
            match self.get(id) {
                None => reasons.push(format!("slide '{id}' is not indexed")),
                Some(e) => {
                    if meta_digest(store, id)? != e.meta_digest {
                        reasons.push(format!("slide '{id}' changed since indexing"));
                    }
                }
            }
        }
        for e in &self.entries {
            if ids.binary_search(&e.slide_id).is_err() {
                reasons.push(format!("indexed slide '{}' is gone", e.slide_id));
            }
        }
        Ok(reasons)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.entries.len() * (40 + 8 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.push(e.slide_id.len() as u8);
            out.extend_from_slice(e.slide_id.as_bytes());
            out.extend_from_slice(&e.meta_digest);
            for x in &e.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::IndexRequired(format!("index file unreadable: {why}"));
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim = u32_at(take(4)?) as usize;
        let count = u32_at(take(4)?) as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let id_len = take(1)?[0] as usize;
            let slide_id = std::str::from_utf8(take(id_len)?)
                .map_err(|_| bad("slide id not UTF-8"))?
                .to_string();
            let meta_digest: [u8; 32] = take(32)?.try_into().unwrap();
            let vector = take(8 * dim)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(IndexEntry {
                slide_id,
                meta_digest,
                vector,
            });
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        SimilarityIndex::from_entries(dim, entries)
    }

    /// Writes atomically via a sibling temp file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        match fs::read(path) {
            Ok(bytes) => SimilarityIndex::from_bytes(&bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::IndexRequired(format!(
                "no index at {}; build one first",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

/// Builds the index for `store` and persists it beside the store.
pub fn index_library(store: &PyramidStore) -> Result<SimilarityIndex> {
    let index = SimilarityIndex::build(store, &HistogramThumbnail)?;
    index.save(&store.layout().index_path())?;
    Ok(index)
}

/// The live index shared by request handlers. Rebuilds swap in a new
/// immutable index; searches in flight keep the one they started with.
pub struct IndexHandle {
    current: RwLock<Option<Arc<SimilarityIndex>>>,
    auto_refresh: bool,
}

impl IndexHandle {
    pub fn new(auto_refresh: bool) -> Self {
        IndexHandle {
            current: RwLock::new(None),
            auto_refresh,
        }
    }

    pub fn auto_refresh(&self) -> bool {
        self.auto_refresh
    }

    pub fn swap(&self, index: SimilarityIndex) -> Arc<SimilarityIndex> {
        let arc = Arc::new(index);
        *self.current.write() = Some(arc.clone());
        arc
    }

    pub fn rebuild(&self, store: &PyramidStore) -> Result<Arc<SimilarityIndex>> {
        Ok(self.swap(index_library(store)?))
    }

    /// An index that matches the store, loading from disk on first use.
    /// Stale indexes are rebuilt when auto-refresh is on and rejected
    /// otherwise.
    pub fn fresh(&self, store: &PyramidStore) -> Result<Arc<SimilarityIndex>> {
        let loaded = self.current.read().clone();
        let index = match loaded {
            Some(i) => i,
            None => match SimilarityIndex::load(&store.layout().index_path()) {
                Ok(i) => self.swap(i),
                Err(Error::IndexRequired(_)) if self.auto_refresh => return self.rebuild(store),
                Err(e) => return Err(e),
            },
        };
        if index.dim() != DESCRIPTOR_LEN {
            return Err(Error::IndexRequired(format!(
                "index holds {}-dim descriptors, expected {DESCRIPTOR_LEN}",
                index.dim()
            )));
        }
        let stale = index.staleness(store)?;
        if stale.is_empty() {
            return Ok(index);
        }
        if self.auto_refresh {
            tracing::info!(reasons = ?stale, "similarity index stale; rebuilding");
            return self.rebuild(store);
        }
        // Pick up an index rebuilt out of process before giving up.
        if let Ok(on_disk) = SimilarityIndex::load(&store.layout().index_path()) {
            if on_disk.staleness(store)?.is_empty() {
                return Ok(self.swap(on_disk));
            }
        }
        tracing::warn!(reasons = ?stale, "similarity index is stale");
        Err(Error::IndexRequired(format!(
            "index is stale ({}); rebuild it or enable auto-refresh",
            stale.join("; ")
        )))
    }
}

/// Describes a slide region (or its whole-slide thumbnail) and searches the
/// library with it.
pub fn search_slide(
    store: &PyramidStore,
    index: &SimilarityIndex,
    slide_id: &str,
    region: Option<Region>,
    cfg: &SearchConfig,
    max_region_area: u64,
) -> Result<SearchResult> {
    cfg.validate()?;
    let pixels = match &region {
        Some(r) => store.render_region(slide_id, r, max_region_area)?,
        None => render_thumbnail(store, slide_id)?,
    };
    let query = compute_descriptor(&pixels)?;
    Ok(SearchResult {
        query: QueryEcho {
            slide_id: slide_id.to_string(),
            region,
            k: cfg.k,
        },
        hits: index.search(&query, cfg)?,
    })
}
