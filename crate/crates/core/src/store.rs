//! On-disk pyramid store and its in-memory cache layers.
//!
//! Layout under the store root:
//!
//! ```text
//! <root>/<slide_id>/meta                    metadata document (TOML)
//! <root>/<slide_id>/<level>/<col>_<row>.<ext>
//! <root>/.similarity.idx                    descriptor index (see `cbir`)
//! ```
//!
//! Two LRU layers sit in front of the disk: a slide cache of open handles
//! bounded by entry count, and a tile cache of encoded payloads bounded by
//! bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bytes::Bytes;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::LazyLock;

use crate::error::{Error, Result};
use crate::lru::{CacheStats, SharedLru};
use crate::pyramid::{self, Region, SlideMetadata, TileAddress};
use crate::raster::{self, PixelBlock};

pub const META_FILE: &str = "meta";
pub const INDEX_FILE: &str = ".similarity.idx";
pub const DEFAULT_TILE_CACHE_BYTES: u64 = 512 * 1024 * 1024;
pub const DEFAULT_SLIDE_CACHE_ENTRIES: u64 = 16;

static SLIDE_ID: LazyLock<Regex> = LazyLock::new(|| Regex::new("^[a-z0-9_-]{1,64}$").unwrap());

pub fn is_valid_slide_id(id: &str) -> bool {
    SLIDE_ID.is_match(id)
}

pub fn validate_slide_id(id: &str) -> Result<()> {
    if is_valid_slide_id(id) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("slide id '{id}' must match [a-z0-9_-]{{1,64}}")))
    }
}

/// Path arithmetic for a store root. Does no I/O except listing.
#[derive(Debug, Clone)]
pub struct StoreLayout {
    root: PathBuf,
}

impl StoreLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StoreLayout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn slide_dir(&self, slide_id: &str) -> PathBuf {
        self.root.join(slide_id)
    }

    pub fn meta_path(&self, slide_id: &str) -> PathBuf {
        self.slide_dir(slide_id).join(META_FILE)
    }

    pub fn index_path(&self) -> PathBuf {
        self.root.join(INDEX_FILE)
    }

    pub fn tile_path(&self, meta: &SlideMetadata, level: u32, col: u64, row: u64) -> PathBuf {
        tile_path_in(&self.slide_dir(&meta.slide_id), meta, level, col, row)
    }

    /// Slide directories that carry a metadata file, sorted by id.
    pub fn slide_ids(&self) -> Result<Vec<String>> {
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&self.root, e)),
        };
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let Ok(name) = entry.file_name().into_string() else {
                continue;
            };
            if is_valid_slide_id(&name) && entry.path().join(META_FILE).is_file() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }
}

pub(crate) fn tile_path_in(slide_dir: &Path, meta: &SlideMetadata, level: u32, col: u64, row: u64) -> PathBuf {
    slide_dir
        .join(level.to_string())
        .join(format!("{col}_{row}.{}", meta.codec.ext()))
}

pub fn meta_to_string(meta: &SlideMetadata) -> String {
    toml::to_string(meta).expect("metadata serializes")
}

pub fn parse_meta(slide_id: &str, text: &str) -> Result<SlideMetadata> {
    let meta: SlideMetadata = toml::from_str(text)
        .map_err(|e| Error::corrupt(slide_id, format!("malformed meta document: {}", e.message())))?;
    meta.validate()
        .map_err(|e| Error::corrupt(slide_id, format!("invalid meta document: {e}")))?;
    if meta.slide_id != slide_id {
        return Err(Error::corrupt(
            slide_id,
            format!("meta document names slide '{}'", meta.slide_id),
        ));
    }
    Ok(meta)
}

pub fn write_meta(path: &Path, meta: &SlideMetadata) -> Result<()> {
    fs::write(path, meta_to_string(meta)).map_err(|e| Error::io(path, e))
}

/// Reads and parses a slide's metadata; also returns the SHA-256 of the
/// raw document, used to detect stale similarity indexes.
pub fn read_meta(layout: &StoreLayout, slide_id: &str) -> Result<(SlideMetadata, [u8; 32])> {
    if !is_valid_slide_id(slide_id) {
        return Err(Error::SlideNotFound(slide_id.to_string()));
    }
    let path = layout.meta_path(slide_id);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::SlideNotFound(slide_id.to_string())),
        Err(e) => return Err(Error::io(path, e)),
    };
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::corrupt(slide_id, "meta document is not UTF-8"))?;
    let meta = parse_meta(slide_id, text)?;
    Ok((meta, Sha256::digest(&bytes).into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    pub tile_cache_capacity_bytes: u64,
    pub slide_cache_capacity_entries: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            tile_cache_capacity_bytes: DEFAULT_TILE_CACHE_BYTES,
            slide_cache_capacity_entries: DEFAULT_SLIDE_CACHE_ENTRIES,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_cache_capacity_bytes == 0 || self.slide_cache_capacity_entries == 0 {
            return Err(Error::Config("cache capacities must be positive".into()));
        }
        Ok(())
    }
}

/// An open slide: parsed metadata plus where its tiles live.
#[derive(Debug)]
pub struct SlideHandle {
    pub meta: SlideMetadata,
    pub meta_digest: [u8; 32],
    dir: PathBuf,
}

impl SlideHandle {
    pub fn tile_path(&self, level: u32, col: u64, row: u64) -> PathBuf {
        tile_path_in(&self.dir, &self.meta, level, col, row)
    }
}

#[derive(Debug, Clone)]
pub struct TileFetch {
    pub payload: Bytes,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StoreStats {
    pub tiles: CacheStats,
    pub slides: CacheStats,
}

/// Readable slides, plus the ids that failed to open and why.
pub type SlideListing = (Vec<SlideMetadata>, Vec<(String, Error)>);

/// A pyramid store with slide and tile caches. Safe to share across threads.
pub struct PyramidStore {
    layout: StoreLayout,
    slides: SharedLru<String, Arc<SlideHandle>>,
    tiles: SharedLru<TileAddress, Bytes>,
}

impl PyramidStore {
    pub fn open(root: impl Into<PathBuf>, cfg: CacheConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PyramidStore {
            layout: StoreLayout::new(root),
            slides: SharedLru::new(cfg.slide_cache_capacity_entries),
            tiles: SharedLru::new(cfg.tile_cache_capacity_bytes),
        })
    }

    pub fn layout(&self) -> &StoreLayout {
        &self.layout
    }

    /// Metadata and handle for a slide; cached handles skip the disk.
    pub fn open_slide(&self, slide_id: &str) -> Result<Arc<SlideHandle>> {
        if let Some(h) = self.slides.get(slide_id) {
            return Ok(h);
        }
        let (meta, meta_digest) = read_meta(&self.layout, slide_id)?;
        let handle = Arc::new(SlideHandle {
            meta,
            meta_digest,
            dir: self.layout.slide_dir(slide_id),
        });
        self.slides.insert(slide_id.to_string(), handle.clone(), 1);
        Ok(handle)
    }

    /// Every readable slide in id order, plus the ids whose metadata failed
    /// to load.
    pub fn list_slides(&self) -> Result<SlideListing> {
        let mut ok = Vec::new();
        let mut failed = Vec::new();
        for id in self.layout.slide_ids()? {
            match self.open_slide(&id) {
                Ok(h) => ok.push(h.meta.clone()),
                Err(e) => failed.push((id, e)),
            }
        }
        Ok((ok, failed))
    }

    /// Encoded tile payload, from cache when possible.
    pub fn get_tile(&self, addr: &TileAddress) -> Result<TileFetch> {
        let handle = self.open_slide(&addr.slide_id)?;
        pyramid::check_address(&handle.meta, addr)?;
        if let Some(payload) = self.tiles.get(addr) {
            return Ok(TileFetch {
                payload,
                cache_hit: true,
            });
        }
        let payload = Bytes::from(read_tile_file(&handle, addr)?);
        self.tiles.insert(addr.clone(), payload.clone(), payload.len() as u64);
        Ok(TileFetch {
            payload,
            cache_hit: false,
        })
    }

    /// Loads a tile into the cache without counting a lookup. Returns false
    /// when it was already resident.
    pub fn warm_tile(&self, addr: &TileAddress) -> Result<bool> {
        if self.tiles.contains(addr) {
            return Ok(false);
        }
        let handle = self.open_slide(&addr.slide_id)?;
        pyramid::check_address(&handle.meta, addr)?;
        let payload = Bytes::from(read_tile_file(&handle, addr)?);
        self.tiles.insert(addr.clone(), payload.clone(), payload.len() as u64);
        Ok(true)
    }

    pub fn tile_pixels(&self, addr: &TileAddress) -> Result<PixelBlock> {
        let fetch = self.get_tile(addr)?;
        raster::decode(&fetch.payload).map_err(|e| Error::corrupt(&addr.slide_id, format!("tile {addr}: {e}")))
    }

    /// Stitches the tiles covering `region` and crops to it exactly. The
    /// region is clamped to the level first; `max_area` applies to the
    /// clamped area.
    pub fn render_region(&self, slide_id: &str, region: &Region, max_area: u64) -> Result<PixelBlock> {
        let handle = self.open_slide(slide_id)?;
        let meta = &handle.meta;
        let (clamped, [c0, c1, r0, r1]) = pyramid::tile_span(meta, region)?;
        if clamped.area() > max_area {
            return Err(Error::RegionTooLarge {
                area: clamped.area(),
                limit: max_area,
            });
        }
        let ts = meta.tile_size as u64;
        let mut canvas = PixelBlock::filled(clamped.width as usize, clamped.height as usize, 3, 0);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let addr = TileAddress::new(slide_id, region.level, col, row);
                let tile = self.tile_pixels(&addr)?;
                let bounds = pyramid::tile_bounds(meta, &addr)?;
                if (tile.width as u64, tile.height as u64) != (bounds.width, bounds.height) {
                    return Err(Error::corrupt(
                        slide_id,
                        format!(
                            "tile {addr} is {}x{}, expected {}x{}",
                            tile.width, tile.height, bounds.width, bounds.height
                        ),
                    ));
                }
                // Overlap of this tile with the clamped region, in level space.
                let x0 = clamped.x.max(col * ts);
                let y0 = clamped.y.max(row * ts);
                let x1 = (clamped.x + clamped.width).min(bounds.x + bounds.width);
                let y1 = (clamped.y + clamped.height).min(bounds.y + bounds.height);
                let part = tile.crop(
                    (x0 - bounds.x) as usize,
                    (y0 - bounds.y) as usize,
                    (x1 - x0) as usize,
                    (y1 - y0) as usize,
                );
                canvas.blit(&part, (x0 - clamped.x) as usize, (y0 - clamped.y) as usize);
            }
        }
        Ok(canvas)
    }

    /// Drops cached state for one slide, e.g. after it was re-ingested.
    pub fn invalidate_slide(&self, slide_id: &str) {
        self.slides.invalidate(|k| k != slide_id);
        self.tiles.invalidate(|k| k.slide_id != slide_id);
    }

    pub fn tile_stats(&self) -> CacheStats {
        self.tiles.stats()
    }

    pub fn slide_stats(&self) -> CacheStats {
        self.slides.stats()
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats {
            tiles: self.tile_stats(),
            slides: self.slide_stats(),
        }
    }
}

fn read_tile_file(handle: &SlideHandle, addr: &TileAddress) -> Result<Vec<u8>> {
    let path = handle.tile_path(addr.level, addr.col, addr.row);
    fs::read(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::corrupt(&addr.slide_id, format!("missing tile file for {addr}"))
        } else {
            Error::io(path, e)
        }
    })
}
