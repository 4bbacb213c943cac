//! Deep-zoom pyramid geometry.
//!
//! Level 0 is the coarsest level (a 1x1 image), and `max_level` is full
//! resolution, so every level is exactly half the size of the next one up
//! (rounded up). All functions here are pure.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TILE_SIZE: u32 = 256;

/// Two candidate levels closer than this in log2 distance count as a tie.
const SELECT_LEVEL_TIE_BAND: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TileCodec {
    /// Lossless PNG tiles.
    #[default]
    Png,
    /// Lossy JPEG tiles (quality 90).
    Jpeg,
}

impl TileCodec {
    pub fn ext(self) -> &'static str {
        match self {
            TileCodec::Png => "png",
            TileCodec::Jpeg => "jpg",
        }
    }

    pub fn content_type(self) -> &'static str {
        match self {
            TileCodec::Png => "image/png",
            TileCodec::Jpeg => "image/jpeg",
        }
    }

    pub fn from_ext(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "png" => Some(TileCodec::Png),
            "jpg" | "jpeg" => Some(TileCodec::Jpeg),
            _ => None,
        }
    }

    pub fn is_lossless(self) -> bool {
        matches!(self, TileCodec::Png)
    }
}

impl fmt::Display for TileCodec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TileCodec::Png => "png",
            TileCodec::Jpeg => "jpeg",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideMetadata {
    pub slide_id: String,
    pub width_px: u64,
    pub height_px: u64,
    pub tile_size: u32,
    pub max_level: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpp: Option<f64>,
    pub channels: u8,
    pub codec: TileCodec,
}

impl SlideMetadata {
    pub fn new(
        slide_id: impl Into<String>,
        width_px: u64,
        height_px: u64,
        tile_size: u32,
        mpp: Option<f64>,
    ) -> Result<Self> {
        let meta = SlideMetadata {
            slide_id: slide_id.into(),
            width_px,
            height_px,
            tile_size,
            max_level: max_level_for(width_px.max(height_px)),
            mpp,
            channels: 3,
            codec: TileCodec::Png,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn with_codec(mut self, codec: TileCodec) -> Self {
        self.codec = codec;
        self
    }

    /// Checks the structural invariants, e.g. after reading a metadata document.
    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::Invalid(format!(
                "slide dimensions must be positive, got {}x{}",
                self.width_px, self.height_px
            )));
        }
        if self.tile_size == 0 {
            return Err(Error::Invalid("tile_size must be positive".into()));
        }
        if let Some(mpp) = self.mpp {
            if !(mpp.is_finite() && mpp > 0.0) {
                return Err(Error::Invalid(format!("mpp must be positive, got {mpp}")));
            }
        }
        let expected = max_level_for(self.width_px.max(self.height_px));
        if self.max_level != expected {
            return Err(Error::Invalid(format!(
                "max_level {} inconsistent with dimensions (expected {expected})",
                self.max_level
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> impl Iterator<Item = LevelSpec> + '_ {
        (0..=self.max_level).map(move |l| level_spec_unchecked(self, l))
    }

    pub fn total_tiles(&self) -> u64 {
        self.levels().map(|l| l.tile_count()).sum()
    }
}

/// Smallest `l` with `2^l >= dim`.
pub fn max_level_for(dim: u64) -> u32 {
    if dim <= 1 {
        0
    } else {
        64 - (dim - 1).leading_zeros()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub level: u32,
    pub width_px: u64,
    pub height_px: u64,
    pub downsample: u64,
    pub cols: u64,
    pub rows: u64,
}

impl LevelSpec {
    pub fn tile_count(&self) -> u64 {
        self.cols * self.rows
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileAddress {
    pub slide_id: String,
    pub level: u32,
    pub col: u64,
    pub row: u64,
}

impl TileAddress {
    pub fn new(slide_id: impl Into<String>, level: u32, col: u64, row: u64) -> Self {
        TileAddress {
            slide_id: slide_id.into(),
            level,
            col,
            row,
        }
    }
}

impl fmt::Display for TileAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}_{}", self.slide_id, self.level, self.col, self.row)
    }
}

/// A rectangle in level-space pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub level: u32,
    pub x: u64,
    pub y: u64,
    #[serde(rename = "w")]
    pub width: u64,
    #[serde(rename = "h")]
    pub height: u64,
}

/// Client navigation window over one level.
pub type Viewport = Rect;
/// Server-side crop request; same shape as [`Viewport`].
pub type Region = Rect;

impl Rect {
    pub fn new(level: u32, x: u64, y: u64, width: u64, height: u64) -> Self {
        Rect {
            level,
            x,
            y,
            width,
            height,
        }
    }

    pub fn area(&self) -> u64 {
        self.width.saturating_mul(self.height)
    }

    /// Intersects with the level bounds. Fails if nothing is left.
    pub fn clamp_to(&self, spec: &LevelSpec) -> Result<Rect> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid(format!("empty rectangle {self}")));
        }
        if self.x >= spec.width_px || self.y >= spec.height_px {
            return Err(Error::OutOfBounds(self.to_string()));
        }
        let x_end = self.x.saturating_add(self.width).min(spec.width_px);
        let y_end = self.y.saturating_add(self.height).min(spec.height_px);
        Ok(Rect::new(self.level, self.x, self.y, x_end - self.x, y_end - self.y))
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "level {} ({}, {}) {}x{}",
            self.level, self.x, self.y, self.width, self.height
        )
    }
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

fn level_spec_unchecked(meta: &SlideMetadata, level: u32) -> LevelSpec {
    let downsample = 1u64 << (meta.max_level - level);
    let width_px = ceil_div(meta.width_px, downsample);
    let height_px = ceil_div(meta.height_px, downsample);
    let ts = meta.tile_size as u64;
    LevelSpec {
        level,
        width_px,
        height_px,
        downsample,
        cols: ceil_div(width_px, ts),
        rows: ceil_div(height_px, ts),
    }
}

pub fn level_spec(meta: &SlideMetadata, level: u32) -> Result<LevelSpec> {
    if level > meta.max_level {
        return Err(Error::LevelOutOfRange {
            level,
            max_level: meta.max_level,
        });
    }
    Ok(level_spec_unchecked(meta, level))
}

/// Validates `addr` against the slide's grid.
pub fn check_address(meta: &SlideMetadata, addr: &TileAddress) -> Result<LevelSpec> {
    let spec = level_spec(meta, addr.level)?;
    if addr.col >= spec.cols || addr.row >= spec.rows {
        return Err(Error::TileOutOfRange {
            level: addr.level,
            col: addr.col,
            row: addr.row,
            cols: spec.cols,
            rows: spec.rows,
        });
    }
    Ok(spec)
}

/// Pixel rectangle covered by a tile; edge tiles are clipped to the level.
pub fn tile_bounds(meta: &SlideMetadata, addr: &TileAddress) -> Result<Region> {
    let spec = check_address(meta, addr)?;
    let ts = meta.tile_size as u64;
    let x = addr.col * ts;
    let y = addr.row * ts;
    Ok(Rect::new(
        addr.level,
        x,
        y,
        ts.min(spec.width_px - x),
        ts.min(spec.height_px - y),
    ))
}

/// Inclusive column and row ranges of the tiles a clamped rectangle touches.
pub fn tile_span(meta: &SlideMetadata, rect: &Rect) -> Result<(Rect, [u64; 4])> {
    let spec = level_spec(meta, rect.level)?;
    let clamped = rect.clamp_to(&spec)?;
    let ts = meta.tile_size as u64;
    let c0 = clamped.x / ts;
    let c1 = (clamped.x + clamped.width - 1) / ts;
    let r0 = clamped.y / ts;
    let r1 = (clamped.y + clamped.height - 1) / ts;
    Ok((clamped, [c0, c1, r0, r1]))
}

/// Tiles intersecting the (clamped) viewport, in row-major order.
pub fn tiles_for_viewport(meta: &SlideMetadata, vp: &Viewport) -> Result<Vec<TileAddress>> {
    let (_, [c0, c1, r0, r1]) = tile_span(meta, vp)?;
    let mut out = Vec::with_capacity(((c1 - c0 + 1) * (r1 - r0 + 1)) as usize);
    for row in r0..=r1 {
        for col in c0..=c1 {
            out.push(TileAddress::new(meta.slide_id.clone(), vp.level, col, row));
        }
    }
    Ok(out)
}

/// Viewport tiles grown by `ring` tiles on every side, clipped to the grid.
pub fn tiles_with_ring(meta: &SlideMetadata, vp: &Viewport, ring: u32) -> Result<Vec<TileAddress>> {
    let spec = level_spec(meta, vp.level)?;
    let (_, [c0, c1, r0, r1]) = tile_span(meta, vp)?;
    let ring = ring as u64;
    let (c0, r0) = (c0.saturating_sub(ring), r0.saturating_sub(ring));
    let c1 = (c1 + ring).min(spec.cols - 1);
    let r1 = (r1 + ring).min(spec.rows - 1);
    let mut out = Vec::new();
    for row in r0..=r1 {
        for col in c0..=c1 {
            out.push(TileAddress::new(meta.slide_id.clone(), vp.level, col, row));
        }
    }
    Ok(out)
}

/// Level whose downsample is nearest to `requested_downsample` in log2
/// distance; near-ties go to the higher-resolution level.
pub fn select_level(meta: &SlideMetadata, requested_downsample: f64) -> Result<u32> {
    if !(requested_downsample.is_finite() && requested_downsample > 0.0) {
        return Err(Error::Invalid(format!(
            "requested downsample must be positive and finite, got {requested_downsample}"
        )));
    }
    let max = meta.max_level as f64;
    // Fractional level index; higher is finer.
    let ideal = (max - requested_downsample.log2()).clamp(0.0, max);
    let coarse = ideal.floor();
    let fine = ideal.ceil();
    let d_coarse = ideal - coarse;
    let d_fine = fine - ideal;
    let pick = if d_fine <= d_coarse + SELECT_LEVEL_TIE_BAND {
        fine
    } else {
        coarse
    };
    Ok(pick as u32)
}

/// Physical extent of a viewport in microns: (width, height).
pub fn viewport_physical_extent(meta: &SlideMetadata, vp: &Viewport) -> Result<(f64, f64)> {
    let mpp = meta.mpp.ok_or_else(|| {
        Error::Unsupported(format!(
            "slide '{}' has no microns-per-pixel calibration",
            meta.slide_id
        ))
    })?;
    let spec = level_spec(meta, vp.level)?;
    let scale = mpp * spec.downsample as f64;
    Ok((vp.width as f64 * scale, vp.height as f64 * scale))
}
