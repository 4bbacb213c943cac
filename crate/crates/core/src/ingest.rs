//! Builds an on-disk tile pyramid from a raster source.
//!
//! Rows stream through a cascade of per-level stages. Each stage buffers one
//! tile-high stripe, writes it out as tiles when full, and pairs up its rows
//! to feed the next coarser level through the 2x box filter. Coarser levels
//! are built from the previous level's exact block sums, so each stored
//! pixel is the rounded mean of its full source block. Peak memory is about
//! two stripes of the full-resolution width, independent of height.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pyramid::{SlideMetadata, TileCodec, DEFAULT_TILE_SIZE};
use crate::raster::{self, PixelBlock};
use crate::store::{self, StoreLayout};
use crate::synth::SyntheticSlide;

pub const MIN_TILE_SIZE: u32 = 64;
pub const MAX_TILE_SIZE: u32 = 4096;

/// Anything that can hand out RGB rows top to bottom.
pub trait RowSource: Send {
    fn dimensions(&self) -> (u64, u64);
    /// Replaces `buf` with rows `[y, y + rows)`, 3 bytes per pixel.
    fn read_rows(&mut self, y: u64, rows: usize, buf: &mut Vec<u8>) -> Result<()>;
}

/// A decoded raster file held in memory.
pub struct ImageRows {
    block: PixelBlock,
}

impl ImageRows {
    pub fn open(path: &Path) -> Result<Self> {
        let reader = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?;
        let img = reader.decode().map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Codec(format!("{}: {other}", path.display())),
        })?;
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::Invalid(format!("{} has a zero dimension", path.display())));
        }
        if img.color().has_alpha() {
            tracing::warn!(path = %path.display(), "dropping alpha channel at ingest");
        }
        if img.color().bits_per_pixel() / img.color().channel_count() as u16 > 8 {
            tracing::warn!(path = %path.display(), "reducing samples to 8 bits");
        }
        Ok(ImageRows {
            block: PixelBlock::from_rgb_image(img.to_rgb8()),
        })
    }

    pub fn from_block(block: PixelBlock) -> Result<Self> {
        if block.channels != 3 {
            return Err(Error::Invalid("ingest expects RGB pixels".into()));
        }
        Ok(ImageRows { block })
    }
}

impl RowSource for ImageRows {
    fn dimensions(&self) -> (u64, u64) {
        (self.block.width as u64, self.block.height as u64)
    }

    fn read_rows(&mut self, y: u64, rows: usize, buf: &mut Vec<u8>) -> Result<()> {
        let stride = self.block.width * 3;
        let start = y as usize * stride;
        buf.clear();
        buf.extend_from_slice(&self.block.data[start..start + rows * stride]);
        Ok(())
    }
}

impl RowSource for SyntheticSlide {
    fn dimensions(&self) -> (u64, u64) {
        SyntheticSlide::dimensions(self)
    }

    fn read_rows(&mut self, y: u64, rows: usize, buf: &mut Vec<u8>) -> Result<()> {
        self.fill_rows(y, rows, buf);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum IngestSource {
    File(PathBuf),
    Synthetic { width: u64, height: u64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct IngestJob {
    pub source: IngestSource,
    pub slide_id: String,
    pub tile_size: u32,
    pub mpp: Option<f64>,
    pub codec: TileCodec,
    pub overwrite: bool,
}

impl IngestJob {
    pub fn new(source: IngestSource, slide_id: impl Into<String>) -> Self {
        IngestJob {
            source,
            slide_id: slide_id.into(),
            tile_size: DEFAULT_TILE_SIZE,
            mpp: None,
            codec: TileCodec::Png,
            overwrite: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        store::validate_slide_id(&self.slide_id)?;
        if !(MIN_TILE_SIZE..=MAX_TILE_SIZE).contains(&self.tile_size) {
            return Err(Error::Invalid(format!(
                "tile size {} outside [{MIN_TILE_SIZE}, {MAX_TILE_SIZE}]",
                self.tile_size
            )));
        }
        if let Some(mpp) = self.mpp {
            if !(mpp.is_finite() && mpp > 0.0) {
                return Err(Error::Invalid(format!("mpp must be positive, got {mpp}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub slide_id: String,
    pub width_px: u64,
    pub height_px: u64,
    pub levels_written: u32,
    pub tiles_written: u64,
    pub bytes_written: u64,
    #[serde(serialize_with = "as_secs")]
    pub wall_time: Duration,
}

fn as_secs<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

/// Removes the per-slide lock file when the ingest ends, however it ends.
struct SlideLock(PathBuf);

impl SlideLock {
    fn acquire(root: &Path, slide_id: &str) -> Result<Self> {
        let path = root.join(format!(".{slide_id}.lock"));
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(SlideLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::SlideExists(format!(
                "{slide_id} (another ingest holds {})",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for SlideLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Ingests `job` into the store rooted at `root`.
pub fn ingest(root: &Path, job: &IngestJob) -> Result<IngestReport> {
    job.validate()?;
    let mut source: Box<dyn RowSource> = match &job.source {
        IngestSource::File(path) => Box::new(ImageRows::open(path)?),
        IngestSource::Synthetic { width, height, seed } => Box::new(SyntheticSlide::new(*width, *height, *seed)?),
    };
    ingest_rows(root, job, source.as_mut())
}

/// Ingest from an arbitrary row source; `job.source` is ignored.
pub fn ingest_rows(root: &Path, job: &IngestJob, source: &mut dyn RowSource) -> Result<IngestReport> {
    job.validate()?;
    let started = Instant::now();
    let (width, height) = source.dimensions();
    let meta = SlideMetadata::new(&job.slide_id, width, height, job.tile_size, job.mpp)?.with_codec(job.codec);

    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let _lock = SlideLock::acquire(root, &job.slide_id)?;
    let layout = StoreLayout::new(root);
    let final_dir = layout.slide_dir(&job.slide_id);
    if final_dir.exists() && !job.overwrite {
        return Err(Error::SlideExists(job.slide_id.clone()));
    }

    let staging = root.join(format!(".staging-{}-{}", job.slide_id, std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let result = build_pyramid(&staging, &meta, source);
    let (tiles_written, bytes_written) = match result {
        Ok(v) => v,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    let meta_path = staging.join(store::META_FILE);
    store::write_meta(&meta_path, &meta)?;

    if final_dir.exists() {
        let retired = root.join(format!(".retired-{}-{}", job.slide_id, std::process::id()));
        fs::rename(&final_dir, &retired).map_err(|e| Error::io(&final_dir, e))?;
        fs::remove_dir_all(&retired).map_err(|e| Error::io(&retired, e))?;
    }
    fs::rename(&staging, &final_dir).map_err(|e| Error::io(&final_dir, e))?;

    let report = IngestReport {
        slide_id: job.slide_id.clone(),
        width_px: width,
        height_px: height,
        levels_written: meta.max_level + 1,
        tiles_written,
        bytes_written,
        wall_time: started.elapsed(),
    };
    tracing::info!(
        slide_id = %report.slide_id,
        levels = report.levels_written,
        tiles = report.tiles_written,
        bytes = report.bytes_written,
        secs = report.wall_time.as_secs_f64(),
        "ingest complete"
    );
    Ok(report)
}

/// A row on its way down the cascade. Coarser levels carry exact per-pixel
/// block sums and sample counts rather than rounded bytes, so every stored
/// pixel is the rounded mean of its whole source block and rounding never
/// compounds from level to level.
enum Row {
    /// Full-resolution samples.
    Pixels(Vec<u8>),
    /// Per-channel sums over each pixel's source block, plus the number of
    /// source pixels in the block (smaller at odd right/bottom edges).
    Sums { sums: Vec<u64>, counts: Vec<u64> },
}

impl Row {
    /// Adds this row's horizontally paired pixels into a half-width sum row.
    fn accumulate_into(&self, width: usize, sums: &mut [u64], counts: &mut [u64]) {
        match self {
            Row::Pixels(px) => {
                for x in 0..width {
                    let o = x / 2;
                    for c in 0..3 {
                        sums[o * 3 + c] += px[x * 3 + c] as u64;
                    }
                    counts[o] += 1;
                }
            }
            Row::Sums { sums: s, counts: n } => {
                for x in 0..width {
                    let o = x / 2;
                    for c in 0..3 {
                        sums[o * 3 + c] += s[x * 3 + c];
                    }
                    counts[o] += n[x];
                }
            }
        }
    }

    /// The next level's row from one or two rows of this level.
    fn halve(top: &Row, bottom: Option<&Row>, width: usize) -> Row {
        let out_w = width.div_ceil(2);
        let mut sums = vec![0u64; out_w * 3];
        let mut counts = vec![0u64; out_w];
        top.accumulate_into(width, &mut sums, &mut counts);
        if let Some(b) = bottom {
            b.accumulate_into(width, &mut sums, &mut counts);
        }
        Row::Sums { sums, counts }
    }

    /// Stored samples: rounded means, ties away from zero.
    fn append_pixels(&self, out: &mut Vec<u8>) {
        match self {
            Row::Pixels(px) => out.extend_from_slice(px),
            Row::Sums { sums, counts } => {
                out.extend(sums.iter().enumerate().map(|(i, s)| {
                    let n = counts[i / 3];
                    ((s + n / 2) / n) as u8
                }));
            }
        }
    }
}

/// One pyramid level's share of the streaming cascade.
struct LevelStage {
    level: u32,
    width: usize,
    tile_size: usize,
    dir: PathBuf,
    stripe: Vec<u8>,
    stripe_rows: usize,
    tile_row: u64,
    pending: Option<Row>,
}

impl LevelStage {
    /// Encodes and writes the buffered stripe as one row of tiles.
    fn flush(&mut self, codec: TileCodec, totals: &mut (u64, u64)) -> Result<()> {
        if self.stripe_rows == 0 {
            return Ok(());
        }
        let stripe = PixelBlock {
            width: self.width,
            height: self.stripe_rows,
            channels: 3,
            data: std::mem::take(&mut self.stripe),
        };
        let cols = self.width.div_ceil(self.tile_size);
        let ts = self.tile_size;
        let encoded: Vec<Result<(usize, Vec<u8>)>> = (0..cols)
            .into_par_iter()
            .map(|col| {
                let x = col * ts;
                let tile = stripe.crop(x, 0, ts.min(stripe.width - x), stripe.height);
                Ok((col, raster::encode(&tile, codec)?))
            })
            .collect();
        for item in encoded {
            let (col, bytes) = item?;
            let path = self.dir.join(format!("{col}_{}.{}", self.tile_row, codec.ext()));
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            totals.0 += 1;
            totals.1 += bytes.len() as u64;
        }
        let mut reuse = stripe.data;
        reuse.clear();
        self.stripe = reuse;
        self.stripe_rows = 0;
        self.tile_row += 1;
        Ok(())
    }
}

struct Cascade {
    stages: Vec<LevelStage>,
    codec: TileCodec,
    totals: (u64, u64),
}

impl Cascade {
    /// Feeds one row into stage `idx` and lets halved rows trickle down.
    fn push(&mut self, mut idx: usize, mut row: Row) -> Result<()> {
        let last = self.stages.len() - 1;
        loop {
            let codec = self.codec;
            let stage = &mut self.stages[idx];
            row.append_pixels(&mut stage.stripe);
            debug_assert_eq!(stage.stripe.len(), (stage.stripe_rows + 1) * stage.width * 3);
            stage.stripe_rows += 1;
            if stage.stripe_rows == stage.tile_size {
                stage.flush(codec, &mut self.totals)?;
            }
            if idx == last {
                return Ok(());
            }
            match stage.pending.take() {
                None => {
                    stage.pending = Some(row);
                    return Ok(());
                }
                Some(top) => {
                    row = Row::halve(&top, Some(&row), stage.width);
                    idx += 1;
                }
            }
        }
    }

    /// Flushes partial stripes and odd trailing rows, finest level first.
    fn finish(&mut self) -> Result<()> {
        for idx in 0..self.stages.len() {
            let codec = self.codec;
            let stage = &mut self.stages[idx];
            stage.flush(codec, &mut self.totals)?;
            if let Some(last) = stage.pending.take() {
                let next = Row::halve(&last, None, stage.width);
                self.push(idx + 1, next)?;
            }
        }
        Ok(())
    }
}

/// Writes every level of `meta` under `dir`. Returns (tiles, bytes).
fn build_pyramid(dir: &Path, meta: &SlideMetadata, source: &mut dyn RowSource) -> Result<(u64, u64)> {
    let mut stages = Vec::new();
    for spec in meta.levels().collect::<Vec<_>>().into_iter().rev() {
        let level_dir = dir.join(spec.level.to_string());
        fs::create_dir_all(&level_dir).map_err(|e| Error::io(&level_dir, e))?;
        stages.push(LevelStage {
            level: spec.level,
            width: spec.width_px as usize,
            tile_size: meta.tile_size as usize,
            dir: level_dir,
            stripe: Vec::new(),
            stripe_rows: 0,
            tile_row: 0,
            pending: None,
        });
    }
    let mut cascade = Cascade {
        stages,
        codec: meta.codec,
        totals: (0, 0),
    };
    let stride = meta.width_px as usize * 3;
    let ts = meta.tile_size as u64;
    let mut buf = Vec::new();
    let mut y = 0;
    while y < meta.height_px {
        let rows = ts.min(meta.height_px - y) as usize;
        source.read_rows(y, rows, &mut buf)?;
        if buf.len() != rows * stride {
            return Err(Error::Invalid(format!(
                "source returned {} bytes for {rows} rows of {stride}",
                buf.len()
            )));
        }
        for r in 0..rows {
            cascade.push(0, Row::Pixels(buf[r * stride..(r + 1) * stride].to_vec()))?;
        }
        y += rows as u64;
    }
    cascade.finish()?;
    for stage in &cascade.stages {
        let expect = meta
            .height_px
            .div_ceil(1 << (meta.max_level - stage.level))
            .div_ceil(ts);
        debug_assert_eq!(stage.tile_row, expect, "level {}", stage.level);
    }
    Ok(cascade.totals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{self, TileAddress};
    use crate::store::{CacheConfig, PyramidStore};

    fn noise_block(w: usize, h: usize, seed: u64) -> PixelBlock {
        let mut s = seed;
        let data = (0..w * h * 3)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 56) as u8
            })
            .collect();
        PixelBlock::new(w, h, 3, data).unwrap()
    }

    fn job(id: &str, ts: u32) -> IngestJob {
        IngestJob {
            tile_size: ts,
            ..IngestJob::new(
                IngestSource::Synthetic {
                    width: 1,
                    height: 1,
                    seed: 0,
                },
                id,
            )
        }
    }

    fn read_level(store: &PyramidStore, id: &str, level: u32) -> PixelBlock {
        let h = store.open_slide(id).unwrap();
        let spec = pyramid::level_spec(&h.meta, level).unwrap();
        store
            .render_region(
                id,
                &pyramid::Rect::new(level, 0, 0, spec.width_px, spec.height_px),
                u64::MAX,
            )
            .unwrap()
    }

    #[test]
    fn odd_sized_image_matches_in_memory_pyramid() {
        let dir = tempfile::tempdir().unwrap();
        let src = noise_block(203, 97, 5);
        let report = ingest_rows(
            dir.path(),
            &job("odd", 64),
            &mut ImageRows::from_block(src.clone()).unwrap(),
        )
        .unwrap();
        let meta = SlideMetadata::new("odd", 203, 97, 64, None).unwrap();
        assert_eq!(report.tiles_written, meta.total_tiles());
        assert_eq!(report.levels_written, meta.max_level + 1);
        let store = PyramidStore::open(dir.path(), CacheConfig::default()).unwrap();
        for level in (0..=meta.max_level).rev() {
            let oracle = block_mean_oracle(&src, 1 << (meta.max_level - level));
            assert_eq!(read_level(&store, "odd", level), oracle, "level {level}");
        }
        // The first reduction is exactly the 2x kernel.
        let finest_but_one = read_level(&store, "odd", meta.max_level - 1);
        assert_eq!(finest_but_one, raster::downsample_2x(&src));
    }

    /// Independent oracle: every output pixel averages its d x d source
    /// block (clipped at the edges) directly, rounding half up once.
    fn block_mean_oracle(src: &PixelBlock, d: usize) -> PixelBlock {
        let (w, h) = (src.width.div_ceil(d), src.height.div_ceil(d));
        let mut data = Vec::with_capacity(w * h * 3);
        for oy in 0..h {
            for ox in 0..w {
                for c in 0..3 {
                    let (mut sum, mut n) = (0u64, 0u64);
                    for y in oy * d..((oy + 1) * d).min(src.height) {
                        for x in ox * d..((ox + 1) * d).min(src.width) {
                            sum += src.pixel(x, y)[c] as u64;
                            n += 1;
                        }
                    }
                    data.push(((2 * sum + n) / (2 * n)) as u8);
                }
            }
        }
        PixelBlock::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn single_pixel_source() {
        let dir = tempfile::tempdir().unwrap();
        let src = PixelBlock::new(1, 1, 3, vec![9, 8, 7]).unwrap();
        let r = ingest_rows(dir.path(), &job("one", 256), &mut ImageRows::from_block(src).unwrap()).unwrap();
        assert_eq!((r.levels_written, r.tiles_written), (1, 1));
        let store = PyramidStore::open(dir.path(), CacheConfig::default()).unwrap();
        assert_eq!(
            store.tile_pixels(&TileAddress::new("one", 0, 0, 0)).unwrap().data,
            vec![9, 8, 7]
        );
    }

    #[test]
    fn duplicate_without_overwrite_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let src = noise_block(70, 70, 1);
        ingest_rows(
            dir.path(),
            &job("dup", 64),
            &mut ImageRows::from_block(src.clone()).unwrap(),
        )
        .unwrap();
        let err = ingest_rows(
            dir.path(),
            &job("dup", 64),
            &mut ImageRows::from_block(src.clone()).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SlideExists(_)));
        let mut again = job("dup", 64);
        again.overwrite = true;
        ingest_rows(
            dir.path(),
            &again,
            &mut ImageRows::from_block(noise_block(10, 10, 2)).unwrap(),
        )
        .unwrap();
        let store = PyramidStore::open(dir.path(), CacheConfig::default()).unwrap();
        assert_eq!(store.open_slide("dup").unwrap().meta.width_px, 10);
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(leftovers, vec![std::ffi::OsString::from("dup")]);
    }

    #[test]
    fn held_lock_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(".busy.lock"), b"").unwrap();
        let err = ingest_rows(
            dir.path(),
            &job("busy", 64),
            &mut ImageRows::from_block(noise_block(4, 4, 0)).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SlideExists(_)));
    }

    #[test]
    fn job_validation() {
        let dir = tempfile::tempdir().unwrap();
        let src = || ImageRows::from_block(noise_block(4, 4, 0)).unwrap();
        for bad in [job("Bad", 256), job("ok", 32), job("ok", 8192)] {
            let err = ingest_rows(dir.path(), &bad, &mut src()).unwrap_err();
            assert!(matches!(err, Error::Invalid(_)), "{err}");
        }
        let mut bad_mpp = job("ok", 256);
        bad_mpp.mpp = Some(-1.0);
        assert!(ingest_rows(dir.path(), &bad_mpp, &mut src()).is_err());
    }

    #[test]
    fn unreadable_source_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut j = job("x", 256);
        j.source = IngestSource::File(dir.path().join("missing.png"));
        assert!(matches!(ingest(dir.path(), &j).unwrap_err(), Error::Io { .. }));
        let junk = dir.path().join("junk.png");
        fs::write(&junk, b"definitely not a png").unwrap();
        j.source = IngestSource::File(junk);
        assert!(matches!(ingest(dir.path(), &j).unwrap_err(), Error::Codec(_)));
    }

    #[test]
    fn alpha_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgba.png");
        let img = image::RgbaImage::from_fn(5, 3, |x, y| image::Rgba([x as u8, y as u8, 200, 17]));
        img.save(&path).unwrap();
        let mut j = job("rgba", 64);
        j.source = IngestSource::File(path);
        ingest(&dir.path().join("store"), &j).unwrap();
        let store = PyramidStore::open(dir.path().join("store"), CacheConfig::default()).unwrap();
        let top = store.tile_pixels(&TileAddress::new("rgba", 3, 0, 0)).unwrap();
        assert_eq!((top.width, top.height), (5, 3));
        assert_eq!(top.pixel(4, 2), &[4, 2, 200]);
    }

    #[test]
    fn synthetic_source_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let j = IngestJob {
            tile_size: 64,
            ..IngestJob::new(
                IngestSource::Synthetic {
                    width: 300,
                    height: 130,
                    seed: 4,
                },
                "syn",
            )
        };
        let r = ingest(dir.path(), &j).unwrap();
        assert_eq!((r.width_px, r.height_px), (300, 130));
        let store = PyramidStore::open(dir.path(), CacheConfig::default()).unwrap();
        let meta = store.open_slide("syn").unwrap().meta.clone();
        assert_eq!((meta.width_px, meta.height_px, meta.max_level), (300, 130, 9));
        assert_eq!(
            read_level(&store, "syn", 9),
            SyntheticSlide::new(300, 130, 4).unwrap().render()
        );
    }
}
