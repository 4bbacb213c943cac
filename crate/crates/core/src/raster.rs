//! Interleaved 8-bit pixel buffers, the 2x box downsampler and tile codecs.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder, RgbImage};

use crate::error::{Error, Result};
use crate::pyramid::TileCodec;

const JPEG_QUALITY: u8 = 90;

/// Row-major interleaved pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelBlock {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl PixelBlock {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Invalid(format!(
                "pixel block must be non-empty, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Invalid(format!(
                "pixel block {width}x{height}x{channels} needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(PixelBlock {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        PixelBlock {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn row(&self, y: usize) -> &[u8] {
        let stride = self.width * self.channels;
        &self.data[y * stride..(y + 1) * stride]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Copies the sub-rectangle `(x, y, w, h)`; the caller keeps it in bounds.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> PixelBlock {
        let mut data = Vec::with_capacity(w * h * self.channels);
        for row in y..y + h {
            let start = (row * self.width + x) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        PixelBlock {
            width: w,
            height: h,
            channels: self.channels,
            data,
        }
    }

    /// Pastes `src` with its top-left corner at `(x, y)`.
    pub fn blit(&mut self, src: &PixelBlock, x: usize, y: usize) {
        debug_assert_eq!(src.channels, self.channels);
        let n = src.width * self.channels;
        for row in 0..src.height {
            let dst = ((y + row) * self.width + x) * self.channels;
            self.data[dst..dst + n].copy_from_slice(src.row(row));
        }
    }

    pub fn into_rgb_image(self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::Invalid(format!("expected 3 channels, got {}", self.channels)));
        }
        RgbImage::from_raw(self.width as u32, self.height as u32, self.data)
            .ok_or_else(|| Error::Invalid("buffer size mismatch".into()))
    }

    pub fn from_rgb_image(img: RgbImage) -> Self {
        let (w, h) = img.dimensions();
        PixelBlock {
            width: w as usize,
            height: h as usize,
            channels: 3,
            data: img.into_raw(),
        }
    }
}

/// Rounded mean of `count` samples, ties away from zero.
#[inline]
fn rounded_mean(sum: u32, count: u32) -> u8 {
    ((sum + count / 2) / count) as u8
}

/// Halves one row horizontally: each output sample averages a 1x2 (or 1x1
/// at an odd right edge) block. Used for the last row of odd-height input.
pub fn downsample_row(src: &[u8], width: usize, channels: usize, out: &mut Vec<u8>) {
    let out_w = width.div_ceil(2);
    for ox in 0..out_w {
        let x0 = 2 * ox;
        let pair = x0 + 1 < width;
        for c in 0..channels {
            let mut sum = src[x0 * channels + c] as u32;
            let mut count = 1;
            if pair {
                sum += src[(x0 + 1) * channels + c] as u32;
                count += 1;
            }
            out.push(rounded_mean(sum, count));
        }
    }
}

/// Averages two rows into one output row of half width (2x2 blocks, or 2x1
/// at an odd right edge).
pub fn downsample_row_pair(top: &[u8], bottom: &[u8], width: usize, channels: usize, out: &mut Vec<u8>) {
    let out_w = width.div_ceil(2);
    for ox in 0..out_w {
        let x0 = 2 * ox;
        let pair = x0 + 1 < width;
        for c in 0..channels {
            let a = x0 * channels + c;
            let mut sum = top[a] as u32 + bottom[a] as u32;
            let mut count = 2;
            if pair {
                let b = a + channels;
                sum += top[b] as u32 + bottom[b] as u32;
                count += 2;
            }
            out.push(rounded_mean(sum, count));
        }
    }
}

/// 2x box-filter reduction. Output dimensions are `ceil(dim / 2)`; each
/// output pixel is the rounded per-channel mean of its 2x2 source block,
/// or the 1x2, 2x1 or 1x1 block that remains at odd edges.
pub fn downsample_2x(src: &PixelBlock) -> PixelBlock {
    let out_w = src.width.div_ceil(2);
    let out_h = src.height.div_ceil(2);
    let mut data = Vec::with_capacity(out_w * out_h * src.channels);
    for oy in 0..out_h {
        let y0 = 2 * oy;
        if y0 + 1 < src.height {
            downsample_row_pair(src.row(y0), src.row(y0 + 1), src.width, src.channels, &mut data);
        } else {
            downsample_row(src.row(y0), src.width, src.channels, &mut data);
        }
    }
    PixelBlock {
        width: out_w,
        height: out_h,
        channels: src.channels,
        data,
    }
}

/// Encodes an RGB block with the given tile codec.
pub fn encode(block: &PixelBlock, codec: TileCodec) -> Result<Vec<u8>> {
    if block.channels != 3 {
        return Err(Error::Codec(format!(
            "only RGB blocks can be encoded, got {} channels",
            block.channels
        )));
    }
    let mut out = Vec::new();
    let (w, h) = (block.width as u32, block.height as u32);
    let res = match codec {
        TileCodec::Png => PngEncoder::new_with_quality(&mut out, CompressionType::Fast, FilterType::Adaptive)
            .write_image(&block.data, w, h, ExtendedColorType::Rgb8),
        TileCodec::Jpeg => JpegEncoder::new_with_quality(&mut out, JPEG_QUALITY).write_image(
            &block.data,
            w,
            h,
            ExtendedColorType::Rgb8,
        ),
    };
    res.map_err(|e| Error::Codec(e.to_string()))?;
    Ok(out)
}

/// Decodes any supported tile payload to RGB.
pub fn decode(bytes: &[u8]) -> Result<PixelBlock> {
    let img = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::Codec(e.to_string()))?
        .decode()
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(PixelBlock::from_rgb_image(img.to_rgb8()))
}
