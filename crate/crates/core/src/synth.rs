//! Deterministic procedural slides.
//!
//! A slide is a near-white background with tissue islands carved out of
//! low-frequency value noise, stained pink or purple by a mid-frequency
//! field, dotted with dark nuclei, plus a few solid-colored ellipses. Any
//! stripe of rows can be produced independently, so gigapixel slides stream
//! through ingest without ever existing in memory.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::PixelBlock;

#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    width: u64,
    height: u64,
    seed: u64,
    palette: Palette,
    tissue: [Octave; 2],
    stain: Octave,
    nuclei: Octave,
    ellipses: Vec<Ellipse>,
}

#[derive(Debug, Clone, Copy)]
struct Palette {
    background: [f32; 3],
    eosin: [f32; 3],
    hematoxylin: [f32; 3],
    nucleus: [f32; 3],
}

#[derive(Debug, Clone, Copy)]
struct Octave {
    cell: u64,
    salt: u64,
    weight: f32,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f32; 3],
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(z: u64) -> f32 {
    (z >> 40) as f32 / (1u64 << 24) as f32
}

fn lattice(ix: u64, iy: u64, salt: u64) -> f32 {
    unit(splitmix(
        ix.wrapping_mul(0x632b_e59b_d9b4_e019) ^ iy.wrapping_mul(0x8cb9_2ba7_2f3d_8dd7) ^ salt,
    ))
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

impl Octave {
    /// Lattice values for row `y`, already interpolated vertically.
    fn row_profile(&self, y: u64, width: u64) -> Vec<f32> {
        let cy = y / self.cell;
        let fy = smooth((y % self.cell) as f32 / self.cell as f32);
        (0..=width / self.cell + 1)
            .map(|ix| {
                let a = lattice(ix, cy, self.salt);
                let b = lattice(ix, cy + 1, self.salt);
                a + (b - a) * fy
            })
            .collect()
    }

    fn smooth_table(&self) -> Vec<f32> {
        (0..self.cell).map(|i| smooth(i as f32 / self.cell as f32)).collect()
    }
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

impl SyntheticSlide {
    pub fn new(width: u64, height: u64, seed: u64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!(
                "synthetic slide dimensions must be positive, got {width}x{height}"
            )));
        }
        let mut state = splitmix(seed ^ 0x5eed_511d_e000_0000);
        let mut next = || {
            state = splitmix(state);
            unit(state)
        };
        let jitter = |base: [f32; 3], r: &mut dyn FnMut() -> f32, amount: f32| {
            base.map(|c| (c + (r() - 0.5) * 2.0 * amount).clamp(0.0, 255.0))
        };
        let palette = Palette {
            background: jitter([242.0, 236.0, 240.0], &mut next, 6.0),
            eosin: jitter([226.0, 140.0, 184.0], &mut next, 30.0),
            hematoxylin: jitter([128.0, 72.0, 156.0], &mut next, 30.0),
            nucleus: jitter([64.0, 36.0, 104.0], &mut next, 16.0),
        };
        let longest = width.max(height);
        let base_cell = (longest / 5).max(4);
        let tissue = [
            Octave {
                cell: base_cell,
                salt: splitmix(seed ^ 1),
                weight: 0.7,
            },
            Octave {
                cell: (base_cell / 3).max(2),
                salt: splitmix(seed ^ 2),
                weight: 0.3,
            },
        ];
        let stain = Octave {
            cell: 64.min(longest).max(2),
            salt: splitmix(seed ^ 3),
            weight: 1.0,
        };
        let nuclei = Octave {
            cell: 6,
            salt: splitmix(seed ^ 4),
            weight: 1.0,
        };
        let ellipses = (0..4)
            .map(|_| {
                let color = [next() * 200.0 + 40.0, next() * 160.0 + 40.0, next() * 200.0 + 40.0];
                Ellipse {
                    cx: next() as f64 * width as f64,
                    cy: next() as f64 * height as f64,
                    rx: (0.04 + 0.08 * next() as f64) * width as f64 + 1.0,
                    ry: (0.04 + 0.08 * next() as f64) * height as f64 + 1.0,
                    color,
                }
            })
            .collect();
        Ok(SyntheticSlide {
            width,
            height,
            seed,
            palette,
            tissue,
            stain,
            nuclei,
            ellipses,
        })
    }

    pub fn dimensions(&self) -> (u64, u64) {
        (self.width, self.height)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn fill_row(&self, y: u64, out: &mut [u8]) {
        let w = self.width;
        let profiles: Vec<(Vec<f32>, Vec<f32>, &Octave)> = self
            .tissue
            .iter()
            .chain([&self.stain, &self.nuclei])
            .map(|o| (o.row_profile(y, w), o.smooth_table(), o))
            .collect();
        let sample = |idx: usize, x: u64| -> f32 {
            let (prof, table, o) = &profiles[idx];
            let ix = (x / o.cell) as usize;
            let t = table[(x % o.cell) as usize];
            prof[ix] + (prof[ix + 1] - prof[ix]) * t
        };
        // Horizontal spans covered by each ellipse on this row.
        let yc = y as f64 + 0.5;
        let spans: Vec<(u64, u64, [f32; 3])> = self
            .ellipses
            .iter()
            .filter_map(|e| {
                let dy = (yc - e.cy) / e.ry;
                if dy.abs() >= 1.0 {
                    return None;
                }
                let half = e.rx * (1.0 - dy * dy).sqrt();
                let x0 = (e.cx - half).max(0.0) as u64;
                let x1 = ((e.cx + half).max(0.0) as u64).min(w);
                (x0 < x1).then_some((x0, x1, e.color))
            })
            .collect();
        let p = self.palette;
        for x in 0..w {
            let t = self.tissue[0].weight * sample(0, x) + self.tissue[1].weight * sample(1, x);
            let fine = sample(3, x);
            let mut c = if t > 0.52 {
                let s = sample(2, x);
                let tissue = mix(p.eosin, p.hematoxylin, s);
                let c = if fine > 0.8 { p.nucleus } else { tissue };
                // Feather the tissue edge into the background.
                mix(p.background, c, ((t - 0.52) * 25.0).min(1.0))
            } else {
                p.background
            };
            for &(x0, x1, color) in &spans {
                if x >= x0 && x < x1 {
                    c = mix(color, c, 0.15);
                }
            }
            let grain = (fine - 0.5) * 10.0;
            let i = (x * 3) as usize;
            for ch in 0..3 {
                out[i + ch] = (c[ch] + grain).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    /// Fills `buf` with `rows` RGB rows starting at `y`.
    pub fn fill_rows(&self, y: u64, rows: usize, buf: &mut Vec<u8>) {
        let stride = self.width as usize * 3;
        buf.clear();
        buf.resize(stride * rows, 0);
        buf.par_chunks_mut(stride)
            .enumerate()
            .for_each(|(i, row)| self.fill_row(y + i as u64, row));
    }

    /// Whole image in memory; for small slides only.
    pub fn render(&self) -> PixelBlock {
        let mut data = Vec::new();
        self.fill_rows(0, self.height as usize, &mut data);
        PixelBlock {
            width: self.width as usize,
            height: self.height as usize,
            channels: 3,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = SyntheticSlide::new(96, 64, 7).unwrap().render();
        let b = SyntheticSlide::new(96, 64, 7).unwrap().render();
        let c = SyntheticSlide::new(96, 64, 8).unwrap().render();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!((a.width, a.height), (96, 64));
    }

    #[test]
    fn stripes_agree_with_full_render() {
        let s = SyntheticSlide::new(130, 70, 3).unwrap();
        let full = s.render();
        let mut buf = Vec::new();
        s.fill_rows(33, 5, &mut buf);
        assert_eq!(&buf[..], &full.data[33 * 130 * 3..38 * 130 * 3]);
    }

    #[test]
    fn has_tissue_and_background() {
        let img = SyntheticSlide::new(512, 512, 11).unwrap().render();
        let bright = img.data.chunks(3).filter(|p| p.iter().all(|&v| v > 220)).count();
        let total = 512 * 512;
        assert!(bright > total / 20 && bright < total * 19 / 20, "bright={bright}");
    }

    #[test]
    fn tiny_and_zero() {
        assert_eq!(SyntheticSlide::new(1, 1, 0).unwrap().render().data.len(), 3);
        assert!(SyntheticSlide::new(0, 5, 0).is_err());
    }
}
