//! Navigation traces: a plain-text list of timed viewports.
//!
//! One record per line, `offset_ms level x y w h`. Blank lines and lines
//! starting with `#` are ignored, except a `# slide <id>` header which names
//! the slide the trace was recorded against.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pyramid::{self, SlideMetadata, Viewport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub offset_ms: u64,
    pub viewport: Viewport,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NavTrace {
    pub slide_id: Option<String>,
    pub records: Vec<TraceRecord>,
}

impl NavTrace {
    pub fn parse(text: &str) -> Result<Self> {
        let mut trace = NavTrace::default();
        let mut last = 0;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(id) = comment.trim().strip_prefix("slide ") {
                    trace.slide_id = Some(id.trim().to_string());
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(Error::Invalid(format!(
                    "trace line {lineno}: expected 6 fields `offset_ms level x y w h`, got {}",
                    fields.len()
                )));
            }
            let num = |j: usize, name: &str| -> Result<u64> {
                fields[j].parse::<u64>().map_err(|_| {
                    Error::Invalid(format!(
                        "trace line {lineno}: {name} '{}' is not a non-negative integer",
                        fields[j]
                    ))
                })
            };
            let offset_ms = num(0, "offset_ms")?;
            let level = u32::try_from(num(1, "level")?)
                .map_err(|_| Error::Invalid(format!("trace line {lineno}: level too large")))?;
            let vp = Viewport::new(level, num(2, "x")?, num(3, "y")?, num(4, "w")?, num(5, "h")?);
            if vp.width == 0 || vp.height == 0 {
                return Err(Error::Invalid(format!("trace line {lineno}: empty viewport")));
            }
            if offset_ms < last {
                return Err(Error::Invalid(format!(
                    "trace line {lineno}: offset {offset_ms} ms goes backwards (previous {last} ms)"
                )));
            }
            last = offset_ms;
            trace.records.push(TraceRecord {
                offset_ms,
                viewport: vp,
            });
        }
        if trace.records.is_empty() {
            return Err(Error::Invalid("trace has no records".into()));
        }
        Ok(trace)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(id) = &self.slide_id {
            let _ = writeln!(out, "# slide {id}");
        }
        let _ = writeln!(out, "# offset_ms level x y w h");
        for r in &self.records {
            let v = r.viewport;
            let _ = writeln!(
                out,
                "{} {} {} {} {} {}",
                r.offset_ms, v.level, v.x, v.y, v.width, v.height
            );
        }
        out
    }

    /// Checks every viewport against the slide's geometry.
    pub fn validate_for(&self, meta: &SlideMetadata) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            pyramid::tiles_for_viewport(meta, &r.viewport)
                .map_err(|e| Error::Invalid(format!("trace record {}: {e}", i + 1)))?;
        }
        Ok(())
    }
}

/// A serpentine pan at full resolution: `steps` viewports of `vp_w x vp_h`,
/// each shifted by a quarter of the viewport width, reversing direction
/// and dropping a quarter height at the slide edge.
pub fn pan_trace(meta: &SlideMetadata, vp_w: u64, vp_h: u64, steps: usize, interval_ms: u64) -> Result<NavTrace> {
    let spec = pyramid::level_spec(meta, meta.max_level)?;
    if vp_w == 0 || vp_h == 0 || vp_w > spec.width_px || vp_h > spec.height_px {
        return Err(Error::Invalid(format!(
            "viewport {vp_w}x{vp_h} does not fit a {}x{} slide",
            spec.width_px, spec.height_px
        )));
    }
    let step_x = (vp_w / 4).max(1);
    let step_y = (vp_h / 4).max(1);
    let max_x = spec.width_px - vp_w;
    let max_y = spec.height_px - vp_h;
    let (mut x, mut y) = (0u64, 0u64);
    let mut rightward = true;
    let mut records = Vec::with_capacity(steps);
    for i in 0..steps {
        records.push(TraceRecord {
            offset_ms: i as u64 * interval_ms,
            viewport: Viewport::new(meta.max_level, x, y, vp_w, vp_h),
        });
        let blocked = if rightward { x + step_x > max_x } else { x < step_x };
        if blocked {
            y = if y + step_y > max_y { 0 } else { y + step_y };
            rightward = !rightward;
        } else if rightward {
            x += step_x;
        } else {
            x -= step_x;
        }
    }
    Ok(NavTrace {
        slide_id: Some(meta.slide_id.clone()),
        records,
    })
}

/// Nearest-rank percentile of an unsorted sample; `p` in (0, 100].
pub fn percentile(samples: &[f64], p: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn parse_and_round_trip() {
        let text = "# slide s1\n0 12 0 0 512 512\n\n5 12 128 0 512 512\n";
        let t = NavTrace::parse(text).unwrap();
        assert_eq!(t.slide_id.as_deref(), Some("s1"));
        assert_eq!(t.records.len(), 2);
        assert_eq!(t.records[1].viewport, Viewport::new(12, 128, 0, 512, 512));
        assert_eq!(NavTrace::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = NavTrace::parse("0 1 0 0 4 4\n1 1 0 0 4\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = NavTrace::parse("9 1 0 0 4 4\n3 1 0 0 4 4\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = NavTrace::parse("0 1 x 0 4 4\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(NavTrace::parse("# only a comment\n").is_err());
        assert!(NavTrace::parse("").is_err());
    }

    #[test]
    fn pan_overlap_keeps_most_tiles() {
        let meta = SlideMetadata::new("p", 32768, 32768, 256, None).unwrap();
        let trace = pan_trace(&meta, 1024, 1024, 200, 0).unwrap();
        assert_eq!(trace.records.len(), 200);
        trace.validate_for(&meta).unwrap();
        // Overlap oracle: count tiles already requested by earlier records.
        let mut seen = HashSet::new();
        let (mut total, mut repeat) = (0usize, 0usize);
        for r in &trace.records {
            for a in pyramid::tiles_for_viewport(&meta, &r.viewport).unwrap() {
                total += 1;
                if !seen.insert((a.col, a.row)) {
                    repeat += 1;
                }
            }
        }
        assert!(repeat as f64 / total as f64 >= 0.75, "{repeat}/{total}");
    }

    #[test]
    fn pan_turns_at_edges() {
        let meta = SlideMetadata::new("p", 2048, 2048, 256, None).unwrap();
        let trace = pan_trace(&meta, 1024, 1024, 50, 10).unwrap();
        trace.validate_for(&meta).unwrap();
        let xs: Vec<u64> = trace.records.iter().map(|r| r.viewport.x).collect();
        assert_eq!(&xs[..6], &[0, 256, 512, 768, 1024, 1024]);
        assert_eq!(trace.records[5].viewport.y, 256);
        assert_eq!(trace.records[49].offset_ms, 490);
        assert!(pan_trace(&meta, 4096, 10, 1, 0).is_err());
    }

    #[test]
    fn percentile_nearest_rank() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&xs, 50.0), Some(50.0));
        assert_eq!(percentile(&xs, 95.0), Some(95.0));
        assert_eq!(percentile(&xs, 100.0), Some(100.0));
        assert_eq!(percentile(&[3.0], 99.0), Some(3.0));
        assert_eq!(percentile(&[], 50.0), None);
    }
}
