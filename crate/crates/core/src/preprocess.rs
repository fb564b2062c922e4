//! Geometry and time normalization, plus fixed-count resampling for the
//! sequence classifier.
//!
//! Normalization translates the bounding box to the origin and applies one
//! uniform scale so the vertical extent becomes [`RASTER_HEIGHT`] units;
//! timestamps become milliseconds elapsed since the first point.

use thiserror::Error;

use crate::ink::{PenState, SignatureInstance};

/// Fixed vertical extent of a normalized signature, in grid units.
pub const RASTER_HEIGHT: usize = 128;

/// Default point count for resampled sequences.
pub const DEFAULT_RESAMPLE_POINTS: usize = 128;

/// A point after normalization: real coordinates, elapsed milliseconds,
/// original pen state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormPoint {
    pub x: f64,
    pub y: f64,
    /// Milliseconds since the signature's first point.
    pub elapsed_ms: f64,
    pub pen: PenState,
}

/// A signature after [`normalize`]: same stroke structure, coordinates in
/// [0, width] x [0, 128], time rebased to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSignature {
    pub strokes: Vec<Vec<NormPoint>>,
}

impl NormalizedSignature {
    pub fn points(&self) -> impl Iterator<Item = &NormPoint> {
        self.strokes.iter().flat_map(|s| s.iter())
    }

    pub fn point_count(&self) -> usize {
        self.strokes.iter().map(Vec::len).sum()
    }

    /// Largest x coordinate over all points.
    pub fn max_x(&self) -> f64 {
        self.points().map(|p| p.x).fold(0.0, f64::max)
    }
}

/// Exactly `n` feature rows (x, y, elapsed, pen) sampled at equal
/// arc-length intervals per stroke.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampledSequence {
    pub points: Vec<NormPoint>,
}

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("signature has no points")]
    EmptySignature,
    #[error("resample count must be at least 2, got {0}")]
    InvalidCount(usize),
    #[error("cannot place {strokes} strokes into {n} points")]
    TooManyStrokes { strokes: usize, n: usize },
}

/// Normalize geometry and time.
///
/// The bounding-box minimum corner moves to (0, 0) and both axes scale by
/// `128 / vertical_extent`, preserving aspect ratio. If the vertical
/// extent is zero the horizontal extent is used instead; if both are zero
/// the scale is 1. Timestamps shift so the first point reads 0 ms.
pub fn normalize(instance: &SignatureInstance) -> Result<NormalizedSignature, PreprocessError> {
    let mut min_x = i32::MAX;
    let mut max_x = i32::MIN;
    let mut min_y = i32::MAX;
    let mut max_y = i32::MIN;
    let mut t0 = None;
    for p in instance.points() {
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
        if t0.is_none() {
            t0 = Some(p.t);
        }
    }
    let t0 = t0.ok_or(PreprocessError::EmptySignature)?;

    let vertical = (max_y - min_y) as f64;
    let horizontal = (max_x - min_x) as f64;
    let scale = if vertical > 0.0 {
        RASTER_HEIGHT as f64 / vertical
    } else if horizontal > 0.0 {
        RASTER_HEIGHT as f64 / horizontal
    } else {
        1.0
    };

    let strokes = instance
        .strokes
        .iter()
        .map(|s| {
            s.points
                .iter()
                .map(|p| NormPoint {
                    x: (p.x - min_x) as f64 * scale,
                    y: (p.y - min_y) as f64 * scale,
                    elapsed_ms: (p.t - t0) as f64,
                    pen: p.pen,
                })
                .collect()
        })
        .collect();
    Ok(NormalizedSignature { strokes })
}

/// Re-apply normalization to an already-normalized signature. Used by
/// tests to confirm idempotence; shares all logic with [`normalize`].
pub fn renormalize(sig: &NormalizedSignature) -> Result<NormalizedSignature, PreprocessError> {
    let mut min_x = f64::INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    let mut t0 = None;
    for p in sig.points() {
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
        if t0.is_none() {
            t0 = Some(p.elapsed_ms);
        }
    }
    let t0 = t0.ok_or(PreprocessError::EmptySignature)?;
    let vertical = max_y - min_y;
    let horizontal = max_x - min_x;
    let scale = if vertical > 0.0 {
        RASTER_HEIGHT as f64 / vertical
    } else if horizontal > 0.0 {
        RASTER_HEIGHT as f64 / horizontal
    } else {
        1.0
    };
    Ok(NormalizedSignature {
        strokes: sig
            .strokes
            .iter()
            .map(|s| {
                s.iter()
                    .map(|p| NormPoint {
                        x: (p.x - min_x) * scale,
                        y: (p.y - min_y) * scale,
                        elapsed_ms: p.elapsed_ms - t0,
                        pen: p.pen,
                    })
                    .collect()
            })
            .collect(),
    })
}

fn stroke_arc_length(stroke: &[NormPoint]) -> f64 {
    stroke
        .windows(2)
        .map(|w| ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt())
        .sum()
}

/// Allocate `n` output points to strokes proportionally to arc length.
///
/// Largest-remainder rounding, ties to the earlier stroke; every stroke
/// keeps at least one point. Exposed for the allocation property tests.
pub fn allocate_points(arc_lengths: &[f64], n: usize) -> Result<Vec<usize>, PreprocessError> {
    let k = arc_lengths.len();
    if k == 0 || k > n {
        return Err(PreprocessError::TooManyStrokes { strokes: k, n });
    }
    let total: f64 = arc_lengths.iter().sum();
    let mut alloc: Vec<usize>;
    if total > 0.0 {
        let quotas: Vec<f64> = arc_lengths.iter().map(|l| n as f64 * l / total).collect();
        alloc = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = alloc.iter().sum();
        let mut order: Vec<usize> = (0..k).collect();
        // Sort by descending fractional remainder, earlier index on ties.
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for i in 0..(n - assigned) {
            alloc[order[i % k]] += 1;
        }
    } else {
        // All strokes degenerate: spread as evenly as possible.
        alloc = vec![n / k; k];
        for slot in alloc.iter_mut().take(n % k) {
            *slot += 1;
        }
    }
    // Guarantee one point per stroke, taking from the largest allocation.
    while let Some(zero_at) = alloc.iter().position(|&a| a == 0) {
        let donor = (0..k).max_by_key(|&i| (alloc[i], std::cmp::Reverse(i))).unwrap();
        debug_assert!(alloc[donor] > 1);
        alloc[donor] -= 1;
        alloc[zero_at] += 1;
    }
    debug_assert_eq!(alloc.iter().sum::<usize>(), n);
    Ok(alloc)
}

fn resample_stroke(stroke: &[NormPoint], m: usize, is_last_stroke: bool) -> Vec<NormPoint> {
    debug_assert!(!stroke.is_empty() && m >= 1);
    if m == 1 {
        // A single slot keeps the boundary point that the sequence
        // invariant needs: the final stroke keeps its end, others their
        // start.
        let p = if is_last_stroke { *stroke.last().unwrap() } else { stroke[0] };
        return vec![NormPoint { pen: PenState::Up, ..p }];
    }

    let mut cumulative = Vec::with_capacity(stroke.len());
    cumulative.push(0.0);
    for w in stroke.windows(2) {
        let d = ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
        cumulative.push(cumulative.last().unwrap() + d);
    }
    let total = *cumulative.last().unwrap();

    let mut out = Vec::with_capacity(m);
    let mut seg = 0usize;
    for j in 0..m {
        let target = if total > 0.0 { total * j as f64 / (m - 1) as f64 } else { 0.0 };
        let p = if total == 0.0 {
            stroke[0]
        } else if j == m - 1 {
            *stroke.last().unwrap()
        } else {
            while seg + 1 < cumulative.len() - 1 && cumulative[seg + 1] < target {
                seg += 1;
            }
            let span = cumulative[seg + 1] - cumulative[seg];
            let frac = if span > 0.0 { (target - cumulative[seg]) / span } else { 0.0 };
            let (a, b) = (stroke[seg], stroke[seg + 1]);
            NormPoint {
                x: a.x + frac * (b.x - a.x),
                y: a.y + frac * (b.y - a.y),
                elapsed_ms: a.elapsed_ms + frac * (b.elapsed_ms - a.elapsed_ms),
                pen: PenState::Down,
            }
        };
        let pen = if j == m - 1 { PenState::Up } else { PenState::Down };
        out.push(NormPoint { pen, ..p });
    }
    out
}

/// Resample to exactly `n` points at equal arc-length spacing per stroke.
///
/// Output points are allocated across strokes by [`allocate_points`];
/// within a stroke, positions interpolate (x, y, elapsed) linearly in arc
/// length. Each resampled stroke ends with a pen-up point; all others are
/// pen-down.
pub fn resample_uniform(
    sig: &NormalizedSignature,
    n: usize,
) -> Result<ResampledSequence, PreprocessError> {
    if n < 2 {
        return Err(PreprocessError::InvalidCount(n));
    }
    let strokes: Vec<&Vec<NormPoint>> = sig.strokes.iter().filter(|s| !s.is_empty()).collect();
    if strokes.is_empty() {
        return Err(PreprocessError::EmptySignature);
    }
    let lengths: Vec<f64> = strokes.iter().map(|s| stroke_arc_length(s)).collect();
    let alloc = allocate_points(&lengths, n)?;

    let mut points = Vec::with_capacity(n);
    let last = strokes.len() - 1;
    for (i, (stroke, &m)) in strokes.iter().zip(alloc.iter()).enumerate() {
        points.extend(resample_stroke(stroke, m, i == last));
    }
    debug_assert_eq!(points.len(), n);
    Ok(ResampledSequence { points })
}
