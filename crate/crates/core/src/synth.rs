//! Synthetic signature corpora for tests, benchmarks and desk-scale
//! experiments.
//!
//! Signatures are random polyline strokes with plausible pen timing. The
//! temporal-pair corpus pairs every genuine signature with a forgery that
//! is spatially identical but signed at half speed (timestamps dilated by
//! two), which leaves the spatial features untouched and moves only the
//! time-derived ones.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ink::{instance_from_points, Corpus, PenState, SignatureInstance, StrokePoint, Task};

/// Bounds for random signature generation.
#[derive(Debug, Clone)]
pub struct SynthParams {
    pub strokes: (usize, usize),
    pub points_per_stroke: (usize, usize),
    /// Device units; the horizontal span of generated coordinates.
    pub x_span: i32,
    pub y_span: i32,
    /// Per-point clock step range, milliseconds.
    pub dt_ms: (i64, i64),
    /// Clock gap between strokes, milliseconds.
    pub gap_ms: (i64, i64),
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            strokes: (2, 4),
            points_per_stroke: (8, 24),
            x_span: 800,
            y_span: 400,
            dt_ms: (10, 14),
            gap_ms: (40, 80),
        }
    }
}

/// Compact parameters for small rasters, keeping tensor widths near the
/// minimum so capacity probes stay fast.
pub fn compact_params() -> SynthParams {
    SynthParams {
        strokes: (2, 3),
        points_per_stroke: (6, 14),
        x_span: 300,
        y_span: 350,
        dt_ms: (10, 14),
        gap_ms: (40, 80),
    }
}

/// Random stroke points with a monotone clock starting near `t0`.
pub fn random_points(rng: &mut ChaCha8Rng, params: &SynthParams, t0: i64) -> Vec<StrokePoint> {
    let n_strokes = rng.gen_range(params.strokes.0..=params.strokes.1);
    let mut points = Vec::new();
    let mut t = t0;
    for _ in 0..n_strokes {
        let n_pts = rng.gen_range(params.points_per_stroke.0..=params.points_per_stroke.1);
        let mut x = rng.gen_range(0..=params.x_span);
        let mut y = rng.gen_range(0..=params.y_span);
        for i in 0..n_pts {
            let pen = if i == n_pts - 1 { PenState::Up } else { PenState::Down };
            points.push(StrokePoint { x, y, t, pen, aux: None });
            let step_x = params.x_span / 12 + 1;
            let step_y = params.y_span / 12 + 1;
            x = (x + rng.gen_range(-step_x..=step_x)).clamp(0, params.x_span);
            y = (y + rng.gen_range(-step_y..=step_y)).clamp(0, params.y_span);
            t += rng.gen_range(params.dt_ms.0..=params.dt_ms.1);
        }
        t += rng.gen_range(params.gap_ms.0..=params.gap_ms.1);
    }
    points
}

/// A spatial shape: coordinates and pen states without a clock.
pub fn random_shape(rng: &mut ChaCha8Rng, params: &SynthParams) -> Vec<(i32, i32, PenState)> {
    let n_strokes = rng.gen_range(params.strokes.0..=params.strokes.1);
    let mut shape = Vec::new();
    for _ in 0..n_strokes {
        let n_pts = rng.gen_range(params.points_per_stroke.0..=params.points_per_stroke.1);
        let mut x = rng.gen_range(0..=params.x_span);
        let mut y = rng.gen_range(0..=params.y_span);
        for i in 0..n_pts {
            let pen = if i == n_pts - 1 { PenState::Up } else { PenState::Down };
            shape.push((x, y, pen));
            let step_x = params.x_span / 12 + 1;
            let step_y = params.y_span / 12 + 1;
            x = (x + rng.gen_range(-step_x..=step_x)).clamp(0, params.x_span);
            y = (y + rng.gen_range(-step_y..=step_y)).clamp(0, params.y_span);
        }
    }
    shape
}

/// Assign a fresh monotone clock to a shape: one dt draw per point, one
/// gap draw per stroke boundary.
pub fn with_fresh_timing(
    shape: &[(i32, i32, PenState)],
    rng: &mut ChaCha8Rng,
    params: &SynthParams,
    t0: i64,
) -> Vec<StrokePoint> {
    let mut t = t0;
    let mut points = Vec::with_capacity(shape.len());
    for &(x, y, pen) in shape {
        points.push(StrokePoint { x, y, t, pen, aux: None });
        t += rng.gen_range(params.dt_ms.0..=params.dt_ms.1);
        if pen == PenState::Up {
            t += rng.gen_range(params.gap_ms.0..=params.gap_ms.1);
        }
    }
    points
}

/// One random signature instance labeled by its sample index.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    params: &SynthParams,
    writer_id: u32,
    sample_index: u32,
) -> SignatureInstance {
    let points = random_points(rng, params, 30_000_000);
    instance_from_points(&points, writer_id, sample_index).expect("synthetic points are non-empty")
}

/// A corpus of arbitrary random signatures: `writers` sets of 40 samples
/// following the corpus labeling convention (1-20 genuine, 21-40
/// forgery), every signature independent of the others.
pub fn random_corpus(seed: u64, writers: u32, params: &SynthParams) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::new();
    for w in 1..=writers {
        for s in 1..=40u32 {
            instances.push(random_instance(&mut rng, params, w, s));
        }
    }
    Corpus { instances, source_task: Task::Task1 }
}

/// Dilate a signature's clock by `factor` around its first timestamp,
/// leaving every coordinate and pen state alone.
pub fn dilate_time(instance: &SignatureInstance, factor: i64, sample_index: u32) -> SignatureInstance {
    let t0 = instance.points().next().map(|p| p.t).unwrap_or(0);
    let points: Vec<StrokePoint> = instance
        .points()
        .map(|p| StrokePoint { t: t0 + (p.t - t0) * factor, ..*p })
        .collect();
    instance_from_points(&points, instance.writer_id, sample_index).expect("dilated points")
}

/// The temporal-signal corpus: every writer signs one fixed shape, so
/// geometry carries no label information at all. Genuine samples are the
/// shape under fresh natural timing; each forgery is its genuine twin
/// dilated 2x in time. Total size `writers * 40`, balanced.
pub fn temporal_pair_corpus(seed: u64, writers: u32, params: &SynthParams) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::new();
    for w in 1..=writers {
        let shape = random_shape(&mut rng, params);
        for s in 1..=20u32 {
            let points = with_fresh_timing(&shape, &mut rng, params, 30_000_000);
            let genuine = instance_from_points(&points, w, s).expect("non-empty shape");
            let forgery = dilate_time(&genuine, 2, s + 20);
            instances.push(genuine);
            instances.push(forgery);
        }
    }
    instances.sort_by_key(|i| (i.writer_id, i.sample_index));
    Corpus { instances, source_task: Task::Task1 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ink::Label;
    use crate::preprocess::normalize;
    use crate::psf::{rasterize, Variant};

    #[test]
    fn random_corpus_is_balanced_and_unique() {
        let corpus = random_corpus(1, 2, &SynthParams::default());
        assert_eq!(corpus.len(), 80);
        let genuine = corpus.instances.iter().filter(|i| i.label == Label::Genuine).count();
        assert_eq!(genuine, 40);
        let mut keys: Vec<(u32, u32)> =
            corpus.instances.iter().map(|i| (i.writer_id, i.sample_index)).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), 80);
    }

    #[test]
    fn temporal_pairs_share_geometry_but_not_clocks() {
        let corpus = temporal_pair_corpus(3, 1, &SynthParams::default());
        assert_eq!(corpus.len(), 40);
        // One writer signs one shape: every instance shares coordinates.
        let first = &corpus.instances[0];
        for other in &corpus.instances[1..] {
            for (a, b) in first.points().zip(other.points()) {
                assert_eq!((a.x, a.y, a.pen), (b.x, b.y, b.pen));
            }
        }
        let genuine = &corpus.instances[0]; // (1, 1)
        let forgery = corpus
            .instances
            .iter()
            .find(|i| i.sample_index == genuine.sample_index + 20)
            .unwrap();
        let ga = normalize(genuine).unwrap();
        let fa = normalize(forgery).unwrap();
        let g_end = ga.points().last().unwrap().elapsed_ms;
        let f_end = fa.points().last().unwrap().elapsed_ms;
        assert_eq!(f_end, 2.0 * g_end);

        // Spatial features are identical; the original-variant tensors
        // cannot tell the pair apart.
        let gt = rasterize(&ga, Variant::Original).unwrap();
        let ft = rasterize(&fa, Variant::Original).unwrap();
        assert_eq!(gt, ft);
        // The temporal variant differs.
        let gt2 = rasterize(&ga, Variant::Temporal).unwrap();
        let ft2 = rasterize(&fa, Variant::Temporal).unwrap();
        assert_ne!(gt2, ft2);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = random_corpus(9, 1, &compact_params());
        let b = random_corpus(9, 1, &compact_params());
        assert_eq!(a.instances, b.instances);
    }
}
