//! Path-signature features and their rasterization into multi-channel
//! feature tensors.
//!
//! A segment between consecutive stroke points carries a 7-value feature:
//! the constant term, the displacement, and the Kronecker self-product of
//! the displacement. The temporal variant scales those by tau = ln(t + 1)
//! (first order) and tau^2 (second order), where t is the elapsed
//! milliseconds of the segment's start point. Rasterization paints each
//! segment's feature values onto the integer pixel line between its
//! rounded endpoints, on a grid 128 pixels tall and a multiple of 16 wide.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::preprocess::{NormalizedSignature, RASTER_HEIGHT};

/// Which feature set a tensor holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Original,
    Temporal,
    /// Original in channels 0-6, temporal in channels 7-13.
    Stacked,
}

impl Variant {
    pub fn channels(self) -> usize {
        match self {
            Variant::Original | Variant::Temporal => 7,
            Variant::Stacked => 14,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::Original => 0,
            Variant::Temporal => 1,
            Variant::Stacked => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Variant::Original),
            1 => Some(Variant::Temporal),
            2 => Some(Variant::Stacked),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Temporal => "temporal",
            Variant::Stacked => "stacked",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "original" => Some(Variant::Original),
            "temporal" => Some(Variant::Temporal),
            "stacked" => Some(Variant::Stacked),
            _ => None,
        }
    }
}

/// The 7 signature values of one point-pair segment, ordered constant,
/// first order (x, y), second order (xx, xy, yx, yy).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentFeature {
    pub v: [f64; 7],
}

#[derive(Debug, Error)]
pub enum PsfError {
    #[error("signature has no points")]
    EmptySignature,
    #[error("negative elapsed time {0} ms")]
    NegativeTime(f64),
    #[error("bad tensor file: {0}")]
    BadFormat(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Second-order path signature of the segment a -> b.
pub fn segment_psf(a: (f64, f64), b: (f64, f64)) -> SegmentFeature {
    let dx = b.0 - a.0;
    let dy = b.1 - a.1;
    SegmentFeature {
        v: [1.0, dx, dy, dx * dx, dx * dy, dy * dx, dy * dy],
    }
}

/// Temporal-enhanced signature with an explicit coefficient. The first
/// three entries scale by `tau`, the second-order block by `tau^2`.
pub fn segment_psf_with_tau(a: (f64, f64), b: (f64, f64), tau: f64) -> SegmentFeature {
    let base = segment_psf(a, b);
    let t2 = tau * tau;
    SegmentFeature {
        v: [
            tau,
            tau * base.v[1],
            tau * base.v[2],
            t2 * base.v[3],
            t2 * base.v[4],
            t2 * base.v[5],
            t2 * base.v[6],
        ],
    }
}

/// Temporal-enhanced signature of a -> b where `elapsed_ms` is the start
/// point's time since the signature began: tau = ln(elapsed_ms + 1).
pub fn segment_psf_temporal(
    a: (f64, f64),
    elapsed_ms: f64,
    b: (f64, f64),
) -> Result<SegmentFeature, PsfError> {
    if elapsed_ms < 0.0 {
        return Err(PsfError::NegativeTime(elapsed_ms));
    }
    Ok(segment_psf_with_tau(a, b, (elapsed_ms + 1.0).ln()))
}

/// A C x 128 x W raster of segment features, stored channel-major then
/// row-major. Values are kept in 64-bit; the on-disk form is 32-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub variant: Variant,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn zeros(channels: usize, height: usize, width: usize, variant: Variant) -> Self {
        FeatureTensor {
            channels,
            height,
            width,
            variant,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Grid width for a normalized signature: max x + 1, rounded up to the
/// next multiple of 16, at least 16.
pub fn raster_width(max_x: f64) -> usize {
    let needed = (max_x + 1.0) / 16.0;
    let w = (needed.ceil() as usize) * 16;
    w.max(16)
}

/// All integer pixels of the midpoint line between two grid points,
/// endpoints included, walked from `a` to `b`.
///
/// For the major axis step `k`, the minor coordinate is
/// `floor((2*k*minor_extent + major_extent) / (2*major_extent))` away from
/// the start, applied in the travel direction; the loop below tracks that
/// quantity incrementally.
pub fn line_pixels(a: (i32, i32), b: (i32, i32)) -> Vec<(i32, i32)> {
    let (x0, y0) = a;
    let (x1, y1) = b;
    let adx = (x1 - x0).abs();
    let ady = (y1 - y0).abs();
    let sx = (x1 - x0).signum();
    let sy = (y1 - y0).signum();
    let mut out = Vec::with_capacity((adx.max(ady) + 1) as usize);
    if adx >= ady {
        let mut y = y0;
        let mut err = adx;
        for k in 0..=adx {
            out.push((x0 + k * sx, y));
            err += 2 * ady;
            if err >= 2 * adx && adx > 0 {
                y += sy;
                err -= 2 * adx;
            }
        }
    } else {
        let mut x = x0;
        let mut err = ady;
        for k in 0..=ady {
            out.push((x, y0 + k * sy));
            err += 2 * adx;
            if err >= 2 * ady {
                x += sx;
                err -= 2 * ady;
            }
        }
    }
    out
}

fn clamp_to_grid(p: (f64, f64), width: usize) -> (i32, i32) {
    let x = (p.0.round() as i32).clamp(0, width as i32 - 1);
    let y = (p.1.round() as i32).clamp(0, RASTER_HEIGHT as i32 - 1);
    (x, y)
}

/// Rasterize a normalized signature into a feature tensor.
///
/// Every consecutive point pair within a stroke forms one segment; its
/// feature values are written to every pixel of the integer line between
/// the rounded endpoints (rows clamped to 0..=127, since the normalized
/// vertical extent spans [0, 128]). Later segments overwrite earlier ones
/// where lines cross. No segment spans a stroke boundary.
pub fn rasterize(sig: &NormalizedSignature, variant: Variant) -> Result<FeatureTensor, PsfError> {
    if sig.point_count() == 0 {
        return Err(PsfError::EmptySignature);
    }
    let width = raster_width(sig.max_x());
    let mut tensor = FeatureTensor::zeros(variant.channels(), RASTER_HEIGHT, width, variant);

    let mut values = [0.0f64; 14];
    for stroke in &sig.strokes {
        for pair in stroke.windows(2) {
            let a = (pair[0].x, pair[0].y);
            let b = (pair[1].x, pair[1].y);
            let n = match variant {
                Variant::Original => {
                    values[..7].copy_from_slice(&segment_psf(a, b).v);
                    7
                }
                Variant::Temporal => {
                    values[..7].copy_from_slice(&segment_psf_temporal(a, pair[0].elapsed_ms, b)?.v);
                    7
                }
                Variant::Stacked => {
                    values[..7].copy_from_slice(&segment_psf(a, b).v);
                    values[7..].copy_from_slice(&segment_psf_temporal(a, pair[0].elapsed_ms, b)?.v);
                    14
                }
            };
            for (x, y) in line_pixels(clamp_to_grid(a, width), clamp_to_grid(b, width)) {
                for (c, &v) in values[..n].iter().enumerate() {
                    tensor.set(c, y as usize, x as usize, v);
                }
            }
        }
    }
    Ok(tensor)
}

/// Resample every channel to 128 columns.
///
/// Each output column is a normalized triangle-kernel average of input
/// columns: the kernel is centered at `j * (W_in - 1) / 127` with radius
/// `max(1, (W_in - 1) / 127)` input columns, so upscaling reduces to
/// ordinary linear interpolation and downscaling averages the columns a
/// wider pixel covers. Width-128 input is returned unchanged.
pub fn scale_to_square(t: &FeatureTensor) -> FeatureTensor {
    let w_out = RASTER_HEIGHT;
    if t.width == w_out {
        return t.clone();
    }
    let mut out = FeatureTensor::zeros(t.channels, t.height, w_out, t.variant);
    if t.width == 1 {
        for c in 0..t.channels {
            for y in 0..t.height {
                let v = t.at(c, y, 0);
                for x in 0..w_out {
                    out.set(c, y, x, v);
                }
            }
        }
        return out;
    }
    let scale = (t.width - 1) as f64 / (w_out - 1) as f64;
    let radius = scale.max(1.0);
    for j in 0..w_out {
        let center = j as f64 * scale;
        let lo = ((center - radius).ceil() as i64).max(0) as usize;
        let hi = ((center + radius).floor() as i64).min(t.width as i64 - 1) as usize;
        for c in 0..t.channels {
            for y in 0..t.height {
                let mut num = 0.0;
                let mut den = 0.0;
                for i in lo..=hi {
                    let w = 1.0 - (i as f64 - center).abs() / radius;
                    num += w * t.at(c, y, i);
                    den += w;
                }
                out.set(c, y, j, num / den);
            }
        }
    }
    out
}

const PSFT_MAGIC: &[u8; 4] = b"PSFT";
const PSFT_VERSION: u32 = 1;

/// Write the tensor in the `PSFT` binary form: magic, u32 version, u32
/// channels, u32 height, u32 width, u8 variant code, then channel-major
/// row-major f32 values, all little-endian.
pub fn write_psft(t: &FeatureTensor, w: &mut impl Write) -> Result<(), PsfError> {
    w.write_all(PSFT_MAGIC)?;
    w.write_all(&PSFT_VERSION.to_le_bytes())?;
    w.write_all(&(t.channels as u32).to_le_bytes())?;
    w.write_all(&(t.height as u32).to_le_bytes())?;
    w.write_all(&(t.width as u32).to_le_bytes())?;
    w.write_all(&[t.variant.code()])?;
    let mut buf = Vec::with_capacity(t.data.len() * 4);
    for &v in &t.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Read a `PSFT` tensor written by [`write_psft`].
pub fn read_psft(r: &mut impl Read) -> Result<FeatureTensor, PsfError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PSFT_MAGIC {
        return Err(PsfError::BadFormat("missing PSFT magic".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read| -> Result<u32, PsfError> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(r)?;
    if version != PSFT_VERSION {
        return Err(PsfError::BadFormat(format!("unsupported version {version}")));
    }
    let channels = read_u32(r)? as usize;
    let height = read_u32(r)? as usize;
    let width = read_u32(r)? as usize;
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let variant = Variant::from_code(code[0])
        .ok_or_else(|| PsfError::BadFormat(format!("unknown variant code {}", code[0])))?;
    if variant.channels() != channels {
        return Err(PsfError::BadFormat(format!(
            "variant {} implies {} channels, header says {}",
            variant.name(),
            variant.channels(),
            channels
        )));
    }
    let count = channels * height * width;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(FeatureTensor { channels, height, width, variant, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ink::PenState;
    use crate::preprocess::NormPoint;

    fn sig_from_strokes(strokes: Vec<Vec<(f64, f64, f64)>>) -> NormalizedSignature {
        NormalizedSignature {
            strokes: strokes
                .into_iter()
                .map(|s| {
                    let n = s.len();
                    s.into_iter()
                        .enumerate()
                        .map(|(i, (x, y, t))| NormPoint {
                            x,
                            y,
                            elapsed_ms: t,
                            pen: if i == n - 1 { PenState::Up } else { PenState::Down },
                        })
                        .collect()
                })
                .collect(),
        }
    }

    #[test]
    fn psf_of_zero_displacement() {
        let f = segment_psf((5.0, 5.0), (5.0, 5.0));
        assert_eq!(f.v, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn psf_of_three_four_displacement() {
        let f = segment_psf((0.0, 0.0), (3.0, 4.0));
        assert_eq!(f.v, [1.0, 3.0, 4.0, 9.0, 12.0, 12.0, 16.0]);
    }

    #[test]
    fn psf_of_negative_displacement() {
        let f = segment_psf((1.0, 1.0), (0.0, 1.0));
        assert_eq!(f.v, [1.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn temporal_psf_at_time_zero_vanishes() {
        let f = segment_psf_temporal((0.0, 0.0), 0.0, (9.0, 9.0)).unwrap();
        assert_eq!(f.v, [0.0; 7]);
    }

    #[test]
    fn temporal_psf_with_unit_tau_matches_original() {
        let a = (0.3, 7.1);
        let b = (3.3, 11.1);
        let forced = segment_psf_with_tau(a, b, 1.0);
        assert_eq!(forced.v, segment_psf(a, b).v);
        // tau = 1 corresponds to t = e - 1.
        let f = segment_psf_temporal((0.0, 0.0), std::f64::consts::E - 1.0, (3.0, 4.0)).unwrap();
        for (got, want) in f.v.iter().zip([1.0, 3.0, 4.0, 9.0, 12.0, 12.0, 16.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_psf_with_tau_two() {
        let f = segment_psf_with_tau((0.0, 0.0), (1.0, 0.0), 2.0);
        assert_eq!(f.v, [2.0, 2.0, 0.0, 4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn temporal_psf_rejects_negative_time() {
        assert!(matches!(
            segment_psf_temporal((0.0, 0.0), -1.0, (1.0, 1.0)),
            Err(PsfError::NegativeTime(_))
        ));
    }

    #[test]
    fn raster_width_rounds_up_to_sixteen() {
        assert_eq!(raster_width(0.0), 16);
        assert_eq!(raster_width(14.9), 16);
        assert_eq!(raster_width(15.0), 16);
        assert_eq!(raster_width(15.1), 32);
        assert_eq!(raster_width(200.3), 208);
    }

    #[test]
    fn line_pixels_horizontal() {
        let px = line_pixels((0, 64), (10, 64));
        assert_eq!(px.len(), 11);
        assert!(px.iter().enumerate().all(|(i, &(x, y))| x == i as i32 && y == 64));
    }

    #[test]
    fn line_pixels_diagonal_and_reverse() {
        assert_eq!(line_pixels((0, 0), (3, 3)), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(line_pixels((3, 3), (0, 0)), vec![(3, 3), (2, 2), (1, 1), (0, 0)]);
        assert_eq!(line_pixels((2, 5), (2, 5)), vec![(2, 5)]);
    }

    #[test]
    fn line_pixels_steep() {
        let px = line_pixels((0, 0), (1, 4));
        assert_eq!(px.len(), 5);
        assert_eq!(px[0], (0, 0));
        assert_eq!(px[4], (1, 4));
    }

    #[test]
    fn rasterize_single_point_is_all_zero() {
        let sig = sig_from_strokes(vec![vec![(3.0, 3.0, 0.0)]]);
        let t = rasterize(&sig, Variant::Original).unwrap();
        assert_eq!((t.channels, t.height, t.width), (7, 128, 16));
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rasterize_horizontal_segment_covers_eleven_pixels() {
        let sig = sig_from_strokes(vec![vec![(0.0, 64.0, 0.0), (10.0, 64.0, 10.0)]]);
        let t = rasterize(&sig, Variant::Original).unwrap();
        let mut drawn = 0;
        for y in 0..128 {
            for x in 0..16 {
                let v = t.at(0, y, x);
                if v != 0.0 {
                    assert_eq!(v, 1.0);
                    assert_eq!(y, 64);
                    assert!(x <= 10);
                    drawn += 1;
                }
            }
        }
        assert_eq!(drawn, 11);
    }

    #[test]
    fn rasterize_stacked_front_half_matches_original() {
        let sig = sig_from_strokes(vec![
            vec![(0.0, 0.0, 0.0), (20.0, 128.0, 15.0), (40.0, 3.0, 30.0)],
            vec![(5.0, 60.0, 50.0), (30.0, 60.0, 80.0)],
        ]);
        let orig = rasterize(&sig, Variant::Original).unwrap();
        let stacked = rasterize(&sig, Variant::Stacked).unwrap();
        assert_eq!(stacked.channels, 14);
        for c in 0..7 {
            for y in 0..128 {
                for x in 0..orig.width {
                    assert_eq!(stacked.at(c, y, x), orig.at(c, y, x));
                }
            }
        }
    }

    #[test]
    fn rasterize_pixelwise_identities_hold() {
        let sig = sig_from_strokes(vec![vec![
            (0.0, 0.0, 0.0),
            (33.3, 128.0, 12.0),
            (61.7, 40.0, 29.0),
            (90.0, 90.5, 44.0),
        ]]);
        let t = rasterize(&sig, Variant::Original).unwrap();
        for y in 0..128 {
            for x in 0..t.width {
                if t.at(0, y, x) == 0.0 {
                    for c in 1..7 {
                        assert_eq!(t.at(c, y, x), 0.0);
                    }
                    continue;
                }
                let (c1, c2) = (t.at(1, y, x), t.at(2, y, x));
                assert_eq!(t.at(3, y, x), c1 * c1);
                assert_eq!(t.at(4, y, x), c1 * c2);
                assert_eq!(t.at(5, y, x), c1 * c2);
                assert_eq!(t.at(6, y, x), c2 * c2);
            }
        }
    }

    #[test]
    fn rasterize_overlap_takes_latest_segment() {
        // Two horizontal passes over the same row; the second wins.
        let sig = sig_from_strokes(vec![vec![
            (0.0, 64.0, 0.0),
            (10.0, 64.0, 10.0),
            (0.0, 64.0, 20.0),
        ]]);
        let t = rasterize(&sig, Variant::Original).unwrap();
        // Second segment displacement is (-10, 0).
        assert_eq!(t.at(1, 64, 5), -10.0);
    }

    #[test]
    fn rasterize_clamps_top_row() {
        let sig = sig_from_strokes(vec![vec![(0.0, 0.0, 0.0), (0.0, 128.0, 5.0)]]);
        let t = rasterize(&sig, Variant::Original).unwrap();
        assert_eq!(t.at(0, 127, 0), 1.0);
    }

    #[test]
    fn scale_to_square_identity_at_native_width() {
        let sig = sig_from_strokes(vec![vec![(0.0, 0.0, 0.0), (120.0, 128.0, 9.0)]]);
        let t = rasterize(&sig, Variant::Original).unwrap();
        assert_eq!(t.width, 128);
        let scaled = scale_to_square(&t);
        assert_eq!(&scaled, &t);
    }

    #[test]
    fn scale_to_square_preserves_constants() {
        for w in [16usize, 48, 256, 400] {
            let mut t = FeatureTensor::zeros(1, 128, w, Variant::Original);
            for y in 0..128 {
                for x in 0..w {
                    t.set(0, y, x, 3.25);
                }
            }
            let s = scale_to_square(&t);
            assert_eq!(s.width, 128);
            assert!(s.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
        }
    }

    #[test]
    fn scale_to_square_confines_single_column_mass() {
        // One nonzero column at input x = 10, width 256 -> 128. The
        // triangle kernel (radius 255/127) reaches output columns 4 and 5
        // only; weights reduce to 5/512 and 250/512 exactly.
        let mut t = FeatureTensor::zeros(1, 128, 256, Variant::Original);
        t.set(0, 7, 10, 1.0);
        let s = scale_to_square(&t);
        for x in 0..128 {
            let v = s.at(0, 7, x);
            match x {
                4 => assert!((v - 5.0 / 512.0).abs() < 1e-12, "col 4 = {v}"),
                5 => assert!((v - 250.0 / 512.0).abs() < 1e-12, "col 5 = {v}"),
                _ => assert_eq!(v, 0.0, "col {x}"),
            }
        }
    }

    #[test]
    fn psft_round_trips() {
        let sig = sig_from_strokes(vec![vec![(0.0, 0.0, 0.0), (50.0, 128.0, 33.0)]]);
        let t = rasterize(&sig, Variant::Stacked).unwrap();
        let mut buf = Vec::new();
        write_psft(&t, &mut buf).unwrap();
        let back = read_psft(&mut buf.as_slice()).unwrap();
        assert_eq!(back.channels, t.channels);
        assert_eq!(back.width, t.width);
        assert_eq!(back.variant, t.variant);
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn psft_header_bytes_are_fixed() {
        let t = FeatureTensor::zeros(7, 128, 16, Variant::Original);
        let mut buf = Vec::new();
        write_psft(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"PSFT");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &7u32.to_le_bytes());
        assert_eq!(&buf[12..16], &128u32.to_le_bytes());
        assert_eq!(&buf[16..20], &16u32.to_le_bytes());
        assert_eq!(buf[20], 0);
        assert_eq!(buf.len(), 21 + 7 * 128 * 16 * 4);
    }

    #[test]
    fn psft_rejects_bad_magic() {
        let bytes = b"NOPE\x01\x00\x00\x00";
        assert!(matches!(
            read_psft(&mut bytes.as_slice()),
            Err(PsfError::BadFormat(_))
        ));
    }
}
