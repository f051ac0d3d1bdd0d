//! Flow-map encodings: 3-channel color wheel, 2-channel magnitude and
//! direction, 1-channel magnitude. All outputs are 8-bit levels in [0, 255].

use std::f32::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imagecore::{quantize_u8, FlowField, Image};

/// Wheel segment lengths for RY, YG, GC, CB, BM and MR.
pub const WHEEL_SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowEncoding {
    ColorWheel,
    MagDir,
    Mag,
}

impl FlowEncoding {
    pub fn channels(self) -> usize {
        match self {
            FlowEncoding::ColorWheel => 3,
            FlowEncoding::MagDir => 2,
            FlowEncoding::Mag => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FlowEncoding::ColorWheel => "colorwheel",
            FlowEncoding::MagDir => "magdir",
            FlowEncoding::Mag => "mag",
        }
    }
}

/// Magnitude that maps to full saturation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxMag {
    /// 99th percentile of the field's magnitudes (1 if that is zero).
    Auto,
    Fixed(f32),
}

/// Resolves the normalizing magnitude for a field.
pub fn resolve_max_mag(flow: &FlowField, max_mag: MaxMag) -> Result<f32> {
    match max_mag {
        MaxMag::Fixed(m) if m > 0.0 && m.is_finite() => Ok(m),
        MaxMag::Fixed(m) => invalid(format!("max magnitude must be positive, got {m}")),
        MaxMag::Auto => {
            let mut mags = flow.magnitudes();
            mags.sort_by(f32::total_cmp);
            let rank = (0.99 * mags.len() as f64).ceil() as usize;
            let p99 = mags[rank.saturating_sub(1)];
            Ok(if p99 > 0.0 && p99.is_finite() {
                p99
            } else {
                1.0
            })
        }
    }
}

/// The 55-entry color wheel, entries in 0..=255.
pub fn color_wheel() -> Vec<[f32; 3]> {
    let [ry, yg, gc, cb, bm, mr] = WHEEL_SEGMENTS;
    let ramp = |i: usize, n: usize| (255 * i / n) as f32;
    let mut wheel = Vec::with_capacity(55);
    wheel.extend((0..ry).map(|i| [255.0, ramp(i, ry), 0.0]));
    wheel.extend((0..yg).map(|i| [255.0 - ramp(i, yg), 255.0, 0.0]));
    wheel.extend((0..gc).map(|i| [0.0, 255.0, ramp(i, gc)]));
    wheel.extend((0..cb).map(|i| [0.0, 255.0 - ramp(i, cb), 255.0]));
    wheel.extend((0..bm).map(|i| [ramp(i, bm), 0.0, 255.0]));
    wheel.extend((0..mr).map(|i| [255.0, 0.0, 255.0 - ramp(i, mr)]));
    wheel
}

/// Hue from `atan2(-v, -u)` interpolated around the wheel, saturation from
/// `|d| / max_mag` clamped to 1. Zero flow is white.
pub fn flow_to_colorwheel(flow: &FlowField, max_mag: MaxMag) -> Result<Image> {
    let m = resolve_max_mag(flow, max_mag)?;
    let wheel = color_wheel();
    let n = wheel.len();
    let mut out = Image::new(flow.width(), flow.height(), 3)?;
    for (px, d) in out
        .data_mut()
        .chunks_exact_mut(3)
        .zip(flow.data().chunks_exact(2))
    {
        let (u, v) = (d[0] / m, d[1] / m);
        let rad = (u * u + v * v).sqrt().min(1.0);
        let a = (-v).atan2(-u) / PI;
        let fk = (a + 1.0) / 2.0 * (n - 1) as f32;
        let k0 = (fk.floor() as usize).min(n - 1);
        let k1 = (k0 + 1) % n;
        let f = fk - k0 as f32;
        for c in 0..3 {
            let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
            let col = 1.0 - rad * (1.0 - col);
            px[c] = quantize_u8(255.0 * col) as f32;
        }
    }
    Ok(out)
}

/// Channel 0: `255 · min(|d| / max_mag, 1)`; channel 1:
/// `255 · (atan2(v, u) + π) / 2π`.
pub fn flow_to_magdir(flow: &FlowField, max_mag: MaxMag) -> Result<Image> {
    let m = resolve_max_mag(flow, max_mag)?;
    let mut out = Image::new(flow.width(), flow.height(), 2)?;
    for (px, d) in out
        .data_mut()
        .chunks_exact_mut(2)
        .zip(flow.data().chunks_exact(2))
    {
        px[0] = magnitude_level(d[0], d[1], m);
        px[1] = quantize_u8(255.0 * (d[1].atan2(d[0]) + PI) / (2.0 * PI)) as f32;
    }
    Ok(out)
}

pub fn flow_to_mag(flow: &FlowField, max_mag: MaxMag) -> Result<Image> {
    let m = resolve_max_mag(flow, max_mag)?;
    let data = flow
        .data()
        .chunks_exact(2)
        .map(|d| magnitude_level(d[0], d[1], m))
        .collect();
    Image::from_vec(flow.width(), flow.height(), 1, data)
}

fn magnitude_level(u: f32, v: f32, max_mag: f32) -> f32 {
    let mag = (u * u + v * v).sqrt();
    quantize_u8(255.0 * (mag / max_mag).min(1.0)) as f32
}

pub fn encode_flow(flow: &FlowField, encoding: FlowEncoding, max_mag: MaxMag) -> Result<Image> {
    match encoding {
        FlowEncoding::ColorWheel => flow_to_colorwheel(flow, max_mag),
        FlowEncoding::MagDir => flow_to_magdir(flow, max_mag),
        FlowEncoding::Mag => flow_to_mag(flow, max_mag),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(u: f32, v: f32) -> FlowField {
        FlowField::from_vec(1, 1, vec![u, v]).unwrap()
    }

    /// Oracle: wheel written out segment by segment as (start, end) color
    /// pairs with a shared linear ramp.
    fn oracle_wheel() -> Vec<[i32; 3]> {
        let segs: [(usize, [i32; 3], [i32; 3]); 6] = [
            (15, [255, 0, 0], [255, 255, 0]),
            (6, [255, 255, 0], [0, 255, 0]),
            (4, [0, 255, 0], [0, 255, 255]),
            (11, [0, 255, 255], [0, 0, 255]),
            (13, [0, 0, 255], [255, 0, 255]),
            (6, [255, 0, 255], [255, 0, 0]),
        ];
        let mut out = vec![];
        for (n, from, to) in segs {
            for i in 0..n {
                let mut col = [0; 3];
                for c in 0..3 {
                    let step = 255 * i as i32 / n as i32;
                    col[c] = match to[c] - from[c] {
                        0 => from[c],
                        d if d > 0 => step,
                        _ => 255 - step,
                    };
                }
                out.push(col);
            }
        }
        out
    }

    #[test]
    fn wheel_matches_enumeration() {
        let w = color_wheel();
        let o = oracle_wheel();
        assert_eq!(w.len(), 55);
        for (a, b) in w.iter().zip(o.iter()) {
            for c in 0..3 {
                assert_eq!(a[c] as i32, b[c]);
            }
        }
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_colorwheel(&single(0.0, 0.0), MaxMag::Fixed(5.0)).unwrap();
        assert_eq!(img.data(), &[255.0, 255.0, 255.0]);
        // auto normalization falls back to 1 on an all-zero field
        let img = flow_to_colorwheel(&FlowField::zeros(3, 3).unwrap(), MaxMag::Auto).unwrap();
        assert!(img.data().iter().all(|&v| v == 255.0));
    }

    #[test]
    fn full_positive_u_is_red() {
        let img = flow_to_colorwheel(&single(4.0, 0.0), MaxMag::Fixed(4.0)).unwrap();
        assert_eq!(img.data(), &[255.0, 0.0, 0.0]);
    }

    #[test]
    fn hue_is_periodic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let ang: f32 = rng.random_range(-3.0..3.0);
            let mag: f32 = rng.random_range(0.1..2.0);
            let a = single(mag * ang.cos(), mag * ang.sin());
            let t = ang + 2.0 * PI;
            let b = single(mag * t.cos(), mag * t.sin());
            let ca = flow_to_colorwheel(&a, MaxMag::Fixed(2.0)).unwrap();
            let cb = flow_to_colorwheel(&b, MaxMag::Fixed(2.0)).unwrap();
            for c in 0..3 {
                assert!((ca.data()[c] - cb.data()[c]).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn magdir_examples() {
        let md = flow_to_magdir(&single(3.0, 4.0), MaxMag::Fixed(10.0)).unwrap();
        assert_eq!(md.data()[0], 128.0);
        let md = flow_to_magdir(&single(-1.0, 0.0), MaxMag::Fixed(10.0)).unwrap();
        assert_eq!(md.data()[1], 255.0);
        let md = flow_to_magdir(&single(0.0, 0.0), MaxMag::Fixed(10.0)).unwrap();
        assert_eq!(md.data()[0], 0.0);
        // atan2(0, 0) = 0 -> half turn
        assert_eq!(md.data()[1], 128.0);
        let m = flow_to_mag(&single(30.0, 40.0), MaxMag::Fixed(10.0)).unwrap();
        assert_eq!(m.data(), &[255.0]);
    }

    #[test]
    fn auto_uses_99th_percentile() {
        let mut data = vec![0.0f32; 200];
        for i in 0..100 {
            data[2 * i] = (i + 1) as f32;
        }
        let f = FlowField::from_vec(100, 1, data).unwrap();
        assert_eq!(resolve_max_mag(&f, MaxMag::Auto).unwrap(), 99.0);
        assert!(resolve_max_mag(&f, MaxMag::Fixed(0.0)).is_err());
    }

    #[test]
    fn outputs_stay_in_byte_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..2 * 400)
            .map(|_| rng.random_range(-20.0..20.0))
            .collect();
        let f = FlowField::from_vec(20, 20, data).unwrap();
        for enc in [
            FlowEncoding::ColorWheel,
            FlowEncoding::MagDir,
            FlowEncoding::Mag,
        ] {
            for mm in [MaxMag::Auto, MaxMag::Fixed(3.0)] {
                let img = encode_flow(&f, enc, mm).unwrap();
                assert_eq!(img.channels(), enc.channels());
                assert!(img
                    .data()
                    .iter()
                    .all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0));
            }
        }
    }
}
