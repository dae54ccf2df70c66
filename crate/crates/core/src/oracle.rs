//! Pixel-level attribute oracle.
//!
//! Reads hue, length and stripedness back out of an image using nothing but
//! the fixed background color and the render geometry. Every evaluation in
//! the workspace is graded by this extractor.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::garment::{rgb_to_hsv, shoulder_row, BACKGROUND};
use crate::image::Image;

/// Per-channel deviation from the background that marks a garment pixel.
pub const MASK_THRESHOLD: f32 = 0.3;
/// Pixels less saturated than this carry no usable hue (stripes, shading).
const MIN_HUE_SATURATION: f32 = 0.25;
/// Minimum garment pixels in a row for the row to count as garment.
const MIN_ROW_PIXELS: usize = 2;
/// Rows whose brightest row is dimmer than this carry no stripe signal.
const MIN_STRIPE_CONTRAST: f32 = 0.3;
/// Relative band depths mapped linearly onto stripedness 0 and 1.
const STRIPE_DEPTH_RANGE: (f32, f32) = (0.25, 0.35);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeReadout {
    pub hue_est: f32,
    pub length_est: f32,
    pub stripedness_est: f32,
    pub hue_confidence: f32,
    pub length_confidence: f32,
    pub stripedness_confidence: f32,
}

impl AttributeReadout {
    /// Values in the canonical attribute order `[hue, length, stripedness]`.
    pub fn values(&self) -> [f32; 3] {
        [self.hue_est, self.length_est, self.stripedness_est]
    }
}

pub fn garment_mask(img: &Image) -> Vec<bool> {
    let s = img.size();
    let mut mask = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            mask[y * s + x] = img.rgb(y, x).iter().any(|v| (v - BACKGROUND).abs() > MASK_THRESHOLD);
        }
    }
    mask
}

/// Extracts attributes, or [`CoreError::NoGarment`] when nothing deviates from
/// the background.
pub fn extract_attributes(img: &Image) -> Result<AttributeReadout> {
    let s = img.size();
    let mask = garment_mask(img);
    let row_count = |y: usize| mask[y * s..(y + 1) * s].iter().filter(|&&m| m).count();
    let garment_rows: Vec<bool> = (0..s).map(|y| row_count(y) >= MIN_ROW_PIXELS).collect();

    // Main body: the first run of garment rows, bridging single-row gaps.
    let first = garment_rows.iter().position(|&g| g).ok_or(CoreError::NoGarment)?;
    let mut last = first;
    let mut y = first + 1;
    while y < s {
        if garment_rows[y] {
            last = y;
        } else if !(y + 1 < s && garment_rows[y + 1]) {
            break;
        }
        y += 1;
    }

    let top = shoulder_row(s);
    let length_est = ((last as f32 - top as f32) / s as f32).clamp(0.0, 1.0);
    let body_pixels: usize = (first..=last).map(row_count).sum();
    let all_pixels = mask.iter().filter(|&&m| m).count();
    let length_confidence = body_pixels as f32 / all_pixels as f32;

    let to_unit = |v: f32| ((v + 1.0) / 2.0).clamp(0.0, 1.0);
    let (mut sin_sum, mut cos_sum, mut hue_n) = (0.0f64, 0.0f64, 0usize);
    let mut values = vec![f32::NAN; s * s];
    for yy in first..=last {
        for x in 0..s {
            if !mask[yy * s + x] {
                continue;
            }
            let (h, sat, v) = rgb_to_hsv(img.rgb(yy, x).map(to_unit));
            values[yy * s + x] = v;
            if sat >= MIN_HUE_SATURATION {
                let a = h as f64 * std::f64::consts::TAU;
                sin_sum += a.sin();
                cos_sum += a.cos();
                hue_n += 1;
            }
        }
    }
    let (hue_est, hue_confidence) = if hue_n == 0 {
        (0.0, 0.0)
    } else {
        let angle = sin_sum.atan2(cos_sum);
        let h = (angle / std::f64::consts::TAU).rem_euclid(1.0) as f32;
        let resultant = (sin_sum.hypot(cos_sum) / hue_n as f64) as f32;
        (if h >= 1.0 { 0.0 } else { h }, resultant)
    };

    // Depth of the deepest interior dark band: how far a pair of adjacent
    // rows sits below the brighter rows on both sides of it, relative to the
    // brightest row. Edge rows (shoulder, hem) have no bright side below or
    // above and never count.
    let row_means: Vec<f32> = (first..=last)
        .filter_map(|yy| {
            let row: Vec<f32> = values[yy * s..(yy + 1) * s].iter().copied().filter(|v| v.is_finite()).collect();
            (!row.is_empty()).then(|| row.iter().sum::<f32>() / row.len() as f32)
        })
        .collect();
    let brightest = row_means.iter().copied().fold(0.0f32, f32::max);
    let (stripedness_est, stripedness_confidence) = if row_means.len() < 4 || brightest < MIN_STRIPE_CONTRAST {
        (0.0, 0.0)
    } else {
        let n = row_means.len();
        let mut above = vec![0.0f32; n];
        let mut below = vec![0.0f32; n];
        for i in 1..n {
            above[i] = above[i - 1].max(row_means[i - 1]);
        }
        for i in (0..n - 1).rev() {
            below[i] = below[i + 1].max(row_means[i + 1]);
        }
        let valley = |i: usize| (above[i].min(below[i]) - row_means[i]).max(0.0) / brightest;
        let depth = (0..n - 1).map(|i| valley(i).min(valley(i + 1))).fold(0.0f32, f32::max);
        (
            ((depth - STRIPE_DEPTH_RANGE.0) / (STRIPE_DEPTH_RANGE.1 - STRIPE_DEPTH_RANGE.0)).clamp(0.0, 1.0),
            (n as f32 / 8.0).min(1.0),
        )
    };

    Ok(AttributeReadout {
        hue_est,
        length_est,
        stripedness_est,
        hue_confidence,
        length_confidence,
        stripedness_confidence,
    })
}

/// Whether the oracle finds a garment at all.
pub fn has_garment(img: &Image) -> bool {
    extract_attributes(img).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::garment::{hue_distance, render_garment, GarmentParams, Pattern};
    use reform_autodiff::rng::seeded;

    #[test]
    fn all_background_is_an_error() {
        let img = Image::filled(32, [BACKGROUND; 3]);
        let err = extract_attributes(&img).unwrap_err();
        assert_eq!(err.to_string(), "no garment detected");
    }

    #[test]
    fn round_trip_over_random_params() {
        let mut rng = seeded(42);
        for size in [32, 64] {
            for _ in 0..100 {
                let p = GarmentParams::random(&mut rng);
                let r = extract_attributes(&render_garment(&p, size).unwrap()).unwrap();
                assert!((r.length_est - p.length).abs() <= 0.05, "{p:?} -> {r:?}");
                assert!(hue_distance(r.hue_est, p.hue) <= 0.03, "{p:?} -> {r:?}");
                let want = p.pattern.stripedness();
                assert!((r.stripedness_est - want).abs() < 0.25, "{p:?} -> {r:?}");
            }
        }
    }

    #[test]
    fn stripedness_separates_patterns() {
        let base = GarmentParams { hue: 0.3, length: 0.6, pattern: Pattern::Solid, stripe_phase: 0.5, brightness: 0.9 };
        let solid = extract_attributes(&render_garment(&base, 32).unwrap()).unwrap();
        let striped = extract_attributes(
            &render_garment(&GarmentParams { pattern: Pattern::Striped, ..base }, 32).unwrap(),
        )
        .unwrap();
        assert_eq!(solid.stripedness_est, 0.0);
        assert!(striped.stripedness_est > 0.8, "{striped:?}");
    }

    #[test]
    fn length_estimate_is_monotone() {
        let mut prev = -1.0;
        for i in 0..=30 {
            let length = 0.3 + 0.02 * i as f32;
            let p = GarmentParams { hue: 0.1, length, pattern: Pattern::Solid, stripe_phase: 0.0, brightness: 0.7 };
            let est = extract_attributes(&render_garment(&p, 64).unwrap()).unwrap().length_est;
            assert!(est > prev, "length {length}: {est} <= {prev}");
            prev = est;
        }
    }

    #[test]
    fn isolated_noise_does_not_extend_length() {
        let p = GarmentParams { hue: 0.5, length: 0.4, pattern: Pattern::Solid, stripe_phase: 0.0, brightness: 0.8 };
        let mut img = render_garment(&p, 32).unwrap();
        let clean = extract_attributes(&img).unwrap().length_est;
        img.set_rgb(30, 3, [1.0, -1.0, -1.0]);
        img.set_rgb(30, 4, [1.0, -1.0, -1.0]);
        assert_eq!(extract_attributes(&img).unwrap().length_est, clean);
    }
}
