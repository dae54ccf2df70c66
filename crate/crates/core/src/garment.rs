//! Procedural dress renderer.
//!
//! A dress is a bodice narrowing from the shoulder line to the waist, then a
//! linearly flaring skirt down to the hem. Rendering is a pure function of the
//! params and the image size.

use rand::Rng as _;
use reform_autodiff::rng::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::Image;

/// Background gray, `0.8` in `[0, 1]` units.
pub const BACKGROUND: f32 = 0.6;
/// Stripe color, `0.12` in `[0, 1]` units.
pub const STRIPE_LEVEL: f32 = 0.12;
pub const SATURATION: f32 = 0.8;
pub const LENGTH_RANGE: (f32, f32) = (0.3, 0.9);
pub const BRIGHTNESS_RANGE: (f32, f32) = (0.5, 1.0);
pub const SUPPORTED_SIZES: [usize; 2] = [32, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    Striped,
}

impl Pattern {
    pub fn stripedness(self) -> f32 {
        match self {
            Pattern::Solid => 0.0,
            Pattern::Striped => 1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Pattern::Solid => Pattern::Striped,
            Pattern::Striped => Pattern::Solid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarmentParams {
    /// HSV hue in `[0, 1)`, circular; 0 is red.
    pub hue: f32,
    /// Fraction of the image height covered from shoulder line to hem.
    pub length: f32,
    pub pattern: Pattern,
    pub stripe_phase: f32,
    pub brightness: f32,
}

impl GarmentParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: String| if ok { Ok(()) } else { Err(CoreError::InvalidParams(what)) };
        check((0.0..1.0).contains(&self.hue), format!("hue {} outside [0, 1)", self.hue))?;
        check(
            (LENGTH_RANGE.0..=LENGTH_RANGE.1).contains(&self.length),
            format!("length {} outside [0.3, 0.9]", self.length),
        )?;
        check(
            (0.0..1.0).contains(&self.stripe_phase),
            format!("stripe_phase {} outside [0, 1)", self.stripe_phase),
        )?;
        check(
            (BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1).contains(&self.brightness),
            format!("brightness {} outside [0.5, 1.0]", self.brightness),
        )
    }

    pub fn random(rng: &mut Rng) -> Self {
        Self {
            hue: rng.random_range(0.0..1.0),
            length: rng.random_range(LENGTH_RANGE.0..=LENGTH_RANGE.1),
            pattern: if rng.random_bool(0.5) { Pattern::Striped } else { Pattern::Solid },
            stripe_phase: rng.random_range(0.0..1.0),
            brightness: rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1),
        }
    }

    /// Garment color in `[-1, 1]` units.
    pub fn color(&self) -> [f32; 3] {
        hsv_to_rgb(self.hue, SATURATION, self.brightness).map(|v| 2.0 * v - 1.0)
    }
}

/// Row of the shoulder line for an image of `size` pixels.
pub fn shoulder_row(size: usize) -> usize {
    (0.05 * size as f32).round() as usize
}

fn waist_row(size: usize) -> usize {
    shoulder_row(size) + (0.22 * size as f32).round() as usize
}

/// Lowest garment row: `shoulder + round(length * size)`.
pub fn hem_row(length: f32, size: usize) -> usize {
    (shoulder_row(size) + (length * size as f32).round() as usize).min(size - 1)
}

fn half_width(row: usize, size: usize) -> f32 {
    let s = size as f32;
    let (top, waist) = (shoulder_row(size), waist_row(size));
    let w = if row <= waist {
        let t = (row - top) as f32 / (waist - top).max(1) as f32;
        0.18 * s + (0.11 * s - 0.18 * s) * t
    } else {
        0.11 * s + 0.42 * (row - waist) as f32
    };
    w.min(s / 2.0 - 0.5)
}

pub fn stripe_period(size: usize) -> f32 {
    size as f32 * 3.0 / 16.0
}

/// Renders `params` into a `size x size` image in `[-1, 1]`.
pub fn render_garment(params: &GarmentParams, size: usize) -> Result<Image> {
    params.validate()?;
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(CoreError::InvalidParams(format!("image size {size} not in {SUPPORTED_SIZES:?}")));
    }
    let mut img = Image::filled(size, [BACKGROUND; 3]);
    let color = params.color();
    let stripe = [2.0 * STRIPE_LEVEL - 1.0; 3];
    let (top, hem) = (shoulder_row(size), hem_row(params.length, size));
    let center = (size as f32 - 1.0) / 2.0;
    let period = stripe_period(size);
    for row in top..=hem {
        let hw = half_width(row, size);
        let in_stripe = params.pattern == Pattern::Striped
            && ((row - top) as f32 + params.stripe_phase * period).rem_euclid(period) < period / 2.0;
        let px = if in_stripe { stripe } else { color };
        for col in 0..size {
            if (col as f32 - center).abs() <= hw {
                img.set_rgb(row, col, px);
            }
        }
    }
    Ok(img)
}

/// HSV in `[0, 1]` to RGB in `[0, 1]`.
pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// RGB in `[0, 1]` to `(hue, saturation, value)`.
pub fn rgb_to_hsv(rgb: [f32; 3]) -> (f32, f32, f32) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    ((h / 6.0).rem_euclid(1.0), s, max)
}

/// Shortest distance between two hues on the unit circle, in `[0, 0.5]`.
pub fn hue_distance(a: f32, b: f32) -> f32 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use reform_autodiff::rng::seeded;

    fn base() -> GarmentParams {
        GarmentParams {
            hue: 0.6,
            length: 0.5,
            pattern: Pattern::Solid,
            stripe_phase: 0.0,
            brightness: 0.8,
        }
    }

    fn lowest_non_background_row(img: &Image) -> usize {
        (0..img.size())
            .rev()
            .find(|&y| (0..img.size()).any(|x| img.rgb(y, x) != [BACKGROUND; 3]))
            .unwrap()
    }

    #[test]
    fn longer_dress_reaches_lower() {
        let short = render_garment(&GarmentParams { length: 0.3, ..base() }, 32).unwrap();
        let long = render_garment(&GarmentParams { length: 0.9, ..base() }, 32).unwrap();
        assert!(lowest_non_background_row(&long) > lowest_non_background_row(&short));
    }

    #[test]
    fn hem_row_matches_length() {
        for size in SUPPORTED_SIZES {
            for length in [0.3, 0.47, 0.9] {
                let img = render_garment(&GarmentParams { length, ..base() }, size).unwrap();
                let expected = shoulder_row(size) + (length * size as f32).round() as usize;
                assert_eq!(lowest_non_background_row(&img), expected);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let p = GarmentParams { pattern: Pattern::Striped, stripe_phase: 0.3, ..base() };
        let a = render_garment(&p, 64).unwrap();
        let b = render_garment(&p, 64).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn hue_zero_is_red_dominant() {
        let img = render_garment(&GarmentParams { hue: 0.0, ..base() }, 32).unwrap();
        let [r, g, b] = img.rgb(10, 16);
        // HSV(0, 0.8, 0.8) = (0.8, 0.16, 0.16) in [0, 1].
        assert!(r > g && r > b);
        assert!((r - 0.6).abs() < 1e-6 && (g - (-0.68)).abs() < 1e-6 && (b - (-0.68)).abs() < 1e-6);
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = seeded(1);
        for _ in 0..200 {
            let h: f32 = rng.random_range(0.0..1.0);
            let rgb = hsv_to_rgb(h, SATURATION, 0.7);
            let (h2, s2, v2) = rgb_to_hsv(rgb);
            assert!(hue_distance(h, h2) < 1e-5, "{h} {h2}");
            assert!((s2 - SATURATION).abs() < 1e-5 && (v2 - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_params_are_rejected() {
        for p in [
            GarmentParams { hue: 1.0, ..base() },
            GarmentParams { length: 0.95, ..base() },
            GarmentParams { brightness: 0.2, ..base() },
            GarmentParams { stripe_phase: -0.1, ..base() },
        ] {
            assert!(render_garment(&p, 32).is_err());
        }
        assert!(render_garment(&base(), 48).is_err());
    }

    #[test]
    fn hue_distance_wraps() {
        assert!((hue_distance(0.95, 0.05) - 0.1).abs() < 1e-6);
        assert!((hue_distance(0.2, 0.7) - 0.5).abs() < 1e-6);
    }
}
