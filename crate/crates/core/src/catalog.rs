//! Paired product catalog: listings whose variants differ from the listing's
//! base product in exactly one attribute.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use reform_autodiff::rng::{substream, Rng};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::garment::{hue_distance, render_garment, GarmentParams, LENGTH_RANGE};
use crate::image::Image;

/// The editable semantic attributes, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Hue,
    Length,
    #[serde(alias = "pattern")]
    Stripedness,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Hue, Attribute::Length, Attribute::Stripedness];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Hue => "hue",
            Attribute::Length => "length",
            Attribute::Stripedness => "stripedness",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Value of this attribute for rendered params, on the oracle's scale.
    pub fn of_params(self, p: &GarmentParams) -> f32 {
        match self {
            Attribute::Hue => p.hue,
            Attribute::Length => p.length,
            Attribute::Stripedness => p.pattern.stripedness(),
        }
    }

    /// Absolute difference normalized to `[0, 1]` by the attribute's range
    /// (circular for hue).
    pub fn normalized_distance(self, a: f32, b: f32) -> f32 {
        match self {
            Attribute::Hue => hue_distance(a, b) / 0.5,
            Attribute::Length => (a - b).abs() / (LENGTH_RANGE.1 - LENGTH_RANGE.0),
            Attribute::Stripedness => (a - b).abs(),
        }
        .min(1.0)
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hue" | "color" => Ok(Attribute::Hue),
            "length" => Ok(Attribute::Length),
            "stripedness" | "pattern" => Ok(Attribute::Stripedness),
            other => Err(CoreError::InvalidArgument(format!("unknown attribute '{other}'"))),
        }
    }
}

/// Mean normalized attribute difference between two products.
pub fn attribute_distance(a: &GarmentParams, b: &GarmentParams) -> f32 {
    Attribute::ALL
        .iter()
        .map(|attr| attr.normalized_distance(attr.of_params(a), attr.of_params(b)))
        .sum::<f32>()
        / Attribute::ALL.len() as f32
}

#[derive(Clone, Debug)]
pub struct CatalogEntry {
    pub id: usize,
    pub listing_id: usize,
    pub params: GarmentParams,
    pub image: Image,
    /// Filled in by the retrieval index.
    pub embedding: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Listing {
    pub id: usize,
    /// Entry id of the base product.
    pub base: usize,
    /// `(attribute changed, entry id)` for every variant.
    pub variants: Vec<(Attribute, usize)>,
}

#[derive(Clone, Debug)]
pub struct Catalog {
    pub image_size: usize,
    pub entries: Vec<CatalogEntry>,
    pub listings: Vec<Listing>,
}

impl Catalog {
    pub fn entry(&self, id: usize) -> &CatalogEntry {
        &self.entries[id]
    }

    /// `(base, variant, attribute)` for every single-attribute pair.
    pub fn pairs(&self) -> impl Iterator<Item = (&CatalogEntry, &CatalogEntry, Attribute)> {
        self.listings.iter().flat_map(move |l| {
            l.variants
                .iter()
                .map(move |&(attr, v)| (&self.entries[l.base], &self.entries[v], attr))
        })
    }
}

/// Minimum change applied to the mutated attribute, in raw units.
fn min_change(attr: Attribute) -> f32 {
    match attr {
        // 0.3 of the circular range [0, 0.5].
        Attribute::Hue => 0.3,
        // max(0.3 of the range, 0.25) so the oracle sees a clear difference.
        Attribute::Length => 0.25,
        Attribute::Stripedness => 1.0,
    }
}

/// Returns `base` with `attr` changed by at least the attribute's minimum step.
pub fn mutate(base: &GarmentParams, attr: Attribute, rng: &mut Rng) -> GarmentParams {
    let mut p = *base;
    match attr {
        Attribute::Hue => {
            let delta: f32 = rng.random_range(min_change(attr)..=0.5);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            p.hue = (base.hue + sign * delta).rem_euclid(1.0);
            if p.hue >= 1.0 {
                p.hue = 0.0;
            }
        }
        Attribute::Length => {
            let (lo, hi) = LENGTH_RANGE;
            let step = min_change(attr);
            p.length = if base.length <= (lo + hi) / 2.0 {
                rng.random_range(base.length + step..=hi)
            } else {
                rng.random_range(lo..=base.length - step)
            };
        }
        Attribute::Stripedness => p.pattern = base.pattern.flipped(),
    }
    p
}

/// Builds `n_listings` listings of `variants_per_listing` products each: a
/// base product plus variants that each change one attribute, cycling
/// through `attributes`.
pub fn sample_catalog_with(
    seed: u64,
    n_listings: usize,
    variants_per_listing: usize,
    attributes: &[Attribute],
    image_size: usize,
) -> Result<Catalog> {
    if n_listings == 0 {
        return Err(CoreError::InvalidArgument("n_listings must be at least 1".into()));
    }
    if variants_per_listing < 2 {
        return Err(CoreError::InvalidArgument("a listing needs at least 2 variants".into()));
    }
    if attributes.is_empty() {
        return Err(CoreError::InvalidArgument("no attributes to vary".into()));
    }
    let mut rng = substream(seed, "catalog");
    let mut entries = Vec::with_capacity(n_listings * variants_per_listing);
    let mut listings = Vec::with_capacity(n_listings);
    for listing_id in 0..n_listings {
        let base = GarmentParams::random(&mut rng);
        let base_id = entries.len();
        entries.push(CatalogEntry {
            id: base_id,
            listing_id,
            params: base,
            image: render_garment(&base, image_size)?,
            embedding: None,
        });
        let mut variants = Vec::with_capacity(variants_per_listing - 1);
        for j in 0..variants_per_listing - 1 {
            let attr = attributes[(listing_id + j) % attributes.len()];
            let params = mutate(&base, attr, &mut rng);
            let id = entries.len();
            entries.push(CatalogEntry {
                id,
                listing_id,
                params,
                image: render_garment(&params, image_size)?,
                embedding: None,
            });
            variants.push((attr, id));
        }
        listings.push(Listing {
            id: listing_id,
            base: base_id,
            variants,
        });
    }
    Ok(Catalog {
        image_size,
        entries,
        listings,
    })
}

/// [`sample_catalog_with`] over all attributes at 32x32.
pub fn sample_catalog(seed: u64, n_listings: usize, variants_per_listing: usize) -> Result<Catalog> {
    sample_catalog_with(seed, n_listings, variants_per_listing, &Attribute::ALL, 32)
}
