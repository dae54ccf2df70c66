//! Labeled training data and the on-disk dataset format.

use std::path::Path;

use reform_autodiff::rng::substream;
use serde::{Deserialize, Serialize};

use crate::catalog::{sample_catalog_with, Attribute};
use crate::error::{CoreError, Result};
use crate::garment::{render_garment, GarmentParams, Pattern};
use crate::image::Image;

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub params: GarmentParams,
    pub image: Image,
}

/// `n` independent random garments.
pub fn labeled_dataset(seed: u64, n: usize, size: usize) -> Result<Vec<LabeledImage>> {
    let mut rng = substream(seed, "dataset");
    (0..n)
        .map(|_| {
            let params = GarmentParams::random(&mut rng);
            Ok(LabeledImage {
                image: render_garment(&params, size)?,
                params,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub file: String,
    pub hue: f32,
    pub length: f32,
    pub pattern: Pattern,
    pub brightness: f32,
    pub listing_id: usize,
}

/// Writes `n` catalog images (listings of `variants` products) as PNGs plus
/// `manifest.json`. Returns the manifest.
pub fn write_dataset(
    dir: &Path,
    seed: u64,
    n: usize,
    variants: usize,
    size: usize,
) -> Result<Vec<ManifestEntry>> {
    if variants == 0 || n % variants != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "image count {n} must be a multiple of variants per listing {variants}"
        )));
    }
    let catalog = sample_catalog_with(seed, n / variants, variants, &Attribute::ALL, size)?;
    std::fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(n);
    for e in &catalog.entries {
        let file = format!("{:05}.png", e.id);
        e.image.save_png(dir.join(&file))?;
        manifest.push(ManifestEntry {
            id: e.id,
            file,
            hue: e.params.hue,
            length: e.params.length,
            pattern: e.params.pattern,
            brightness: e.params.brightness,
            listing_id: e.listing_id,
        });
    }
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
