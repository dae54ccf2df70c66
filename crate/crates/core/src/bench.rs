//! ONDCG benchmark over listing pairs of a synthetic catalog.
//!
//! For every `(base, variant)` pair the base image is encoded, the changed
//! attribute is edited toward the variant's oracle value, and the original,
//! the edit and the variant are each run as search queries. Relevance is
//! graded against the variant. A 0-step edit (the bare reconstruction) runs
//! alongside as the control.

use std::collections::BTreeMap;

use reform_autodiff::OptimizerConfig;
use serde::{Deserialize, Serialize};

use crate::catalog::{sample_catalog_with, Attribute, Catalog};
use crate::encoder::{encode_optimize, EncodeConfig, Models};
use crate::error::{CoreError, Result};
use crate::oracle::extract_attributes;
use crate::reformulator::{default_reform_optimizer, reformulate, AttributeClassifier, AttributeTarget};
use crate::retrieval::{dcg, ondcg, relevance, sign_test, summarize, RankedList, SearchIndex, SignTest, Summary, DEFAULT_K, RELEVANCE_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seed: u64,
    pub n_listings: usize,
    /// Single-attribute variants per listing, on top of the base product.
    pub variants: usize,
    pub k: usize,
    /// Attributes the variants cycle through.
    pub attributes: Vec<Attribute>,
    pub encode: EncodeConfig,
    pub reform: OptimizerConfig,
    pub lambda_anchor: f64,
    /// Pin the attributes a pair does not change at the classifier's
    /// outputs for the encoded original, as untouched sliders would be.
    pub hold_others: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 0,
            n_listings: 50,
            variants: 2,
            k: DEFAULT_K,
            attributes: Attribute::ALL.to_vec(),
            encode: EncodeConfig::default(),
            reform: default_reform_optimizer(),
            lambda_anchor: 0.0,
            hold_others: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_listings == 0 || self.variants == 0 || self.k == 0 {
            return Err(CoreError::InvalidConfig("n_listings, variants and k must be positive".into()));
        }
        if self.attributes.is_empty() {
            return Err(CoreError::InvalidConfig("bench needs at least one attribute".into()));
        }
        if !(self.lambda_anchor >= 0.0 && self.lambda_anchor.is_finite()) {
            return Err(CoreError::InvalidConfig("lambda_anchor must be non-negative".into()));
        }
        self.encode.validate()?;
        self.reform.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy)]
pub struct BenchModels<'a> {
    pub models: Models<'a>,
    pub classifier: &'a AttributeClassifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub listing_id: usize,
    pub attribute: Attribute,
    pub original_id: usize,
    pub ground_truth_id: usize,
    /// Oracle value of the variant for `attribute`, the edit's target.
    pub target: f32,
    pub dcg_original: f64,
    pub dcg_reform: f64,
    pub dcg_ground_truth: f64,
    pub ondcg: f64,
    /// DCG and ONDCG of the 0-step edit.
    pub dcg_control: f64,
    pub ondcg_control: f64,
    pub reform_converged: bool,
    pub reform_steps: usize,
    /// 1-based rank of the variant in its own results, if within `k`.
    pub ground_truth_self_rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub listing_id: usize,
    pub attribute: Attribute,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OndcgReport {
    pub relevance_version: String,
    pub k: usize,
    pub n_listings: usize,
    pub attributes_evaluated: Vec<Attribute>,
    pub evaluations: Vec<PairEvaluation>,
    pub excluded: Vec<Exclusion>,
    pub aggregate: Summary,
    pub control_aggregate: Summary,
    /// Per-listing mean of `ondcg - ondcg_control`, one-sided.
    pub sign_test_vs_control: SignTest,
    /// Share of evaluated pairs whose variant ranks itself in its top 3.
    pub ground_truth_top3_rate: f64,
    pub config: serde_json::Value,
    pub model_hashes: BTreeMap<String, String>,
}

/// Top-3 share at or above which the catalog counts as searchable.
pub const GROUND_TRUTH_TOP3_FLOOR: f64 = 0.9;

pub fn bench_catalog(cfg: &BenchConfig, image_size: usize) -> Result<Catalog> {
    sample_catalog_with(cfg.seed, cfg.n_listings, cfg.variants + 1, &cfg.attributes, image_size)
}

pub fn run_benchmark(
    catalog: &Catalog,
    models: BenchModels<'_>,
    cfg: &BenchConfig,
    model_hashes: BTreeMap<String, String>,
) -> Result<OndcgReport> {
    cfg.validate()?;
    let v = models.models.perceptual;
    let ff = models.classifier;
    if ff.space != cfg.encode.space {
        return Err(CoreError::InvalidConfig(format!(
            "encoder works in {:?} space but the classifier expects {:?}",
            cfg.encode.space, ff.space
        )));
    }
    let index = SearchIndex::build(catalog, v)?;
    let mut evaluations = Vec::new();
    let mut excluded = Vec::new();
    let mut attributes_evaluated: Vec<Attribute> = Vec::new();
    for listing in &catalog.listings {
        let base = catalog.entry(listing.base);
        let encoded = encode_optimize(&base.image, models.models, &cfg.encode, None)?;
        let reconstruction = models.models.render(&encoded.code)?;
        let held = ff.predict(&encoded.code)?;
        let original = index.search(v, &base.image, cfg.k)?;
        let control = index.search(v, &reconstruction, cfg.k)?;
        for &(attr, variant_id) in &listing.variants {
            let variant = catalog.entry(variant_id);
            let exclude = |reason: String| Exclusion { listing_id: listing.id, attribute: attr, reason };
            let target = match extract_attributes(&variant.image) {
                Ok(r) => r.values()[attr.index()],
                Err(e) => {
                    excluded.push(exclude(format!("oracle failed on variant: {e}")));
                    continue;
                }
            };
            let mut y = AttributeTarget::single(&ff.names, attr.name(), target.clamp(0.0, 1.0))?;
            if cfg.hold_others {
                for (slot, &h) in y.values.iter_mut().zip(&held) {
                    slot.get_or_insert(h);
                }
            }
            let edit = reformulate(&encoded.code, ff, &y, &cfg.reform, cfg.lambda_anchor)?;
            let reform = index.search(v, &models.models.render(&edit.code)?, cfg.k)?;
            let truth = index.search(v, &variant.image, cfg.k)?;
            let rel = |id: usize| relevance(&catalog.entry(id).params, &variant.params);
            let score = |list: &RankedList| dcg(list, rel, cfg.k);
            let (d_orig, d_reform, d_gt, d_control) = (score(&original), score(&reform), score(&truth), score(&control));
            let (Ok(o), Ok(c)) = (ondcg(d_orig, d_reform, d_gt), ondcg(d_orig, d_control, d_gt)) else {
                excluded.push(exclude(format!("degenerate pair: ground-truth DCG equals original DCG ({d_orig})")));
                continue;
            };
            if !attributes_evaluated.contains(&attr) {
                attributes_evaluated.push(attr);
            }
            evaluations.push(PairEvaluation {
                listing_id: listing.id,
                attribute: attr,
                original_id: base.id,
                ground_truth_id: variant_id,
                target,
                dcg_original: d_orig,
                dcg_reform: d_reform,
                dcg_ground_truth: d_gt,
                ondcg: o,
                dcg_control: d_control,
                ondcg_control: c,
                reform_converged: edit.converged,
                reform_steps: edit.steps_used,
                ground_truth_self_rank: truth.ids().iter().position(|&id| id == variant_id).map(|r| r + 1),
            });
        }
        tracing::debug!(listing = listing.id, "listing evaluated");
    }
    attributes_evaluated.sort_by_key(|a| a.index());

    let mut per_listing: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for e in &evaluations {
        let slot = per_listing.entry(e.listing_id).or_default();
        slot.0 += e.ondcg - e.ondcg_control;
        slot.1 += 1;
    }
    let listing_diffs: Vec<f64> = per_listing.values().map(|&(s, n)| s / n as f64).collect();
    let top3 = evaluations.iter().filter(|e| e.ground_truth_self_rank.is_some_and(|r| r <= 3)).count();
    Ok(OndcgReport {
        relevance_version: RELEVANCE_VERSION.to_string(),
        k: cfg.k,
        n_listings: catalog.listings.len(),
        attributes_evaluated,
        aggregate: summarize(&evaluations.iter().map(|e| e.ondcg).collect::<Vec<_>>()),
        control_aggregate: summarize(&evaluations.iter().map(|e| e.ondcg_control).collect::<Vec<_>>()),
        sign_test_vs_control: sign_test(&listing_diffs),
        ground_truth_top3_rate: if evaluations.is_empty() { 0.0 } else { top3 as f64 / evaluations.len() as f64 },
        evaluations,
        excluded,
        config: serde_json::to_value(cfg)?,
        model_hashes,
    })
}
