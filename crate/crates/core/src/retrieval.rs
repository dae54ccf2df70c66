//! Cosine-similarity search over a catalog, DCG and oracle-normalized DCG.

use serde::{Deserialize, Serialize};

use crate::catalog::{attribute_distance, Catalog};
use crate::error::{CoreError, Result};
use crate::garment::GarmentParams;
use crate::image::Image;
use crate::perceptual::PerceptualModel;

pub const DEFAULT_K: usize = 10;
/// Identifies the relevance grading function in reports.
pub const RELEVANCE_VERSION: &str = "attribute-distance-v1: max(0, 1 - mean normalized |diff| over hue (circular), length, stripedness)";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    /// `(catalog id, cosine similarity)`, best first.
    pub entries: Vec<(usize, f32)>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SearchIndex {
    ids: Vec<usize>,
    embeddings: Vec<Vec<f32>>,
}

impl SearchIndex {
    pub fn new(ids: Vec<usize>, embeddings: Vec<Vec<f32>>) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(CoreError::InvalidArgument("ids and embeddings differ in length".into()));
        }
        if let Some(first) = embeddings.first() {
            if embeddings.iter().any(|e| e.len() != first.len()) {
                return Err(CoreError::InvalidArgument("embeddings differ in dimension".into()));
            }
        }
        Ok(SearchIndex { ids, embeddings })
    }

    /// Embeds every catalog image with `v`.
    pub fn build(catalog: &Catalog, v: &PerceptualModel) -> Result<Self> {
        let mut embeddings = Vec::with_capacity(catalog.entries.len());
        for chunk in catalog.entries.chunks(100) {
            let imgs: Vec<Image> = chunk.iter().map(|e| e.image.clone()).collect();
            embeddings.extend(v.embed_batch(&imgs)?);
        }
        Self::new(catalog.entries.iter().map(|e| e.id).collect(), embeddings)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Top `k` by cosine similarity; ties go to the smaller id.
    pub fn search_embedding(&self, query: &[f32], k: usize) -> Result<RankedList> {
        if let Some(first) = self.embeddings.first() {
            if first.len() != query.len() {
                return Err(CoreError::InvalidArgument(format!(
                    "query dimension {} differs from index dimension {}",
                    query.len(),
                    first.len()
                )));
            }
        }
        let qn = norm(query);
        let mut scored: Vec<(usize, f32)> = self
            .ids
            .iter()
            .zip(&self.embeddings)
            .map(|(&id, e)| {
                let denom = qn * norm(e);
                let dot: f32 = e.iter().zip(query).map(|(a, b)| a * b).sum();
                (id, if denom > 0.0 { dot / denom } else { 0.0 })
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(RankedList { entries: scored })
    }

    pub fn search(&self, v: &PerceptualModel, query: &Image, k: usize) -> Result<RankedList> {
        self.search_embedding(&v.embed(query)?, k)
    }
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

/// `sum_{i=1..k} rel(id_i) / log2(i + 1)`.
pub fn dcg(ranked: &RankedList, relevance: impl Fn(usize) -> f64, k: usize) -> f64 {
    ranked
        .entries
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &(id, _))| relevance(id) / ((i + 2) as f64).log2())
        .sum()
}

/// `(reform - orig) / (gt - orig)`.
pub fn ondcg(dcg_original: f64, dcg_reform: f64, dcg_ground_truth: f64) -> Result<f64> {
    let denom = dcg_ground_truth - dcg_original;
    if denom == 0.0 {
        return Err(CoreError::DegeneratePair);
    }
    Ok((dcg_reform - dcg_original) / denom)
}

/// Graded relevance of `candidate` for a query whose intent is `target`.
pub fn relevance(candidate: &GarmentParams, target: &GarmentParams) -> f64 {
    (1.0 - attribute_distance(candidate, target) as f64).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_ties: usize,
    /// One-sided `P(X >= n_positive)` for `X ~ Binomial(n_positive + n_negative, 1/2)`.
    pub p_value: f64,
}

pub fn sign_test(differences: &[f64]) -> SignTest {
    let n_positive = differences.iter().filter(|&&d| d > 0.0).count();
    let n_negative = differences.iter().filter(|&&d| d < 0.0).count();
    let n = n_positive + n_negative;
    let p_value = binomial_upper_tail(n, n_positive);
    SignTest {
        n_positive,
        n_negative,
        n_ties: differences.len() - n,
        p_value,
    }
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)` by direct summation.
pub fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let mut coef = 1.0f64;
    let mut tail = 0.0f64;
    for i in 0..=n {
        if i >= k {
            tail += coef;
        }
        coef = coef * (n - i) as f64 / (i + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary { mean: f64::NAN, median: f64::NAN, n: 0 };
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    let median = if m % 2 == 1 { v[m / 2] } else { (v[m / 2 - 1] + v[m / 2]) / 2.0 };
    Summary {
        mean: v.iter().sum::<f64>() / m as f64,
        median,
        n: m,
    }
}
