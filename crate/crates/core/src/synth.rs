//! Synthetic catalogues with planted style clusters, and word-vector loading.
//!
//! Every item gets a latent style vector (its cluster centre plus Gaussian
//! jitter). Each feature modality is a fixed random linear projection of the
//! latent vector plus modality-specific noise; text carries the cleanest
//! signal, visual a weaker one. Positive outfits draw all members from one
//! cluster, following a random template of distinct product types.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::catalog::{
    Catalog, Department, Item, ItemFeatures, Outfit, OutfitSet, OutfitTemplate, CATEGORY_DIM, TEXT_DIM,
    VISUAL_DIM,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductTypeSpec {
    pub name: String,
    pub categories: Vec<String>,
}

/// Signal gain and noise multiplier of one feature modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityNoise {
    pub gain: f64,
    /// Multiplies `noise_scale` for this modality's additive noise.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub department: Department,
    pub n_items_per_type: usize,
    pub product_types: Vec<ProductTypeSpec>,
    pub n_style_clusters: usize,
    pub latent_dim: usize,
    pub noise_scale: f64,
    /// Positive outfit counts for sizes 2, 3, 4 and 5.
    pub outfit_counts_by_size: [usize; 4],
    /// Explicit templates; empty means random distinct-type templates.
    pub templates: Vec<OutfitTemplate>,
    pub text: ModalityNoise,
    pub visual: ModalityNoise,
    pub category: ModalityNoise,
    /// Zipf exponent of styling popularity inside a cluster (0 = uniform).
    pub styling_skew: f64,
    pub seasons: Vec<String>,
    pub in_stock_fraction: f64,
    pub seed: u64,
}

fn ww_types() -> Vec<ProductTypeSpec> {
    let spec = |name: &str, cats: &[&str]| ProductTypeSpec {
        name: name.into(),
        categories: cats.iter().map(|c| c.to_string()).collect(),
    };
    vec![
        spec("Dresses", &["midi dress", "maxi dress", "shirt dress"]),
        spec("Tops", &["blouse", "crop top", "cami"]),
        spec("Jeans", &["skinny jeans", "mom jeans", "wide leg jeans"]),
        spec("Skirts", &["mini skirt", "pleated skirt"]),
        spec("Shoes", &["heels", "trainers", "boots"]),
        spec("Bags", &["tote bag", "clutch bag", "cross body bag"]),
    ]
}

impl Default for SynthConfig {
    /// About 2,000 items and 5,000 outfits with the outfit-size mix of a
    /// large womenswear catalogue (155k/109k/42k/8k outfits of size 2–5).
    fn default() -> Self {
        SynthConfig {
            department: Department::WW,
            n_items_per_type: 334,
            product_types: ww_types(),
            n_style_clusters: 40,
            latent_dim: 16,
            noise_scale: 0.1,
            outfit_counts_by_size: [2468, 1740, 669, 123],
            templates: Vec::new(),
            text: ModalityNoise { gain: 1.0, noise: 1.0 },
            visual: ModalityNoise { gain: 0.5, noise: 12.0 },
            category: ModalityNoise { gain: 0.5, noise: 10.0 },
            styling_skew: 1.0,
            seasons: vec!["SS".into(), "AW".into()],
            in_stock_fraction: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// A small configuration: `types` product types with `items` items each.
    pub fn small(types: usize, items: usize, clusters: usize) -> Self {
        let mut product_types = ww_types();
        product_types.truncate(types);
        SynthConfig {
            n_items_per_type: items,
            product_types,
            n_style_clusters: clusters,
            outfit_counts_by_size: [0; 4],
            ..SynthConfig::default()
        }
    }

    pub fn total_outfits(&self) -> usize {
        self.outfit_counts_by_size.iter().sum()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: SynthConfig = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            line: e.line(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_style_clusters < 2 || self.latent_dim < 2 {
            return Err(Error::Config("need at least 2 style clusters and latent_dim >= 2".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise_scale must be non-negative".into()));
        }
        if self.product_types.is_empty() || self.product_types.iter().any(|t| t.categories.is_empty()) {
            return Err(Error::Config("every product type needs at least one category".into()));
        }
        if !(0.0..=1.0).contains(&self.in_stock_fraction) {
            return Err(Error::Config("in_stock_fraction must be in [0, 1]".into()));
        }
        for template in &self.templates {
            for t in std::iter::once(&template.hero_type).chain(&template.styling_types) {
                if !self.product_types.iter().any(|p| &p.name == t) {
                    return Err(Error::Config(format!("template {template} uses unknown product type {t:?}")));
                }
            }
        }
        if self.templates.is_empty() {
            for (k, &count) in self.outfit_counts_by_size.iter().enumerate() {
                if count > 0 && k + 2 > self.product_types.len() {
                    return Err(Error::Config(format!(
                        "outfits of size {} need {} distinct product types",
                        k + 2,
                        k + 2
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Generated catalogue and outfits together with the planted ground truth.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub catalog: Catalog,
    pub outfits: OutfitSet,
    pub clusters: HashMap<String, usize>,
    pub latents: HashMap<String, Vec<f64>>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

fn project(
    rng: &mut ChaCha8Rng,
    projection: &Array2<f64>,
    latent: &[f64],
    modality: ModalityNoise,
    noise_scale: f64,
) -> Vec<f64> {
    let sigma = noise_scale * modality.noise;
    projection
        .outer_iter()
        .map(|row| {
            let signal: f64 = row.iter().zip(latent).map(|(p, z)| p * z).sum();
            let noise: f64 = rng.sample(StandardNormal);
            modality.gain * signal + sigma * noise
        })
        .collect()
}

fn slug(name: &str) -> String {
    name.to_lowercase().replace(|c: char| !c.is_ascii_alphanumeric(), "-")
}

pub fn generate_synthetic_dataset(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.latent_dim;
    let centers = gaussian_matrix(&mut rng, config.n_style_clusters, k, 1.0);
    let proj_std = 1.0 / (k as f64).sqrt();
    let text_proj = gaussian_matrix(&mut rng, TEXT_DIM, k, proj_std);
    let visual_proj = gaussian_matrix(&mut rng, VISUAL_DIM, k, proj_std);
    let category_proj = gaussian_matrix(&mut rng, CATEGORY_DIM, k, proj_std);

    let mut catalog = Catalog::new();
    let mut clusters = HashMap::new();
    let mut latents = HashMap::new();
    // (type index, cluster) -> catalogue ids, in creation order.
    let mut by_type_cluster: HashMap<(usize, usize), Vec<String>> = HashMap::new();

    for (t_idx, ptype) in config.product_types.iter().enumerate() {
        for n in 0..config.n_items_per_type {
            let cluster = n % config.n_style_clusters;
            let latent: Vec<f64> = centers
                .row(cluster)
                .iter()
                .map(|c| c + config.noise_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let features = ItemFeatures {
                text: project(&mut rng, &text_proj, &latent, config.text, config.noise_scale),
                visual: project(&mut rng, &visual_proj, &latent, config.visual, config.noise_scale),
                category: project(&mut rng, &category_proj, &latent, config.category, config.noise_scale),
            };
            let id = format!("{}-{:05}", slug(&ptype.name), n);
            let category = ptype.categories[cluster % ptype.categories.len()].clone();
            let item = Item {
                id: id.clone(),
                product_type: ptype.name.clone(),
                category: category.clone(),
                department: config.department,
                season: (!config.seasons.is_empty()).then(|| config.seasons[rng.random_range(0..config.seasons.len())].clone()),
                title: Some(format!("{} {}", category, n)),
                description: None,
                in_stock: (config.in_stock_fraction < 1.0).then(|| rng.random::<f64>() < config.in_stock_fraction),
            };
            catalog.insert(item, features)?;
            clusters.insert(id.clone(), cluster);
            latents.insert(id.clone(), latent);
            by_type_cluster.entry((t_idx, cluster)).or_default().push(id);
        }
    }

    let type_index: HashMap<&str, usize> = config
        .product_types
        .iter()
        .enumerate()
        .map(|(i, t)| (t.name.as_str(), i))
        .collect();
    let templates_by_size: Vec<Vec<&OutfitTemplate>> = (2..=5)
        .map(|n| config.templates.iter().filter(|t| t.size() == n).collect())
        .collect();

    // Popularity weights inside each (type, cluster) group: 1 / (rank + 1)^skew.
    let weights = |len: usize| -> Vec<f64> {
        (0..len).map(|r| 1.0 / ((r + 1) as f64).powf(config.styling_skew)).collect()
    };

    let mut outfits = Vec::with_capacity(config.total_outfits());
    for (size_idx, &count) in config.outfit_counts_by_size.iter().enumerate() {
        let size = size_idx + 2;
        for _ in 0..count {
            let types: Vec<usize> = if config.templates.is_empty() {
                let mut all: Vec<usize> = (0..config.product_types.len()).collect();
                all.shuffle(&mut rng);
                all.truncate(size);
                all
            } else {
                let template = templates_by_size[size_idx].choose(&mut rng).ok_or_else(|| {
                    Error::Config(format!("no template of size {size} for {count} requested outfits"))
                })?;
                std::iter::once(&template.hero_type)
                    .chain(&template.styling_types)
                    .map(|t| type_index[t.as_str()])
                    .collect()
            };
            let cluster = rng.random_range(0..config.n_style_clusters);
            let mut members: Vec<String> = Vec::with_capacity(size);
            for (slot, &t) in types.iter().enumerate() {
                let pool = by_type_cluster.get(&(t, cluster)).ok_or_else(|| {
                    Error::Config(format!(
                        "no {} items in cluster {cluster}; raise n_items_per_type",
                        config.product_types[t].name
                    ))
                })?;
                let candidates: Vec<&String> = pool.iter().filter(|id| !members.contains(id)).collect();
                if candidates.is_empty() {
                    return Err(Error::Config("not enough items per cluster for the template".into()));
                }
                let chosen = if slot == 0 {
                    candidates[rng.random_range(0..candidates.len())]
                } else {
                    let w = WeightedIndex::new(weights(candidates.len())).expect("positive weights");
                    candidates[w.sample(&mut rng)]
                };
                members.push(chosen.clone());
            }
            let hero = members.remove(0);
            outfits.push(Outfit::positive(hero, members));
        }
    }

    Ok(SynthDataset {
        catalog,
        outfits,
        clusters,
        latents,
    })
}

/// Token -> vector table read from a whitespace-separated word-vector file.
#[derive(Debug, Clone, Default)]
pub struct WordVectors {
    pub table: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn get(&self, token: &str) -> Option<&Vec<f64>> {
        self.table.get(token)
    }

    /// Element-wise mean of the vectors of every known token in `category`.
    pub fn resolve(&self, category: &str) -> Result<Vec<f64>> {
        let vectors: Vec<&Vec<f64>> = category
            .split(|c: char| c.is_whitespace() || c == '-' || c == '_' || c == '&' || c == ',')
            .filter(|t| !t.is_empty())
            .filter_map(|t| self.table.get(&t.to_lowercase()).or_else(|| self.table.get(t)))
            .collect();
        if vectors.is_empty() {
            return Err(Error::UnresolvedCategory(category.to_string()));
        }
        let mut mean = vec![0.0; CATEGORY_DIM];
        for v in &vectors {
            for (m, x) in mean.iter_mut().zip(v.iter()) {
                *m += x;
            }
        }
        let n = vectors.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(mean)
    }

    /// As [`Self::resolve`], falling back to the zero vector with a warning.
    pub fn resolve_or_zero(&self, category: &str) -> Vec<f64> {
        self.resolve(category).unwrap_or_else(|_| {
            log::warn!("no word vector for category {category:?}; using zeros");
            vec![0.0; CATEGORY_DIM]
        })
    }
}

pub fn load_word_vectors(path: impl AsRef<Path>) -> Result<WordVectors> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table = HashMap::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Malformed {
                line: line_no + 1,
                message: format!("token {token:?}: {e}"),
            })?;
        if values.len() != CATEGORY_DIM {
            return Err(Error::VectorDimension {
                token: token.to_string(),
                expected: CATEGORY_DIM,
                actual: values.len(),
            });
        }
        table.insert(token.to_string(), values);
    }
    Ok(WordVectors { table })
}
