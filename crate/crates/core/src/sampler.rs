//! Negative outfits by type-preserving, frequency-matched replacement of
//! styling items.
//!
//! Styling replacements are drawn from the empirical styling distribution
//! of the positive set, so frequently used styling items are as common in
//! negatives as in positives and cannot be memorised as a shortcut.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::catalog::{Catalog, Label, Outfit, OutfitSource};
use crate::error::{Error, Result};

pub const MAX_REDRAWS: usize = 10;

#[derive(Debug, Clone)]
struct TypeDistribution {
    /// Sorted by item id.
    items: Vec<(String, f64)>,
    sampler: WeightedIndex<f64>,
}

/// Per product type: styling items and their empirical probabilities.
#[derive(Debug, Clone)]
pub struct StylingDistribution {
    types: BTreeMap<String, TypeDistribution>,
    item_type: HashMap<String, String>,
}

impl StylingDistribution {
    pub fn product_types(&self) -> impl Iterator<Item = &str> {
        self.types.keys().map(String::as_str)
    }

    /// `(item id, probability)` pairs of one type, sorted by id.
    pub fn items_of(&self, product_type: &str) -> Option<&[(String, f64)]> {
        self.types.get(product_type).map(|d| d.items.as_slice())
    }

    pub fn probability(&self, item_id: &str) -> f64 {
        self.item_type
            .get(item_id)
            .and_then(|t| self.types[t].items.iter().find(|(id, _)| id == item_id))
            .map_or(0.0, |(_, p)| *p)
    }

    fn draw(&self, product_type: &str, rng: &mut impl Rng) -> Option<&str> {
        let dist = self.types.get(product_type)?;
        Some(dist.items[dist.sampler.sample(rng)].0.as_str())
    }
}

/// Counts styling occurrences per item, normalised within each product type.
/// Hero occurrences are ignored.
pub fn build_styling_distribution(outfits: &[Outfit], catalog: &Catalog) -> Result<StylingDistribution> {
    if outfits.is_empty() {
        return Err(Error::Empty("positive outfit set"));
    }
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for outfit in outfits {
        if outfit.label != Label::Positive {
            return Err(Error::InvalidOutfit("styling distribution needs positive outfits".into()));
        }
        for id in &outfit.styling_ids {
            let item = catalog.get(id).ok_or_else(|| Error::UnknownItem(id.clone()))?;
            *counts
                .entry(item.product_type.clone())
                .or_default()
                .entry(id.clone())
                .or_insert(0) += 1;
        }
    }
    let mut types = BTreeMap::new();
    let mut item_type = HashMap::new();
    for (ptype, per_item) in counts {
        let total: usize = per_item.values().sum();
        let items: Vec<(String, f64)> = per_item
            .into_iter()
            .map(|(id, c)| (id, c as f64 / total as f64))
            .collect();
        for (id, _) in &items {
            item_type.insert(id.clone(), ptype.clone());
        }
        let sampler = WeightedIndex::new(items.iter().map(|(_, p)| *p)).expect("positive counts");
        types.insert(ptype, TypeDistribution { items, sampler });
    }
    Ok(StylingDistribution { types, item_type })
}

/// A negative outfit plus the styling slots that could not avoid repeating
/// an item (original or another slot) within the redraw budget.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSample {
    pub outfit: Outfit,
    pub degenerate_slots: Vec<usize>,
}

impl NegativeSample {
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate_slots.is_empty()
    }
}

/// Replaces each styling item by a draw of the same product type, keeping the hero.
pub fn negative_sample(outfit: &Outfit, dist: &StylingDistribution, catalog: &Catalog, seed: u64) -> Result<NegativeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    negative_sample_with(outfit, dist, catalog, &mut rng)
}

pub fn negative_sample_with(
    outfit: &Outfit,
    dist: &StylingDistribution,
    catalog: &Catalog,
    rng: &mut impl Rng,
) -> Result<NegativeSample> {
    let mut styling: Vec<String> = Vec::with_capacity(outfit.styling_ids.len());
    let mut degenerate_slots = Vec::new();
    for (slot, original) in outfit.styling_ids.iter().enumerate() {
        let ptype = &catalog
            .get(original)
            .ok_or_else(|| Error::UnknownItem(original.clone()))?
            .product_type;
        let mut attempts = 0;
        let chosen = loop {
            let draw = dist
                .draw(ptype, rng)
                .ok_or_else(|| Error::Config(format!("styling distribution has no {ptype} items")))?;
            let collides = draw == original || draw == outfit.hero_id || styling.iter().any(|s| s == draw);
            attempts += 1;
            if !collides {
                break draw.to_string();
            }
            if attempts >= MAX_REDRAWS {
                // Only the original-item collision is tolerated; duplicates
                // inside the outfit would break its invariants.
                let dup_free = draw != outfit.hero_id && !styling.iter().any(|s| s == draw);
                let pick = if dup_free { draw.to_string() } else { original.clone() };
                degenerate_slots.push(slot);
                break pick;
            }
        };
        styling.push(chosen);
    }
    Ok(NegativeSample {
        outfit: Outfit {
            hero_id: outfit.hero_id.clone(),
            styling_ids: styling,
            label: Label::Negative,
            source: OutfitSource::NegativeSampled,
        },
        degenerate_slots,
    })
}

/// One negative per positive, seeded per outfit index.
pub fn negatives_for(outfits: &[Outfit], dist: &StylingDistribution, catalog: &Catalog, seed: u64) -> Result<Vec<Outfit>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    outfits
        .iter()
        .map(|o| negative_sample_with(o, dist, catalog, &mut rng).map(|n| n.outfit))
        .collect()
}
