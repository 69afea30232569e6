//! Catalogue and outfit types plus line-delimited JSON ingestion.
//!
//! A catalogue holds the items of one department together with their
//! precomputed feature vectors. Outfits reference items by id.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TEXT_DIM: usize = 1024;
pub const VISUAL_DIM: usize = 512;
pub const CATEGORY_DIM: usize = 50;

pub const MIN_OUTFIT_SIZE: usize = 2;
pub const MAX_OUTFIT_SIZE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Department {
    /// Womenswear.
    WW,
    /// Menswear.
    MW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub product_type: String,
    pub category: String,
    pub department: Department,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub season: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Availability for generation pools; absent means in stock.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_stock: Option<bool>,
}

impl Item {
    pub fn is_in_stock(&self) -> bool {
        self.in_stock.unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemFeatures {
    pub text: Vec<f64>,
    pub visual: Vec<f64>,
    pub category: Vec<f64>,
}

impl ItemFeatures {
    pub fn zeros() -> Self {
        ItemFeatures {
            text: vec![0.0; TEXT_DIM],
            visual: vec![0.0; VISUAL_DIM],
            category: vec![0.0; CATEGORY_DIM],
        }
    }
}

/// Items of a single department keyed by id, in file order.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    items: Vec<Item>,
    features: Vec<ItemFeatures>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an item, enforcing unique ids, feature lengths and a single department.
    pub fn insert(&mut self, item: Item, features: ItemFeatures) -> Result<usize> {
        self.insert_at_line(item, features, self.items.len() + 1)
    }

    fn insert_at_line(&mut self, item: Item, features: ItemFeatures, line: usize) -> Result<usize> {
        if item.id.is_empty() {
            return Err(Error::Malformed {
                line,
                message: "empty id".into(),
            });
        }
        if item.product_type.is_empty() || item.category.is_empty() {
            return Err(Error::Malformed {
                line,
                message: format!("item {}: product_type and category must be non-empty", item.id),
            });
        }
        for (field, values, expected) in [
            ("text_embedding", &features.text, TEXT_DIM),
            ("visual_embedding", &features.visual, VISUAL_DIM),
            ("category_embedding", &features.category, CATEGORY_DIM),
        ] {
            if values.len() != expected {
                return Err(Error::FeatureLength {
                    line,
                    id: item.id.clone(),
                    field,
                    expected,
                    actual: values.len(),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Malformed {
                    line,
                    message: format!("item {}: non-finite value in `{field}`", item.id),
                });
            }
        }
        if let Some(first) = self.items.first() {
            if first.department != item.department {
                return Err(Error::MixedDepartment(format!(
                    "line {line}: item {} is {:?}, catalogue is {:?}",
                    item.id, item.department, first.department
                )));
            }
        }
        if self.index.contains_key(&item.id) {
            return Err(Error::DuplicateId { line, id: item.id });
        }
        let idx = self.items.len();
        self.index.insert(item.id.clone(), idx);
        self.items.push(item);
        self.features.push(features);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn department(&self) -> Option<Department> {
        self.items.first().map(|i| i.department)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.index_of(id).map(|i| &self.items[i])
    }

    pub fn features_of(&self, id: &str) -> Option<&ItemFeatures> {
        self.index_of(id).map(|i| &self.features[i])
    }

    pub fn item(&self, idx: usize) -> &Item {
        &self.items[idx]
    }

    pub fn features(&self, idx: usize) -> &ItemFeatures {
        &self.features[idx]
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id).ok_or_else(|| Error::UnknownItem(id.to_string()))
    }

    /// Distinct product types in first-seen order.
    pub fn product_types(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.items
            .iter()
            .filter(|i| seen.insert(i.product_type.as_str()))
            .map(|i| i.product_type.clone())
            .collect()
    }

    /// Sub-catalogue containing only items accepted by `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&Item) -> bool) -> Catalog {
        let mut out = Catalog::new();
        for (item, feats) in self.items.iter().zip(&self.features) {
            if keep(item) {
                out.insert(item.clone(), feats.clone())
                    .expect("subset of a valid catalogue is valid");
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    #[serde(flatten)]
    item: Item,
    text_embedding: Vec<f64>,
    visual_embedding: Vec<f64>,
    category_embedding: Vec<f64>,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

/// Reads a `catalog.jsonl` file: one item object per line.
pub fn load_catalog(path: impl AsRef<Path>) -> Result<Catalog> {
    let path = path.as_ref();
    let mut catalog = Catalog::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ItemRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let features = ItemFeatures {
            text: record.text_embedding,
            visual: record.visual_embedding,
            category: record.category_embedding,
        };
        catalog.insert_at_line(record.item, features, line_no)?;
    }
    Ok(catalog)
}

pub fn save_catalog(catalog: &Catalog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (item, feats) in catalog.items.iter().zip(&catalog.features) {
        let record = ItemRecord {
            item: item.clone(),
            text_embedding: feats.text.clone(),
            visual_embedding: feats.visual.clone(),
            category_embedding: feats.category.clone(),
        };
        let line = serde_json::to_string(&record).expect("item records serialise");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    #[default]
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutfitSource {
    #[default]
    Dataset,
    Generated,
    NegativeSampled,
}

/// One hero item plus 1–4 styling items.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Outfit {
    #[serde(rename = "hero")]
    pub hero_id: String,
    #[serde(rename = "styling")]
    pub styling_ids: Vec<String>,
    #[serde(default)]
    pub label: Label,
    #[serde(default)]
    pub source: OutfitSource,
}

pub type OutfitSet = Vec<Outfit>;

impl Outfit {
    pub fn positive(hero: impl Into<String>, styling: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Outfit {
            hero_id: hero.into(),
            styling_ids: styling.into_iter().map(Into::into).collect(),
            label: Label::Positive,
            source: OutfitSource::Dataset,
        }
    }

    /// Total item count N.
    pub fn size(&self) -> usize {
        1 + self.styling_ids.len()
    }

    /// Hero first, then styling items in order.
    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.hero_id.as_str()).chain(self.styling_ids.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Size(usize),
    HeroAsStyling,
    DuplicateStyling(String),
    UnknownItem(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Size(n) => write!(f, "outfit size {n} outside [2, 5]"),
            Violation::HeroAsStyling => f.write_str("hero appears as styling item"),
            Violation::DuplicateStyling(id) => write!(f, "duplicate styling item {id}"),
            Violation::UnknownItem(id) => write!(f, "unknown item {id}"),
        }
    }
}

/// Every violated outfit invariant, in a stable order. Empty means valid.
pub fn validate_outfit(outfit: &Outfit, catalog: &Catalog) -> Vec<Violation> {
    let mut violations = Vec::new();
    let n = outfit.size();
    if !(MIN_OUTFIT_SIZE..=MAX_OUTFIT_SIZE).contains(&n) {
        violations.push(Violation::Size(n));
    }
    if outfit.styling_ids.contains(&outfit.hero_id) {
        violations.push(Violation::HeroAsStyling);
    }
    let mut seen = HashSet::new();
    let mut reported = HashSet::new();
    for id in &outfit.styling_ids {
        if !seen.insert(id) && reported.insert(id) {
            violations.push(Violation::DuplicateStyling(id.clone()));
        }
    }
    let mut unknown = HashSet::new();
    for id in outfit.item_ids() {
        if !catalog.contains(id) && unknown.insert(id) {
            violations.push(Violation::UnknownItem(id.to_string()));
        }
    }
    violations
}

#[derive(Deserialize)]
struct OutfitRecord {
    hero: String,
    styling: Vec<String>,
    #[serde(default)]
    label: Option<Label>,
    #[serde(default)]
    source: Option<OutfitSource>,
}

/// Reads an `outfits.jsonl` file and checks every outfit against `catalog`.
pub fn load_outfits(path: impl AsRef<Path>, catalog: &Catalog) -> Result<OutfitSet> {
    let path = path.as_ref();
    let mut outfits = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: OutfitRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let outfit = Outfit {
            hero_id: record.hero,
            styling_ids: record.styling,
            label: record.label.unwrap_or_default(),
            source: record.source.unwrap_or_default(),
        };
        if let Some(v) = validate_outfit(&outfit, catalog).into_iter().next() {
            return Err(match v {
                Violation::Size(n) => Error::OutfitSize(n),
                Violation::UnknownItem(id) => Error::UnknownItem(id),
                other => Error::InvalidOutfit(format!("line {line_no}: {other}")),
            });
        }
        outfits.push(outfit);
    }
    Ok(outfits)
}

pub fn save_outfits(outfits: &[Outfit], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for outfit in outfits {
        let line = serde_json::to_string(outfit).expect("outfits serialise");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Hero product type plus an ordered list of styling product types.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutfitTemplate {
    pub hero_type: String,
    pub styling_types: Vec<String>,
}

impl OutfitTemplate {
    pub fn new(hero_type: impl Into<String>, styling: impl IntoIterator<Item = impl Into<String>>) -> Result<Self> {
        let template = OutfitTemplate {
            hero_type: hero_type.into(),
            styling_types: styling.into_iter().map(Into::into).collect(),
        };
        let n = template.size();
        if !(MIN_OUTFIT_SIZE..=MAX_OUTFIT_SIZE).contains(&n) {
            return Err(Error::OutfitSize(n));
        }
        Ok(template)
    }

    pub fn size(&self) -> usize {
        1 + self.styling_types.len()
    }

    /// Styling types sorted, so templates compare as multisets.
    pub fn canonical(&self) -> OutfitTemplate {
        let mut styling_types = self.styling_types.clone();
        styling_types.sort();
        OutfitTemplate {
            hero_type: self.hero_type.clone(),
            styling_types,
        }
    }

    /// Template realised by an existing outfit.
    pub fn of_outfit(outfit: &Outfit, catalog: &Catalog) -> Result<OutfitTemplate> {
        let type_of = |id: &str| -> Result<String> {
            Ok(catalog
                .get(id)
                .ok_or_else(|| Error::UnknownItem(id.to_string()))?
                .product_type
                .clone())
        };
        Ok(OutfitTemplate {
            hero_type: type_of(&outfit.hero_id)?,
            styling_types: outfit
                .styling_ids
                .iter()
                .map(|id| type_of(id))
                .collect::<Result<_>>()?,
        })
    }
}

impl fmt::Display for OutfitTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.hero_type)?;
        for t in &self.styling_types {
            write!(f, " | {t}")?;
        }
        Ok(())
    }
}

/// Product-type multiset of an outfit, as a sorted count map.
pub fn type_multiset(outfit: &Outfit, catalog: &Catalog) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for id in outfit.item_ids() {
        if let Some(item) = catalog.get(id) {
            *counts.entry(item.product_type.clone()).or_insert(0) += 1;
        }
    }
    counts
}
