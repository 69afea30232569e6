//! Template-constrained outfit completion.
//!
//! Given a hero item and a template, styling slots are filled one product
//! type at a time, keeping the best `beam_width` partial outfits at every
//! step. The search is repeated for every distinct ordering of the styling
//! types and the best complete outfit overall wins.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::Group;
use crate::catalog::{Catalog, Label, Outfit, OutfitSource, OutfitTemplate};
use crate::embedder::{CatalogEmbeddings, EmbedderParams};
use crate::error::{Error, Result};
use crate::scorer::{outfit_logit, outfit_logit_with, Normalization, ScoredOutfit};

pub const DEFAULT_BEAM_WIDTH: usize = 3;
pub const DEFAULT_EXHAUSTIVE_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub embedding: Vec<f64>,
}

/// A completion problem with embeddings already resolved: the hero's hero-role
/// embedding and, per styling slot in template order, the candidate items
/// with their styling-role embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub hero_id: String,
    pub hero: Vec<f64>,
    pub slot_types: Vec<String>,
    pub pools: BTreeMap<String, Vec<Candidate>>,
}

impl Instance {
    fn pool(&self, product_type: &str) -> &[Candidate] {
        self.pools.get(product_type).map_or(&[], Vec::as_slice)
    }

    fn validate(&self) -> Result<()> {
        for t in &self.slot_types {
            if self.pool(t).iter().all(|c| c.id == self.hero_id) {
                return Err(Error::Generation(format!("no {t} items available")));
            }
        }
        Ok(())
    }

    /// Number of full combinations, ignoring duplicate exclusion.
    pub fn combinations(&self) -> u64 {
        self.slot_types
            .iter()
            .fold(1u64, |acc, t| acc.saturating_mul(self.pool(t).len() as u64))
    }

    fn logit_of(&self, chosen: &[&Candidate], norm: Normalization) -> f64 {
        let mut z: Vec<&[f64]> = Vec::with_capacity(chosen.len() + 1);
        z.push(&self.hero);
        z.extend(chosen.iter().map(|c| c.embedding.as_slice()));
        outfit_logit_with(&z, norm).expect("at least two equal-width embeddings")
    }

    fn result(&self, chosen: &[&Candidate]) -> ScoredOutfit {
        let mut styling: Vec<String> = chosen.iter().map(|c| c.id.clone()).collect();
        styling.sort();
        let logit = self.logit_of(chosen, Normalization::PairCount);
        ScoredOutfit::new(
            Outfit {
                hero_id: self.hero_id.clone(),
                styling_ids: styling,
                label: crate::catalog::Label::Positive,
                source: OutfitSource::Generated,
            },
            logit,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamOptions {
    pub beam_width: usize,
    /// How partial outfits are scored while searching; final outfits are
    /// always compared by the normalised logit.
    pub partial: Normalization,
}

impl Default for BeamOptions {
    fn default() -> Self {
        BeamOptions {
            beam_width: DEFAULT_BEAM_WIDTH,
            partial: Normalization::PairCount,
        }
    }
}

/// Lexicographic order of sorted id tuples.
fn sorted_ids(chosen: &[&Candidate]) -> Vec<String> {
    let mut ids: Vec<String> = chosen.iter().map(|c| c.id.clone()).collect();
    ids.sort();
    ids
}

/// Higher logit first, then the smaller sorted id tuple.
fn better(a_logit: f64, a_ids: &[String], b_logit: f64, b_ids: &[String]) -> Ordering {
    b_logit.total_cmp(&a_logit).then_with(|| a_ids.cmp(b_ids))
}

/// Distinct orderings of a multiset of types, in lexicographic order.
pub fn distinct_permutations(types: &[String]) -> Vec<Vec<String>> {
    let mut current: Vec<String> = types.to_vec();
    current.sort();
    let mut out = vec![current.clone()];
    // Standard next-permutation.
    loop {
        let n = current.len();
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| current[j] > current[i - 1]).expect("exists");
        current.swap(i - 1, j);
        current[i..].reverse();
        out.push(current.clone());
    }
    out
}

struct State<'a> {
    chosen: Vec<&'a Candidate>,
    ids: Vec<String>,
    logit: f64,
}

pub fn beam_search(instance: &Instance, options: BeamOptions) -> Result<ScoredOutfit> {
    if options.beam_width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    instance.validate()?;
    let mut best: Option<(f64, Vec<String>, Vec<&Candidate>)> = None;
    for order in distinct_permutations(&instance.slot_types) {
        let mut beam: Vec<State> = vec![State {
            chosen: Vec::new(),
            ids: Vec::new(),
            logit: 0.0,
        }];
        for slot_type in &order {
            let mut next: Vec<State> = Vec::new();
            let mut seen: HashSet<Vec<String>> = HashSet::new();
            for state in &beam {
                for cand in instance.pool(slot_type) {
                    if cand.id == instance.hero_id || state.chosen.iter().any(|c| c.id == cand.id) {
                        continue;
                    }
                    let mut chosen = state.chosen.clone();
                    chosen.push(cand);
                    let ids = sorted_ids(&chosen);
                    // Skip states already reached through another fill order
                    // of same-type slots.
                    if !seen.insert(ids.clone()) {
                        continue;
                    }
                    let logit = instance.logit_of(&chosen, options.partial);
                    next.push(State { chosen, ids, logit });
                }
            }
            if next.is_empty() {
                return Err(Error::Generation(format!("not enough distinct {slot_type} items")));
            }
            next.sort_by(|a, b| better(a.logit, &a.ids, b.logit, &b.ids));
            next.truncate(options.beam_width);
            beam = next;
        }
        for state in beam {
            let logit = instance.logit_of(&state.chosen, Normalization::PairCount);
            let replace = match &best {
                None => true,
                Some((bl, bids, _)) => better(logit, &state.ids, *bl, bids) == Ordering::Less,
            };
            if replace {
                best = Some((logit, state.ids, state.chosen));
            }
        }
    }
    let (_, _, chosen) = best.expect("at least one ordering");
    Ok(instance.result(&chosen))
}

/// True optimum over every combination of distinct items.
pub fn exhaustive_search(instance: &Instance, cap: u64) -> Result<ScoredOutfit> {
    instance.validate()?;
    let combos = instance.combinations();
    if combos > cap {
        return Err(Error::Generation(format!("{combos} combinations exceed the cap of {cap}")));
    }
    let pools: Vec<&[Candidate]> = instance.slot_types.iter().map(|t| instance.pool(t)).collect();
    let mut best: Option<(f64, Vec<String>, Vec<&Candidate>)> = None;
    let mut idx = vec![0usize; pools.len()];
    'outer: loop {
        let chosen: Vec<&Candidate> = idx.iter().zip(&pools).map(|(&i, p)| &p[i]).collect();
        let ids = sorted_ids(&chosen);
        let distinct = ids.windows(2).all(|w| w[0] != w[1]) && !ids.contains(&instance.hero_id);
        if distinct {
            let logit = instance.logit_of(&chosen, Normalization::PairCount);
            let replace = match &best {
                None => true,
                Some((bl, bids, _)) => better(logit, &ids, *bl, bids) == Ordering::Less,
            };
            if replace {
                best = Some((logit, ids, chosen));
            }
        }
        for k in (0..idx.len()).rev() {
            idx[k] += 1;
            if idx[k] < pools[k].len() {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
    let (_, _, chosen) = best.ok_or_else(|| Error::Generation("no combination of distinct items".into()))?;
    Ok(instance.result(&chosen))
}

/// Infer-mode embeddings keyed by (item index, hero flag), computed on demand.
pub struct EmbeddingCache<'a> {
    params: &'a EmbedderParams,
    catalog: &'a Catalog,
    cache: HashMap<(usize, bool), Vec<f64>>,
}

impl<'a> EmbeddingCache<'a> {
    pub fn new(params: &'a EmbedderParams, catalog: &'a Catalog) -> Self {
        EmbeddingCache {
            params,
            catalog,
            cache: HashMap::new(),
        }
    }

    /// Embeds all missing `indices` in one batch.
    pub fn warm(&mut self, indices: &[usize], hero: bool) -> Result<()> {
        let missing: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| !self.cache.contains_key(&(i, hero)))
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        let emb = self
            .params
            .embed_items(self.catalog, &missing, hero, crate::embedder::FeatureMask::ALL)?;
        for (row, i) in missing.into_iter().enumerate() {
            self.cache.insert((i, hero), emb.row(row).to_vec());
        }
        Ok(())
    }

    pub fn get(&mut self, index: usize, hero: bool) -> Result<&[f64]> {
        self.warm(&[index], hero)?;
        Ok(&self.cache[&(index, hero)])
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }
}

/// Resolves a hero and template against a pool catalogue.
pub fn build_instance(
    hero_id: &str,
    template: &OutfitTemplate,
    catalog: &Catalog,
    pool: &Catalog,
    cache: &mut EmbeddingCache<'_>,
) -> Result<Instance> {
    build_instance_with(hero_id, template, catalog, pool, |indices, hero| {
        cache.warm(indices, hero)?;
        indices.iter().map(|&i| cache.get(i, hero).map(<[f64]>::to_vec)).collect()
    })
}

/// Same as [`build_instance`], reading precomputed catalogue embeddings.
pub fn instance_from_embeddings(
    hero_id: &str,
    template: &OutfitTemplate,
    catalog: &Catalog,
    pool: &Catalog,
    embeddings: &CatalogEmbeddings,
) -> Result<Instance> {
    build_instance_with(hero_id, template, catalog, pool, |indices, hero| {
        Ok(indices.iter().map(|&i| embeddings.get(i, hero).to_vec()).collect())
    })
}

fn build_instance_with(
    hero_id: &str,
    template: &OutfitTemplate,
    catalog: &Catalog,
    pool: &Catalog,
    mut embed: impl FnMut(&[usize], bool) -> Result<Vec<Vec<f64>>>,
) -> Result<Instance> {
    let hero_idx = catalog.require(hero_id)?;
    let hero_item = catalog.item(hero_idx);
    if hero_item.product_type != template.hero_type {
        return Err(Error::Generation(format!(
            "hero {hero_id} is {} but the template needs {}",
            hero_item.product_type, template.hero_type
        )));
    }
    let hero = embed(&[hero_idx], true)?.remove(0);
    let mut pools = BTreeMap::new();
    for t in &template.styling_types {
        if pools.contains_key(t) {
            continue;
        }
        let ids = pool_ids(pool, t, hero_id)?;
        let indices: Vec<usize> = ids.iter().map(|id| catalog.require(id)).collect::<Result<_>>()?;
        let candidates = ids
            .iter()
            .zip(embed(&indices, false)?)
            .map(|(id, embedding)| Candidate {
                id: id.to_string(),
                embedding,
            })
            .collect();
        pools.insert(t.clone(), candidates);
    }
    Ok(Instance {
        hero_id: hero_id.to_string(),
        hero,
        slot_types: template.styling_types.clone(),
        pools,
    })
}

/// Sorted ids of pool items of one type, hero excluded.
fn pool_ids<'p>(pool: &'p Catalog, product_type: &str, hero_id: &str) -> Result<Vec<&'p str>> {
    let mut ids: Vec<&str> = pool
        .items()
        .iter()
        .filter(|it| it.product_type == product_type && it.id != hero_id)
        .map(|it| it.id.as_str())
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Generation(format!("the pool has no {product_type} items")));
    }
    Ok(ids)
}

pub fn complete_outfit_beam(
    hero_id: &str,
    template: &OutfitTemplate,
    catalog: &Catalog,
    pool: &Catalog,
    params: &EmbedderParams,
    options: BeamOptions,
) -> Result<ScoredOutfit> {
    let mut cache = EmbeddingCache::new(params, catalog);
    beam_search(&build_instance(hero_id, template, catalog, pool, &mut cache)?, options)
}

pub fn exhaustive_complete(
    hero_id: &str,
    template: &OutfitTemplate,
    catalog: &Catalog,
    pool: &Catalog,
    params: &EmbedderParams,
    cap: u64,
) -> Result<ScoredOutfit> {
    let mut cache = EmbeddingCache::new(params, catalog);
    exhaustive_search(&build_instance(hero_id, template, catalog, pool, &mut cache)?, cap)
}

/// In-stock items (items without an availability flag count as in stock).
pub fn default_pool(catalog: &Catalog) -> Catalog {
    catalog.filter(|it| it.is_in_stock())
}

/// Per hero product type: canonical template -> count over the positives.
pub type TemplateFrequencies = BTreeMap<String, BTreeMap<OutfitTemplate, usize>>;

pub fn template_frequencies(outfits: &[Outfit], catalog: &Catalog) -> Result<TemplateFrequencies> {
    let mut freq: TemplateFrequencies = BTreeMap::new();
    for outfit in outfits.iter().filter(|o| o.label == crate::catalog::Label::Positive) {
        let template = OutfitTemplate::of_outfit(outfit, catalog)?.canonical();
        *freq
            .entry(template.hero_type.clone())
            .or_default()
            .entry(template)
            .or_insert(0) += 1;
    }
    Ok(freq)
}

/// Most common template for a hero type; ties go to the smallest template.
pub fn most_frequent(freq: &TemplateFrequencies, hero_type: &str) -> Option<(OutfitTemplate, usize)> {
    freq.get(hero_type)?
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(t, c)| (t.clone(), *c))
}

/// Score an arbitrary outfit with infer-mode embeddings.
pub fn score_outfit(outfit: &Outfit, catalog: &Catalog, cache: &mut EmbeddingCache<'_>) -> Result<ScoredOutfit> {
    let mut z = Vec::with_capacity(outfit.size());
    for (k, id) in outfit.item_ids().enumerate() {
        z.push(cache.get(catalog.require(id)?, k == 0)?.to_vec());
    }
    Ok(ScoredOutfit::new(outfit.clone(), outfit_logit(&z)?))
}

/// One pool item of the right type per slot, uniformly at random, never
/// repeating an item.
pub fn random_completion(hero_id: &str, template: &OutfitTemplate, pool: &Catalog, rng: &mut impl Rng) -> Result<Outfit> {
    let mut styling: Vec<String> = Vec::with_capacity(template.styling_types.len());
    for t in &template.styling_types {
        let ids: Vec<&str> = pool_ids(pool, t, hero_id)?
            .into_iter()
            .filter(|id| !styling.iter().any(|s| s == id))
            .collect();
        let pick = ids
            .choose(rng)
            .ok_or_else(|| Error::Generation(format!("not enough distinct {t} items")))?;
        styling.push(pick.to_string());
    }
    Ok(Outfit {
        hero_id: hero_id.to_string(),
        styling_ids: styling,
        label: Label::Positive,
        source: OutfitSource::Generated,
    })
}

/// An outfit shown to raters. `pair` links a test outfit to the control
/// outfit built from the same hero and template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbOutfit {
    pub id: String,
    pub pair: usize,
    pub group: Group,
    pub template: OutfitTemplate,
    pub outfit: Outfit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbPlan {
    pub templates: usize,
    pub outfits_per_template: usize,
    pub beam: BeamOptions,
    pub seed: u64,
}

/// The `templates` most frequent templates overall; ties by template order.
pub fn top_templates(freq: &TemplateFrequencies, n: usize) -> Vec<(OutfitTemplate, usize)> {
    let mut all: Vec<(OutfitTemplate, usize)> = freq
        .values()
        .flat_map(|m| m.iter().map(|(t, c)| (t.clone(), *c)))
        .collect();
    all.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(n);
    all
}

/// Paired outfits for a rating study: for each of the most frequent
/// templates, distinct random heroes are completed once by beam search
/// (test) and once uniformly at random (control). Outfit ids are assigned
/// after a seeded shuffle, so they do not reveal the group.
pub fn ab_test_outfits(
    plan: AbPlan,
    catalog: &Catalog,
    pool: &Catalog,
    embeddings: &CatalogEmbeddings,
    freq: &TemplateFrequencies,
) -> Result<Vec<AbOutfit>> {
    let templates = top_templates(freq, plan.templates);
    if templates.len() < plan.templates {
        return Err(Error::Generation(format!(
            "only {} templates available, {} requested",
            templates.len(),
            plan.templates
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut out = Vec::new();
    for (template, _) in templates {
        let mut heroes: Vec<&str> = pool
            .items()
            .iter()
            .filter(|it| it.product_type == template.hero_type)
            .map(|it| it.id.as_str())
            .collect();
        heroes.sort();
        if heroes.len() < plan.outfits_per_template {
            return Err(Error::Generation(format!(
                "{} heroes of type {} available, {} requested",
                heroes.len(),
                template.hero_type,
                plan.outfits_per_template
            )));
        }
        let (chosen, _) = heroes.partial_shuffle(&mut rng, plan.outfits_per_template);
        for hero in chosen.iter() {
            let instance = instance_from_embeddings(hero, &template, catalog, pool, embeddings)?;
            let pair = out.len() / 2;
            let test = beam_search(&instance, plan.beam)?.outfit;
            let control = random_completion(hero, &template, pool, &mut rng)?;
            for (group, outfit) in [(Group::Test, test), (Group::Control, control)] {
                out.push(AbOutfit {
                    id: String::new(),
                    pair,
                    group,
                    template: template.clone(),
                    outfit,
                });
            }
        }
    }
    out.shuffle(&mut rng);
    for (k, o) in out.iter_mut().enumerate() {
        o.id = format!("outfit-{:04}", k + 1);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::test_support::catalog_of;
    use crate::catalog::{type_multiset, validate_outfit};
    use crate::embedder::Arch;
    use crate::synth::{generate_synthetic_dataset, SynthConfig};
    use proptest::prelude::*;

    fn cand(id: &str, e: &[f64]) -> Candidate {
        Candidate {
            id: id.into(),
            embedding: e.to_vec(),
        }
    }

    fn instance(hero: &[f64], slots: &[&str], pools: Vec<(&str, Vec<Candidate>)>) -> Instance {
        Instance {
            hero_id: "H".into(),
            hero: hero.to_vec(),
            slot_types: slots.iter().map(|s| s.to_string()).collect(),
            pools: pools.into_iter().map(|(t, c)| (t.to_string(), c)).collect(),
        }
    }

    #[test]
    fn permutations_are_distinct() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(distinct_permutations(&s(&["a", "b", "c"])).len(), 6);
        assert_eq!(distinct_permutations(&s(&["a", "a", "b"])).len(), 3);
        assert_eq!(distinct_permutations(&s(&["x"])).len(), 1);
    }

    #[test]
    fn single_slot_is_argmax() {
        let inst = instance(&[1.0, 0.0], &["Shoes"], vec![("Shoes", vec![cand("a", &[0.2, 1.0]), cand("b", &[0.7, 0.0]), cand("c", &[0.7, 3.0])])]);
        let beam = beam_search(&inst, BeamOptions { beam_width: 1, ..BeamOptions::default() }).unwrap();
        let exact = exhaustive_search(&inst, DEFAULT_EXHAUSTIVE_CAP).unwrap();
        // b and c tie on the dot product; b wins by id.
        assert_eq!(beam.outfit.styling_ids, vec!["b"]);
        assert_eq!(beam, exact);
    }

    #[test]
    fn greedy_trap_is_escaped_by_exhaustive_search() {
        // Slot 1: `a` looks best next to the hero but pairs badly with slot 2.
        let inst = instance(
            &[1.0, 0.0, 0.0],
            &["Tops", "Shoes"],
            vec![
                ("Tops", vec![cand("a", &[2.0, 0.0, -3.0]), cand("b", &[1.0, 1.0, 0.0])]),
                ("Shoes", vec![cand("c", &[0.0, 0.0, 1.0]), cand("d", &[0.0, 2.0, 0.0])]),
            ],
        );
        // Pair sums: a+c = 2+0-3 = -1, a+d = 2+0+0 = 2, b+c = 1+0+0 = 1, b+d = 1+0+2 = 3.
        let exact = exhaustive_search(&inst, DEFAULT_EXHAUSTIVE_CAP).unwrap();
        assert_eq!(exact.outfit.styling_ids, vec!["b", "d"]);
        assert!((exact.logit - 3.0 / 6.0).abs() < 1e-15);
        // Width 1, Tops first: `a` (dot 2 with the hero), then `d` -> 2.
        // Shoes first: `c` and `d` tie at 0 so `c` wins by id, then `b` -> 1.
        let narrow = beam_search(&inst, BeamOptions { beam_width: 1, ..BeamOptions::default() }).unwrap();
        assert_eq!(narrow.outfit.styling_ids, vec!["a", "d"]);
        assert!((narrow.logit - 2.0 / 6.0).abs() < 1e-15);
        let wide = beam_search(&inst, BeamOptions { beam_width: 4, ..BeamOptions::default() }).unwrap();
        assert_eq!(wide, exact);
    }

    #[test]
    fn errors_on_missing_pools_and_cap() {
        let inst = instance(&[1.0], &["Shoes"], vec![]);
        assert!(matches!(beam_search(&inst, BeamOptions::default()), Err(Error::Generation(_))));
        let inst = instance(&[1.0], &["Shoes", "Bags"], vec![("Shoes", vec![cand("a", &[1.0]), cand("b", &[1.0])]), ("Bags", vec![cand("c", &[1.0]), cand("d", &[1.0])])]);
        assert!(exhaustive_search(&inst, 3).is_err());
        assert!(exhaustive_search(&inst, 4).is_ok());
    }

    fn random_instance(seed: u64, slots: usize, pool: usize) -> Instance {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = |rng: &mut rand_chacha::ChaCha8Rng| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let types = ["Tops", "Shoes", "Bags", "Jeans"];
        let mut pools = Vec::new();
        for t in types.iter().take(slots) {
            let c: Vec<Candidate> = (0..pool).map(|k| cand(&format!("{t}{k}"), &v(&mut rng))).collect();
            pools.push((*t, c));
        }
        let hero = v(&mut rng);
        instance(&hero, &types[..slots], pools)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn beam_never_beats_exhaustive(seed in 0u64..10_000, slots in 1usize..4, pool in 1usize..6, width in 1usize..4) {
            let inst = random_instance(seed, slots, pool);
            let exact = exhaustive_search(&inst, DEFAULT_EXHAUSTIVE_CAP).unwrap();
            let beam = beam_search(&inst, BeamOptions { beam_width: width, ..BeamOptions::default() }).unwrap();
            prop_assert!(beam.logit <= exact.logit);
            prop_assert_eq!(beam_search(&inst, BeamOptions { beam_width: width, ..BeamOptions::default() }).unwrap(), beam);
            let unpruned = beam_search(&inst, BeamOptions { beam_width: usize::MAX, ..BeamOptions::default() }).unwrap();
            prop_assert_eq!(&unpruned, &exact);
            let raw = beam_search(&inst, BeamOptions { beam_width: usize::MAX, partial: Normalization::None }).unwrap();
            prop_assert_eq!(raw, exact);
        }
    }

    #[test]
    fn template_counts_and_most_frequent() {
        let catalog = catalog_of(&[("D1", "Dress"), ("D2", "Dress"), ("S1", "Shoes"), ("B1", "Bag"), ("T1", "Top"), ("J1", "Jeans")]);
        let outfits = vec![
            Outfit::positive("D1", ["S1"]),
            Outfit::positive("D2", ["S1"]),
            Outfit::positive("D1", ["B1", "S1"]),
            Outfit::positive("T1", ["J1", "S1"]),
            Outfit::positive("T1", ["S1", "J1"]),
        ];
        let freq = template_frequencies(&outfits, &catalog).unwrap();
        let (t, c) = most_frequent(&freq, "Dress").unwrap();
        assert_eq!((t.to_string().as_str(), c), ("Dress | Shoes", 2));
        assert_eq!(most_frequent(&freq, "Top").unwrap().1, 2);
        assert_eq!(freq["Top"].len(), 1);
        assert!(most_frequent(&freq, "Coat").is_none());
    }

    #[test]
    fn generated_outfits_follow_the_template() {
        let config = SynthConfig {
            outfit_counts_by_size: [0; 4],
            ..SynthConfig::small(4, 8, 2)
        };
        let data = generate_synthetic_dataset(&config).unwrap();
        let params = EmbedderParams::init(Arch {
            seed: 3,
            ..Arch::with_widths(8, 8, 4, 8)
        })
        .unwrap();
        let types = data.catalog.product_types();
        let hero = data.catalog.items().iter().find(|i| i.product_type == types[0]).unwrap().id.clone();
        let template = OutfitTemplate::new(types[0].clone(), [types[1].clone(), types[2].clone(), types[3].clone()]).unwrap();
        let pool = default_pool(&data.catalog);
        let a = complete_outfit_beam(&hero, &template, &data.catalog, &pool, &params, BeamOptions::default()).unwrap();
        let b = complete_outfit_beam(&hero, &template, &data.catalog, &pool, &params, BeamOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(validate_outfit(&a.outfit, &data.catalog).is_empty());
        let want: BTreeMap<String, usize> = std::iter::once(&template.hero_type)
            .chain(&template.styling_types)
            .map(|t| (t.clone(), 1))
            .collect();
        assert_eq!(type_multiset(&a.outfit, &data.catalog), want);
        let exact = exhaustive_complete(&hero, &template, &data.catalog, &pool, &params, DEFAULT_EXHAUSTIVE_CAP).unwrap();
        assert!(a.logit <= exact.logit);
        let wrong = OutfitTemplate::new(types[1].clone(), [types[2].clone()]).unwrap();
        assert!(complete_outfit_beam(&hero, &wrong, &data.catalog, &pool, &params, BeamOptions::default()).is_err());

        let mut cache = EmbeddingCache::new(&params, &data.catalog);
        let rescored = score_outfit(&a.outfit, &data.catalog, &mut cache).unwrap();
        assert_eq!(rescored.logit, a.logit);
    }

    #[test]
    fn precomputed_embeddings_give_the_same_completion() {
        let data = generate_synthetic_dataset(&SynthConfig {
            outfit_counts_by_size: [0; 4],
            ..SynthConfig::small(3, 40, 2)
        })
        .unwrap();
        let params = EmbedderParams::init(Arch::with_widths(8, 8, 4, 8)).unwrap();
        let table = params.embed_catalog(&data.catalog, crate::embedder::FeatureMask::ALL).unwrap();
        let types = data.catalog.product_types();
        let template = OutfitTemplate::new(types[0].clone(), [types[1].clone(), types[2].clone()]).unwrap();
        let hero = data.catalog.items().iter().find(|i| i.product_type == types[0]).unwrap().id.clone();
        let pool = default_pool(&data.catalog);
        let direct = complete_outfit_beam(&hero, &template, &data.catalog, &pool, &params, BeamOptions::default()).unwrap();
        let instance = instance_from_embeddings(&hero, &template, &data.catalog, &pool, &table).unwrap();
        assert_eq!(beam_search(&instance, BeamOptions::default()).unwrap(), direct);
    }

    #[test]
    fn ab_outfits_are_paired_by_hero_and_template() {
        let data = generate_synthetic_dataset(&SynthConfig {
            outfit_counts_by_size: [60, 40, 0, 0],
            ..SynthConfig::small(4, 60, 3)
        })
        .unwrap();
        let params = EmbedderParams::init(Arch::with_widths(8, 8, 4, 8)).unwrap();
        let table = params.embed_catalog(&data.catalog, crate::embedder::FeatureMask::ALL).unwrap();
        let freq = template_frequencies(&data.outfits, &data.catalog).unwrap();
        let pool = default_pool(&data.catalog);
        let plan = AbPlan {
            templates: 3,
            outfits_per_template: 5,
            beam: BeamOptions::default(),
            seed: 9,
        };
        let outfits = ab_test_outfits(plan, &data.catalog, &pool, &table, &freq).unwrap();
        assert_eq!(outfits.len(), 30);
        assert_eq!(outfits.iter().filter(|o| o.group == Group::Test).count(), 15);
        let ids: HashSet<&str> = outfits.iter().map(|o| o.id.as_str()).collect();
        assert_eq!(ids.len(), 30);
        let mut pairs: BTreeMap<usize, Vec<&AbOutfit>> = BTreeMap::new();
        for o in &outfits {
            pairs.entry(o.pair).or_default().push(o);
            assert!(validate_outfit(&o.outfit, &data.catalog).is_empty());
            assert_eq!(OutfitTemplate::of_outfit(&o.outfit, &data.catalog).unwrap().canonical(), o.template);
        }
        assert_eq!(pairs.len(), 15);
        for members in pairs.values() {
            assert_eq!(members.len(), 2);
            assert_ne!(members[0].group, members[1].group);
            assert_eq!(members[0].outfit.hero_id, members[1].outfit.hero_id);
            assert_eq!(members[0].template, members[1].template);
        }
        assert_eq!(ab_test_outfits(plan, &data.catalog, &pool, &table, &freq).unwrap(), outfits);
        let too_many = AbPlan { templates: 100, ..plan };
        assert!(ab_test_outfits(too_many, &data.catalog, &pool, &table, &freq).is_err());
    }
}
