use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use outfit_core::embedder::{CatalogEmbeddings, FeatureMask};
use outfit_core::generator::{default_pool, template_frequencies, AbOutfit, TemplateFrequencies};
use outfit_core::{Catalog, EmbedderParams, Outfit};

use crate::ratings::RatingStore;

/// Everything the read endpoints need, immutable once built.
#[derive(Debug)]
pub struct Snapshot {
    pub catalog: Catalog,
    pub params: EmbedderParams,
    pub features: FeatureMask,
    pub embeddings: CatalogEmbeddings,
    pub templates: TemplateFrequencies,
    /// In-stock items, the generation pool.
    pub pool: Catalog,
}

impl Snapshot {
    /// Embeds the whole catalogue in both roles and counts templates over
    /// `outfits`.
    pub fn build(catalog: Catalog, params: EmbedderParams, outfits: &[Outfit], features: FeatureMask) -> outfit_core::Result<Self> {
        let embeddings = params.embed_catalog(&catalog, features)?;
        let templates = template_frequencies(outfits, &catalog)?;
        let pool = default_pool(&catalog);
        Ok(Snapshot {
            catalog,
            params,
            features,
            embeddings,
            templates,
            pool,
        })
    }
}

/// Outfits shown to raters and the per-user presentation order.
#[derive(Debug, Default)]
pub struct EvaluationSet {
    outfits: Vec<AbOutfit>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl EvaluationSet {
    pub fn new(outfits: Vec<AbOutfit>, seed: u64) -> Self {
        let index = outfits.iter().enumerate().map(|(i, o)| (o.id.clone(), i)).collect();
        EvaluationSet { outfits, index, seed }
    }

    pub fn get(&self, id: &str) -> Option<&AbOutfit> {
        self.index.get(id).map(|&i| &self.outfits[i])
    }

    pub fn len(&self) -> usize {
        self.outfits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outfits.is_empty()
    }

    /// A shuffle of all outfits seeded by hash(user id, session seed).
    pub fn order_for(&self, user: &str) -> Vec<&AbOutfit> {
        let mut hasher = Sha256::new();
        hasher.update(user.as_bytes());
        hasher.update([0u8]);
        hasher.update(self.seed.to_le_bytes());
        let digest = hasher.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut order: Vec<&AbOutfit> = self.outfits.iter().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }
}

pub struct AppState {
    snapshot: RwLock<Arc<Snapshot>>,
    pub evaluation: EvaluationSet,
    pub ratings: Mutex<RatingStore>,
}

impl AppState {
    pub fn new(snapshot: Snapshot, evaluation: EvaluationSet, ratings: RatingStore) -> Self {
        AppState {
            snapshot: RwLock::new(Arc::new(snapshot)),
            evaluation,
            ratings: Mutex::new(ratings),
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Swaps in new params and catalogue; requests already running keep the
    /// snapshot they started with.
    pub fn reload(&self, snapshot: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(snapshot);
    }
}
