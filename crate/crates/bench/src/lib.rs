//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use outfit_core::embedder::Arch;
use outfit_core::generator::{Candidate, Instance};
use outfit_core::synth::{generate_synthetic_dataset, SynthConfig, SynthDataset};
use outfit_core::EmbedderParams;

/// The default synthetic catalogue (about 2,000 items and 5,000 outfits).
pub fn dataset() -> SynthDataset {
    generate_synthetic_dataset(&SynthConfig::default()).expect("default config is valid")
}

pub fn params() -> EmbedderParams {
    EmbedderParams::init(Arch::default()).expect("default arch is valid")
}

pub fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect()
}

/// A completion instance with `slots` styling types and `pool` candidates each.
pub fn instance(slots: usize, pool: usize, dim: usize, seed: u64) -> Instance {
    let types: Vec<String> = (0..slots).map(|t| format!("type{t}")).collect();
    let mut vectors = random_vectors(1 + slots * pool, dim, seed).into_iter();
    let hero = vectors.next().expect("hero vector");
    let pools = types
        .iter()
        .map(|t| {
            let candidates = (0..pool)
                .map(|k| Candidate {
                    id: format!("{t}-{k:03}"),
                    embedding: vectors.next().expect("enough vectors"),
                })
                .collect();
            (t.clone(), candidates)
        })
        .collect();
    Instance {
        hero_id: "hero".into(),
        hero,
        slot_types: types,
        pools,
    }
}
