//! Synthetic end-to-end run: generate, split, train, evaluate.
//!
//! `cargo run --release -p outfit-core --example pipeline -- [epochs] [seed]`

use std::time::Instant;

use outfit_core::embedder::Arch;
use outfit_core::sampler::build_styling_distribution;
use outfit_core::splitter::{split_dataset, SplitOptions};
use outfit_core::synth::{generate_synthetic_dataset, SynthConfig};
use outfit_core::trainer::{evaluate_auc, train, with_negatives, TrainingConfig};

fn main() -> outfit_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(30);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let start = Instant::now();
    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    let mut synth = SynthConfig { seed, ..SynthConfig::default() };
    if let Some(c) = env("CLUSTERS") {
        synth.n_style_clusters = c as usize;
    }
    if let Some(k) = env("LATENT") {
        synth.latent_dim = k as usize;
    }
    let data = generate_synthetic_dataset(&synth)?;
    println!("{} items, {} outfits ({:.1}s)", data.catalog.len(), data.outfits.len(), start.elapsed().as_secs_f64());

    let split = split_dataset(&data.catalog, &data.outfits, SplitOptions::default(), seed)?;
    println!(
        "{} communities, modularity {:.3}, item ratio {:.3}, train {} / test {} outfits, dropped {}, leaked {}",
        split.louvain.community_count(),
        split.louvain.modularity,
        split.assignment.achieved_ratio,
        split.train.len(),
        split.test.len(),
        split.assignment.dropped,
        split.leaked_items().len()
    );

    let cluster_of = |o: &outfit_core::Outfit| data.clusters[&o.hero_id];
    let train_clusters: std::collections::HashSet<usize> = split.train.iter().map(cluster_of).collect();
    let unseen = split.test.iter().filter(|o| !train_clusters.contains(&cluster_of(o))).count();
    println!("test outfits from clusters absent in train: {unseen}/{}", split.test.len());

    let dist = build_styling_distribution(&split.train, &data.catalog)?;
    let test = with_negatives(&split.test, &data.catalog, seed + 1)?;
    let mut config = TrainingConfig { epochs, seed, ..TrainingConfig::default() };
    if let Some(d) = env("DROPOUT") {
        config.dropout = d;
    }
    if env("RECAL") == Some(0.0) {
        config.recalibrate_batch_norm = false;
    }
    if let Some(b) = env("BATCH") {
        config.batch_size = b as usize;
    }
    if let Some(lr) = env("LR") {
        config.adam.learning_rate = lr;
    }
    let (params, _) = train(&config, &data.catalog, &split.train, &dist, Arch { seed, ..Arch::default() }, Some(&test))?;
    let auc = evaluate_auc(&params, &data.catalog, &test, config.features)?;
    let table = params.embed_catalog(&data.catalog, config.features)?;
    let alive = (0..table.styling.ncols()).filter(|&j| table.styling.column(j).iter().any(|&v| v > 0.0)).count();
    let mean_nz = table.styling.iter().filter(|&&v| v > 0.0).count() as f64 / table.styling.nrows() as f64;
    println!("alive output units {alive}, mean active per item {mean_nz:.1}");
    println!("test AUC {auc:.4}, total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
