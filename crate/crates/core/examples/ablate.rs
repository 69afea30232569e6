//! Feature ablation on a scaled-down synthetic catalogue.
//!
//! Knobs via env: ITEMS, SCALE, CLUSTERS, WIDTH, EPOCHS, BATCH, REPEATS,
//! TEXTNOISE, VISNOISE, CATNOISE.

use std::time::Instant;

use outfit_core::embedder::Arch;
use outfit_core::splitter::{split_dataset, SplitOptions};
use outfit_core::synth::{generate_synthetic_dataset, SynthConfig};
use outfit_core::trainer::{ablation_study, TrainingConfig};

fn main() -> outfit_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok()).unwrap_or(d);
    let scale = env("SCALE", 0.3);
    let base = SynthConfig::default();
    let synth = SynthConfig {
        n_items_per_type: env("ITEMS", 100.0) as usize,
        n_style_clusters: env("CLUSTERS", 20.0) as usize,
        outfit_counts_by_size: base.outfit_counts_by_size.map(|c| (c as f64 * scale).round() as usize),
        ..base.clone()
    };
    let mut synth = synth;
    synth.visual.noise = env("VISNOISE", base.visual.noise);
    synth.category.noise = env("CATNOISE", base.category.noise);
    synth.text.noise = env("TEXTNOISE", base.text.noise);
    let start = Instant::now();
    let data = generate_synthetic_dataset(&synth)?;
    let split = split_dataset(&data.catalog, &data.outfits, SplitOptions::default(), 0)?;
    println!("{} items, train {} / test {}", data.catalog.len(), split.train.len(), split.test.len());
    let w = env("WIDTH", 64.0) as usize;
    let arch = Arch::with_widths(w, w, 16, w);
    let config = TrainingConfig {
        epochs: env("EPOCHS", 30.0) as usize,
        batch_size: env("BATCH", 8.0) as usize,
        ..TrainingConfig::default()
    };
    let report = ablation_study(&config, &arch, &data.catalog, &split.train, &split.test, env("REPEATS", 5.0) as usize)?;
    print!("{}", report.to_tsv());
    println!("{:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
