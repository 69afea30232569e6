//! `outfit`: batch entry points for the outfit compatibility engine.
//!
//! Every subcommand reads and writes a data directory:
//!
//! ```text
//! catalog.jsonl     items with text/visual/category features
//! outfits.jsonl     positive outfits
//! clusters.json     planted style cluster per item (synthetic data only)
//! split.jsonl       train/test side per item
//! model.json        embedder checkpoint
//! history.json      per-epoch training statistics
//! evaluation.jsonl  paired outfits for a rating study
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use outfit_core::analysis::{ab_report, format_ab_report, RatingRecord};
use outfit_core::catalog::{load_catalog, load_outfits, save_catalog, save_outfits};
use outfit_core::embedder::{load_checkpoint, save_checkpoint, Arch, FeatureMask};
use outfit_core::generator::{
    ab_test_outfits, beam_search, default_pool, instance_from_embeddings, most_frequent, template_frequencies, AbOutfit,
    AbPlan, BeamOptions, DEFAULT_BEAM_WIDTH,
};
use outfit_core::sampler::build_styling_distribution;
use outfit_core::splitter::{assign_outfits, load_split, save_split, split_dataset, SplitOptions};
use outfit_core::synth::{generate_synthetic_dataset, SynthConfig};
use outfit_core::trainer::{ablation_study, evaluate_auc, train, with_negatives, TrainingConfig};
use outfit_core::{Catalog, OutfitSet};
use outfit_service::{AppState, EvaluationSet, RatingStore, Snapshot};

#[derive(Parser)]
#[command(name = "outfit", version, about = "Outfit compatibility: synthesise, split, train, evaluate, generate, serve")]
struct Cli {
    /// Data directory shared by all subcommands.
    #[arg(long, global = true, default_value = "data")]
    data: PathBuf,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalogue and outfit set.
    Synth {
        /// SynthConfig JSON; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Louvain train/test split with no shared items.
    Split {
        #[arg(long, default_value_t = 0.76)]
        ratio: f64,
    },
    /// Train the embedder on the train side of the split.
    Train(TrainArgs),
    /// AUC on the test side with fresh frequency-matched negatives.
    Eval {
        #[arg(long, default_value = "all")]
        features: FeatureMask,
    },
    /// Train every feature subset several times and report mean test AUC.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Complete outfits for the given hero items.
    Generate {
        /// Hero ids, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        heroes: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
        beam_width: usize,
    },
    /// Build paired beam-search and random outfits for a rating study,
    /// or analyse collected ratings.
    Abtest {
        #[arg(long, default_value_t = 3)]
        templates: usize,
        #[arg(long, default_value_t = 34)]
        outfits_per_template: usize,
        #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
        beam_width: usize,
        /// Analyse this rating log instead of building outfits.
        #[arg(long)]
        analyze: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Rating log; defaults to ratings.jsonl in the data directory.
        #[arg(long)]
        ratings: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// TrainingConfig JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    features: Option<FeatureMask>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Branch and hidden widths: text,visual,category,hidden.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> Result<TrainingConfig> {
        let mut config = match &self.config {
            Some(path) => TrainingConfig::from_json_file(path)?,
            None => TrainingConfig::default(),
        };
        config.seed = seed;
        if let Some(f) = self.features {
            config.features = f;
        }
        if let Some(e) = self.epochs {
            config.epochs = e;
        }
        if let Some(b) = self.batch_size {
            config.batch_size = b;
        }
        config.validate()?;
        Ok(config)
    }

    fn arch(&self, seed: u64) -> Result<Arch> {
        let base = match self.widths.as_deref() {
            None => Arch::default(),
            Some(&[t, v, c, h]) => Arch::with_widths(t, v, c, h),
            Some(other) => bail!("--widths needs 4 values (text,visual,category,hidden), got {}", other.len()),
        };
        Ok(Arch { seed, ..base })
    }
}

struct Files<'a>(&'a Path);

impl Files<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    fn catalog(&self) -> Result<Catalog> {
        let path = self.path("catalog.jsonl");
        load_catalog(&path).with_context(|| format!("loading {}", path.display()))
    }

    fn outfits(&self, catalog: &Catalog) -> Result<OutfitSet> {
        let path = self.path("outfits.jsonl");
        load_outfits(&path, catalog).with_context(|| format!("loading {}", path.display()))
    }

    /// Train and test outfits under the saved split.
    fn split(&self, catalog: &Catalog) -> Result<(OutfitSet, OutfitSet)> {
        let outfits = self.outfits(catalog)?;
        let path = self.path("split.jsonl");
        let split = load_split(&path).with_context(|| format!("loading {} (run `outfit split` first)", path.display()))?;
        let (train, test, _) = assign_outfits(&outfits, &split)?;
        Ok((train, test))
    }

    fn model(&self) -> Result<outfit_core::EmbedderParams> {
        let path = self.path("model.json");
        load_checkpoint(&path).with_context(|| format!("loading {} (run `outfit train` first)", path.display()))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        writeln!(out, "{}", serde_json::to_string(row)?)?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), n + 1))?);
    }
    Ok(rows)
}

fn run(cli: Cli) -> Result<()> {
    let files = Files(&cli.data);
    let seed = cli.seed;
    match cli.command {
        Command::Synth { config } => {
            let mut config = match config {
                Some(path) => SynthConfig::from_json_file(&path)?,
                None => SynthConfig::default(),
            };
            config.seed = seed;
            let data = generate_synthetic_dataset(&config)?;
            std::fs::create_dir_all(&cli.data).with_context(|| format!("creating {}", cli.data.display()))?;
            save_catalog(&data.catalog, files.path("catalog.jsonl"))?;
            save_outfits(&data.outfits, files.path("outfits.jsonl"))?;
            let clusters: BTreeMap<&String, &usize> = data.clusters.iter().collect();
            write_json(&files.path("clusters.json"), &clusters)?;
            println!("{} items, {} outfits -> {}", data.catalog.len(), data.outfits.len(), cli.data.display());
        }
        Command::Split { ratio } => {
            let catalog = files.catalog()?;
            let outfits = files.outfits(&catalog)?;
            let options = SplitOptions {
                target_ratio: ratio,
                ..SplitOptions::default()
            };
            let split = split_dataset(&catalog, &outfits, options, seed)?;
            save_split(&split.assignment, files.path("split.jsonl"))?;
            let leaked = split.leaked_items();
            println!("communities: {}", split.louvain.community_count());
            println!("modularity: {:.4}", split.louvain.modularity);
            println!("item ratio: {:.4} (target {ratio})", split.assignment.achieved_ratio);
            println!("outfits: train {} / test {} / dropped {}", split.train.len(), split.test.len(), split.assignment.dropped);
            println!("items in both train and test outfits: {}", leaked.len());
            if !leaked.is_empty() {
                bail!("invariant violated: {} items leak across the split", leaked.len());
            }
        }
        Command::Train(args) => {
            let config = args.config(seed)?;
            let catalog = files.catalog()?;
            let (train_set, test_set) = files.split(&catalog)?;
            let dist = build_styling_distribution(&train_set, &catalog)?;
            let validation = if test_set.is_empty() {
                None
            } else {
                Some(with_negatives(&test_set, &catalog, seed.wrapping_add(1))?)
            };
            let (params, history) = train(&config, &catalog, &train_set, &dist, args.arch(seed)?, validation.as_deref())?;
            save_checkpoint(&params, files.path("model.json"))?;
            write_json(&files.path("history.json"), &serde_json::json!({ "config": config, "history": history }))?;
            for e in &history.epochs {
                let auc = e.validation_auc.map_or("-".into(), |a| format!("{a:.4}"));
                println!("epoch {:>3}  loss {:.4}  test auc {auc}  ({:.1}s)", e.epoch, e.loss, e.seconds);
            }
        }
        Command::Eval { features } => {
            let catalog = files.catalog()?;
            let (_, test_set) = files.split(&catalog)?;
            if test_set.is_empty() {
                bail!("the split has no test outfits");
            }
            let params = files.model()?;
            let labelled = with_negatives(&test_set, &catalog, seed.wrapping_add(1))?;
            let auc = evaluate_auc(&params, &catalog, &labelled, features)?;
            println!("test outfits {}  auc {auc:.4}", test_set.len());
        }
        Command::Ablate { train: args, repeats } => {
            let config = args.config(seed)?;
            let catalog = files.catalog()?;
            let (train_set, test_set) = files.split(&catalog)?;
            let report = ablation_study(&config, &args.arch(seed)?, &catalog, &train_set, &test_set, repeats)?;
            print!("{}", report.to_tsv());
        }
        Command::Generate { heroes, beam_width } => {
            let catalog = files.catalog()?;
            let outfits = files.outfits(&catalog)?;
            let params = files.model()?;
            let embeddings = params.embed_catalog(&catalog, FeatureMask::ALL)?;
            let freq = template_frequencies(&outfits, &catalog)?;
            let pool = default_pool(&catalog);
            let options = BeamOptions {
                beam_width,
                ..BeamOptions::default()
            };
            for hero in &heroes {
                let item = catalog.get(hero).with_context(|| format!("unknown hero {hero:?}"))?;
                let (template, _) = most_frequent(&freq, &item.product_type)
                    .with_context(|| format!("no template known for hero type {:?}", item.product_type))?;
                let instance = instance_from_embeddings(hero, &template, &catalog, &pool, &embeddings)?;
                let best = beam_search(&instance, options)?;
                println!("{}", serde_json::to_string(&best)?);
            }
        }
        Command::Abtest {
            templates,
            outfits_per_template,
            beam_width,
            analyze,
        } => {
            if let Some(path) = analyze {
                let ratings: Vec<RatingRecord> = read_jsonl(&path)?;
                print!("{}", format_ab_report(&ab_report(&ratings)?));
                return Ok(());
            }
            let catalog = files.catalog()?;
            let outfits = files.outfits(&catalog)?;
            let params = files.model()?;
            let embeddings = params.embed_catalog(&catalog, FeatureMask::ALL)?;
            let freq = template_frequencies(&outfits, &catalog)?;
            let plan = AbPlan {
                templates,
                outfits_per_template,
                beam: BeamOptions {
                    beam_width,
                    ..BeamOptions::default()
                },
                seed,
            };
            let built = ab_test_outfits(plan, &catalog, &default_pool(&catalog), &embeddings, &freq)?;
            write_jsonl(&files.path("evaluation.jsonl"), &built)?;
            let mut per_group: BTreeMap<String, usize> = BTreeMap::new();
            for o in &built {
                *per_group.entry(format!("{:?}", o.group).to_lowercase()).or_default() += 1;
            }
            for (group, n) in per_group {
                println!("{group}: {n} outfits");
            }
        }
        Command::Serve { port, host, ratings } => {
            let catalog = files.catalog()?;
            let outfits = files.outfits(&catalog)?;
            let params = files.model()?;
            let snapshot = Snapshot::build(catalog, params, &outfits, FeatureMask::ALL)?;
            let eval_path = files.path("evaluation.jsonl");
            let shown: Vec<AbOutfit> = if eval_path.exists() { read_jsonl(&eval_path)? } else { Vec::new() };
            let ratings_path = ratings.unwrap_or_else(|| files.path("ratings.jsonl"));
            let store = RatingStore::open(&ratings_path)?;
            let state = Arc::new(AppState::new(snapshot, EvaluationSet::new(shown, seed), store));
            let addr: SocketAddr = format!("{host}:{port}").parse().with_context(|| format!("bad address {host}:{port}"))?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(outfit_service::serve(state, addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
