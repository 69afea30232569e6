//! Binary cross-entropy training of the embedder on positive outfits and
//! frequency-matched negatives, plus the feature ablation protocol.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::roc_auc;
use crate::catalog::{Catalog, ItemFeatures, Label, Outfit};
use crate::embedder::{Arch, BatchInputs, EmbedderGrads, EmbedderParams, FeatureMask, ForwardTrace, Mode};
use crate::error::{Error, Result};
use crate::sampler::{build_styling_distribution, negative_sample_with, negatives_for, StylingDistribution};
use crate::scorer::{logit_gradient, outfit_logit, sigmoid};

/// Loss and its derivative with respect to the logit, evaluated as
/// `max(x, 0) - x*y + ln(1 + e^-|x|)`.
pub fn bce_loss(logit: f64, label: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - label)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One bias-corrected update; `params` and `grads` are matched by position.
    pub fn update(&mut self, params: Vec<(String, &mut [f64])>, grads: Vec<(String, &[f64])>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameter tensors but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let correct1 = 1.0 - c.beta1.powi(self.step);
        let correct2 = 1.0 - c.beta2.powi(self.step);
        for (k, ((pname, p), (gname, g))) in params.into_iter().zip(grads).enumerate() {
            if pname != gname || p.len() != g.len() || self.m[k].len() != p.len() {
                return Err(Error::Shape(format!("gradient {gname} does not match parameter {pname}")));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                p[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

/// Which input groups the embedder sees; excluded inputs are fed as zeros.
pub type FeatureSet = FeatureMask;

impl FeatureMask {
    pub const VIS: FeatureMask = FeatureMask {
        text: false,
        visual: true,
        category: false,
        hero: false,
    };
    pub const TEXT: FeatureMask = FeatureMask {
        text: true,
        visual: false,
        category: false,
        hero: false,
    };
    pub const TEXT_VIS: FeatureMask = FeatureMask {
        text: true,
        visual: true,
        category: false,
        hero: false,
    };
    pub const TEXT_VIS_CAT: FeatureMask = FeatureMask {
        text: true,
        visual: true,
        category: true,
        hero: false,
    };

    /// The five ablation rows, smallest first.
    pub const ABLATION: [FeatureMask; 5] = [
        FeatureMask::VIS,
        FeatureMask::TEXT,
        FeatureMask::TEXT_VIS,
        FeatureMask::TEXT_VIS_CAT,
        FeatureMask::ALL,
    ];

    pub fn has_inputs(&self) -> bool {
        self.text || self.visual || self.category
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.text, "text"),
            (self.visual, "vis"),
            (self.category, "cat"),
            (self.hero, "hero"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for FeatureMask {
    type Err = Error;

    /// Parses `text+vis+cat+hero` style lists (also accepts `,` and `all`).
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(FeatureMask::ALL);
        }
        let mut mask = FeatureMask {
            text: false,
            visual: false,
            category: false,
            hero: false,
        };
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "text" => mask.text = true,
                "vis" | "visual" => mask.visual = true,
                "cat" | "category" => mask.category = true,
                "hero" => mask.hero = true,
                other => return Err(Error::Config(format!("unknown feature {other:?}"))),
            }
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeMode {
    /// New negatives for every batch.
    #[default]
    Fresh,
    /// One set of negatives drawn before training and reused each epoch.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub features: FeatureMask,
    pub epochs: usize,
    /// Positive outfits per batch; each adds one negative.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub dropout: f64,
    pub negatives: NegativeMode,
    /// Recompute batch-norm running statistics without dropout after training.
    pub recalibrate_batch_norm: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            features: FeatureMask::ALL,
            epochs: 30,
            batch_size: 64,
            adam: AdamConfig::default(),
            dropout: 0.5,
            negatives: NegativeMode::Fresh,
            recalibrate_batch_norm: true,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.features.has_inputs() {
            return Err(Error::Config("feature set must include at least one of text, vis, cat".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: TrainingConfig = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            line: e.line(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub validation_auc: Option<f64>,
    pub seconds: f64,
    /// Outfits seen (positives plus negatives).
    pub examples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Result of a forward/backward pass over a batch of labelled outfits.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: EmbedderGrads,
    pub trace: ForwardTrace,
}

fn label_value(label: Label) -> f64 {
    match label {
        Label::Positive => 1.0,
        Label::Negative => 0.0,
    }
}

/// Embeds every item of every outfit in one train-mode batch, scores each
/// outfit, and backpropagates the mean loss.
pub fn batch_loss_and_grads(
    params: &EmbedderParams,
    catalog: &Catalog,
    outfits: &[Outfit],
    features: FeatureMask,
    seed: u64,
) -> Result<BatchOutcome> {
    if outfits.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let mut rows: Vec<&ItemFeatures> = Vec::new();
    let mut hero: Vec<bool> = Vec::new();
    let mut spans = Vec::with_capacity(outfits.len());
    for outfit in outfits {
        let start = rows.len();
        for (k, id) in outfit.item_ids().enumerate() {
            rows.push(catalog.features_of(id).ok_or_else(|| Error::UnknownItem(id.to_string()))?);
            hero.push(k == 0);
        }
        spans.push(start..rows.len());
    }
    let inputs = BatchInputs::from_features(&rows, &hero, features)?;
    let (emb, trace) = params.forward(&inputs, Mode::Train, seed)?;

    let scale = 1.0 / outfits.len() as f64;
    let mut loss = 0.0;
    let mut logits = Vec::with_capacity(outfits.len());
    let mut grad = Array2::zeros(emb.raw_dim());
    for (outfit, span) in outfits.iter().zip(spans) {
        let z: Vec<Vec<f64>> = span.clone().map(|r| emb.row(r).to_vec()).collect();
        let logit = outfit_logit(&z)?;
        let (l, dl) = bce_loss(logit, label_value(outfit.label));
        loss += l * scale;
        logits.push(logit);
        for (r, g) in span.zip(logit_gradient(&z)) {
            for (dst, v) in grad.row_mut(r).iter_mut().zip(g) {
                *dst = dl * scale * v;
            }
        }
    }
    let grads = params.backward(&trace, &grad)?;
    Ok(BatchOutcome {
        loss,
        logits,
        grads,
        trace,
    })
}

/// Infer-mode logits for labelled outfits.
pub fn outfit_logits(params: &EmbedderParams, catalog: &Catalog, outfits: &[Outfit], features: FeatureMask) -> Result<Vec<f64>> {
    let table = params.embed_catalog(catalog, features)?;
    outfits
        .iter()
        .map(|o| outfit_logit(&table.outfit(catalog, o)?))
        .collect()
}

/// ROC-AUC of the model on labelled outfits.
pub fn evaluate_auc(params: &EmbedderParams, catalog: &Catalog, outfits: &[Outfit], features: FeatureMask) -> Result<f64> {
    let logits = outfit_logits(params, catalog, outfits, features)?;
    let labels: Vec<bool> = outfits.iter().map(|o| o.label == Label::Positive).collect();
    roc_auc(&logits, &labels)
}

/// Positives followed by one seeded frequency-matched negative each, with
/// the styling distribution built from these positives.
pub fn with_negatives(positives: &[Outfit], catalog: &Catalog, seed: u64) -> Result<Vec<Outfit>> {
    let dist = build_styling_distribution(positives, catalog)?;
    let mut all = positives.to_vec();
    all.extend(negatives_for(positives, &dist, catalog, seed)?);
    Ok(all)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Replaces every running mean and variance with the average batch
/// statistics over `outfits`, computed in train mode with dropout disabled.
pub fn recalibrate_batch_norm(
    params: &mut EmbedderParams,
    catalog: &Catalog,
    outfits: &[Outfit],
    features: FeatureMask,
    batch_size: usize,
) -> Result<()> {
    let probe = EmbedderParams {
        arch: Arch {
            dropout: 0.0,
            ..params.arch.clone()
        },
        ..params.clone()
    };
    let widths: Vec<usize> = params.layers().iter().map(|l| l.out_width()).collect();
    let mut means: Vec<Array1<f64>> = widths.iter().map(|&w| Array1::zeros(w)).collect();
    let mut vars = means.clone();
    let mut batches = 0.0;
    for chunk in outfits.chunks(batch_size.max(1)) {
        let mut rows: Vec<&ItemFeatures> = Vec::new();
        let mut hero = Vec::new();
        for outfit in chunk {
            for (k, id) in outfit.item_ids().enumerate() {
                rows.push(catalog.features_of(id).ok_or_else(|| Error::UnknownItem(id.to_string()))?);
                hero.push(k == 0);
            }
        }
        if rows.len() < 2 {
            continue;
        }
        let inputs = BatchInputs::from_features(&rows, &hero, features)?;
        let (_, trace) = probe.forward(&inputs, Mode::Train, 0)?;
        let n = rows.len() as f64;
        for (k, t) in trace.layers().iter().enumerate() {
            if let (Some(m), Some(v)) = (&t.batch_mean, &t.batch_var) {
                means[k] += m;
                vars[k] += &(v * (n / (n - 1.0)));
            }
        }
        batches += 1.0;
    }
    if batches == 0.0 {
        return Ok(());
    }
    for (k, layer) in params.layers_mut().into_iter().enumerate() {
        if let Some(bn) = &mut layer.norm {
            bn.running_mean = &means[k] / batches;
            bn.running_var = (&vars[k] / batches).mapv(|v| v.max(f64::MIN_POSITIVE));
        }
    }
    Ok(())
}

/// Trains a freshly initialised embedder. `validation` (labelled outfits)
/// is scored after every epoch when given.
pub fn train(
    config: &TrainingConfig,
    catalog: &Catalog,
    positives: &[Outfit],
    dist: &StylingDistribution,
    arch: Arch,
    validation: Option<&[Outfit]>,
) -> Result<(EmbedderParams, TrainHistory)> {
    config.validate()?;
    if positives.is_empty() {
        return Err(Error::Empty("positive training outfits"));
    }
    if let Some(bad) = positives.iter().find(|o| o.label != Label::Positive) {
        return Err(Error::InvalidOutfit(format!("training positives include a negative outfit with hero {}", bad.hero_id)));
    }
    let arch = Arch {
        dropout: config.dropout,
        ..arch
    };
    let mut params = EmbedderParams::init(arch)?;
    let mut history = TrainHistory::default();
    let mut adam = Adam::new(config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fixed = match config.negatives {
        NegativeMode::Fixed => Some(negatives_for(positives, dist, catalog, mix(config.seed, 1, 0))?),
        NegativeMode::Fresh => None,
    };
    let mut order: Vec<usize> = (0..positives.len()).collect();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut examples = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch: Vec<Outfit> = chunk.iter().map(|&i| positives[i].clone()).collect();
            for &i in chunk {
                let negative = match &fixed {
                    Some(set) => set[i].clone(),
                    None => negative_sample_with(&positives[i], dist, catalog, &mut rng)?.outfit,
                };
                batch.push(negative);
            }
            let outcome = batch_loss_and_grads(&params, catalog, &batch, config.features, mix(config.seed, epoch as u64 + 2, b as u64))?;
            params.update_running(&outcome.trace);
            adam.update(params.trainable_mut(), outcome.grads.tensors())?;
            loss_sum += outcome.loss * batch.len() as f64;
            examples += batch.len();
        }
        let validation_auc = match validation {
            Some(v) => {
                let mut probe = params.clone();
                if config.recalibrate_batch_norm {
                    recalibrate_batch_norm(&mut probe, catalog, positives, config.features, config.batch_size)?;
                }
                Some(evaluate_auc(&probe, catalog, v, config.features)?)
            }
            None => None,
        };
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / examples as f64,
            validation_auc,
            seconds: started.elapsed().as_secs_f64(),
            examples,
        };
        log::info!(
            "epoch {}/{}: loss {:.4}{} ({:.1}s)",
            stats.epoch,
            config.epochs,
            stats.loss,
            stats.validation_auc.map(|a| format!(", val auc {a:.4}")).unwrap_or_default(),
            stats.seconds
        );
        history.epochs.push(stats);
    }
    if config.recalibrate_batch_norm && config.epochs > 0 {
        recalibrate_batch_norm(&mut params, catalog, positives, config.features, config.batch_size)?;
    }
    Ok((params, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub features: FeatureMask,
    pub aucs: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.aucs.iter().sum::<f64>() / self.aucs.len() as f64
    }

    pub fn std_dev(&self) -> f64 {
        let n = self.aucs.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let m = self.mean();
        (self.aucs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, features: FeatureMask) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.features == features)
    }

    /// Tab-separated table: feature set, mean, standard deviation, per-run AUCs.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("features\tmean_auc\tstd_auc\truns\n");
        for row in &self.rows {
            let runs: Vec<String> = row.aucs.iter().map(|a| format!("{a:.4}")).collect();
            out.push_str(&format!("{}\t{:.4}\t{:.4}\t{}\n", row.features, row.mean(), row.std_dev(), runs.join(",")));
        }
        out
    }
}

/// Trains each ablation feature set `repeats` times (seeds `base.seed + r`)
/// and scores it on the test positives plus frequency-matched test negatives.
pub fn ablation_study(
    base: &TrainingConfig,
    arch: &Arch,
    catalog: &Catalog,
    train_positives: &[Outfit],
    test_positives: &[Outfit],
    repeats: usize,
) -> Result<AblationReport> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let dist = build_styling_distribution(train_positives, catalog)?;
    let test = with_negatives(test_positives, catalog, mix(base.seed, 0, 1))?;
    let mut report = AblationReport::default();
    for features in FeatureMask::ABLATION {
        let mut aucs = Vec::with_capacity(repeats);
        for r in 0..repeats as u64 {
            let config = TrainingConfig {
                features,
                seed: base.seed + r,
                ..base.clone()
            };
            let arch = Arch {
                seed: arch.seed + r,
                ..arch.clone()
            };
            let (params, _) = train(&config, catalog, train_positives, &dist, arch, None)?;
            let auc = evaluate_auc(&params, catalog, &test, features)?;
            log::info!("ablation {features} run {}: auc {auc:.4}", r + 1);
            aucs.push(auc);
        }
        report.rows.push(AblationRow { features, aucs });
    }
    Ok(report)
}
