//! Item embedder.
//!
//! Text, visual and category features each pass through their own dense
//! block; the three outputs and the hero flag are concatenated and passed
//! through two further dense blocks to give the style embedding. Every block
//! is `affine -> batch norm -> ReLU -> dropout`, with batch norm and dropout
//! individually switchable. Hero and styling embeddings of an item come from
//! the same network, differing only in the flag input.

mod checkpoint;
mod layer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layer::{BatchNorm, Dense, DenseGrads, LayerTrace};

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ItemFeatures, Outfit, CATEGORY_DIM, TEXT_DIM, VISUAL_DIM};
use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 256;

/// Items per forward call when embedding a whole catalogue in infer mode.
const INFER_CHUNK: usize = 512;

/// Per-block switches, in network order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerLayer {
    pub text: bool,
    pub visual: bool,
    pub category: bool,
    pub hidden: bool,
    pub output: bool,
}

impl PerLayer {
    pub const fn all(on: bool) -> Self {
        PerLayer {
            text: on,
            visual: on,
            category: on,
            hidden: on,
            output: on,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Arch {
    pub text_in: usize,
    pub visual_in: usize,
    pub category_in: usize,
    pub text_width: usize,
    pub visual_width: usize,
    pub category_width: usize,
    pub hidden_width: usize,
    pub output_width: usize,
    pub batch_norm: PerLayer,
    pub dropout_layers: PerLayer,
    pub dropout: f64,
    pub momentum: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            text_in: TEXT_DIM,
            visual_in: VISUAL_DIM,
            category_in: CATEGORY_DIM,
            text_width: 256,
            visual_width: 256,
            category_width: 32,
            hidden_width: 256,
            output_width: EMBEDDING_DIM,
            batch_norm: PerLayer::all(true),
            // No dropout on the embedding itself: it would add multiplicative
            // noise directly to every pairwise dot product.
            dropout_layers: PerLayer {
                output: false,
                ..PerLayer::all(true)
            },
            dropout: 0.5,
            momentum: 0.9,
            eps: 1e-5,
            seed: 0,
        }
    }
}

impl Arch {
    /// Branch and trunk widths `(text, visual, category, hidden)` with defaults elsewhere.
    pub fn with_widths(text: usize, visual: usize, category: usize, hidden: usize) -> Self {
        Arch {
            text_width: text,
            visual_width: visual,
            category_width: category,
            hidden_width: hidden,
            ..Arch::default()
        }
    }

    pub fn concat_width(&self) -> usize {
        self.text_width + self.visual_width + self.category_width + 1
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.text_in,
            self.visual_in,
            self.category_in,
            self.text_width,
            self.visual_width,
            self.category_width,
            self.hidden_width,
            self.output_width,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("all embedder dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.eps <= 0.0 {
            return Err(Error::Config("batch-norm momentum must be in [0,1), eps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Names of the five blocks in forward order.
pub const LAYER_NAMES: [&str; 5] = ["text", "visual", "category", "hidden", "output"];

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    pub arch: Arch,
    pub text: Dense,
    pub visual: Dense,
    pub category: Dense,
    pub hidden: Dense,
    pub output: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderGrads {
    pub text: DenseGrads,
    pub visual: DenseGrads,
    pub category: DenseGrads,
    pub hidden: DenseGrads,
    pub output: DenseGrads,
}

/// Feature matrices for one batch, one row per item.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub text: Array2<f64>,
    pub visual: Array2<f64>,
    pub category: Array2<f64>,
    pub hero: Array1<f64>,
}

/// Which inputs reach the network; masked inputs are fed as zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub text: bool,
    pub visual: bool,
    pub category: bool,
    pub hero: bool,
}

impl FeatureMask {
    pub const ALL: FeatureMask = FeatureMask {
        text: true,
        visual: true,
        category: true,
        hero: true,
    };
}

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask::ALL
    }
}

impl BatchInputs {
    pub fn from_features(features: &[&ItemFeatures], hero_flags: &[bool], mask: FeatureMask) -> Result<Self> {
        if features.len() != hero_flags.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} hero flags",
                features.len(),
                hero_flags.len()
            )));
        }
        let rows = |pick: fn(&ItemFeatures) -> &Vec<f64>, enabled: bool| -> Result<Array2<f64>> {
            let width = features.first().map_or(0, |f| pick(f).len());
            let mut m = Array2::zeros((features.len(), width));
            if enabled {
                for (mut row, f) in m.outer_iter_mut().zip(features) {
                    let v = pick(f);
                    if v.len() != width {
                        return Err(Error::Shape("ragged feature rows".into()));
                    }
                    row.assign(&ndarray::ArrayView1::from(v.as_slice()));
                }
            }
            Ok(m)
        };
        Ok(BatchInputs {
            text: rows(|f| &f.text, mask.text)?,
            visual: rows(|f| &f.visual, mask.visual)?,
            category: rows(|f| &f.category, mask.category)?,
            hero: hero_flags
                .iter()
                .map(|&h| if h && mask.hero { 1.0 } else { 0.0 })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.hero.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hero.is_empty()
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub text: LayerTrace,
    pub visual: LayerTrace,
    pub category: LayerTrace,
    pub hidden: LayerTrace,
    pub output: LayerTrace,
}

fn dense(out: usize, input: usize, norm: bool, dropout: bool, arch: &Arch, rng: &mut ChaCha8Rng) -> Dense {
    let std = (2.0 / input as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Dense {
        weight: Array2::from_shape_simple_fn((out, input), || normal.sample(rng)),
        bias: Array1::zeros(out),
        norm: norm.then(|| BatchNorm::new(out, arch.momentum, arch.eps)),
        dropout,
    }
}

impl EmbedderParams {
    /// He-normal weights (variance 2/fan_in), zero biases, identity batch norm.
    pub fn init(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let bn = arch.batch_norm;
        let dr = arch.dropout_layers;
        Ok(EmbedderParams {
            text: dense(arch.text_width, arch.text_in, bn.text, dr.text, &arch, &mut rng),
            visual: dense(arch.visual_width, arch.visual_in, bn.visual, dr.visual, &arch, &mut rng),
            category: dense(arch.category_width, arch.category_in, bn.category, dr.category, &arch, &mut rng),
            hidden: dense(arch.hidden_width, arch.concat_width(), bn.hidden, dr.hidden, &arch, &mut rng),
            output: dense(arch.output_width, arch.hidden_width, bn.output, dr.output, &arch, &mut rng),
            arch,
        })
    }

    pub fn layers(&self) -> [&Dense; 5] {
        [&self.text, &self.visual, &self.category, &self.hidden, &self.output]
    }

    pub fn layers_mut(&mut self) -> [&mut Dense; 5] {
        [
            &mut self.text,
            &mut self.visual,
            &mut self.category,
            &mut self.hidden,
            &mut self.output,
        ]
    }

    pub fn output_dim(&self) -> usize {
        self.output.out_width()
    }

    /// Trainable tensors (weight, bias, gamma, beta per block) as flat slices.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (name, layer) in LAYER_NAMES.iter().zip(self.layers_mut()) {
            out.push((format!("{name}.weight"), layer.weight.as_slice_mut().expect("standard layout")));
            out.push((format!("{name}.bias"), layer.bias.as_slice_mut().expect("standard layout")));
            if let Some(bn) = &mut layer.norm {
                out.push((format!("{name}.gamma"), bn.gamma.as_slice_mut().expect("standard layout")));
                out.push((format!("{name}.beta"), bn.beta.as_slice_mut().expect("standard layout")));
            }
        }
        out
    }

    fn check_inputs(&self, inputs: &BatchInputs) -> Result<()> {
        let b = inputs.len();
        let expect = [
            ("text", &inputs.text, self.arch.text_in),
            ("visual", &inputs.visual, self.arch.visual_in),
            ("category", &inputs.category, self.arch.category_in),
        ];
        for (name, m, width) in expect {
            if m.nrows() != b || m.ncols() != width {
                return Err(Error::Shape(format!(
                    "{name} input is {}x{}, expected {b}x{width}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        Ok(())
    }

    /// Pure forward pass. Train mode uses batch statistics and seeded
    /// dropout; running statistics are left untouched (see [`Self::embed_batch`]).
    pub fn forward(&self, inputs: &BatchInputs, mode: Mode, seed: u64) -> Result<(Array2<f64>, ForwardTrace)> {
        if inputs.is_empty() {
            return Err(Error::Empty("embedding batch"));
        }
        if mode == Mode::Train && inputs.len() < 2 {
            return Err(Error::Shape("train-mode batch norm needs at least 2 items".into()));
        }
        self.check_inputs(inputs)?;
        let train = mode == Mode::Train;
        let rate = self.arch.dropout;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let text = self.text.forward(inputs.text.view(), train, rate, &mut rng);
        let visual = self.visual.forward(inputs.visual.view(), train, rate, &mut rng);
        let category = self.category.forward(inputs.category.view(), train, rate, &mut rng);

        let b = inputs.len();
        let (wt, wv, wc) = (self.arch.text_width, self.arch.visual_width, self.arch.category_width);
        let mut concat = Array2::zeros((b, self.arch.concat_width()));
        concat.slice_mut(s![.., ..wt]).assign(&text.output);
        concat.slice_mut(s![.., wt..wt + wv]).assign(&visual.output);
        concat.slice_mut(s![.., wt + wv..wt + wv + wc]).assign(&category.output);
        concat.column_mut(wt + wv + wc).assign(&inputs.hero);

        let hidden = self.hidden.forward(concat.view(), train, rate, &mut rng);
        let output = self.output.forward(hidden.output.view(), train, rate, &mut rng);
        let embeddings = output.output.clone();
        Ok((
            embeddings,
            ForwardTrace {
                mode,
                text,
                visual,
                category,
                hidden,
                output,
            },
        ))
    }

    /// Forward pass that also folds train-mode batch statistics into the
    /// running estimates.
    pub fn embed_batch(&mut self, inputs: &BatchInputs, mode: Mode, seed: u64) -> Result<(Array2<f64>, ForwardTrace)> {
        let (out, trace) = self.forward(inputs, mode, seed)?;
        if mode == Mode::Train {
            self.update_running(&trace);
        }
        Ok((out, trace))
    }

    pub fn update_running(&mut self, trace: &ForwardTrace) {
        self.text.update_running(&trace.text);
        self.visual.update_running(&trace.visual);
        self.category.update_running(&trace.category);
        self.hidden.update_running(&trace.hidden);
        self.output.update_running(&trace.output);
    }

    /// Reverse-mode gradients of a loss given its gradient with respect to
    /// each output embedding.
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &Array2<f64>) -> Result<EmbedderGrads> {
        if trace.mode != Mode::Train {
            return Err(Error::Shape("backward needs a train-mode trace".into()));
        }
        let b = trace.output.output.nrows();
        if output_grad.dim() != (b, self.output_dim()) {
            return Err(Error::Shape(format!(
                "output gradient is {:?}, expected ({b}, {})",
                output_grad.dim(),
                self.output_dim()
            )));
        }
        for (layer, t) in self.layers().iter().zip(trace.layers()) {
            if t.input.ncols() != layer.in_width() || t.pre.ncols() != layer.out_width() {
                return Err(Error::Shape("trace does not match parameters".into()));
            }
        }

        let (output, d_hidden) = self.output.backward(&trace.output, output_grad.view(), true);
        let d_hidden = d_hidden.expect("requested");
        let (hidden, d_concat) = self.hidden.backward(&trace.hidden, d_hidden.view(), true);
        let d_concat = d_concat.expect("requested");

        let (wt, wv, wc) = (self.arch.text_width, self.arch.visual_width, self.arch.category_width);
        let (text, _) = self.text.backward(&trace.text, d_concat.slice(s![.., ..wt]), false);
        let (visual, _) = self.visual.backward(&trace.visual, d_concat.slice(s![.., wt..wt + wv]), false);
        let (category, _) = self
            .category
            .backward(&trace.category, d_concat.slice(s![.., wt + wv..wt + wv + wc]), false);
        Ok(EmbedderGrads {
            text,
            visual,
            category,
            hidden,
            output,
        })
    }

    /// Infer-mode embeddings for catalogue rows, in the given order.
    pub fn embed_items(&self, catalog: &Catalog, indices: &[usize], hero: bool, mask: FeatureMask) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((indices.len(), self.output_dim()));
        for (chunk_no, chunk) in indices.chunks(INFER_CHUNK).enumerate() {
            let feats: Vec<&ItemFeatures> = chunk.iter().map(|&i| catalog.features(i)).collect();
            let flags = vec![hero; chunk.len()];
            let inputs = BatchInputs::from_features(&feats, &flags, mask)?;
            let (emb, _) = self.forward(&inputs, Mode::Infer, 0)?;
            let start = chunk_no * INFER_CHUNK;
            out.slice_mut(s![start..start + chunk.len(), ..]).assign(&emb);
        }
        Ok(out)
    }

    /// Infer-mode embedding of a single item.
    pub fn embed_one(&self, features: &ItemFeatures, hero: bool) -> Result<Vec<f64>> {
        let inputs = BatchInputs::from_features(&[features], &[hero], FeatureMask::ALL)?;
        let (emb, _) = self.forward(&inputs, Mode::Infer, 0)?;
        Ok(emb.row(0).to_vec())
    }
}

/// Infer-mode embeddings of every catalogue item in both roles.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEmbeddings {
    pub hero: Array2<f64>,
    pub styling: Array2<f64>,
}

impl CatalogEmbeddings {
    pub fn get(&self, index: usize, hero: bool) -> ArrayView1<'_, f64> {
        if hero {
            self.hero.row(index)
        } else {
            self.styling.row(index)
        }
    }

    /// Embeddings of an outfit's items, hero first.
    pub fn outfit(&self, catalog: &Catalog, outfit: &Outfit) -> Result<Vec<Vec<f64>>> {
        outfit
            .item_ids()
            .enumerate()
            .map(|(k, id)| {
                let i = catalog.index_of(id).ok_or_else(|| Error::UnknownItem(id.to_string()))?;
                Ok(self.get(i, k == 0).to_vec())
            })
            .collect()
    }
}

impl EmbedderParams {
    pub fn embed_catalog(&self, catalog: &Catalog, mask: FeatureMask) -> Result<CatalogEmbeddings> {
        let all: Vec<usize> = (0..catalog.len()).collect();
        Ok(CatalogEmbeddings {
            hero: self.embed_items(catalog, &all, true, mask)?,
            styling: self.embed_items(catalog, &all, false, mask)?,
        })
    }
}

impl ForwardTrace {
    pub fn layers(&self) -> [&LayerTrace; 5] {
        [&self.text, &self.visual, &self.category, &self.hidden, &self.output]
    }
}

impl EmbedderGrads {
    pub fn zeros_like(params: &EmbedderParams) -> Self {
        EmbedderGrads {
            text: DenseGrads::zeros_like(&params.text),
            visual: DenseGrads::zeros_like(&params.visual),
            category: DenseGrads::zeros_like(&params.category),
            hidden: DenseGrads::zeros_like(&params.hidden),
            output: DenseGrads::zeros_like(&params.output),
        }
    }

    fn layers(&self) -> [&DenseGrads; 5] {
        [&self.text, &self.visual, &self.category, &self.hidden, &self.output]
    }

    /// Flat views in the same order as [`EmbedderParams::trainable_mut`].
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, g) in LAYER_NAMES.iter().zip(self.layers()) {
            out.push((format!("{name}.weight"), g.weight.as_slice().expect("standard layout")));
            out.push((format!("{name}.bias"), g.bias.as_slice().expect("standard layout")));
            if let (Some(gamma), Some(beta)) = (&g.gamma, &g.beta) {
                out.push((format!("{name}.gamma"), gamma.as_slice().expect("standard layout")));
                out.push((format!("{name}.beta"), beta.as_slice().expect("standard layout")));
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests;
