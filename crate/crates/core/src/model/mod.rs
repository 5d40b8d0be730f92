//! A tiny decoder-only language model over the byte vocabulary.
//!
//! Activations are laid out with positions as columns (`dim x L`), so every
//! projection is literally `W x` and adapters bolt onto a [`LinearLayer`]
//! without any transposition bookkeeping. Rows become positions only in the
//! final logits (`L x vocab`).
//!
//! Architecture: learned token + position embeddings, pre-norm blocks of
//! causal multi-head attention and a relu MLP (hidden = 4 * dim), a final
//! norm, and an untied lm head. Norms are parameter-free RMS norms. None of
//! the base weights train; adapters are the only trainable state.

pub mod tokenizer;

mod checkpoint;

use crate::adapters::{spec_forward, AdapterError, AdapterSet, AdapterSpec};
use crate::tensor::{Prng, Tape, Tensor, TensorError};
use serde::{Deserialize, Serialize};

pub use tokenizer::{decode, encode_prompt, encode_response, encode_text, BOS, EOS, PAD, VOCAB_SIZE};

/// Epsilon inside the RMS norm square root; keeps all-zero columns finite.
pub const RMS_NORM_EPS: f64 = 1e-8;
/// Standard deviation for base weight and embedding init.
const WEIGHT_INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown attachment point '{0}'")]
    UnknownPoint(String),
    #[error("attachment point '{0}' already has an adapter")]
    PointOccupied(String),
    #[error("attachment point '{0}' has no adapter")]
    PointEmpty(String),
    #[error("sequence of {len} tokens exceeds the context window of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {id} out of range for vocab {vocab}")]
    BadToken { id: usize, vocab: usize },
    #[error("cannot run the model on an empty sequence")]
    EmptySequence,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint {path}: {source}")]
    CheckpointIo { path: String, source: crate::binio::BinError },
    #[error("checkpoint {path}: {what}")]
    CheckpointFormat { path: String, what: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Fixed by the byte tokenizer; carried so files are self-describing.
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_context")]
    pub context_len: usize,
    /// Seed for base weight init; two models with equal configs are
    /// identical parameter for parameter.
    #[serde(default)]
    pub seed: u64,
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}
fn default_dim() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    2
}
fn default_context() -> usize {
    256
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            dim: 64,
            n_layers: 2,
            n_heads: 2,
            context_len: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size != VOCAB_SIZE {
            return Err(ModelError::Config(format!(
                "vocab_size must be {VOCAB_SIZE} (byte tokenizer), got {}",
                self.vocab_size
            )));
        }
        if self.dim == 0 || self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "dim {} must be a positive multiple of n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(ModelError::Config("n_layers must be at least 1".into()));
        }
        if self.context_len < 2 {
            return Err(ModelError::Config("context_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        4 * self.dim
    }
}

/// A no-bias linear map that an adapter can attach beside.
pub struct LinearLayer {
    name: String,
    pub w: Tensor,
    attached: Option<AdapterSpec>,
}

impl LinearLayer {
    fn new(name: String, rows: usize, cols: usize, prng: &mut Prng) -> LinearLayer {
        LinearLayer { name, w: Tensor::gaussian(rows, cols, WEIGHT_INIT_STD, prng), attached: None }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn attached(&self) -> Option<&AdapterSpec> {
        self.attached.as_ref()
    }

    /// `W x`, routed through the attached adapter when present.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        match &self.attached {
            Some(spec) => Ok(spec_forward(tape, spec, &self.w, x)?),
            None => Ok(tape.matmul(&self.w, x)?),
        }
    }
}

struct Block {
    q: LinearLayer,
    k: LinearLayer,
    v: LinearLayer,
    o: LinearLayer,
    fc1: LinearLayer,
    fc2: LinearLayer,
}

pub struct TinyLm {
    config: ModelConfig,
    /// dim x vocab; column t is the embedding of token t.
    embed: Tensor,
    /// dim x context_len; column p is the embedding of position p.
    pos: Tensor,
    blocks: Vec<Block>,
    head: LinearLayer,
}

impl std::fmt::Debug for TinyLm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TinyLm")
            .field("config", &self.config)
            .field("attached", &self.attached_points())
            .finish()
    }
}

/// How `generate` picks the next token.
pub enum Decoder<'a> {
    /// Highest logit wins; ties go to the lowest token id.
    Greedy,
    /// Softmax sampling at the given temperature.
    Sample { temperature: f64, prng: &'a mut Prng },
}

impl TinyLm {
    /// Builds the model with deterministic Gaussian init from the config
    /// seed. Matrices are drawn in a fixed order, so equal configs give
    /// bitwise-equal models.
    pub fn new(config: ModelConfig) -> Result<TinyLm> {
        config.validate()?;
        let mut prng = Prng::new(config.seed);
        let d = config.dim;
        let h = config.hidden_dim();
        let embed = Tensor::gaussian(d, config.vocab_size, WEIGHT_INIT_STD, &mut prng);
        let pos = Tensor::gaussian(d, config.context_len, WEIGHT_INIT_STD, &mut prng);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            blocks.push(Block {
                q: LinearLayer::new(format!("layer{i}.attn.q"), d, d, &mut prng),
                k: LinearLayer::new(format!("layer{i}.attn.k"), d, d, &mut prng),
                v: LinearLayer::new(format!("layer{i}.attn.v"), d, d, &mut prng),
                o: LinearLayer::new(format!("layer{i}.attn.o"), d, d, &mut prng),
                fc1: LinearLayer::new(format!("layer{i}.mlp.fc1"), h, d, &mut prng),
                fc2: LinearLayer::new(format!("layer{i}.mlp.fc2"), d, h, &mut prng),
            });
        }
        let head = LinearLayer::new("lm_head".into(), config.vocab_size, d, &mut prng);
        Ok(TinyLm { config, embed, pos, blocks, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn layers(&self) -> impl Iterator<Item = &LinearLayer> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.q, &b.k, &b.v, &b.o, &b.fc1, &b.fc2])
            .chain(std::iter::once(&self.head))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut LinearLayer> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                [&mut b.q, &mut b.k, &mut b.v, &mut b.o, &mut b.fc1, &mut b.fc2]
            })
            .chain(std::iter::once(&mut self.head))
    }

    /// Every name an adapter can attach to, in layer order.
    pub fn attachment_points(&self) -> Vec<String> {
        self.layers().map(|l| l.name.clone()).collect()
    }

    pub fn point(&self, name: &str) -> Result<&LinearLayer> {
        self.layers().find(|l| l.name == name).ok_or_else(|| ModelError::UnknownPoint(name.into()))
    }

    fn point_mut(&mut self, name: &str) -> Result<&mut LinearLayer> {
        self.layers_mut()
            .find(|l| l.name == name)
            .ok_or_else(|| ModelError::UnknownPoint(name.into()))
    }

    /// Attaches an adapter to a free point. The adapter must match the
    /// point's weight shape exactly.
    pub fn attach(&mut self, name: &str, spec: AdapterSpec) -> Result<()> {
        let layer = self.point_mut(name)?;
        if layer.attached.is_some() {
            return Err(ModelError::PointOccupied(name.into()));
        }
        let (n, m) = spec.dims().ok_or(ModelError::Adapter(AdapterError::InvalidStack))?;
        if n != layer.w.rows() || m != layer.w.cols() {
            return Err(ModelError::Adapter(AdapterError::Shape {
                expected_rows: n,
                expected_cols: m,
                got_rows: layer.w.rows(),
                got_cols: layer.w.cols(),
            }));
        }
        layer.attached = Some(spec);
        Ok(())
    }

    /// Removes and returns the adapter at a point.
    pub fn detach(&mut self, name: &str) -> Result<AdapterSpec> {
        let layer = self.point_mut(name)?;
        layer.attached.take().ok_or_else(|| ModelError::PointEmpty(name.into()))
    }

    pub fn detach_all(&mut self) {
        for layer in self.layers_mut() {
            layer.attached = None;
        }
    }

    /// Names of points that currently hold an adapter, in layer order.
    pub fn attached_points(&self) -> Vec<String> {
        self.layers().filter(|l| l.attached.is_some()).map(|l| l.name.clone()).collect()
    }

    /// Deep-copies every attached adapter into a set keyed by point name.
    pub fn export_adapters(&self) -> AdapterSet {
        self.layers()
            .filter_map(|l| l.attached.as_ref().map(|s| (l.name.clone(), s.deep_clone())))
            .collect()
    }

    /// Trainable tensors of every attached adapter, in layer order. Frozen
    /// blocks contribute nothing.
    pub fn trainable_params(&self) -> Vec<Tensor> {
        self.layers().filter_map(|l| l.attached.as_ref()).flat_map(|s| s.trainable()).collect()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > self.config.context_len {
            return Err(ModelError::ContextOverflow {
                len: ids.len(),
                max: self.config.context_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ModelError::BadToken { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    fn attention(&self, tape: &Tape, block: &Block, x: &Tensor) -> Result<Tensor> {
        let q = block.q.forward(tape, x)?;
        let k = block.k.forward(tape, x)?;
        let v = block.v.forward(tape, x)?;
        let head_dim = self.config.dim / self.config.n_heads;
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let start = h * head_dim;
            let qh = tape.slice_rows(&q, start, head_dim)?;
            let kh = tape.slice_rows(&k, start, head_dim)?;
            let vh = tape.slice_rows(&v, start, head_dim)?;
            // Rows of the score matrix are query positions.
            let scores = tape.matmul(&tape.transpose(&qh)?, &kh)?;
            let scaled = tape.scale(&scores, inv_sqrt)?;
            let weights = tape.causal_softmax_rows(&scaled)?;
            let out = tape.matmul(&vh, &tape.transpose(&weights)?)?;
            heads.push(out);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        let merged = tape.concat_rows(&refs)?;
        block.o.forward(tape, &merged)
    }

    /// Hidden states after all blocks and the final norm, `dim x L`.
    fn hidden_states(&self, tape: &Tape, ids: &[usize]) -> Result<Tensor> {
        let tok = tape.gather_cols(&self.embed, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather_cols(&self.pos, &positions)?;
        let mut x = tape.add(&tok, &pos)?;
        for block in &self.blocks {
            let normed = tape.rms_norm_cols(&x, RMS_NORM_EPS)?;
            let attn = self.attention(tape, block, &normed)?;
            x = tape.add(&x, &attn)?;
            let normed = tape.rms_norm_cols(&x, RMS_NORM_EPS)?;
            let up = block.fc1.forward(tape, &normed)?;
            let act = tape.relu(&up)?;
            let down = block.fc2.forward(tape, &act)?;
            x = tape.add(&x, &down)?;
        }
        Ok(tape.rms_norm_cols(&x, RMS_NORM_EPS)?)
    }

    /// Next-token logits for every position, `L x vocab`: row `t` scores
    /// the token at position `t + 1`.
    pub fn forward(&self, tape: &Tape, ids: &[usize]) -> Result<Tensor> {
        self.check_ids(ids)?;
        let hidden = self.hidden_states(tape, ids)?;
        let logits = self.head.forward(tape, &hidden)?;
        Ok(tape.transpose(&logits)?)
    }

    /// Extends `prompt` until EOS, `max_new` tokens, or a full context
    /// window, whichever comes first. Returns only the continuation (EOS
    /// included when produced). Greedy decoding is fully deterministic.
    pub fn generate(&self, prompt: &[usize], max_new: usize, decoder: Decoder) -> Result<Vec<usize>> {
        self.check_ids(prompt)?;
        if let Decoder::Sample { temperature, .. } = &decoder {
            if !temperature.is_finite() || *temperature <= 0.0 {
                return Err(ModelError::BadTemperature(*temperature));
            }
        }
        let mut decoder = decoder;
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && seq.len() < self.config.context_len {
            let tape = Tape::disabled();
            let logits = self.forward(&tape, &seq)?;
            let last = logits.rows() - 1;
            let next = match &mut decoder {
                Decoder::Greedy => {
                    let mut best = 0;
                    let mut best_v = f64::NEG_INFINITY;
                    for j in 0..logits.cols() {
                        let v = logits.get(last, j);
                        if v > best_v {
                            best_v = v;
                            best = j;
                        }
                    }
                    best
                }
                Decoder::Sample { temperature, prng } => {
                    let scaled = tape.scale(&logits, 1.0 / *temperature)?;
                    let logp = tape.log_softmax_rows(&scaled)?;
                    let u = prng.next_f64();
                    let mut acc = 0.0;
                    let mut pick = logits.cols() - 1;
                    for j in 0..logits.cols() {
                        acc += logp.get(last, j).exp();
                        if u < acc {
                            pick = j;
                            break;
                        }
                    }
                    pick
                }
            };
            seq.push(next);
            out.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(out)
    }

    /// Convenience wrapper: encode a text prompt, generate, decode.
    pub fn complete_text(&self, prompt: &str, max_new: usize, decoder: Decoder) -> Result<String> {
        let ids = encode_prompt(prompt);
        let out = self.generate(&ids, max_new, decoder)?;
        Ok(decode(&out))
    }

    /// Copy with the same config and base weights and nothing attached.
    /// This is how a pristine reference model is produced for preference
    /// training.
    pub fn clone_base(&self) -> TinyLm {
        let mut copy = TinyLm::new(self.config.clone()).expect("config was already validated");
        let source: Vec<(String, Vec<f64>)> =
            self.named_tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
        for ((name, data), (copy_name, tensor)) in
            source.into_iter().zip(copy.named_tensors_mut())
        {
            debug_assert_eq!(name, copy_name);
            tensor.update_data(|d| d.copy_from_slice(&data));
        }
        copy
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<TinyLm> {
        checkpoint::load(path)
    }

    pub(crate) fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("pos".to_string(), &self.pos)];
        for layer in self.layers() {
            out.push((layer.name.clone(), &layer.w));
        }
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let config_entries = vec![("embed".to_string(), &mut self.embed), ("pos".to_string(), &mut self.pos)];
        let mut out = config_entries;
        for block in &mut self.blocks {
            for layer in
                [&mut block.q, &mut block.k, &mut block.v, &mut block.o, &mut block.fc1, &mut block.fc2]
            {
                out.push((layer.name.clone(), &mut layer.w));
            }
        }
        out.push((self.head.name.clone(), &mut self.head.w));
        out
    }
}
