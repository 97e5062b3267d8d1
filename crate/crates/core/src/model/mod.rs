//! Model assembly and the forward pass.  A model is a flat registry of named
//! parameter tensors (declaration order is the checkpoint order) plus an
//! architectural index saying which parameters each layer uses.  The forward
//! pass walks blocks bottom-up: the first layer of each block computes the
//! attention distributions from the block input, the remaining layers reuse
//! them.
//!
//! Conventions follow the standard bidirectional-encoder recipe: learned word
//! and absolute-position embeddings with a layer norm, post-norm residual
//! layers, tanh-approximation GELU in the feed-forward, tied input/output
//! embeddings with a per-vocab output bias, and N(0, 0.02^2) initialization
//! with unit norm gains.

mod checkpoint;
mod layout;

pub use layout::Layout;

use std::sync::Arc;

use crate::attention::{
    bucket_base_indices, compute_attention, reuse_attention, AttentionParams, DropoutPolicy,
    RelativeBias,
};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{ParamId, Phase, Tape, Tensor, Var};

/// Layer-norm epsilon, fixed by convention.
pub const LN_EPS: f64 = 1e-12;

/// Initialization standard deviation for weights and embeddings.
pub const INIT_STD: f64 = 0.02;

/// Everything needed to size and assemble a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layout: Layout,
    /// Feed-forward inner width W.
    pub ffn_width: usize,
    /// Embedding / hidden size H.
    pub embed_dim: usize,
    /// Attention heads N (per-head size is H/N).
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Dropout on hidden activations (embeddings, attention output, FFN
    /// output) at training time.
    pub hidden_dropout_p: f64,
    /// Whether attention probabilities are also dropped at training time;
    /// the lazy-block recipe recommends leaving this off.
    pub attention_dropout: bool,
    pub num_rel_buckets: usize,
    pub rel_max_distance: usize,
}

impl ModelConfig {
    pub fn new(
        layout: Layout,
        ffn_width: usize,
        embed_dim: usize,
        num_heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        ModelConfig {
            layout,
            ffn_width,
            embed_dim,
            num_heads,
            vocab_size,
            max_seq_len,
            hidden_dropout_p: 0.1,
            attention_dropout: false,
            num_rel_buckets: 32,
            rel_max_distance: 128,
        }
    }

    /// The reference base configuration: 12 single-layer blocks, W=3072,
    /// H=768, N=12, 32768-word vocabulary, 512-token sequences.
    pub fn bert_base() -> Self {
        Self::new(
            Layout::uniform(1, 12).expect("static layout"),
            3072,
            768,
            12,
            32768,
            512,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.embed_dim == 0 || self.ffn_width == 0 || self.max_seq_len == 0 {
            return fail("model dimensions must be positive".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.vocab_size < 5 {
            return fail("vocab_size must cover the four specials plus content".into());
        }
        if !(0.0..1.0).contains(&self.hidden_dropout_p) {
            return fail(format!("hidden_dropout_p {} outside [0,1)", self.hidden_dropout_p));
        }
        if self.num_rel_buckets < 2 || self.num_rel_buckets % 2 != 0 {
            return fail(format!(
                "num_rel_buckets {} must be an even number of at least 2",
                self.num_rel_buckets
            ));
        }
        if self.rel_max_distance <= self.num_rel_buckets / 4 {
            return fail(format!(
                "rel_max_distance {} too small for {} buckets",
                self.rel_max_distance, self.num_rel_buckets
            ));
        }
        Ok(())
    }
}

/// One registered parameter tensor.
pub(crate) struct ParamEntry {
    pub name: String,
    pub tensor: Arc<Tensor>,
    /// Whether decoupled weight decay applies (matrices and embeddings yes;
    /// biases, norm parameters, and the relative-bias table no).
    pub decay: bool,
}

/// Which registry entries one transformer layer uses.
struct LayerIds {
    computing: bool,
    wq: Option<ParamId>,
    bq: Option<ParamId>,
    wk: Option<ParamId>,
    bk: Option<ParamId>,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

struct Arch {
    word_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    rel_table: ParamId,
    layers: Vec<LayerIds>,
    head_bias: ParamId,
}

/// Counters reported by one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardStats {
    /// How many times attention distributions were computed from scratch;
    /// equals the number of blocks, by construction.
    pub attention_computations: usize,
    /// Softmax calls over square (n x n) inputs during this pass.
    pub softmax_square_calls: u64,
    /// Weighted FLOPs recorded by the tape during this pass.
    pub flops: u64,
}

/// A lazy-block transformer: config, parameter registry, architecture index.
pub struct Model {
    config: ModelConfig,
    params: Vec<ParamEntry>,
    arch: Arch,
}

/// Builds registry entries in declaration order.
struct Builder {
    params: Vec<ParamEntry>,
    rng: Option<Rng>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        let id = ParamId(self.params.len() as u32);
        let tensor = match (&mut self.rng, init) {
            (Some(rng), Init::Normal) => Tensor::randn(shape, INIT_STD, rng),
            (Some(_), Init::Zero) | (None, _) => Tensor::zeros(shape),
            (Some(_), Init::One) => Tensor::full(shape, 1.0),
        };
        // Uninitialized (checkpoint-bound) models still need gains of one if
        // a caller forwards them before loading; keep zeros for simplicity —
        // the loader overwrites every entry.
        let decay = matches!(init, Init::Normal);
        self.params.push(ParamEntry {
            name,
            tensor: Arc::new(tensor),
            decay,
        });
        id
    }
}

#[derive(Clone, Copy)]
enum Init {
    /// N(0, INIT_STD^2): weight matrices, embeddings.
    Normal,
    /// Zeros: biases and the relative-bias table.
    Zero,
    /// Ones: layer-norm gains.
    One,
}

impl Model {
    /// Builds a model with freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, Some(rng::stream(seed, rng::salt::INIT)))
    }

    /// Builds the registry without spending RNG draws (checkpoint loading).
    fn new_uninit(config: ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: ModelConfig, rng: Option<Rng>) -> Result<Self> {
        config.validate()?;
        let h = config.embed_dim;
        let w = config.ffn_width;
        let mut b = Builder { params: Vec::new(), rng };
        let word_emb = b.add("embeddings.word".into(), vec![config.vocab_size, h], Init::Normal);
        let pos_emb = b.add("embeddings.position".into(), vec![config.max_seq_len, h], Init::Normal);
        let emb_ln_g = b.add("embeddings.norm.gain".into(), vec![h], Init::One);
        let emb_ln_b = b.add("embeddings.norm.bias".into(), vec![h], Init::Zero);
        let rel_table = b.add(
            "attention.rel_bias".into(),
            vec![config.num_rel_buckets, config.num_heads],
            Init::Normal,
        );
        let mut layers = Vec::with_capacity(config.layout.total_layers());
        let mut global = 0usize;
        for &block_size in config.layout.blocks() {
            for pos_in_block in 0..block_size {
                let computing = pos_in_block == 0;
                let p = |suffix: &str| format!("layer{global}.{suffix}");
                let (wq, bq, wk, bk) = if computing {
                    (
                        Some(b.add(p("attn.wq"), vec![h, h], Init::Normal)),
                        Some(b.add(p("attn.bq"), vec![h], Init::Zero)),
                        Some(b.add(p("attn.wk"), vec![h, h], Init::Normal)),
                        Some(b.add(p("attn.bk"), vec![h], Init::Zero)),
                    )
                } else {
                    (None, None, None, None)
                };
                let wv = b.add(p("attn.wv"), vec![h, h], Init::Normal);
                let bv = b.add(p("attn.bv"), vec![h], Init::Zero);
                let wo = b.add(p("attn.wo"), vec![h, h], Init::Normal);
                let bo = b.add(p("attn.bo"), vec![h], Init::Zero);
                let ln1_g = b.add(p("attn.norm.gain"), vec![h], Init::One);
                let ln1_b = b.add(p("attn.norm.bias"), vec![h], Init::Zero);
                let w1 = b.add(p("ffn.w1"), vec![h, w], Init::Normal);
                let b1 = b.add(p("ffn.b1"), vec![w], Init::Zero);
                let w2 = b.add(p("ffn.w2"), vec![w, h], Init::Normal);
                let b2 = b.add(p("ffn.b2"), vec![h], Init::Zero);
                let ln2_g = b.add(p("ffn.norm.gain"), vec![h], Init::One);
                let ln2_b = b.add(p("ffn.norm.bias"), vec![h], Init::Zero);
                layers.push(LayerIds {
                    computing,
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                    bo,
                    ln1_g,
                    ln1_b,
                    w1,
                    b1,
                    w2,
                    b2,
                    ln2_g,
                    ln2_b,
                });
                global += 1;
            }
        }
        let head_bias = b.add("head.bias".into(), vec![config.vocab_size], Init::Zero);
        // The relative-bias table is initialized like a weight but exempt
        // from decay, like other bias-shaped parameters.
        b.params[rel_table.0 as usize].decay = false;
        Ok(Model {
            config,
            params: b.params,
            arch: Arch {
                word_emb,
                pos_emb,
                emb_ln_g,
                emb_ln_b,
                rel_table,
                layers,
                head_bias,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Total scalar parameters actually instantiated.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    /// Iterates `(id, name, tensor, decays)` in declaration order.
    pub fn param_iter(&self) -> impl Iterator<Item = (ParamId, &str, &Arc<Tensor>, bool)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i as u32), e.name.as_str(), &e.tensor, e.decay))
    }

    pub fn tensor(&self, id: ParamId) -> &Arc<Tensor> {
        &self.params[id.0 as usize].tensor
    }

    /// Mutable access for the optimizer.  Cheap when no forward pass holds a
    /// binding (the usual case between steps).
    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0 as usize].tensor)
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.params.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    /// Runs the model over one token sequence, producing `[n, vocab]` logits.
    /// `rng` drives dropout draws and is only consumed in the training phase.
    pub fn forward(
        &self,
        tape: &Tape,
        tokens: &[u32],
        phase: Phase,
        rng: &mut Rng,
    ) -> Result<(Var, ForwardStats)> {
        let n = tokens.len();
        if n == 0 || n > self.config.max_seq_len {
            return Err(Error::Length {
                what: "input sequence",
                got: n,
                limit: self.config.max_seq_len,
            });
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Vocab(format!(
                    "token id {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        let flops0 = tape.flops();
        let softmax0 = tape.softmax_square_calls();

        let bound: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, e)| tape.param(&e.tensor, ParamId(i as u32), &e.name))
            .collect::<Result<_>>()?;
        let v = |id: ParamId| bound[id.0 as usize].clone();

        let hidden_p = match phase {
            Phase::Train => self.config.hidden_dropout_p,
            Phase::Eval => 0.0,
        };
        let attn_policy = match (phase, self.config.attention_dropout) {
            (Phase::Train, true) => DropoutPolicy::Train {
                p: self.config.hidden_dropout_p,
            },
            _ => DropoutPolicy::Off,
        };

        // embeddings
        let pos_ids: Vec<u32> = (0..n as u32).collect();
        let we = v(self.arch.word_emb);
        let tok_e = tape.gather_rows(&we, tokens)?;
        let pos_e = tape.gather_rows(&v(self.arch.pos_emb), &pos_ids)?;
        let mut x = tape.add(&tok_e, &pos_e)?;
        x = tape.layer_norm(&x, &v(self.arch.emb_ln_g), &v(self.arch.emb_ln_b), LN_EPS)?;
        x = tape.dropout(x, hidden_p, rng)?;

        let bias = RelativeBias {
            table: v(self.arch.rel_table),
            num_buckets: self.config.num_rel_buckets,
            max_distance: self.config.rel_max_distance,
        };
        let bias_idx = bucket_base_indices(
            n,
            self.config.num_rel_buckets,
            self.config.rel_max_distance,
            self.config.num_heads,
        );

        let mut attention_computations = 0usize;
        let mut layer_iter = self.arch.layers.iter();
        for &block_size in self.config.layout.blocks() {
            let mut cache = None;
            for pos_in_block in 0..block_size {
                let ids = layer_iter.next().expect("layer index matches layout");
                debug_assert_eq!(ids.computing, pos_in_block == 0);
                let attn_out = if ids.computing {
                    let params = AttentionParams::computing(
                        v(ids.wq.expect("computing layer has wq")),
                        v(ids.bq.expect("computing layer has bq")),
                        v(ids.wk.expect("computing layer has wk")),
                        v(ids.bk.expect("computing layer has bk")),
                        v(ids.wv),
                        v(ids.bv),
                        v(ids.wo),
                        v(ids.bo),
                        self.config.num_heads,
                    )?;
                    let (out, c) =
                        compute_attention(tape, &x, &params, &bias, &bias_idx, attn_policy, rng)?;
                    attention_computations += 1;
                    cache = Some(c);
                    out
                } else {
                    let params = AttentionParams::reusing(
                        v(ids.wv),
                        v(ids.bv),
                        v(ids.wo),
                        v(ids.bo),
                        self.config.num_heads,
                    )?;
                    let c = cache.as_ref().ok_or_else(|| {
                        Error::Cache("reusing layer before any computing layer".into())
                    })?;
                    reuse_attention(tape, &x, &params, c, attn_policy, rng)?
                };
                let attn_out = tape.dropout(attn_out, hidden_p, rng)?;
                let h1 = {
                    let s = tape.add(&x, &attn_out)?;
                    tape.layer_norm(&s, &v(ids.ln1_g), &v(ids.ln1_b), LN_EPS)?
                };
                let ffn = {
                    let a = tape.matmul(&h1, &v(ids.w1))?;
                    let a = tape.add_row_bias(a, &v(ids.b1))?;
                    let a = tape.gelu(a)?;
                    let a = tape.matmul(&a, &v(ids.w2))?;
                    tape.add_row_bias(a, &v(ids.b2))?
                };
                let ffn = tape.dropout(ffn, hidden_p, rng)?;
                x = {
                    let s = tape.add(&h1, &ffn)?;
                    tape.layer_norm(&s, &v(ids.ln2_g), &v(ids.ln2_b), LN_EPS)?
                };
            }
        }

        // tied output head: logits against the word-embedding rows
        let logits = tape.matmul_nt(&x, &we)?;
        let logits = tape.add_row_bias(logits, &v(self.arch.head_bias))?;

        let stats = ForwardStats {
            attention_computations,
            softmax_square_calls: tape.softmax_square_calls() - softmax0,
            flops: tape.flops() - flops0,
        };
        Ok((logits, stats))
    }

    /// Convenience inference pass on a private tape; returns owned logits.
    pub fn forward_logits(&self, tokens: &[u32]) -> Result<(Tensor, ForwardStats)> {
        let tape = Tape::inference();
        let mut rng = rng::stream(0, 0);
        let (logits, stats) = self.forward(&tape, tokens, Phase::Eval, &mut rng)?;
        Ok((logits.value().clone(), stats))
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::new(Layout::parse("M2x2").unwrap(), 32, 16, 4, 23, 12);
        c.num_rel_buckets = 8;
        c.rel_max_distance = 16;
        c
    }

    pub(crate) fn tiny_model(seed: u64) -> Model {
        Model::new(tiny_config(), seed).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::tiny_config;
    use super::*;

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut c = tiny_config();
        c.num_heads = 5; // 16 % 5 != 0
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.vocab_size = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.hidden_dropout_p = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.num_rel_buckets = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn registry_names_are_unique_and_ordered() {
        let m = Model::new(tiny_config(), 1).unwrap();
        let names: Vec<&str> = m.param_iter().map(|(_, n, _, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate parameter names");
        assert_eq!(names.first(), Some(&"embeddings.word"));
        assert_eq!(names.last(), Some(&"head.bias"));
        // reusing layers (positions 1 within each block of M2x2: layers 1, 3)
        assert!(names.contains(&"layer0.attn.wq"));
        assert!(!names.iter().any(|n| *n == "layer1.attn.wq"));
        assert!(names.contains(&"layer2.attn.wq"));
        assert!(!names.iter().any(|n| *n == "layer3.attn.wq"));
    }

    #[test]
    fn decay_policy_matches_parameter_roles() {
        let m = Model::new(tiny_config(), 1).unwrap();
        for (_, name, _, decay) in m.param_iter() {
            let expect = name == "embeddings.word"
                || name == "embeddings.position"
                || [".wq", ".wk", ".wv", ".wo", ".w1", ".w2"]
                    .iter()
                    .any(|s| name.ends_with(s));
            assert_eq!(decay, expect, "decay flag wrong for {name}");
        }
    }

    #[test]
    fn forward_shapes_and_block_counter() {
        let m = Model::new(tiny_config(), 7).unwrap();
        let tape = Tape::inference();
        let mut rng = crate::rng::stream(0, 0);
        let tokens = [4u32, 9, 12, 5, 6];
        let (logits, stats) = m.forward(&tape, &tokens, Phase::Eval, &mut rng).unwrap();
        assert_eq!(logits.shape(), &[5, 23]);
        assert_eq!(stats.attention_computations, 2, "M2x2 has two blocks");
        assert_eq!(stats.softmax_square_calls, 2 * 4, "blocks x heads");
        assert!(stats.flops > 0);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m = Model::new(tiny_config(), 7).unwrap();
        let tape = Tape::inference();
        let mut rng = crate::rng::stream(0, 0);
        assert!(matches!(
            m.forward(&tape, &[], Phase::Eval, &mut rng),
            Err(Error::Length { .. })
        ));
        let long = vec![4u32; 13]; // max_seq_len is 12
        assert!(matches!(
            m.forward(&tape, &long, Phase::Eval, &mut rng),
            Err(Error::Length { .. })
        ));
        assert!(matches!(
            m.forward(&tape, &[4, 99], Phase::Eval, &mut rng),
            Err(Error::Vocab(_))
        ));
    }

    #[test]
    fn eval_forward_is_deterministic_and_dropout_free() {
        let mut cfg = tiny_config();
        cfg.attention_dropout = true; // must not matter in eval
        let m = Model::new(cfg.clone(), 3).unwrap();
        let tokens = [4u32, 7, 8, 9];
        let (a, _) = m.forward_logits(&tokens).unwrap();
        let (b, _) = m.forward_logits(&tokens).unwrap();
        assert_eq!(a.data(), b.data());

        let mut cfg_off = cfg.clone();
        cfg_off.attention_dropout = false;
        let m_off = Model::new(cfg_off, 3).unwrap();
        let (c, _) = m_off.forward_logits(&tokens).unwrap();
        assert_eq!(
            a.data(),
            c.data(),
            "attention-dropout flag must not affect evaluation outputs"
        );
    }

    #[test]
    fn train_forward_same_seed_bitwise_reproducible() {
        let m = Model::new(tiny_config(), 3).unwrap();
        let tokens = [4u32, 7, 8, 9, 10, 11];
        let run = || {
            let tape = Tape::recording();
            let mut rng = crate::rng::stream(11, rng::salt::DROPOUT);
            let (logits, _) = m.forward(&tape, &tokens, Phase::Train, &mut rng).unwrap();
            logits.value().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mixed_layout_computes_in_first_layer_of_each_block() {
        let mut cfg = tiny_config();
        cfg.layout = Layout::parse("M3M1").unwrap();
        let m = Model::new(cfg, 5).unwrap();
        let tape = Tape::inference();
        let mut rng = crate::rng::stream(0, 0);
        let (_, stats) = m.forward(&tape, &[4, 5, 6], Phase::Eval, &mut rng).unwrap();
        assert_eq!(stats.attention_computations, 2);
        assert_eq!(stats.softmax_square_calls, 2 * 4);
    }

    #[test]
    fn tied_head_gradient_reaches_word_embeddings_twice() {
        // One gather use + one head use must merge into a single gradient.
        let m = Model::new(tiny_config(), 9).unwrap();
        let tape = Tape::recording();
        let mut rng = crate::rng::stream(2, 0);
        let tokens = [4u32, 5, 6];
        let (logits, _) = m.forward(&tape, &tokens, Phase::Eval, &mut rng).unwrap();
        let loss = tape.mean_cross_entropy(&logits, &[5, -1, 4]).unwrap();
        tape.backward(&loss).unwrap();
        let grads = tape.param_grads();
        let word_id = m
            .param_iter()
            .find(|(_, n, _, _)| *n == "embeddings.word")
            .map(|(id, _, _, _)| id)
            .unwrap();
        let g = grads.get(word_id).expect("word embedding gradient");
        // every vocab row gets head-bias-path gradient via the logits matmul
        assert!(g.iter().filter(|&&x| x != 0.0).count() > m.config().embed_dim);
    }
}
