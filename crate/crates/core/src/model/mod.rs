//! The tiny autoregressive decoder and its heads.
//!
//! Architecture: learned token + position embeddings feeding a stack of
//! pre-norm transformer blocks (multi-head causal self-attention, GELU MLP)
//! with a final layer norm. Three heads sit on top:
//!
//! * the **language head** `d_h → |V|`, applied both to latent states (step
//!   decoding, termination check) and to hidden states (answer phase);
//! * the **latent head**, a 2-layer MLP `d_h → 2·d_h` whose output splits
//!   into the posterior mean and (clamped) log-std for the next latent;
//! * the **adapter**, a 2-layer MLP `d_v → d_h` mapping frozen visual
//!   embeddings to prior anchors.
//!
//! Latent states are injected directly as input embeddings, so the latent
//! dimension equals `d_h`. Two forward implementations exist: a whole
//! sequence causal pass ([`Model::forward_hidden`]) and an incremental
//! row-at-a-time pass with cached keys/values ([`Model::begin_sequence`] /
//! [`Model::append_row`]) used by both the training graph and inference;
//! the two produce bitwise-identical hidden states.

pub mod checkpoint;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, EOS, SEP_REASON};
use crate::math::Mat;
use crate::tape::{linear, Tape, Var};
use crate::{Error, Result};

/// Architecture hyperparameters. `vocab` is fixed by the dataset; the rest
/// default to the desk-scale configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub vocab: usize,
    pub d_v: usize,
    pub mlp_mult: usize,
    pub logsigma_clamp: (f64, f64),
    pub tie_embeddings: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_h: 64,
            layers: 2,
            heads: 4,
            context: 256,
            vocab: 5,
            d_v: 128,
            mlp_mult: 4,
            logsigma_clamp: (-5.0, 2.0),
            tie_embeddings: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || !self.d_h.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_h {} must be a positive multiple of heads {}",
                self.d_h, self.heads
            )));
        }
        if self.layers == 0 || self.mlp_mult == 0 || self.context == 0 {
            return Err(Error::Config("layers, mlp_mult, context must be ≥ 1".into()));
        }
        if self.vocab < 5 {
            return Err(Error::Config(format!(
                "vocab {} must include the 5 special tokens",
                self.vocab
            )));
        }
        if self.logsigma_clamp.0 >= self.logsigma_clamp.1 {
            return Err(Error::Config("logsigma_clamp must be an increasing pair".into()));
        }
        if self.init_std.is_nan() || self.init_std <= 0.0 {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_h / self.heads
    }
}

/// Optimizer-visible parameter grouping; supports selective freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    LatentHead,
    LanguageHead,
    Adapter,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub group: ParamGroup,
    /// Weight decay applies only to genuinely 2-D tensors, not bias/gain rows.
    pub decay: bool,
}

/// Named parameter store; iteration order is fixed by construction and is
/// the canonical order for initialization, checkpoints, and optimizer state.
pub struct Parameters {
    specs: Vec<ParamSpec>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl Parameters {
    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self.values[self.index_of(name)]
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }
}

/// Leaf handles for every parameter on one tape, in spec order.
pub struct Binding {
    pub vars: Vec<Var>,
}

enum Init {
    Randn,
    Zeros,
    Ones,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: Parameters,
}

impl Model {
    /// Build and initialize all parameters from `seed`. Weight matrices and
    /// embeddings draw N(0, init_std²); biases start at zero; layer-norm
    /// gains at one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut specs: Vec<(ParamSpec, Init)> = Vec::new();
        let mut reg = |name: &str, rows: usize, cols: usize, group: ParamGroup, init: Init| {
            specs.push((
                ParamSpec {
                    name: name.to_string(),
                    rows,
                    cols,
                    group,
                    decay: rows > 1 && cols > 1,
                },
                init,
            ));
        };

        use Init::*;
        use ParamGroup::*;
        let (d, v, dv) = (cfg.d_h, cfg.vocab, cfg.d_v);
        let m = cfg.d_h * cfg.mlp_mult;
        reg("embed.tok", v, d, Backbone, Randn);
        reg("embed.pos", cfg.context, d, Backbone, Randn);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            reg(&p("ln1.gamma"), 1, d, Backbone, Ones);
            reg(&p("ln1.beta"), 1, d, Backbone, Zeros);
            for w in ["wq", "wk", "wv", "wo"] {
                reg(&p(&format!("attn.{w}")), d, d, Backbone, Randn);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                reg(&p(&format!("attn.{b}")), 1, d, Backbone, Zeros);
            }
            reg(&p("ln2.gamma"), 1, d, Backbone, Ones);
            reg(&p("ln2.beta"), 1, d, Backbone, Zeros);
            reg(&p("mlp.w1"), d, m, Backbone, Randn);
            reg(&p("mlp.b1"), 1, m, Backbone, Zeros);
            reg(&p("mlp.w2"), m, d, Backbone, Randn);
            reg(&p("mlp.b2"), 1, d, Backbone, Zeros);
        }
        reg("final_ln.gamma", 1, d, Backbone, Ones);
        reg("final_ln.beta", 1, d, Backbone, Zeros);
        if !cfg.tie_embeddings {
            reg("lm.w", d, v, LanguageHead, Randn);
        }
        reg("lm.b", 1, v, LanguageHead, Zeros);
        reg("latent.w1", d, 2 * d, LatentHead, Randn);
        reg("latent.b1", 1, 2 * d, LatentHead, Zeros);
        reg("latent.w2", 2 * d, 2 * d, LatentHead, Randn);
        reg("latent.b2", 1, 2 * d, LatentHead, Zeros);
        reg("adapter.w1", dv, 2 * d, Adapter, Randn);
        reg("adapter.b1", 1, 2 * d, Adapter, Zeros);
        reg("adapter.w2", 2 * d, d, Adapter, Randn);
        reg("adapter.b2", 1, d, Adapter, Zeros);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.init_std).expect("init_std positive");
        let mut values = Vec::with_capacity(specs.len());
        let mut index = HashMap::new();
        let mut out_specs = Vec::with_capacity(specs.len());
        for (i, (spec, init)) in specs.into_iter().enumerate() {
            let mat = match init {
                Randn => Mat::from_fn(spec.rows, spec.cols, |_, _| normal.sample(&mut rng)),
                Zeros => Mat::zeros(spec.rows, spec.cols),
                Ones => Mat::from_vec(spec.rows, spec.cols, vec![1.0; spec.rows * spec.cols]),
            };
            index.insert(spec.name.clone(), i);
            values.push(mat);
            out_specs.push(spec);
        }
        Ok(Model {
            cfg: cfg.clone(),
            params: Parameters {
                specs: out_specs,
                values,
                index,
            },
        })
    }

    /// Push every parameter onto `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self
                .params
                .values
                .iter()
                .map(|m| tape.leaf(m.clone()))
                .collect(),
        }
    }

    /// Leaf handle for a named parameter under `binding`.
    pub fn v(&self, binding: &Binding, name: &str) -> Var {
        binding.vars[self.params.index_of(name)]
    }

    /// Gather token-embedding rows for `ids`.
    pub fn embed_tokens(&self, t: &mut Tape, b: &Binding, ids: &[TokenId]) -> Var {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        t.gather(self.v(b, "embed.tok"), &idx)
    }

    fn block(&self, t: &mut Tape, b: &Binding, l: usize, h: Var) -> Var {
        let p = |s: &str| format!("layer{l}.{s}");
        let hd = self.cfg.head_dim();

        let a = t.layer_norm(h, self.v(b, &p("ln1.gamma")), self.v(b, &p("ln1.beta")));
        let q = linear(t, a, self.v(b, &p("attn.wq")), self.v(b, &p("attn.bq")));
        let k = linear(t, a, self.v(b, &p("attn.wk")), self.v(b, &p("attn.bk")));
        let v = linear(t, a, self.v(b, &p("attn.wv")), self.v(b, &p("attn.bv")));
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for i in 0..self.cfg.heads {
            let qh = t.slice_cols(q, i * hd, hd);
            let kh = t.slice_cols(k, i * hd, hd);
            let vh = t.slice_cols(v, i * hd, hd);
            let scores = t.matmul_bt(qh, kh);
            let scores = t.scale(scores, 1.0 / (hd as f64).sqrt());
            let probs = t.causal_softmax(scores);
            heads.push(t.matmul(probs, vh));
        }
        let o = t.concat_cols(&heads);
        let o = linear(t, o, self.v(b, &p("attn.wo")), self.v(b, &p("attn.bo")));
        let h = t.add(h, o);

        let a2 = t.layer_norm(h, self.v(b, &p("ln2.gamma")), self.v(b, &p("ln2.beta")));
        let u = linear(t, a2, self.v(b, &p("mlp.w1")), self.v(b, &p("mlp.b1")));
        let u = t.gelu(u);
        let u = linear(t, u, self.v(b, &p("mlp.w2")), self.v(b, &p("mlp.b2")));
        t.add(h, u)
    }

    /// Whole-sequence causal pass: `x` is T×d_h raw input embeddings (token
    /// rows or latent states); returns final-norm hidden states, T×d_h.
    /// Position t of the output depends only on input rows 0..=t.
    pub fn forward_hidden(&self, t: &mut Tape, b: &Binding, x: Var) -> Result<Var> {
        let rows = t.val(x).rows;
        if rows > self.cfg.context {
            return Err(Error::ContextOverflow {
                got: rows,
                limit: self.cfg.context,
            });
        }
        let pos = t.slice_rows(self.v(b, "embed.pos"), 0, rows);
        let mut h = t.add(x, pos);
        for l in 0..self.cfg.layers {
            h = self.block(t, b, l, h);
        }
        Ok(t.layer_norm(h, self.v(b, "final_ln.gamma"), self.v(b, "final_ln.beta")))
    }

    /// Start an incremental sequence (cached keys/values per layer).
    pub fn begin_sequence(&self) -> IncrementalState {
        IncrementalState {
            rows: 0,
            kv: vec![None; self.cfg.layers],
        }
    }

    /// Append one raw input-embedding row (1×d_h) and return its final-norm
    /// hidden state (1×d_h). Produces exactly the same values as
    /// [`Model::forward_hidden`] over the accumulated rows.
    pub fn append_row(
        &self,
        t: &mut Tape,
        b: &Binding,
        st: &mut IncrementalState,
        x_row: Var,
    ) -> Result<Var> {
        if st.rows >= self.cfg.context {
            return Err(Error::ContextOverflow {
                got: st.rows + 1,
                limit: self.cfg.context,
            });
        }
        let hd = self.cfg.head_dim();
        let pos = t.gather(self.v(b, "embed.pos"), &[st.rows]);
        let mut h = t.add(x_row, pos);
        for l in 0..self.cfg.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let a = t.layer_norm(h, self.v(b, &p("ln1.gamma")), self.v(b, &p("ln1.beta")));
            let q = linear(t, a, self.v(b, &p("attn.wq")), self.v(b, &p("attn.bq")));
            let k = linear(t, a, self.v(b, &p("attn.wk")), self.v(b, &p("attn.bk")));
            let v = linear(t, a, self.v(b, &p("attn.wv")), self.v(b, &p("attn.bv")));
            let (k_all, v_all) = match st.kv[l].take() {
                None => (k, v),
                Some((pk, pv)) => (t.concat_rows(&[pk, k]), t.concat_rows(&[pv, v])),
            };
            st.kv[l] = Some((k_all, v_all));

            let mut heads = Vec::with_capacity(self.cfg.heads);
            for i in 0..self.cfg.heads {
                let qh = t.slice_cols(q, i * hd, hd);
                let kh = t.slice_cols(k_all, i * hd, hd);
                let vh = t.slice_cols(v_all, i * hd, hd);
                let scores = t.matmul_bt(qh, kh);
                let scores = t.scale(scores, 1.0 / (hd as f64).sqrt());
                let probs = t.softmax_rows(scores);
                heads.push(t.matmul(probs, vh));
            }
            let o = t.concat_cols(&heads);
            let o = linear(t, o, self.v(b, &p("attn.wo")), self.v(b, &p("attn.bo")));
            h = t.add(h, o);

            let a2 = t.layer_norm(h, self.v(b, &p("ln2.gamma")), self.v(b, &p("ln2.beta")));
            let u = linear(t, a2, self.v(b, &p("mlp.w1")), self.v(b, &p("mlp.b1")));
            let u = t.gelu(u);
            let u = linear(t, u, self.v(b, &p("mlp.w2")), self.v(b, &p("mlp.b2")));
            h = t.add(h, u);
        }
        st.rows += 1;
        Ok(t.layer_norm(h, self.v(b, "final_ln.gamma"), self.v(b, "final_ln.beta")))
    }

    /// Posterior parameters from hidden rows: 2-layer MLP splitting into
    /// (μ, log σ) with log σ clamped to the configured band.
    pub fn latent_head(&self, t: &mut Tape, b: &Binding, h: Var) -> (Var, Var) {
        let u = linear(t, h, self.v(b, "latent.w1"), self.v(b, "latent.b1"));
        let u = t.gelu(u);
        let u = linear(t, u, self.v(b, "latent.w2"), self.v(b, "latent.b2"));
        let mu = t.slice_cols(u, 0, self.cfg.d_h);
        let raw = t.slice_cols(u, self.cfg.d_h, self.cfg.d_h);
        let (lo, hi) = self.cfg.logsigma_clamp;
        (mu, t.clamp(raw, lo, hi))
    }

    /// Vocabulary logits from d_h rows (latent states or hidden states).
    pub fn language_head(&self, t: &mut Tape, b: &Binding, x: Var) -> Var {
        let logits = if self.cfg.tie_embeddings {
            t.matmul_bt(x, self.v(b, "embed.tok"))
        } else {
            t.matmul(x, self.v(b, "lm.w"))
        };
        t.add_row(logits, self.v(b, "lm.b"))
    }

    /// Prior anchors from visual embeddings: 2-layer MLP d_v → d_h.
    pub fn adapter(&self, t: &mut Tape, b: &Binding, v: Var) -> Result<Var> {
        if t.val(v).cols != self.cfg.d_v {
            return Err(Error::Config(format!(
                "adapter input dimension {} does not match d_v {}",
                t.val(v).cols,
                self.cfg.d_v
            )));
        }
        let u = linear(t, v, self.v(b, "adapter.w1"), self.v(b, "adapter.b1"));
        let u = t.gelu(u);
        Ok(linear(t, u, self.v(b, "adapter.w2"), self.v(b, "adapter.b2")))
    }
}

/// Cached keys/values per layer for the incremental pass.
pub struct IncrementalState {
    rows: usize,
    kv: Vec<Option<(Var, Var)>>,
}

impl IncrementalState {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Reparametrized sample `z = μ + exp(log σ) ⊙ ε`; gradient flows to μ and
/// log σ, never to ε.
pub fn sample_latent(t: &mut Tape, mu: Var, log_sigma: Var, eps: &Mat) -> Var {
    let sigma = t.exp(log_sigma);
    let e = t.constant(eps.clone());
    let noise = t.mul(sigma, e);
    t.add(mu, noise)
}

/// Index bookkeeping for one training sequence
/// `[Q tokens] ++ [z_1 … z_K] ++ [SEP_REASON] ++ [answer tokens]`.
///
/// `latent_feed[i]` is the position whose hidden state parameterizes
/// z_{i+1}: the last question position, then each z position except the
/// last. `sep_feed` is the position whose latent head drives the
/// termination check (z_K, or the last question position when K = 0);
/// `answer_targets` pairs each feed position with the token it must
/// predict: a_1 from the SEP position through EOS from the final answer
/// position.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePlan {
    pub question_len: usize,
    pub k: usize,
    pub answer_len: usize,
    pub seq_len: usize,
    pub latent_feed: Vec<usize>,
    pub sep_feed: usize,
    pub sep_pos: usize,
    pub answer_targets: Vec<(usize, TokenId)>,
}

/// Plan the training sequence layout for a sample with `k` latent slots.
pub fn plan_sequence(
    cfg: &ModelConfig,
    question: &[TokenId],
    k: usize,
    answer: &[TokenId],
) -> Result<SequencePlan> {
    if question.is_empty() || answer.is_empty() {
        return Err(Error::Config("question and answer must be non-empty".into()));
    }
    let l_q = question.len();
    let l_a = answer.len();
    let seq_len = l_q + k + 1 + l_a;
    if seq_len > cfg.context {
        return Err(Error::ContextOverflow {
            got: seq_len,
            limit: cfg.context,
        });
    }
    let sep_pos = l_q + k;
    let latent_feed: Vec<usize> = (0..k).map(|i| l_q - 1 + i).collect();
    // Position of z_K for k ≥ 1; the last question position for k = 0.
    let sep_feed = l_q + k - 1;
    let mut answer_targets = Vec::with_capacity(l_a + 1);
    for (i, &a) in answer.iter().enumerate() {
        answer_targets.push((sep_pos + i, a));
    }
    answer_targets.push((sep_pos + l_a, EOS));
    Ok(SequencePlan {
        question_len: l_q,
        k,
        answer_len: l_a,
        seq_len,
        latent_feed,
        sep_feed,
        sep_pos,
        answer_targets,
    })
}

/// The token the termination check must decode.
pub const TERMINATION_TARGET: TokenId = SEP_REASON;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_h: 16,
            layers: 2,
            heads: 2,
            context: 32,
            vocab: 11,
            d_v: 12,
            mlp_mult: 2,
            ..ModelConfig::default()
        }
    }

    fn rand_rows(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut c = small_cfg();
        c.d_h = 15;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.vocab = 3;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.logsigma_clamp = (2.0, -5.0);
        assert!(c.validate().is_err());
        assert!(small_cfg().validate().is_ok());
    }

    #[test]
    fn init_is_seed_deterministic_and_groups_are_covered() {
        let a = Model::init(&small_cfg(), 3).unwrap();
        let b = Model::init(&small_cfg(), 3).unwrap();
        let c = Model::init(&small_cfg(), 4).unwrap();
        for ((x, y), z) in a
            .params
            .values()
            .iter()
            .zip(b.params.values())
            .zip(c.params.values())
        {
            assert_eq!(x.data, y.data);
            let _ = z;
        }
        assert_ne!(
            a.params.get("embed.tok").data,
            c.params.get("embed.tok").data
        );
        for g in [
            ParamGroup::Backbone,
            ParamGroup::LatentHead,
            ParamGroup::LanguageHead,
            ParamGroup::Adapter,
        ] {
            assert!(a.params.specs().iter().any(|s| s.group == g));
        }
        // Bias rows never receive weight decay, matrices do.
        assert!(a.params.specs().iter().all(|s| s.decay == (s.rows > 1 && s.cols > 1)));
    }

    #[test]
    fn forward_hidden_shape_determinism_and_causality() {
        let model = Model::init(&small_cfg(), 1).unwrap();
        let x = rand_rows(6, 16, 9);

        let run = |input: &Mat| -> Mat {
            let mut t = Tape::new();
            let b = model.bind(&mut t);
            let xv = t.constant(input.clone());
            let h = model.forward_hidden(&mut t, &b, xv).unwrap();
            t.val(h).clone()
        };
        let h1 = run(&x);
        let h2 = run(&x);
        assert_eq!(h1.rows, 6);
        assert_eq!(h1.cols, 16);
        assert_eq!(h1.data, h2.data, "same weights and input ⇒ same hiddens");

        // Perturb rows ≥ 4: hidden states for positions 0..4 must not move.
        let mut y = x.clone();
        for r in 4..6 {
            for c in 0..16 {
                y.set(r, c, y.get(r, c) + 0.37);
            }
        }
        let h3 = run(&y);
        for r in 0..4 {
            assert_eq!(h1.row(r), h3.row(r), "row {r} changed under suffix edit");
        }
        assert_ne!(h1.row(4), h3.row(4));
    }

    #[test]
    fn context_overflow_is_reported() {
        let model = Model::init(&small_cfg(), 1).unwrap();
        let mut t = Tape::new();
        let b = model.bind(&mut t);
        let xv = t.constant(rand_rows(33, 16, 5));
        match model.forward_hidden(&mut t, &b, xv) {
            Err(Error::ContextOverflow { got, limit }) => {
                assert_eq!((got, limit), (33, 32));
            }
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn incremental_pass_matches_batch_pass_bitwise() {
        let model = Model::init(&small_cfg(), 2).unwrap();
        let x = rand_rows(7, 16, 13);

        let mut t = Tape::new();
        let b = model.bind(&mut t);
        let xv = t.constant(x.clone());
        let batch = model.forward_hidden(&mut t, &b, xv).unwrap();
        let batch_val = t.val(batch).clone();

        let mut t2 = Tape::new();
        let b2 = model.bind(&mut t2);
        let mut st = model.begin_sequence();
        for r in 0..7 {
            let row = t2.constant(Mat::from_vec(1, 16, x.row(r).to_vec()));
            let h = model.append_row(&mut t2, &b2, &mut st, row).unwrap();
            assert_eq!(
                t2.val(h).data,
                batch_val.row(r).to_vec(),
                "incremental row {r} differs from batch pass"
            );
        }
        assert_eq!(st.rows(), 7);
    }

    #[test]
    fn latent_head_respects_clamp_and_determinism() {
        let model = Model::init(&small_cfg(), 7).unwrap();
        let mut t = Tape::new();
        let b = model.bind(&mut t);
        // Large inputs push the raw log σ far outside the clamp band.
        let h = t.constant(rand_rows(5, 16, 21));
        let h = t.scale(h, 50.0);
        let (mu, ls) = model.latent_head(&mut t, &b, h);
        assert_eq!(t.val(mu).cols, 16);
        for &v in &t.val(ls).data {
            assert!((-5.0..=2.0).contains(&v), "log σ {v} escapes clamp");
        }
        let (mu2, ls2) = model.latent_head(&mut t, &b, h);
        assert_eq!(t.val(mu).data, t.val(mu2).data);
        assert_eq!(t.val(ls).data, t.val(ls2).data);
    }

    #[test]
    fn sample_latent_identity_cases_and_moments() {
        let model = Model::init(&small_cfg(), 7).unwrap();
        let d = model.cfg.d_h;
        let mut t = Tape::new();
        let mu = t.leaf(rand_rows(1, d, 3));
        let ls = t.leaf(rand_rows(1, d, 4));
        // ε = 0 ⇒ z == μ exactly.
        let z0 = sample_latent(&mut t, mu, ls, &Mat::zeros(1, d));
        assert_eq!(t.val(z0).data, t.val(mu).data);
        // Clamp floor: |z − μ| ≤ e⁻⁵·|ε| per coordinate.
        let floor = t.constant(Mat::from_vec(1, d, vec![-5.0; d]));
        let eps = rand_rows(1, d, 5);
        let zf = sample_latent(&mut t, mu, floor, &eps);
        for i in 0..d {
            let dev = (t.val(zf).data[i] - t.val(mu).data[i]).abs();
            assert!(dev <= (-5.0f64).exp() * eps.data[i].abs() + 1e-15);
        }

        // Sample moments match (μ, exp(2·log σ)) within 3 standard errors.
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let (mu_v, ls_v) = (t.val(mu).data.clone(), t.val(ls).data.clone());
        for i in [0usize, d - 1] {
            let sigma = ls_v[i].exp();
            let samples: Vec<f64> = (0..n)
                .map(|_| mu_v[i] + sigma * normal.sample(&mut rng))
                .collect();
            let mean = samples.iter().sum::<f64>() / n as f64;
            let var =
                samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            let se_mean = sigma / (n as f64).sqrt();
            assert!((mean - mu_v[i]).abs() <= 3.0 * se_mean);
            let se_var = sigma * sigma * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!((var - sigma * sigma).abs() <= 3.0 * se_var);
        }
    }

    #[test]
    fn reparametrization_gradient_identity() {
        // dz/dμ = I and dz/d logσ = diag(exp(logσ)⊙ε): check via the tape
        // against the analytic values.
        let d = 4;
        let mut t = Tape::new();
        let mu = t.leaf(rand_rows(1, d, 31));
        let ls = t.leaf(rand_rows(1, d, 32));
        let eps = rand_rows(1, d, 33);
        let z = sample_latent(&mut t, mu, ls, &eps);
        // Scalar probe Σ c·z picks out one row of the Jacobian combination.
        let c = rand_rows(1, d, 34);
        let cv = t.constant(c.clone());
        let probe = t.mul(z, cv);
        let s = t.sum(probe);
        t.backward(s);
        let gmu = t.grad(mu).unwrap().clone();
        let gls = t.grad(ls).unwrap().clone();
        for i in 0..d {
            assert!((gmu.data[i] - c.data[i]).abs() < 1e-12);
            let expected = c.data[i] * t.val(ls).data[i].exp() * eps.data[i];
            assert!((gls.data[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn language_head_uniform_at_zero_and_normalized() {
        let mut cfg = small_cfg();
        cfg.init_std = 0.5; // irrelevant to this test, nonzero weights
        let model = Model::init(&cfg, 11).unwrap();
        let mut t = Tape::new();
        let b = model.bind(&mut t);
        let zero = t.constant(Mat::zeros(1, cfg.d_h));
        let logits = model.language_head(&mut t, &b, zero);
        assert_eq!(t.val(logits).cols, cfg.vocab);
        // Zero input and zero bias ⇒ all logits equal ⇒ uniform softmax.
        let mut probs = t.val(logits).data.clone();
        crate::math::softmax_in_place(&mut probs);
        for &p in &probs {
            assert!((p - 1.0 / cfg.vocab as f64).abs() < 1e-9);
        }
        let x = t.constant(rand_rows(3, cfg.d_h, 8));
        let l2 = model.language_head(&mut t, &b, x);
        for r in 0..3 {
            let mut p = t.val(l2).row(r).to_vec();
            crate::math::softmax_in_place(&mut p);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn tied_embeddings_share_the_token_table() {
        let mut cfg = small_cfg();
        cfg.tie_embeddings = true;
        let model = Model::init(&cfg, 5).unwrap();
        assert!(!model.params.specs().iter().any(|s| s.name == "lm.w"));
        let mut t = Tape::new();
        let b = model.bind(&mut t);
        let x = t.constant(rand_rows(2, cfg.d_h, 12));
        let logits = model.language_head(&mut t, &b, x);
        // Oracle: x @ embed.tokᵀ + bias.
        let emb = model.params.get("embed.tok");
        let expect = t.val(x).matmul_bt(emb);
        for r in 0..2 {
            for c in 0..cfg.vocab {
                let want = expect.get(r, c) + model.params.get("lm.b").data[c];
                assert!((t.val(logits).get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adapter_maps_d_v_to_d_h_and_rejects_mismatch() {
        let model = Model::init(&small_cfg(), 5).unwrap();
        let mut t = Tape::new();
        let b = model.bind(&mut t);
        let v = t.constant(rand_rows(3, model.cfg.d_v, 2));
        let out = model.adapter(&mut t, &b, v).unwrap();
        assert_eq!(t.val(out).cols, model.cfg.d_h);
        assert_eq!(t.val(out).rows, 3);
        let bad = t.constant(rand_rows(1, model.cfg.d_v + 1, 2));
        assert!(model.adapter(&mut t, &b, bad).is_err());
    }

    #[test]
    fn sequence_plan_layout() {
        let cfg = small_cfg();
        // K = 2: [q0 q1 q2] [z1 z2] [sep] [a1] → length 7.
        let plan = plan_sequence(&cfg, &[5, 6, 7], 2, &[8]).unwrap();
        assert_eq!(plan.seq_len, 3 + 2 + 1 + 1);
        assert_eq!(plan.latent_feed, vec![2, 3], "last Q then z_1");
        assert_eq!(plan.sep_feed, 4, "z_2 position feeds the termination check");
        assert_eq!(plan.sep_pos, 5);
        assert_eq!(plan.answer_targets, vec![(5, 8), (6, EOS)]);

        // K = 0 degenerate: [Q][SEP][A].
        let plan = plan_sequence(&cfg, &[5, 6], 0, &[8, 9]).unwrap();
        assert_eq!(plan.seq_len, 5); // question ++ separator ++ answer, no latents
        assert!(plan.latent_feed.is_empty());
        assert_eq!(plan.sep_feed, 1, "last question position");
        assert_eq!(plan.sep_pos, 2);
        assert_eq!(plan.answer_targets, vec![(2, 8), (3, 9), (4, EOS)]);

        // Context overflow propagates.
        let long: Vec<TokenId> = (0..40).map(|_| 5).collect();
        assert!(matches!(
            plan_sequence(&cfg, &long, 1, &[8]),
            Err(Error::ContextOverflow { .. })
        ));
    }
}
