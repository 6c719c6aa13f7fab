//! Inference: a latent reasoning phase with learned termination, then
//! autoregressive answer generation.
//!
//! Phase 1 repeats up to `k_max` times: sample a candidate latent from the
//! posterior at the end of the running sequence, decode a representative
//! token from it through the language head, and stop — without appending
//! the candidate — as soon as that token is the reasoning terminator `###`.
//! Otherwise the latent joins the sequence and the loop continues. The
//! representative token is used only for the termination test; it is never
//! fed back. Phase 2 appends the terminator embedding and generates answer
//! tokens until `<eos>` or a length cap.
//!
//! Inference consumes only the question tokens and the model weights; it
//! never touches rendering or the vision encoder (the audit counters in
//! [`crate::audit`] let tests assert this).

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocabulary, EOS, SEP_REASON};
use crate::math::{softmax_in_place, Mat};
use crate::model::{sample_latent, Binding, IncrementalState, Model};
use crate::objective::Modeling;
use crate::tape::{Tape, Var};
use crate::{Error, Result};

/// Token-selection policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Decode {
    /// Highest-probability token (ties broken toward the lowest id).
    Greedy,
    /// Sample from the smallest probability-sorted prefix whose mass
    /// reaches `top_p`, after temperature scaling.
    Nucleus { top_p: f64, temperature: f64 },
}

impl Default for Decode {
    fn default() -> Self {
        Decode::Nucleus {
            top_p: 0.9,
            temperature: 1.0,
        }
    }
}

impl Decode {
    pub fn validate(&self) -> Result<()> {
        if let Decode::Nucleus { top_p, temperature } = self {
            if !(*top_p > 0.0 && *top_p <= 1.0) {
                return Err(Error::Config(format!("top_p {top_p} outside (0, 1]")));
            }
            if temperature.is_nan() || *temperature <= 0.0 {
                return Err(Error::Config(format!(
                    "temperature {temperature} must be positive"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Latent-step budget; a run that exhausts it is flagged truncated.
    pub k_max: usize,
    pub max_answer_len: usize,
    pub decode: Decode,
    /// Probabilistic: sample each latent; deterministic: use the mean.
    pub modeling: Modeling,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            k_max: 6,
            max_answer_len: 8,
            decode: Decode::default(),
            modeling: Modeling::Probabilistic,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if self.max_answer_len == 0 {
            return Err(Error::Config("max_answer_len must be at least 1".into()));
        }
        self.decode.validate()
    }
}

/// Result of the reasoning phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReasonOut {
    /// Number of latent states committed to the sequence.
    pub steps: usize,
    /// True when the step budget ran out before the terminator appeared.
    pub truncated: bool,
}

/// Full inference result for one question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferOutcome {
    pub answer: Vec<TokenId>,
    pub reasoning_length: usize,
    pub truncated: bool,
}

/// One line of the inference output stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRecord {
    pub id: String,
    pub answer: String,
    pub reasoning_length: usize,
    pub truncated: bool,
}

/// Select a token id from a logits row.
pub fn decode_token(logits: &[f64], decode: Decode, rng: &mut impl Rng) -> TokenId {
    match decode {
        Decode::Greedy => {
            let mut best = 0usize;
            for (i, &x) in logits.iter().enumerate() {
                if x > logits[best] {
                    best = i;
                }
            }
            best as TokenId
        }
        Decode::Nucleus { top_p, temperature } => {
            let mut p: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
            softmax_in_place(&mut p);
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| {
                p[b].partial_cmp(&p[a]).expect("finite probs").then(a.cmp(&b))
            });
            let mut cut = order.len();
            let mut cum = 0.0;
            for (i, &j) in order.iter().enumerate() {
                cum += p[j];
                if cum >= top_p {
                    cut = i + 1;
                    break;
                }
            }
            let kept = &order[..cut];
            let mass: f64 = kept.iter().map(|&j| p[j]).sum();
            let mut u = rng.gen::<f64>() * mass;
            for &j in kept {
                u -= p[j];
                if u <= 0.0 {
                    return j as TokenId;
                }
            }
            kept[kept.len() - 1] as TokenId
        }
    }
}

/// An in-progress generation over one growing sequence.
pub struct Session<'m> {
    model: &'m Model,
    tape: Tape,
    binding: Binding,
    state: IncrementalState,
    last_hidden: Var,
}

impl<'m> Session<'m> {
    /// Feed the question tokens. Fails fast if the worst-case sequence
    /// (question + k_max latents + terminator + answer budget) cannot fit
    /// the context window, so generation itself can never overflow.
    pub fn new(model: &'m Model, question: &[TokenId], cfg: &InferConfig) -> Result<Session<'m>> {
        cfg.validate()?;
        if question.is_empty() {
            return Err(Error::Config("empty question".into()));
        }
        let worst = question.len() + cfg.k_max + 1 + cfg.max_answer_len;
        if worst > model.cfg.context {
            return Err(Error::ContextOverflow {
                got: worst,
                limit: model.cfg.context,
            });
        }
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let mut state = model.begin_sequence();
        let mut last_hidden = None;
        for &q in question {
            let row = model.embed_tokens(&mut tape, &binding, &[q]);
            last_hidden = Some(model.append_row(&mut tape, &binding, &mut state, row)?);
        }
        Ok(Session {
            model,
            tape,
            binding,
            state,
            last_hidden: last_hidden.expect("question checked non-empty"),
        })
    }

    /// Phase 1: commit latent states until the terminator is decoded from a
    /// candidate (which is then discarded) or the budget runs out.
    pub fn reason(&mut self, cfg: &InferConfig, rng: &mut impl Rng) -> Result<ReasonOut> {
        let normal = rand_distr::StandardNormal;
        let mut steps = 0usize;
        loop {
            if steps == cfg.k_max {
                return Ok(ReasonOut {
                    steps,
                    truncated: true,
                });
            }
            let (mu, log_sigma) =
                self.model
                    .latent_head(&mut self.tape, &self.binding, self.last_hidden);
            let z = match cfg.modeling {
                Modeling::Probabilistic => {
                    let eps =
                        Mat::from_fn(1, self.model.cfg.d_h, |_, _| normal.sample(rng));
                    sample_latent(&mut self.tape, mu, log_sigma, &eps)
                }
                Modeling::Deterministic => mu,
            };
            let logits = self
                .model
                .language_head(&mut self.tape, &self.binding, z);
            let rep = decode_token(self.tape.val(logits).row(0), cfg.decode, rng);
            if rep == SEP_REASON {
                return Ok(ReasonOut {
                    steps,
                    truncated: false,
                });
            }
            self.last_hidden =
                self.model
                    .append_row(&mut self.tape, &self.binding, &mut self.state, z)?;
            steps += 1;
        }
    }

    /// Phase 2: append the terminator embedding and generate answer tokens
    /// until `<eos>` or the length cap.
    pub fn answer(&mut self, cfg: &InferConfig, rng: &mut impl Rng) -> Result<Vec<TokenId>> {
        let sep = self
            .model
            .embed_tokens(&mut self.tape, &self.binding, &[SEP_REASON]);
        self.last_hidden =
            self.model
                .append_row(&mut self.tape, &self.binding, &mut self.state, sep)?;
        let mut out = Vec::new();
        while out.len() < cfg.max_answer_len {
            let logits =
                self.model
                    .language_head(&mut self.tape, &self.binding, self.last_hidden);
            let tok = decode_token(self.tape.val(logits).row(0), cfg.decode, rng);
            if tok == EOS {
                break;
            }
            out.push(tok);
            if out.len() == cfg.max_answer_len {
                break;
            }
            let row = self
                .model
                .embed_tokens(&mut self.tape, &self.binding, &[tok]);
            self.last_hidden =
                self.model
                    .append_row(&mut self.tape, &self.binding, &mut self.state, row)?;
        }
        Ok(out)
    }
}

/// End-to-end inference for one question.
pub fn reason_and_answer(
    model: &Model,
    question: &[TokenId],
    cfg: &InferConfig,
    rng: &mut impl Rng,
) -> Result<InferOutcome> {
    let mut session = Session::new(model, question, cfg)?;
    let reason = session.reason(cfg, rng)?;
    let answer = session.answer(cfg, rng)?;
    Ok(InferOutcome {
        answer,
        reasoning_length: reason.steps,
        truncated: reason.truncated,
    })
}

/// Explicit-chain generation for the token-level baseline: emit reasoning
/// tokens until `###` (or `max_reason_len`, flagged truncated), then answer
/// tokens until `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CotOutcome {
    pub reasoning: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub truncated: bool,
}

pub fn generate_cot(
    model: &Model,
    question: &[TokenId],
    max_reason_len: usize,
    max_answer_len: usize,
    decode: Decode,
    rng: &mut impl Rng,
) -> Result<CotOutcome> {
    decode.validate()?;
    if question.is_empty() {
        return Err(Error::Config("empty question".into()));
    }
    let worst = question.len() + max_reason_len + 1 + max_answer_len;
    if worst > model.cfg.context {
        return Err(Error::ContextOverflow {
            got: worst,
            limit: model.cfg.context,
        });
    }
    let mut t = Tape::new();
    let b = model.bind(&mut t);
    let mut st = model.begin_sequence();
    let mut last = None;
    for &q in question {
        let row = model.embed_tokens(&mut t, &b, &[q]);
        last = Some(model.append_row(&mut t, &b, &mut st, row)?);
    }
    let mut reasoning = Vec::new();
    let mut truncated = false;
    loop {
        if reasoning.len() == max_reason_len {
            truncated = true;
            break;
        }
        let logits = model.language_head(&mut t, &b, last.expect("fed question"));
        let tok = decode_token(t.val(logits).row(0), decode, rng);
        if tok == SEP_REASON {
            break;
        }
        reasoning.push(tok);
        let row = model.embed_tokens(&mut t, &b, &[tok]);
        last = Some(model.append_row(&mut t, &b, &mut st, row)?);
    }
    let sep = model.embed_tokens(&mut t, &b, &[SEP_REASON]);
    last = Some(model.append_row(&mut t, &b, &mut st, sep)?);
    let mut answer = Vec::new();
    while answer.len() < max_answer_len {
        let logits = model.language_head(&mut t, &b, last.expect("sep appended"));
        let tok = decode_token(t.val(logits).row(0), decode, rng);
        if tok == EOS {
            break;
        }
        answer.push(tok);
        if answer.len() == max_answer_len {
            break;
        }
        let row = model.embed_tokens(&mut t, &b, &[tok]);
        last = Some(model.append_row(&mut t, &b, &mut st, row)?);
    }
    Ok(CotOutcome {
        reasoning,
        answer,
        truncated,
    })
}

/// Render an outcome as an output record.
pub fn record(vocab: &Vocabulary, id: &str, outcome: &InferOutcome) -> InferRecord {
    InferRecord {
        id: id.to_string(),
        answer: vocab.detokenize(&outcome.answer),
        reasoning_length: outcome.reasoning_length,
        truncated: outcome.truncated,
    }
}

pub fn save_records(path: &Path, records: &[InferRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<InferRecord>> {
    let file = std::fs::File::open(path)?;
    std::io::BufReader::new(file)
        .lines()
        .map(|line| Ok(serde_json::from_str(&line?)?))
        .collect()
}
