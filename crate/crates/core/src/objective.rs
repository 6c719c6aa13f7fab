//! Training losses.
//!
//! Four ingredients combine into the per-sample objective:
//!
//! * **answer CE** — cross-entropy of the answer phase. The first term asks
//!   the language head, applied to a latent state sampled from the posterior
//!   at the end of the reasoning phase, to decode the reasoning terminator
//!   `###`; the remaining terms are next-token CE over the answer tokens and
//!   the closing `<eos>`, read from hidden states. This trains exactly the
//!   decision rule inference uses to stop reasoning.
//! * **reasoning CE** — each latent state must decode the tokens of the
//!   reasoning segment it stands for, either all of them (`sum_all`,
//!   normalized by total token count) or one uniformly drawn token per
//!   segment (`sample_one`).
//! * **KL regularizer** — divergence of the posterior `N(μ_k, diag σ_k²)`
//!   from the prior `N(ẑ_k, I)` anchored at the adapted visual embedding of
//!   the rendered segment (or the mean token embedding in text-prior mode).
//!   The closed form is implemented as commonly printed,
//!   `(‖μ−ẑ‖² + ‖σ‖²)/2 − Σ log σ`, which exceeds the exact Gaussian KL by
//!   the constant `d/2`; an `exact_kl` switch subtracts it. Constants do not
//!   affect gradients. The Monte-Carlo estimator `½‖z−ẑ‖² − Σ log σ` reuses
//!   the already-sampled latent and is unbiased for the printed form.
//! * **explicit-chain MLE** — the baseline objective over explicit reasoning
//!   tokens (reasoning CE + answer CE on a fully tokenized sequence).
//!
//! Masks gate the reasoning and KL terms so every learning-paradigm ablation
//! is one configuration away: `total = answer + use_reasoning·reasoning +
//! use_kl·β·kl`. Per-step KL values are averaged over the K steps so β keeps
//! one meaning across samples with different segment counts.

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, Segments, TokenId, EOS, SEP_REASON};
use crate::math::{log_sum_exp, Mat};
use crate::model::{plan_sequence, sample_latent, Binding, Model, SequencePlan};
use crate::tape::{Tape, Var};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Reference scalar forms (used directly in tests and as cross-checks for the
// tape graph; kept dependency-free on purpose).
// ---------------------------------------------------------------------------

fn check_dims(mu: &[f64], log_sigma: &[f64], anchor: &[f64]) -> Result<usize> {
    if mu.len() != log_sigma.len() || mu.len() != anchor.len() || mu.is_empty() {
        return Err(Error::Config(format!(
            "KL inputs must share a positive dimension (got {}, {}, {})",
            mu.len(),
            log_sigma.len(),
            anchor.len()
        )));
    }
    Ok(mu.len())
}

/// Closed-form KL as commonly printed: `(‖μ−ẑ‖² + ‖σ‖²)/2 − Σ log σ`
/// with `σ = exp(log σ)`. Exceeds the exact Gaussian KL by `d/2`.
pub fn kl_closed(mu: &[f64], log_sigma: &[f64], anchor: &[f64]) -> Result<f64> {
    check_dims(mu, log_sigma, anchor)?;
    let mut quad = 0.0;
    let mut sig2 = 0.0;
    let mut logdet = 0.0;
    for i in 0..mu.len() {
        let d = mu[i] - anchor[i];
        quad += d * d;
        let s = log_sigma[i].exp();
        sig2 += s * s;
        logdet += log_sigma[i];
    }
    Ok(0.5 * (quad + sig2) - logdet)
}

/// Exact `KL(N(μ, diag σ²) ‖ N(ẑ, I))`: the printed form minus `d/2`.
pub fn kl_closed_exact(mu: &[f64], log_sigma: &[f64], anchor: &[f64]) -> Result<f64> {
    let d = check_dims(mu, log_sigma, anchor)?;
    Ok(kl_closed(mu, log_sigma, anchor)? - d as f64 / 2.0)
}

/// Single-sample (m = 1) estimator evaluated at a given latent:
/// `½‖z−ẑ‖² − Σ log σ`. This is the form the training graph uses when it
/// reuses the z already sampled for the reasoning loss.
pub fn kl_mc_given(z: &[f64], log_sigma: &[f64], anchor: &[f64]) -> Result<f64> {
    check_dims(z, log_sigma, anchor)?;
    let quad: f64 = z
        .iter()
        .zip(anchor)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(0.5 * quad - log_sigma.iter().sum::<f64>())
}

/// Monte-Carlo estimate of the printed closed form with `m` fresh draws,
/// plus its estimated standard error (sample std of the per-draw values over
/// √m; 0 when m = 1).
pub fn kl_mc_stats(
    mu: &[f64],
    log_sigma: &[f64],
    anchor: &[f64],
    m: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    let d = check_dims(mu, log_sigma, anchor)?;
    if m == 0 {
        return Err(Error::Config("kl_mc requires at least one sample".into()));
    }
    let normal = rand_distr::StandardNormal;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut z = vec![0.0; d];
    for _ in 0..m {
        for i in 0..d {
            let e: f64 = normal.sample(rng);
            z[i] = mu[i] + log_sigma[i].exp() * e;
        }
        let v = kl_mc_given(&z, log_sigma, anchor)?;
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / m as f64;
    let se = if m > 1 {
        let var = (sumsq - sum * sum / m as f64) / (m as f64 - 1.0);
        (var.max(0.0) / m as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

/// Monte-Carlo KL estimate (mean only; see [`kl_mc_stats`]).
pub fn kl_mc(
    mu: &[f64],
    log_sigma: &[f64],
    anchor: &[f64],
    m: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    Ok(kl_mc_stats(mu, log_sigma, anchor, m, rng)?.0)
}

/// Mean next-token CE where logits row `i` must predict `targets[i]`.
/// Callers on the latent path include the termination row (target `###`)
/// and the final `<eos>` target among the rows.
pub fn latent_answer_loss(logits: &Mat, targets: &[TokenId]) -> Result<f64> {
    if logits.rows != targets.len() || targets.is_empty() {
        return Err(Error::Config(format!(
            "answer loss needs one logits row per target ({} rows, {} targets)",
            logits.rows,
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (r, &tok) in targets.iter().enumerate() {
        let row = logits.row(r);
        total += log_sum_exp(row) - row[tok as usize];
    }
    Ok(total / targets.len() as f64)
}

/// Which reasoning tokens each latent state is graded on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningMode {
    /// Every token of every segment; normalized by the total token count.
    SumAll,
    /// One uniformly drawn token per segment; normalized by segment count.
    SampleOne,
}

/// Reasoning-reconstruction CE: logits row `k` comes from latent state
/// z_{k+1}, `segments[k]` are the tokens it stands for.
pub fn latent_reasoning_loss(
    step_logits: &Mat,
    segments: &[&[TokenId]],
    mode: ReasoningMode,
    rng: &mut impl Rng,
) -> Result<f64> {
    if step_logits.rows != segments.len() || segments.is_empty() {
        return Err(Error::Config(format!(
            "reasoning loss needs one logits row per segment ({} rows, {} segments)",
            step_logits.rows,
            segments.len()
        )));
    }
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config("empty reasoning segment".into()));
    }
    match mode {
        ReasoningMode::SumAll => {
            let mut total = 0.0;
            let mut count = 0usize;
            for (k, seg) in segments.iter().enumerate() {
                let row = step_logits.row(k);
                let lse = log_sum_exp(row);
                for &tok in *seg {
                    total += lse - row[tok as usize];
                    count += 1;
                }
            }
            Ok(total / count as f64)
        }
        ReasoningMode::SampleOne => {
            let mut total = 0.0;
            for (k, seg) in segments.iter().enumerate() {
                let row = step_logits.row(k);
                let tok = seg[rng.gen_range(0..seg.len())];
                total += log_sum_exp(row) - row[tok as usize];
            }
            Ok(total / segments.len() as f64)
        }
    }
}

// ---------------------------------------------------------------------------
// Combination and per-step configuration.
// ---------------------------------------------------------------------------

/// Which loss terms participate in the optimized total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossMask {
    pub use_kl: bool,
    pub use_reasoning: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        LossMask {
            use_kl: true,
            use_reasoning: true,
        }
    }
}

/// Probabilistic: z ~ N(μ, diag σ²) via reparametrization. Deterministic:
/// z = μ, and the regularizer degrades to ½‖μ−ẑ‖² (the log-determinant term
/// has no meaning once σ is pinned to zero, so it is dropped).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modeling {
    Probabilistic,
    Deterministic,
}

/// How the KL term is evaluated during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Reuse the sampled z: `½‖z−ẑ‖² − Σ log σ` (single-draw Monte Carlo).
    Mc,
    /// Analytic printed form.
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub mask: LossMask,
    pub beta: f64,
    pub modeling: Modeling,
    pub reasoning_mode: ReasoningMode,
    pub kl_estimator: KlEstimator,
    /// Subtract the d/2 constant so the reported KL is the exact Gaussian KL.
    pub exact_kl: bool,
    /// Stop gradients at each sampled z before it re-enters the sequence
    /// (the posterior heads still learn from their own step's losses).
    pub detach_chain: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            mask: LossMask::default(),
            beta: 1.0,
            modeling: Modeling::Probabilistic,
            reasoning_mode: ReasoningMode::SumAll,
            kl_estimator: KlEstimator::Mc,
            exact_kl: false,
            detach_chain: false,
        }
    }
}

/// Scalar loss values of one step or batch, as logged per training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub answer_ce: f64,
    pub reasoning_ce: f64,
    pub kl: f64,
    pub total: f64,
    pub beta: f64,
    pub mask: LossMask,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.answer_ce.is_finite()
            && self.reasoning_ce.is_finite()
            && self.kl.is_finite()
            && self.total.is_finite()
    }
}

/// Assemble the masked total: `answer + use_reasoning·reasoning + use_kl·β·kl`.
pub fn combine(answer_ce: f64, reasoning_ce: f64, kl: f64, mask: LossMask, beta: f64) -> LossBreakdown {
    let mut total = answer_ce;
    if mask.use_reasoning {
        total += reasoning_ce;
    }
    if mask.use_kl {
        total += beta * kl;
    }
    LossBreakdown {
        answer_ce,
        reasoning_ce,
        kl,
        total,
        beta,
        mask,
    }
}

// ---------------------------------------------------------------------------
// Differentiable per-sample graph.
// ---------------------------------------------------------------------------

/// Prior anchors ẑ_k, one per reasoning segment.
#[derive(Debug, Clone)]
pub enum Anchors {
    /// Frozen visual embeddings (1×d_v rows); the trainable adapter maps
    /// them to latent space inside the graph.
    Vision(Vec<Mat>),
    /// Precomputed latent-space rows (1×d_h), e.g. mean token embeddings of
    /// each segment under a frozen snapshot; used as-is.
    Text(Vec<Mat>),
}

impl Anchors {
    pub fn len(&self) -> usize {
        match self {
            Anchors::Vision(v) | Anchors::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All randomness a sample's graph consumes, drawn up front so the graph is
/// a deterministic function of (parameters, noise) — which is what makes
/// finite-difference checks and exact reproducibility possible.
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    /// ε rows (1×d_h): one per latent step plus one for the termination
    /// latent. Ignored in deterministic mode.
    pub eps: Vec<Mat>,
    /// `sample_one` pick per segment (index into the segment). Ignored in
    /// `sum_all` mode.
    pub picks: Vec<usize>,
}

impl NoiseSpec {
    /// Zero noise and first-token picks: z == μ everywhere.
    pub fn zeros(d_h: usize, k: usize) -> NoiseSpec {
        NoiseSpec {
            eps: (0..=k).map(|_| Mat::zeros(1, d_h)).collect(),
            picks: vec![0; k],
        }
    }

    /// Draw ε ~ N(0, I) per step (+ termination) and uniform segment picks.
    pub fn draw(d_h: usize, segments: &Segments, rng: &mut impl Rng) -> NoiseSpec {
        let k = segments.count();
        let normal = rand_distr::StandardNormal;
        let eps = (0..=k)
            .map(|_| Mat::from_fn(1, d_h, |_, _| normal.sample(rng)))
            .collect();
        let picks = segments
            .ranges
            .iter()
            .map(|&(a, b)| rng.gen_range(0..b - a))
            .collect();
        NoiseSpec { eps, picks }
    }
}

/// Tape variables for one latent step, exposed for tests and diagnostics.
pub struct StepVars {
    pub mu: Var,
    pub log_sigma: Var,
    pub z: Var,
    /// Anchor ẑ in latent space (adapter output or text row); present only
    /// when the KL term was built.
    pub anchor: Option<Var>,
    pub kl: Option<Var>,
}

/// The assembled differentiable loss of one sample.
pub struct SampleLoss {
    pub total: Var,
    pub answer_ce: Var,
    pub reasoning_ce: Var,
    pub kl: Var,
    pub plan: SequencePlan,
    pub steps: Vec<StepVars>,
    /// Logits decoding the terminator from the terminal latent (1×|V|).
    pub termination_logits: Var,
    /// Logits of the answer-phase hidden rows [###, a_1 … a_La] (La+1×|V|).
    pub answer_logits: Var,
}

impl SampleLoss {
    /// Read the scalar values out of the tape.
    pub fn breakdown(&self, t: &Tape, cfg: &ObjectiveConfig) -> LossBreakdown {
        LossBreakdown {
            answer_ce: t.scalar(self.answer_ce),
            reasoning_ce: t.scalar(self.reasoning_ce),
            kl: t.scalar(self.kl),
            total: t.scalar(self.total),
            beta: cfg.beta,
            mask: cfg.mask,
        }
    }
}

/// Build the full differentiable objective for one sample on `t`.
///
/// The sequence is grown incrementally: question rows, then K latent rows
/// (each sampled from the posterior at the previous position), then the
/// terminator and answer rows. `anchors` must cover all K segments whenever
/// the KL term is enabled; `noise` supplies every random draw.
#[allow(clippy::too_many_arguments)]
pub fn build_sample_loss(
    t: &mut Tape,
    model: &Model,
    b: &Binding,
    sample: &Sample,
    segments: &Segments,
    anchors: Option<&Anchors>,
    cfg: &ObjectiveConfig,
    noise: &NoiseSpec,
) -> Result<SampleLoss> {
    let k = segments.count();
    let d = model.cfg.d_h;
    if cfg.mask.use_kl {
        let a = anchors.ok_or_else(|| {
            Error::Config("KL term enabled but no prior anchors supplied".into())
        })?;
        if a.len() != k {
            return Err(Error::Config(format!(
                "{} anchors for {} segments",
                a.len(),
                k
            )));
        }
    }
    if cfg.modeling == Modeling::Probabilistic && noise.eps.len() != k + 1 {
        return Err(Error::Config(format!(
            "noise must provide {} ε rows (K latent steps + termination), got {}",
            k + 1,
            noise.eps.len()
        )));
    }
    if cfg.reasoning_mode == ReasoningMode::SampleOne && noise.picks.len() != k {
        return Err(Error::Config(format!(
            "sample_one needs {} segment picks, got {}",
            k,
            noise.picks.len()
        )));
    }
    for (i, &(a0, b0)) in segments.ranges.iter().enumerate() {
        if a0 >= b0 {
            return Err(Error::Config(format!("segment {i} is empty")));
        }
    }

    let plan = plan_sequence(&model.cfg, &sample.question, k, &sample.answer)?;
    let mut st = model.begin_sequence();
    let mut last_hidden: Option<Var> = None;
    for &q in &sample.question {
        let row = model.embed_tokens(t, b, &[q]);
        last_hidden = Some(model.append_row(t, b, &mut st, row)?);
    }

    // Reasoning phase: sample z_k from the posterior at the previous
    // position, regularize toward its anchor, append it to the sequence.
    let mut steps: Vec<StepVars> = Vec::with_capacity(k);
    for i in 0..k {
        let h = last_hidden.expect("question is non-empty");
        let (mu, log_sigma) = model.latent_head(t, b, h);
        let z = match cfg.modeling {
            Modeling::Probabilistic => sample_latent(t, mu, log_sigma, &noise.eps[i]),
            Modeling::Deterministic => mu,
        };
        let (anchor, kl) = if cfg.mask.use_kl {
            let zhat = match anchors.expect("validated above") {
                Anchors::Vision(rows) => {
                    let raw = t.constant(rows[i].clone());
                    model.adapter(t, b, raw)?
                }
                Anchors::Text(rows) => {
                    if rows[i].cols != d {
                        return Err(Error::Config(format!(
                            "text anchor {i} has dimension {}, expected {d}",
                            rows[i].cols
                        )));
                    }
                    t.constant(rows[i].clone())
                }
            };
            let kl = match cfg.modeling {
                Modeling::Deterministic => {
                    let diff = t.sub(mu, zhat);
                    let ss = t.sum_squares(diff);
                    t.scale(ss, 0.5)
                }
                Modeling::Probabilistic => {
                    let base = match cfg.kl_estimator {
                        KlEstimator::Mc => {
                            let diff = t.sub(z, zhat);
                            let ss = t.sum_squares(diff);
                            let half = t.scale(ss, 0.5);
                            let ld = t.sum(log_sigma);
                            let neg = t.scale(ld, -1.0);
                            t.add(half, neg)
                        }
                        KlEstimator::Closed => {
                            let dmu = t.sub(mu, zhat);
                            let quad = t.sum_squares(dmu);
                            let sigma = t.exp(log_sigma);
                            let sig2 = t.sum_squares(sigma);
                            let s = t.add(quad, sig2);
                            let half = t.scale(s, 0.5);
                            let ld = t.sum(log_sigma);
                            let neg = t.scale(ld, -1.0);
                            t.add(half, neg)
                        }
                    };
                    if cfg.exact_kl {
                        let c = t.constant(Mat::from_vec(1, 1, vec![-(d as f64) / 2.0]));
                        t.add(base, c)
                    } else {
                        base
                    }
                }
            };
            (Some(zhat), Some(kl))
        } else {
            (None, None)
        };
        steps.push(StepVars {
            mu,
            log_sigma,
            z,
            anchor,
            kl,
        });
        let feed = if cfg.detach_chain { t.detach(z) } else { z };
        last_hidden = Some(model.append_row(t, b, &mut st, feed)?);
    }

    // Termination: sample the latent the model would produce next and ask
    // the language head to decode the terminator from it — the same test
    // inference applies at every reasoning step.
    let h_term = last_hidden.expect("question is non-empty");
    let (mu_t, ls_t) = model.latent_head(t, b, h_term);
    let z_t = match cfg.modeling {
        Modeling::Probabilistic => sample_latent(t, mu_t, ls_t, &noise.eps[k]),
        Modeling::Deterministic => mu_t,
    };
    let termination_logits = model.language_head(t, b, z_t);
    let term_ce = t.ce_sum(termination_logits, &[(0, SEP_REASON as usize)]);

    // Answer phase: append the terminator and answer rows, grade next-token
    // prediction through <eos>.
    let mut answer_hiddens = Vec::with_capacity(plan.answer_len + 1);
    let sep_row = model.embed_tokens(t, b, &[SEP_REASON]);
    answer_hiddens.push(model.append_row(t, b, &mut st, sep_row)?);
    for &a in &sample.answer {
        let row = model.embed_tokens(t, b, &[a]);
        answer_hiddens.push(model.append_row(t, b, &mut st, row)?);
    }
    debug_assert_eq!(st.rows(), plan.seq_len);
    let stacked = t.concat_rows(&answer_hiddens);
    let answer_logits = model.language_head(t, b, stacked);
    let mut pairs: Vec<(usize, usize)> = sample
        .answer
        .iter()
        .enumerate()
        .map(|(i, &a)| (i, a as usize))
        .collect();
    pairs.push((plan.answer_len, EOS as usize));
    let ans_sum = t.ce_sum(answer_logits, &pairs);
    let with_term = t.add(ans_sum, term_ce);
    let answer_ce = t.scale(with_term, 1.0 / (plan.answer_len + 2) as f64);

    // Reasoning reconstruction from the latent states themselves.
    let reasoning_ce = if k > 0 {
        let zrows: Vec<Var> = steps.iter().map(|s| s.z).collect();
        let zstack = t.concat_rows(&zrows);
        let zlogits = model.language_head(t, b, zstack);
        match cfg.reasoning_mode {
            ReasoningMode::SumAll => {
                let mut pairs = Vec::new();
                for (i, &(a0, b0)) in segments.ranges.iter().enumerate() {
                    for &tok in &sample.reasoning[a0..b0] {
                        pairs.push((i, tok as usize));
                    }
                }
                let n = pairs.len();
                let s = t.ce_sum(zlogits, &pairs);
                t.scale(s, 1.0 / n as f64)
            }
            ReasoningMode::SampleOne => {
                let pairs: Vec<(usize, usize)> = segments
                    .ranges
                    .iter()
                    .enumerate()
                    .map(|(i, &(a0, _))| (i, sample.reasoning[a0 + noise.picks[i]] as usize))
                    .collect();
                let s = t.ce_sum(zlogits, &pairs);
                t.scale(s, 1.0 / k as f64)
            }
        }
    } else {
        t.constant(Mat::from_vec(1, 1, vec![0.0]))
    };

    // Mean per-step KL so β means the same thing for every K.
    let kl = if cfg.mask.use_kl && k > 0 {
        let mut acc = steps[0].kl.expect("kl built when masked on");
        for s in &steps[1..] {
            acc = t.add(acc, s.kl.expect("kl built when masked on"));
        }
        t.scale(acc, 1.0 / k as f64)
    } else {
        t.constant(Mat::from_vec(1, 1, vec![0.0]))
    };

    let mut total = answer_ce;
    if cfg.mask.use_reasoning {
        total = t.add(total, reasoning_ce);
    }
    if cfg.mask.use_kl {
        let weighted = t.scale(kl, cfg.beta);
        total = t.add(total, weighted);
    }

    Ok(SampleLoss {
        total,
        answer_ce,
        reasoning_ce,
        kl,
        plan,
        steps,
        termination_logits,
        answer_logits,
    })
}

// ---------------------------------------------------------------------------
// Explicit-chain baseline objective.
// ---------------------------------------------------------------------------

/// Differentiable explicit-chain MLE parts: mean CE over reasoning targets
/// (r_1 … r_J then ###) and mean CE over answer targets (a_1 … a_La then
/// <eos>) on the fully tokenized sequence [Q, R, ###, A].
pub struct CotLoss {
    pub total: Var,
    pub answer_ce: Var,
    pub reasoning_ce: Var,
}

pub fn build_cot_loss(
    t: &mut Tape,
    model: &Model,
    b: &Binding,
    sample: &Sample,
) -> Result<CotLoss> {
    if sample.reasoning.is_empty() {
        return Err(Error::Config(
            "explicit-chain loss needs a non-empty reasoning sequence".into(),
        ));
    }
    let l_q = sample.question.len();
    let j = sample.reasoning.len();
    let l_a = sample.answer.len();
    let mut tokens: Vec<TokenId> = Vec::with_capacity(l_q + j + 1 + l_a);
    tokens.extend_from_slice(&sample.question);
    tokens.extend_from_slice(&sample.reasoning);
    tokens.push(SEP_REASON);
    tokens.extend_from_slice(&sample.answer);

    let x = model.embed_tokens(t, b, &tokens);
    let h = model.forward_hidden(t, b, x)?;
    let logits = model.language_head(t, b, h);

    let mut reason_pairs: Vec<(usize, usize)> = Vec::with_capacity(j + 1);
    for (i, &r) in sample.reasoning.iter().enumerate() {
        reason_pairs.push((l_q - 1 + i, r as usize));
    }
    reason_pairs.push((l_q + j - 1, SEP_REASON as usize));
    let mut answer_pairs: Vec<(usize, usize)> = Vec::with_capacity(l_a + 1);
    for (i, &a) in sample.answer.iter().enumerate() {
        answer_pairs.push((l_q + j + i, a as usize));
    }
    answer_pairs.push((l_q + j + l_a, EOS as usize));

    let rs = t.ce_sum(logits, &reason_pairs);
    let reasoning_ce = t.scale(rs, 1.0 / reason_pairs.len() as f64);
    let as_ = t.ce_sum(logits, &answer_pairs);
    let answer_ce = t.scale(as_, 1.0 / answer_pairs.len() as f64);
    let total = t.add(reasoning_ce, answer_ce);
    Ok(CotLoss {
        total,
        answer_ce,
        reasoning_ce,
    })
}

/// Scalar convenience wrapper over [`build_cot_loss`].
pub fn cot_mle_loss(model: &Model, sample: &Sample) -> Result<f64> {
    let mut t = Tape::new();
    let b = model.bind(&mut t);
    let loss = build_cot_loss(&mut t, model, &b, sample)?;
    Ok(t.scalar(loss.total))
}
