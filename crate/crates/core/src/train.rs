//! The optimization loop: sequential posterior sampling per sample, batched
//! gradient averaging, AdamW with linear warmup into a constant schedule,
//! global-norm gradient clipping, JSON-Lines logging, periodic checkpoints,
//! and exact resume.
//!
//! Everything random is derived statelessly: shuffling permutations from
//! `(seed, "perm", epoch)` and per-sample noise from `(seed, "noise", step,
//! slot)`, so a run resumed from any checkpoint replays the exact batch and
//! noise stream of an uninterrupted run — training logs are reproducible
//! byte for byte.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{segment, Sample, SegmentPolicy, Vocabulary};
use crate::math::Mat;
use crate::model::checkpoint::{self, CheckpointHeader, OptState};
use crate::model::{Model, ModelConfig, ParamGroup, Parameters};
use crate::objective::{build_sample_loss, Anchors, LossBreakdown, NoiseSpec, ObjectiveConfig};
use crate::vision::VisionCache;
use crate::{parallel, Error, Result};

/// Where the prior anchors ẑ_k come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Adapter over precomputed visual embeddings of rendered segments.
    Vision,
    /// Mean token embedding of each segment under the step-0 weights
    /// (recomputed deterministically from the init seed, so resume sees the
    /// identical anchors).
    Text,
}

/// Stop when holdout accuracy has not improved for `patience` consecutive
/// evaluations, run every `every` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub every: usize,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear ramp `lr·t/warmup_steps` for the first `warmup_steps` steps,
    /// constant afterwards.
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Global-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub objective: ObjectiveConfig,
    pub prior: PriorMode,
    pub segmentation: SegmentPolicy,
    /// Parameter groups excluded from optimization.
    pub freeze: Vec<ParamGroup>,
    /// Checkpoint every N steps (0: only at the end).
    pub checkpoint_every: usize,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            warmup_steps: 100,
            batch_size: 16,
            max_steps: 600,
            seed: 0,
            grad_clip: 1.0,
            objective: ObjectiveConfig::default(),
            prior: PriorMode::Vision,
            segmentation: SegmentPolicy::Sentence,
            freeze: Vec::new(),
            checkpoint_every: 0,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config(
                "weight_decay and grad_clip must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Config("batch_size and max_steps must be ≥ 1".into()));
        }
        if let Some(es) = &self.early_stop {
            if es.every == 0 || es.patience == 0 {
                return Err(Error::Config("early_stop.every/patience must be ≥ 1".into()));
            }
        }
        if self.objective.beta < 0.0 {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Stable 64-bit derivation for stateless randomness streams.
pub fn mix(seed: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Fisher–Yates permutation of `0..n` for one epoch.
fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, "perm", epoch, 0));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Epoch-permuted sample stream; caches recent permutations so a batch that
/// spans an epoch boundary stays cheap.
struct SampleStream {
    seed: u64,
    n: usize,
    perms: HashMap<u64, Vec<usize>>,
}

impl SampleStream {
    fn new(seed: u64, n: usize) -> SampleStream {
        SampleStream {
            seed,
            n,
            perms: HashMap::new(),
        }
    }

    /// Dataset indices for 1-indexed step `t` with batch size `b`.
    fn batch(&mut self, t: u64, b: usize) -> Vec<usize> {
        let start = (t - 1) * b as u64;
        (start..start + b as u64)
            .map(|p| {
                let epoch = p / self.n as u64;
                let off = (p % self.n as u64) as usize;
                let seed = self.seed;
                let n = self.n;
                if self.perms.len() > 4 {
                    let keep = epoch.saturating_sub(1);
                    self.perms.retain(|&e, _| e >= keep);
                }
                self.perms
                    .entry(epoch)
                    .or_insert_with(|| epoch_permutation(seed, epoch, n))[off]
            })
            .collect()
    }
}

/// Decoupled-weight-decay Adam. Moments for frozen groups stay at zero and
/// their parameters are never touched.
pub struct AdamW {
    pub state: OptState,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    pub fn new(model: &Model) -> AdamW {
        AdamW::from_state(OptState::zeros_like(model))
    }

    pub fn from_state(state: OptState) -> AdamW {
        AdamW {
            state,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update. Returns the pre-clip global gradient norm over the
    /// non-frozen parameters.
    pub fn apply(
        &mut self,
        params: &mut Parameters,
        grads: &[Mat],
        lr: f64,
        weight_decay: f64,
        grad_clip: f64,
        frozen: &[bool],
    ) -> f64 {
        assert_eq!(grads.len(), params.len());
        assert_eq!(frozen.len(), params.len());
        let mut sq = 0.0;
        for (i, g) in grads.iter().enumerate() {
            if !frozen[i] {
                sq += g.data.iter().map(|x| x * x).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        let scale = if grad_clip > 0.0 && norm > grad_clip {
            grad_clip / norm
        } else {
            1.0
        };

        self.state.step += 1;
        let t = self.state.step;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let decay: Vec<bool> = params.specs().iter().map(|s| s.decay).collect();
        for i in 0..grads.len() {
            if frozen[i] {
                continue;
            }
            let p = &mut params.values_mut()[i];
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            for e in 0..p.data.len() {
                let g = grads[i].data[e] * scale;
                m.data[e] = self.beta1 * m.data[e] + (1.0 - self.beta1) * g;
                v.data[e] = self.beta2 * v.data[e] + (1.0 - self.beta2) * g * g;
                let mhat = m.data[e] / bc1;
                let vhat = v.data[e] / bc2;
                p.data[e] -= lr * mhat / (vhat.sqrt() + self.eps);
                if decay[i] {
                    p.data[e] -= lr * weight_decay * p.data[e];
                }
            }
        }
        norm
    }
}

/// Effective learning rate at 1-indexed step `t`.
pub fn effective_lr(cfg: &TrainConfig, t: u64) -> f64 {
    if cfg.warmup_steps > 0 && t <= cfg.warmup_steps as u64 {
        cfg.lr * t as f64 / cfg.warmup_steps as f64
    } else {
        cfg.lr
    }
}

/// Per-sample segmentations and prior anchors, computed once per run.
pub struct PreparedDataset {
    pub segments: Vec<crate::corpus::Segments>,
    pub anchors: Option<Vec<Anchors>>,
    pub max_k: usize,
}

/// Segment every sample and assemble its anchors. Text anchors use the
/// embedding table of a freshly initialized model (same config and seed), so
/// they are identical whether or not the run was resumed.
pub fn prepare(
    dataset: &[Sample],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    cache: Option<&VisionCache>,
) -> Result<PreparedDataset> {
    let mut segments = Vec::with_capacity(dataset.len());
    let mut max_k = 0;
    for s in dataset {
        let seg = segment(&s.reasoning, cfg.segmentation)?;
        max_k = max_k.max(seg.count());
        segments.push(seg);
    }
    let anchors = if cfg.objective.mask.use_kl {
        Some(match cfg.prior {
            PriorMode::Vision => {
                let cache = cache.ok_or_else(|| {
                    Error::Config(
                        "vision prior requires a precomputed visual-embedding cache".into(),
                    )
                })?;
                if cache.manifest.d_v != model_cfg.d_v {
                    return Err(Error::StaleCache(format!(
                        "cache vectors have d_v {} but the model expects {}",
                        cache.manifest.d_v, model_cfg.d_v
                    )));
                }
                if cache.manifest.segmentation != cfg.segmentation {
                    return Err(Error::StaleCache(format!(
                        "cache was built with segmentation {:?}, run uses {:?}",
                        cache.manifest.segmentation, cfg.segmentation
                    )));
                }
                let mut per_sample = Vec::with_capacity(dataset.len());
                for (s, seg) in dataset.iter().zip(&segments) {
                    let mut rows = Vec::with_capacity(seg.count());
                    for k in 1..=seg.count() {
                        let v = cache.lookup(&s.id, k)?;
                        rows.push(Mat::from_vec(
                            1,
                            v.len(),
                            v.iter().map(|&x| x as f64).collect(),
                        ));
                    }
                    per_sample.push(Anchors::Vision(rows));
                }
                per_sample
            }
            PriorMode::Text => {
                let snapshot = Model::init(model_cfg, cfg.seed)?;
                let embed = snapshot.params.get("embed.tok").clone();
                let d = model_cfg.d_h;
                let mut per_sample = Vec::with_capacity(dataset.len());
                for (s, seg) in dataset.iter().zip(&segments) {
                    let mut rows = Vec::with_capacity(seg.count());
                    for k in 0..seg.count() {
                        let toks = seg.slice(&s.reasoning, k);
                        let mut mean = vec![0.0; d];
                        for &tok in toks {
                            for (acc, &e) in mean.iter_mut().zip(embed.row(tok as usize)) {
                                *acc += e;
                            }
                        }
                        for x in mean.iter_mut() {
                            *x /= toks.len() as f64;
                        }
                        rows.push(Mat::from_vec(1, d, mean));
                    }
                    per_sample.push(Anchors::Text(rows));
                }
                per_sample
            }
        })
    } else {
        None
    };
    Ok(PreparedDataset {
        segments,
        anchors,
        max_k,
    })
}

/// Gradients and mean loss of one batch: per-sample graphs run in parallel,
/// reduction is sequential and ordered, so results are deterministic.
pub fn train_step(
    model: &Model,
    dataset: &[Sample],
    prepared: &PreparedDataset,
    indices: &[usize],
    cfg: &TrainConfig,
    t: u64,
) -> Result<(Vec<Mat>, LossBreakdown)> {
    let per_sample = parallel::map_indices(indices.len(), |slot| -> Result<_> {
        let idx = indices[slot];
        let sample = &dataset[idx];
        let segs = &prepared.segments[idx];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, "noise", t, slot as u64));
        let noise = NoiseSpec::draw(model.cfg.d_h, segs, &mut rng);
        let mut tape = crate::tape::Tape::new();
        let binding = model.bind(&mut tape);
        let anchors = prepared.anchors.as_ref().map(|a| &a[idx]);
        let loss = build_sample_loss(
            &mut tape,
            model,
            &binding,
            sample,
            segs,
            anchors,
            &cfg.objective,
            &noise,
        )?;
        let bd = loss.breakdown(&tape, &cfg.objective);
        tape.backward(loss.total);
        let grads: Vec<Mat> = binding
            .vars
            .iter()
            .zip(model.params.specs())
            .map(|(&v, spec)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(spec.rows, spec.cols))
            })
            .collect();
        Ok((grads, bd))
    });

    let inv = 1.0 / indices.len() as f64;
    let mut grads: Vec<Mat> = model
        .params
        .specs()
        .iter()
        .map(|s| Mat::zeros(s.rows, s.cols))
        .collect();
    let (mut a, mut r, mut k, mut tot) = (0.0, 0.0, 0.0, 0.0);
    for res in per_sample {
        let (g, bd) = res?;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
        a += bd.answer_ce;
        r += bd.reasoning_ce;
        k += bd.kl;
        tot += bd.total;
    }
    for g in grads.iter_mut() {
        g.scale_assign(inv);
    }
    Ok((
        grads,
        LossBreakdown {
            answer_ce: a * inv,
            reasoning_ce: r * inv,
            kl: k * inv,
            total: tot * inv,
            beta: cfg.objective.beta,
            mask: cfg.objective.mask,
        },
    ))
}

/// Exact-match holdout accuracy under greedy decoding (used by early stop).
fn holdout_accuracy(
    model: &Model,
    holdout: &[Sample],
    prepared_max_k: usize,
    cfg: &TrainConfig,
    t: u64,
) -> f64 {
    if holdout.is_empty() {
        return 0.0;
    }
    let max_answer = holdout.iter().map(|s| s.answer.len()).max().unwrap_or(1) + 2;
    let icfg = crate::infer::InferConfig {
        k_max: (2 * prepared_max_k).max(1),
        max_answer_len: max_answer,
        decode: crate::infer::Decode::Greedy,
        modeling: cfg.objective.modeling,
    };
    let hits: usize = parallel::map_indices(holdout.len(), |i| {
        let s = &holdout[i];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, "earlystop", t, i as u64));
        match crate::infer::reason_and_answer(model, &s.question, &icfg, &mut rng) {
            Ok(out) => (out.answer == s.answer) as usize,
            Err(_) => 0,
        }
    })
    .into_iter()
    .sum();
    hits as f64 / holdout.len() as f64
}

fn group_norms(params: &Parameters) -> String {
    let mut by_group: Vec<(ParamGroup, f64)> = vec![
        (ParamGroup::Backbone, 0.0),
        (ParamGroup::LatentHead, 0.0),
        (ParamGroup::LanguageHead, 0.0),
        (ParamGroup::Adapter, 0.0),
    ];
    for (spec, val) in params.specs().iter().zip(params.values()) {
        let sq: f64 = val.data.iter().map(|x| x * x).sum();
        for entry in by_group.iter_mut() {
            if entry.0 == spec.group {
                entry.1 += sq;
            }
        }
    }
    by_group
        .iter()
        .map(|(g, sq)| format!("{:?}={:.6e}", g, sq.sqrt()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Checkpoints found in `dir`, sorted by step.
pub fn scan_checkpoints(dir: &Path) -> Vec<(u64, PathBuf)> {
    let mut out = Vec::new();
    if let Ok(entries) = std::fs::read_dir(dir) {
        for e in entries.flatten() {
            let name = e.file_name();
            let name = name.to_string_lossy();
            if let Some(rest) = name.strip_prefix("ckpt-") {
                if let Some(step) = rest.strip_suffix(".bin") {
                    if let Ok(step) = step.parse::<u64>() {
                        out.push((step, e.path()));
                    }
                }
            }
        }
    }
    out.sort_by_key(|(s, _)| *s);
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub steps_run: u64,
    pub final_loss: Option<LossBreakdown>,
    pub stopped_early: bool,
}

/// Run (or resume) training. The run directory collects `train.jsonl` and
/// `ckpt-<step>.bin`; if a checkpoint already exists there, training
/// continues from the latest one and reproduces the uninterrupted run
/// exactly. `config_echo` is stamped into the log's first line and every
/// checkpoint header.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    dataset: &[Sample],
    holdout: &[Sample],
    cache: Option<&VisionCache>,
    run_dir: &Path,
    config_echo: &serde_json::Value,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    if vocab.len() != model_cfg.vocab {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the model config says {}",
            vocab.len(),
            model_cfg.vocab
        )));
    }
    std::fs::create_dir_all(run_dir)?;

    let prepared = prepare(dataset, cfg, model_cfg, cache)?;

    // Fresh start or exact resume from the newest checkpoint.
    let mut start_step = 0u64;
    let mut model = Model::init(model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(&model);
    if let Some((step, path)) = scan_checkpoints(run_dir).into_iter().last() {
        let loaded = checkpoint::load(&path)?;
        if loaded.header.model != *model_cfg {
            return Err(Error::Config(format!(
                "checkpoint at {} was trained with a different model config",
                path.display()
            )));
        }
        if loaded.vocab.tokens() != vocab.tokens() {
            return Err(Error::Config(format!(
                "checkpoint at {} uses a different vocabulary",
                path.display()
            )));
        }
        if loaded.header.seed != cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint at {} was trained with seed {}, run uses {}",
                path.display(),
                loaded.header.seed,
                cfg.seed
            )));
        }
        let opt_state = loaded.optimizer.ok_or_else(|| {
            Error::Config(format!(
                "checkpoint at {} has no optimizer state; cannot resume",
                path.display()
            ))
        })?;
        model = loaded.model;
        opt = AdamW::from_state(opt_state);
        start_step = step;
        if start_step >= cfg.max_steps as u64 {
            return Ok(TrainOutcome {
                checkpoint: path,
                steps_run: start_step,
                final_loss: None,
                stopped_early: false,
            });
        }
        log::info!("resuming from {} at step {start_step}", path.display());
    }

    let (render_fp, vision_fp) = cache
        .map(|c| (c.manifest.render_fingerprint, c.manifest.encoder_fingerprint))
        .unwrap_or((0, 0));
    let header = CheckpointHeader {
        version: 1,
        model: model_cfg.clone(),
        vocab_tokens: vocab.tokens().to_vec(),
        step: 0,
        seed: cfg.seed,
        max_train_k: prepared.max_k,
        render_fingerprint: render_fp,
        vision_fingerprint: vision_fp,
        config_echo: config_echo.clone(),
        has_optimizer: true,
    };

    let log_path = run_dir.join("train.jsonl");
    let fresh_log = !log_path.exists()
        || std::fs::metadata(&log_path).map(|m| m.len() == 0).unwrap_or(true);
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    if fresh_log {
        let line = serde_json::json!({ "config": config_echo });
        writeln!(log_file, "{line}")?;
    }

    let frozen: Vec<bool> = model
        .params
        .specs()
        .iter()
        .map(|s| cfg.freeze.contains(&s.group))
        .collect();
    let mut stream = SampleStream::new(cfg.seed, dataset.len());
    let save_at = |model: &Model, opt: &AdamW, step: u64| -> Result<PathBuf> {
        let path = run_dir.join(format!("ckpt-{step}.bin"));
        let mut h = header.clone();
        h.step = step;
        checkpoint::save(&path, model, vocab, Some(&opt.state), &h)?;
        Ok(path)
    };

    let mut best_acc = f64::NEG_INFINITY;
    let mut bad_evals = 0usize;
    let mut last_bd: Option<LossBreakdown> = None;
    let mut stopped_early = false;
    let mut t = start_step;
    while t < cfg.max_steps as u64 {
        t += 1;
        let indices = stream.batch(t, cfg.batch_size);
        let (grads, bd) = train_step(&model, dataset, &prepared, &indices, cfg, t)?;
        if !bd.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {t} (answer {}, reasoning {}, kl {}); parameter norms: {}",
                bd.answer_ce,
                bd.reasoning_ce,
                bd.kl,
                group_norms(&model.params)
            )));
        }
        let lr = effective_lr(cfg, t);
        opt.apply(
            &mut model.params,
            &grads,
            lr,
            cfg.weight_decay,
            cfg.grad_clip,
            &frozen,
        );
        let line = serde_json::json!({
            "step": t,
            "lr": lr,
            "answer_ce": bd.answer_ce,
            "reasoning_ce": bd.reasoning_ce,
            "kl": bd.kl,
            "total": bd.total,
        });
        writeln!(log_file, "{line}")?;
        last_bd = Some(bd);

        if cfg.checkpoint_every > 0 && t.is_multiple_of(cfg.checkpoint_every as u64) {
            save_at(&model, &opt, t)?;
        }
        if let Some(es) = &cfg.early_stop {
            if t.is_multiple_of(es.every as u64) {
                let acc = holdout_accuracy(&model, holdout, prepared.max_k, cfg, t);
                let line = serde_json::json!({ "step": t, "holdout_accuracy": acc });
                writeln!(log_file, "{line}")?;
                if acc > best_acc {
                    best_acc = acc;
                    bad_evals = 0;
                } else {
                    bad_evals += 1;
                    if bad_evals >= es.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    log_file.flush()?;

    let checkpoint = save_at(&model, &opt, t)?;
    Ok(TrainOutcome {
        checkpoint,
        steps_run: t,
        final_loss: last_bd,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_dataset, generate_synthetic};
    use crate::objective::Modeling;
    use crate::render::RenderConfig;
    use crate::vision::{precompute, VisionConfig};

    struct World {
        vocab: Vocabulary,
        samples: Vec<Sample>,
        model_cfg: ModelConfig,
    }

    fn world(n: usize, steps: (usize, usize), d_h: usize, layers: usize, seed: u64) -> World {
        let raws = generate_synthetic(n, steps, 9, seed).unwrap();
        let (vocab, samples) = build_dataset(&raws).unwrap();
        let model_cfg = ModelConfig {
            d_h,
            layers,
            heads: if d_h >= 64 { 4 } else { 2 },
            context: 64,
            vocab: vocab.len(),
            d_v: 16,
            mlp_mult: 2,
            ..ModelConfig::default()
        };
        World {
            vocab,
            samples,
            model_cfg,
        }
    }

    fn text_cfg(seed: u64, max_steps: usize) -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            warmup_steps: 2,
            batch_size: 2,
            max_steps,
            seed,
            prior: PriorMode::Text,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let w = world(4, (1, 2), 16, 1, 5);
        let cfg = TrainConfig {
            prior: PriorMode::Text,
            ..TrainConfig::default()
        };
        let prepared = prepare(&w.samples, &cfg, &w.model_cfg, None).unwrap();
        let mut model = Model::init(&w.model_cfg, 1).unwrap();
        let before: Vec<Mat> = model.params.values().to_vec();
        let (grads, bd) = train_step(&model, &w.samples, &prepared, &[0, 1], &cfg, 1).unwrap();
        assert!(bd.is_finite(), "losses still reported");
        assert!(bd.total > 0.0);
        let mut opt = AdamW::new(&model);
        let frozen = vec![false; model.params.len()];
        opt.apply(&mut model.params, &grads, 0.0, 0.01, 1.0, &frozen);
        for (a, b) in before.iter().zip(model.params.values()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn gradient_clipping_bounds_the_applied_norm() {
        let w = world(2, (1, 1), 16, 1, 9);
        let cfg = text_cfg(0, 1);
        let prepared = prepare(&w.samples, &cfg, &w.model_cfg, None).unwrap();
        let model = Model::init(&w.model_cfg, 1).unwrap();
        let (grads, _) = train_step(&model, &w.samples, &prepared, &[0], &cfg, 1).unwrap();
        let norm: f64 = grads
            .iter()
            .map(|g| g.data.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let mut m1 = Model::init(&w.model_cfg, 1).unwrap();
        let mut opt = AdamW::new(&m1);
        let frozen = vec![false; m1.params.len()];
        let reported = opt.apply(&mut m1.params, &grads, 1e-3, 0.0, 1e-9, &frozen);
        assert!((reported - norm).abs() < 1e-12, "returns the pre-clip norm");
    }

    #[test]
    fn single_sample_overfit_drives_answer_ce_down() {
        // Memorize one two-step sample; capacity is ample at d_h = 64.
        // Deterministic latents make the target noise-free so 200 steps
        // suffice (with sampled latents at σ ≈ 1, answer CE has a noise
        // floor well above the threshold regardless of step size).
        let w = world(1, (2, 2), 64, 2, 7);
        let cfg = TrainConfig {
            lr: 0.01,
            weight_decay: 0.0,
            warmup_steps: 0,
            batch_size: 1,
            max_steps: 200,
            seed: 3,
            prior: PriorMode::Text,
            objective: ObjectiveConfig {
                modeling: Modeling::Deterministic,
                ..ObjectiveConfig::default()
            },
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train(
            &w.model_cfg,
            &cfg,
            &w.vocab,
            &w.samples,
            &[],
            None,
            dir.path(),
            &serde_json::json!({}),
        )
        .unwrap();
        let bd = out.final_loss.unwrap();
        assert!(
            bd.answer_ce < 0.05,
            "answer CE after 200 overfit steps: {}",
            bd.answer_ce
        );
    }

    #[test]
    fn same_seed_and_config_reproduce_the_log_byte_for_byte() {
        let w = world(6, (1, 2), 16, 1, 11);
        let cfg = text_cfg(4, 6);
        let echo = serde_json::json!({"train": {"seed": 4}});
        let run = |dir: &Path| {
            train(
                &w.model_cfg, &cfg, &w.vocab, &w.samples, &[], None, dir, &echo,
            )
            .unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let o1 = run(d1.path());
        let o2 = run(d2.path());
        let l1 = std::fs::read(d1.path().join("train.jsonl")).unwrap();
        let l2 = std::fs::read(d2.path().join("train.jsonl")).unwrap();
        assert_eq!(l1, l2, "training logs must match byte for byte");
        let c1 = std::fs::read(&o1.checkpoint).unwrap();
        let c2 = std::fs::read(&o2.checkpoint).unwrap();
        assert_eq!(c1, c2, "checkpoints must match byte for byte");
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run_exactly() {
        let w = world(6, (1, 2), 16, 1, 13);
        let echo = serde_json::json!({});
        // Straight run: 8 steps in one go.
        let straight = tempfile::tempdir().unwrap();
        let cfg8 = TrainConfig {
            checkpoint_every: 4,
            ..text_cfg(2, 8)
        };
        train(
            &w.model_cfg,
            &cfg8,
            &w.vocab,
            &w.samples,
            &[],
            None,
            straight.path(),
            &echo,
        )
        .unwrap();
        // Interrupted run: 4 steps, then resume to 8 in the same directory.
        let resumed = tempfile::tempdir().unwrap();
        let cfg4 = TrainConfig {
            checkpoint_every: 4,
            ..text_cfg(2, 4)
        };
        train(
            &w.model_cfg,
            &cfg4,
            &w.vocab,
            &w.samples,
            &[],
            None,
            resumed.path(),
            &echo,
        )
        .unwrap();
        train(
            &w.model_cfg,
            &cfg8,
            &w.vocab,
            &w.samples,
            &[],
            None,
            resumed.path(),
            &echo,
        )
        .unwrap();

        let a = std::fs::read(straight.path().join("ckpt-8.bin")).unwrap();
        let b = std::fs::read(resumed.path().join("ckpt-8.bin")).unwrap();
        assert_eq!(a, b, "final checkpoints must be byte-identical");
        let la = std::fs::read_to_string(straight.path().join("train.jsonl")).unwrap();
        let lb = std::fs::read_to_string(resumed.path().join("train.jsonl")).unwrap();
        assert_eq!(la, lb, "straight and resumed logs must agree");
    }

    #[test]
    fn frozen_groups_stay_bitwise_identical() {
        let w = world(4, (1, 1), 16, 1, 17);
        let cfg = TrainConfig {
            freeze: vec![ParamGroup::Backbone],
            ..text_cfg(1, 3)
        };
        let dir = tempfile::tempdir().unwrap();
        let init = Model::init(&w.model_cfg, cfg.seed).unwrap();
        let out = train(
            &w.model_cfg,
            &cfg,
            &w.vocab,
            &w.samples,
            &[],
            None,
            dir.path(),
            &serde_json::json!({}),
        )
        .unwrap();
        let trained = checkpoint::load(&out.checkpoint).unwrap().model;
        let mut latent_moved = false;
        for ((spec, a), b) in init
            .params
            .specs()
            .iter()
            .zip(init.params.values())
            .zip(trained.params.values())
        {
            match spec.group {
                ParamGroup::Backbone => {
                    assert_eq!(a.data, b.data, "{} moved despite freeze", spec.name)
                }
                ParamGroup::LatentHead if a.data != b.data => latent_moved = true,
                _ => {}
            }
        }
        assert!(latent_moved, "unfrozen groups must train");
    }

    #[test]
    fn warmup_schedule_is_visible_in_the_log() {
        let w = world(4, (1, 1), 16, 1, 19);
        let cfg = TrainConfig {
            lr: 0.8,
            warmup_steps: 5,
            ..text_cfg(6, 8)
        };
        let dir = tempfile::tempdir().unwrap();
        train(
            &w.model_cfg,
            &cfg,
            &w.vocab,
            &w.samples,
            &[],
            None,
            dir.path(),
            &serde_json::json!({}),
        )
        .unwrap();
        let log = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
        let mut seen = 0;
        for line in log.lines().skip(1) {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            if let (Some(step), Some(lr)) = (v["step"].as_u64(), v["lr"].as_f64()) {
                let want = if step <= 5 {
                    0.8 * step as f64 / 5.0
                } else {
                    0.8
                };
                assert!((lr - want).abs() < 1e-12, "step {step}: lr {lr} vs {want}");
                seen += 1;
            }
        }
        assert_eq!(seen, 8);
    }

    #[test]
    fn vision_prior_trains_from_a_cache_and_rejects_mismatches() {
        let w = world(3, (1, 2), 16, 1, 23);
        let render_cfg = RenderConfig::default();
        let vision_cfg = VisionConfig {
            d_v: 16,
            ..VisionConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let cache_dir = dir.path().join("cache");
        precompute(
            &w.samples,
            &w.vocab,
            SegmentPolicy::Sentence,
            &render_cfg,
            &vision_cfg,
            &cache_dir,
        )
        .unwrap();
        let cache = VisionCache::open(&cache_dir, &render_cfg, &vision_cfg).unwrap();

        let cfg = TrainConfig {
            prior: PriorMode::Vision,
            ..text_cfg(0, 2)
        };
        let out = train(
            &w.model_cfg,
            &cfg,
            &w.vocab,
            &w.samples,
            &[],
            Some(&cache),
            &dir.path().join("run"),
            &serde_json::json!({}),
        )
        .unwrap();
        assert_eq!(out.steps_run, 2);

        // No cache at all → configuration error before step 1.
        let err = train(
            &w.model_cfg,
            &cfg,
            &w.vocab,
            &w.samples,
            &[],
            None,
            &dir.path().join("run2"),
            &serde_json::json!({}),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        // Cache entries missing for a sample → cache miss before step 1.
        let extra = generate_synthetic(5, (1, 2), 9, 99).unwrap();
        let (vocab2, samples2) = build_dataset(&extra).unwrap();
        let cfg2 = ModelConfig {
            vocab: vocab2.len(),
            ..w.model_cfg.clone()
        };
        let err = train(
            &cfg2,
            &cfg,
            &vocab2,
            &samples2,
            &[],
            Some(&cache),
            &dir.path().join("run3"),
            &serde_json::json!({}),
        )
        .unwrap_err();
        assert!(matches!(err, Error::CacheMiss { .. }), "got {err:?}");

        // d_v mismatch between cache and model → stale cache.
        let cfg3 = ModelConfig {
            d_v: 24,
            ..w.model_cfg.clone()
        };
        let err = train(
            &cfg3,
            &cfg,
            &w.vocab,
            &w.samples,
            &[],
            Some(&cache),
            &dir.path().join("run4"),
            &serde_json::json!({}),
        )
        .unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)));
    }

    #[test]
    fn early_stop_halts_on_an_accuracy_plateau() {
        let w = world(4, (1, 1), 16, 1, 29);
        let cfg = TrainConfig {
            early_stop: Some(EarlyStop {
                every: 1,
                patience: 2,
            }),
            ..text_cfg(0, 50)
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train(
            &w.model_cfg,
            &cfg,
            &w.vocab,
            &w.samples,
            &w.samples,
            None,
            dir.path(),
            &serde_json::json!({}),
        )
        .unwrap();
        assert!(out.stopped_early);
        assert!(out.steps_run < 50, "stopped at {}", out.steps_run);
    }

    #[test]
    fn non_finite_loss_aborts_with_parameter_diagnostics() {
        let w = world(2, (1, 1), 16, 1, 31);
        let cfg = text_cfg(0, 3);
        let dir = tempfile::tempdir().unwrap();
        // Poison one weight; the forward pass propagates the NaN into the
        // loss and the step must abort with group norms in the message.
        let mut model = Model::init(&w.model_cfg, cfg.seed).unwrap();
        let idx = model.params.index_of("embed.tok");
        model.params.values_mut()[idx].set(5, 0, f64::NAN);
        let vocab_tokens = w.vocab.tokens().to_vec();
        let header = CheckpointHeader {
            version: 1,
            model: w.model_cfg.clone(),
            vocab_tokens,
            step: 1,
            seed: cfg.seed,
            max_train_k: 1,
            render_fingerprint: 0,
            vision_fingerprint: 0,
            config_echo: serde_json::json!({}),
            has_optimizer: true,
        };
        let opt = AdamW::new(&model);
        checkpoint::save(
            &dir.path().join("ckpt-1.bin"),
            &model,
            &w.vocab,
            Some(&opt.state),
            &header,
        )
        .unwrap();
        let err = train(
            &w.model_cfg,
            &cfg,
            &w.vocab,
            &w.samples,
            &[],
            None,
            dir.path(),
            &serde_json::json!({}),
        )
        .unwrap_err();
        match err {
            Error::Numerical(msg) => {
                assert!(msg.contains("Backbone"), "diagnostics name groups: {msg}")
            }
            other => panic!("expected numerical abort, got {other:?}"),
        }
    }

    #[test]
    fn epoch_permutations_cover_the_dataset_and_differ_across_epochs() {
        let p0 = epoch_permutation(1, 0, 20);
        let p1 = epoch_permutation(1, 1, 20);
        let mut s0 = p0.clone();
        s0.sort_unstable();
        assert_eq!(s0, (0..20).collect::<Vec<_>>());
        assert_ne!(p0, p1);
        assert_eq!(p0, epoch_permutation(1, 0, 20), "stateless re-derivation");

        let mut stream = SampleStream::new(1, 5);
        // Steps at batch 3: positions 0.. cover epoch boundaries correctly.
        let b1 = stream.batch(1, 3);
        let b2 = stream.batch(2, 3);
        let all: Vec<usize> = b1.iter().chain(&b2).copied().collect();
        let epoch0 = epoch_permutation(1, 0, 5);
        let epoch1 = epoch_permutation(1, 1, 5);
        assert_eq!(&all[..5], &epoch0[..]);
        assert_eq!(all[5], epoch1[0]);
    }
}
