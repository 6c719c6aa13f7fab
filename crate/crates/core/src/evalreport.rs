//! Metrics (exact-match accuracy, reasoning length), multi-seed Student-t
//! confidence intervals, ablation suites, and report emission.
//!
//! A suite trains one model per (variant, seed), evaluates each on the test
//! set, and aggregates per-variant rows with 95% confidence intervals.
//! Reports land in `reports/<suite>/<timestamp>/` as `report.json` plus a
//! rendered markdown table; the timestamp appears only in the directory
//! name, so identical runs produce byte-identical report files.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::ContinuousCDF;

use crate::corpus::{Sample, SegmentPolicy, Vocabulary, STEP_DELIM};
use crate::infer::{reason_and_answer, InferConfig, InferRecord};
use crate::model::{checkpoint, Model, ModelConfig};
use crate::render::RenderConfig;
use crate::train::{mix, train, PriorMode, TrainConfig};
use crate::vision::{precompute, VisionCache, VisionConfig};
use crate::{parallel, Error, Result};

/// Canonical form for exact-match comparison: whitespace trimmed and, for
/// integer-shaped strings, sign and leading zeros canonicalized ("014" →
/// "14", "+7" → "7", "-0" → "0"). Anything else passes through trimmed.
pub fn normalize_answer(s: &str) -> String {
    let t = s.trim();
    let (neg, digits) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return t.to_string();
    }
    let stripped = digits.trim_start_matches('0');
    let stripped = if stripped.is_empty() { "0" } else { stripped };
    if neg && stripped != "0" {
        format!("-{stripped}")
    } else {
        stripped.to_string()
    }
}

/// Fraction of predictions that exactly match their gold answer after
/// normalization.
pub fn accuracy(predictions: &[String], golds: &[String]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Config(format!(
            "{} predictions vs {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Config("accuracy of an empty set".into()));
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize_answer(p) == normalize_answer(g))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Arithmetic mean of per-question reasoning lengths.
pub fn mean_reasoning_length(lengths: &[usize]) -> Result<f64> {
    if lengths.is_empty() {
        return Err(Error::Config("mean reasoning length of an empty set".into()));
    }
    Ok(lengths.iter().sum::<usize>() as f64 / lengths.len() as f64)
}

/// Reasoning length of an explicit token chain: the number of step
/// delimiters it contains.
pub fn explicit_reasoning_length(chain: &[crate::corpus::TokenId]) -> usize {
    chain.iter().filter(|&&t| t == STEP_DELIM).count()
}

/// 95% Student-t interval over per-seed values: (mean, half-width) with
/// half-width = t_{0.975, n−1} · s / √n. Needs n ≥ 2.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "confidence interval needs at least 2 values, got {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let s = var.sqrt();
    if s == 0.0 {
        return Ok((mean, 0.0));
    }
    let t = statrs::distribution::StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Numerical(format!("t distribution: {e}")))?
        .inverse_cdf(0.975);
    Ok((mean, t * s / (n as f64).sqrt()))
}

/// Fraction of the test set covered by always answering the most frequent
/// normalized gold answer.
pub fn majority_baseline(golds: &[String]) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Config("majority baseline of an empty set".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for g in golds {
        *counts.entry(normalize_answer(g)).or_insert(0) += 1;
    }
    let top = counts.values().max().copied().unwrap_or(0);
    Ok(top as f64 / golds.len() as f64)
}

/// How a row's reasoning-length column was counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthConvention {
    /// Latent steps taken before the terminator (latent methods).
    LatentSteps,
    /// Step delimiters in a generated explicit chain (token-level baseline).
    ExplicitDelims,
}

/// One model evaluated on the test set.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub mean_reasoning_length: f64,
    pub truncated: usize,
    pub records: Vec<InferRecord>,
}

/// Gold answers keyed by sample id, in detokenized string form.
pub fn gold_answers(vocab: &Vocabulary, test: &[Sample]) -> HashMap<String, String> {
    test.iter()
        .map(|s| (s.id.clone(), vocab.detokenize(&s.answer)))
        .collect()
}

/// Recompute (accuracy, mean reasoning length, truncated count) from stored
/// records; pure, so re-deriving a report from its raw records is
/// idempotent.
pub fn summarize_records(
    records: &[InferRecord],
    golds: &HashMap<String, String>,
) -> Result<(f64, f64, usize)> {
    if records.is_empty() {
        return Err(Error::Config("no records to summarize".into()));
    }
    let mut preds = Vec::with_capacity(records.len());
    let mut gold_list = Vec::with_capacity(records.len());
    let mut lengths = Vec::with_capacity(records.len());
    let mut truncated = 0;
    for r in records {
        let gold = golds
            .get(&r.id)
            .ok_or_else(|| Error::Config(format!("record {} has no gold answer", r.id)))?;
        preds.push(r.answer.clone());
        gold_list.push(gold.clone());
        lengths.push(r.reasoning_length);
        truncated += r.truncated as usize;
    }
    Ok((
        accuracy(&preds, &gold_list)?,
        mean_reasoning_length(&lengths)?,
        truncated,
    ))
}

/// Run inference over the whole test set (in parallel; per-sample rng is
/// derived from `seed` and the sample index, so results are independent of
/// scheduling) and score it.
pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    test: &[Sample],
    cfg: &InferConfig,
    seed: u64,
) -> Result<EvalOutcome> {
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let records: Vec<InferRecord> = parallel::map_indices(test.len(), |i| -> Result<InferRecord> {
        let s = &test[i];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, "infer", i as u64, 0));
        let out = reason_and_answer(model, &s.question, cfg, &mut rng)?;
        Ok(crate::infer::record(vocab, &s.id, &out))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let golds = gold_answers(vocab, test);
    let (accuracy, mean_reasoning_length, truncated) = summarize_records(&records, &golds)?;
    Ok(EvalOutcome {
        accuracy,
        mean_reasoning_length,
        truncated,
        records,
    })
}

/// Aggregated results for one configuration row across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub convention: LengthConvention,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_lengths: Vec<f64>,
    pub accuracy_mean: f64,
    pub accuracy_half_width: f64,
    pub length_mean: f64,
    pub length_half_width: f64,
    pub truncated_total: usize,
    pub config_echo: serde_json::Value,
}

/// One failed (row, seed) run; suites record these and keep going.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunFailure {
    pub row: String,
    pub seed: Option<u64>,
    pub error: String,
}

/// Everything a suite produces: per-row aggregates plus salvage notes for
/// whatever failed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub dataset_id: String,
    pub majority_baseline: f64,
    pub rows: Vec<RunReport>,
    pub failures: Vec<RunFailure>,
    pub config_echo: serde_json::Value,
}

/// The ablation families the report command understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// The headline configuration alone.
    Main,
    /// Loss-mask matrix: {kl, reasoning} × {off, on}.
    Paradigms,
    /// Deterministic vs probabilistic latents.
    Modeling,
    /// Text-embedding prior vs rendered-image prior.
    Regularization,
    /// Fixed-rate segmentation at compression rates {2, 5, 10}.
    CompressionSweep,
    /// Whole-chain compression: one latent per question.
    Extreme,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Suite::Main => "main",
            Suite::Paradigms => "paradigms",
            Suite::Modeling => "modeling",
            Suite::Regularization => "regularization",
            Suite::CompressionSweep => "compression-sweep",
            Suite::Extreme => "extreme",
        };
        f.write_str(name)
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Suite> {
        match s {
            "main" => Ok(Suite::Main),
            "paradigms" => Ok(Suite::Paradigms),
            "modeling" => Ok(Suite::Modeling),
            "regularization" => Ok(Suite::Regularization),
            "compression-sweep" | "compression_sweep" => Ok(Suite::CompressionSweep),
            "extreme" => Ok(Suite::Extreme),
            other => Err(Error::Config(format!(
                "unknown suite {other:?}; expected one of main, paradigms, modeling, \
                 regularization, compression-sweep, extreme"
            ))),
        }
    }
}

/// The labeled configuration rows a suite trains and compares.
pub fn variants(suite: Suite, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    use crate::objective::{LossMask, Modeling};
    let with_mask = |use_kl: bool, use_reasoning: bool| {
        let mut cfg = base.clone();
        cfg.objective.mask = LossMask {
            use_kl,
            use_reasoning,
        };
        cfg
    };
    match suite {
        Suite::Main => vec![("full".into(), base.clone())],
        Suite::Paradigms => vec![
            ("answer-only".into(), with_mask(false, false)),
            ("reasoning".into(), with_mask(false, true)),
            ("kl".into(), with_mask(true, false)),
            ("kl+reasoning".into(), with_mask(true, true)),
        ],
        Suite::Modeling => [Modeling::Deterministic, Modeling::Probabilistic]
            .into_iter()
            .map(|m| {
                let mut cfg = base.clone();
                cfg.objective.modeling = m;
                let label = match m {
                    Modeling::Deterministic => "deterministic",
                    Modeling::Probabilistic => "probabilistic",
                };
                (label.to_string(), cfg)
            })
            .collect(),
        Suite::Regularization => [PriorMode::Text, PriorMode::Vision]
            .into_iter()
            .map(|p| {
                let mut cfg = base.clone();
                cfg.prior = p;
                cfg.objective.mask.use_kl = true;
                let label = match p {
                    PriorMode::Text => "text-prior",
                    PriorMode::Vision => "vision-prior",
                };
                (label.to_string(), cfg)
            })
            .collect(),
        Suite::CompressionSweep => [2usize, 5, 10]
            .into_iter()
            .map(|rate| {
                let mut cfg = base.clone();
                cfg.segmentation = SegmentPolicy::FixedRate(rate);
                (format!("rate-{rate}"), cfg)
            })
            .collect(),
        Suite::Extreme => {
            let mut cfg = base.clone();
            cfg.segmentation = SegmentPolicy::Whole;
            vec![("whole-chain".into(), cfg)]
        }
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// Where the visual-embedding cache for one segmentation policy lives under
/// an output root; the precompute command and the suites share this layout.
pub fn default_cache_dir(out_root: &Path, policy: SegmentPolicy) -> PathBuf {
    out_root.join("cache").join(sanitize(&policy.to_string()))
}

/// Inputs shared by every run a suite performs.
pub struct SuiteContext<'a> {
    pub model_cfg: &'a ModelConfig,
    pub base_train: &'a TrainConfig,
    pub infer_cfg: &'a InferConfig,
    pub vocab: &'a Vocabulary,
    pub train_set: &'a [Sample],
    pub holdout: &'a [Sample],
    pub test_set: &'a [Sample],
    pub render_cfg: &'a RenderConfig,
    pub vision_cfg: &'a VisionConfig,
    /// Training runs go to `<out_root>/runs/...`, visual-embedding caches to
    /// `<out_root>/cache/<segmentation>`.
    pub out_root: &'a Path,
    pub seeds: &'a [u64],
    pub config_echo: serde_json::Value,
}

impl SuiteContext<'_> {
    /// Open (building on first use) the visual-embedding cache for one
    /// segmentation policy.
    pub fn ensure_cache(&self, policy: SegmentPolicy) -> Result<VisionCache> {
        let dir = default_cache_dir(self.out_root, policy);
        match VisionCache::open(&dir, self.render_cfg, self.vision_cfg) {
            Ok(c) => Ok(c),
            Err(_) => {
                precompute(
                    self.train_set,
                    self.vocab,
                    policy,
                    self.render_cfg,
                    self.vision_cfg,
                    &dir,
                )?;
                VisionCache::open(&dir, self.render_cfg, self.vision_cfg)
            }
        }
    }

    /// Train and evaluate one (variant, seed) run inside
    /// `runs/<suite>/<row>/seed-<seed>`.
    pub fn run_one(
        &self,
        suite_dir: &str,
        label: &str,
        variant: &TrainConfig,
        seed: u64,
    ) -> Result<EvalOutcome> {
        let mut tcfg = variant.clone();
        tcfg.seed = seed;
        let cache = if tcfg.objective.mask.use_kl && tcfg.prior == PriorMode::Vision {
            Some(self.ensure_cache(tcfg.segmentation)?)
        } else {
            None
        };
        let run_dir = self
            .out_root
            .join("runs")
            .join(suite_dir)
            .join(sanitize(label))
            .join(format!("seed-{seed}"));
        let outcome = train(
            self.model_cfg,
            &tcfg,
            self.vocab,
            self.train_set,
            self.holdout,
            cache.as_ref(),
            &run_dir,
            &self.config_echo,
        )?;
        let model = checkpoint::load(&outcome.checkpoint)?.model;
        // Inference modeling follows the variant: a run trained with
        // deterministic latents is evaluated with deterministic latents.
        let mut icfg = self.infer_cfg.clone();
        icfg.modeling = tcfg.objective.modeling;
        let eval = evaluate(&model, self.vocab, self.test_set, &icfg, seed)?;
        crate::infer::save_records(&run_dir.join("records.jsonl"), &eval.records)?;
        Ok(eval)
    }

    /// All seeds of one row; per-seed errors are collected, not propagated.
    pub fn run_row(
        &self,
        suite_dir: &str,
        label: &str,
        variant: &TrainConfig,
        failures: &mut Vec<RunFailure>,
    ) -> Vec<(u64, EvalOutcome)> {
        let mut done = Vec::new();
        for &seed in self.seeds {
            match self.run_one(suite_dir, label, variant, seed) {
                Ok(ev) => done.push((seed, ev)),
                Err(e) => failures.push(RunFailure {
                    row: label.to_string(),
                    seed: Some(seed),
                    error: e.to_string(),
                }),
            }
        }
        done
    }
}

/// Aggregate one row's per-seed outcomes into a report row (needs ≥ 2
/// successful seeds for the interval).
pub fn assemble_row(
    label: &str,
    convention: LengthConvention,
    variant: &TrainConfig,
    per_seed: &[(u64, EvalOutcome)],
) -> Result<RunReport> {
    let seeds: Vec<u64> = per_seed.iter().map(|(s, _)| *s).collect();
    let accuracies: Vec<f64> = per_seed.iter().map(|(_, e)| e.accuracy).collect();
    let mean_lengths: Vec<f64> = per_seed
        .iter()
        .map(|(_, e)| e.mean_reasoning_length)
        .collect();
    let (accuracy_mean, accuracy_half_width) = confidence_interval(&accuracies)?;
    let (length_mean, length_half_width) = confidence_interval(&mean_lengths)?;
    let truncated_total = per_seed.iter().map(|(_, e)| e.truncated).sum();
    // Echo the variant's training configuration; the per-seed values live in
    // `seeds`, so drop the scalar seed field rather than echo a misleading one.
    let mut echo = serde_json::to_value(variant)
        .map_err(|e| Error::Config(format!("config echo: {e}")))?;
    if let Some(obj) = echo.as_object_mut() {
        obj.remove("seed");
    }
    Ok(RunReport {
        label: label.to_string(),
        convention,
        seeds,
        accuracies,
        mean_lengths,
        accuracy_mean,
        accuracy_half_width,
        length_mean,
        length_half_width,
        truncated_total,
        config_echo: serde_json::json!({ "train": echo }),
    })
}

/// Content fingerprint of a test set (ids and gold answers).
pub fn dataset_fingerprint(vocab: &Vocabulary, test: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in test {
        h.update(s.id.as_bytes());
        h.update(b"\t");
        h.update(vocab.detokenize(&s.answer).as_bytes());
        h.update(b"\n");
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Train/evaluate every variant of `suite` over the context's seeds and
/// aggregate the surviving rows. Individual run failures are salvaged into
/// the report; only an empty test set or a malformed base config is fatal.
pub fn run_suite(ctx: &SuiteContext<'_>, suite: Suite) -> Result<SuiteReport> {
    ctx.base_train.validate()?;
    let golds: Vec<String> = {
        let map = gold_answers(ctx.vocab, ctx.test_set);
        ctx.test_set
            .iter()
            .map(|s| map[&s.id].clone())
            .collect()
    };
    let majority = majority_baseline(&golds)?;
    let suite_dir = suite.to_string();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (label, variant) in variants(suite, ctx.base_train) {
        let per_seed = ctx.run_row(&suite_dir, &label, &variant, &mut failures);
        if per_seed.is_empty() {
            continue;
        }
        match assemble_row(&label, LengthConvention::LatentSteps, &variant, &per_seed) {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(RunFailure {
                row: label.clone(),
                seed: None,
                error: e.to_string(),
            }),
        }
    }
    Ok(SuiteReport {
        suite: suite_dir,
        dataset_id: dataset_fingerprint(ctx.vocab, ctx.test_set),
        majority_baseline: majority,
        rows,
        failures,
        config_echo: ctx.config_echo.clone(),
    })
}

fn convention_name(c: LengthConvention) -> &'static str {
    match c {
        LengthConvention::LatentSteps => "latent steps",
        LengthConvention::ExplicitDelims => "explicit delimiters",
    }
}

/// Markdown comparison table in the suite's row structure.
pub fn render_markdown(report: &SuiteReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("# Suite: {}\n\n", report.suite));
    out.push_str(&format!(
        "Test set `{}`; majority-class baseline accuracy {:.4}.\n\n",
        report.dataset_id, report.majority_baseline
    ));
    out.push_str("| Row | Seeds | Accuracy (95% CI) | #L (95% CI) | Truncated | Convention |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for row in &report.rows {
        out.push_str(&format!(
            "| {} | {} | {:.4} ± {:.4} | {:.2} ± {:.2} | {} | {} |\n",
            row.label,
            row.seeds.len(),
            row.accuracy_mean,
            row.accuracy_half_width,
            row.length_mean,
            row.length_half_width,
            row.truncated_total,
            convention_name(row.convention),
        ));
    }
    if !report.failures.is_empty() {
        out.push_str("\n## Failures\n\n");
        for f in &report.failures {
            match f.seed {
                Some(s) => out.push_str(&format!("- `{}` seed {}: {}\n", f.row, s, f.error)),
                None => out.push_str(&format!("- `{}`: {}\n", f.row, f.error)),
            }
        }
    }
    out
}

/// Accuracy-per-row chart with CI whiskers, as a static SVG.
pub fn render_accuracy_plot(report: &SuiteReport) -> String {
    let (w, h) = (520.0, 340.0);
    let (left, right, top, bottom) = (60.0, 20.0, 30.0, 60.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let n = report.rows.len().max(1);
    let x = |i: usize| left + plot_w * (i as f64 + 0.5) / n as f64;
    let y = |acc: f64| top + plot_h * (1.0 - acc.clamp(0.0, 1.0));
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"monospace\" font-size=\"11\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"{left}\" y=\"{top}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"black\"/>\n"
    ));
    for tick in 0..=4 {
        let acc = tick as f64 / 4.0;
        let ty = y(acc);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ty}\" x2=\"{left}\" y2=\"{ty}\" stroke=\"black\"/>\n",
            left - 4.0
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{acc:.2}</text>\n",
            left - 8.0,
            ty + 4.0
        ));
    }
    let my = y(report.majority_baseline);
    s.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{my}\" x2=\"{}\" y2=\"{my}\" stroke=\"gray\" \
         stroke-dasharray=\"4 3\"/>\n",
        left + plot_w
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" fill=\"gray\">majority</text>\n",
        left + 4.0,
        my - 4.0
    ));
    let mut points = Vec::new();
    for (i, row) in report.rows.iter().enumerate() {
        let (px, py) = (x(i), y(row.accuracy_mean));
        let (ylo, yhi) = (
            y(row.accuracy_mean - row.accuracy_half_width),
            y(row.accuracy_mean + row.accuracy_half_width),
        );
        s.push_str(&format!(
            "<line x1=\"{px}\" y1=\"{ylo}\" x2=\"{px}\" y2=\"{yhi}\" stroke=\"black\"/>\n"
        ));
        s.push_str(&format!(
            "<circle cx=\"{px}\" cy=\"{py}\" r=\"3\" fill=\"black\"/>\n"
        ));
        s.push_str(&format!(
            "<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            top + plot_h + 16.0,
            row.label
        ));
        points.push(format!("{px},{py}"));
    }
    if points.len() > 1 {
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
            points.join(" ")
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{} — accuracy by row</text>\n",
        left + plot_w / 2.0,
        top - 10.0,
        report.suite
    ));
    s.push_str("</svg>\n");
    s
}

/// Write `report.json` + `report.md` (and optionally `accuracy.svg`) under
/// `reports/<suite>/<timestamp>/`. Only the directory name carries the
/// timestamp; file contents are bitwise-reproducible.
pub fn emit_report(report: &SuiteReport, reports_root: &Path, plot: bool) -> Result<PathBuf> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_err(|e| Error::Config(format!("system clock: {e}")))?
        .as_secs();
    let suite_dir = reports_root.join(&report.suite);
    let mut dir = suite_dir.join(stamp.to_string());
    let mut bump = 1;
    while dir.exists() {
        dir = suite_dir.join(format!("{stamp}-{bump}"));
        bump += 1;
    }
    std::fs::create_dir_all(&dir)?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    std::fs::write(dir.join("report.md"), render_markdown(report))?;
    if plot {
        std::fs::write(dir.join("accuracy.svg"), render_accuracy_plot(report))?;
    }
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_dataset, generate_synthetic};
    use crate::infer::Decode;
    use crate::objective::{Modeling, ObjectiveConfig};

    #[test]
    fn normalization_canonicalizes_integer_forms() {
        for (raw, want) in [
            ("014", "14"),
            (" 14 ", "14"),
            ("+7", "7"),
            ("-0", "0"),
            ("-007", "-7"),
            ("0", "0"),
            ("000", "0"),
            ("12x", "12x"),
            (" not a number ", "not a number"),
            ("", ""),
            ("+", "+"),
            ("-", "-"),
        ] {
            assert_eq!(normalize_answer(raw), want, "normalize {raw:?}");
        }
    }

    #[test]
    fn accuracy_scores_exact_matches_after_normalization() {
        let p = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(accuracy(&p(&["14", "2"]), &p(&["14", "2"])).unwrap(), 1.0);
        assert_eq!(accuracy(&p(&["14", "2"]), &p(&["14", "3"])).unwrap(), 0.5);
        assert_eq!(accuracy(&p(&["014"]), &p(&["14"])).unwrap(), 1.0);
        assert!(accuracy(&p(&["1"]), &p(&["1", "2"])).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn reasoning_length_means_and_conventions() {
        assert_eq!(mean_reasoning_length(&[2, 4]).unwrap(), 3.0);
        assert_eq!(mean_reasoning_length(&[0, 0, 0]).unwrap(), 0.0);
        assert!(mean_reasoning_length(&[]).is_err());
        // Explicit-chain convention counts step delimiters.
        let chain = vec![7, STEP_DELIM, 9, 8, STEP_DELIM];
        assert_eq!(explicit_reasoning_length(&chain), 2);
        assert_eq!(explicit_reasoning_length(&[]), 0);
    }

    #[test]
    fn confidence_interval_matches_hand_computed_t_intervals() {
        let (m, hw) = confidence_interval(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!((m, hw), (0.5, 0.0));
        // n=2, values {0,1}: s=√0.5, t_{0.975,1}=12.706 → hw = 12.706·0.5.
        let (m, hw) = confidence_interval(&[0.0, 1.0]).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
        assert!((hw - 6.353).abs() < 1e-3, "half-width {hw}");
        let (m2, hw2) = confidence_interval(&[1.0, 0.0]).unwrap();
        assert_eq!((m, hw), (m2, hw2), "order-insensitive");
        // n=5, values 1..5: s=√2.5, t_{0.975,4}=2.7764 → hw ≈ 1.9632.
        let (m, hw) = confidence_interval(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((m - 3.0).abs() < 1e-12);
        assert!((hw - 1.9632).abs() < 1e-3, "half-width {hw}");
        assert!(confidence_interval(&[1.0]).is_err());
    }

    #[test]
    fn majority_baseline_counts_normalized_golds() {
        let golds: Vec<String> = ["7", "07", "9"].iter().map(|s| s.to_string()).collect();
        assert!((majority_baseline(&golds).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(majority_baseline(&[]).is_err());
    }

    #[test]
    fn summarizing_stored_records_is_idempotent() {
        let records = vec![
            InferRecord {
                id: "a".into(),
                answer: "14".into(),
                reasoning_length: 2,
                truncated: false,
            },
            InferRecord {
                id: "b".into(),
                answer: "05".into(),
                reasoning_length: 4,
                truncated: true,
            },
        ];
        let golds: HashMap<String, String> =
            [("a", "014"), ("b", "9")].map(|(k, v)| (k.into(), v.into())).into();
        let first = summarize_records(&records, &golds).unwrap();
        assert_eq!(first, (0.5, 3.0, 1));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        crate::infer::save_records(&path, &records).unwrap();
        let reloaded = crate::infer::load_records(&path).unwrap();
        assert_eq!(summarize_records(&reloaded, &golds).unwrap(), first);
        // A record without a gold answer is an error, not a silent miss.
        let missing: HashMap<String, String> = HashMap::new();
        assert!(summarize_records(&records, &missing).is_err());
    }

    fn micro_world(n_train: usize, n_test: usize) -> (Vocabulary, Vec<Sample>, Vec<Sample>, ModelConfig) {
        let raws = generate_synthetic(n_train + n_test, (1, 2), 9, 41).unwrap();
        let (vocab, samples) = build_dataset(&raws).unwrap();
        let (train, test) = samples.split_at(n_train);
        let model_cfg = ModelConfig {
            d_h: 16,
            layers: 1,
            heads: 2,
            context: 64,
            vocab: vocab.len(),
            d_v: 16,
            mlp_mult: 2,
            ..ModelConfig::default()
        };
        (vocab, train.to_vec(), test.to_vec(), model_cfg)
    }

    fn micro_infer() -> InferConfig {
        InferConfig {
            k_max: 4,
            max_answer_len: 4,
            decode: Decode::Greedy,
            modeling: Modeling::Probabilistic,
            ..InferConfig::default()
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let (vocab, train, test, model_cfg) = micro_world(2, 4);
        let _ = train;
        let model = Model::init(&model_cfg, 0).unwrap();
        let icfg = micro_infer();
        let a = evaluate(&model, &vocab, &test, &icfg, 3).unwrap();
        let b = evaluate(&model, &vocab, &test, &icfg, 3).unwrap();
        assert_eq!(a.records, b.records, "same seed, same records");
        assert!((0.0..=1.0).contains(&a.accuracy));
        assert_eq!(a.records.len(), 4);
        assert!(a.mean_reasoning_length <= icfg.k_max as f64);
    }

    #[allow(clippy::too_many_arguments)]
    fn micro_ctx<'a>(
        model_cfg: &'a ModelConfig,
        base_train: &'a TrainConfig,
        infer_cfg: &'a InferConfig,
        vocab: &'a Vocabulary,
        train_set: &'a [Sample],
        test_set: &'a [Sample],
        render_cfg: &'a RenderConfig,
        vision_cfg: &'a VisionConfig,
        out_root: &'a Path,
        seeds: &'a [u64],
    ) -> SuiteContext<'a> {
        SuiteContext {
            model_cfg,
            base_train,
            infer_cfg,
            vocab,
            train_set,
            holdout: &[],
            test_set,
            render_cfg,
            vision_cfg,
            out_root,
            seeds,
            config_echo: serde_json::json!({"profile": "micro"}),
        }
    }

    #[test]
    fn paradigms_suite_produces_the_four_mask_rows() {
        let (vocab, train, test, model_cfg) = micro_world(3, 3);
        let base = TrainConfig {
            lr: 1e-3,
            warmup_steps: 1,
            batch_size: 2,
            max_steps: 2,
            prior: PriorMode::Text,
            ..TrainConfig::default()
        };
        let icfg = micro_infer();
        let render_cfg = RenderConfig::default();
        let vision_cfg = VisionConfig {
            d_v: 16,
            ..VisionConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ctx = micro_ctx(
            &model_cfg, &base, &icfg, &vocab, &train, &test, &render_cfg, &vision_cfg,
            dir.path(), &[0, 1],
        );
        let report = run_suite(&ctx, Suite::Paradigms).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["answer-only", "reasoning", "kl", "kl+reasoning"]);
        for row in &report.rows {
            assert_eq!(row.seeds, [0, 1]);
            assert!(row.accuracy_half_width >= 0.0);
            assert!(row.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
            assert!(row.config_echo["train"]["objective"]["mask"].is_object());
            assert!(row.config_echo["train"].get("seed").is_none());
        }
        // Emission: json + markdown land under reports/<suite>/<stamp>/.
        let out = emit_report(&report, &dir.path().join("reports"), true).unwrap();
        let json = std::fs::read_to_string(out.join("report.json")).unwrap();
        let parsed: SuiteReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.rows.len(), 4);
        let md = std::fs::read_to_string(out.join("report.md")).unwrap();
        for label in labels {
            assert!(md.contains(label), "markdown lists {label}");
        }
        assert!(md.contains("majority-class baseline"));
        let svg = std::fs::read_to_string(out.join("accuracy.svg")).unwrap();
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn suite_variants_enumerate_the_published_row_structures() {
        let base = TrainConfig::default();
        let labels = |s: Suite| -> Vec<String> {
            variants(s, &base).into_iter().map(|(l, _)| l).collect()
        };
        assert_eq!(labels(Suite::Main), ["full"]);
        assert_eq!(
            labels(Suite::Paradigms),
            ["answer-only", "reasoning", "kl", "kl+reasoning"]
        );
        assert_eq!(labels(Suite::Modeling), ["deterministic", "probabilistic"]);
        assert_eq!(labels(Suite::Regularization), ["text-prior", "vision-prior"]);
        assert_eq!(
            labels(Suite::CompressionSweep),
            ["rate-2", "rate-5", "rate-10"]
        );
        assert_eq!(labels(Suite::Extreme), ["whole-chain"]);
        // Sweep rows carry their segmentation; extreme is whole-chain.
        let sweep = variants(Suite::CompressionSweep, &base);
        assert_eq!(sweep[1].1.segmentation, SegmentPolicy::FixedRate(5));
        let extreme = variants(Suite::Extreme, &base);
        assert_eq!(extreme[0].1.segmentation, SegmentPolicy::Whole);
        for s in ["main", "paradigms", "compression-sweep", "compression_sweep"] {
            assert!(s.parse::<Suite>().is_ok());
        }
        assert!("mystery".parse::<Suite>().is_err());
    }

    #[test]
    fn regularization_suite_builds_a_cache_and_runs_both_priors() {
        let (vocab, train, test, model_cfg) = micro_world(3, 2);
        let base = TrainConfig {
            lr: 1e-3,
            warmup_steps: 1,
            batch_size: 2,
            max_steps: 2,
            prior: PriorMode::Text,
            ..TrainConfig::default()
        };
        let icfg = micro_infer();
        let render_cfg = RenderConfig::default();
        let vision_cfg = VisionConfig {
            d_v: 16,
            ..VisionConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ctx = micro_ctx(
            &model_cfg, &base, &icfg, &vocab, &train, &test, &render_cfg, &vision_cfg,
            dir.path(), &[0, 1],
        );
        let report = run_suite(&ctx, Suite::Regularization).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert_eq!(report.rows.len(), 2);
        assert!(dir.path().join("cache").join("sentence").exists());
    }

    #[test]
    fn failed_rows_are_salvaged_into_the_failure_list() {
        let (vocab, train, test, model_cfg) = micro_world(3, 2);
        let base = TrainConfig {
            lr: 1e-3,
            warmup_steps: 1,
            batch_size: 2,
            max_steps: 2,
            prior: PriorMode::Text,
            ..TrainConfig::default()
        };
        let icfg = micro_infer();
        let render_cfg = RenderConfig::default();
        // d_v = 24 disagrees with the model's 16, so every vision-prior run
        // must fail while the text-prior row still completes.
        let vision_cfg = VisionConfig {
            d_v: 24,
            ..VisionConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ctx = micro_ctx(
            &model_cfg, &base, &icfg, &vocab, &train, &test, &render_cfg, &vision_cfg,
            dir.path(), &[0, 1],
        );
        let report = run_suite(&ctx, Suite::Regularization).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].label, "text-prior");
        assert_eq!(report.failures.len(), 2, "{:?}", report.failures);
        assert!(report.failures.iter().all(|f| f.row == "vision-prior"));
        // The report still emits cleanly with its failure section.
        let out = emit_report(&report, &dir.path().join("reports"), false).unwrap();
        let md = std::fs::read_to_string(out.join("report.md")).unwrap();
        assert!(md.contains("## Failures"));
    }

    #[test]
    fn identical_contexts_emit_byte_identical_reports() {
        let (vocab, train, test, model_cfg) = micro_world(2, 2);
        let base = TrainConfig {
            lr: 1e-3,
            warmup_steps: 1,
            batch_size: 2,
            max_steps: 2,
            prior: PriorMode::Text,
            ..TrainConfig::default()
        };
        let icfg = micro_infer();
        let render_cfg = RenderConfig::default();
        let vision_cfg = VisionConfig {
            d_v: 16,
            ..VisionConfig::default()
        };
        let run = |root: &Path| -> String {
            let ctx = micro_ctx(
                &model_cfg, &base, &icfg, &vocab, &train, &test, &render_cfg, &vision_cfg,
                root, &[0, 1],
            );
            let report = run_suite(&ctx, Suite::Main).unwrap();
            serde_json::to_string_pretty(&report).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        assert_eq!(run(d1.path()), run(d2.path()));
    }
}
