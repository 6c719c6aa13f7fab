//! Question / reasoning / answer triples, tokenization, and reasoning-chain
//! segmentation.
//!
//! The token model is deliberately plain: a canonical string is a sequence of
//! whitespace-delimited tokens (words, integers, single-character operators),
//! so `tokenize` is a whitespace split and `detokenize` a single-space join;
//! the two are mutually inverse on canonical strings. Five special tokens are
//! pinned to the first five vocabulary indices.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
/// Transition token between reasoning and answer ("###").
pub const SEP_REASON: TokenId = 3;
/// Sentence delimiter inside reasoning chains (".").
pub const STEP_DELIM: TokenId = 4;

pub const PAD_STR: &str = "<pad>";
pub const BOS_STR: &str = "<bos>";
pub const EOS_STR: &str = "<eos>";
pub const SEP_REASON_STR: &str = "###";
pub const STEP_DELIM_STR: &str = ".";

const SPECIALS: [&str; 5] = [PAD_STR, BOS_STR, EOS_STR, SEP_REASON_STR, STEP_DELIM_STR];

/// Bijective token ↔ id map with the five special tokens first.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.insert(s);
        }
        v
    }

    /// Rebuild the string→id index (needed after deserialization).
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
    }

    fn insert(&mut self, tok: &str) -> TokenId {
        if let Some(&id) = self.index.get(tok) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), id);
        id
    }

    /// Vocabulary over all whitespace tokens of `texts`, in first-seen order
    /// after the specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocabulary::new();
        for text in texts {
            for tok in text.split_whitespace() {
                v.insert(tok);
            }
        }
        v
    }

    /// Reconstruct from a serialized token list (e.g. a checkpoint header);
    /// the five special tokens must open the list in canonical order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len()
            || tokens[..SPECIALS.len()]
                .iter()
                .zip(SPECIALS)
                .any(|(got, want)| got != want)
        {
            return Err(Error::Config(
                "token list does not start with the canonical special tokens".into(),
            ));
        }
        let mut v = Vocabulary {
            tokens,
            index: HashMap::new(),
        };
        v.reindex();
        if v.index.len() != v.tokens.len() {
            return Err(Error::Config("token list contains duplicates".into()));
        }
        Ok(v)
    }

    /// All token strings in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn token_str(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id_of(&self, tok: &str) -> Option<TokenId> {
        self.index.get(tok).copied()
    }

    /// Strict tokenization; unknown tokens are an error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|tok| {
                self.id_of(tok).ok_or_else(|| {
                    Error::Config(format!("unknown token {tok:?} not in vocabulary"))
                })
            })
            .collect()
    }

    /// Lossy tokenization mapping unknown tokens to `PAD`; returns the count
    /// of replacements so callers can warn.
    pub fn tokenize_lossy(&self, text: &str) -> (Vec<TokenId>, usize) {
        let mut unknown = 0;
        let ids = text
            .split_whitespace()
            .map(|tok| {
                self.id_of(tok).unwrap_or_else(|| {
                    unknown += 1;
                    PAD
                })
            })
            .collect();
        (ids, unknown)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token_str(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new()
    }
}

/// On-disk / pre-tokenization form of one sample.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RawSample {
    #[serde(skip, default)]
    pub id: String,
    pub question: String,
    pub reasoning: String,
    pub answer: String,
}

/// Tokenized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub question: Vec<TokenId>,
    pub reasoning: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

/// Policy for unknown tokens during encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnUnknown {
    Reject,
    MapToPad,
}

/// Tokenize a raw sample under `vocab`, validating the sample contract:
/// all three fields non-empty, and no reserved special tokens in content
/// (the step delimiter "." is ordinary content).
pub fn encode_sample(vocab: &Vocabulary, raw: &RawSample, on_unknown: OnUnknown) -> Result<Sample> {
    let enc = |text: &str, field: &str| -> Result<Vec<TokenId>> {
        let ids = match on_unknown {
            OnUnknown::Reject => vocab.tokenize(text)?,
            OnUnknown::MapToPad => {
                let (ids, unknown) = vocab.tokenize_lossy(text);
                if unknown > 0 {
                    log::warn!(
                        "sample {}: {unknown} unknown token(s) in {field} mapped to PAD",
                        raw.id
                    );
                }
                ids
            }
        };
        if ids.is_empty() {
            return Err(Error::Ingest {
                path: raw.id.clone(),
                line: 0,
                msg: format!("empty {field}"),
            });
        }
        for &id in &ids {
            if id != PAD && id < STEP_DELIM && on_unknown == OnUnknown::Reject {
                return Err(Error::Ingest {
                    path: raw.id.clone(),
                    line: 0,
                    msg: format!(
                        "reserved token {:?} inside {field}",
                        vocab.token_str(id)
                    ),
                });
            }
        }
        Ok(ids)
    };
    Ok(Sample {
        id: raw.id.clone(),
        question: enc(&raw.question, "question")?,
        reasoning: enc(&raw.reasoning, "reasoning")?,
        answer: enc(&raw.answer, "answer")?,
    })
}

/// Encode every sample; ids must be unique.
pub fn encode_dataset(
    vocab: &Vocabulary,
    raws: &[RawSample],
    on_unknown: OnUnknown,
) -> Result<Vec<Sample>> {
    let mut seen = HashMap::new();
    for (i, r) in raws.iter().enumerate() {
        if let Some(prev) = seen.insert(r.id.clone(), i) {
            return Err(Error::Ingest {
                path: r.id.clone(),
                line: i + 1,
                msg: format!("duplicate sample id (first seen at record {})", prev + 1),
            });
        }
    }
    raws.iter()
        .map(|r| encode_sample(vocab, r, on_unknown))
        .collect()
}

/// Hard bound on any intermediate or final value in synthetic chains.
pub const VALUE_BOUND: i64 = 1_000_000;
/// Soft cap steering operator choice so vocabularies stay compact.
const RESULT_CAP: i64 = 1_000;

/// Deterministic synthetic arithmetic-chain corpus.
///
/// Each sample is a left-to-right chain of `steps` integer operations.
/// The question lists the operations without intermediate results
/// (`"3 + 4 then * 2"`), the reasoning spells out one sentence per step
/// (`"3 + 4 = 7 . 7 * 2 = 14 ."`), and the answer is the final value.
pub fn generate_synthetic(
    n: usize,
    steps: (usize, usize),
    operand_max: i64,
    seed: u64,
) -> Result<Vec<RawSample>> {
    let (smin, smax) = steps;
    if smin < 1 || smax > 8 || smin > smax {
        return Err(Error::Config(format!(
            "steps range ({smin}, {smax}) outside 1..=8 or inverted"
        )));
    }
    if operand_max < 1 {
        return Err(Error::Config("operand_max must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = rng.gen_range(smin..=smax);
        let mut q = Vec::new();
        let mut r = Vec::new();
        let mut cur = 0i64;
        for k in 0..s {
            let x = if k == 0 {
                let a = rng.gen_range(1..=operand_max);
                q.push(a.to_string());
                a
            } else {
                q.push("then".to_string());
                cur
            };
            // Candidate operators keeping values in [0, RESULT_CAP].
            let mut ops = Vec::with_capacity(3);
            if x < RESULT_CAP {
                ops.push('+');
            }
            if x >= 1 {
                ops.push('-');
            }
            if x >= 1 && x * 2 <= RESULT_CAP {
                ops.push('*');
            }
            // Any x in [0, RESULT_CAP] admits '+' or '-'.
            assert!(!ops.is_empty());
            let op = ops[rng.gen_range(0..ops.len())];
            let y = match op {
                '+' => rng.gen_range(1..=operand_max.min(RESULT_CAP - x)),
                '-' => rng.gen_range(1..=x.min(operand_max)),
                '*' => rng.gen_range(1..=(RESULT_CAP / x).min(operand_max).max(1)),
                _ => unreachable!(),
            };
            let z = match op {
                '+' => x + y,
                '-' => x - y,
                '*' => x * y,
                _ => unreachable!(),
            };
            debug_assert!((0..=VALUE_BOUND).contains(&z));
            q.push(op.to_string());
            q.push(y.to_string());
            r.extend([
                x.to_string(),
                op.to_string(),
                y.to_string(),
                "=".to_string(),
                z.to_string(),
                STEP_DELIM_STR.to_string(),
            ]);
            cur = z;
        }
        out.push(RawSample {
            id: format!("synth:{seed}:{i}"),
            question: q.join(" "),
            reasoning: r.join(" "),
            answer: cur.to_string(),
        });
    }
    Ok(out)
}

/// Load a JSONL corpus; ids become `<filename>:<line>` (1-based).
pub fn load_jsonl(path: &Path) -> Result<Vec<RawSample>> {
    let file = std::fs::File::open(path)?;
    let fname = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut raw: RawSample =
            serde_json::from_str(&line).map_err(|e| Error::Ingest {
                path: fname.clone(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        raw.id = format!("{fname}:{}", lineno + 1);
        out.push(raw);
    }
    if out.is_empty() {
        log::warn!("{}: no samples found", path.display());
    }
    Ok(out)
}

/// Write a corpus as JSONL (one object per line; ids are positional).
pub fn save_jsonl(path: &Path, samples: &[RawSample]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// How a reasoning chain is cut into latent-sized segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "rate")]
pub enum SegmentPolicy {
    /// One segment per sentence: split *after* each step delimiter.
    Sentence,
    /// Fixed compression rate `c`: `K = ceil(len / c)` chunks of `c` tokens.
    FixedRate(usize),
    /// The entire chain as a single segment.
    Whole,
}

impl std::fmt::Display for SegmentPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SegmentPolicy::Sentence => write!(f, "sentence"),
            SegmentPolicy::FixedRate(c) => write!(f, "fixed:{c}"),
            SegmentPolicy::Whole => write!(f, "whole"),
        }
    }
}

/// Half-open token ranges covering a reasoning chain exactly, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    pub ranges: Vec<(usize, usize)>,
}

impl Segments {
    pub fn count(&self) -> usize {
        self.ranges.len()
    }

    /// Token slice for 0-based segment index.
    pub fn slice<'a>(&self, reasoning: &'a [TokenId], idx: usize) -> &'a [TokenId] {
        let (a, b) = self.ranges[idx];
        &reasoning[a..b]
    }
}

/// Segment a reasoning chain. The delimiter attaches to the segment it
/// terminates; a sentence-policy chain with no delimiter degrades to a single
/// whole-chain segment with a warning.
pub fn segment(reasoning: &[TokenId], policy: SegmentPolicy) -> Result<Segments> {
    if reasoning.is_empty() {
        return Err(Error::Config("cannot segment an empty reasoning chain".into()));
    }
    let ranges = match policy {
        SegmentPolicy::Whole => vec![(0, reasoning.len())],
        SegmentPolicy::FixedRate(c) => {
            if c == 0 {
                return Err(Error::Config("fixed_rate requires rate >= 1".into()));
            }
            let mut v = Vec::new();
            let mut at = 0;
            while at < reasoning.len() {
                let end = (at + c).min(reasoning.len());
                v.push((at, end));
                at = end;
            }
            v
        }
        SegmentPolicy::Sentence => {
            if !reasoning.contains(&STEP_DELIM) {
                log::warn!(
                    "sentence segmentation found no {STEP_DELIM_STR:?} delimiter; \
                     falling back to a single whole-chain segment"
                );
                vec![(0, reasoning.len())]
            } else {
                let mut v = Vec::new();
                let mut start = 0;
                for (i, &t) in reasoning.iter().enumerate() {
                    if t == STEP_DELIM {
                        v.push((start, i + 1));
                        start = i + 1;
                    }
                }
                if start < reasoning.len() {
                    v.push((start, reasoning.len()));
                }
                v
            }
        }
    };
    debug_assert_eq!(ranges.first().map(|r| r.0), Some(0));
    debug_assert_eq!(ranges.last().map(|r| r.1), Some(reasoning.len()));
    Ok(Segments { ranges })
}

/// Build a vocabulary covering every field of `raws` and encode them all.
/// Token ids follow first-appearance order, so the result is deterministic
/// for a fixed input sequence.
pub fn build_dataset(raws: &[RawSample]) -> Result<(Vocabulary, Vec<Sample>)> {
    let mut vocab = Vocabulary::new();
    for r in raws {
        for text in [&r.question, &r.reasoning, &r.answer] {
            for tok in text.split_whitespace() {
                vocab.insert(tok);
            }
        }
    }
    let samples = encode_dataset(&vocab, raws, OnUnknown::Reject)?;
    Ok((vocab, samples))
}

/// Detokenized text of every segment, for rendering.
pub fn segment_texts(
    vocab: &Vocabulary,
    sample: &Sample,
    policy: SegmentPolicy,
) -> Result<Vec<String>> {
    let segs = segment(&sample.reasoning, policy)?;
    Ok((0..segs.count())
        .map(|k| vocab.detokenize(segs.slice(&sample.reasoning, k)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent interpreter: parses `"x op y = z ."` sentences, checks
    /// each equation, the chaining of results, and the final answer.
    fn oracle_check(raw: &RawSample) {
        let toks: Vec<&str> = raw.reasoning.split_whitespace().collect();
        assert_eq!(toks.len() % 6, 0, "sentences are 6 tokens each");
        let mut prev: Option<i64> = None;
        let mut last = None;
        for chunk in toks.chunks(6) {
            let x: i64 = chunk[0].parse().expect("x");
            let y: i64 = chunk[2].parse().expect("y");
            let z: i64 = chunk[4].parse().expect("z");
            assert_eq!(chunk[3], "=");
            assert_eq!(chunk[5], ".");
            let expect = match chunk[1] {
                "+" => x + y,
                "-" => x - y,
                "*" => x * y,
                other => panic!("unexpected operator {other}"),
            };
            assert_eq!(z, expect, "sentence arithmetic");
            if let Some(p) = prev {
                assert_eq!(x, p, "chain consumes previous result");
            }
            assert!((0..=VALUE_BOUND).contains(&z));
            prev = Some(z);
            last = Some(z);
        }
        assert_eq!(raw.answer, last.unwrap().to_string(), "answer = chain result");
    }

    #[test]
    fn specials_occupy_first_five_indices() {
        let v = Vocabulary::new();
        assert_eq!(v.token_str(PAD), PAD_STR);
        assert_eq!(v.token_str(BOS), BOS_STR);
        assert_eq!(v.token_str(EOS), EOS_STR);
        assert_eq!(v.token_str(SEP_REASON), SEP_REASON_STR);
        assert_eq!(v.token_str(STEP_DELIM), STEP_DELIM_STR);
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn vocabulary_is_bijective() {
        let v = Vocabulary::build(["3 + 4 then * 2", "3 + 4 = 7 . 7 * 2 = 14 ."]);
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id_of(v.token_str(id)), Some(id));
        }
    }

    #[test]
    fn tokenize_detokenize_round_trip() {
        let v = Vocabulary::build(["3 + 4 = 7 . 7 * 2 = 14 ."]);
        let s = "3 + 4 = 7 . 7 * 2 = 14 .";
        let ids = v.tokenize(s).unwrap();
        assert_eq!(v.detokenize(&ids), s);
    }

    #[test]
    fn unknown_token_rejected_or_padded() {
        let v = Vocabulary::new();
        assert!(v.tokenize("mystery").is_err());
        let (ids, unk) = v.tokenize_lossy("mystery ###");
        assert_eq!(ids, vec![PAD, SEP_REASON]);
        assert_eq!(unk, 1);
    }

    #[test]
    fn synthetic_chains_satisfy_arithmetic_oracle() {
        let samples = generate_synthetic(200, (1, 8), 20, 7).unwrap();
        assert_eq!(samples.len(), 200);
        for s in &samples {
            oracle_check(s);
        }
    }

    #[test]
    fn synthetic_generation_is_deterministic_per_seed() {
        let a = generate_synthetic(50, (1, 3), 20, 11).unwrap();
        let b = generate_synthetic(50, (1, 3), 20, 11).unwrap();
        let c = generate_synthetic(50, (1, 3), 20, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_shape_matches_contract() {
        // Shape: a 2-step sample has a 2-sentence chain that segments into
        // exactly 2 sentence segments, and the answer equals the final value.
        let samples = generate_synthetic(100, (2, 2), 10, 3).unwrap();
        let texts: Vec<&str> = samples
            .iter()
            .flat_map(|s| [s.question.as_str(), s.reasoning.as_str(), s.answer.as_str()])
            .collect();
        let vocab = Vocabulary::build(texts);
        for raw in &samples {
            let s = encode_sample(&vocab, raw, OnUnknown::Reject).unwrap();
            let segs = segment(&s.reasoning, SegmentPolicy::Sentence).unwrap();
            assert_eq!(segs.count(), 2);
            oracle_check(raw);
        }
    }

    #[test]
    fn zero_samples_is_valid() {
        assert!(generate_synthetic(0, (1, 3), 20, 0).unwrap().is_empty());
    }

    #[test]
    fn invalid_generator_params_are_config_errors() {
        assert!(generate_synthetic(1, (0, 3), 20, 0).is_err());
        assert!(generate_synthetic(1, (3, 1), 20, 0).is_err());
        assert!(generate_synthetic(1, (1, 9), 20, 0).is_err());
        assert!(generate_synthetic(1, (1, 3), 0, 0).is_err());
    }

    #[test]
    fn sentence_segmentation_splits_after_each_delimiter() {
        let v = Vocabulary::build(["3 + 4 = 7 . 7 * 2 = 14 ."]);
        let ids = v.tokenize("3 + 4 = 7 . 7 * 2 = 14 .").unwrap();
        let segs = segment(&ids, SegmentPolicy::Sentence).unwrap();
        assert_eq!(segs.ranges, vec![(0, 6), (6, 12)]);
        assert_eq!(v.detokenize(segs.slice(&ids, 0)), "3 + 4 = 7 .");
        assert_eq!(v.detokenize(segs.slice(&ids, 1)), "7 * 2 = 14 .");
    }

    #[test]
    fn sentence_segmentation_without_delimiter_falls_back_to_whole() {
        let v = Vocabulary::build(["just some words"]);
        let ids = v.tokenize("just some words").unwrap();
        let segs = segment(&ids, SegmentPolicy::Sentence).unwrap();
        assert_eq!(segs.ranges, vec![(0, 3)]);
    }

    #[test]
    fn fixed_rate_has_ceil_div_segments() {
        let ids: Vec<TokenId> = (5..15).collect(); // length 10
        let segs = segment(&ids, SegmentPolicy::FixedRate(4)).unwrap();
        assert_eq!(segs.ranges, vec![(0, 4), (4, 8), (8, 10)]);
        // K = ceil(L / c)
        assert_eq!(segs.count(), 10usize.div_ceil(4));
    }

    #[test]
    fn whole_policy_is_one_segment() {
        let ids: Vec<TokenId> = (5..9).collect();
        let segs = segment(&ids, SegmentPolicy::Whole).unwrap();
        assert_eq!(segs.ranges, vec![(0, 4)]);
    }

    #[test]
    fn jsonl_round_trip_and_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let samples = generate_synthetic(5, (1, 2), 9, 0).unwrap();
        save_jsonl(&path, &samples).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(loaded.len(), 5);
        assert_eq!(loaded[0].id, "data.jsonl:1");
        assert_eq!(loaded[4].id, "data.jsonl:5");
        for (a, b) in samples.iter().zip(loaded.iter()) {
            assert_eq!(a.question, b.question);
            assert_eq!(a.reasoning, b.reasoning);
            assert_eq!(a.answer, b.answer);
        }
    }

    #[test]
    fn jsonl_malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"question\":\"1 + 1\",\"reasoning\":\"1 + 1 = 2 .\",\"answer\":\"2\"}\nnot json\n",
        )
        .unwrap();
        match load_jsonl(&path) {
            Err(Error::Ingest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn empty_jsonl_is_empty_not_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let v = Vocabulary::build(["1 + 1 = 2 . 2"]);
        let raw = RawSample {
            id: "same".into(),
            question: "1 + 1".into(),
            reasoning: "1 + 1 = 2 .".into(),
            answer: "2".into(),
        };
        let err = encode_dataset(&v, &[raw.clone(), raw], OnUnknown::Reject);
        assert!(err.is_err());
    }

    #[test]
    fn reserved_tokens_rejected_inside_content() {
        let v = Vocabulary::build(["1 + 1 = 2 ."]);
        let raw = RawSample {
            id: "x".into(),
            question: "1 + ###".into(),
            reasoning: "1 + 1 = 2 .".into(),
            answer: "2".into(),
        };
        assert!(encode_sample(&v, &raw, OnUnknown::Reject).is_err());
    }

    proptest! {
        /// detokenize ∘ tokenize is the identity on canonical strings, and
        /// tokenize ∘ detokenize is the identity on token sequences.
        #[test]
        fn round_trip_on_random_token_sequences(idx in proptest::collection::vec(0usize..12, 1..40)) {
            let pool = ["3", "+", "4", "=", "7", ".", "then", "*", "x", "14", "-", "920"];
            let v = Vocabulary::build([pool.join(" ").as_str()]);
            let ids: Vec<TokenId> = idx.iter().map(|&i| v.id_of(pool[i]).unwrap()).collect();
            let text = v.detokenize(&ids);
            prop_assert_eq!(v.tokenize(&text).unwrap(), ids);
            let again = v.detokenize(&v.tokenize(&text).unwrap());
            prop_assert_eq!(again, text);
        }

        /// Segmentation covers the chain exactly, in order, without overlap.
        #[test]
        fn segmentation_partitions_chain(
            len in 1usize..60,
            rate in 1usize..12,
            delim_mask in proptest::collection::vec(proptest::bool::ANY, 60),
        ) {
            let ids: Vec<TokenId> = (0..len)
                .map(|i| if delim_mask[i] { STEP_DELIM } else { 10 + i as TokenId })
                .collect();
            for policy in [SegmentPolicy::Sentence, SegmentPolicy::FixedRate(rate), SegmentPolicy::Whole] {
                let segs = segment(&ids, policy).unwrap();
                let mut at = 0;
                for &(a, b) in &segs.ranges {
                    prop_assert_eq!(a, at);
                    prop_assert!(b > a);
                    at = b;
                }
                prop_assert_eq!(at, ids.len());
            }
        }
    }
}
