//! Binary checkpoint format for model weights and optimizer state.
//!
//! Layout: an 8-byte magic (`VLRCKPT` + format version), a little-endian
//! u64 header length, a JSON header (model config, vocabulary tokens,
//! training step, provenance fingerprints, config echo), then raw
//! little-endian f64 blobs — every parameter in registry order, followed
//! by the optimizer's first- and second-moment estimates in the same order
//! when present. Writes go through a temp file and atomic rename so a
//! crash never leaves a truncated checkpoint in place.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::math::Mat;
use crate::model::{Model, ModelConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"VLRCKPT\x01";

/// Adam moment estimates, one pair of buffers per parameter, plus the
/// shared step count for bias correction. A fresh state is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
}

impl OptState {
    pub fn zeros_like(model: &Model) -> OptState {
        let m: Vec<Mat> = model
            .params
            .values()
            .iter()
            .map(|p| Mat::zeros(p.rows, p.cols))
            .collect();
        OptState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// Everything needed to resume or audit a run, minus the raw weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub vocab_tokens: Vec<String>,
    pub step: u64,
    pub seed: u64,
    pub max_train_k: usize,
    pub render_fingerprint: u64,
    pub vision_fingerprint: u64,
    #[serde(default)]
    pub config_echo: serde_json::Value,
    pub has_optimizer: bool,
}

/// A loaded checkpoint: reconstructed model, vocabulary, optional
/// optimizer state, and the header it was read from.
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub optimizer: Option<OptState>,
    pub header: CheckpointHeader,
}

fn write_mat(w: &mut impl Write, m: &Mat) -> std::io::Result<()> {
    for &x in &m.data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_mat(r: &mut impl Read, rows: usize, cols: usize) -> Result<Mat> {
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Mat::from_vec(rows, cols, data))
}

/// Serialize `model` (+ optional optimizer moments) to `path` atomically.
pub fn save(
    path: &Path,
    model: &Model,
    vocab: &Vocabulary,
    optimizer: Option<&OptState>,
    header: &CheckpointHeader,
) -> Result<()> {
    if let Some(opt) = optimizer {
        if opt.m.len() != model.params.len() || opt.v.len() != model.params.len() {
            return Err(Error::Config(
                "optimizer state does not match the parameter registry".into(),
            ));
        }
    }
    let mut header = header.clone();
    header.vocab_tokens = vocab.tokens().to_vec();
    header.model = model.cfg.clone();
    header.has_optimizer = optimizer.is_some();
    let header_bytes = serde_json::to_vec(&header)?;

    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for mat in model.params.values() {
            write_mat(&mut w, mat)?;
        }
        if let Some(opt) = optimizer {
            w.write_all(&opt.step.to_le_bytes())?;
            for mat in &opt.m {
                write_mat(&mut w, mat)?;
            }
            for mat in &opt.v {
                write_mat(&mut w, mat)?;
            }
        }
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint written by [`save`]. Parameter shapes are rebuilt
/// from the stored model config; a size mismatch or bad magic is an error.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::StaleCache(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

    // Rebuild the registry (shapes + names) from the stored config, then
    // overwrite every value with the stored blob.
    let mut model = Model::init(&header.model, 0)?;
    let shapes: Vec<(usize, usize)> = model
        .params
        .specs()
        .iter()
        .map(|s| (s.rows, s.cols))
        .collect();
    for (i, &(rows, cols)) in shapes.iter().enumerate() {
        model.params.values_mut()[i] = read_mat(&mut r, rows, cols)?;
    }
    let vocab = Vocabulary::from_tokens(header.vocab_tokens.clone())?;
    if vocab.len() != header.model.vocab {
        return Err(Error::Config(format!(
            "checkpoint vocabulary has {} tokens but the model config says {}",
            vocab.len(),
            header.model.vocab
        )));
    }

    let optimizer = if header.has_optimizer {
        let mut step = [0u8; 8];
        r.read_exact(&mut step)?;
        let mut m = Vec::with_capacity(shapes.len());
        for &(rows, cols) in &shapes {
            m.push(read_mat(&mut r, rows, cols)?);
        }
        let mut v = Vec::with_capacity(shapes.len());
        for &(rows, cols) in &shapes {
            v.push(read_mat(&mut r, rows, cols)?);
        }
        Some(OptState {
            m,
            v,
            step: u64::from_le_bytes(step),
        })
    } else {
        None
    };

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::StaleCache(format!(
            "{} has trailing bytes; refusing to trust it",
            path.display()
        )));
    }

    Ok(Checkpoint {
        model,
        vocab,
        optimizer,
        header,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_dataset, generate_synthetic};

    fn tiny_setup() -> (Model, Vocabulary) {
        let raws = generate_synthetic(6, (1, 2), 9, 42).unwrap();
        let (vocab, _) = build_dataset(&raws).unwrap();
        let cfg = ModelConfig {
            d_h: 8,
            layers: 1,
            heads: 2,
            context: 24,
            vocab: vocab.len(),
            d_v: 6,
            mlp_mult: 2,
            ..ModelConfig::default()
        };
        (Model::init(&cfg, 17).unwrap(), vocab)
    }

    fn header_for(model: &Model, vocab: &Vocabulary) -> CheckpointHeader {
        CheckpointHeader {
            version: 1,
            model: model.cfg.clone(),
            vocab_tokens: vocab.tokens().to_vec(),
            step: 123,
            seed: 9,
            max_train_k: 3,
            render_fingerprint: 0xDEAD,
            vision_fingerprint: 0xBEEF,
            config_echo: serde_json::json!({"train": {"lr": 1e-4}}),
            has_optimizer: false,
        }
    }

    #[test]
    fn roundtrip_is_bitwise_with_and_without_optimizer() {
        let (model, vocab) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt-123.bin");

        // Weights only.
        save(&path, &model, &vocab, None, &header_for(&model, &vocab)).unwrap();
        let loaded = load(&path).unwrap();
        assert!(loaded.optimizer.is_none());
        assert_eq!(loaded.header.step, 123);
        assert_eq!(loaded.header.render_fingerprint, 0xDEAD);
        for (a, b) in model.params.values().iter().zip(loaded.model.params.values()) {
            assert_eq!(a.data, b.data, "weights must round-trip bitwise");
        }
        assert_eq!(vocab.tokens(), loaded.vocab.tokens());

        // With nonzero optimizer moments.
        let mut opt = OptState::zeros_like(&model);
        opt.step = 77;
        for m in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            for (i, x) in m.data.iter_mut().enumerate() {
                *x = (i as f64 + 1.0) * 1e-3;
            }
        }
        save(&path, &model, &vocab, Some(&opt), &header_for(&model, &vocab)).unwrap();
        let loaded = load(&path).unwrap();
        let got = loaded.optimizer.expect("optimizer stored");
        assert_eq!(got.step, 77);
        assert_eq!(got, opt);
        assert_eq!(loaded.header.config_echo["train"]["lr"], 1e-4);
    }

    #[test]
    fn rejects_foreign_files_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load(&path).is_err());

        let (model, vocab) = tiny_setup();
        let real = dir.path().join("real.bin");
        save(&real, &model, &vocab, None, &header_for(&model, &vocab)).unwrap();
        let bytes = std::fs::read(&real).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() - 16]).unwrap();
        assert!(load(&cut).is_err(), "truncated blob must not load");
        let long = dir.path().join("long.bin");
        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 8]);
        std::fs::write(&long, &extended).unwrap();
        assert!(load(&long).is_err(), "trailing bytes must not load");
    }

    #[test]
    fn save_creates_parent_directories() {
        let (model, vocab) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let nested = dir.path().join("runs/full/seed0/ckpt-1.bin");
        save(&nested, &model, &vocab, None, &header_for(&model, &vocab)).unwrap();
        assert!(nested.is_file());
    }
}
