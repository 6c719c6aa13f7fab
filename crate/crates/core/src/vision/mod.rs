//! Frozen visual encoder and the offline embedding cache.
//!
//! A rendered image is preprocessed to a mode-specific square resolution
//! (nearest-neighbor resize for Tiny/Small, top-left padding for
//! Base/Large), split into non-overlapping 64×64 patches, and each flattened
//! patch is pushed through a frozen seeded affine projection plus a fixed
//! sinusoidal positional code and a tanh; mean pooling over the patch tokens
//! yields one `d_v` vector. No parameter here ever receives a gradient:
//! the projection is drawn once from a seeded generator and fixed, so
//! `encode` is a pure function of (image, config).
//!
//! [`precompute`] runs render → encode for every (sample, segment) pair once
//! and publishes a binary vector store plus JSON manifest; training then
//! reads anchors via [`VisionCache::lookup`] without touching the encoder.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Sample, SegmentPolicy, Vocabulary};
use crate::math::Mat;
use crate::parallel;
use crate::render::{render, RenderConfig, RenderedImage};
use crate::{audit, Error, Result};

/// Side length of one square patch in pixels.
pub const PATCH: usize = 64;
/// Flattened patch dimension (`PATCH`²).
pub const PATCH_DIM: usize = PATCH * PATCH;

/// Encoder size class; resolution fixes the internal token count at
/// `(resolution / 64)²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Tiny,
    Small,
    Base,
    Large,
}

impl EncoderMode {
    pub const ALL: [EncoderMode; 4] = [
        EncoderMode::Tiny,
        EncoderMode::Small,
        EncoderMode::Base,
        EncoderMode::Large,
    ];

    /// Canonical square input resolution in pixels.
    pub fn resolution(self) -> usize {
        match self {
            EncoderMode::Tiny => 512,
            EncoderMode::Small => 640,
            EncoderMode::Base => 1024,
            EncoderMode::Large => 1280,
        }
    }

    /// Number of patch tokens: (resolution / 64)².
    pub fn token_count(self) -> usize {
        let side = self.resolution() / PATCH;
        side * side
    }

    /// Tiny/Small adaptively resize; Base/Large pad.
    pub fn pads(self) -> bool {
        matches!(self, EncoderMode::Base | EncoderMode::Large)
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderMode::Tiny => "tiny",
            EncoderMode::Small => "small",
            EncoderMode::Base => "base",
            EncoderMode::Large => "large",
        }
    }
}

/// Visual encoder configuration; frozen once constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    pub mode: EncoderMode,
    pub d_v: usize,
    pub encoder_seed: u64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            mode: EncoderMode::Tiny,
            d_v: 128,
            encoder_seed: 1337,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_v < 8 {
            return Err(Error::Config(format!("d_v must be ≥ 8, got {}", self.d_v)));
        }
        Ok(())
    }

    /// Stable 64-bit fingerprint of the encoder configuration.
    pub fn fingerprint(&self) -> u64 {
        let canonical = format!(
            "mode={};d_v={};encoder_seed={}",
            self.mode.name(),
            self.d_v,
            self.encoder_seed
        );
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// One cached embedding with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualRepresentation {
    pub vector: Vec<f64>,
    pub sample_id: String,
    pub segment_index: usize,
    pub encoder_fingerprint: u64,
    pub render_fingerprint: u64,
}

/// Frozen patch-projection encoder.
pub struct Encoder {
    cfg: VisionConfig,
    /// PATCH_DIM × d_v projection, drawn once from the seeded generator.
    w: Mat,
    bias: Vec<f64>,
    /// token_count × d_v sinusoidal positional codes.
    pos: Vec<Vec<f64>>,
}

impl Encoder {
    pub fn new(cfg: &VisionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.encoder_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let scale = 1.0 / (PATCH_DIM as f64).sqrt();
        let w = Mat::from_fn(PATCH_DIM, cfg.d_v, |_, _| normal.sample(&mut rng) * scale);
        let bias: Vec<f64> = (0..cfg.d_v).map(|_| normal.sample(&mut rng) * 0.1).collect();
        let tokens = cfg.mode.token_count();
        let pos = (0..tokens)
            .map(|t| sinusoidal_code(t, cfg.d_v))
            .collect();
        Ok(Encoder { cfg: cfg.clone(), w, bias, pos })
    }

    pub fn config(&self) -> &VisionConfig {
        &self.cfg
    }

    pub fn fingerprint(&self) -> u64 {
        self.cfg.fingerprint()
    }

    /// Preprocess to the mode's square resolution. Values are ink
    /// intensities in [0, 1]: 0 for background, 1 for maximal contrast, so
    /// padding (with background) contributes exactly zero.
    pub fn preprocess(&self, img: &RenderedImage) -> Vec<f64> {
        let s = self.cfg.mode.resolution();
        let mut out = vec![0.0; s * s];
        let bg = img.background as f64;
        let ink = |p: u8| (p as f64 - bg).abs() / 255.0;

        if !self.cfg.mode.pads() {
            // Adaptive resize: nearest-neighbor to s×s.
            for y in 0..s {
                let sy = y * img.height / s;
                for x in 0..s {
                    let sx = x * img.width / s;
                    out[y * s + x] = ink(img.get(sx, sy));
                }
            }
        } else {
            // Pad top-left; scale-to-fit first if the image overflows.
            let (mut w, mut h) = (img.width, img.height);
            let mut fitted: Option<Vec<u8>> = None;
            if w > s || h > s {
                log::warn!(
                    "image {}x{} exceeds pad resolution {s}; scaling to fit",
                    img.width,
                    img.height
                );
                // Preserve aspect ratio: scale by the tighter axis.
                let (nw, nh) = if img.width * s / img.height <= s {
                    ((img.width * s / img.height).max(1), s)
                } else {
                    (s, (img.height * s / img.width).max(1))
                };
                let mut px = vec![img.background; nw * nh];
                for y in 0..nh {
                    let sy = y * img.height / nh;
                    for x in 0..nw {
                        let sx = x * img.width / nw;
                        px[y * nw + x] = img.get(sx, sy);
                    }
                }
                w = nw;
                h = nh;
                fitted = Some(px);
            }
            let read = |x: usize, y: usize| -> u8 {
                match &fitted {
                    Some(px) => px[y * w + x],
                    None => img.get(x, y),
                }
            };
            for y in 0..h.min(s) {
                for x in 0..w.min(s) {
                    out[y * s + x] = ink(read(x, y));
                }
            }
        }
        out
    }

    /// Per-patch token vectors before pooling; exposed so pooling can be
    /// cross-checked externally.
    pub fn token_vectors(&self, img: &RenderedImage) -> Vec<Vec<f64>> {
        let s = self.cfg.mode.resolution();
        let side = s / PATCH;
        let canvas = self.preprocess(img);
        let d_v = self.cfg.d_v;
        let mut tokens = Vec::with_capacity(side * side);
        for py in 0..side {
            for px in 0..side {
                let t = py * side + px;
                let mut acc = vec![0.0f64; d_v];
                for j in 0..PATCH {
                    let row = (py * PATCH + j) * s + px * PATCH;
                    for i in 0..PATCH {
                        let v = canvas[row + i];
                        if v != 0.0 {
                            let wrow = self.w.row((j * PATCH) + i);
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += v * wv;
                            }
                        }
                    }
                }
                let code = &self.pos[t];
                for (d, a) in acc.iter_mut().enumerate() {
                    *a = (*a + self.bias[d] + code[d]).tanh();
                }
                tokens.push(acc);
            }
        }
        tokens
    }

    /// Encode an image into one pooled `d_v` vector (mean over patch
    /// tokens). Entries lie strictly inside (−1, 1).
    pub fn encode(&self, img: &RenderedImage) -> Vec<f64> {
        audit::count_encode();
        let tokens = self.token_vectors(img);
        let n = tokens.len() as f64;
        let mut pooled = vec![0.0f64; self.cfg.d_v];
        for tok in &tokens {
            for (p, v) in pooled.iter_mut().zip(tok) {
                *p += v;
            }
        }
        for p in &mut pooled {
            *p /= n;
        }
        pooled
    }
}

/// Fixed sinusoidal positional code for token position `t`.
fn sinusoidal_code(t: usize, d: usize) -> Vec<f64> {
    let mut code = vec![0.0; d];
    let mut i = 0;
    while i < d {
        let angle = t as f64 / 10000f64.powf(i as f64 / d as f64);
        code[i] = angle.sin();
        if i + 1 < d {
            code[i + 1] = angle.cos();
        }
        i += 2;
    }
    code
}

const CACHE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VECTORS_FILE: &str = "vectors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub sample_id: String,
    pub k: usize,
    /// Offset into the store, counted in f32 elements.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub version: u32,
    pub d_v: usize,
    pub mode: EncoderMode,
    pub encoder_seed: u64,
    pub render_fingerprint: u64,
    pub encoder_fingerprint: u64,
    pub count: usize,
    pub segmentation: SegmentPolicy,
    pub entries: Vec<CacheEntry>,
}

/// Read handle over a published cache directory.
pub struct VisionCache {
    pub manifest: CacheManifest,
    vectors: Vec<f32>,
    index: HashMap<(String, usize), usize>,
    dir: PathBuf,
}

impl std::fmt::Debug for VisionCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VisionCache")
            .field("dir", &self.dir)
            .field("count", &self.manifest.count)
            .field("d_v", &self.manifest.d_v)
            .finish()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Render and encode every (sample, segment) pair into `dir`, publishing
/// `vectors.bin` first and `manifest.json` last so a complete manifest
/// implies a complete store. Re-running over a published cache with matching
/// fingerprints and coverage is a no-op; mismatched fingerprints are refused.
pub fn precompute(
    samples: &[Sample],
    vocab: &Vocabulary,
    policy: SegmentPolicy,
    render_cfg: &RenderConfig,
    vision_cfg: &VisionConfig,
    dir: &Path,
) -> Result<CacheManifest> {
    render_cfg.validate()?;
    let encoder = Encoder::new(vision_cfg)?;
    let manifest_path = dir.join(MANIFEST_FILE);

    // Per-sample segment texts, flattened in dataset order.
    let mut entries_text: Vec<(String, usize, String)> = Vec::new();
    for sample in samples {
        for (k, text) in crate::corpus::segment_texts(vocab, sample, policy)?
            .into_iter()
            .enumerate()
        {
            entries_text.push((sample.id.clone(), k + 1, text));
        }
    }

    if manifest_path.exists() {
        let existing: CacheManifest =
            serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
        if existing.render_fingerprint != render_cfg.fingerprint()
            || existing.encoder_fingerprint != vision_cfg.fingerprint()
            || existing.d_v != vision_cfg.d_v
        {
            return Err(Error::StaleCache(format!(
                "cache at {} was built under a different render/encoder configuration; \
                 delete it to rebuild",
                dir.display()
            )));
        }
        let covered = existing
            .entries
            .iter()
            .map(|e| (e.sample_id.clone(), e.k))
            .collect::<std::collections::HashSet<_>>();
        if entries_text
            .iter()
            .all(|(id, k, _)| covered.contains(&(id.clone(), *k)))
        {
            log::info!("cache at {} already covers the dataset", dir.display());
            return Ok(existing);
        }
        return Err(Error::StaleCache(format!(
            "cache at {} matches the configuration but is missing entries; \
             delete it to rebuild",
            dir.display()
        )));
    }

    // Encode each distinct text once (repeated segments are common in
    // synthetic corpora); the store still holds one record per entry.
    let mut distinct: Vec<&str> = Vec::new();
    let mut text_index: HashMap<&str, usize> = HashMap::new();
    for (_, _, text) in &entries_text {
        if !text_index.contains_key(text.as_str()) {
            text_index.insert(text.as_str(), distinct.len());
            distinct.push(text.as_str());
        }
    }
    let encoded: Vec<Result<Vec<f32>>> = parallel::map_collect(&distinct, |text| {
        let img = render(text, render_cfg)?;
        Ok(encoder.encode(&img).iter().map(|&v| v as f32).collect())
    });
    let mut vec_by_text: Vec<Vec<f32>> = Vec::with_capacity(encoded.len());
    for r in encoded {
        vec_by_text.push(r?);
    }

    let d_v = vision_cfg.d_v;
    let mut store: Vec<u8> = Vec::with_capacity(entries_text.len() * d_v * 4);
    let mut entries = Vec::with_capacity(entries_text.len());
    for (i, (sample_id, k, text)) in entries_text.iter().enumerate() {
        let vec = &vec_by_text[text_index[text.as_str()]];
        for v in vec {
            store.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(CacheEntry {
            sample_id: sample_id.clone(),
            k: *k,
            offset: (i * d_v) as u64,
        });
    }

    let manifest = CacheManifest {
        version: CACHE_VERSION,
        d_v,
        mode: vision_cfg.mode,
        encoder_seed: vision_cfg.encoder_seed,
        render_fingerprint: render_cfg.fingerprint(),
        encoder_fingerprint: vision_cfg.fingerprint(),
        count: entries.len(),
        segmentation: policy,
        entries,
    };

    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(VECTORS_FILE), &store)?;
    write_atomic(
        &manifest_path,
        &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

impl VisionCache {
    /// Open a published cache, verifying it was built under exactly the
    /// given render and encoder configurations.
    pub fn open(
        dir: &Path,
        render_cfg: &RenderConfig,
        vision_cfg: &VisionConfig,
    ) -> Result<Self> {
        let manifest: CacheManifest =
            serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.render_fingerprint != render_cfg.fingerprint()
            || manifest.encoder_fingerprint != vision_cfg.fingerprint()
            || manifest.d_v != vision_cfg.d_v
        {
            return Err(Error::StaleCache(format!(
                "cache at {} does not match the current render/encoder configuration",
                dir.display()
            )));
        }
        Self::open_unchecked(dir, manifest)
    }

    /// Open without fingerprint verification (used when the manifest itself
    /// is the source of truth, e.g. checkpoint-driven evaluation).
    pub fn open_unchecked(dir: &Path, manifest: CacheManifest) -> Result<Self> {
        let raw = std::fs::read(dir.join(VECTORS_FILE))?;
        if raw.len() != manifest.count * manifest.d_v * 4 {
            return Err(Error::StaleCache(format!(
                "vector store at {} has {} bytes, expected {}",
                dir.display(),
                raw.len(),
                manifest.count * manifest.d_v * 4
            )));
        }
        let vectors: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let index = manifest
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.sample_id.clone(), e.k), i))
            .collect();
        Ok(VisionCache {
            manifest,
            vectors,
            index,
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    /// Fetch the stored vector for reasoning segment `k` (1-based) of
    /// `sample_id`.
    pub fn lookup(&self, sample_id: &str, k: usize) -> Result<&[f32]> {
        let i = *self
            .index
            .get(&(sample_id.to_string(), k))
            .ok_or_else(|| Error::CacheMiss {
                sample_id: sample_id.to_string(),
                segment: k,
            })?;
        let e = &self.manifest.entries[i];
        let start = e.offset as usize;
        Ok(&self.vectors[start..start + self.manifest.d_v])
    }

    /// Full representation record for `(sample_id, k)`.
    pub fn representation(&self, sample_id: &str, k: usize) -> Result<VisualRepresentation> {
        let vector = self.lookup(sample_id, k)?.iter().map(|&v| v as f64).collect();
        Ok(VisualRepresentation {
            vector,
            sample_id: sample_id.to_string(),
            segment_index: k,
            encoder_fingerprint: self.manifest.encoder_fingerprint,
            render_fingerprint: self.manifest.render_fingerprint,
        })
    }
}
