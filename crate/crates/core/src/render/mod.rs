//! Deterministic text rasterization.
//!
//! Token sequences are detokenized to a single canonical string and laid out
//! left-aligned on an A4-proportioned page: greedy word wrap at the right
//! margin, one `line_height_pt` advance per line, all point quantities scaled
//! by `dpi/72` with round-half-up integer arithmetic. Text that overflows one
//! page keeps flowing: content regions of successive pages are concatenated
//! vertically into one tall raster (no truncation, no inter-page gap), then
//! cropped to the exact ink bounding box when `auto_crop` is on.
//!
//! The default glyph source is the bundled fixed-width 5×7 atlas
//! ([`atlas`]); every pixel is a pure function of (text, config), so repeated
//! renders are byte-identical on any platform. An external TTF may be
//! configured instead (`glyph_source = "external:/path/to/font.ttf"`); that
//! path is excluded from the byte-exactness guarantees.

pub mod atlas;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{TokenId, Vocabulary};
use crate::{audit, Error, Result};

/// Where glyph bitmaps come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GlyphSource {
    /// Bundled fixed-width 5×7 bitmap atlas (bit-exact everywhere).
    BuiltinBitmap,
    /// External TTF file; opt-in, excluded from byte-exact guarantees.
    ExternalFont(PathBuf),
}

impl Serialize for GlyphSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GlyphSource::BuiltinBitmap => s.serialize_str("builtin_bitmap"),
            GlyphSource::ExternalFont(p) => {
                s.serialize_str(&format!("external:{}", p.display()))
            }
        }
    }
}

impl<'de> Deserialize<'de> for GlyphSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "builtin_bitmap" | "builtin" => Ok(GlyphSource::BuiltinBitmap),
            other => match other.strip_prefix("external:") {
                Some(path) => Ok(GlyphSource::ExternalFont(PathBuf::from(path))),
                None => Err(serde::de::Error::custom(format!(
                    "glyph_source must be \"builtin_bitmap\" or \"external:<path>\", got {other:?}"
                ))),
            },
        }
    }
}

/// Rendering parameter vector; defaults follow the standard A4/72-DPI
/// configuration (9 pt fixed-width glyphs, 10 pt line advance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub page_width_pt: u32,
    pub page_height_pt: u32,
    pub dpi: u32,
    pub margin_x_pt: u32,
    pub margin_y_pt: u32,
    pub background: u8,
    pub auto_crop: bool,
    pub font_size_pt: u32,
    pub line_height_pt: u32,
    pub font_color: u8,
    pub alignment: Alignment,
    pub indent_pt: u32,
    pub paragraph_spacing_pt: u32,
    pub border_width_pt: u32,
    pub glyph_source: GlyphSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    Left,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            page_width_pt: 595,
            page_height_pt: 842,
            dpi: 72,
            margin_x_pt: 10,
            margin_y_pt: 10,
            background: 255,
            auto_crop: true,
            font_size_pt: 9,
            line_height_pt: 10,
            font_color: 0,
            alignment: Alignment::Left,
            indent_pt: 0,
            paragraph_spacing_pt: 0,
            border_width_pt: 0,
            glyph_source: GlyphSource::BuiltinBitmap,
        }
    }
}

const ALLOWED_DPI: [u32; 4] = [72, 96, 144, 300];

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_DPI.contains(&self.dpi) {
            return Err(Error::Config(format!(
                "dpi {} not in {ALLOWED_DPI:?}",
                self.dpi
            )));
        }
        if 2 * self.margin_x_pt >= self.page_width_pt
            || 2 * self.margin_y_pt >= self.page_height_pt
        {
            return Err(Error::Config("margins must leave a positive content area".into()));
        }
        if self.font_size_pt == 0 || self.font_size_pt > self.line_height_pt {
            return Err(Error::Config(format!(
                "font_size_pt {} must be in 1..=line_height_pt {}",
                self.font_size_pt, self.line_height_pt
            )));
        }
        if self.background == self.font_color {
            return Err(Error::Config("background and font_color must differ".into()));
        }
        Ok(())
    }

    /// Stable 64-bit fingerprint over a canonical serialization of all
    /// fields; any field change alters it with overwhelming probability.
    pub fn fingerprint(&self) -> u64 {
        let canonical = format!(
            "page_width_pt={};page_height_pt={};dpi={};margin_x_pt={};margin_y_pt={};\
             background={};auto_crop={};font_size_pt={};line_height_pt={};font_color={};\
             alignment=left;indent_pt={};paragraph_spacing_pt={};border_width_pt={};\
             glyph_source={}",
            self.page_width_pt,
            self.page_height_pt,
            self.dpi,
            self.margin_x_pt,
            self.margin_y_pt,
            self.background,
            self.auto_crop,
            self.font_size_pt,
            self.line_height_pt,
            self.font_color,
            self.indent_pt,
            self.paragraph_spacing_pt,
            self.border_width_pt,
            match &self.glyph_source {
                GlyphSource::BuiltinBitmap => "builtin_bitmap".to_string(),
                GlyphSource::ExternalFont(p) => format!("external:{}", p.display()),
            }
        );
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Grayscale raster, row-major, one byte per pixel. Carries the background
/// value so downstream stages (crop, padding, ink statistics) need no
/// access to the render configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub background: u8,
    pub config_fingerprint: u64,
}

impl RenderedImage {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Count of non-background pixels.
    pub fn ink_count(&self) -> usize {
        let bg = self.background;
        self.pixels.iter().filter(|&&p| p != bg).count()
    }

    /// Inclusive bounding box (x0, y0, x1, y1) of non-background pixels.
    pub fn ink_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let bg = self.background;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != bg {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }
}

/// Round-half-up `pt · dpi / 72` in exact integer arithmetic.
#[inline]
fn px(pt: u32, dpi: u32) -> usize {
    ((2 * pt as u64 * dpi as u64 + 72) / 144) as usize
}

/// Round-half-up `numer_pt · dpi / (72 · denom)` for fractional-point cells.
#[inline]
fn px_frac(numer_pt: u64, denom: u64, dpi: u32) -> usize {
    ((2 * numer_pt * dpi as u64 + 72 * denom) / (144 * denom)) as usize
}

trait GlyphProvider {
    /// Horizontal advance of `ch` in pixels (≥ 1 for non-space glyphs).
    fn advance(&self, ch: char) -> usize;
    /// Draw `ch` with its left edge at `x` and line-box top at `y`.
    fn draw(&self, canvas: &mut Canvas, ch: char, x: usize, y: usize);
}

/// Fixed-width atlas provider: each char occupies a cell of
/// `6/9 · font_size` × `font_size` points, mapped to pixels by
/// nearest-neighbor over the 5×7 bitmap with one design unit of padding.
struct BuiltinProvider {
    cell_w: usize,
    cell_h: usize,
    color: u8,
}

impl BuiltinProvider {
    fn new(cfg: &RenderConfig) -> Self {
        let cell_w = px_frac(
            atlas::CELL_W as u64 * cfg.font_size_pt as u64,
            atlas::CELL_H as u64,
            cfg.dpi,
        )
        .max(1);
        let cell_h = px(cfg.font_size_pt, cfg.dpi).max(1);
        BuiltinProvider {
            cell_w,
            cell_h,
            color: cfg.font_color,
        }
    }
}

impl GlyphProvider for BuiltinProvider {
    fn advance(&self, _ch: char) -> usize {
        self.cell_w
    }

    fn draw(&self, canvas: &mut Canvas, ch: char, x: usize, y: usize) {
        let bitmap = atlas::glyph(ch);
        for j in 0..self.cell_h {
            let v = j * atlas::CELL_H / self.cell_h;
            if !(1..=atlas::GLYPH_H).contains(&v) {
                continue;
            }
            let row = bitmap[v - 1];
            for i in 0..self.cell_w {
                let u = i * atlas::CELL_W / self.cell_w;
                if u < atlas::GLYPH_W && row & (1 << (atlas::GLYPH_W - 1 - u)) != 0 {
                    canvas.set(x + i, y + j, self.color);
                }
            }
        }
    }
}

/// External TTF provider backed by `fontdue`; coverage is thresholded to
/// keep the output binary like the atlas path.
struct ExternalProvider {
    font: Arc<fontdue::Font>,
    size: f32,
    ascent: usize,
    color: u8,
}

fn font_cache() -> &'static Mutex<HashMap<PathBuf, Arc<fontdue::Font>>> {
    static CACHE: OnceLock<Mutex<HashMap<PathBuf, Arc<fontdue::Font>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

impl ExternalProvider {
    fn new(path: &Path, cfg: &RenderConfig) -> Result<Self> {
        let mut cache = font_cache().lock().expect("font cache lock");
        let font = match cache.get(path) {
            Some(f) => f.clone(),
            None => {
                let bytes = std::fs::read(path)?;
                let font = fontdue::Font::from_bytes(bytes, fontdue::FontSettings::default())
                    .map_err(|e| Error::Config(format!("font {}: {e}", path.display())))?;
                let font = Arc::new(font);
                cache.insert(path.to_path_buf(), font.clone());
                font
            }
        };
        let size = cfg.font_size_pt as f32 * cfg.dpi as f32 / 72.0;
        let ascent = font
            .horizontal_line_metrics(size)
            .map(|m| m.ascent.round().max(0.0) as usize)
            .unwrap_or_else(|| px(cfg.font_size_pt, cfg.dpi));
        Ok(ExternalProvider {
            font,
            size,
            ascent,
            color: cfg.font_color,
        })
    }
}

impl GlyphProvider for ExternalProvider {
    fn advance(&self, ch: char) -> usize {
        let m = self.font.metrics(ch, self.size);
        (m.advance_width.round() as usize).max(if ch == ' ' { 1 } else { 2 })
    }

    fn draw(&self, canvas: &mut Canvas, ch: char, x: usize, y: usize) {
        let (m, coverage) = self.font.rasterize(ch, self.size);
        let baseline = y + self.ascent;
        let top = baseline as i64 - m.height as i64 - m.ymin as i64;
        for gy in 0..m.height {
            for gx in 0..m.width {
                if coverage[gy * m.width + gx] >= 128 {
                    let cx = x as i64 + m.xmin as i64 + gx as i64;
                    let cy = top + gy as i64;
                    if cx >= 0 && cy >= 0 {
                        canvas.set(cx as usize, cy as usize, self.color);
                    }
                }
            }
        }
    }
}

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize, background: u8) -> Self {
        Canvas {
            width,
            height,
            pixels: vec![background; width * height],
        }
    }

    #[inline]
    fn set(&mut self, x: usize, y: usize, v: u8) {
        if x < self.width && y < self.height {
            self.pixels[y * self.width + x] = v;
        }
    }
}

/// A glyph placement produced by layout.
struct Placement {
    ch: char,
    x: usize,
    line: usize,
}

/// Greedy left-aligned word wrap. Returns placements and the number of lines.
fn layout(text: &str, cfg: &RenderConfig, provider: &dyn GlyphProvider) -> (Vec<Placement>, usize) {
    let mx = px(cfg.margin_x_pt, cfg.dpi);
    let page_w = px(cfg.page_width_pt, cfg.dpi);
    let content_w = page_w.saturating_sub(2 * mx).max(1);
    let indent = px(cfg.indent_pt, cfg.dpi);
    let space_w = provider.advance(' ');

    let mut placements = Vec::new();
    let mut line = 0usize;
    let mut first_paragraph = true;
    for paragraph in text.split('\n') {
        if !first_paragraph {
            line += 1 + cfg.paragraph_spacing_pt.div_ceil(cfg.line_height_pt) as usize;
        }
        first_paragraph = false;
        let mut x = indent.min(content_w.saturating_sub(1));
        let mut line_has_content = false;
        for word in paragraph.split_whitespace() {
            let word_w: usize = word.chars().map(|c| provider.advance(c)).sum();
            let sep = if line_has_content { space_w } else { 0 };
            if line_has_content && x + sep + word_w > content_w {
                line += 1;
                x = 0;
                line_has_content = false;
            } else {
                x += sep;
            }
            for ch in word.chars() {
                let w = provider.advance(ch);
                // Hard-wrap words wider than a whole line.
                if line_has_content && x + w > content_w {
                    line += 1;
                    x = 0;
                }
                placements.push(Placement {
                    ch,
                    x: mx + x,
                    line,
                });
                x += w;
                line_has_content = true;
            }
        }
    }
    (placements, line + 1)
}

/// Rasterize a canonical text string under `config`.
///
/// Deterministic: identical (text, config) yield byte-identical images.
pub fn render(text: &str, config: &RenderConfig) -> Result<RenderedImage> {
    audit::count_render();
    config.validate()?;
    if text.split_whitespace().next().is_none() {
        return Err(Error::Config("cannot render empty text".into()));
    }

    let builtin;
    let external;
    let provider: &dyn GlyphProvider = match &config.glyph_source {
        GlyphSource::BuiltinBitmap => {
            builtin = BuiltinProvider::new(config);
            &builtin
        }
        GlyphSource::ExternalFont(path) => {
            external = ExternalProvider::new(path, config)?;
            &external
        }
    };

    let (placements, n_lines) = layout(text, config, provider);
    let my = px(config.margin_y_pt, config.dpi);
    let page_w = px(config.page_width_pt, config.dpi);
    let advance = px(config.line_height_pt, config.dpi).max(1);
    let glyph_h = px(config.font_size_pt, config.dpi).max(1);
    // Content flows continuously; successive page content regions are
    // concatenated vertically, so the canvas grows instead of truncating.
    let height = my + (n_lines - 1) * advance + glyph_h.max(advance) + my;
    let mut canvas = Canvas::new(page_w, height, config.background);

    for p in &placements {
        provider.draw(&mut canvas, p.ch, p.x, my + p.line * advance);
    }

    let border = px(config.border_width_pt, config.dpi);
    if border > 0 {
        for y in 0..canvas.height {
            for x in 0..canvas.width {
                if x < border
                    || y < border
                    || x >= canvas.width - border
                    || y >= canvas.height - border
                {
                    canvas.set(x, y, config.font_color);
                }
            }
        }
    }

    let mut img = RenderedImage {
        width: canvas.width,
        height: canvas.height,
        pixels: canvas.pixels,
        background: config.background,
        config_fingerprint: config.fingerprint(),
    };

    if config.auto_crop {
        let (x0, y0, x1, y1) = img
            .ink_bbox()
            .ok_or_else(|| Error::Config("nothing to render: text produced no ink".into()))?;
        let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..=y1 {
            pixels.extend_from_slice(&img.pixels[y * img.width + x0..y * img.width + x1 + 1]);
        }
        img = RenderedImage {
            width: w,
            height: h,
            pixels,
            background: img.background,
            config_fingerprint: img.config_fingerprint,
        };
    }
    Ok(img)
}

/// Render a token sequence (detokenized under `vocab`).
pub fn render_tokens(
    vocab: &Vocabulary,
    tokens: &[TokenId],
    config: &RenderConfig,
) -> Result<RenderedImage> {
    if tokens.is_empty() {
        return Err(Error::Config("cannot render an empty token sequence".into()));
    }
    render(&vocab.detokenize(tokens), config)
}

/// Write a rendered image as a grayscale PNG.
pub fn write_png(path: &Path, img: &RenderedImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let buf: image::GrayImage =
        image::ImageBuffer::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
            .expect("pixel buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Config(format!("png write {}: {e}", path.display())))
}
