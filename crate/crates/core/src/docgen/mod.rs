//! Deterministic synthetic document generator.
//!
//! Two tasks share one renderer. The *reading* task lays random glyph
//! strings out line by line and asks the model to transcribe them; the
//! *key-information* task renders `key: value` forms and asks for the
//! tagged tree serialization. Every sample is a pure function of a single
//! u64 seed, so datasets are described entirely by a [`GenConfig`] and a
//! manifest of seeds — images are regenerated on demand rather than stored.
//!
//! Images are grayscale grids in [0,1]: faint procedural backgrounds, ink
//! at full intensity, optional additive uniform noise. Glyphs are placed on
//! a fixed cell lattice, which keeps the task learnable by very small
//! models while still exercising the full render → tokenize → parse loop.

pub mod font;

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{serialize_tree, FieldTree};
use crate::tokenizer::{Tokenizer, FIELD_KEYS, GLYPHS};
use crate::{derive_seed, Error, Result};

pub use font::render_glyph;

/// Which dataset a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Transcribe all rendered text, newline-separated.
    Reading,
    /// Emit the tagged serialization of the key/value tree.
    Kie,
}

impl Task {
    pub fn tag(self) -> &'static str {
        match self {
            Task::Reading => "reading",
            Task::Kie => "kie",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "reading" => Ok(Task::Reading),
            "kie" => Ok(Task::Kie),
            other => Err(Error::Contract(format!(
                "unknown task {other:?} (expected \"reading\" or \"kie\")"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Contract(format!(
                "unknown split {other:?} (expected train, val, or test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Everything that pins down a dataset. Same config → same samples, bit
/// for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Image height in pixels; must be a multiple of `cell`.
    pub image_h: usize,
    /// Image width in pixels; must be a multiple of `cell`.
    pub image_w: usize,
    /// Side of the square cell one glyph occupies. At least 7 so the
    /// 5×7 bitmaps stay injective after scaling.
    pub cell: usize,
    pub min_lines: usize,
    pub max_lines: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    /// Additive uniform noise amplitude in [0,1]; 0 disables noise.
    pub noise: f64,
    /// How many background styles to draw from (1..=4). Style 0 is a
    /// plain empty page; 1–3 are faint stripe patterns. With 1 every
    /// sample gets the plain page.
    pub background_styles: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub master_seed: u64,
}

impl GenConfig {
    /// Defaults for the transcription pretraining set. Pages carry a few
    /// lines of real length: long autoregressive targets are what make
    /// transcription quality separate sharply between model variants,
    /// since every dropped glyph compounds down the rest of the line.
    pub fn reading_default() -> Self {
        GenConfig {
            image_h: 48,
            image_w: 96,
            cell: 8,
            min_lines: 2,
            max_lines: 3,
            min_chars: 6,
            max_chars: 10,
            noise: 0.08,
            background_styles: 4,
            train: 2000,
            val: 200,
            test: 200,
            master_seed: 7,
        }
    }

    /// Defaults for the key-information extraction set: same page
    /// geometry, far fewer samples.
    pub fn kie_default() -> Self {
        GenConfig { train: 400, val: 50, test: 50, ..Self::reading_default() }
    }

    pub fn rows(&self) -> usize {
        self.image_h / self.cell
    }

    pub fn cols(&self) -> usize {
        self.image_w / self.cell
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Contract(format!("generator config: {msg}")));
        if self.cell < font::GLYPH_ROWS {
            return fail(format!("cell {} is smaller than the {}-row glyph bitmaps", self.cell, font::GLYPH_ROWS));
        }
        if self.image_h == 0 || self.image_h % self.cell != 0 {
            return fail(format!("image_h {} is not a positive multiple of cell {}", self.image_h, self.cell));
        }
        if self.image_w == 0 || self.image_w % self.cell != 0 {
            return fail(format!("image_w {} is not a positive multiple of cell {}", self.image_w, self.cell));
        }
        if self.min_lines == 0 || self.min_lines > self.max_lines {
            return fail(format!("line range {}..={} is empty", self.min_lines, self.max_lines));
        }
        if self.min_chars == 0 || self.min_chars > self.max_chars {
            return fail(format!("chars-per-line range {}..={} is empty", self.min_chars, self.max_chars));
        }
        if !(0.0..=1.0).contains(&self.noise) || !self.noise.is_finite() {
            return fail(format!("noise amplitude {} outside [0,1]", self.noise));
        }
        if self.background_styles == 0 || self.background_styles > BACKGROUND_BANK {
            return fail(format!("background_styles {} outside 1..={BACKGROUND_BANK}", self.background_styles));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return fail(format!("split sizes {}/{}/{} must all be positive", self.train, self.val, self.test));
        }
        Ok(())
    }

    /// Upper bound on `target_tokens` length for this config, excluding
    /// the begin/end markers a decoder adds around it.
    pub fn max_target_tokens(&self, task: Task) -> usize {
        match task {
            Task::Reading => {
                let lines = self.max_lines.min(self.rows());
                let chars = self.max_chars.min(self.cols());
                lines * chars + lines.saturating_sub(1)
            }
            // Up to 5 fields, each open + value (≤5 chars) + close.
            Task::Kie => 5 * (KIE_MAX_VALUE + 2),
        }
    }
}

/// One generated document.
#[derive(Debug, Clone, PartialEq)]
pub struct DocSample {
    /// Row-major grayscale pixels, image_h × image_w, in [0,1].
    pub image: Vec<f64>,
    /// Ground-truth text: the page text for reading, `key: value` lines
    /// for key-information extraction.
    pub text: String,
    /// What the decoder should produce: encoded text for reading, the
    /// tagged tree serialization for key-information extraction.
    pub target_tokens: Vec<usize>,
    /// Ground-truth tree (key-information task only).
    pub tree: Option<FieldTree>,
    pub seed: u64,
}

const BACKGROUND_BANK: usize = 4;
const BACKGROUND_SHADE: f64 = 0.12;
const KIE_MIN_FIELDS: usize = 2;
const KIE_MAX_FIELDS: usize = 5;
const KIE_MIN_VALUE: usize = 2;
const KIE_MAX_VALUE: usize = 5;
/// Letters and digits form a prefix of the glyph table.
const VALUE_GLYPHS: usize = 36;
/// Everything except the trailing space.
const NONSPACE_GLYPHS: usize = 40;

fn background_pixel(style: usize, r: usize, c: usize) -> f64 {
    match style {
        1 if (r / 4) % 2 == 0 => BACKGROUND_SHADE,
        2 if (c / 4) % 2 == 0 => BACKGROUND_SHADE,
        3 if ((r + c) / 6) % 2 == 0 => BACKGROUND_SHADE,
        _ => 0.0,
    }
}

fn glyph_at(idx: usize) -> char {
    GLYPHS.as_bytes()[idx] as char
}

/// Paint `lines` of text onto a fresh page: background, then ink at full
/// intensity (max-composited), then noise, clamped to [0,1].
fn render_page(cfg: &GenConfig, lines: &[String], rng: &mut ChaCha20Rng) -> Result<Vec<f64>> {
    let (h, w, cell) = (cfg.image_h, cfg.image_w, cfg.cell);
    let style = rng.gen_range(0..cfg.background_styles);
    let mut image = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            image[r * w + c] = background_pixel(style, r, c);
        }
    }
    for (li, line) in lines.iter().enumerate() {
        for (ci, ch) in line.chars().enumerate() {
            let patch = render_glyph(ch, cell, cell)?;
            let (r0, c0) = (li * cell, ci * cell);
            for pr in 0..cell {
                for pc in 0..cell {
                    let px = &mut image[(r0 + pr) * w + (c0 + pc)];
                    *px = px.max(patch[pr * cell + pc]);
                }
            }
        }
    }
    if cfg.noise > 0.0 {
        for px in &mut image {
            *px = (*px + rng.gen_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0);
        }
    }
    Ok(image)
}

/// Generate one transcription sample. Line and length draws are clamped
/// to the cell grid, so text never overflows the page.
pub fn gen_reading_sample(cfg: &GenConfig, seed: u64) -> Result<DocSample> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let max_lines = cfg.max_lines.min(cfg.rows());
    let min_lines = cfg.min_lines.min(max_lines);
    let max_chars = cfg.max_chars.min(cfg.cols());
    let min_chars = cfg.min_chars.min(max_chars);

    let n_lines = rng.gen_range(min_lines..=max_lines);
    let mut lines = Vec::with_capacity(n_lines);
    for _ in 0..n_lines {
        let n_chars = rng.gen_range(min_chars..=max_chars);
        let line: String = (0..n_chars)
            .map(|i| {
                // Interior spaces are fine; edges stay inked so the text
                // is recoverable from the pixels alone.
                let bank = if i == 0 || i == n_chars - 1 { NONSPACE_GLYPHS } else { GLYPHS.len() };
                glyph_at(rng.gen_range(0..bank))
            })
            .collect();
        lines.push(line);
    }
    let text = lines.join("\n");
    let tok = Tokenizer::new();
    let target_tokens = tok.encode_text(&text)?;
    let image = render_page(cfg, &lines, &mut rng)?;
    Ok(DocSample { image, text, target_tokens, tree: None, seed })
}

/// Generate one key-information sample: distinct field keys rendered as
/// `key: value` lines, with the matching tree as ground truth.
pub fn gen_kie_sample(cfg: &GenConfig, seed: u64) -> Result<DocSample> {
    cfg.validate()?;
    let widest_key = FIELD_KEYS.iter().map(|k| k.len()).max().unwrap_or(0);
    if cfg.cols() < widest_key + 2 + KIE_MAX_VALUE || cfg.rows() < KIE_MAX_FIELDS {
        return Err(Error::Contract(format!(
            "generator config: page grid {}×{} too small for {} key-value lines of width {}",
            cfg.rows(),
            cfg.cols(),
            KIE_MAX_FIELDS,
            widest_key + 2 + KIE_MAX_VALUE,
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n_fields = rng.gen_range(KIE_MIN_FIELDS..=KIE_MAX_FIELDS);
    let keys = rand::seq::index::sample(&mut rng, FIELD_KEYS.len(), n_fields);

    let mut tree = FieldTree::new();
    let mut lines = Vec::with_capacity(n_fields);
    for key_idx in keys.iter() {
        let key = FIELD_KEYS[key_idx];
        let value: String = (0..rng.gen_range(KIE_MIN_VALUE..=KIE_MAX_VALUE))
            .map(|_| glyph_at(rng.gen_range(0..VALUE_GLYPHS)))
            .collect();
        let field = tree.add_child(FieldTree::ROOT, key);
        tree.add_child(field, &value);
        lines.push(format!("{key}: {value}"));
    }
    let text = lines.join("\n");
    let tok = Tokenizer::new();
    let target_tokens = serialize_tree(&tree, &tok)?;
    let image = render_page(cfg, &lines, &mut rng)?;
    Ok(DocSample { image, text, target_tokens, tree: Some(tree), seed })
}

pub fn gen_sample(cfg: &GenConfig, task: Task, seed: u64) -> Result<DocSample> {
    match task {
        Task::Reading => gen_reading_sample(cfg, seed),
        Task::Kie => gen_kie_sample(cfg, seed),
    }
}

/// Seed for sample `index` of one task/split. Seeds never collide across
/// splits of the same task because the tag participates in the hash.
pub fn sample_seed(cfg: &GenConfig, task: Task, split: Split, index: usize) -> u64 {
    derive_seed(cfg.master_seed, &format!("{}/{}", task.tag(), split.tag()), index as u64)
}

/// Materialize one full split, in index order.
pub fn gen_split(cfg: &GenConfig, task: Task, split: Split) -> Result<Vec<DocSample>> {
    cfg.validate()?;
    (0..cfg.split_size(split))
        .map(|i| gen_sample(cfg, task, sample_seed(cfg, task, split, i)))
        .collect()
}

/// One manifest line: enough to regenerate the sample plus the
/// human-readable target for spot checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub seed: u64,
    pub task: Task,
    pub split: Split,
    pub text: String,
}

pub fn manifest_records(samples: &[DocSample], task: Task, split: Split) -> Vec<ManifestRecord> {
    samples
        .iter()
        .enumerate()
        .map(|(index, s)| ManifestRecord {
            index,
            seed: s.seed,
            task,
            split,
            text: s.text.clone(),
        })
        .collect()
}

/// Write one record per line as JSON.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: bad manifest line: {e}", path.display(), lineno + 1))
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Export a grayscale image as a binary PGM (P5, maxval 255) for eyeballing.
pub fn write_pgm(path: &Path, image: &[f64], h: usize, w: usize) -> Result<()> {
    if image.len() != h * w {
        return Err(Error::Contract(format!(
            "pgm export: {} pixels for a {h}×{w} image",
            image.len()
        )));
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}
