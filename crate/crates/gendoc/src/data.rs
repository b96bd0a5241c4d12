//! Deterministic synthetic document corpus and OCR-JSON ingestion.
//!
//! Documents are rendered onto a grayscale page: each word becomes a unique
//! hash-derived 5×7 glyph-block pattern at its laid-out position, so the
//! image carries word identity without any font dependency. Four archetypes
//! (letter, form, receipt, table) provide the class labels; their blocks
//! provide detection boxes; forms carry key-value QA pairs and receipts
//! carry BIO tags.

use crate::error::{Error, Result};
use crate::input::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Read as _;
use std::path::{Path, PathBuf};

pub const DETECTION_CLASSES: [&str; 5] = ["text", "title", "list", "table", "figure"];
pub const ARCHETYPES: [&str; 4] = ["letter", "form", "receipt", "table"];
pub const BIO_TAGS: [&str; 7] = [
    "O", "B-menu", "I-menu", "B-price", "I-price", "B-total", "I-total",
];

const CONTENT_WORDS: [&str; 24] = [
    "alpha", "bravo", "delta", "echo", "fox", "golf", "hotel", "india", "kilo", "lima", "mike",
    "nova", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "unit", "victor", "whisky",
    "xray", "yankee", "zulu",
];

/// Grayscale raster, row-major, 255 = white background, 0 = ink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePlane {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
}

impl ImagePlane {
    pub fn blank(h: usize, w: usize) -> Self {
        ImagePlane {
            h,
            w,
            pixels: vec![255; h * w],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        if x < self.w && y < self.h {
            self.pixels[y * self.w + x] = v;
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.w + x]
    }

    /// Box-filter downsample to a square target size. The source must be an
    /// integer multiple of the target.
    pub fn downsample_to(&self, size: usize) -> Result<ImagePlane> {
        if self.h == size && self.w == size {
            return Ok(self.clone());
        }
        if self.h % size != 0 || self.w % size != 0 {
            return Err(Error::Data(format!(
                "cannot downsample {}x{} to {}x{}",
                self.h, self.w, size, size
            )));
        }
        let fy = self.h / size;
        let fx = self.w / size;
        let mut out = ImagePlane::blank(size, size);
        for y in 0..size {
            for x in 0..size {
                let mut acc: u32 = 0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        acc += self.get(x * fx + dx, y * fy + dy) as u32;
                    }
                }
                out.set(x, y, (acc / (fx * fy) as u32) as u8);
            }
        }
        Ok(out)
    }

    /// Binary PGM (P5) encoding.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<ImagePlane> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 && pos < bytes.len() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(&bytes[start..pos]);
        }
        if fields.len() < 4 || fields[0] != b"P5" {
            return Err(Error::Data("not a binary PGM (P5) file".into()));
        }
        let parse = |f: &[u8]| -> Result<usize> {
            std::str::from_utf8(f)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data("bad PGM header field".into()))
        };
        let w = parse(fields[1])?;
        let h = parse(fields[2])?;
        let maxval = parse(fields[3])?;
        if maxval != 255 {
            return Err(Error::Data("PGM maxval must be 255".into()));
        }
        pos += 1; // single whitespace after maxval
        if bytes.len() < pos + w * h {
            return Err(Error::Data("truncated PGM pixel data".into()));
        }
        Ok(ImagePlane {
            h,
            w,
            pixels: bytes[pos..pos + w * h].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

/// Ground-truth detection object; `class` indexes [`DETECTION_CLASSES`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetObject {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Labels {
    pub class_id: Option<usize>,
    pub qa: Vec<QaPair>,
    pub objects: Vec<DetObject>,
    /// One tag per OCR token, or empty when untagged.
    pub bio_tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcrToken {
    pub text: String,
    pub bbox: BBox,
}

/// One training/eval unit: page raster, OCR tokens with normalized boxes,
/// and whatever task labels the archetype provides.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub image: ImagePlane,
    pub tokens: Vec<OcrToken>,
    pub labels: Labels,
}

impl Document {
    /// All text content, space-joined (vocabulary building input).
    pub fn full_text(&self) -> String {
        let mut parts: Vec<&str> = self.tokens.iter().map(|t| t.text.as_str()).collect();
        for qa in &self.labels.qa {
            parts.push(&qa.question);
            parts.push(&qa.answer);
        }
        parts.join(" ")
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_docs: usize,
    /// Square page size in pixels; must be a multiple of the model input.
    pub page_size: usize,
    /// Archetypes to cycle through (subset of [`ARCHETYPES`]).
    pub archetypes: Vec<String>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            num_docs: 100,
            page_size: 128,
            archetypes: ARCHETYPES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_docs == 0 {
            return Err(Error::Config("num_docs must be positive".into()));
        }
        if self.page_size < 64 {
            return Err(Error::Config("page too small for layout (min 64)".into()));
        }
        for a in &self.archetypes {
            if !ARCHETYPES.contains(&a.as_str()) {
                return Err(Error::Config(format!("unknown archetype {:?}", a)));
            }
        }
        if self.archetypes.is_empty() {
            return Err(Error::Config("archetypes must be non-empty".into()));
        }
        Ok(())
    }
}

// ── rendering ──────────────────────────────────────────────────────────

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn doc_seed(seed: u64, index: usize) -> u64 {
    fnv1a64(&[seed.to_le_bytes(), (index as u64).to_le_bytes()].concat())
}

/// 5×7 bit pattern for a word. The four corner cells are always set so the
/// rendered ink bounding box spans the full word box.
fn word_pattern(word: &str) -> [[bool; 5]; 7] {
    let h = fnv1a64(word.as_bytes());
    let mut grid = [[false; 5]; 7];
    for row in 0..7 {
        for col in 0..5 {
            let bit = row * 5 + col;
            grid[row][col] = (h >> (bit % 64)) & 1 == 1 || (h >> ((bit * 7 + 3) % 64)) & 1 == 1;
        }
    }
    for (r, c) in [(0, 0), (0, 4), (6, 0), (6, 4)] {
        grid[r][c] = true;
    }
    grid
}

struct Page {
    img: ImagePlane,
    tokens: Vec<(String, [usize; 4])>,
}

impl Page {
    fn new(size: usize) -> Self {
        Page {
            img: ImagePlane::blank(size, size),
            tokens: Vec::new(),
        }
    }

    /// Render a word's glyph block into `[x, x+w) × [y, y+h)` and record
    /// its OCR token.
    fn draw_word(&mut self, word: &str, x: usize, y: usize, w: usize, h: usize) {
        let grid = word_pattern(word);
        for (r, row) in grid.iter().enumerate() {
            let y0 = y + r * h / 7;
            let y1 = y + (r + 1) * h / 7;
            for (c, &on) in row.iter().enumerate() {
                if !on {
                    continue;
                }
                let x0 = x + c * w / 5;
                let x1 = x + (c + 1) * w / 5;
                for py in y0..y1.max(y0 + 1) {
                    for px in x0..x1.max(x0 + 1) {
                        self.img.set(px, py, 0);
                    }
                }
            }
        }
        self.tokens.push((word.to_string(), [x, y, x + w, y + h]));
    }

    fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, v: u8) {
        for py in y..y + h {
            for px in x..x + w {
                self.img.set(px, py, v);
            }
        }
    }

    fn outline_rect(&mut self, x: usize, y: usize, w: usize, h: usize) {
        for px in x..x + w {
            self.img.set(px, y, 0);
            self.img.set(px, y + h - 1, 0);
        }
        for py in y..y + h {
            self.img.set(x, py, 0);
            self.img.set(x + w - 1, py, 0);
        }
    }

    fn hatch_rect(&mut self, x: usize, y: usize, w: usize, h: usize) {
        self.outline_rect(x, y, w, h);
        for py in y..y + h {
            for px in x..x + w {
                if (px + py) % 4 == 0 {
                    self.img.set(px, py, 0);
                }
            }
        }
    }
}

const WORD_W: usize = 11;
const WORD_H: usize = 8;
const TITLE_W: usize = 15;
const TITLE_H: usize = 11;
const MARGIN: usize = 6;

struct BlockOut {
    bbox_px: [usize; 4],
    class: usize,
}

fn class_index(name: &str) -> usize {
    DETECTION_CLASSES.iter().position(|c| *c == name).unwrap()
}

fn word_row(
    page: &mut Page,
    words: &[&str],
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    gap: usize,
) -> usize {
    let mut cx = x;
    for word in words {
        page.draw_word(word, cx, y, w, h);
        cx += w + gap;
    }
    cx
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

fn emit_title(page: &mut Page, rng: &mut ChaCha8Rng, y: usize) -> (usize, BlockOut) {
    let n = rng.random_range(1..=3usize);
    let x = MARGIN + rng.random_range(0..8usize);
    let words: Vec<&str> = (0..n).map(|_| pick(rng, &CONTENT_WORDS)).collect();
    let x_end = word_row(page, &words, x, y, TITLE_W, TITLE_H, 3);
    (
        y + TITLE_H + 4,
        BlockOut {
            bbox_px: [x, y, x_end - 3, y + TITLE_H],
            class: class_index("title"),
        },
    )
}

fn emit_paragraph(page: &mut Page, rng: &mut ChaCha8Rng, y: usize, rows: usize) -> (usize, BlockOut) {
    let x = MARGIN + rng.random_range(0..6usize);
    let page_w = page.img.w;
    let mut max_x = x;
    let mut cy = y;
    for _ in 0..rows {
        let nmax = (page_w - MARGIN - x) / (WORD_W + 2);
        let n = rng.random_range(3..=nmax.min(7).max(4));
        let words: Vec<&str> = (0..n).map(|_| pick(rng, &CONTENT_WORDS)).collect();
        let x_end = word_row(page, &words, x, cy, WORD_W, WORD_H, 2);
        max_x = max_x.max(x_end - 2);
        cy += WORD_H + 2;
    }
    (
        cy + 3,
        BlockOut {
            bbox_px: [x, y, max_x, cy - 2],
            class: class_index("text"),
        },
    )
}

fn emit_kv_block(
    page: &mut Page,
    rng: &mut ChaCha8Rng,
    y: usize,
    pairs: &[(String, String)],
) -> (usize, BlockOut) {
    let x = MARGIN + rng.random_range(0..6usize);
    let mut cy = y;
    let mut max_x = x;
    for (k, v) in pairs {
        let x_end = word_row(page, &[k.as_str(), ":", v.as_str()], x, cy, WORD_W, WORD_H, 2);
        max_x = max_x.max(x_end - 2);
        cy += WORD_H + 2;
    }
    (
        cy + 3,
        BlockOut {
            bbox_px: [x, y, max_x, cy - 2],
            class: class_index("text"),
        },
    )
}

/// Receipt item rows with leading bullet squares. Returns the BIO tags for
/// the tokens it drew, in draw order.
fn emit_list_block(
    page: &mut Page,
    rng: &mut ChaCha8Rng,
    y: usize,
    rows: usize,
    tags: &mut Vec<String>,
) -> (usize, BlockOut) {
    let x = MARGIN + rng.random_range(0..6usize);
    let mut cy = y;
    let mut max_x = x;
    for _ in 0..rows {
        page.fill_rect(x, cy + 2, 4, 4, 0);
        let item_words = rng.random_range(1..=2usize);
        let mut row_words: Vec<String> = (0..item_words)
            .map(|_| pick(rng, &CONTENT_WORDS).to_string())
            .collect();
        let price = format!("{}.{}{}", rng.random_range(1..=9), rng.random_range(0..=9), rng.random_range(0..=9));
        row_words.push(price);
        for (i, _) in row_words.iter().enumerate() {
            if i == 0 {
                tags.push("B-menu".to_string());
            } else if i < item_words {
                tags.push("I-menu".to_string());
            } else {
                tags.push("B-price".to_string());
            }
        }
        let refs: Vec<&str> = row_words.iter().map(|s| s.as_str()).collect();
        let x_end = word_row(page, &refs, x + 6, cy, WORD_W, WORD_H, 2);
        max_x = max_x.max(x_end - 2);
        cy += WORD_H + 2;
    }
    // total row
    let amount = format!("{}.{}{}", rng.random_range(10..=99), rng.random_range(0..=9), rng.random_range(0..=9));
    let x_end = word_row(page, &["total", amount.as_str()], x + 6, cy, WORD_W, WORD_H, 2);
    tags.push("O".to_string());
    tags.push("B-total".to_string());
    max_x = max_x.max(x_end - 2);
    cy += WORD_H + 2;
    (
        cy + 3,
        BlockOut {
            bbox_px: [x, y, max_x, cy - 2],
            class: class_index("list"),
        },
    )
}

fn emit_table_block(page: &mut Page, rng: &mut ChaCha8Rng, y: usize) -> (usize, BlockOut) {
    let x = MARGIN + rng.random_range(0..6usize);
    let cols = rng.random_range(2..=3usize);
    let rows = rng.random_range(2..=3usize);
    let cell_w = WORD_W + 6;
    let cell_h = WORD_H + 5;
    let w = cols * cell_w + 1;
    let h = rows * cell_h + 1;
    for r in 0..=rows {
        for px in x..x + w {
            page.img.set(px, y + r * cell_h, 0);
        }
    }
    for c in 0..=cols {
        for py in y..y + h {
            page.img.set(x + c * cell_w, py, 0);
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            let word = pick(rng, &CONTENT_WORDS);
            page.draw_word(word, x + c * cell_w + 3, y + r * cell_h + 3, WORD_W, WORD_H);
        }
    }
    (
        y + h + 4,
        BlockOut {
            bbox_px: [x, y, x + w, y + h],
            class: class_index("table"),
        },
    )
}

fn emit_figure_block(page: &mut Page, rng: &mut ChaCha8Rng, y: usize) -> (usize, BlockOut) {
    let x = MARGIN + rng.random_range(0..10usize);
    let w = rng.random_range(30..=50usize);
    let h = rng.random_range(16..=24usize);
    page.hatch_rect(x, y, w, h);
    (
        y + h + 4,
        BlockOut {
            bbox_px: [x, y, x + w, y + h],
            class: class_index("figure"),
        },
    )
}

/// Generate one document of the given archetype.
pub fn generate_document(spec: &CorpusSpec, index: usize) -> Document {
    let mut rng = ChaCha8Rng::seed_from_u64(doc_seed(spec.seed, index));
    let arch = &spec.archetypes[index % spec.archetypes.len()];
    let class_id = ARCHETYPES.iter().position(|a| a == arch).unwrap();
    let size = spec.page_size;
    let mut page = Page::new(size);
    let mut blocks: Vec<BlockOut> = Vec::new();
    let mut labels = Labels {
        class_id: Some(class_id),
        ..Default::default()
    };
    let mut y = MARGIN + rng.random_range(0..6usize);

    match arch.as_str() {
        "letter" => {
            let (ny, blk) = emit_title(&mut page, &mut rng, y);
            blocks.push(blk);
            y = ny;
            for _ in 0..2 {
                let rows = rng.random_range(2..=3usize);
                let (ny, blk) = emit_paragraph(&mut page, &mut rng, y, rows);
                blocks.push(blk);
                y = ny;
            }
        }
        "form" => {
            let (ny, blk) = emit_title(&mut page, &mut rng, y);
            blocks.push(blk);
            y = ny;
            let n_pairs = rng.random_range(4..=6usize);
            let mut keys: Vec<usize> = (0..8).collect();
            use rand::seq::SliceRandom;
            keys.shuffle(&mut rng);
            let pairs: Vec<(String, String)> = keys[..n_pairs]
                .iter()
                .map(|k| (format!("k{}", k), format!("v{}", rng.random_range(0..40))))
                .collect();
            let (ny, blk) = emit_kv_block(&mut page, &mut rng, y, &pairs);
            blocks.push(blk);
            y = ny;
            for (k, v) in &pairs {
                labels.qa.push(QaPair {
                    question: format!("what is the value of {} ?", k),
                    answer: v.clone(),
                });
            }
        }
        "receipt" => {
            let (ny, blk) = emit_title(&mut page, &mut rng, y);
            blocks.push(blk);
            y = ny;
            // title tokens are outside the tagged region
            let mut tags: Vec<String> = page.tokens.iter().map(|_| "O".to_string()).collect();
            let rows = rng.random_range(3..=5usize);
            let (ny, blk) = emit_list_block(&mut page, &mut rng, y, rows, &mut tags);
            blocks.push(blk);
            y = ny;
            labels.bio_tags = tags;
        }
        "table" => {
            let (ny, blk) = emit_title(&mut page, &mut rng, y);
            blocks.push(blk);
            y = ny;
            let (ny, blk) = emit_table_block(&mut page, &mut rng, y);
            blocks.push(blk);
            y = ny;
            let (ny, blk) = emit_figure_block(&mut page, &mut rng, y);
            blocks.push(blk);
            y = ny;
        }
        other => unreachable!("unknown archetype {}", other),
    }
    let _ = y;

    let norm = size as f64;
    let tokens: Vec<OcrToken> = page
        .tokens
        .iter()
        .map(|(text, b)| OcrToken {
            text: text.clone(),
            bbox: BBox::new(
                b[0] as f64 / norm,
                b[1] as f64 / norm,
                b[2] as f64 / norm,
                b[3] as f64 / norm,
            )
            .expect("generator produced invalid box"),
        })
        .collect();
    labels.objects = blocks
        .iter()
        .map(|blk| DetObject {
            bbox: BBox::new(
                blk.bbox_px[0] as f64 / norm,
                blk.bbox_px[1] as f64 / norm,
                blk.bbox_px[2] as f64 / norm,
                blk.bbox_px[3] as f64 / norm,
            )
            .expect("generator produced invalid object box"),
            class: blk.class,
        })
        .collect();
    if !labels.bio_tags.is_empty() {
        debug_assert_eq!(labels.bio_tags.len(), tokens.len());
    }
    Document {
        id: format!("doc_{:06}", index),
        image: page.img,
        tokens,
        labels,
    }
}

fn worker_count() -> usize {
    let avail = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(8);
    match std::env::var("GENDOC_THREADS") {
        Ok(v) => v.parse::<usize>().map(|n| n.clamp(1, 64)).unwrap_or(avail),
        Err(_) => avail,
    }
}

/// Generate the whole corpus. Parallel per document index (each document
/// derives its own seed), collected back in index order.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Document>> {
    spec.validate()?;
    let n = spec.num_docs;
    let threads = worker_count().min(n.max(1));
    if threads <= 1 {
        return Ok((0..n).map(|i| generate_document(spec, i)).collect());
    }
    let mut docs: Vec<Option<Document>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for t in 0..threads {
            let start = t * chunk;
            let end = ((t + 1) * chunk).min(n);
            if start >= end {
                break;
            }
            let spec_ref = &*spec;
            handles.push(scope.spawn(move || {
                (start..end)
                    .map(|i| generate_document(spec_ref, i))
                    .collect::<Vec<_>>()
            }));
        }
        let mut offset = 0;
        for h in handles {
            for d in h.join().expect("generator thread panicked") {
                docs[offset] = Some(d);
                offset += 1;
            }
        }
    });
    Ok(docs.into_iter().map(|d| d.unwrap()).collect())
}

// ── splits & manifest ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Stratified 80/10/10 split: indices ranked by a seed-derived hash, the
/// first 80% train, then val, then test. Exact counts for any corpus size.
pub fn compute_splits(seed: u64, num_docs: usize) -> Vec<Split> {
    let mut ranked: Vec<(u64, usize)> = (0..num_docs)
        .map(|i| (doc_seed(seed.wrapping_add(0x517cc1b727220a95), i), i))
        .collect();
    ranked.sort_unstable();
    let n_val = num_docs / 10;
    let n_test = num_docs / 10;
    let n_train = num_docs - n_val - n_test;
    let mut out = vec![Split::Train; num_docs];
    for (rank, &(_, idx)) in ranked.iter().enumerate() {
        out[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub num_docs: usize,
    pub page_size: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn split_ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

// ── on-disk corpus ─────────────────────────────────────────────────────

#[derive(serde::Serialize, serde::Deserialize)]
struct OcrFileToken {
    text: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(serde::Serialize, serde::Deserialize)]
struct OcrFile {
    width: usize,
    height: usize,
    tokens: Vec<OcrFileToken>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ObjectJson {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class: String,
}

#[derive(serde::Serialize, serde::Deserialize, Default)]
struct LabelsFile {
    class_id: Option<usize>,
    class_name: Option<String>,
    #[serde(default)]
    qa: Vec<QaPair>,
    #[serde(default)]
    objects: Vec<ObjectJson>,
    #[serde(default)]
    bio_tags: Vec<String>,
}

/// Write the corpus: one PGM + OCR JSON + labels JSON per document, plus a
/// split manifest. Refuses to overwrite an existing corpus unless `force`.
pub fn write_corpus(spec: &CorpusSpec, dir: &Path, force: bool) -> Result<Manifest> {
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(Error::Data(format!(
            "{} already exists; pass --force to overwrite",
            manifest_path.display()
        )));
    }
    let docs = generate_corpus(spec)?;
    let docs_dir = dir.join("docs");
    std::fs::create_dir_all(&docs_dir)?;
    let size = spec.page_size as f64;
    for doc in &docs {
        std::fs::write(docs_dir.join(format!("{}.pgm", doc.id)), doc.image.to_pgm())?;
        let ocr = OcrFile {
            width: spec.page_size,
            height: spec.page_size,
            tokens: doc
                .tokens
                .iter()
                .map(|t| OcrFileToken {
                    text: t.text.clone(),
                    bbox: [
                        t.bbox.x1 * size,
                        t.bbox.y1 * size,
                        t.bbox.x2 * size,
                        t.bbox.y2 * size,
                    ],
                })
                .collect(),
        };
        std::fs::write(
            docs_dir.join(format!("{}.ocr.json", doc.id)),
            serde_json::to_string_pretty(&ocr)?,
        )?;
        let labels = LabelsFile {
            class_id: doc.labels.class_id,
            class_name: doc.labels.class_id.map(|c| ARCHETYPES[c].to_string()),
            qa: doc.labels.qa.clone(),
            objects: doc
                .labels
                .objects
                .iter()
                .map(|o| ObjectJson {
                    bbox: [
                        o.bbox.x1 * size,
                        o.bbox.y1 * size,
                        o.bbox.x2 * size,
                        o.bbox.y2 * size,
                    ],
                    class: DETECTION_CLASSES[o.class].to_string(),
                })
                .collect(),
            bio_tags: doc.labels.bio_tags.clone(),
        };
        std::fs::write(
            docs_dir.join(format!("{}.labels.json", doc.id)),
            serde_json::to_string_pretty(&labels)?,
        )?;
    }
    let splits = compute_splits(spec.seed, spec.num_docs);
    let mut manifest = Manifest {
        num_docs: spec.num_docs,
        page_size: spec.page_size,
        seed: spec.seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (doc, split) in docs.iter().zip(&splits) {
        match split {
            Split::Train => manifest.train.push(doc.id.clone()),
            Split::Val => manifest.val.push(doc.id.clone()),
            Split::Test => manifest.test.push(doc.id.clone()),
        }
    }
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {}", path.display(), e)))?;
    Ok(serde_json::from_str(&text)?)
}

/// Read one document back from a corpus directory.
pub fn load_document(dir: &Path, id: &str) -> Result<Document> {
    let docs_dir = dir.join("docs");
    let pgm_path = docs_dir.join(format!("{}.pgm", id));
    let mut bytes = Vec::new();
    std::fs::File::open(&pgm_path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", pgm_path.display(), e)))?
        .read_to_end(&mut bytes)?;
    let image = ImagePlane::from_pgm(&bytes)?;
    let mut doc = ingest_ocr(&docs_dir.join(format!("{}.ocr.json", id)))?;
    doc.id = id.to_string();
    doc.image = image;

    let labels_path = docs_dir.join(format!("{}.labels.json", id));
    if labels_path.exists() {
        let lf: LabelsFile = serde_json::from_str(&std::fs::read_to_string(&labels_path)?)?;
        let size = doc.image.w as f64;
        doc.labels = Labels {
            class_id: lf.class_id,
            qa: lf.qa,
            objects: lf
                .objects
                .iter()
                .filter_map(|o| {
                    let class = DETECTION_CLASSES.iter().position(|c| *c == o.class)?;
                    let bbox = BBox::new(
                        o.bbox[0] / size,
                        o.bbox[1] / size,
                        o.bbox[2] / size,
                        o.bbox[3] / size,
                    )
                    .ok()?;
                    Some(DetObject { bbox, class })
                })
                .collect(),
            bio_tags: lf.bio_tags,
        };
    }
    Ok(doc)
}

/// Load every document of a split, in manifest order.
pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<Document>> {
    manifest
        .split_ids(split)
        .iter()
        .map(|id| load_document(dir, id))
        .collect()
}

/// Parse an OCR JSON file into a document with normalized boxes. Tokens
/// with invalid boxes are dropped with a warning; malformed JSON is fatal
/// with line/column from the parser.
pub fn ingest_ocr(path: &Path) -> Result<Document> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {}", path.display(), e)))?;
    let parsed: OcrFile = serde_json::from_str(&text)?;
    if parsed.width == 0 || parsed.height == 0 {
        return Err(Error::Data("OCR page dimensions must be positive".into()));
    }
    let mut tokens = Vec::with_capacity(parsed.tokens.len());
    for (i, t) in parsed.tokens.iter().enumerate() {
        let bbox = BBox::new(
            t.bbox[0] / parsed.width as f64,
            t.bbox[1] / parsed.height as f64,
            t.bbox[2] / parsed.width as f64,
            t.bbox[3] / parsed.height as f64,
        );
        match bbox {
            Ok(bbox) => tokens.push(OcrToken {
                text: t.text.clone(),
                bbox,
            }),
            Err(_) => {
                eprintln!(
                    "warning: {}: dropping token {} ({:?}) with invalid box {:?}",
                    path.display(),
                    i,
                    t.text,
                    t.bbox
                );
            }
        }
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("doc")
        .trim_end_matches(".ocr");
    Ok(Document {
        id: stem.to_string(),
        image: ImagePlane::blank(1, 1),
        tokens,
        labels: Labels::default(),
    })
}

/// Ingest every `*.ocr.json` under a directory, sorted by filename.
pub fn ingest_dir(dir: &Path) -> Result<Vec<Document>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(".ocr.json")))
        .collect();
    paths.sort();
    paths.iter().map(|p| ingest_ocr(p)).collect()
}

/// All strings a vocabulary must cover for this corpus: document text plus
/// the task instruction templates.
pub fn vocab_corpus(docs: &[Document]) -> Vec<String> {
    let mut out: Vec<String> = docs.iter().map(|d| d.full_text()).collect();
    out.extend(
        crate::input::instructions::ALL
            .iter()
            .map(|s| s.to_string()),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> CorpusSpec {
        CorpusSpec {
            seed: 7,
            num_docs: n,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&spec(8)).unwrap();
        let b = generate_corpus(&spec(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_boxes_inside_page() {
        for doc in generate_corpus(&spec(20)).unwrap() {
            for t in &doc.tokens {
                t.bbox.validate().unwrap();
            }
            for o in &doc.labels.objects {
                o.bbox.validate().unwrap();
            }
            assert!(!doc.tokens.is_empty());
        }
    }

    #[test]
    fn glyph_centroids_match_box_centers() {
        // raster-scan oracle: ink bounding box center within 1 px of the
        // recorded token box center
        let docs = generate_corpus(&spec(8)).unwrap();
        let size = 128.0;
        for doc in &docs {
            for t in &doc.tokens {
                let (px1, py1) = (t.bbox.x1 * size, t.bbox.y1 * size);
                let (px2, py2) = (t.bbox.x2 * size, t.bbox.y2 * size);
                let (mut ix1, mut iy1, mut ix2, mut iy2) = (usize::MAX, usize::MAX, 0, 0);
                for y in py1 as usize..py2 as usize {
                    for x in px1 as usize..px2 as usize {
                        if doc.image.get(x, y) == 0 {
                            ix1 = ix1.min(x);
                            iy1 = iy1.min(y);
                            ix2 = ix2.max(x);
                            iy2 = iy2.max(y);
                        }
                    }
                }
                assert!(ix1 < usize::MAX, "token {:?} has no ink", t.text);
                let ink_cx = (ix1 + ix2) as f64 / 2.0;
                let ink_cy = (iy1 + iy2) as f64 / 2.0;
                let box_cx = (px1 + px2) / 2.0;
                let box_cy = (py1 + py2) / 2.0;
                assert!(
                    (ink_cx - box_cx).abs() <= 1.0 && (ink_cy - box_cy).abs() <= 1.0,
                    "token {:?}: ink center ({},{}) vs box center ({},{})",
                    t.text,
                    ink_cx,
                    ink_cy,
                    box_cx,
                    box_cy
                );
            }
        }
    }

    #[test]
    fn split_is_8_1_1_for_ten_docs() {
        let splits = compute_splits(0, 10);
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(count(Split::Train), 8);
        assert_eq!(count(Split::Val), 1);
        assert_eq!(count(Split::Test), 1);

        let splits = compute_splits(123, 1000);
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(count(Split::Train), 800);
        assert_eq!(count(Split::Val), 100);
        assert_eq!(count(Split::Test), 100);
    }

    #[test]
    fn pgm_roundtrip() {
        let doc = generate_document(&spec(1), 0);
        let bytes = doc.image.to_pgm();
        let back = ImagePlane::from_pgm(&bytes).unwrap();
        assert_eq!(back, doc.image);
    }

    #[test]
    fn corpus_write_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(10);
        let manifest = write_corpus(&s, dir.path(), false).unwrap();
        assert_eq!(manifest.train.len(), 8);
        assert_eq!(manifest.val.len(), 1);
        assert_eq!(manifest.test.len(), 1);
        // refuses overwrite without force
        assert!(write_corpus(&s, dir.path(), false).is_err());
        assert!(write_corpus(&s, dir.path(), true).is_ok());

        let docs = generate_corpus(&s).unwrap();
        let loaded = load_document(dir.path(), &docs[3].id).unwrap();
        assert_eq!(loaded.image, docs[3].image);
        assert_eq!(loaded.tokens.len(), docs[3].tokens.len());
        assert_eq!(loaded.labels.class_id, docs[3].labels.class_id);
        assert_eq!(loaded.labels.objects.len(), docs[3].labels.objects.len());
        for (a, b) in loaded.tokens.iter().zip(&docs[3].tokens) {
            assert_eq!(a.text, b.text);
            assert!((a.bbox.x1 - b.bbox.x1).abs() < 1e-9);
        }
    }

    #[test]
    fn ingest_drops_invalid_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ocr.json");
        std::fs::write(
            &path,
            r#"{"width": 100, "height": 100,
                "tokens": [
                  {"text": "good", "box": [10, 10, 20, 20]},
                  {"text": "bad", "box": [10, 10, 5, 20]}
                ]}"#,
        )
        .unwrap();
        let doc = ingest_ocr(&path).unwrap();
        assert_eq!(doc.tokens.len(), 1);
        assert_eq!(doc.tokens[0].text, "good");
    }

    #[test]
    fn ingest_rejects_malformed_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.ocr.json");
        std::fs::write(&path, "{ not json").unwrap();
        assert!(ingest_ocr(&path).is_err());
    }

    #[test]
    fn downsample_averages_blocks() {
        let mut img = ImagePlane::blank(4, 4);
        img.set(0, 0, 0);
        img.set(1, 0, 0);
        let down = img.downsample_to(2).unwrap();
        assert_eq!(down.get(0, 0) as u32, (0 + 0 + 255 + 255) / 4);
        assert_eq!(down.get(1, 1), 255);
        assert!(img.downsample_to(3).is_err());
    }

    #[test]
    fn receipts_have_aligned_bio_tags() {
        let s = CorpusSpec {
            archetypes: vec!["receipt".into()],
            ..spec(5)
        };
        for doc in generate_corpus(&s).unwrap() {
            assert_eq!(doc.labels.bio_tags.len(), doc.tokens.len());
            assert!(doc.labels.bio_tags.iter().any(|t| t == "B-menu"));
            assert!(doc.labels.bio_tags.iter().any(|t| t == "B-total"));
        }
    }

    #[test]
    fn forms_have_qa_pairs() {
        let s = CorpusSpec {
            archetypes: vec!["form".into()],
            ..spec(5)
        };
        for doc in generate_corpus(&s).unwrap() {
            assert!(!doc.labels.qa.is_empty());
            for qa in &doc.labels.qa {
                // the answered value is on the page
                assert!(doc.tokens.iter().any(|t| t.text == qa.answer));
            }
        }
    }
}
