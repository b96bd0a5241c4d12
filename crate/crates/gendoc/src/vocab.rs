//! Shared vocabulary over subword, special, visual, layout-bin, and class
//! tokens.
//!
//! All token kinds live in one contiguous id space so the decoder can emit
//! any modality through a single output projection. Block layout, in order:
//! specials, subwords, visual tokens, layout bins, class tokens.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const SEP: usize = 4;
const NUM_SPECIALS: usize = 5;
const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<mask>", "<sep>"];

/// Subword granularity. Character mode roundtrips any string over the
/// corpus alphabet; word mode splits on whitespace and joins with single
/// spaces on decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Char,
    Word,
}

#[derive(Debug, Clone)]
pub struct VocabConfig {
    pub mode: TokenizerMode,
    /// Visual-token block size (codebook entries).
    pub visual_tokens: usize,
    /// Layout-bin block size.
    pub layout_bins: usize,
    /// Detection class names; a noise class is appended automatically.
    pub class_names: Vec<String>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            mode: TokenizerMode::Char,
            visual_tokens: 64,
            layout_bins: 1000,
            class_names: crate::data::DETECTION_CLASSES
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// Immutable shared vocabulary. Build once, share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    mode: TokenizerMode,
    /// Subword string → id.
    table: BTreeMap<String, usize>,
    /// id − subword_offset → subword string.
    reverse: Vec<String>,
    visual_offset: usize,
    visual_len: usize,
    layout_offset: usize,
    layout_len: usize,
    class_offset: usize,
    class_names: Vec<String>,
}

/// Which block an id falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Special,
    Subword,
    Visual,
    Layout,
    Class,
}

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::Special => "special",
            Block::Subword => "subword",
            Block::Visual => "visual",
            Block::Layout => "layout",
            Block::Class => "class",
        }
    }
}

/// Build the vocabulary from a text corpus. Deterministic given corpus
/// content and config: subwords are sorted before id assignment.
pub fn build_vocab<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    config: &VocabConfig,
) -> Result<Vocab> {
    let mut seen = std::collections::BTreeSet::new();
    let mut any = false;
    for text in corpus {
        any = true;
        match config.mode {
            TokenizerMode::Char => {
                for ch in text.chars() {
                    seen.insert(ch.to_string());
                }
            }
            TokenizerMode::Word => {
                for w in text.split_whitespace() {
                    seen.insert(w.to_string());
                }
            }
        }
    }
    if !any || seen.is_empty() {
        return Err(Error::Vocab("empty corpus".into()));
    }
    let reverse: Vec<String> = seen.into_iter().collect();
    let table: BTreeMap<String, usize> = reverse
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), NUM_SPECIALS + i))
        .collect();
    let visual_offset = NUM_SPECIALS + reverse.len();
    let layout_offset = visual_offset + config.visual_tokens;
    let class_offset = layout_offset + config.layout_bins;
    let mut class_names = config.class_names.clone();
    class_names.push("noise".to_string());
    Ok(Vocab {
        mode: config.mode,
        table,
        reverse,
        visual_offset,
        visual_len: config.visual_tokens,
        layout_offset,
        layout_len: config.layout_bins,
        class_offset,
        class_names,
    })
}

impl Vocab {
    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    /// Total id count across all blocks.
    pub fn len(&self) -> usize {
        self.class_offset + self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn visual_offset(&self) -> usize {
        self.visual_offset
    }

    pub fn visual_len(&self) -> usize {
        self.visual_len
    }

    pub fn layout_offset(&self) -> usize {
        self.layout_offset
    }

    pub fn layout_bins(&self) -> usize {
        self.layout_len
    }

    pub fn class_offset(&self) -> usize {
        self.class_offset
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn block_of(&self, id: usize) -> Result<Block> {
        if id < NUM_SPECIALS {
            Ok(Block::Special)
        } else if id < self.visual_offset {
            Ok(Block::Subword)
        } else if id < self.layout_offset {
            Ok(Block::Visual)
        } else if id < self.class_offset {
            Ok(Block::Layout)
        } else if id < self.len() {
            Ok(Block::Class)
        } else {
            Err(Error::Vocab(format!("id {} out of vocabulary", id)))
        }
    }

    /// Encode a string into subword ids. Errors on symbols absent from the
    /// corpus alphabet.
    pub fn encode_text(&self, s: &str) -> Result<Vec<usize>> {
        match self.mode {
            TokenizerMode::Char => s
                .chars()
                .map(|ch| {
                    self.table
                        .get(ch.to_string().as_str())
                        .copied()
                        .ok_or_else(|| Error::Vocab(format!("unknown character {:?}", ch)))
                })
                .collect(),
            TokenizerMode::Word => s
                .split_whitespace()
                .map(|w| {
                    self.table
                        .get(w)
                        .copied()
                        .ok_or_else(|| Error::Vocab(format!("unknown word {:?}", w)))
                })
                .collect(),
        }
    }

    /// Decode subword ids back to a string. Special ids are skipped;
    /// visual/layout/class ids are structured errors naming their block.
    pub fn decode_text(&self, ids: &[usize]) -> Result<String> {
        let mut parts = Vec::new();
        for &id in ids {
            match self.block_of(id)? {
                Block::Subword => parts.push(self.reverse[id - NUM_SPECIALS].as_str()),
                Block::Special => {}
                b => return Err(Error::DecodeBlock { id, block: b.name() }),
            }
        }
        Ok(match self.mode {
            TokenizerMode::Char => parts.concat(),
            TokenizerMode::Word => parts.join(" "),
        })
    }

    pub fn visual_token(&self, code: usize) -> Result<usize> {
        if code >= self.visual_len {
            return Err(Error::Vocab(format!(
                "visual code {} out of range {}",
                code, self.visual_len
            )));
        }
        Ok(self.visual_offset + code)
    }

    pub fn layout_token(&self, bin: usize) -> Result<usize> {
        if bin >= self.layout_len {
            return Err(Error::Vocab(format!(
                "layout bin {} out of range {}",
                bin, self.layout_len
            )));
        }
        Ok(self.layout_offset + bin)
    }

    pub fn layout_bin_of(&self, id: usize) -> Result<usize> {
        match self.block_of(id)? {
            Block::Layout => Ok(id - self.layout_offset),
            b => Err(Error::DecodeBlock { id, block: b.name() }),
        }
    }

    pub fn class_token(&self, class: usize) -> Result<usize> {
        if class >= self.class_names.len() {
            return Err(Error::Vocab(format!("class {} out of range", class)));
        }
        Ok(self.class_offset + class)
    }

    pub fn class_of(&self, id: usize) -> Result<usize> {
        match self.block_of(id)? {
            Block::Class => Ok(id - self.class_offset),
            b => Err(Error::DecodeBlock { id, block: b.name() }),
        }
    }

    pub fn noise_class(&self) -> usize {
        self.class_names.len() - 1
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.class_names[class]
    }

    /// Ids the text expert may emit during generation.
    pub fn text_legal_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for id in NUM_SPECIALS..self.visual_offset {
            mask[id] = true;
        }
        mask[EOS] = true;
        mask
    }

    /// Ids legal in a layout-coordinate slot.
    pub fn layout_legal_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for id in self.layout_offset..self.class_offset {
            mask[id] = true;
        }
        mask
    }

    /// Ids legal in a detection class slot.
    pub fn class_legal_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for id in self.class_offset..self.len() {
            mask[id] = true;
        }
        mask
    }

    /// Serialize to the line-oriented vocab file format: a header with
    /// block offsets, then one `U+XXXX`-escaped subword entry per line,
    /// then class names. Byte-stable across runs for identical inputs.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let mode = match self.mode {
            TokenizerMode::Char => "char",
            TokenizerMode::Word => "word",
        };
        writeln!(out, "gendoc-vocab v1").unwrap();
        writeln!(out, "mode {}", mode).unwrap();
        writeln!(
            out,
            "blocks specials=5 subwords={} visual={} layout={} classes={}",
            self.reverse.len(),
            self.visual_len,
            self.layout_len,
            self.class_names.len()
        )
        .unwrap();
        for entry in &self.reverse {
            let escaped: String = entry
                .chars()
                .map(|c| format!("U+{:04X}", c as u32))
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(out, "{}", escaped).unwrap();
        }
        for name in &self.class_names {
            writeln!(out, "class {}", name).unwrap();
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn from_file_string(s: &str) -> Result<Vocab> {
        let mut lines = s.lines();
        let header = lines.next().unwrap_or_default();
        if header != "gendoc-vocab v1" {
            return Err(Error::Vocab(format!("bad vocab header {:?}", header)));
        }
        let mode_line = lines
            .next()
            .ok_or_else(|| Error::Vocab("missing mode line".into()))?;
        let mode = match mode_line.strip_prefix("mode ") {
            Some("char") => TokenizerMode::Char,
            Some("word") => TokenizerMode::Word,
            other => return Err(Error::Vocab(format!("bad mode line {:?}", other))),
        };
        let blocks_line = lines
            .next()
            .ok_or_else(|| Error::Vocab("missing blocks line".into()))?;
        let mut counts = BTreeMap::new();
        for part in blocks_line
            .strip_prefix("blocks ")
            .ok_or_else(|| Error::Vocab("bad blocks line".into()))?
            .split(' ')
        {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Vocab(format!("bad block field {:?}", part)))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::Vocab(format!("bad block count {:?}", v)))?;
            counts.insert(k.to_string(), v);
        }
        let need = |k: &str| -> Result<usize> {
            counts
                .get(k)
                .copied()
                .ok_or_else(|| Error::Vocab(format!("missing block count {}", k)))
        };
        let n_sub = need("subwords")?;
        let n_vis = need("visual")?;
        let n_lay = need("layout")?;
        let n_cls = need("classes")?;

        let mut reverse = Vec::with_capacity(n_sub);
        for _ in 0..n_sub {
            let line = lines
                .next()
                .ok_or_else(|| Error::Vocab("truncated subword section".into()))?;
            let mut entry = String::new();
            for code in line.split(' ') {
                let hex = code
                    .strip_prefix("U+")
                    .ok_or_else(|| Error::Vocab(format!("bad escape {:?}", code)))?;
                let cp = u32::from_str_radix(hex, 16)
                    .map_err(|_| Error::Vocab(format!("bad codepoint {:?}", hex)))?;
                entry.push(
                    char::from_u32(cp)
                        .ok_or_else(|| Error::Vocab(format!("invalid codepoint {}", cp)))?,
                );
            }
            reverse.push(entry);
        }
        let mut class_names = Vec::with_capacity(n_cls);
        for _ in 0..n_cls {
            let line = lines
                .next()
                .ok_or_else(|| Error::Vocab("truncated class section".into()))?;
            class_names.push(
                line.strip_prefix("class ")
                    .ok_or_else(|| Error::Vocab(format!("bad class line {:?}", line)))?
                    .to_string(),
            );
        }
        let table = reverse
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), NUM_SPECIALS + i))
            .collect();
        let visual_offset = NUM_SPECIALS + reverse.len();
        let layout_offset = visual_offset + n_vis;
        let class_offset = layout_offset + n_lay;
        Ok(Vocab {
            mode,
            table,
            reverse,
            visual_offset,
            visual_len: n_vis,
            layout_offset,
            layout_len: n_lay,
            class_offset,
            class_names,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Vocab> {
        Vocab::from_file_string(&std::fs::read_to_string(path)?)
    }

    pub fn special_name(id: usize) -> &'static str {
        SPECIAL_NAMES[id]
    }
}

/// Token sequence with aligned 1-D positions and optional per-token boxes.
/// The three lists always have equal length.
#[derive(Debug, Clone, Default)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub boxes: Vec<Option<crate::input::BBox>>,
}

impl TokenSeq {
    pub fn push(&mut self, id: usize, bbox: Option<crate::input::BBox>) {
        self.positions.push(self.ids.len());
        self.ids.push(id);
        self.boxes.push(bbox);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
