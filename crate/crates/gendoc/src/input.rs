//! Encoder input assembly: text + patch embeddings, separate 1-D positions
//! per modality, and six-part 2-D layout embeddings.
//!
//! Text positions receive token embedding + text-1D position + word-box
//! layout; visual positions receive backbone patch feature + visual-1D
//! position + patch-region layout. Instruction and special tokens carry the
//! reserved padding layout row.

use crate::data::ImagePlane;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamBinder};
use crate::numerics::{Graph, NodeId, Scalar, Tensor};
use crate::vocab::{Vocab, BOS, EOS};

/// Task instruction templates, prepended to the encoder text input.
pub mod instructions {
    pub const TEXT_INFILLING: &str = "What is the complete text for <mask> tokens?";
    pub const IMAGE_TOKENS: &str = "What are the values for masked image tokens?";
    pub const COORDINATES: &str = "What are the coordinates of the masked spans?";
    pub const QA: &str = "What is the answer to the question?";
    pub const CLASSIFY: &str = "What is the category of the document?";
    pub const NER: &str = "What is the label of each token?";
    /// Detection runs on images alone; no instruction text.
    pub const DETECT: &str = "";

    pub const ALL: [&str; 7] = [
        TEXT_INFILLING,
        IMAGE_TOKENS,
        COORDINATES,
        QA,
        CLASSIFY,
        NER,
        DETECT,
    ];
}

/// Normalized bounding box, all coordinates in `[0,1]` with `x1<=x2`,
/// `y1<=y2`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<BBox> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.x1 <= self.x2
            && self.y1 <= self.y2
            && [self.x1, self.y1, self.x2, self.y2]
                .iter()
                .all(|v| (0.0..=1.0).contains(v));
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid bbox {:?}", self)))
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn clamped(&self) -> BBox {
        let c = |v: f64| v.clamp(0.0, 1.0);
        BBox {
            x1: c(self.x1),
            y1: c(self.y1),
            x2: c(self.x2),
            y2: c(self.y2),
        }
    }
}

/// Six quantized indices of a box: corners plus width and height.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBoxBins {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
    pub w: usize,
    pub h: usize,
}

/// Quantize one coordinate: `round(v * (B-1))`, clamped into `[0, B-1]`.
/// Rounding is half-away-from-zero.
pub fn quantize_coord(v: f64, bins: usize) -> usize {
    let q = (v * (bins - 1) as f64).round();
    (q.max(0.0) as usize).min(bins - 1)
}

/// Inverse of [`quantize_coord`]: bin center back to `[0,1]`.
pub fn dequantize_coord(bin: usize, bins: usize) -> f64 {
    bin as f64 / (bins - 1) as f64
}

/// Quantize all six box components. Width and height are computed before
/// binning.
pub fn bin_box(b: &BBox, bins: usize) -> BBoxBins {
    BBoxBins {
        x1: quantize_coord(b.x1, bins),
        y1: quantize_coord(b.y1, bins),
        x2: quantize_coord(b.x2, bins),
        y2: quantize_coord(b.y2, bins),
        w: quantize_coord(b.width(), bins),
        h: quantize_coord(b.height(), bins),
    }
}

/// Layout attached to one encoder position: a real quantized box with its
/// center bins, or the reserved padding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutRef {
    Padding,
    Box {
        bins: BBoxBins,
        x_center: usize,
        y_center: usize,
    },
}

impl LayoutRef {
    pub fn of_box(b: &BBox, bins: usize) -> LayoutRef {
        let (cx, cy) = b.center();
        LayoutRef::Box {
            bins: bin_box(b, bins),
            x_center: quantize_coord(cx, bins),
            y_center: quantize_coord(cy, bins),
        }
    }

    /// Center bins feeding the relative-distance buckets. Padding layouts
    /// take the clamp path at bin 0.
    pub fn centers(&self) -> (usize, usize) {
        match self {
            LayoutRef::Padding => (0, 0),
            LayoutRef::Box {
                x_center, y_center, ..
            } => (*x_center, *y_center),
        }
    }
}

/// Geometry of patch `(row, col)` in an `h×w` grid.
pub fn patch_box(row: usize, col: usize, grid_h: usize, grid_w: usize) -> BBox {
    BBox {
        x1: col as f64 / grid_w as f64,
        y1: row as f64 / grid_h as f64,
        x2: (col + 1) as f64 / grid_w as f64,
        y2: (row + 1) as f64 / grid_h as f64,
    }
}

/// Image as a `[1, H, W]` tensor with ink at 1.0 and background at 0.0.
pub fn image_tensor<F: Scalar>(img: &ImagePlane) -> Tensor<F> {
    let data = img
        .pixels
        .iter()
        .map(|&p| F::from_f64((255 - p) as f64 / 255.0))
        .collect();
    Tensor::from_vec(&[1, img.h, img.w], data).expect("image tensor")
}

/// Run the conv backbone over one image: three stride-2 convs down to an
/// `h×w` grid of d_model features, flattened row-major.
pub fn patchify<F: Scalar>(
    g: &mut Graph<F>,
    b: &mut ParamBinder<F>,
    cfg: &ModelConfig,
    img: &ImagePlane,
) -> Result<NodeId> {
    if img.h != cfg.image_size || img.w != cfg.image_size {
        return Err(Error::invalid(format!(
            "backbone expects a {}x{} image, got {}x{}",
            cfg.image_size, cfg.image_size, img.h, img.w
        )));
    }
    let mut x = g.constant(image_tensor::<F>(img));
    for (i, conv) in ["backbone.conv0", "backbone.conv1", "backbone.conv2"]
        .iter()
        .enumerate()
    {
        let w = b.node(g, &format!("{}.w", conv));
        let bias = b.node(g, &format!("{}.b", conv));
        x = g.conv2d(x, w, bias, 2, 1);
        if i < 2 {
            x = g.gelu(x);
        }
    }
    Ok(g.channels_to_rows(x))
}

/// Sum of the six layout-table rows for each position. Padding layouts
/// index the reserved final row of each table.
pub fn embed_layout<F: Scalar>(
    g: &mut Graph<F>,
    b: &mut ParamBinder<F>,
    cfg: &ModelConfig,
    layouts: &[LayoutRef],
) -> NodeId {
    let pad_row = cfg.layout_bins;
    let pick = |f: &dyn Fn(&BBoxBins) -> usize| -> Vec<usize> {
        layouts
            .iter()
            .map(|l| match l {
                LayoutRef::Padding => pad_row,
                LayoutRef::Box { bins, .. } => f(bins),
            })
            .collect()
    };
    let axes: [(&str, Vec<usize>); 6] = [
        ("x1", pick(&|b| b.x1)),
        ("y1", pick(&|b| b.y1)),
        ("x2", pick(&|b| b.x2)),
        ("y2", pick(&|b| b.y2)),
        ("w", pick(&|b| b.w)),
        ("h", pick(&|b| b.h)),
    ];
    let mut acc: Option<NodeId> = None;
    for (axis, rows) in &axes {
        let table = b.node(g, &format!("embed.layout.{}", axis));
        let part = g.embedding(table, rows);
        acc = Some(match acc {
            None => part,
            Some(prev) => g.add(prev, part),
        });
    }
    acc.unwrap()
}

/// Everything needed to build one encoder input.
#[derive(Debug, Clone, Default)]
pub struct AssembleSpec<'a> {
    /// Task instruction, prepended to all other text. May be empty.
    pub instruction: &'a str,
    /// Optional query (e.g. a question) between instruction and OCR text.
    pub query: Option<&'a str>,
    /// OCR-derived token ids (already masked/transformed by the task).
    pub ocr_ids: Vec<usize>,
    /// Layout per OCR token; must align 1:1 with `ocr_ids`.
    pub ocr_layouts: Vec<LayoutRef>,
    /// Document image; `None` drops the visual modality entirely.
    pub image: Option<&'a ImagePlane>,
    /// Patch positions replaced by the learnable mask embedding.
    pub masked_patches: Vec<bool>,
    /// Hard cap on the text segment length (OCR tail is truncated).
    pub max_text_len: usize,
}

/// Assembled encoder input: the embedding matrix plus the per-position
/// metadata attention needs.
pub struct EncoderInput {
    pub emb: NodeId,
    /// Per-position x / y center bins for the relative buckets.
    pub x_center_bins: Vec<usize>,
    pub y_center_bins: Vec<usize>,
    /// Attention keep-mask (one entry per position).
    pub mask: Vec<bool>,
    /// Positions `0..text_len` are text; the rest are patches.
    pub text_len: usize,
    /// Index range of the OCR tokens within the text segment.
    pub ocr_range: (usize, usize),
    /// Full text-segment ids, including specials and instruction.
    pub text_ids: Vec<usize>,
    /// Patch grid (h, w) when the visual modality is present.
    pub patch_grid: Option<(usize, usize)>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Build the final input embedding matrix
/// `[text tokens + text-1D ; patches + visual-1D] + layout` and its
/// attention metadata.
pub fn assemble<'a, F: Scalar>(
    g: &mut Graph<F>,
    b: &mut ParamBinder<F>,
    vocab: &Vocab,
    cfg: &ModelConfig,
    spec: &AssembleSpec<'a>,
) -> Result<EncoderInput> {
    if spec.ocr_ids.len() != spec.ocr_layouts.len() {
        return Err(Error::invalid(format!(
            "{} OCR tokens but {} layouts",
            spec.ocr_ids.len(),
            spec.ocr_layouts.len()
        )));
    }

    // text segment: <bos> instruction [query] ocr <eos>
    let mut text_ids = vec![BOS];
    let mut layouts = vec![LayoutRef::Padding];
    for id in vocab.encode_text(spec.instruction)? {
        text_ids.push(id);
        layouts.push(LayoutRef::Padding);
    }
    if let Some(q) = spec.query {
        for id in vocab.encode_text(q)? {
            text_ids.push(id);
            layouts.push(LayoutRef::Padding);
        }
    }
    let max_text = spec.max_text_len.min(cfg.max_text_pos);
    let budget = max_text.saturating_sub(text_ids.len() + 1);
    let take = spec.ocr_ids.len().min(budget);
    let ocr_start = text_ids.len();
    for i in 0..take {
        text_ids.push(spec.ocr_ids[i]);
        layouts.push(spec.ocr_layouts[i]);
    }
    let ocr_end = text_ids.len();
    text_ids.push(EOS);
    layouts.push(LayoutRef::Padding);
    let text_len = text_ids.len();

    let token_table = b.node(g, "embed.token");
    let text_pos_table = b.node(g, "embed.text_pos");
    let tok = g.embedding(token_table, &text_ids);
    let positions: Vec<usize> = (0..text_len).collect();
    let pos = g.embedding(text_pos_table, &positions);
    let text_part = g.add(tok, pos);

    let mut parts = vec![text_part];
    let mut patch_grid = None;
    if let Some(img) = spec.image {
        let grid = cfg.patch_grid();
        let mut features = patchify(g, b, cfg, img)?;
        if !spec.masked_patches.is_empty() {
            if spec.masked_patches.len() != grid * grid {
                return Err(Error::invalid("masked_patches length != patch count"));
            }
            let mask_emb = b.node(g, "embed.patch_mask");
            features = g.replace_rows(features, mask_emb, &spec.masked_patches);
        }
        let vis_pos_table = b.node(g, "embed.visual_pos");
        let vis_positions: Vec<usize> = (0..grid * grid).collect();
        let vis_pos = g.embedding(vis_pos_table, &vis_positions);
        let vis_part = g.add(features, vis_pos);
        parts.push(vis_part);
        for r in 0..grid {
            for c in 0..grid {
                layouts.push(LayoutRef::of_box(
                    &patch_box(r, c, grid, grid),
                    cfg.layout_bins,
                ));
            }
        }
        patch_grid = Some((grid, grid));
    }
    let content = g.concat_rows(&parts);
    let layout_emb = embed_layout(g, b, cfg, &layouts);
    let emb = g.add(content, layout_emb);

    let (x_center_bins, y_center_bins): (Vec<usize>, Vec<usize>) =
        layouts.iter().map(|l| l.centers()).unzip();
    let mask = vec![true; layouts.len()];
    Ok(EncoderInput {
        emb,
        x_center_bins,
        y_center_bins,
        mask,
        text_len,
        ocr_range: (ocr_start, ocr_end),
        text_ids,
        patch_grid,
    })
}
