//! Transformer encoder-decoder with disentangled content-to-layout
//! attention on the encoder side and modality-expert FFNs in the decoder.
//!
//! Every learnable tensor lives in a flat [`ParamSet`] keyed by a stable
//! dotted name, so checkpoints, the optimizer, and gradient checks all see
//! the same address space. Forward passes bind parameters lazily into a
//! [`Graph`] through a [`ParamBinder`].

use crate::error::{Error, Result};
use crate::input::EncoderInput;
use crate::numerics::{GradStore, Graph, NodeId, ParamSet, Scalar, Tensor};
use std::collections::HashMap;

/// Decoder FFN routing tag: exactly one expert is active per forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertTag {
    Text,
    Visual,
    Layout,
}

impl ExpertTag {
    pub fn name(self) -> &'static str {
        match self {
            ExpertTag::Text => "text",
            ExpertTag::Visual => "visual",
            ExpertTag::Layout => "layout",
        }
    }

    pub fn all() -> [ExpertTag; 3] {
        [ExpertTag::Text, ExpertTag::Visual, ExpertTag::Layout]
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    /// Relative half-window k; each axis gets 2k buckets.
    pub rel_half_window: usize,
    /// Layout quantization bins B. Tables carry B+1 rows; the last row is
    /// the padding layout.
    pub layout_bins: usize,
    pub image_size: usize,
    pub patch_stride: usize,
    /// VQ-VAE code dimension.
    pub d_code: usize,
    /// Visual codebook entries — must match the vocab visual block.
    pub visual_tokens: usize,
    pub max_text_pos: usize,
    pub max_dec_pos: usize,
    pub n_classes: usize,
    pub n_tags: usize,
    pub ln_eps: f64,
    /// Disable the content-to-layout attention terms entirely
    /// (content-only ablation path).
    pub layout_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 256,
            rel_half_window: 32,
            layout_bins: 1000,
            image_size: 64,
            patch_stride: 8,
            d_code: 16,
            visual_tokens: 64,
            max_text_pos: 512,
            max_dec_pos: 320,
            n_classes: 4,
            n_tags: 7,
            ln_eps: 1e-5,
            layout_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        debug_assert_eq!(self.d_model % self.n_heads, 0);
        self.d_model / self.n_heads
    }

    /// Patch grid extent per axis.
    pub fn patch_grid(&self) -> usize {
        debug_assert_eq!(self.image_size % self.patch_stride, 0);
        self.image_size / self.patch_stride
    }

    pub fn num_patches(&self) -> usize {
        let g = self.patch_grid();
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.image_size % self.patch_stride != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch stride {}",
                self.image_size, self.patch_stride
            )));
        }
        if self.patch_stride != 8 {
            return Err(Error::Config(
                "patch stride is fixed at 8 by the three stride-2 conv layers".into(),
            ));
        }
        if self.rel_half_window == 0 {
            return Err(Error::Config("rel_half_window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Initialize all model parameters. The visual and layout experts start as
/// copies of the text expert.
pub fn init_params(
    cfg: &ModelConfig,
    vocab_size: usize,
    rng: &mut impl rand::Rng,
) -> ParamSet<f32> {
    let d = cfg.d_model;
    let std = 0.02;
    let mut p = ParamSet::new();
    let w = |p: &mut ParamSet<f32>, name: String, shape: &[usize], rng: &mut dyn rand::RngCore| {
        p.insert(name, Tensor::randn(shape, std, &mut *rng));
    };
    let zeros = |p: &mut ParamSet<f32>, name: String, shape: &[usize]| {
        p.insert(name, Tensor::zeros(shape));
    };
    let ones = |p: &mut ParamSet<f32>, name: String, shape: &[usize]| {
        p.insert(name, Tensor::filled(shape, 1.0));
    };

    w(&mut p, "embed.token".into(), &[vocab_size, d], rng);
    w(&mut p, "embed.text_pos".into(), &[cfg.max_text_pos, d], rng);
    w(&mut p, "embed.visual_pos".into(), &[cfg.num_patches(), d], rng);
    w(&mut p, "embed.dec_pos".into(), &[cfg.max_dec_pos, d], rng);
    for axis in ["x1", "y1", "x2", "y2", "w", "h"] {
        w(
            &mut p,
            format!("embed.layout.{}", axis),
            &[cfg.layout_bins + 1, d],
            rng,
        );
    }
    w(&mut p, "embed.patch_mask".into(), &[d], rng);

    // image backbone: three stride-2 convs, 64x64 -> 8x8
    w(&mut p, "backbone.conv0.w".into(), &[16, 1, 4, 4], rng);
    zeros(&mut p, "backbone.conv0.b".into(), &[16]);
    w(&mut p, "backbone.conv1.w".into(), &[32, 16, 4, 4], rng);
    zeros(&mut p, "backbone.conv1.b".into(), &[32]);
    w(&mut p, "backbone.conv2.w".into(), &[d, 32, 4, 4], rng);
    zeros(&mut p, "backbone.conv2.b".into(), &[d]);

    let k2 = 2 * cfg.rel_half_window;
    for i in 0..cfg.enc_layers {
        for nm in ["wq", "wk", "wv", "wo"] {
            w(&mut p, format!("enc.{}.attn.{}", i, nm), &[d, d], rng);
        }
        for nm in ["bq", "bk", "bv", "bo"] {
            zeros(&mut p, format!("enc.{}.attn.{}", i, nm), &[d]);
        }
        w(&mut p, format!("enc.{}.attn.relx", i), &[k2, d], rng);
        w(&mut p, format!("enc.{}.attn.rely", i), &[k2, d], rng);
        ones(&mut p, format!("enc.{}.ln1.g", i), &[d]);
        zeros(&mut p, format!("enc.{}.ln1.b", i), &[d]);
        w(&mut p, format!("enc.{}.ffn.w1", i), &[d, cfg.d_ff], rng);
        zeros(&mut p, format!("enc.{}.ffn.b1", i), &[cfg.d_ff]);
        w(&mut p, format!("enc.{}.ffn.w2", i), &[cfg.d_ff, d], rng);
        zeros(&mut p, format!("enc.{}.ffn.b2", i), &[d]);
        ones(&mut p, format!("enc.{}.ln2.g", i), &[d]);
        zeros(&mut p, format!("enc.{}.ln2.b", i), &[d]);
    }

    for i in 0..cfg.dec_layers {
        for blk in ["self", "cross"] {
            for nm in ["wq", "wk", "wv", "wo"] {
                w(&mut p, format!("dec.{}.{}.{}", i, blk, nm), &[d, d], rng);
            }
            for nm in ["bq", "bk", "bv", "bo"] {
                zeros(&mut p, format!("dec.{}.{}.{}", i, blk, nm), &[d]);
            }
        }
        // text expert first; visual and layout start as copies of it
        w(&mut p, format!("dec.{}.expert.text.w1", i), &[d, cfg.d_ff], rng);
        zeros(&mut p, format!("dec.{}.expert.text.b1", i), &[cfg.d_ff]);
        w(&mut p, format!("dec.{}.expert.text.w2", i), &[cfg.d_ff, d], rng);
        zeros(&mut p, format!("dec.{}.expert.text.b2", i), &[d]);
        for ex in ["visual", "layout"] {
            for nm in ["w1", "b1", "w2", "b2"] {
                let src = p[&format!("dec.{}.expert.text.{}", i, nm)].clone();
                p.insert(format!("dec.{}.expert.{}.{}", i, ex, nm), src);
            }
        }
        for ln in ["ln1", "ln2", "ln3"] {
            ones(&mut p, format!("dec.{}.{}.g", i, ln), &[d]);
            zeros(&mut p, format!("dec.{}.{}.b", i, ln), &[d]);
        }
    }

    // VQ-VAE encoder/decoder + codebook
    w(&mut p, "vqvae.enc.conv0.w".into(), &[16, 1, 4, 4], rng);
    zeros(&mut p, "vqvae.enc.conv0.b".into(), &[16]);
    w(&mut p, "vqvae.enc.conv1.w".into(), &[32, 16, 4, 4], rng);
    zeros(&mut p, "vqvae.enc.conv1.b".into(), &[32]);
    w(&mut p, "vqvae.enc.conv2.w".into(), &[cfg.d_code, 32, 4, 4], rng);
    zeros(&mut p, "vqvae.enc.conv2.b".into(), &[cfg.d_code]);
    w(&mut p, "vqvae.dec.conv0.w".into(), &[cfg.d_code, 32, 4, 4], rng);
    zeros(&mut p, "vqvae.dec.conv0.b".into(), &[32]);
    w(&mut p, "vqvae.dec.conv1.w".into(), &[32, 16, 4, 4], rng);
    zeros(&mut p, "vqvae.dec.conv1.b".into(), &[16]);
    w(&mut p, "vqvae.dec.conv2.w".into(), &[16, 1, 4, 4], rng);
    zeros(&mut p, "vqvae.dec.conv2.b".into(), &[1]);
    p.insert(
        "vqvae.codebook".into(),
        Tensor::randn(&[cfg.visual_tokens, cfg.d_code], 0.05, rng),
    );

    w(&mut p, "head.classify.w".into(), &[d, cfg.n_classes], rng);
    zeros(&mut p, "head.classify.b".into(), &[cfg.n_classes]);
    w(&mut p, "head.ner.w".into(), &[d, cfg.n_tags], rng);
    zeros(&mut p, "head.ner.b".into(), &[cfg.n_tags]);

    p
}

/// Lazily binds named parameters into a graph as leaves, each at most once.
pub struct ParamBinder<'a, F: Scalar> {
    params: &'a ParamSet<F>,
    nodes: HashMap<String, NodeId>,
}

impl<'a, F: Scalar> ParamBinder<'a, F> {
    pub fn new(params: &'a ParamSet<F>) -> Self {
        ParamBinder {
            params,
            nodes: HashMap::new(),
        }
    }

    pub fn node(&mut self, g: &mut Graph<F>, name: &str) -> NodeId {
        if let Some(&id) = self.nodes.get(name) {
            return id;
        }
        let tensor = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name))
            .clone();
        let id = g.leaf(tensor);
        self.nodes.insert(name.to_string(), id);
        id
    }

    pub fn params(&self) -> &ParamSet<F> {
        self.params
    }

    /// Add this graph's gradients, scaled, into a full-size accumulator.
    /// Parameters never bound contribute nothing (an exact zero).
    pub fn accumulate_grads(
        &self,
        store: &GradStore<F>,
        into: &mut ParamSet<F>,
        scale: F,
    ) {
        for (name, id) in &self.nodes {
            if let Some(grad) = store.get(*id) {
                let acc = into
                    .get_mut(name)
                    .unwrap_or_else(|| panic!("gradient for unknown parameter {:?}", name));
                for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += *g * scale;
                }
            }
        }
    }

    /// Gradients of one backward pass, zero-filled for unbound parameters.
    pub fn grads(&self, store: &GradStore<F>) -> ParamSet<F> {
        let mut out = zeros_like(self.params);
        self.accumulate_grads(store, &mut out, F::one());
        out
    }
}

pub fn zeros_like<F: Scalar>(params: &ParamSet<F>) -> ParamSet<F> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
        .collect()
}

/// Relative-distance bucket: clamped linear buckets in `[0, 2k)`.
/// `i - j <= -k` maps to 0, `i - j >= k` maps to `2k-1`, else `i - j + k`.
pub fn rel_bucket(i: usize, j: usize, k: usize) -> usize {
    let d = i as isize - j as isize;
    let k = k as isize;
    if d <= -k {
        0
    } else if d >= k {
        (2 * k - 1) as usize
    } else {
        (d + k) as usize
    }
}

fn linear<F: Scalar>(
    g: &mut Graph<F>,
    b: &mut ParamBinder<F>,
    x: NodeId,
    w_name: &str,
    b_name: &str,
) -> NodeId {
    let w = b.node(g, w_name);
    let bias = b.node(g, b_name);
    let y = g.matmul(x, w);
    g.add_bias(y, bias)
}

fn ffn<F: Scalar>(
    g: &mut Graph<F>,
    b: &mut ParamBinder<F>,
    x: NodeId,
    prefix: &str,
) -> NodeId {
    let h = linear(g, b, x, &format!("{}.w1", prefix), &format!("{}.b1", prefix));
    let h = g.gelu(h);
    linear(g, b, h, &format!("{}.w2", prefix), &format!("{}.b2", prefix))
}

fn layer_norm<F: Scalar>(
    g: &mut Graph<F>,
    b: &mut ParamBinder<F>,
    x: NodeId,
    prefix: &str,
    eps: f64,
) -> NodeId {
    let gamma = b.node(g, &format!("{}.g", prefix));
    let beta = b.node(g, &format!("{}.b", prefix));
    g.layer_norm(x, gamma, beta, eps)
}

/// Pairwise relative-bucket indices for one axis, `L×L` row-major.
fn bucket_table(bins: &[usize], k: usize) -> Vec<usize> {
    let l = bins.len();
    let mut idx = vec![0usize; l * l];
    for i in 0..l {
        for j in 0..l {
            idx[i * l + j] = rel_bucket(bins[i], bins[j], k);
        }
    }
    idx
}

/// Keep-mask expanded to `L×L`: row i may attend to column j iff `keep[j]`.
fn attend_mask(keep: &[bool]) -> Vec<bool> {
    let l = keep.len();
    let mut m = vec![false; l * l];
    for i in 0..l {
        for (j, &kj) in keep.iter().enumerate() {
            m[i * l + j] = kj;
        }
    }
    m
}

/// Disentangled self-attention: content-to-content plus per-axis
/// content-to-layout scores over relative center-bin buckets, scaled by
/// `1/sqrt(3*d_head)`.
fn disentangled_self_attention<F: Scalar>(
    g: &mut Graph<F>,
    b: &mut ParamBinder<F>,
    cfg: &ModelConfig,
    prefix: &str,
    x: NodeId,
    enc_in: &EncoderInput,
) -> Result<NodeId> {
    let l = g.value(x).shape()[0];
    let dh = cfg.d_head();
    let k = cfg.rel_half_window;
    let q = linear(g, b, x, &format!("{}.wq", prefix), &format!("{}.bq", prefix));
    let kc = linear(g, b, x, &format!("{}.wk", prefix), &format!("{}.bk", prefix));
    let v = linear(g, b, x, &format!("{}.wv", prefix), &format!("{}.bv", prefix));

    let (xbuckets, ybuckets) = if cfg.layout_attention {
        (
            bucket_table(&enc_in.x_center_bins, k),
            bucket_table(&enc_in.y_center_bins, k),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let mask = attend_mask(&enc_in.mask);
    let scale = F::from_f64(1.0 / ((3 * dh) as f64).sqrt());

    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(kc, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let mut scores = g.matmul_nt(qh, kh);
        if cfg.layout_attention {
            let relx = b.node(g, &format!("{}.relx", prefix));
            let rely = b.node(g, &format!("{}.rely", prefix));
            let relx_h = g.slice_cols(relx, h * dh, dh);
            let rely_h = g.slice_cols(rely, h * dh, dh);
            let qx = g.matmul_nt(qh, relx_h);
            let qy = g.matmul_nt(qh, rely_h);
            let cx = g.gather_cols_per_row(qx, &xbuckets, l);
            let cy = g.gather_cols_per_row(qy, &ybuckets, l);
            let cxy = g.add(cx, cy);
            scores = g.add(scores, cxy);
        }
        let scores = g.scale(scores, scale);
        let attn = g.masked_softmax_rows(scores, Some(&mask))?;
        heads.push(g.matmul(attn, vh));
    }
    let merged = g.concat_cols(&heads);
    Ok(linear(g, b, merged, &format!("{}.wo", prefix), &format!("{}.bo", prefix)))
}

/// Standard multi-head attention used by the decoder. Queries come from
/// `x`, keys and values from `kv`, with an optional `Lq×Lk` keep-mask.
fn content_attention<F: Scalar>(
    g: &mut Graph<F>,
    b: &mut ParamBinder<F>,
    cfg: &ModelConfig,
    prefix: &str,
    x: NodeId,
    kv: NodeId,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let dh = cfg.d_head();
    let q = linear(g, b, x, &format!("{}.wq", prefix), &format!("{}.bq", prefix));
    let kc = linear(g, b, kv, &format!("{}.wk", prefix), &format!("{}.bk", prefix));
    let v = linear(g, b, kv, &format!("{}.wv", prefix), &format!("{}.bv", prefix));
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(kc, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let attn = g.masked_softmax_rows(scores, mask)?;
        heads.push(g.matmul(attn, vh));
    }
    let merged = g.concat_cols(&heads);
    Ok(linear(g, b, merged, &format!("{}.wo", prefix), &format!("{}.bo", prefix)))
}

/// Encoder stack: post-norm transformer layers with disentangled attention.
/// There is deliberately no content-to-1D-position attention term anywhere;
/// 1-D order only enters through the input position embeddings.
pub fn encoder_forward<F: Scalar>(
    g: &mut Graph<F>,
    b: &mut ParamBinder<F>,
    cfg: &ModelConfig,
    enc_in: &EncoderInput,
) -> Result<NodeId> {
    let mut x = enc_in.emb;
    for i in 0..cfg.enc_layers {
        let attn = disentangled_self_attention(g, b, cfg, &format!("enc.{}.attn", i), x, enc_in)?;
        let res = g.add(x, attn);
        x = layer_norm(g, b, res, &format!("enc.{}.ln1", i), cfg.ln_eps);
        let f = ffn(g, b, x, &format!("enc.{}.ffn", i));
        let res = g.add(x, f);
        x = layer_norm(g, b, res, &format!("enc.{}.ln2", i), cfg.ln_eps);
        if !g.value(x).is_finite() {
            return Err(Error::NonFinite(format!(
                "encoder layer {} produced non-finite values",
                i
            )));
        }
    }
    Ok(x)
}

fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    m
}

fn cross_mask(n_dec: usize, keep: &[bool]) -> Vec<bool> {
    let lk = keep.len();
    let mut m = vec![false; n_dec * lk];
    for i in 0..n_dec {
        for (j, &kj) in keep.iter().enumerate() {
            m[i * lk + j] = kj;
        }
    }
    m
}

/// Decoder stack. FFN sublayers route through the single expert named by
/// `expert`; attention sublayers are shared across experts.
///
/// `extra_input` is added elementwise to the decoder input embeddings
/// (used by the token-labeling head, which injects aligned encoder states).
/// Returns the final hidden states, `n×d`.
pub fn decoder_forward<F: Scalar>(
    g: &mut Graph<F>,
    b: &mut ParamBinder<F>,
    cfg: &ModelConfig,
    dec_ids: &[usize],
    enc_states: NodeId,
    enc_mask: &[bool],
    expert: ExpertTag,
    extra_input: Option<NodeId>,
) -> Result<NodeId> {
    let n = dec_ids.len();
    if n == 0 {
        return Err(Error::invalid("decoder input is empty"));
    }
    if n > cfg.max_dec_pos {
        return Err(Error::invalid(format!(
            "decoder input length {} exceeds max_dec_pos {}",
            n, cfg.max_dec_pos
        )));
    }
    let token_table = b.node(g, "embed.token");
    let pos_table = b.node(g, "embed.dec_pos");
    let tok = g.embedding(token_table, dec_ids);
    let positions: Vec<usize> = (0..n).collect();
    let pos = g.embedding(pos_table, &positions);
    let mut x = g.add(tok, pos);
    if let Some(extra) = extra_input {
        x = g.add(x, extra);
    }
    let self_mask = causal_mask(n);
    let xmask = cross_mask(n, enc_mask);
    for i in 0..cfg.dec_layers {
        let attn = content_attention(
            g,
            b,
            cfg,
            &format!("dec.{}.self", i),
            x,
            x,
            Some(&self_mask),
        )?;
        let res = g.add(x, attn);
        x = layer_norm(g, b, res, &format!("dec.{}.ln1", i), cfg.ln_eps);
        let cross = content_attention(
            g,
            b,
            cfg,
            &format!("dec.{}.cross", i),
            x,
            enc_states,
            Some(&xmask),
        )?;
        let res = g.add(x, cross);
        x = layer_norm(g, b, res, &format!("dec.{}.ln2", i), cfg.ln_eps);
        let f = ffn(g, b, x, &format!("dec.{}.expert.{}", i, expert.name()));
        let res = g.add(x, f);
        x = layer_norm(g, b, res, &format!("dec.{}.ln3", i), cfg.ln_eps);
        if !g.value(x).is_finite() {
            return Err(Error::NonFinite(format!(
                "decoder layer {} produced non-finite values",
                i
            )));
        }
    }
    Ok(x)
}

/// Vocabulary logits from decoder hidden states, tied to the token
/// embedding table.
pub fn lm_logits<F: Scalar>(
    g: &mut Graph<F>,
    b: &mut ParamBinder<F>,
    hidden: NodeId,
) -> NodeId {
    let table = b.node(g, "embed.token");
    g.matmul_nt(hidden, table)
}

/// Linear head over hidden states (classification / tagging).
pub fn head_logits<F: Scalar>(
    g: &mut Graph<F>,
    b: &mut ParamBinder<F>,
    hidden: NodeId,
    head: &str,
) -> NodeId {
    linear(
        g,
        b,
        hidden,
        &format!("head.{}.w", head),
        &format!("head.{}.b", head),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rel_bucket_matches_piecewise_definition() {
        for k in [1usize, 32, 128] {
            assert_eq!(rel_bucket(5, 5, k), k);
        }
        assert_eq!(rel_bucket(0, 300, 128), 0);
        assert_eq!(rel_bucket(300, 0, 128), 255);
        assert_eq!(rel_bucket(10, 12, 32), 30);
        assert_eq!(rel_bucket(12, 10, 32), 34);
        // boundary cases
        assert_eq!(rel_bucket(0, 32, 32), 0);
        assert_eq!(rel_bucket(0, 31, 32), 1);
        assert_eq!(rel_bucket(32, 0, 32), 63);
        assert_eq!(rel_bucket(31, 0, 32), 63);
    }

    #[test]
    fn expert_init_copies_text_expert() {
        let cfg = ModelConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p = init_params(&cfg, 100, &mut rng);
        assert_eq!(p["dec.0.expert.text.w1"], p["dec.0.expert.visual.w1"]);
        assert_eq!(p["dec.0.expert.text.w2"], p["dec.0.expert.layout.w2"]);
    }

    #[test]
    fn no_content_to_position_parameter_exists() {
        let cfg = ModelConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p = init_params(&cfg, 100, &mut rng);
        // the only relative tables are the layout ones, per axis
        for name in p.keys() {
            if name.contains("rel") {
                assert!(
                    name.ends_with("relx") || name.ends_with("rely"),
                    "unexpected relative table {}",
                    name
                );
            }
        }
    }

    use crate::input::EncoderInput;
    use crate::numerics::{ParamSet, Tensor};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 64,
            ..ModelConfig::default()
        }
    }

    /// Encoder input built directly from an embedding matrix, bypassing
    /// assembly.
    fn manual_input<F: crate::numerics::Scalar>(
        g: &mut Graph<F>,
        emb: Tensor<F>,
        xb: Vec<usize>,
        yb: Vec<usize>,
        mask: Vec<bool>,
    ) -> EncoderInput {
        let text_len = xb.len();
        let text_ids = vec![0; text_len];
        EncoderInput {
            emb: g.constant(emb),
            x_center_bins: xb,
            y_center_bins: yb,
            mask,
            text_len,
            ocr_range: (0, 0),
            text_ids,
            patch_grid: None,
        }
    }

    fn rand_params_f64(cfg: &ModelConfig, vocab: usize, seed: u64) -> ParamSet<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        crate::numerics::cast_params(&init_params(cfg, vocab, &mut rng))
    }

    #[test]
    fn zero_layer_encoder_is_identity() {
        let cfg = ModelConfig {
            enc_layers: 0,
            ..tiny_cfg()
        };
        let params = rand_params_f64(&cfg, 64, 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let emb = Tensor::<f64>::randn(&[5, cfg.d_model], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut b = ParamBinder::new(&params);
        let enc_in = manual_input(&mut g, emb.clone(), vec![0; 5], vec![0; 5], vec![true; 5]);
        let out = encoder_forward(&mut g, &mut b, &cfg, &enc_in).unwrap();
        assert_eq!(g.value(out), &emb);
    }

    #[test]
    fn zeroed_layout_tables_reduce_to_content_only_attention() {
        let mut cfg = tiny_cfg();
        let mut params = rand_params_f64(&cfg, 64, 3);
        for i in 0..cfg.enc_layers {
            for t in ["relx", "rely"] {
                let name = format!("enc.{}.attn.{}", i, t);
                let shape = params[&name].shape().to_vec();
                params.insert(name, Tensor::zeros(&shape));
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let emb = Tensor::<f64>::randn(&[7, cfg.d_model], 1.0, &mut rng);
        let xb: Vec<usize> = (0..7).map(|i| i * 100).collect();
        let yb: Vec<usize> = (0..7).map(|i| i * 50).collect();

        let run = |cfg: &ModelConfig, params: &ParamSet<f64>| -> Tensor<f64> {
            let mut g = Graph::new();
            let mut b = ParamBinder::new(params);
            let enc_in = manual_input(&mut g, emb.clone(), xb.clone(), yb.clone(), vec![true; 7]);
            let out = encoder_forward(&mut g, &mut b, cfg, &enc_in).unwrap();
            g.value(out).clone()
        };
        let with_zeroed_tables = run(&cfg, &params);
        cfg.layout_attention = false;
        let content_only = run(&cfg, &params);
        for (a, b) in with_zeroed_tables.data().iter().zip(content_only.data()) {
            assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn encoder_is_equivariant_under_token_permutation() {
        // swapping two positions' full input rows (embedding incl. 1-D
        // position picks, plus their boxes) permutes the outputs
        let cfg = tiny_cfg();
        let params = rand_params_f64(&cfg, 64, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let emb = Tensor::<f64>::randn(&[6, cfg.d_model], 1.0, &mut rng);
        let xb: Vec<usize> = vec![10, 400, 300, 777, 5, 923];
        let yb: Vec<usize> = vec![999, 0, 123, 456, 789, 50];

        let run = |emb: Tensor<f64>, xb: Vec<usize>, yb: Vec<usize>| -> Tensor<f64> {
            let mut g = Graph::new();
            let mut b = ParamBinder::new(&params);
            let n = xb.len();
            let enc_in = manual_input(&mut g, emb, xb, yb, vec![true; n]);
            let out = encoder_forward(&mut g, &mut b, &cfg, &enc_in).unwrap();
            g.value(out).clone()
        };
        let base = run(emb.clone(), xb.clone(), yb.clone());

        // swap positions 1 and 4 wholesale
        let d = cfg.d_model;
        let mut emb2 = emb.clone();
        for c in 0..d {
            let a = emb.at2(1, c);
            let b = emb.at2(4, c);
            emb2.set2(1, c, b);
            emb2.set2(4, c, a);
        }
        let mut xb2 = xb.clone();
        xb2.swap(1, 4);
        let mut yb2 = yb.clone();
        yb2.swap(1, 4);
        let permuted = run(emb2, xb2, yb2);

        let perm = [0usize, 4, 2, 3, 1, 5];
        for (r, &pr) in perm.iter().enumerate() {
            for c in 0..d {
                let diff = (base.at2(r, c) - permuted.at2(pr, c)).abs();
                assert!(diff < 1e-9, "row {} col {}: {}", r, c, diff);
            }
        }
    }

    #[test]
    fn masked_positions_do_not_affect_other_outputs() {
        let cfg = tiny_cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let params = {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(8);
            init_params(&cfg, 64, &mut r)
        };
        let emb = Tensor::<f32>::randn(&[4, cfg.d_model], 1.0, &mut rng);
        let junk = Tensor::<f32>::randn(&[2, cfg.d_model], 5.0, &mut rng);

        let mut g = Graph::new();
        let mut b = ParamBinder::new(&params);
        let enc_in = manual_input(
            &mut g,
            emb.clone(),
            vec![1, 2, 3, 4],
            vec![4, 3, 2, 1],
            vec![true; 4],
        );
        let clean = encoder_forward(&mut g, &mut b, &cfg, &enc_in).unwrap();
        let clean = g.value(clean).clone();

        let mut padded_data = emb.data().to_vec();
        padded_data.extend_from_slice(junk.data());
        let padded = Tensor::from_vec(&[6, cfg.d_model], padded_data).unwrap();
        let mut g = Graph::new();
        let mut b = ParamBinder::new(&params);
        let enc_in = manual_input(
            &mut g,
            padded,
            vec![1, 2, 3, 4, 900, 17],
            vec![4, 3, 2, 1, 0, 800],
            vec![true, true, true, true, false, false],
        );
        let with_junk = encoder_forward(&mut g, &mut b, &cfg, &enc_in).unwrap();
        let with_junk = g.value(with_junk).clone();
        for r in 0..4 {
            for c in 0..cfg.d_model {
                assert_eq!(clean.at2(r, c), with_junk.at2(r, c), "row {} col {}", r, c);
            }
        }
    }

    fn toy_decoder_setup() -> (ModelConfig, ParamSet<f32>, Tensor<f32>) {
        let cfg = tiny_cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let params = init_params(&cfg, 64, &mut rng);
        let enc_states = Tensor::<f32>::randn(&[5, cfg.d_model], 1.0, &mut rng);
        (cfg, params, enc_states)
    }

    #[test]
    fn identical_experts_give_identical_outputs_across_tags() {
        let (cfg, params, enc_states) = toy_decoder_setup();
        let run = |tag: ExpertTag| -> Tensor<f32> {
            let mut g = Graph::new();
            let mut b = ParamBinder::new(&params);
            let enc = g.constant(enc_states.clone());
            let h = decoder_forward(&mut g, &mut b, &cfg, &[1, 9, 9], enc, &[true; 5], tag, None)
                .unwrap();
            g.value(h).clone()
        };
        let t = run(ExpertTag::Text);
        // experts start as copies of the text expert, so routing must be
        // the only difference - and outputs identical
        assert_eq!(t, run(ExpertTag::Visual));
        assert_eq!(t, run(ExpertTag::Layout));
    }

    #[test]
    fn expert_isolation_gradients_are_exactly_zero() {
        let (cfg, params, enc_states) = toy_decoder_setup();
        let mut g = Graph::new();
        let mut b = ParamBinder::new(&params);
        let enc = g.constant(enc_states);
        let h = decoder_forward(
            &mut g,
            &mut b,
            &cfg,
            &[1, 9, 9],
            enc,
            &[true; 5],
            ExpertTag::Text,
            None,
        )
        .unwrap();
        let logits = lm_logits(&mut g, &mut b, h);
        let loss = g.cross_entropy(logits, &[9, 9, 2], &[], 0.0, 1.0).unwrap();
        let store = g.backward(loss);
        let grads = b.grads(&store);
        let mut text_norm = 0.0f32;
        for (name, grad) in &grads {
            if name.contains(".expert.visual.") || name.contains(".expert.layout.") {
                assert!(
                    grad.data().iter().all(|&v| v == 0.0),
                    "{} should have zero grad",
                    name
                );
            }
            if name.contains(".expert.text.") {
                text_norm += grad.data().iter().map(|v| v * v).sum::<f32>();
            }
        }
        assert!(text_norm > 0.0, "text expert should receive gradient");
    }

    #[test]
    fn decoder_causality() {
        let (cfg, params, enc_states) = toy_decoder_setup();
        let run = |ids: &[usize]| -> Tensor<f32> {
            let mut g = Graph::new();
            let mut b = ParamBinder::new(&params);
            let enc = g.constant(enc_states.clone());
            let h = decoder_forward(&mut g, &mut b, &cfg, ids, enc, &[true; 5], ExpertTag::Text, None)
                .unwrap();
            let logits = lm_logits(&mut g, &mut b, h);
            g.value(logits).clone()
        };
        let a = run(&[1, 7, 8, 9]);
        let b = run(&[1, 7, 8, 30]); // change token at position 3
        for r in 0..3 {
            for c in 0..a.cols() {
                assert_eq!(a.at2(r, c), b.at2(r, c), "row {} must be unchanged", r);
            }
        }
        assert!(
            (0..a.cols()).any(|c| a.at2(3, c) != b.at2(3, c)),
            "row 3 should differ"
        );
    }
}
