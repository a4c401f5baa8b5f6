//! Parameter layout, dual-query state and the decoder forward pass.
//!
//! All learnable values live in one flat `Vec<f64>` ([`Params`]); the layout
//! structs only hold offsets into it. This keeps finite-difference training a
//! matter of nudging one slot at a time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{attend, multi_head_attention, AttentionLayout};
use super::config::KernelConfig;
use super::encoding::encode_unchecked;
use super::KernelError;
use crate::linalg::{dot, inverse_sigmoid, sigmoid, Matrix};

/// Anchors are kept inside `(ANCHOR_EPS, 1 - ANCHOR_EPS)`.
pub const ANCHOR_EPS: f64 = 1e-4;

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Params(pub Vec<f64>);

impl Params {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub offset: usize,
    pub len: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn get<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.range()]
    }
}

/// Dense layer `y = W x + b` with `W` stored `[d_out × d_in]` row-major,
/// followed by `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearLayout {
    pub offset: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayout {
    pub fn n_params(&self) -> usize {
        self.d_out * (self.d_in + 1)
    }

    pub fn weight_block(&self) -> Block {
        Block {
            offset: self.offset,
            len: self.d_out * self.d_in,
        }
    }

    pub fn bias_block(&self) -> Block {
        Block {
            offset: self.offset + self.d_out * self.d_in,
            len: self.d_out,
        }
    }

    pub fn apply(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        let w = self.weight_block().get(params);
        let b = self.bias_block().get(params);
        for (o, (row, bias)) in out.iter_mut().zip(w.chunks(self.d_in).zip(b)) {
            *o = dot(row, x) + bias;
        }
    }

    pub fn apply_rows(&self, params: &[f64], x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.d_out);
        for r in 0..x.rows() {
            self.apply(params, x.row(r), out.row_mut(r));
        }
        out
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpLayout {
    pub hidden: LinearLayout,
    pub out: LinearLayout,
}

impl MlpLayout {
    pub fn apply_rows(&self, params: &[f64], x: &Matrix) -> Matrix {
        let mut h = self.hidden.apply_rows(params, x);
        for v in h.as_mut_slice() {
            *v = v.max(0.0);
        }
        self.out.apply_rows(params, &h)
    }
}

/// Offsets of one decoder layer's parameters.
#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionLayout,
    pub cross_attn: AttentionLayout,
    pub ffn_image: MlpLayout,
    pub ffn_text: MlpLayout,
    /// Anchor-delta head on the updated image queries.
    pub box_head: MlpLayout,
}

#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub query_content_image: Block,
    pub query_content_text: Block,
    /// Initial anchors in inverse-sigmoid space, `[n_queries × 4]`.
    pub anchor_logits: Block,
    pub modality_query_image: Block,
    pub modality_query_text: Block,
    pub modality_memory_image: Block,
    pub modality_memory_text: Block,
    /// Anchor sine encoding to positional embedding.
    pub pos_mlp: MlpLayout,
    pub layers: Vec<DecoderLayerParams>,
    /// Shared by the per-layer mask head and the phrase head.
    pub linear_q: LinearLayout,
    pub linear_t: LinearLayout,
    pub no_phrase: Block,
    pub n_params: usize,
}

enum Init {
    Uniform(f64),
    Zero,
}

struct LayoutBuilder {
    next: usize,
    inits: Vec<(Block, Init)>,
}

impl LayoutBuilder {
    fn block(&mut self, len: usize, init: Init) -> Block {
        let b = Block {
            offset: self.next,
            len,
        };
        self.next += len;
        self.inits.push((b, init));
        b
    }

    fn embedding(&mut self, len: usize, fan_in: usize) -> Block {
        self.block(len, Init::Uniform(1.0 / (fan_in as f64).sqrt()))
    }

    fn linear(&mut self, d_in: usize, d_out: usize) -> LinearLayout {
        let l = LinearLayout {
            offset: self.next,
            d_in,
            d_out,
        };
        self.block(d_in * d_out, Init::Uniform(1.0 / (d_in as f64).sqrt()));
        self.block(d_out, Init::Zero);
        l
    }

    fn mlp(&mut self, d_in: usize, d_hidden: usize, d_out: usize) -> MlpLayout {
        MlpLayout {
            hidden: self.linear(d_in, d_hidden),
            out: self.linear(d_hidden, d_out),
        }
    }

    fn attention(&mut self, d: usize) -> AttentionLayout {
        AttentionLayout {
            q: self.linear(d, d),
            k: self.linear(d, d),
            v: self.linear(d, d),
            o: self.linear(d, d),
        }
    }
}

/// Encoder output for one image-text sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    pub image_features: Matrix,
    pub text_features: Matrix,
}

impl Memory {
    pub fn n_img(&self) -> usize {
        self.image_features.rows()
    }

    pub fn n_text(&self) -> usize {
        self.text_features.rows()
    }
}

/// Paired image/text query contents with their shared positional parts.
#[derive(Debug, Clone, PartialEq)]
pub struct DualQueryState {
    pub content_image: Matrix,
    pub content_text: Matrix,
    /// `[n_queries × 4]` cxcywh, strictly inside `(0, 1)`.
    pub anchors: Matrix,
    /// `[n_queries][n_text]`.
    pub text_masks: Vec<Vec<bool>>,
}

impl DualQueryState {
    pub fn n_queries(&self) -> usize {
        self.anchors.rows()
    }

    pub fn anchor(&self, q: usize) -> [f64; 4] {
        let r = self.anchors.row(q);
        [r[0], r[1], r[2], r[3]]
    }
}

/// What one layer computed, for invariant checks.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// `[2·n_queries × 2·n_queries]` per head; image queries first.
    pub self_weights: Vec<Matrix>,
    /// `[2·n_queries × (n_img + n_text)]` per head; image keys first.
    pub cross_weights: Vec<Matrix>,
    /// Positional embedding added to image and text queries respectively.
    pub positional_image: Matrix,
    pub positional_text: Matrix,
    /// Masks the text queries attended with.
    pub input_masks: Vec<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub state: DualQueryState,
    /// Raw similarities `q · p_j` over the `n_text + 1` extended positions
    /// (last = `no_phrase`), one row per query.
    pub phrase_logits: Matrix,
    pub traces: Vec<LayerTrace>,
}

/// Cross-attention gating of the text queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextGating {
    /// Text queries only see text keys whose mask bit is set.
    Masked,
    /// No mask anywhere; reference path for the all-ones identity.
    Unmasked,
}

#[derive(Debug, Clone)]
pub struct DecoderModel {
    pub config: KernelConfig,
    pub layout: ModelLayout,
    inits: Vec<(Block, f64)>,
}

fn add_rows(m: &mut Matrix, other: &Matrix) {
    for (a, b) in m.as_mut_slice().iter_mut().zip(other.as_slice()) {
        *a += b;
    }
}

fn check(m: &Matrix, layer: usize, stage: &'static str) -> Result<(), KernelError> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(KernelError::NonFinite { layer, stage })
    }
}

fn rows_from(block: &[f64], rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, block.to_vec())
}

impl DecoderModel {
    pub fn new(config: KernelConfig) -> Result<Self, KernelError> {
        config.validate()?;
        let (d, nq) = (config.d_model, config.n_queries);
        let mut b = LayoutBuilder {
            next: 0,
            inits: Vec::new(),
        };
        let query_content_image = b.embedding(nq * d, d);
        let query_content_text = b.embedding(nq * d, d);
        let anchor_logits = b.embedding(nq * 4, 4);
        let modality_query_image = b.embedding(d, d);
        let modality_query_text = b.embedding(d, d);
        let modality_memory_image = b.embedding(d, d);
        let modality_memory_text = b.embedding(d, d);
        let pos_mlp = b.mlp(d, d, d);
        let layers = (0..config.n_layers)
            .map(|_| DecoderLayerParams {
                self_attn: b.attention(d),
                cross_attn: b.attention(d),
                ffn_image: b.mlp(d, config.d_ffn, d),
                ffn_text: b.mlp(d, config.d_ffn, d),
                box_head: b.mlp(d, d, 4),
            })
            .collect();
        let linear_q = b.linear(d, config.d_proj);
        let linear_t = b.linear(d, config.d_proj);
        let no_phrase = b.embedding(config.d_proj, config.d_proj);
        let n_params = b.next;
        let inits = b
            .inits
            .into_iter()
            .map(|(blk, init)| match init {
                Init::Uniform(s) => (blk, s),
                Init::Zero => (blk, 0.0),
            })
            .collect();
        Ok(Self {
            config,
            layout: ModelLayout {
                query_content_image,
                query_content_text,
                anchor_logits,
                modality_query_image,
                modality_query_text,
                modality_memory_image,
                modality_memory_text,
                pos_mlp,
                layers,
                linear_q,
                linear_t,
                no_phrase,
                n_params,
            },
            inits,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params
    }

    /// Named contiguous parameter ranges covering the whole vector, one per
    /// embedding or dense layer.
    pub fn param_blocks(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let l = &self.layout;
        let mut out = Vec::new();
        let lin = |x: LinearLayout| x.offset..x.offset + x.n_params();
        for (name, b) in [
            ("query_content_image", l.query_content_image),
            ("query_content_text", l.query_content_text),
            ("anchor_logits", l.anchor_logits),
            ("modality_query_image", l.modality_query_image),
            ("modality_query_text", l.modality_query_text),
            ("modality_memory_image", l.modality_memory_image),
            ("modality_memory_text", l.modality_memory_text),
        ] {
            out.push((name.to_string(), b.range()));
        }
        out.push(("pos_mlp.hidden".into(), lin(l.pos_mlp.hidden)));
        out.push(("pos_mlp.out".into(), lin(l.pos_mlp.out)));
        for (i, layer) in l.layers.iter().enumerate() {
            for (name, x) in [
                ("self_attn.q", layer.self_attn.q),
                ("self_attn.k", layer.self_attn.k),
                ("self_attn.v", layer.self_attn.v),
                ("self_attn.o", layer.self_attn.o),
                ("cross_attn.q", layer.cross_attn.q),
                ("cross_attn.k", layer.cross_attn.k),
                ("cross_attn.v", layer.cross_attn.v),
                ("cross_attn.o", layer.cross_attn.o),
                ("ffn_image.hidden", layer.ffn_image.hidden),
                ("ffn_image.out", layer.ffn_image.out),
                ("ffn_text.hidden", layer.ffn_text.hidden),
                ("ffn_text.out", layer.ffn_text.out),
                ("box_head.hidden", layer.box_head.hidden),
                ("box_head.out", layer.box_head.out),
            ] {
                out.push((format!("layers.{i}.{name}"), lin(x)));
            }
        }
        out.push(("linear_q".into(), lin(l.linear_q)));
        out.push(("linear_t".into(), lin(l.linear_t)));
        out.push(("no_phrase".into(), l.no_phrase.range()));
        out
    }

    /// Seeded uniform `[-1/√fan_in, 1/√fan_in]`, biases zero.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; self.layout.n_params];
        for (blk, scale) in &self.inits {
            if *scale == 0.0 {
                continue;
            }
            for v in &mut data[blk.range()] {
                *v = rng.gen_range(-*scale..=*scale);
            }
        }
        Params(data)
    }

    fn check_memory(&self, memory: &Memory) -> Result<(), KernelError> {
        let d = self.config.d_model;
        if memory.image_features.cols() != d || memory.text_features.cols() != d {
            return Err(KernelError::Shape(format!(
                "memory width {}/{} but d_model {d}",
                memory.image_features.cols(),
                memory.text_features.cols()
            )));
        }
        if memory.n_text() == 0 {
            return Err(KernelError::Shape("memory has no text tokens".into()));
        }
        if !memory.image_features.is_finite() || !memory.text_features.is_finite() {
            return Err(KernelError::NonFinite {
                layer: 0,
                stage: "memory",
            });
        }
        Ok(())
    }

    /// Learned initial queries, anchors from the learned logits, all-ones masks.
    pub fn initial_state(&self, params: &Params, n_text: usize) -> DualQueryState {
        let (d, nq) = (self.config.d_model, self.config.n_queries);
        let p = params.as_slice();
        let l = &self.layout;
        let logits = l.anchor_logits.get(p);
        let anchors = logits
            .iter()
            .map(|&x| sigmoid(x).clamp(ANCHOR_EPS, 1.0 - ANCHOR_EPS))
            .collect();
        DualQueryState {
            content_image: rows_from(l.query_content_image.get(p), nq, d),
            content_text: rows_from(l.query_content_text.get(p), nq, d),
            anchors: Matrix::from_vec(nq, 4, anchors),
            text_masks: vec![vec![true; n_text]; nq],
        }
    }

    /// Binary masks from `Linear_Q(image query) · Linear_T(text feature)`,
    /// set where the score is strictly above the threshold; all-zero rows
    /// fall back to all ones.
    pub fn predict_text_mask(
        &self,
        params: &Params,
        content_image: &Matrix,
        text_features: &Matrix,
    ) -> Vec<Vec<bool>> {
        let p = params.as_slice();
        let q = self.layout.linear_q.apply_rows(p, content_image);
        let t = self.layout.linear_t.apply_rows(p, text_features);
        (0..q.rows())
            .map(|i| {
                let row: Vec<bool> = (0..t.rows())
                    .map(|j| dot(q.row(i), t.row(j)) > self.config.mask_threshold)
                    .collect();
                if row.iter().any(|&b| b) {
                    row
                } else {
                    vec![true; t.rows()]
                }
            })
            .collect()
    }

    /// Similarity logits `q · p_j` of each text query against the projected
    /// text tokens and the `no_phrase` token (last column).
    pub fn phrase_logits(
        &self,
        params: &Params,
        content_text: &Matrix,
        text_features: &Matrix,
    ) -> Matrix {
        let p = params.as_slice();
        let q = self.layout.linear_q.apply_rows(p, content_text);
        let t = self.layout.linear_t.apply_rows(p, text_features);
        let no_phrase = self.layout.no_phrase.get(p);
        let n_text = t.rows();
        let mut out = Matrix::zeros(q.rows(), n_text + 1);
        for i in 0..q.rows() {
            for j in 0..n_text {
                out[(i, j)] = dot(q.row(i), t.row(j));
            }
            out[(i, n_text)] = dot(q.row(i), no_phrase);
        }
        out
    }

    /// Probability vector over `n_text + 1` positions for one text query.
    pub fn phrase_distribution(
        &self,
        params: &Params,
        content_text: &[f64],
        text_features: &Matrix,
    ) -> Vec<f64> {
        let row = Matrix::from_vec(1, content_text.len(), content_text.to_vec());
        let logits = self.phrase_logits(params, &row, text_features);
        let scaled: Vec<f64> = logits.row(0).iter().map(|l| l / self.config.tau).collect();
        super::attention::softmax(&scaled)
    }

    /// One decoder layer: positional embedding from the anchors, joint
    /// self-attention over both query streams, cross-attention into the
    /// image+text memory (text keys gated per text query), per-stream FFN,
    /// then anchor and mask updates that both streams share.
    pub fn layer_forward(
        &self,
        params: &Params,
        layer_index: usize,
        state: &DualQueryState,
        memory: &Memory,
        gating: TextGating,
        trace: bool,
    ) -> Result<(DualQueryState, Option<LayerTrace>), KernelError> {
        let (cache, t) =
            self.layer_stages(params, layer_index, state, memory, gating, trace, None)?;
        Ok((cache.output, t))
    }

    /// Stage-by-stage layer evaluation. With `reuse`, stages not marked
    /// dirty are copied from an earlier evaluation at the same input.
    #[allow(clippy::too_many_arguments)]
    fn layer_stages(
        &self,
        params: &Params,
        layer_index: usize,
        state: &DualQueryState,
        memory: &Memory,
        gating: TextGating,
        trace: bool,
        reuse: Option<(&LayerCache, Dirty)>,
    ) -> Result<(LayerCache, Option<LayerTrace>), KernelError> {
        let cfg = &self.config;
        let (d, nq) = (cfg.d_model, state.n_queries());
        let p = params.as_slice();
        let l = &self.layout;
        let layer = l.layers.get(layer_index).ok_or_else(|| {
            KernelError::Shape(format!("layer {layer_index} of {}", l.layers.len()))
        })?;
        if state.content_image.cols() != d || state.content_text.cols() != d {
            return Err(KernelError::Shape(
                "query width differs from d_model".into(),
            ));
        }
        if state.text_masks.len() != nq
            || state.text_masks.iter().any(|m| m.len() != memory.n_text())
        {
            return Err(KernelError::Shape("text mask shape".into()));
        }
        if state.text_masks.iter().any(|m| !m.iter().any(|&b| b)) {
            return Err(KernelError::EmptyMask);
        }
        let (old, dirty) = match reuse {
            Some((c, d)) if !trace => (Some(c), d),
            _ => (None, Dirty::ALL),
        };
        let keep = |flag: bool| if flag { None } else { old };

        // (1) positional part, shared by the pair
        let pos = match keep(dirty.pos) {
            Some(c) => c.pos.clone(),
            None => {
                let mut sine = Matrix::zeros(nq, d);
                for q in 0..nq {
                    sine.row_mut(q)
                        .copy_from_slice(&encode_unchecked(&state.anchor(q), d));
                }
                let pos = l.pos_mlp.apply_rows(p, &sine);
                check(&pos, layer_index, "positional embedding")?;
                pos
            }
        };
        let pos2 = pos.vstack(&pos);

        // (2) joint self-attention
        let mut self_weights = Vec::new();
        let x_sa = match keep(dirty.sa) {
            Some(c) => c.x_sa.clone(),
            None => {
                let mut x = state.content_image.vstack(&state.content_text);
                let mut qk_in = x.add(&pos2);
                for (r, token) in [
                    (0..nq, l.modality_query_image.get(p)),
                    (nq..2 * nq, l.modality_query_text.get(p)),
                ] {
                    for i in r {
                        for (a, b) in qk_in.row_mut(i).iter_mut().zip(token) {
                            *a += b;
                        }
                    }
                }
                let sa = multi_head_attention(
                    p,
                    &layer.self_attn,
                    cfg.n_heads,
                    &qk_in,
                    &qk_in,
                    &x,
                    &[],
                    trace,
                )?;
                add_rows(&mut x, &sa.out);
                check(&x, layer_index, "self-attention")?;
                self_weights = sa.weights;
                x
            }
        };

        // (3) cross-attention; memory carries its modality embedding
        let (mem_k, mem_v) = match keep(dirty.kv) {
            Some(c) => (c.mem_k.clone(), c.mem_v.clone()),
            None => {
                let mem = memory
                    .image_features
                    .add_row_vector(l.modality_memory_image.get(p))
                    .vstack(
                        &memory
                            .text_features
                            .add_row_vector(l.modality_memory_text.get(p)),
                    );
                (
                    layer.cross_attn.k.apply_rows(p, &mem),
                    layer.cross_attn.v.apply_rows(p, &mem),
                )
            }
        };
        let mut cross_weights = Vec::new();
        let x_ca = match keep(dirty.ca) {
            Some(c) => c.x_ca.clone(),
            None => {
                let n_img = memory.n_img();
                let key_masks: Vec<Vec<bool>> = match gating {
                    TextGating::Masked => state
                        .text_masks
                        .iter()
                        .map(|m| {
                            let mut full = vec![true; n_img];
                            full.extend_from_slice(m);
                            full
                        })
                        .collect(),
                    TextGating::Unmasked => Vec::new(),
                };
                let mut row_masks: Vec<Option<&[bool]>> = vec![None; 2 * nq];
                for (q, m) in key_masks.iter().enumerate() {
                    row_masks[nq + q] = Some(m.as_slice());
                }
                let ca_q = layer.cross_attn.q.apply_rows(p, &x_sa.add(&pos2));
                let ca = attend(
                    p,
                    &layer.cross_attn.o,
                    cfg.n_heads,
                    &ca_q,
                    &mem_k,
                    &mem_v,
                    &row_masks,
                    trace,
                )?;
                let mut x = x_sa.clone();
                add_rows(&mut x, &ca.out);
                check(&x, layer_index, "cross-attention")?;
                cross_weights = ca.weights;
                x
            }
        };

        // (4) per-stream feed-forward
        let img = match keep(dirty.ffn_img) {
            Some(c) => c.output.content_image.clone(),
            None => {
                let mut img = x_ca.slice_rows(0, nq);
                let f = layer.ffn_image.apply_rows(p, &img);
                add_rows(&mut img, &f);
                check(&img, layer_index, "image feed-forward")?;
                img
            }
        };
        let txt = match keep(dirty.ffn_txt) {
            Some(c) => c.output.content_text.clone(),
            None => {
                let mut txt = x_ca.slice_rows(nq, 2 * nq);
                let f = layer.ffn_text.apply_rows(p, &txt);
                add_rows(&mut txt, &f);
                check(&txt, layer_index, "text feed-forward")?;
                txt
            }
        };

        // (5) anchor refinement in inverse-sigmoid space
        let anchors = match keep(dirty.box_head) {
            Some(c) => c.output.anchors.clone(),
            None => {
                let delta = layer.box_head.apply_rows(p, &img);
                check(&delta, layer_index, "anchor head")?;
                let mut anchors = Matrix::zeros(nq, 4);
                for q in 0..nq {
                    for c in 0..4 {
                        let z = inverse_sigmoid(state.anchors[(q, c)]) + delta[(q, c)];
                        anchors[(q, c)] = sigmoid(z).clamp(ANCHOR_EPS, 1.0 - ANCHOR_EPS);
                    }
                }
                anchors
            }
        };

        // (6) next-layer text masks from the updated image queries
        let text_masks = match keep(dirty.mask) {
            Some(c) => c.output.text_masks.clone(),
            None => self.predict_text_mask(params, &img, &memory.text_features),
        };

        let layer_trace = trace.then(|| LayerTrace {
            self_weights,
            cross_weights,
            positional_image: pos.clone(),
            positional_text: pos2.slice_rows(nq, 2 * nq),
            input_masks: state.text_masks.clone(),
        });
        Ok((
            LayerCache {
                pos,
                x_sa,
                mem_k,
                mem_v,
                x_ca,
                output: DualQueryState {
                    content_image: img,
                    content_text: txt,
                    anchors,
                    text_masks,
                },
            },
            layer_trace,
        ))
    }

    /// Runs every layer from the initial state and scores phrases with the
    /// final text queries.
    pub fn forward(
        &self,
        params: &Params,
        memory: &Memory,
        trace: bool,
    ) -> Result<ModelOutput, KernelError> {
        self.forward_with(params, memory, TextGating::Masked, trace)
    }

    pub fn forward_with(
        &self,
        params: &Params,
        memory: &Memory,
        gating: TextGating,
        trace: bool,
    ) -> Result<ModelOutput, KernelError> {
        self.check_inputs(params, memory)?;
        let mut state = self.initial_state(params, memory.n_text());
        let mut traces = Vec::new();
        for i in 0..self.config.n_layers {
            let (next, t) = self.layer_forward(params, i, &state, memory, gating, trace)?;
            state = next;
            traces.extend(t);
        }
        let phrase_logits = self.phrase_logits(params, &state.content_text, &memory.text_features);
        check(&phrase_logits, self.config.n_layers, "phrase logits")?;
        Ok(ModelOutput {
            state,
            phrase_logits,
            traces,
        })
    }

    fn check_inputs(&self, params: &Params, memory: &Memory) -> Result<(), KernelError> {
        if params.len() != self.layout.n_params {
            return Err(KernelError::Shape(format!(
                "{} parameters, layout wants {}",
                params.len(),
                self.layout.n_params
            )));
        }
        self.check_memory(memory)
    }

    /// Full forward that keeps every stage, for later incremental re-runs.
    pub fn forward_cached(
        &self,
        params: &Params,
        memory: &Memory,
    ) -> Result<ForwardCache, KernelError> {
        self.check_inputs(params, memory)?;
        let initial = self.initial_state(params, memory.n_text());
        let mut layers: Vec<LayerCache> = Vec::with_capacity(self.config.n_layers);
        for i in 0..self.config.n_layers {
            let input = layers.last().map_or(&initial, |c| &c.output);
            let (c, _) =
                self.layer_stages(params, i, input, memory, TextGating::Masked, false, None)?;
            layers.push(c);
        }
        let last = &layers.last().expect("at least one layer").output;
        let phrase_logits = self.phrase_logits(params, &last.content_text, &memory.text_features);
        check(&phrase_logits, self.config.n_layers, "phrase logits")?;
        Ok(ForwardCache {
            initial,
            layers,
            phrase_logits,
        })
    }

    /// Stages that read parameter `index` directly.
    pub fn damage_of(&self, index: usize) -> Damage {
        let l = &self.layout;
        let n = self.config.n_layers;
        let mut dmg = Damage {
            input: InputChange::default(),
            layers: vec![Dirty::NONE; n],
            phrase: false,
        };
        let inside = |b: Block| b.range().contains(&index);
        let lin = |x: LinearLayout| (x.offset..x.offset + x.n_params()).contains(&index);
        let mlp = |m: MlpLayout| lin(m.hidden) || lin(m.out);
        if inside(l.query_content_image) || inside(l.query_content_text) {
            dmg.input.content = true;
        } else if inside(l.anchor_logits) {
            dmg.input.anchors = true;
        } else if inside(l.modality_query_image) || inside(l.modality_query_text) {
            dmg.layers.iter_mut().for_each(|d| d.sa = true);
        } else if inside(l.modality_memory_image) || inside(l.modality_memory_text) {
            dmg.layers.iter_mut().for_each(|d| d.kv = true);
        } else if mlp(l.pos_mlp) {
            dmg.layers.iter_mut().for_each(|d| d.pos = true);
        } else if lin(l.linear_q) || lin(l.linear_t) {
            dmg.layers.iter_mut().for_each(|d| d.mask = true);
            dmg.phrase = true;
        } else if inside(l.no_phrase) {
            dmg.phrase = true;
        } else {
            for (layer, d) in l.layers.iter().zip(dmg.layers.iter_mut()) {
                let a = &layer.self_attn;
                let c = &layer.cross_attn;
                if lin(a.q) || lin(a.k) || lin(a.v) || lin(a.o) {
                    d.sa = true;
                } else if lin(c.k) || lin(c.v) {
                    d.kv = true;
                } else if lin(c.q) || lin(c.o) {
                    d.ca = true;
                } else if mlp(layer.ffn_image) {
                    d.ffn_img = true;
                } else if mlp(layer.ffn_text) {
                    d.ffn_txt = true;
                } else if mlp(layer.box_head) {
                    d.box_head = true;
                }
            }
        }
        dmg
    }

    /// Final anchors and phrase logits after changing parameters whose
    /// stages are listed in `damage`; everything else comes from `base`,
    /// which must have been computed on the same memory.
    pub fn forward_incremental(
        &self,
        params: &Params,
        memory: &Memory,
        base: &ForwardCache,
        damage: &Damage,
    ) -> Result<(Matrix, Matrix), KernelError> {
        let mut change = damage.input;
        let fresh_initial;
        let mut input = &base.initial;
        if change.anchors || change.content {
            fresh_initial = self.initial_state(params, memory.n_text());
            input = &fresh_initial;
        }
        let mut current: Option<LayerCache> = None;
        let mut txt_changed = false;
        for (i, old) in base.layers.iter().enumerate() {
            let dirty = damage.layers[i].closed(change);
            if dirty.is_clean() && current.is_none() {
                continue;
            }
            let state_in = match (&current, i) {
                (Some(c), _) => &c.output,
                (None, 0) => input,
                (None, _) => &base.layers[i - 1].output,
            };
            let (c, _) = self.layer_stages(
                params,
                i,
                state_in,
                memory,
                TextGating::Masked,
                false,
                Some((old, dirty)),
            )?;
            change = dirty.output_change();
            txt_changed = dirty.ffn_txt;
            current = Some(c);
        }
        let (anchors, txt) = match &current {
            Some(c) => (c.output.anchors.clone(), &c.output.content_text),
            None => {
                let last = &base.layers.last().expect("at least one layer").output;
                (last.anchors.clone(), &last.content_text)
            }
        };
        let logits = if damage.phrase || txt_changed {
            let l = self.phrase_logits(params, txt, &memory.text_features);
            check(&l, self.config.n_layers, "phrase logits")?;
            l
        } else {
            base.phrase_logits.clone()
        };
        Ok((anchors, logits))
    }
}

/// Intermediate values of one layer.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pos: Matrix,
    x_sa: Matrix,
    mem_k: Matrix,
    mem_v: Matrix,
    x_ca: Matrix,
    pub output: DualQueryState,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub initial: DualQueryState,
    pub layers: Vec<LayerCache>,
    pub phrase_logits: Matrix,
}

/// What changed in a layer's input state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InputChange {
    pub anchors: bool,
    pub content: bool,
    pub masks: bool,
}

/// Stages of one layer that must be recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dirty {
    pub pos: bool,
    pub sa: bool,
    pub kv: bool,
    pub ca: bool,
    pub ffn_img: bool,
    pub ffn_txt: bool,
    pub box_head: bool,
    pub mask: bool,
}

impl Dirty {
    pub const NONE: Dirty = Dirty {
        pos: false,
        sa: false,
        kv: false,
        ca: false,
        ffn_img: false,
        ffn_txt: false,
        box_head: false,
        mask: false,
    };
    pub const ALL: Dirty = Dirty {
        pos: true,
        sa: true,
        kv: true,
        ca: true,
        ffn_img: true,
        ffn_txt: true,
        box_head: true,
        mask: true,
    };

    fn is_clean(&self) -> bool {
        *self == Dirty::NONE
    }

    /// Adds the stages downstream of `self` and of the input change.
    fn closed(mut self, input: InputChange) -> Dirty {
        if input.anchors {
            self.pos = true;
            self.box_head = true;
        }
        if input.content || self.pos {
            self.sa = true;
        }
        if self.sa || self.kv || input.masks {
            self.ca = true;
        }
        if self.ca {
            self.ffn_img = true;
            self.ffn_txt = true;
        }
        if self.ffn_img {
            self.box_head = true;
            self.mask = true;
        }
        self
    }

    fn output_change(&self) -> InputChange {
        InputChange {
            anchors: self.box_head,
            content: self.ffn_img || self.ffn_txt,
            masks: self.mask,
        }
    }
}

/// Direct effect of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Damage {
    pub input: InputChange,
    pub layers: Vec<Dirty>,
    pub phrase: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_memory(seed: u64, n_img: usize, n_text: usize, d: usize) -> Memory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize| {
            Matrix::from_vec(r, d, (0..r * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        Memory {
            image_features: m(n_img),
            text_features: m(n_text),
        }
    }

    #[test]
    fn shapes_preserved() {
        let cfg = KernelConfig {
            n_layers: 2,
            ..KernelConfig::default()
        };
        let model = DecoderModel::new(cfg.clone()).unwrap();
        let params = model.init_params(1);
        let mem = random_memory(2, 6, 5, cfg.d_model);
        let out = model.forward(&params, &mem, true).unwrap();
        assert_eq!(out.state.content_image.rows(), cfg.n_queries);
        assert_eq!(out.state.content_text.cols(), cfg.d_model);
        assert_eq!(out.state.anchors.cols(), 4);
        assert_eq!(out.state.text_masks.len(), cfg.n_queries);
        assert!(out.state.text_masks.iter().all(|m| m.len() == 5));
        assert_eq!(out.phrase_logits.cols(), 6);
        assert_eq!(out.traces.len(), 2);
        assert!(out.traces[0].input_masks.iter().flatten().all(|&b| b));
    }

    #[test]
    fn zero_box_head_keeps_anchors() {
        let model = DecoderModel::new(KernelConfig::default()).unwrap();
        let mut params = model.init_params(5);
        let head = model.layout.layers[0].box_head;
        for blk in [head.out.weight_block(), head.out.bias_block()] {
            for v in &mut params.0[blk.range()] {
                *v = 0.0;
            }
        }
        let mem = random_memory(3, 4, 3, 16);
        let init = model.initial_state(&params, 3);
        let out = model.forward(&params, &mem, false).unwrap();
        for (a, b) in init
            .anchors
            .as_slice()
            .iter()
            .zip(out.state.anchors.as_slice())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_ones_mask_matches_unmasked() {
        let model = DecoderModel::new(KernelConfig::default()).unwrap();
        let params = model.init_params(9);
        let mem = random_memory(4, 5, 4, 16);
        let masked = model
            .forward_with(&params, &mem, TextGating::Masked, true)
            .unwrap();
        let plain = model
            .forward_with(&params, &mem, TextGating::Unmasked, true)
            .unwrap();
        // Single layer: the input masks are all ones, so every number agrees.
        assert_eq!(masked.state, plain.state);
        assert_eq!(masked.phrase_logits, plain.phrase_logits);
        for (a, b) in masked.traces[0]
            .cross_weights
            .iter()
            .zip(&plain.traces[0].cross_weights)
        {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn text_mask_from_dot_products() {
        let cfg = KernelConfig {
            d_model: 8,
            d_proj: 2,
            n_heads: 2,
            n_queries: 2,
            ..KernelConfig::default()
        };
        let model = DecoderModel::new(cfg).unwrap();
        let mut params = model.init_params(0);
        // Linear_Q and Linear_T pick the first two coordinates.
        for lin in [model.layout.linear_q, model.layout.linear_t] {
            let w = &mut params.0[lin.weight_block().range()];
            w.iter_mut().for_each(|v| *v = 0.0);
            w[0] = 1.0; // row 0, col 0
            w[8 + 1] = 1.0; // row 1, col 1
            params.0[lin.bias_block().range()]
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let mut q = Matrix::zeros(2, 8);
        q[(0, 0)] = 1.0; // q0 = (1, 0)
        q[(1, 0)] = -1.0; // q1 = (-1, -1)
        q[(1, 1)] = -1.0;
        let mut t = Matrix::zeros(3, 8);
        t[(0, 0)] = 2.0; // t0 = (2, 0)
        t[(1, 1)] = 1.0; // t1 = (0, 1)
        t[(2, 0)] = -1.0; // t2 = (-1, 3)
        t[(2, 1)] = 3.0;
        // q0: [2, 0, -1] -> [1, 0, 0]; q1: [-2, -1, -2] -> all <= 0 -> fallback
        let masks = model.predict_text_mask(&params, &q, &t);
        assert_eq!(masks[0], vec![true, false, false]);
        assert_eq!(masks[1], vec![true, true, true]);
    }

    #[test]
    fn phrase_distribution_properties() {
        let model = DecoderModel::new(KernelConfig::default()).unwrap();
        let params = model.init_params(4);
        let mem = random_memory(8, 3, 6, 16);
        let dist = model.phrase_distribution(&params, &[0.3; 16], &mem.text_features);
        assert_eq!(dist.len(), 7);
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(dist.iter().all(|&p| p > 0.0 && p < 1.0));

        // Zero query: every similarity is 0, distribution uniform.
        let uniform = model.phrase_distribution(&params, &[0.0; 16], &mem.text_features);
        // Linear_Q has zero bias at init, so q = 0.
        for p in uniform {
            assert!((p - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lower_tau_sharpens() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let cfg = KernelConfig::default();
            let model = DecoderModel::new(cfg.clone()).unwrap();
            let params = model.init_params(rng.gen());
            let mem = random_memory(rng.gen(), 3, 5, 16);
            let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = model.phrase_distribution(&params, &q, &mem.text_features);
            let sharp = DecoderModel {
                config: KernelConfig {
                    tau: cfg.tau / 2.0,
                    ..cfg
                },
                ..model
            };
            let b = sharp.phrase_distribution(&params, &q, &mem.text_features);
            let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
            assert!(max(&b) > max(&a));
        }
    }

    #[test]
    fn deterministic() {
        let model = DecoderModel::new(KernelConfig::default()).unwrap();
        let mem = random_memory(1, 4, 4, 16);
        let a = model.forward(&model.init_params(3), &mem, false).unwrap();
        let b = model.forward(&model.init_params(3), &mem, false).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.phrase_logits, b.phrase_logits);
    }

    #[test]
    fn param_blocks_tile_the_vector() {
        let model = DecoderModel::new(KernelConfig {
            n_layers: 2,
            ..KernelConfig::default()
        })
        .unwrap();
        let mut next = 0;
        for (name, r) in model.param_blocks() {
            assert_eq!(r.start, next, "{name}");
            next = r.end;
        }
        assert_eq!(next, model.n_params());
    }

    #[test]
    fn incremental_forward_matches_full() {
        for n_layers in [1, 2] {
            let cfg = KernelConfig {
                n_layers,
                ..KernelConfig::default()
            };
            let model = DecoderModel::new(cfg).unwrap();
            let base = model.init_params(21);
            let mem = random_memory(6, 5, 4, 16);
            let cache = model.forward_cached(&base, &mem).unwrap();
            let full = model.forward(&base, &mem, false).unwrap();
            assert_eq!(cache.phrase_logits, full.phrase_logits);
            let mut rng = ChaCha8Rng::seed_from_u64(n_layers as u64);
            let mut picks: Vec<usize> = (0..300)
                .map(|_| rng.gen_range(0..model.n_params()))
                .collect();
            picks.extend([0, model.n_params() - 1]);
            for i in picks {
                let mut p = base.clone();
                p.0[i] += 0.3;
                let (anchors, logits) = model
                    .forward_incremental(&p, &mem, &cache, &model.damage_of(i))
                    .unwrap();
                let want = model.forward(&p, &mem, false).unwrap();
                assert_eq!(anchors, want.state.anchors, "param {i}");
                assert_eq!(logits, want.phrase_logits, "param {i}");
            }
        }
    }

    #[test]
    fn rejects_bad_memory() {
        let model = DecoderModel::new(KernelConfig::default()).unwrap();
        let params = model.init_params(0);
        let mut mem = random_memory(1, 4, 4, 16);
        mem.text_features[(0, 0)] = f64::NAN;
        assert!(matches!(
            model.forward(&params, &mem, false),
            Err(KernelError::NonFinite { .. })
        ));
        let narrow = random_memory(1, 4, 4, 8);
        assert!(matches!(
            model.forward(&params, &narrow, false),
            Err(KernelError::Shape(_))
        ));
    }
}
