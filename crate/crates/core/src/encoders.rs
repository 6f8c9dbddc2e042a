//! Desk-scale text and video encoders.
//!
//! The text encoder carries `m` query indicators. After every self-attention
//! layer the indicators cross-attend to the text tokens (queries are the
//! indicators, keys and values are the tokens only) and add the projected
//! result residually. The output projection of that cross-attention starts at
//! zero, so binding is an exact identity at initialisation.
//!
//! The video encoder embeds synthetic patch features with type, frame and
//! spatial-position embeddings, prepends a learnable global token and runs
//! the same self-attention layers. Local tokens are the final per-frame patch
//! states averaged over time per spatial position.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numeric::nn::{attention, kaiming, project};
use crate::numeric::{DenseArray, Group, ParameterSet, RngStream, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextSequence {
    pub tokens: Vec<usize>,
}

impl TextSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `frames × patches` grid of patch feature vectors of width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
    /// Row-major `[frame][patch][dim]`.
    pub features: Vec<f64>,
}

impl VideoClip {
    pub fn new(frames: usize, patches: usize, dim: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != frames * patches * dim {
            return Err(Error::dim(format!(
                "clip {frames}x{patches}x{dim} needs {} values, got {}",
                frames * patches * dim,
                features.len()
            )));
        }
        Ok(Self {
            frames,
            patches,
            dim,
            features,
        })
    }

    /// Patch features as a `(frames · patches) × dim` matrix.
    pub fn as_matrix(&self) -> DenseArray {
        DenseArray::matrix(self.frames * self.patches, self.dim, self.features.clone()).expect("shape")
    }
}

/// `m × C` indicator vectors; row 0 becomes the global feature.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryIndicators {
    pub vectors: DenseArray,
}

impl QueryIndicators {
    pub fn count(&self) -> usize {
        self.vectors.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedText {
    /// Unit-norm global feature (final indicator 1).
    pub global: Vec<f64>,
    /// Final indicators 2..m, `(m − 1) × C`; zero rows when indicators are off.
    pub focus: DenseArray,
    /// Final token states, `M × C`; the text side's local tokens.
    pub locals: DenseArray,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedVideo {
    /// Unit-norm global token.
    pub global: Vec<f64>,
    /// Temporally pooled local tokens, `P² × C`.
    pub locals: DenseArray,
    /// Video-side focus indicators, `(m − 1) × C`.
    pub focus: DenseArray,
}

/// Tape handles for one encoded item.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// `1 × C`, unit norm.
    pub global: Var,
    /// `(m − 1) × C`, or `None` when indicators are disabled.
    pub focus: Option<Var>,
    pub locals: Var,
}

fn insert_square(params: &mut ParameterSet, name: String, c: usize, zero: bool, stream: RngStream) -> Result<()> {
    let w = if zero {
        DenseArray::zeros(&[c, c])
    } else {
        // N(0, 1/C)
        kaiming(c, c, 2 * c, stream)
    };
    params.insert(name, w, Group::Base)
}

fn insert_attention(params: &mut ParameterSet, prefix: &str, c: usize, zero_out: bool, stream: RngStream) -> Result<()> {
    for (i, p) in ["q", "k", "v", "o"].iter().enumerate() {
        insert_square(params, format!("{prefix}.{p}"), c, zero_out && *p == "o", stream.fork(i as u64))?;
    }
    Ok(())
}

/// Register the text encoder's parameters under `text.`.
pub fn init_text_params(cfg: &ModelConfig, stream: RngStream) -> Result<ParameterSet> {
    let c = cfg.width;
    let mut p = ParameterSet::new();
    p.insert("text.token_embed", kaiming(cfg.vocab_size, c, c, stream.fork(1)), Group::Base)?;
    p.insert("text.pos_embed", kaiming(cfg.max_text_len, c, 2 * c, stream.fork(2)), Group::Base)?;
    p.insert(
        "text.indicators",
        kaiming(cfg.indicator_count, c, c, stream.fork(3)),
        Group::Base,
    )?;
    for l in 0..cfg.layers {
        let s = stream.fork(100 + l as u64);
        insert_attention(&mut p, &format!("text.layers.{l}.attn"), c, false, s.fork(1))?;
        insert_attention(&mut p, &format!("text.layers.{l}.bind"), c, true, s.fork(2))?;
    }
    Ok(p)
}

/// Register the video encoder's parameters under `video.`.
pub fn init_video_params(cfg: &ModelConfig, stream: RngStream) -> Result<ParameterSet> {
    let c = cfg.width;
    let mut p = ParameterSet::new();
    p.insert("video.input_proj", kaiming(cfg.patch_dim, c, cfg.patch_dim, stream.fork(1)), Group::Base)?;
    p.insert("video.type_embed", kaiming(2, c, 2 * c, stream.fork(2)), Group::Base)?;
    p.insert("video.frame_embed", kaiming(cfg.frames, c, 2 * c, stream.fork(3)), Group::Base)?;
    p.insert("video.pos_embed", kaiming(cfg.patches, c, 2 * c, stream.fork(4)), Group::Base)?;
    p.insert("video.cls", kaiming(1, c, c, stream.fork(5)), Group::Base)?;
    p.insert(
        "video.indicators",
        kaiming(cfg.indicator_count - 1, c, c, stream.fork(6)),
        Group::Base,
    )?;
    for l in 0..cfg.layers {
        let s = stream.fork(100 + l as u64);
        insert_attention(&mut p, &format!("video.layers.{l}.attn"), c, false, s.fork(1))?;
        insert_attention(&mut p, &format!("video.layers.{l}.bind"), c, true, s.fork(2))?;
    }
    Ok(p)
}

/// Pre-norm residual self-attention: `x + W_o · attn(LN(x)W_q, LN(x)W_k, LN(x)W_v)`.
pub fn self_attention_block(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    x: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let h = tape.layer_norm_rows(x);
    let q = project(tape, params, &format!("{prefix}.q"), h)?;
    let k = project(tape, params, &format!("{prefix}.k"), h)?;
    let v = project(tape, params, &format!("{prefix}.v"), h)?;
    let a = attention(tape, q, k, v, key_mask, None)?;
    let o = project(tape, params, &format!("{prefix}.o"), a)?;
    tape.add(x, o)
}

/// One binding step on the tape: indicators cross-attend to `tokens` and the
/// projected result is added residually.
pub fn bind_on_tape(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    indicators: Var,
    tokens: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let (ci, ct) = (tape.shape(indicators).1, tape.shape(tokens).1);
    if ci != ct {
        return Err(Error::dim(format!("indicator width {ci} vs token width {ct}")));
    }
    let hi = tape.layer_norm_rows(indicators);
    let ht = tape.layer_norm_rows(tokens);
    let q = project(tape, params, &format!("{prefix}.q"), hi)?;
    let k = project(tape, params, &format!("{prefix}.k"), ht)?;
    let v = project(tape, params, &format!("{prefix}.v"), ht)?;
    let a = attention(tape, q, k, v, key_mask, None)?;
    let o = project(tape, params, &format!("{prefix}.o"), a)?;
    tape.add(indicators, o)
}

/// Eager binding step using the parameters at `{prefix}.{q,k,v,o}`.
pub fn bind_query_indicators(
    indicators: &QueryIndicators,
    text_tokens: &DenseArray,
    params: &ParameterSet,
    prefix: &str,
) -> Result<QueryIndicators> {
    let mut tape = Tape::new();
    let i = tape.constant(indicators.vectors.clone());
    let t = tape.constant(text_tokens.clone());
    let out = bind_on_tape(&mut tape, params, prefix, i, t, None)?;
    Ok(QueryIndicators {
        vectors: tape.value(out).clone(),
    })
}

/// Encode a token sequence, optionally right-padded: only the first
/// `valid_len` positions are visible to attention.
pub fn encode_text_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParameterSet,
    tokens: &[usize],
    valid_len: usize,
) -> Result<EncodedVars> {
    let len = tokens.len();
    if valid_len == 0 || len == 0 {
        return Err(Error::input("empty text sequence"));
    }
    if len > cfg.max_text_len || valid_len > len {
        return Err(Error::input(format!(
            "text of {len} tokens ({valid_len} valid) exceeds max length {}",
            cfg.max_text_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::input(format!("token id {bad} >= vocabulary size {}", cfg.vocab_size)));
    }
    let mask: Vec<bool> = (0..len).map(|i| i < valid_len).collect();
    let mask = (valid_len < len).then_some(mask.as_slice());

    let table = tape.param(params, "text.token_embed")?;
    let emb = tape.gather_rows(table, tokens)?;
    let pos_table = tape.param(params, "text.pos_embed")?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.gather_rows(pos_table, &positions)?;
    let mut x = tape.add(emb, pos)?;
    let mut ind = if cfg.use_indicators {
        Some(tape.param(params, "text.indicators")?)
    } else {
        None
    };
    for l in 0..cfg.layers {
        x = self_attention_block(tape, params, &format!("text.layers.{l}.attn"), x, mask)?;
        if let Some(i) = ind {
            ind = Some(bind_on_tape(tape, params, &format!("text.layers.{l}.bind"), i, x, mask)?);
        }
    }
    let locals = tape.slice_rows(x, 0, valid_len)?;
    let (global_raw, focus) = match ind {
        Some(i) => {
            let m = tape.shape(i).0;
            let g = tape.slice_rows(i, 0, 1)?;
            let f = tape.slice_rows(i, 1, m - 1)?;
            (g, Some(f))
        }
        None => {
            // Without indicators the global feature is the mean valid token.
            let w = DenseArray::matrix(1, valid_len, vec![1.0 / valid_len as f64; valid_len])?;
            let w = tape.constant(w);
            (tape.matmul(w, locals)?, None)
        }
    };
    let global = tape.l2_normalize_rows(global_raw);
    Ok(EncodedVars { global, focus, locals })
}

/// Average `T × P² × C` features over time: `locals[p] = (1/T) Σ_t x[t][p]`.
pub fn temporal_mean_pool(features: &DenseArray, frames: usize) -> Result<DenseArray> {
    if frames == 0 {
        return Err(Error::input("temporal pooling over zero frames"));
    }
    let rows = features.rows();
    if !rows.is_multiple_of(frames) {
        return Err(Error::dim(format!("{rows} patch rows do not split into {frames} frames")));
    }
    let n = rows / frames;
    let c = features.cols();
    let mut out = vec![0.0; n * c];
    for t in 0..frames {
        for p in 0..n {
            for (o, v) in out[p * c..(p + 1) * c].iter_mut().zip(features.row(t * n + p)) {
                *o += v;
            }
        }
    }
    for o in &mut out {
        *o /= frames as f64;
    }
    DenseArray::matrix(n, c, out)
}

/// Temporal mean pooling on the tape, as a constant averaging matrix.
fn temporal_pool_on(tape: &mut Tape, x: Var, frames: usize, patches: usize) -> Result<Var> {
    let cols = frames * patches;
    let mut w = vec![0.0; patches * cols];
    for p in 0..patches {
        for t in 0..frames {
            w[p * cols + t * patches + p] = 1.0 / frames as f64;
        }
    }
    let w = tape.constant(DenseArray::matrix(patches, cols, w)?);
    tape.matmul(w, x)
}

/// Encode a clip; the global token sits at row 0 of the sequence.
pub fn encode_video_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParameterSet,
    clip: &VideoClip,
) -> Result<EncodedVars> {
    if clip.frames == 0 {
        return Err(Error::input("video clip has no frames"));
    }
    if clip.frames > cfg.frames {
        return Err(Error::input(format!(
            "clip has {} frames, encoder supports {}",
            clip.frames, cfg.frames
        )));
    }
    if clip.patches != cfg.patches || clip.dim != cfg.patch_dim {
        return Err(Error::dim(format!(
            "clip patches {}x{} vs encoder {}x{}",
            clip.patches, clip.dim, cfg.patches, cfg.patch_dim
        )));
    }
    let (t, n) = (clip.frames, clip.patches);
    let raw = tape.constant(clip.as_matrix());
    let proj = project(tape, params, "video.input_proj", raw)?;

    let types = tape.param(params, "video.type_embed")?;
    let frames = tape.param(params, "video.frame_embed")?;
    let positions = tape.param(params, "video.pos_embed")?;
    let patch_type = tape.gather_rows(types, &vec![1; t * n])?;
    let frame_ids: Vec<usize> = (0..t * n).map(|i| i / n).collect();
    let frame_e = tape.gather_rows(frames, &frame_ids)?;
    let pos_ids: Vec<usize> = (0..t * n).map(|i| i % n).collect();
    let pos_e = tape.gather_rows(positions, &pos_ids)?;
    let mut patches = tape.add(proj, patch_type)?;
    patches = tape.add(patches, frame_e)?;
    patches = tape.add(patches, pos_e)?;

    let cls = tape.param(params, "video.cls")?;
    let cls_type = tape.gather_rows(types, &[0])?;
    let cls = tape.add(cls, cls_type)?;
    let mut x = tape.concat_rows(&[cls, patches])?;
    let mut ind = if cfg.use_indicators {
        Some(tape.param(params, "video.indicators")?)
    } else {
        None
    };
    for l in 0..cfg.layers {
        x = self_attention_block(tape, params, &format!("video.layers.{l}.attn"), x, None)?;
        if let Some(i) = ind {
            ind = Some(bind_on_tape(tape, params, &format!("video.layers.{l}.bind"), i, x, None)?);
        }
    }
    let g = tape.slice_rows(x, 0, 1)?;
    let global = tape.l2_normalize_rows(g);
    let per_frame = tape.slice_rows(x, 1, t * n)?;
    let locals = temporal_pool_on(tape, per_frame, t, n)?;
    Ok(EncodedVars {
        global,
        focus: ind,
        locals,
    })
}

fn focus_or_empty(tape: &Tape, v: Option<Var>, c: usize) -> DenseArray {
    v.map_or_else(|| DenseArray::zeros(&[0, c]), |f| tape.value(f).clone())
}

pub fn encode_text(cfg: &ModelConfig, params: &ParameterSet, seq: &TextSequence) -> Result<EncodedText> {
    encode_text_padded(cfg, params, &seq.tokens, seq.len())
}

/// Encode a right-padded sequence with `valid_len` real tokens.
pub fn encode_text_padded(
    cfg: &ModelConfig,
    params: &ParameterSet,
    tokens: &[usize],
    valid_len: usize,
) -> Result<EncodedText> {
    let mut tape = Tape::new();
    let v = encode_text_on(&mut tape, cfg, params, tokens, valid_len)?;
    Ok(EncodedText {
        global: tape.value(v.global).data().to_vec(),
        focus: focus_or_empty(&tape, v.focus, cfg.width),
        locals: tape.value(v.locals).clone(),
    })
}

pub fn encode_video(cfg: &ModelConfig, params: &ParameterSet, clip: &VideoClip) -> Result<EncodedVideo> {
    let mut tape = Tape::new();
    let v = encode_video_on(&mut tape, cfg, params, clip)?;
    Ok(EncodedVideo {
        global: tape.value(v.global).data().to_vec(),
        locals: tape.value(v.locals).clone(),
        focus: focus_or_empty(&tape, v.focus, cfg.width),
    })
}
