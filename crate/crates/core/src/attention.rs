//! Attention kernels and transformer blocks.
//!
//! All functions build onto a caller-owned [`Tape`] and accept either a single
//! sequence `[L, d]` or a batch `[B, L, d]`. Blocks use pre-norm residual
//! wiring: `x + sublayer(LN(x))`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{linear_specs, norm_specs, Bound, ParamSpec};

pub const LN_EPS: f64 = 1e-5;
/// Hidden width multiplier of the position-wise feed-forward network.
pub const FFN_MULT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d_model == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must be a positive multiple of n_heads {n_heads}"
            )));
        }
        Ok(AttentionConfig { d_model, n_heads })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which keys each query may attend to.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum MaskSpec {
    #[default]
    None,
    /// Query `t` sees keys `0..=t`.
    Causal,
    /// One flag per key position per sequence (`B·Lk` entries, `true` = attendable).
    Padding(Vec<bool>),
    CausalPadding(Vec<bool>),
}

impl MaskSpec {
    /// Flat keep-mask over logits shaped `[lead.., lq, lk]`, or `None` when
    /// nothing is masked.
    fn keep(&self, lead: usize, lq: usize, lk: usize) -> Result<Option<Vec<bool>>> {
        let (causal, pad) = match self {
            MaskSpec::None => return Ok(None),
            MaskSpec::Causal => (true, None),
            MaskSpec::Padding(p) => (false, Some(p)),
            MaskSpec::CausalPadding(p) => (true, Some(p)),
        };
        let per_group = match pad {
            Some(p) => {
                let groups = if lk == 0 { 0 } else { p.len() / lk };
                if lk == 0 || p.len() % lk != 0 || groups == 0 || lead % groups != 0 {
                    return Err(Error::Mask(format!(
                        "padding mask of {} entries does not fit {lead} sequences of {lk} keys",
                        p.len()
                    )));
                }
                lead / groups
            }
            None => 1,
        };
        let mut keep = Vec::with_capacity(lead * lq * lk);
        for l in 0..lead {
            for i in 0..lq {
                let mut any = false;
                for j in 0..lk {
                    let mut ok = !causal || j <= i;
                    if let Some(p) = pad {
                        ok &= p[(l / per_group) * lk + j];
                    }
                    any |= ok;
                    keep.push(ok);
                }
                if !any {
                    return Err(Error::Mask(format!(
                        "query row {i} of sequence {l} has no attendable key"
                    )));
                }
            }
        }
        Ok(Some(keep))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        Ok(Linear {
            w: p.get(&format!("{prefix}.w"))?,
            b: p.opt(&format!("{prefix}.b")),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNormParams {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: p.get(&format!("{prefix}.gamma"))?,
            beta: p.get(&format!("{prefix}.beta"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl AttentionParams {
    pub fn bind(p: &Bound, prefix: &str, n_heads: usize) -> Result<Self> {
        Ok(AttentionParams {
            q: Linear::bind(p, &format!("{prefix}.q"))?,
            k: Linear::bind(p, &format!("{prefix}.k"))?,
            v: Linear::bind(p, &format!("{prefix}.v"))?,
            o: Linear::bind(p, &format!("{prefix}.o"))?,
            n_heads,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::bind(p, &format!("{prefix}.fc1"))?,
            fc2: Linear::bind(p, &format!("{prefix}.fc2"))?,
        })
    }
}

/// Self-attention block (image encoder and decoder).
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FeedForward,
}

impl BlockParams {
    pub fn bind(p: &Bound, prefix: &str, n_heads: usize) -> Result<Self> {
        Ok(BlockParams {
            ln1: LayerNormParams::bind(p, &format!("{prefix}.ln1"))?,
            attn: AttentionParams::bind(p, &format!("{prefix}.attn"), n_heads)?,
            ln2: LayerNormParams::bind(p, &format!("{prefix}.ln2"))?,
            ffn: FeedForward::bind(p, &format!("{prefix}.ffn"))?,
        })
    }
}

/// Text block with self-attention, cross-attention to image and FFN.
#[derive(Clone, Copy, Debug)]
pub struct GroundedBlockParams {
    pub ln1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ln3: LayerNormParams,
    pub ffn: FeedForward,
}

impl GroundedBlockParams {
    pub fn bind(p: &Bound, prefix: &str, n_heads: usize) -> Result<Self> {
        Ok(GroundedBlockParams {
            ln1: LayerNormParams::bind(p, &format!("{prefix}.ln1"))?,
            self_attn: AttentionParams::bind(p, &format!("{prefix}.self_attn"), n_heads)?,
            ln2: LayerNormParams::bind(p, &format!("{prefix}.ln2"))?,
            cross_attn: AttentionParams::bind(p, &format!("{prefix}.cross_attn"), n_heads)?,
            ln3: LayerNormParams::bind(p, &format!("{prefix}.ln3"))?,
            ffn: FeedForward::bind(p, &format!("{prefix}.ffn"))?,
        })
    }
}

/// Q, V and output projections carry biases. The key projection does not:
/// a key bias only adds a per-query constant to the logits, which softmax
/// cancels, so its gradient is identically zero.
pub fn attention_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    let mut v = linear_specs(&format!("{prefix}.q"), d, d, true);
    v.extend(linear_specs(&format!("{prefix}.k"), d, d, false));
    v.extend(linear_specs(&format!("{prefix}.v"), d, d, true));
    v.extend(linear_specs(&format!("{prefix}.o"), d, d, true));
    v
}

pub fn ffn_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    let mut v = linear_specs(&format!("{prefix}.fc1"), d, FFN_MULT * d, true);
    v.extend(linear_specs(
        &format!("{prefix}.fc2"),
        FFN_MULT * d,
        d,
        true,
    ));
    v
}

pub fn block_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    let mut v = norm_specs(&format!("{prefix}.ln1"), d);
    v.extend(attention_specs(&format!("{prefix}.attn"), d));
    v.extend(norm_specs(&format!("{prefix}.ln2"), d));
    v.extend(ffn_specs(&format!("{prefix}.ffn"), d));
    v
}

pub fn grounded_block_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    let mut v = norm_specs(&format!("{prefix}.ln1"), d);
    v.extend(attention_specs(&format!("{prefix}.self_attn"), d));
    v.extend(norm_specs(&format!("{prefix}.ln2"), d));
    v.extend(attention_specs(&format!("{prefix}.cross_attn"), d));
    v.extend(norm_specs(&format!("{prefix}.ln3"), d));
    v.extend(ffn_specs(&format!("{prefix}.ffn"), d));
    v
}

/// `x·W + b` over the last axis.
pub fn linear(tape: &mut Tape, x: Var, p: &Linear) -> Result<Var> {
    let y = tape.matmul(x, p.w)?;
    match p.b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

pub fn layer_norm(tape: &mut Tape, x: Var, p: &LayerNormParams) -> Result<Var> {
    tape.layer_norm(x, p.gamma, p.beta, LN_EPS)
}

/// `softmax(Q·Kᵀ/√d_k)·V` over the last two axes. Returns the output and the
/// attention weights `[.., Lq, Lk]`.
pub fn scaled_dot_product_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &MaskSpec,
) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (
        tape.value(q).shape().to_vec(),
        tape.value(k).shape().to_vec(),
        tape.value(v).shape().to_vec(),
    );
    let r = sq.len();
    let consistent = r >= 2
        && sk.len() == r
        && sv.len() == r
        && sq[..r - 2] == sk[..r - 2]
        && sk[..r - 2] == sv[..r - 2]
        && sq[r - 1] == sk[r - 1]
        && sk[r - 2] == sv[r - 2];
    if !consistent {
        return Err(Error::shape(
            "attention",
            format!("inconsistent Q {sq:?}, K {sk:?}, V {sv:?}"),
        ));
    }
    let d_k = sq[r - 1];
    let (lq, lk) = (sq[r - 2], sk[r - 2]);
    let lead: usize = sq[..r - 2].iter().product();

    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 2, r - 1);
    let kt = tape.permute(k, &perm)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    let scaled = match mask.keep(lead, lq, lk)? {
        Some(keep) => tape.mask_fill(scaled, keep)?,
        None => scaled,
    };
    let weights = tape.softmax(scaled, r - 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

fn as_batch(tape: &mut Tape, x: Var) -> Result<(Var, bool)> {
    let s = tape.value(x).shape().to_vec();
    match s.len() {
        2 => Ok((tape.reshape(x, [1, s[0], s[1]])?, true)),
        3 => Ok((x, false)),
        _ => Err(Error::shape(
            "multi_head_attention",
            format!("expected [L, d] or [B, L, d], got {s:?}"),
        )),
    }
}

/// `[B, L, d]` → `[B, h, L, d/h]`.
fn split_heads(tape: &mut Tape, x: Var, h: usize) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let r = tape.reshape(x, [s[0], s[1], h, s[2] / h])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[B, h, L, d_k]` → `[B, L, h·d_k]`.
fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, [s[0], s[2], s[1] * s[3]])
}

/// Multi-head attention; also returns weights `[B, h, Lq, Lk]`.
pub fn multi_head_attention_weights(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    p: &AttentionParams,
    mask: &MaskSpec,
) -> Result<(Var, Var)> {
    let d = tape.value(p.q.w).shape()[0];
    let (dq, dkv) = (
        *tape.value(x_q).shape().last().unwrap_or(&0),
        *tape.value(x_kv).shape().last().unwrap_or(&0),
    );
    if dq != d || dkv != d {
        return Err(Error::shape(
            "multi_head_attention",
            format!("inputs have width {dq}/{dkv}, projections expect {d}"),
        ));
    }
    AttentionConfig::new(d, p.n_heads)?;
    let (xq, single) = as_batch(tape, x_q)?;
    let (xkv, _) = as_batch(tape, x_kv)?;
    if tape.value(xq).shape()[0] != tape.value(xkv).shape()[0] {
        return Err(Error::shape(
            "multi_head_attention",
            "query and key/value batch sizes differ",
        ));
    }
    let q = linear(tape, xq, &p.q)?;
    let k = linear(tape, xkv, &p.k)?;
    let v = linear(tape, xkv, &p.v)?;
    let q = split_heads(tape, q, p.n_heads)?;
    let k = split_heads(tape, k, p.n_heads)?;
    let v = split_heads(tape, v, p.n_heads)?;
    let (ctx, weights) = scaled_dot_product_attention(tape, q, k, v, mask)?;
    let merged = merge_heads(tape, ctx)?;
    let mut out = linear(tape, merged, &p.o)?;
    if single {
        let s = tape.value(out).shape().to_vec();
        out = tape.reshape(out, [s[1], s[2]])?;
    }
    Ok((out, weights))
}

pub fn multi_head_attention(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    p: &AttentionParams,
    mask: &MaskSpec,
) -> Result<Var> {
    multi_head_attention_weights(tape, x_q, x_kv, p, mask).map(|(o, _)| o)
}

/// Position-wise `linear → gelu → linear`.
pub fn feed_forward(tape: &mut Tape, x: Var, p: &FeedForward) -> Result<Var> {
    let h = linear(tape, x, &p.fc1)?;
    let h = tape.gelu(h)?;
    linear(tape, h, &p.fc2)
}

/// Pre-norm self-attention block with an arbitrary mask.
pub fn encoder_block(tape: &mut Tape, x: Var, p: &BlockParams, mask: &MaskSpec) -> Result<Var> {
    let n = layer_norm(tape, x, &p.ln1)?;
    let a = multi_head_attention(tape, n, n, &p.attn, mask)?;
    let x = tape.add(x, a)?;
    let n = layer_norm(tape, x, &p.ln2)?;
    let f = feed_forward(tape, n, &p.ffn)?;
    tape.add(x, f)
}

/// Pre-norm block whose self-attention is always causal.
pub fn decoder_block(tape: &mut Tape, x: Var, p: &BlockParams) -> Result<Var> {
    encoder_block(tape, x, p, &MaskSpec::Causal)
}

/// Text self-attention under `pad_mask`, then cross-attention from text
/// queries to image keys/values, then FFN.
pub fn grounded_encoder_block(
    tape: &mut Tape,
    x_text: Var,
    x_img: Var,
    p: &GroundedBlockParams,
    pad_mask: &MaskSpec,
) -> Result<Var> {
    let n = layer_norm(tape, x_text, &p.ln1)?;
    let a = multi_head_attention(tape, n, n, &p.self_attn, pad_mask)?;
    let x = tape.add(x_text, a)?;
    let n = layer_norm(tape, x, &p.ln2)?;
    let c = multi_head_attention(tape, n, x_img, &p.cross_attn, &MaskSpec::None)?;
    let x = tape.add(x, c)?;
    let n = layer_norm(tape, x, &p.ln3)?;
    let f = feed_forward(tape, n, &p.ffn)?;
    tape.add(x, f)
}
