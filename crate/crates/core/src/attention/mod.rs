//! Attention over tagged token sequences, in three modes:
//!
//! - `Full`: every token attends to every retained token (the baseline).
//! - `Decoupled`: main-stream queries (prompt + noise) see all retained
//!   keys, while each condition segment self-attends only. Equivalent to
//!   full attention under the block mask from [`build_block_mask`].
//! - `DecoupledCached`: decoupled, with per-layer condition activations
//!   taken from a [`ConditionCache`] built once by [`warm_cache`].

mod block;
mod kernels;

pub use block::{
    cached_layer_forward, decoupled_layer_backward, decoupled_layer_forward, full_layer_forward,
    warm_cache, CondCacheEntry, ConditionCache, DecoupledLayerTape, FullLayerTape, LayerBlock,
    LayerCache, LayerGrads,
};
pub use kernels::MASK_NEG;

use crate::arraymath::{draw_normal, lit, matmul, DenseArray, RngState, Scalar};
use crate::conditions::{SegmentTag, TokenSeq, CONDITION_TAGS};
use crate::error::{Error, Result};
use kernels::{sdpa_forward, split_rows};

/// Per-layer projection weights. Bias-free, like most DiT-style stacks.
#[derive(Clone, Debug)]
pub struct AttentionParams<T> {
    pub wq: DenseArray<T>,
    pub wk: DenseArray<T>,
    pub wv: DenseArray<T>,
    pub wo: DenseArray<T>,
    pub heads: usize,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn init(rng: &RngState, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        let lin = |tag: u64| {
            let mut r = rng.fork(tag);
            draw_normal::<T>(&mut r, d * d)
                .scale(lit::<T>(1.0 / (d as f64).sqrt()))
                .reshape(vec![d, d])
                .unwrap()
        };
        Ok(Self {
            wq: lin(1),
            wk: lin(2),
            wv: lin(3),
            wo: lin(4),
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.wq.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Full,
    Decoupled,
    DecoupledCached,
}

impl AttentionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "decoupled" => Ok(Self::Decoupled),
            "cached" | "decoupled_cached" => Ok(Self::DecoupledCached),
            other => Err(Error::contract(format!(
                "unknown attention mode {other:?} (full | decoupled | cached)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Decoupled => "decoupled",
            Self::DecoupledCached => "cached",
        }
    }
}

/// Token-level boolean attention mask (query rows x key columns).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    pub rows: usize,
    pub cols: usize,
    keep: Vec<bool>,
}

impl BlockMask {
    pub fn all_true(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.keep[r * self.cols + c] = v;
    }

    pub fn blocked_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }
}

/// Mask that makes full attention equal decoupled attention: main-stream
/// queries see everything, condition queries see only their own segment.
pub fn build_block_mask(tags: &[SegmentTag]) -> BlockMask {
    let n = tags.len();
    let mut mask = BlockMask::all_true(n, n);
    for (r, tq) in tags.iter().enumerate() {
        if !tq.is_condition() {
            continue;
        }
        for (c, tk) in tags.iter().enumerate() {
            if tk != tq {
                mask.set(r, c, false);
            }
        }
    }
    mask
}

/// Attention output in sequence order, with optional per-head probabilities
/// (recorded only when a caller asks for them).
#[derive(Clone, Debug)]
pub struct AttentionOutput<T> {
    pub tokens: DenseArray<T>,
    pub tags: Vec<SegmentTag>,
    pub probs: Option<Vec<DenseArray<T>>>,
}

impl<T: Scalar> AttentionOutput<T> {
    /// Rows of the main stream (prompt + noise).
    pub fn main_rows(&self) -> DenseArray<T> {
        let n = self.tags.iter().take_while(|t| !t.is_condition()).count();
        split_rows(&self.tokens, 0..n)
    }

    /// Rows of one condition segment (empty if absent).
    pub fn condition_rows(&self, tag: SegmentTag) -> DenseArray<T> {
        let start = self.tags.iter().position(|&t| t == tag);
        let (start, end) = match start {
            None => (0, 0),
            Some(s) => {
                let mut e = s;
                while e < self.tags.len() && self.tags[e] == tag {
                    e += 1;
                }
                (s, e)
            }
        };
        split_rows(&self.tokens, start..end)
    }
}

/// Execution counters for the cache-soundness accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunStats {
    /// Times the condition branch (all conditions of one layer) ran.
    pub condition_branch_execs: u64,
    /// Main-stream attention invocations.
    pub main_attention_execs: u64,
}

impl RunStats {
    pub fn new() -> Self {
        Self::default()
    }
}

fn project<T: Scalar>(
    tokens: &DenseArray<T>,
    params: &AttentionParams<T>,
) -> Result<(DenseArray<T>, DenseArray<T>, DenseArray<T>)> {
    let q = matmul(tokens, &params.wq)?;
    let k = matmul(tokens, &params.wk)?;
    let v = matmul(tokens, &params.wv)?;
    Ok((q, k, v))
}

/// Multi-head attention over the whole sequence; masked logits are pushed
/// to [`MASK_NEG`] before softmax; output is projected by W_O.
pub fn full_attention<T: Scalar>(
    seq: &TokenSeq<T>,
    params: &AttentionParams<T>,
    mask: Option<&BlockMask>,
) -> Result<AttentionOutput<T>> {
    full_attention_recorded(seq, params, mask, false)
}

/// As [`full_attention`], optionally recording post-softmax probabilities.
pub fn full_attention_recorded<T: Scalar>(
    seq: &TokenSeq<T>,
    params: &AttentionParams<T>,
    mask: Option<&BlockMask>,
    record_probs: bool,
) -> Result<AttentionOutput<T>> {
    if seq.is_empty() {
        return Err(Error::contract("full_attention on an empty sequence"));
    }
    let (q, k, v) = project(&seq.tokens, params)?;
    let (ctx, probs) = sdpa_forward(&q, &k, &v, params.heads, mask);
    let tokens = matmul(&ctx, &params.wo)?;
    Ok(AttentionOutput {
        tokens,
        tags: seq.tags.clone(),
        probs: record_probs.then_some(probs),
    })
}

/// Decoupled attention: the main stream attends to its own context plus
/// every condition segment's keys; each condition segment self-attends.
pub fn decoupled_attention<T: Scalar>(
    seq: &TokenSeq<T>,
    params: &AttentionParams<T>,
) -> Result<AttentionOutput<T>> {
    seq.check_segment_order()?;
    let (q, k, v) = project(&seq.tokens, params)?;
    let main_len = seq.tags.iter().take_while(|t| !t.is_condition()).count();

    let mut ctx_parts: Vec<DenseArray<T>> = Vec::new();
    // main stream: queries over all retained keys, which in sequence order
    // is exactly the full key matrix
    let q_main = split_rows(&q, 0..main_len);
    let (ctx_main, _) = sdpa_forward(&q_main, &k, &v, params.heads, None);
    ctx_parts.push(ctx_main);

    for tag in CONDITION_TAGS {
        let range = seq.segment_range(tag);
        if range.is_empty() {
            continue;
        }
        let qc = split_rows(&q, range.clone());
        let kc = split_rows(&k, range.clone());
        let vc = split_rows(&v, range.clone());
        let (ctx_c, _) = sdpa_forward(&qc, &kc, &vc, params.heads, None);
        ctx_parts.push(ctx_c);
    }
    let refs: Vec<&DenseArray<T>> = ctx_parts.iter().collect();
    let ctx = DenseArray::vstack(&refs)?;
    let tokens = matmul(&ctx, &params.wo)?;
    Ok(AttentionOutput {
        tokens,
        tags: seq.tags.clone(),
        probs: None,
    })
}

/// Mode dispatch. `DecoupledCached` requires the cache entry of the layer
/// being evaluated; the entry must match the sequence's condition segments.
pub fn attend<T: Scalar>(
    seq: &TokenSeq<T>,
    params: &AttentionParams<T>,
    mode: AttentionMode,
    cache: Option<&LayerCache<T>>,
) -> Result<AttentionOutput<T>> {
    match mode {
        AttentionMode::Full => full_attention(seq, params, None),
        AttentionMode::Decoupled => decoupled_attention(seq, params),
        AttentionMode::DecoupledCached => {
            let entry = cache.ok_or_else(|| {
                Error::contract("cached attention requires a warmed condition cache")
            })?;
            attend_cached(seq, params, entry)
        }
    }
}

fn attend_cached<T: Scalar>(
    seq: &TokenSeq<T>,
    params: &AttentionParams<T>,
    cache: &LayerCache<T>,
) -> Result<AttentionOutput<T>> {
    seq.check_segment_order()?;
    let main_len = seq.tags.iter().take_while(|t| !t.is_condition()).count();
    // staleness: the sequence's condition segments must be the exact inputs
    // the cache was built from at this layer
    let mut cond_idx = 0usize;
    for tag in CONDITION_TAGS {
        let range = seq.segment_range(tag);
        if range.is_empty() {
            continue;
        }
        let entry = cache.conds.get(cond_idx).ok_or_else(|| {
            Error::CacheInvalid(format!("cache holds no entry for segment {}", tag.name()))
        })?;
        let given = split_rows(&seq.tokens, range);
        if given != entry.input {
            return Err(Error::CacheInvalid(format!(
                "condition tokens for {} changed since warm_cache",
                tag.name()
            )));
        }
        cond_idx += 1;
    }

    let main_tokens = split_rows(&seq.tokens, 0..main_len);
    let (q_main, k_main, v_main) = project(&main_tokens, params)?;
    let mut k_parts = vec![&k_main];
    let mut v_parts = vec![&v_main];
    for entry in &cache.conds {
        k_parts.push(&entry.k);
        v_parts.push(&entry.v);
    }
    let k_all = DenseArray::vstack(&k_parts)?;
    let v_all = DenseArray::vstack(&v_parts)?;
    let (ctx_main, _) = sdpa_forward(&q_main, &k_all, &v_all, params.heads, None);
    let out_main = matmul(&ctx_main, &params.wo)?;
    let mut parts = vec![&out_main];
    for entry in &cache.conds {
        parts.push(&entry.o);
    }
    let tokens = DenseArray::vstack(&parts)?;
    Ok(AttentionOutput {
        tokens,
        tags: seq.tags.clone(),
        probs: None,
    })
}

#[cfg(test)]
mod tests;
