//! The transformer layer shared by the main and condition streams, its
//! hand-written backward pass, and the condition cache.
//!
//! Layer structure (pre-norm):
//!   y1 = x + Attn(LN1(x)) . Wo
//!   y2 = y1 + FFN(LN2(y1))
//!
//! In decoupled mode every condition segment runs this layer on itself
//! (self-attention only), while the main stream joins the kept conditions'
//! keys/values into its attention. The condition side never reads the main
//! stream or the timestep, which is what makes [`warm_cache`] sound.

use super::kernels::{sdpa_backward, sdpa_forward, split_rows};
use super::{AttentionParams, BlockMask, RunStats};
use crate::arraymath::{
    col_sums, draw_normal, gelu_grad_scalar, gelu_scalar, layer_norm_backward, layer_norm_fwd,
    lit, matmul, matmul_nt, matmul_tn, DenseArray, RngState, Scalar,
};
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LayerBlock<T> {
    pub norm1_gamma: DenseArray<T>,
    pub norm1_beta: DenseArray<T>,
    pub attn: AttentionParams<T>,
    pub norm2_gamma: DenseArray<T>,
    pub norm2_beta: DenseArray<T>,
    pub ffn_w1: DenseArray<T>,
    pub ffn_b1: DenseArray<T>,
    pub ffn_w2: DenseArray<T>,
    pub ffn_b2: DenseArray<T>,
}

/// Gradients in the same layout as [`LayerBlock`].
pub type LayerGrads<T> = LayerBlock<T>;

impl<T: Scalar> LayerBlock<T> {
    pub fn init(rng: &RngState, d: usize, heads: usize) -> Result<Self> {
        let lin = |tag: u64, rows: usize, cols: usize| {
            let mut r = rng.fork(tag);
            draw_normal::<T>(&mut r, rows * cols)
                .scale(lit::<T>(1.0 / (rows as f64).sqrt()))
                .reshape(vec![rows, cols])
                .unwrap()
        };
        Ok(Self {
            norm1_gamma: DenseArray::filled(&[d], T::one()),
            norm1_beta: DenseArray::zeros(&[d]),
            attn: AttentionParams::init(rng, d, heads)?,
            norm2_gamma: DenseArray::filled(&[d], T::one()),
            norm2_beta: DenseArray::zeros(&[d]),
            ffn_w1: lin(11, d, 4 * d),
            ffn_b1: DenseArray::zeros(&[4 * d]),
            ffn_w2: lin(12, 4 * d, d),
            ffn_b2: DenseArray::zeros(&[d]),
        })
    }

    pub fn zeros_like(&self) -> LayerBlock<T> {
        LayerBlock {
            norm1_gamma: DenseArray::zeros(self.norm1_gamma.shape()),
            norm1_beta: DenseArray::zeros(self.norm1_beta.shape()),
            attn: AttentionParams {
                wq: DenseArray::zeros(self.attn.wq.shape()),
                wk: DenseArray::zeros(self.attn.wk.shape()),
                wv: DenseArray::zeros(self.attn.wv.shape()),
                wo: DenseArray::zeros(self.attn.wo.shape()),
                heads: self.attn.heads,
            },
            norm2_gamma: DenseArray::zeros(self.norm2_gamma.shape()),
            norm2_beta: DenseArray::zeros(self.norm2_beta.shape()),
            ffn_w1: DenseArray::zeros(self.ffn_w1.shape()),
            ffn_b1: DenseArray::zeros(self.ffn_b1.shape()),
            ffn_w2: DenseArray::zeros(self.ffn_w2.shape()),
            ffn_b2: DenseArray::zeros(self.ffn_b2.shape()),
        }
    }
}

#[derive(Clone, Debug)]
struct NormTape<T> {
    xhat: DenseArray<T>,
    rstd: Vec<T>,
}

#[derive(Clone, Debug)]
struct FfnTape<T> {
    /// FFN input (the LN2 output).
    input: DenseArray<T>,
    /// Hidden pre-activation.
    f1: DenseArray<T>,
}

/// Saved activations for one stream's pass through a layer.
#[derive(Clone, Debug)]
pub struct StreamTape<T> {
    ln1: NormTape<T>,
    a1: DenseArray<T>,
    q: DenseArray<T>,
    /// Attention keys/values; for the main stream these are the joined
    /// [own; kept condition] matrices.
    k_att: DenseArray<T>,
    v_att: DenseArray<T>,
    probs: Vec<DenseArray<T>>,
    ctx: DenseArray<T>,
    ln2: NormTape<T>,
    ffn: FfnTape<T>,
}

#[derive(Clone, Debug)]
pub struct DecoupledLayerTape<T> {
    main: StreamTape<T>,
    conds: Vec<StreamTape<T>>,
    kept: Vec<bool>,
    /// Row range of each kept condition inside the main joined key matrix.
    key_ranges: Vec<Option<std::ops::Range<usize>>>,
}

/// Kind-of tape for full mode; only the probabilities are kept (full mode
/// is never trained, only sampled and analyzed).
pub type FullLayerTape<T> = Option<Vec<DenseArray<T>>>;

impl<T: Scalar> DecoupledLayerTape<T> {
    /// Shapes of the condition outputs (layers preserve extents).
    pub fn cond_output_shapes(&self) -> Vec<Vec<usize>> {
        self.conds
            .iter()
            .map(|c| c.ln1.xhat.shape().to_vec())
            .collect()
    }
}

fn ffn_forward<T: Scalar>(
    block: &LayerBlock<T>,
    input: &DenseArray<T>,
) -> (DenseArray<T>, FfnTape<T>) {
    let mut f1 = matmul(input, &block.ffn_w1).expect("ffn w1");
    crate::arraymath::add_bias_rows(&mut f1, &block.ffn_b1);
    let act = f1.map(gelu_scalar);
    let mut f2 = matmul(&act, &block.ffn_w2).expect("ffn w2");
    crate::arraymath::add_bias_rows(&mut f2, &block.ffn_b2);
    (
        f2,
        FfnTape {
            input: input.clone(),
            f1,
        },
    )
}

fn ffn_backward<T: Scalar>(
    block: &LayerBlock<T>,
    tape: &FfnTape<T>,
    d_f2: &DenseArray<T>,
    grads: &mut LayerGrads<T>,
) -> DenseArray<T> {
    let act = tape.f1.map(gelu_scalar);
    grads.ffn_w2.add_assign(&matmul_tn(&act, d_f2).unwrap());
    grads.ffn_b2.add_assign(&col_sums(d_f2));
    let d_act = matmul_nt(d_f2, &block.ffn_w2).unwrap();
    let mut d_f1 = DenseArray::zeros(tape.f1.shape());
    for ((o, &h), &da) in d_f1
        .data_mut()
        .iter_mut()
        .zip(tape.f1.data())
        .zip(d_act.data())
    {
        *o = gelu_grad_scalar(h) * da;
    }
    grads
        .ffn_w1
        .add_assign(&matmul_tn(&tape.input, &d_f1).unwrap());
    grads.ffn_b1.add_assign(&col_sums(&d_f1));
    matmul_nt(&d_f1, &block.ffn_w1).unwrap()
}

/// One self-attending stream step. Returns the new state, the stream's
/// projected keys/values, the attention output (post-Wo), and the tape.
fn stream_self_step<T: Scalar>(
    block: &LayerBlock<T>,
    x: &DenseArray<T>,
) -> Result<(
    DenseArray<T>,
    DenseArray<T>,
    DenseArray<T>,
    DenseArray<T>,
    StreamTape<T>,
)> {
    let (a1, xhat1, rstd1) = layer_norm_fwd(x, &block.norm1_gamma, &block.norm1_beta, LN_EPS)?;
    let q = matmul(&a1, &block.attn.wq)?;
    let k = matmul(&a1, &block.attn.wk)?;
    let v = matmul(&a1, &block.attn.wv)?;
    let (ctx, probs) = sdpa_forward(&q, &k, &v, block.attn.heads, None);
    let o = matmul(&ctx, &block.attn.wo)?;
    let mut y1 = x.clone();
    y1.add_assign(&o);
    let (a2, xhat2, rstd2) = layer_norm_fwd(&y1, &block.norm2_gamma, &block.norm2_beta, LN_EPS)?;
    let (f2, ffn_tape) = ffn_forward(block, &a2);
    let mut y2 = y1;
    y2.add_assign(&f2);
    Ok((
        y2,
        k.clone(),
        v.clone(),
        o,
        StreamTape {
            ln1: NormTape {
                xhat: xhat1,
                rstd: rstd1,
            },
            a1,
            q,
            k_att: k,
            v_att: v,
            probs,
            ctx,
            ln2: NormTape {
                xhat: xhat2,
                rstd: rstd2,
            },
            ffn: ffn_tape,
        },
    ))
}

/// Decoupled layer: every condition stream self-attends and advances; the
/// main stream attends over its own keys plus the kept conditions' keys.
/// `kept[i]` gates only the main-stream pathway; condition evolution never
/// depends on the schedule (cache soundness requires exactly that).
pub fn decoupled_layer_forward<T: Scalar>(
    block: &LayerBlock<T>,
    main: &DenseArray<T>,
    conds: &[DenseArray<T>],
    kept: &[bool],
    stats: &mut RunStats,
) -> Result<(DenseArray<T>, Vec<DenseArray<T>>, DecoupledLayerTape<T>)> {
    if conds.len() != kept.len() {
        return Err(Error::contract(format!(
            "{} condition segments but {} keep flags",
            conds.len(),
            kept.len()
        )));
    }
    let mut new_conds = Vec::with_capacity(conds.len());
    let mut cond_tapes = Vec::with_capacity(conds.len());
    let mut cond_kv: Vec<(DenseArray<T>, DenseArray<T>)> = Vec::with_capacity(conds.len());
    for c in conds {
        let (y2, k, v, _o, tape) = stream_self_step(block, c)?;
        new_conds.push(y2);
        cond_kv.push((k, v));
        cond_tapes.push(tape);
    }
    if !conds.is_empty() {
        stats.condition_branch_execs += 1;
    }

    let (a1, xhat1, rstd1) = layer_norm_fwd(main, &block.norm1_gamma, &block.norm1_beta, LN_EPS)?;
    let q = matmul(&a1, &block.attn.wq)?;
    let k_main = matmul(&a1, &block.attn.wk)?;
    let v_main = matmul(&a1, &block.attn.wv)?;
    let mut k_parts = vec![&k_main];
    let mut v_parts = vec![&v_main];
    let mut key_ranges: Vec<Option<std::ops::Range<usize>>> = Vec::with_capacity(conds.len());
    let mut offset = k_main.rows();
    for (i, (k, v)) in cond_kv.iter().enumerate() {
        if kept[i] {
            k_parts.push(k);
            v_parts.push(v);
            key_ranges.push(Some(offset..offset + k.rows()));
            offset += k.rows();
        } else {
            key_ranges.push(None);
        }
    }
    let k_all = DenseArray::vstack(&k_parts)?;
    let v_all = DenseArray::vstack(&v_parts)?;
    let (ctx, probs) = sdpa_forward(&q, &k_all, &v_all, block.attn.heads, None);
    stats.main_attention_execs += 1;
    let o = matmul(&ctx, &block.attn.wo)?;
    let mut y1 = main.clone();
    y1.add_assign(&o);
    let (a2, xhat2, rstd2) = layer_norm_fwd(&y1, &block.norm2_gamma, &block.norm2_beta, LN_EPS)?;
    let (f2, ffn_tape) = ffn_forward(block, &a2);
    let mut y2 = y1;
    y2.add_assign(&f2);

    let main_tape = StreamTape {
        ln1: NormTape {
            xhat: xhat1,
            rstd: rstd1,
        },
        a1,
        q,
        k_att: k_all,
        v_att: v_all,
        probs,
        ctx,
        ln2: NormTape {
            xhat: xhat2,
            rstd: rstd2,
        },
        ffn: ffn_tape,
    };
    Ok((
        y2,
        new_conds,
        DecoupledLayerTape {
            main: main_tape,
            conds: cond_tapes,
            kept: kept.to_vec(),
            key_ranges,
        },
    ))
}

/// Joint layer over an assembled sequence (the full-attention baseline).
/// Optional mask; optional recording of post-softmax probabilities.
pub fn full_layer_forward<T: Scalar>(
    block: &LayerBlock<T>,
    tokens: &DenseArray<T>,
    mask: Option<&BlockMask>,
    record_probs: bool,
) -> Result<(DenseArray<T>, FullLayerTape<T>)> {
    let (a1, _, _) = layer_norm_fwd(tokens, &block.norm1_gamma, &block.norm1_beta, LN_EPS)?;
    let q = matmul(&a1, &block.attn.wq)?;
    let k = matmul(&a1, &block.attn.wk)?;
    let v = matmul(&a1, &block.attn.wv)?;
    let (ctx, probs) = sdpa_forward(&q, &k, &v, block.attn.heads, mask);
    let o = matmul(&ctx, &block.attn.wo)?;
    let mut y1 = tokens.clone();
    y1.add_assign(&o);
    let (a2, _, _) = layer_norm_fwd(&y1, &block.norm2_gamma, &block.norm2_beta, LN_EPS)?;
    let (f2, _) = ffn_forward(block, &a2);
    let mut y2 = y1;
    y2.add_assign(&f2);
    Ok((y2, record_probs.then_some(probs)))
}

/// Tail of the stream backward: through the FFN residual and LN2, then
/// through the Wo projection. Returns (d_y1, d_ctx).
fn stream_tail_backward<T: Scalar>(
    block: &LayerBlock<T>,
    tape: &StreamTape<T>,
    d_y2: &DenseArray<T>,
    grads: &mut LayerGrads<T>,
) -> (DenseArray<T>, DenseArray<T>) {
    let d_a2 = ffn_backward(block, &tape.ffn, d_y2, grads);
    let d_ln2 = layer_norm_backward(
        &d_a2,
        &tape.ln2.xhat,
        &tape.ln2.rstd,
        &block.norm2_gamma,
        &mut grads.norm2_gamma,
        &mut grads.norm2_beta,
    );
    let mut d_y1 = d_y2.clone();
    d_y1.add_assign(&d_ln2);
    let d_ctx = matmul_nt(&d_y1, &block.attn.wo).unwrap();
    grads
        .attn
        .wo
        .add_assign(&matmul_tn(&tape.ctx, &d_y1).unwrap());
    (d_y1, d_ctx)
}

/// Head of the stream backward: given total gradients on this stream's
/// q/k/v, accumulate projection grads and return the gradient on the
/// stream's input state.
fn stream_head_backward<T: Scalar>(
    block: &LayerBlock<T>,
    tape: &StreamTape<T>,
    d_q: &DenseArray<T>,
    d_k: &DenseArray<T>,
    d_v: &DenseArray<T>,
    d_y1: &DenseArray<T>,
    grads: &mut LayerGrads<T>,
) -> DenseArray<T> {
    grads
        .attn
        .wq
        .add_assign(&matmul_tn(&tape.a1, d_q).unwrap());
    grads
        .attn
        .wk
        .add_assign(&matmul_tn(&tape.a1, d_k).unwrap());
    grads
        .attn
        .wv
        .add_assign(&matmul_tn(&tape.a1, d_v).unwrap());
    let mut d_a1 = matmul_nt(d_q, &block.attn.wq).unwrap();
    d_a1.add_assign(&matmul_nt(d_k, &block.attn.wk).unwrap());
    d_a1.add_assign(&matmul_nt(d_v, &block.attn.wv).unwrap());
    let d_ln1 = layer_norm_backward(
        &d_a1,
        &tape.ln1.xhat,
        &tape.ln1.rstd,
        &block.norm1_gamma,
        &mut grads.norm1_gamma,
        &mut grads.norm1_beta,
    );
    let mut d_x = d_y1.clone();
    d_x.add_assign(&d_ln1);
    d_x
}

/// Backward of [`decoupled_layer_forward`]. Returns gradients on the layer
/// inputs (main, conditions) and accumulates parameter gradients.
pub fn decoupled_layer_backward<T: Scalar>(
    block: &LayerBlock<T>,
    tape: &DecoupledLayerTape<T>,
    d_main_out: &DenseArray<T>,
    d_conds_out: &[DenseArray<T>],
    grads: &mut LayerGrads<T>,
) -> Result<(DenseArray<T>, Vec<DenseArray<T>>)> {
    if d_conds_out.len() != tape.conds.len() {
        return Err(Error::contract(format!(
            "{} condition grads for {} tapes",
            d_conds_out.len(),
            tape.conds.len()
        )));
    }
    // main tail + attention over joined keys
    let (d_y1_main, d_ctx_main) = stream_tail_backward(block, &tape.main, d_main_out, grads);
    let (d_q_main, d_k_joined, d_v_joined) = sdpa_backward(
        &d_ctx_main,
        &tape.main.q,
        &tape.main.k_att,
        &tape.main.v_att,
        &tape.main.probs,
        block.attn.heads,
    );
    let main_rows = tape.main.q.rows();
    let d_k_main = split_rows(&d_k_joined, 0..main_rows);
    let d_v_main = split_rows(&d_v_joined, 0..main_rows);
    let d_main_in =
        stream_head_backward(block, &tape.main, &d_q_main, &d_k_main, &d_v_main, &d_y1_main, grads);

    // condition streams: own self-attention backward plus the key/value
    // gradients received from the main pathway when kept
    let mut d_conds_in = Vec::with_capacity(tape.conds.len());
    for (i, ct) in tape.conds.iter().enumerate() {
        let (d_y1_c, d_ctx_c) = stream_tail_backward(block, ct, &d_conds_out[i], grads);
        let (d_q_c, mut d_k_c, mut d_v_c) = sdpa_backward(
            &d_ctx_c,
            &ct.q,
            &ct.k_att,
            &ct.v_att,
            &ct.probs,
            block.attn.heads,
        );
        if let Some(range) = &tape.key_ranges[i] {
            d_k_c.add_assign(&split_rows(&d_k_joined, range.clone()));
            d_v_c.add_assign(&split_rows(&d_v_joined, range.clone()));
        }
        let d_c_in = stream_head_backward(block, ct, &d_q_c, &d_k_c, &d_v_c, &d_y1_c, grads);
        d_conds_in.push(d_c_in);
    }
    let _ = &tape.kept;
    Ok((d_main_in, d_conds_in))
}

// ---------------------------------------------------------------------------
// Condition cache
// ---------------------------------------------------------------------------

/// Cached per-layer activations of one condition stream.
#[derive(Clone, Debug, PartialEq)]
pub struct CondCacheEntry<T> {
    /// Stream state entering this layer (for staleness checks).
    pub input: DenseArray<T>,
    pub k: DenseArray<T>,
    pub v: DenseArray<T>,
    /// Self-attention output, post-Wo.
    pub o: DenseArray<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache<T> {
    pub conds: Vec<CondCacheEntry<T>>,
}

/// Condition-branch activations for every layer, computed once. Contents
/// are independent of the timestep and of the noisy-latent tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionCache<T> {
    /// Encoder-output condition tokens the cache was built from.
    pub source: Vec<DenseArray<T>>,
    pub layers: Vec<LayerCache<T>>,
    pub valid: bool,
}

impl<T: Scalar> ConditionCache<T> {
    pub fn matches(&self, conds: &[DenseArray<T>]) -> bool {
        self.valid && self.source.len() == conds.len() && self.source.iter().zip(conds).all(|(a, b)| a == b)
    }
}

/// Runs the condition branch of every layer once and records K/V/O plus
/// the evolving stream states. One counter tick per layer.
pub fn warm_cache<T: Scalar>(
    conds: &[DenseArray<T>],
    blocks: &[LayerBlock<T>],
    stats: &mut RunStats,
) -> Result<ConditionCache<T>> {
    let mut states: Vec<DenseArray<T>> = conds.to_vec();
    let mut layers = Vec::with_capacity(blocks.len());
    for block in blocks {
        let mut entries = Vec::with_capacity(states.len());
        let mut next = Vec::with_capacity(states.len());
        for s in &states {
            let (y2, k, v, o, _tape) = stream_self_step(block, s)?;
            entries.push(CondCacheEntry {
                input: s.clone(),
                k,
                v,
                o,
            });
            next.push(y2);
        }
        if !states.is_empty() {
            stats.condition_branch_execs += 1;
        }
        states = next;
        layers.push(LayerCache { conds: entries });
    }
    Ok(ConditionCache {
        source: conds.to_vec(),
        layers,
        valid: true,
    })
}

/// Main-stream-only layer step against a warmed cache. Bit-identical to
/// [`decoupled_layer_forward`]'s main output for matching inputs.
pub fn cached_layer_forward<T: Scalar>(
    block: &LayerBlock<T>,
    main: &DenseArray<T>,
    cache: &LayerCache<T>,
    kept: &[bool],
    stats: &mut RunStats,
) -> Result<DenseArray<T>> {
    if cache.conds.len() != kept.len() {
        return Err(Error::contract(format!(
            "{} cached segments but {} keep flags",
            cache.conds.len(),
            kept.len()
        )));
    }
    let (a1, _, _) = layer_norm_fwd(main, &block.norm1_gamma, &block.norm1_beta, LN_EPS)?;
    let q = matmul(&a1, &block.attn.wq)?;
    let k_main = matmul(&a1, &block.attn.wk)?;
    let v_main = matmul(&a1, &block.attn.wv)?;
    let mut k_parts = vec![&k_main];
    let mut v_parts = vec![&v_main];
    for (entry, &keep) in cache.conds.iter().zip(kept) {
        if keep {
            k_parts.push(&entry.k);
            v_parts.push(&entry.v);
        }
    }
    let k_all = DenseArray::vstack(&k_parts)?;
    let v_all = DenseArray::vstack(&v_parts)?;
    let (ctx, _) = sdpa_forward(&q, &k_all, &v_all, block.attn.heads, None);
    stats.main_attention_execs += 1;
    let o = matmul(&ctx, &block.attn.wo)?;
    let mut y1 = main.clone();
    y1.add_assign(&o);
    let (a2, _, _) = layer_norm_fwd(&y1, &block.norm2_gamma, &block.norm2_beta, LN_EPS)?;
    let (f2, _) = ffn_forward(block, &a2);
    let mut y2 = y1;
    y2.add_assign(&f2);
    Ok(y2)
}
