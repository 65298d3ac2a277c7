use super::*;
use crate::arraymath::{draw_normal, DenseArray, RngState};
use crate::conditions::{SegmentTag, TokenSeq};

fn arr(seed: u64, r: usize, c: usize) -> DenseArray<f64> {
    let mut rng = RngState::new(seed);
    draw_normal::<f64>(&mut rng, r * c).reshape(vec![r, c]).unwrap()
}

fn tagged_seq(seed: u64, lens: [usize; 5], d: usize) -> TokenSeq<f64> {
    let n: usize = lens.iter().sum();
    let tokens = arr(seed, n, d);
    let mut tags = Vec::new();
    for (i, &l) in lens.iter().enumerate() {
        tags.extend(std::iter::repeat(crate::conditions::SEGMENT_ORDER[i]).take(l));
    }
    TokenSeq::new(tokens, tags, vec![None; n]).unwrap()
}

fn max_abs_diff(a: &DenseArray<f64>, b: &DenseArray<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Naive per-head attention: independent of the sdpa kernels.
fn naive_full_attention(
    seq: &TokenSeq<f64>,
    p: &AttentionParams<f64>,
    mask: Option<&BlockMask>,
) -> DenseArray<f64> {
    let n = seq.len();
    let d = p.width();
    let dh = d / p.heads;
    let q = crate::arraymath::matmul(&seq.tokens, &p.wq).unwrap();
    let k = crate::arraymath::matmul(&seq.tokens, &p.wk).unwrap();
    let v = crate::arraymath::matmul(&seq.tokens, &p.wv).unwrap();
    let mut ctx = DenseArray::zeros(&[n, d]);
    for h in 0..p.heads {
        for i in 0..n {
            let mut logits = vec![0.0f64; n];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q.at(i, h * dh + c) * k.at(j, h * dh + c);
                }
                *logit = s / (dh as f64).sqrt();
                if let Some(m) = mask {
                    if !m.allowed(i, j) {
                        *logit += MASK_NEG;
                    }
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += exps[j] / sum * v.at(j, h * dh + c);
                }
                ctx.set(i, h * dh + c, acc);
            }
        }
    }
    crate::arraymath::matmul(&ctx, &p.wo).unwrap()
}

#[test]
fn full_attention_matches_naive_loop_oracle() {
    let p = AttentionParams::<f64>::init(&RngState::new(1), 16, 4).unwrap();
    let seq = tagged_seq(2, [2, 4, 3, 2, 1], 16);
    let got = full_attention(&seq, &p, None).unwrap();
    let want = naive_full_attention(&seq, &p, None);
    assert!(max_abs_diff(&got.tokens, &want) < 1e-10);
    // and under a mask
    let mask = build_block_mask(&seq.tags);
    let got_m = full_attention(&seq, &p, Some(&mask)).unwrap();
    let want_m = naive_full_attention(&seq, &p, Some(&mask));
    assert!(max_abs_diff(&got_m.tokens, &want_m) < 1e-10);
}

#[test]
fn single_token_output_is_value_projection() {
    let p = AttentionParams::<f64>::init(&RngState::new(3), 8, 2).unwrap();
    let seq = tagged_seq(4, [0, 1, 0, 0, 0], 8);
    let out = full_attention(&seq, &p, None).unwrap();
    let v = crate::arraymath::matmul(&seq.tokens, &p.wv).unwrap();
    let want = crate::arraymath::matmul(&v, &p.wo).unwrap();
    assert!(max_abs_diff(&out.tokens, &want) < 1e-12);
}

#[test]
fn all_true_mask_equals_unmasked() {
    let p = AttentionParams::<f64>::init(&RngState::new(5), 8, 2).unwrap();
    let seq = tagged_seq(6, [1, 3, 2, 0, 2], 8);
    let mask = BlockMask::all_true(seq.len(), seq.len());
    let a = full_attention(&seq, &p, None).unwrap();
    let b = full_attention(&seq, &p, Some(&mask)).unwrap();
    assert_eq!(a.tokens, b.tokens);
}

#[test]
fn block_mask_counts() {
    // all-main sequence: nothing blocked
    let seq = tagged_seq(7, [2, 4, 0, 0, 0], 8);
    assert_eq!(build_block_mask(&seq.tags).blocked_count(), 0);
    // one condition segment of 3 tokens in a 10-token sequence
    let seq = tagged_seq(8, [3, 4, 3, 0, 0], 8);
    let mask = build_block_mask(&seq.tags);
    assert_eq!(mask.blocked_count(), 3 * 7);
    // diagonal never blocked
    for i in 0..10 {
        assert!(mask.allowed(i, i));
    }
}

#[test]
fn decoupled_equals_masked_full() {
    for (seed, lens, d, heads) in [
        (10u64, [2usize, 4, 3, 2, 1], 16usize, 4usize),
        (11, [1, 8, 4, 4, 4], 8, 1),
        (12, [0, 6, 5, 0, 3], 12, 2),
        (13, [3, 3, 0, 0, 0], 8, 2),
        (14, [2, 16, 17, 9, 5], 16, 4),
    ] {
        let p = AttentionParams::<f64>::init(&RngState::new(seed), d, heads).unwrap();
        let seq = tagged_seq(seed + 100, lens, d);
        let dec = decoupled_attention(&seq, &p).unwrap();
        let mask = build_block_mask(&seq.tags);
        let full = full_attention(&seq, &p, Some(&mask)).unwrap();
        let diff = max_abs_diff(&dec.tokens, &full.tokens);
        assert!(diff < 1e-9, "seed {seed}: diff {diff}");
    }
}

#[test]
fn decoupled_condition_outputs_ignore_noise_tokens() {
    let p = AttentionParams::<f64>::init(&RngState::new(20), 16, 4).unwrap();
    let seq = tagged_seq(21, [2, 4, 3, 2, 2], 16);
    let base = decoupled_attention(&seq, &p).unwrap();
    let mut poked = seq.clone();
    // perturb a NOISE token
    let noise_row = poked.segment_range(SegmentTag::Noise).start;
    poked.tokens.set(noise_row, 0, 123.456);
    let out = decoupled_attention(&poked, &p).unwrap();
    for tag in [SegmentTag::Style, SegmentTag::Subject, SegmentTag::Glyph] {
        assert_eq!(
            base.condition_rows(tag),
            out.condition_rows(tag),
            "{} changed",
            tag.name()
        );
    }
    // but the main stream must change (the pathway main -> conditions stays)
    assert_ne!(base.main_rows(), out.main_rows());
}

#[test]
fn full_and_decoupled_differ_when_conditions_present() {
    let p = AttentionParams::<f64>::init(&RngState::new(30), 16, 4).unwrap();
    let seq = tagged_seq(31, [2, 4, 3, 2, 2], 16);
    let full = full_attention(&seq, &p, None).unwrap();
    let dec = decoupled_attention(&seq, &p).unwrap();
    assert!(max_abs_diff(&full.tokens, &dec.tokens) > 1e-6);
    // degenerate case: no conditions -> identical
    let seq_main = tagged_seq(32, [2, 5, 0, 0, 0], 16);
    let full = full_attention(&seq_main, &p, None).unwrap();
    let dec = decoupled_attention(&seq_main, &p).unwrap();
    assert_eq!(full.tokens, dec.tokens);
}

fn blocks(seed: u64, d: usize, heads: usize, n: usize) -> Vec<LayerBlock<f64>> {
    (0..n)
        .map(|i| LayerBlock::init(&RngState::new(seed).fork(i as u64), d, heads).unwrap())
        .collect()
}

#[test]
fn attend_cached_equals_decoupled_and_detects_staleness() {
    let d = 16;
    let blks = blocks(40, d, 4, 1);
    let seq = tagged_seq(41, [2, 4, 3, 2, 2], d);
    let conds: Vec<DenseArray<f64>> = [SegmentTag::Style, SegmentTag::Subject, SegmentTag::Glyph]
        .iter()
        .map(|&t| {
            let r = seq.segment_range(t);
            let mut out = DenseArray::zeros(&[r.len(), d]);
            for (i, row) in r.clone().enumerate() {
                out.row_mut(i).copy_from_slice(seq.tokens.row(row));
            }
            out
        })
        .collect();
    let mut stats = RunStats::new();
    let cache = warm_cache(&conds, &blks, &mut stats).unwrap();
    assert_eq!(stats.condition_branch_execs, 1);

    // For the attend-level comparison the cache entries must be built from
    // the same per-layer inputs: layer 0's inputs are the raw segments.
    let p = &blks[0].attn;
    // decoupled path on a sequence whose conditions were normalized the same
    // way is not directly comparable through the block; instead compare the
    // op-level contract: cached attend output equals decoupled attend output
    // when the cache holds exactly the projections of the sequence segments.
    let mut hand_cache = LayerCache { conds: Vec::new() };
    for c in &conds {
        let cs = TokenSeq::uniform(c.clone(), SegmentTag::Style);
        let k = crate::arraymath::matmul(&cs.tokens, &p.wk).unwrap();
        let v = crate::arraymath::matmul(&cs.tokens, &p.wv).unwrap();
        let q = crate::arraymath::matmul(&cs.tokens, &p.wq).unwrap();
        let (ctx, _) = super::kernels::sdpa_forward(&q, &k, &v, p.heads, None);
        let o = crate::arraymath::matmul(&ctx, &p.wo).unwrap();
        hand_cache.conds.push(CondCacheEntry {
            input: c.clone(),
            k,
            v,
            o,
        });
    }
    let dec = attend(&seq, p, AttentionMode::Decoupled, None).unwrap();
    let cached = attend(&seq, p, AttentionMode::DecoupledCached, Some(&hand_cache)).unwrap();
    assert_eq!(dec.tokens, cached.tokens);

    // stale cache: change a condition token
    let mut stale = seq.clone();
    let r = stale.segment_range(SegmentTag::Glyph).start;
    stale.tokens.set(r, 0, -7.5);
    let err = attend(&stale, p, AttentionMode::DecoupledCached, Some(&hand_cache));
    assert!(matches!(err, Err(crate::Error::CacheInvalid(_))));

    // warm_cache is deterministic
    let mut stats2 = RunStats::new();
    let cache2 = warm_cache(&conds, &blks, &mut stats2).unwrap();
    assert_eq!(cache, cache2);
}

#[test]
fn cached_layer_is_bit_identical_to_decoupled_layer() {
    let d = 16;
    let blks = blocks(50, d, 4, 3);
    let main = arr(51, 6, d);
    let conds = vec![arr(52, 3, d), arr(53, 2, d), arr(54, 4, d)];
    let kept = vec![true, false, true];

    // uncached: run all layers carrying condition states
    let mut stats = RunStats::new();
    let mut m = main.clone();
    let mut cs = conds.clone();
    for b in &blks {
        let (m2, cs2, _tape) = decoupled_layer_forward(b, &m, &cs, &kept, &mut stats).unwrap();
        m = m2;
        cs = cs2;
    }
    assert_eq!(stats.condition_branch_execs, 3);

    // cached: warm once, then main-only steps
    let mut stats_c = RunStats::new();
    let cache = warm_cache(&conds, &blks, &mut stats_c).unwrap();
    let mut mc = main.clone();
    for (i, b) in blks.iter().enumerate() {
        mc = cached_layer_forward(b, &mc, &cache.layers[i], &kept, &mut stats_c).unwrap();
    }
    assert_eq!(stats_c.condition_branch_execs, 3);
    assert_eq!(m, mc);
}

#[test]
fn decoupled_layer_backward_matches_finite_difference() {
    let d = 8;
    let block = LayerBlock::<f64>::init(&RngState::new(60), d, 2).unwrap();
    let main = arr(61, 4, d);
    let conds = vec![arr(62, 2, d), arr(63, 3, d)];
    let kept = vec![true, false];
    let up_main = arr(64, 4, d);
    let up_c0 = arr(65, 2, d);
    let up_c1 = arr(66, 3, d);

    let loss = |m: &DenseArray<f64>, cs: &[DenseArray<f64>], b: &LayerBlock<f64>| -> f64 {
        let mut stats = RunStats::new();
        let (m2, cs2, _) = decoupled_layer_forward(b, m, cs, &kept, &mut stats).unwrap();
        let mut s: f64 = m2.data().iter().zip(up_main.data()).map(|(a, b)| a * b).sum();
        s += cs2[0].data().iter().zip(up_c0.data()).map(|(a, b)| a * b).sum::<f64>();
        s += cs2[1].data().iter().zip(up_c1.data()).map(|(a, b)| a * b).sum::<f64>();
        s
    };

    let mut stats = RunStats::new();
    let (_, _, tape) = decoupled_layer_forward(&block, &main, &conds, &kept, &mut stats).unwrap();
    let mut grads = block.zeros_like();
    let (d_main, d_conds) = decoupled_layer_backward(
        &block,
        &tape,
        &up_main,
        &[up_c0.clone(), up_c1.clone()],
        &mut grads,
    )
    .unwrap();

    let h = 1e-6;
    // input gradients
    for idx in [0usize, 13, 31] {
        let mut p = main.clone();
        p.data_mut()[idx] += h;
        let mut m_ = main.clone();
        m_.data_mut()[idx] -= h;
        let num = (loss(&p, &conds, &block) - loss(&m_, &conds, &block)) / (2.0 * h);
        assert!((d_main.data()[idx] - num).abs() < 1e-5, "main[{idx}]");
    }
    for idx in [0usize, 9] {
        let mut p = conds.clone();
        p[0].data_mut()[idx] += h;
        let mut m_ = conds.clone();
        m_[0].data_mut()[idx] -= h;
        let num = (loss(&main, &p, &block) - loss(&main, &m_, &block)) / (2.0 * h);
        assert!((d_conds[0].data()[idx] - num).abs() < 1e-5, "cond0[{idx}]");
    }
    // parameter gradients across groups
    let with = |f: &dyn Fn(&mut LayerBlock<f64>) -> &mut DenseArray<f64>, idx: usize, eps: f64| {
        let mut b = block.clone();
        f(&mut b).data_mut()[idx] += eps;
        loss(&main, &conds, &b)
    };
    let checks: Vec<(&str, Box<dyn Fn(&mut LayerBlock<f64>) -> &mut DenseArray<f64>>, &DenseArray<f64>, usize)> = vec![
        ("wq", Box::new(|b: &mut LayerBlock<f64>| &mut b.attn.wq), &grads.attn.wq, 5),
        ("wk", Box::new(|b: &mut LayerBlock<f64>| &mut b.attn.wk), &grads.attn.wk, 11),
        ("wv", Box::new(|b: &mut LayerBlock<f64>| &mut b.attn.wv), &grads.attn.wv, 17),
        ("wo", Box::new(|b: &mut LayerBlock<f64>| &mut b.attn.wo), &grads.attn.wo, 23),
        ("ffn_w1", Box::new(|b: &mut LayerBlock<f64>| &mut b.ffn_w1), &grads.ffn_w1, 40),
        ("ffn_b2", Box::new(|b: &mut LayerBlock<f64>| &mut b.ffn_b2), &grads.ffn_b2, 3),
        ("norm1_gamma", Box::new(|b: &mut LayerBlock<f64>| &mut b.norm1_gamma), &grads.norm1_gamma, 2),
        ("norm2_beta", Box::new(|b: &mut LayerBlock<f64>| &mut b.norm2_beta), &grads.norm2_beta, 4),
    ];
    for (label, get, gval, idx) in checks {
        let num = (with(&*get, idx, h) - with(&*get, idx, -h)) / (2.0 * h);
        assert!(
            (gval.data()[idx] - num).abs() < 1e-5,
            "{label}[{idx}]: analytic {} vs numeric {num}",
            gval.data()[idx]
        );
    }
}
