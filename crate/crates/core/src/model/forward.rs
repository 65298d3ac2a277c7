//! Bundle encoding and the three forward passes (decoupled with tape,
//! full, cached), plus the decoupled backward pass.

use super::{ModelConfig, Network};
use crate::arraymath::{
    col_sums, layer_norm_backward, layer_norm_fwd, matmul, matmul_nt, matmul_tn, DenseArray,
    Scalar,
};
use crate::attention::{
    cached_layer_forward, decoupled_layer_backward, decoupled_layer_forward, full_layer_forward,
    ConditionCache, DecoupledLayerTape, RunStats,
};
use crate::conditions::{
    build_style_tokens, build_subject_tokens, encode_prompt, mask_subject, patch_position_encoding,
    patchify, tfem_crop_features, tfem_crop_features_backward, tfem_fuse, tfem_fuse_backward,
    ConditionBundle, CropFeatureTape, SegmentTag, StyleMode, TfemFuseTape,
};
use crate::error::{Error, Result};
use crate::importance::RoutingSchedule;
use crate::synthdata::{BinImage, RgbImage};

const LN_EPS: f64 = 1e-6;

/// Lifts a binary image to RGB (ink = white) so the shared patch embedding
/// applies to glyph images too.
pub(crate) fn bin_to_rgb(img: &BinImage) -> RgbImage {
    let mut out = RgbImage::new(img.h, img.w);
    for y in 0..img.h {
        for x in 0..img.w {
            if img.get(y, x) == 1 {
                out.set_px(y, x, [255, 255, 255]);
            }
        }
    }
    out
}

/// Patch-grid positional table, one row per noise/image token.
pub(crate) fn patch_pe_table<T: Scalar>(cfg: &ModelConfig) -> DenseArray<T> {
    let g = cfg.image_size / cfg.patch;
    let mut out = DenseArray::zeros(&[g * g, cfg.dim]);
    for r in 0..g {
        for c in 0..g {
            out.row_mut(r * g + c)
                .copy_from_slice(patch_position_encoding::<T>(cfg.dim, r, c).data());
        }
    }
    out
}

/// Saved encoder activations for the backward pass.
#[derive(Clone, Debug)]
pub struct EncodeTape<T> {
    style_patches: Option<DenseArray<T>>,
    style_img_rows: usize,
    subject_patches: DenseArray<T>,
    glyph_patches: DenseArray<T>,
    crop_tape: CropFeatureTape<T>,
    fuse_tape: TfemFuseTape<T>,
}

/// Prompt tokens plus the three condition token blocks (style, subject,
/// glyph), positional codes already applied.
#[derive(Clone, Debug)]
pub struct EncodedBundle<T> {
    pub prompt: DenseArray<T>,
    pub conds: [DenseArray<T>; 3],
    pub tape: Option<EncodeTape<T>>,
}

/// Encodes every control input into the shared token space.
pub fn encode_bundle<T: Scalar>(
    net: &Network<T>,
    cfg: &ModelConfig,
    bundle: &ConditionBundle,
    prompt_salt: u64,
    with_tape: bool,
) -> Result<EncodedBundle<T>> {
    bundle.validate()?;
    let d = cfg.dim;
    let pe = patch_pe_table::<T>(cfg);
    let prompt =
        encode_prompt::<T>(&bundle.prompt, d, cfg.prompt_cap, prompt_salt, SegmentTag::Prompt)
            .tokens;

    // style
    let style_seq = build_style_tokens(
        bundle.style_mode,
        bundle.style_prompt.as_deref(),
        bundle.style_image.as_ref(),
        &net.anchor,
        cfg.patch,
        &net.patch_w,
        &net.patch_b,
        cfg.prompt_cap,
        prompt_salt,
    )?;
    let mut style = style_seq.tokens;
    let (style_patches, style_img_rows) = match bundle.style_mode {
        StyleMode::Image => {
            let img = bundle.style_image.as_ref().unwrap();
            let rows = cfg.noise_tokens();
            for r in 0..rows {
                let p = pe.row(r).to_vec();
                let row = style.row_mut(r);
                for (o, v) in row.iter_mut().zip(p) {
                    *o += v;
                }
            }
            (
                with_tape.then(|| patchify::<T>(img, cfg.patch)).transpose()?,
                rows,
            )
        }
        StyleMode::Prompt => (None, 0),
    };

    // subject
    let masked = mask_subject(&bundle.subject_image, &bundle.subject_mask)?;
    let subject_seq =
        build_subject_tokens(&bundle.subject_image, &bundle.subject_mask, cfg.patch, &net.patch_w, &net.patch_b)?;
    let mut subject = subject_seq.tokens;
    subject.add_assign(&pe);
    let subject_patches = if with_tape {
        patchify::<T>(&masked, cfg.patch)?
    } else {
        DenseArray::zeros(&[0, 0])
    };

    // glyph: whole-image branch plus crop features, fused
    let glyph_rgb = bin_to_rgb(&bundle.glyph_image);
    let glyph_patches_m = patchify::<T>(&glyph_rgb, cfg.patch)?;
    let mut c1 = matmul(&glyph_patches_m, &net.patch_w)?;
    crate::arraymath::add_bias_rows(&mut c1, &net.patch_b);
    c1.add_assign(&pe);
    let crops: &[crate::synthdata::GlyphCrop] = if cfg.use_crops { &bundle.crops } else { &[] };
    let (crop_feats, crop_tape) = tfem_crop_features(crops, &net.tfem)?;
    let (glyph, fuse_tape) = tfem_fuse(&c1, &crop_feats, &net.tfem)?;

    let tape = with_tape.then(|| EncodeTape {
        style_patches,
        style_img_rows,
        subject_patches,
        glyph_patches: glyph_patches_m,
        crop_tape,
        fuse_tape,
    });

    Ok(EncodedBundle {
        prompt,
        conds: [style, subject, glyph],
        tape,
    })
}

/// Backward through the encoders; accumulates into the gradient network.
pub fn encode_backward<T: Scalar>(
    net: &Network<T>,
    tape: &EncodeTape<T>,
    d_conds: &[DenseArray<T>; 3],
    grads: &mut Network<T>,
) {
    // style: image rows feed the patch embedding, anchor rows feed the
    // (frozen) anchor slot; prompt-mode style tokens are hashed constants
    if let Some(patches) = &tape.style_patches {
        let rows = tape.style_img_rows;
        let d_img = d_conds[0].slice_rows(0..rows);
        grads
            .patch_w
            .add_assign(&matmul_tn(patches, &d_img).unwrap());
        grads.patch_b.add_assign(&col_sums(&d_img));
        let d_anchor = d_conds[0].slice_rows(rows..d_conds[0].rows());
        grads.anchor.add_assign(&d_anchor);
    }

    // subject
    grads
        .patch_w
        .add_assign(&matmul_tn(&tape.subject_patches, &d_conds[1]).unwrap());
    grads.patch_b.add_assign(&col_sums(&d_conds[1]));

    // glyph: back through the fuse, the crop features, then the patch embed
    let mut tfem_grads = net.tfem.zeros_like();
    let (d_c1, d_c2) = tfem_fuse_backward(&d_conds[2], &tape.fuse_tape, &net.tfem, &mut tfem_grads);
    if d_c2.rows() > 0 {
        tfem_crop_features_backward(&d_c2, &tape.crop_tape, &net.tfem, &mut tfem_grads);
    }
    grads
        .patch_w
        .add_assign(&matmul_tn(&tape.glyph_patches, &d_c1).unwrap());
    grads.patch_b.add_assign(&col_sums(&d_c1));
    fold_tfem(&mut grads.tfem, &tfem_grads);
}

fn fold_tfem<T: Scalar>(into: &mut crate::conditions::TfemWeights<T>, from: &crate::conditions::TfemWeights<T>) {
    into.ocr_w1.add_assign(&from.ocr_w1);
    into.ocr_b1.add_assign(&from.ocr_b1);
    into.ocr_w2.add_assign(&from.ocr_w2);
    into.ocr_b2.add_assign(&from.ocr_b2);
    into.wq.add_assign(&from.wq);
    into.wk.add_assign(&from.wk);
    into.wv.add_assign(&from.wv);
    into.ffn_w1.add_assign(&from.ffn_w1);
    into.ffn_b1.add_assign(&from.ffn_b1);
    into.ffn_w2.add_assign(&from.ffn_w2);
    into.ffn_b2.add_assign(&from.ffn_b2);
    into.norm_gamma.add_assign(&from.norm_gamma);
    into.norm_beta.add_assign(&from.norm_beta);
    into.font_size.add_assign(&from.font_size);
}

/// Main-stream assembly: prompt rows, then noise tokens with the timestep
/// embedding and patch positional code added. Condition tokens never
/// receive the timestep embedding.
fn assemble_main<T: Scalar>(
    net: &Network<T>,
    cfg: &ModelConfig,
    prompt: &DenseArray<T>,
    x_t: &DenseArray<T>,
    t_index: usize,
) -> Result<DenseArray<T>> {
    if t_index >= cfg.steps {
        return Err(Error::contract(format!(
            "timestep index {t_index} outside 0..{}",
            cfg.steps
        )));
    }
    let pe = patch_pe_table::<T>(cfg);
    let mut noise = x_t.clone();
    noise.add_assign(&pe);
    let te = net.time_embed.row(t_index).to_vec();
    for r in 0..noise.rows() {
        let row = noise.row_mut(r);
        for (o, &v) in row.iter_mut().zip(&te) {
            *o += v;
        }
    }
    DenseArray::vstack(&[prompt, &noise])
}

fn kept_at(schedule: Option<&RoutingSchedule>, layer: usize, t_index: usize) -> [bool; 3] {
    schedule.map_or([true; 3], |s| s.kept_at(layer, t_index))
}

/// Saved activations of one decoupled forward pass.
pub struct ForwardTape<T> {
    layer_tapes: Vec<DecoupledLayerTape<T>>,
    final_xhat: DenseArray<T>,
    final_rstd: Vec<T>,
    final_a: DenseArray<T>,
    lp: usize,
    lz: usize,
    t_index: usize,
}

fn readout<T: Scalar>(
    net: &Network<T>,
    main: &DenseArray<T>,
    lp: usize,
) -> Result<(DenseArray<T>, DenseArray<T>, Vec<T>, DenseArray<T>)> {
    let noise = main.slice_rows(lp..main.rows());
    let (a, xhat, rstd) = layer_norm_fwd(&noise, &net.final_gamma, &net.final_beta, LN_EPS)?;
    let mut v = matmul(&a, &net.readout_w)?;
    crate::arraymath::add_bias_rows(&mut v, &net.readout_b);
    Ok((v, xhat, rstd, a))
}

/// Decoupled forward: per layer, condition streams self-attend and evolve
/// (independently of the schedule), the main stream attends over its own
/// keys plus the conditions kept at (layer, t). Returns the per-noise-token
/// velocity prediction.
pub fn forward_decoupled<T: Scalar>(
    net: &Network<T>,
    cfg: &ModelConfig,
    encoded: &EncodedBundle<T>,
    x_t: &DenseArray<T>,
    t_index: usize,
    schedule: Option<&RoutingSchedule>,
    stats: &mut RunStats,
    with_tape: bool,
) -> Result<(DenseArray<T>, Option<ForwardTape<T>>)> {
    if let Some(s) = schedule {
        s.check_dims(cfg.layers, cfg.steps)?;
    }
    let lp = encoded.prompt.rows();
    let lz = x_t.rows();
    let mut main = assemble_main(net, cfg, &encoded.prompt, x_t, t_index)?;
    let mut conds: Vec<DenseArray<T>> = encoded.conds.to_vec();
    let mut tapes = Vec::with_capacity(cfg.layers);
    for (b, block) in net.layers.iter().enumerate() {
        let kept = kept_at(schedule, b, t_index);
        let (m2, c2, tape) = decoupled_layer_forward(block, &main, &conds, &kept, stats)?;
        main = m2;
        conds = c2;
        if with_tape {
            tapes.push(tape);
        }
    }
    let (v, xhat, rstd, a) = readout(net, &main, lp)?;
    let tape = with_tape.then_some(ForwardTape {
        layer_tapes: tapes,
        final_xhat: xhat,
        final_rstd: rstd,
        final_a: a,
        lp,
        lz,
        t_index,
    });
    Ok((v, tape))
}

/// Backward of [`forward_decoupled`]. Returns the gradient on `x_t` and on
/// the three encoded condition blocks.
pub fn backward_decoupled<T: Scalar>(
    net: &Network<T>,
    tape: &ForwardTape<T>,
    d_velocity: &DenseArray<T>,
    grads: &mut Network<T>,
) -> Result<(DenseArray<T>, [DenseArray<T>; 3])> {
    // readout tail
    grads
        .readout_w
        .add_assign(&matmul_tn(&tape.final_a, d_velocity).unwrap());
    grads.readout_b.add_assign(&col_sums(d_velocity));
    let d_a = matmul_nt(d_velocity, &net.readout_w).unwrap();
    let d_noise_final = layer_norm_backward(
        &d_a,
        &tape.final_xhat,
        &tape.final_rstd,
        &net.final_gamma,
        &mut grads.final_gamma,
        &mut grads.final_beta,
    );
    let d = d_noise_final.cols();
    let mut d_main = DenseArray::zeros(&[tape.lp + tape.lz, d]);
    for r in 0..tape.lz {
        d_main
            .row_mut(tape.lp + r)
            .copy_from_slice(d_noise_final.row(r));
    }
    let mut d_conds: Vec<DenseArray<T>> = tape.layer_tapes[tape.layer_tapes.len() - 1]
        .cond_output_shapes()
        .iter()
        .map(|s| DenseArray::zeros(s))
        .collect();

    for (b, lt) in tape.layer_tapes.iter().enumerate().rev() {
        let (dm, dc) = decoupled_layer_backward(&net.layers[b], lt, &d_main, &d_conds, &mut grads.layers[b])?;
        d_main = dm;
        d_conds = dc;
    }

    // gradient into the noisy latent tokens; the timestep embedding was
    // broadcast onto every noise row
    let d_noise_in = d_main.slice_rows(tape.lp..tape.lp + tape.lz);
    {
        let w = grads.time_embed.cols();
        let sums = col_sums(&d_noise_in);
        let row = grads.time_embed.row_mut(tape.t_index);
        for j in 0..w {
            row[j] += sums.data()[j];
        }
    }
    let d_x_t = d_noise_in;
    let dc: [DenseArray<T>; 3] = [
        d_conds[0].clone(),
        d_conds[1].clone(),
        d_conds[2].clone(),
    ];
    Ok((d_x_t, dc))
}

/// Joint full-attention forward (baseline). At each layer, the kept
/// condition segments join the main stream in one attention pass and are
/// updated by it; omitted segments skip the layer. Optionally records the
/// post-softmax probabilities of every layer (all-keep sequences only).
pub fn forward_full<T: Scalar>(
    net: &Network<T>,
    cfg: &ModelConfig,
    encoded: &EncodedBundle<T>,
    x_t: &DenseArray<T>,
    t_index: usize,
    schedule: Option<&RoutingSchedule>,
    stats: &mut RunStats,
    record_probs: bool,
) -> Result<(DenseArray<T>, Vec<Option<Vec<DenseArray<T>>>>)> {
    if let Some(s) = schedule {
        s.check_dims(cfg.layers, cfg.steps)?;
    }
    let lp = encoded.prompt.rows();
    let mut main = assemble_main(net, cfg, &encoded.prompt, x_t, t_index)?;
    let mut conds: Vec<DenseArray<T>> = encoded.conds.to_vec();
    let mut probs_per_layer = Vec::with_capacity(cfg.layers);
    for (b, block) in net.layers.iter().enumerate() {
        let kept = kept_at(schedule, b, t_index);
        let mut parts: Vec<&DenseArray<T>> = vec![&main];
        for (i, c) in conds.iter().enumerate() {
            if kept[i] {
                parts.push(c);
            }
        }
        let assembled = DenseArray::vstack(&parts)?;
        let (out, probs) = full_layer_forward(block, &assembled, None, record_probs)?;
        stats.main_attention_execs += 1;
        // scatter back
        let mut offset = main.rows();
        main = out.slice_rows(0..offset);
        for (i, c) in conds.iter_mut().enumerate() {
            if kept[i] {
                let rows = c.rows();
                *c = out.slice_rows(offset..offset + rows);
                offset += rows;
            }
        }
        probs_per_layer.push(probs);
    }
    let (v, _, _, _) = readout(net, &main, lp)?;
    Ok((v, probs_per_layer))
}

/// Main-stream-only forward against a warmed condition cache.
pub fn forward_cached<T: Scalar>(
    net: &Network<T>,
    cfg: &ModelConfig,
    encoded: &EncodedBundle<T>,
    x_t: &DenseArray<T>,
    t_index: usize,
    schedule: Option<&RoutingSchedule>,
    cache: &ConditionCache<T>,
    stats: &mut RunStats,
) -> Result<DenseArray<T>> {
    if let Some(s) = schedule {
        s.check_dims(cfg.layers, cfg.steps)?;
    }
    if !cache.matches(&encoded.conds) {
        return Err(Error::CacheInvalid(
            "condition tokens do not match the warmed cache".into(),
        ));
    }
    let lp = encoded.prompt.rows();
    let mut main = assemble_main(net, cfg, &encoded.prompt, x_t, t_index)?;
    for (b, block) in net.layers.iter().enumerate() {
        let kept = kept_at(schedule, b, t_index);
        main = cached_layer_forward(block, &main, &cache.layers[b], &kept, stats)?;
    }
    let (v, _, _, _) = readout(net, &main, lp)?;
    Ok(v)
}
