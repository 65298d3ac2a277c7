//! Attention capture on a trained model: full-sequence post-softmax
//! probabilities per (layer, timestep), and their reduction to the
//! importance map. Analysis runs in f64 regardless of training precision.

use super::{build_condition_mask, compute_importance, masked_mean, ConditionMask, ImportanceMap};
use crate::arraymath::{draw_normal, DenseArray, RngState};
use crate::attention::RunStats;
use crate::conditions::{ConditionBundle, SegmentTag, CONDITION_TAGS};
use crate::error::{Error, Result};
use crate::model::{encode_bundle, forward_full, ModelParams, Network};
use crate::synthdata::{BinImage, PosterSample};

/// Post-softmax attention of one layer at one timestep: one probability
/// matrix per head over the full tagged sequence.
#[derive(Clone, Debug)]
pub struct AttentionCapture {
    pub probs: Vec<DenseArray<f64>>,
    pub tags: Vec<SegmentTag>,
    pub layer: usize,
    pub t_index: usize,
}

impl AttentionCapture {
    pub fn heads(&self) -> usize {
        self.probs.len()
    }

    pub fn seq_len(&self) -> usize {
        self.tags.len()
    }
}

fn sequence_tags(lp: usize, lz: usize, conds: &[usize; 3]) -> Vec<SegmentTag> {
    let mut tags = Vec::with_capacity(lp + lz + conds.iter().sum::<usize>());
    tags.extend(std::iter::repeat(SegmentTag::Prompt).take(lp));
    tags.extend(std::iter::repeat(SegmentTag::Noise).take(lz));
    for (i, &tag) in CONDITION_TAGS.iter().enumerate() {
        tags.extend(std::iter::repeat(tag).take(conds[i]));
    }
    tags
}

/// True for every patch that contains at least one foreground pixel.
pub(crate) fn patch_foreground(img: &BinImage, patch: usize) -> Vec<bool> {
    let (gh, gw) = (img.h / patch, img.w / patch);
    let mut out = vec![false; gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            'cell: for py in 0..patch {
                for px in 0..patch {
                    if img.get(gy * patch + py, gx * patch + px) == 1 {
                        out[gy * gw + gx] = true;
                        break 'cell;
                    }
                }
            }
        }
    }
    out
}

struct CaptureRun {
    probs_per_layer: Vec<Vec<DenseArray<f64>>>,
    tags: Vec<SegmentTag>,
}

/// One full-attention forward at timestep `t_index` with all condition
/// tokens present, recording every layer's probabilities.
fn run_capture_forward(
    net: &Network<f64>,
    params: &ModelParams<f32>,
    sample: &PosterSample,
    noise_seed: u64,
    t_index: usize,
) -> Result<CaptureRun> {
    let cfg = &params.config;
    let bundle = ConditionBundle::from_sample(sample);
    let encoded = encode_bundle(net, cfg, &bundle, params.prompt_salt, false)?;
    let lz = cfg.noise_tokens();
    // noisy latent at the requested step
    let patches = crate::conditions::patchify::<f64>(&sample.poster, cfg.patch)?;
    let mut x0 = crate::arraymath::matmul(&patches, &net.patch_w)?;
    crate::arraymath::add_bias_rows(&mut x0, &net.patch_b);
    let mut rng = RngState::new(noise_seed).fork(sample.seed);
    let eps = draw_normal::<f64>(&mut rng, lz * cfg.dim)
        .reshape(vec![lz, cfg.dim])
        .unwrap();
    let t = (t_index + 1) as f64 / cfg.steps as f64;
    let mut x_t = x0.scale(1.0 - t);
    x_t.add_scaled(t, &eps);

    let mut stats = RunStats::new();
    let (_, probs) = forward_full(net, cfg, &encoded, &x_t, t_index, None, &mut stats, true)?;
    let probs_per_layer: Vec<Vec<DenseArray<f64>>> = probs
        .into_iter()
        .map(|p| p.expect("probabilities recorded"))
        .collect();
    let cond_lens = [
        encoded.conds[0].rows(),
        encoded.conds[1].rows(),
        encoded.conds[2].rows(),
    ];
    Ok(CaptureRun {
        probs_per_layer,
        tags: sequence_tags(encoded.prompt.rows(), lz, &cond_lens),
    })
}

/// Records the post-softmax attention of `layer` at timestep `t_index`
/// over the full sequence, for one sample of the analysis batch.
pub fn capture_attention(
    params: &ModelParams<f32>,
    sample: &PosterSample,
    noise_seed: u64,
    layer: usize,
    t_index: usize,
) -> Result<AttentionCapture> {
    let cfg = &params.config;
    if layer >= cfg.layers || t_index >= cfg.steps {
        return Err(Error::contract(format!(
            "capture at layer {layer}, step {t_index} outside {}x{}",
            cfg.layers, cfg.steps
        )));
    }
    let params64 = params.cast::<f64>();
    let net = Network::from_params(&params64);
    let run = run_capture_forward(&net, params, sample, noise_seed, t_index)?;
    Ok(AttentionCapture {
        probs: run.probs_per_layer[layer].clone(),
        tags: run.tags,
        layer,
        t_index,
    })
}

/// Full analysis: every (layer, timestep) cell over every sample, masked
/// per condition and averaged into the importance map.
pub fn compute_importance_for_model(
    params: &ModelParams<f32>,
    samples: &[PosterSample],
    noise_seed: u64,
) -> Result<ImportanceMap> {
    if samples.is_empty() {
        return Err(Error::contract("importance analysis needs samples"));
    }
    let cfg = &params.config;
    let params64 = params.cast::<f64>();
    let net = Network::from_params(&params64);
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let subject_fg = patch_foreground(&s.subject_mask, cfg.patch);
        let glyph_fg = patch_foreground(&s.glyph_image, cfg.patch);
        let mut cells = vec![vec![[0.0f64; 3]; cfg.steps]; cfg.layers];
        let mut masks: Option<[ConditionMask; 3]> = None;
        for t_index in 0..cfg.steps {
            let run = run_capture_forward(&net, params, s, noise_seed, t_index)?;
            let masks = masks.get_or_insert_with(|| {
                [
                    build_condition_mask(&run.tags, SegmentTag::Style, None).unwrap(),
                    build_condition_mask(&run.tags, SegmentTag::Subject, Some(&subject_fg))
                        .unwrap(),
                    build_condition_mask(&run.tags, SegmentTag::Glyph, Some(&glyph_fg)).unwrap(),
                ]
            });
            for (b, probs) in run.probs_per_layer.iter().enumerate() {
                for c in 0..3 {
                    cells[b][t_index][c] = masked_mean(probs, &masks[c]);
                }
            }
        }
        per_sample.push(cells);
    }
    compute_importance(&per_sample, &cfg.fingerprint())
}
