//! Toy evaluation metrics: subject-region MSE, glyph pixel accuracy, and
//! background palette distance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use super::{sample, ModelParams};
use crate::arraymath::RngState;
use crate::attention::{AttentionMode, RunStats};
use crate::conditions::ConditionBundle;
use crate::error::{Error, Result};
use crate::importance::RoutingSchedule;
use crate::synthdata::{PosterSample, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean squared pixel error inside the subject mask, unit scale.
    pub subject_mse: f64,
    /// Fraction of glyph-foreground pixels rendered nearer the text color
    /// than any background palette color.
    pub glyph_accuracy: f64,
    /// L1 distance between 16-bin per-channel histograms of the generated
    /// background and the style image.
    pub palette_distance: f64,
}

fn dist2(a: [u8; 3], b: [u8; 3]) -> f64 {
    let mut s = 0.0;
    for c in 0..3 {
        let d = a[c] as f64 - b[c] as f64;
        s += d * d;
    }
    s
}

/// Metrics of one candidate image against its ground-truth sample. The
/// text color and background palette are read off the sample itself.
pub fn metrics_for_image(gen: &RgbImage, sample: &PosterSample) -> EvalMetrics {
    let (h, w) = (sample.poster.h, sample.poster.w);

    // subject-region MSE in unit scale
    let mut mse = 0.0;
    let mut mask_px = 0usize;
    for y in 0..h {
        for x in 0..w {
            if sample.subject_mask.get(y, x) == 1 {
                let a = gen.px(y, x);
                let b = sample.poster.px(y, x);
                for c in 0..3 {
                    let d = (a[c] as f64 - b[c] as f64) / 255.0;
                    mse += d * d;
                }
                mask_px += 1;
            }
        }
    }
    let subject_mse = if mask_px == 0 { 0.0 } else { mse / (3 * mask_px) as f64 };

    // background palette = every color the style image realizes
    let style_colors: BTreeSet<[u8; 3]> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| sample.style_image.px(y, x))
        .collect();

    // text color as stamped on the poster
    let mut text_color = [255u8; 3];
    'find: for y in 0..h {
        for x in 0..w {
            if sample.glyph_image.get(y, x) == 1 {
                text_color = sample.poster.px(y, x);
                break 'find;
            }
        }
    }

    let mut glyph_total = 0usize;
    let mut glyph_hits = 0usize;
    for y in 0..h {
        for x in 0..w {
            if sample.glyph_image.get(y, x) == 1 {
                glyph_total += 1;
                let px = gen.px(y, x);
                let d_text = dist2(px, text_color);
                let d_bg = style_colors
                    .iter()
                    .map(|&c| dist2(px, c))
                    .fold(f64::INFINITY, f64::min);
                if d_text < d_bg {
                    glyph_hits += 1;
                }
            }
        }
    }
    let glyph_accuracy = if glyph_total == 0 {
        1.0
    } else {
        glyph_hits as f64 / glyph_total as f64
    };

    // 16-bin per-channel histograms: generated background vs style image
    let mut gen_hist = [[0f64; 16]; 3];
    let mut gen_count = 0f64;
    let mut style_hist = [[0f64; 16]; 3];
    let style_count = (h * w) as f64;
    for y in 0..h {
        for x in 0..w {
            let s = sample.style_image.px(y, x);
            for c in 0..3 {
                style_hist[c][(s[c] / 16) as usize] += 1.0;
            }
            if sample.subject_mask.get(y, x) == 0 && sample.glyph_image.get(y, x) == 0 {
                let g = gen.px(y, x);
                for c in 0..3 {
                    gen_hist[c][(g[c] / 16) as usize] += 1.0;
                }
                gen_count += 1.0;
            }
        }
    }
    let mut palette_distance = 0.0;
    if gen_count > 0.0 {
        for c in 0..3 {
            for b in 0..16 {
                palette_distance +=
                    (gen_hist[c][b] / gen_count - style_hist[c][b] / style_count).abs();
            }
        }
    }

    EvalMetrics {
        subject_mse,
        glyph_accuracy,
        palette_distance,
    }
}

/// Samples every evaluation item (noise seed paired to the sample seed so
/// different modes/schedules see identical noise) and averages the metrics.
pub fn evaluate(
    params: &ModelParams<f32>,
    samples: &[PosterSample],
    mode: AttentionMode,
    schedule: Option<&RoutingSchedule>,
    eval_seed: u64,
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    let per: Vec<Result<EvalMetrics>> = samples
        .par_iter()
        .map(|s| {
            let bundle = ConditionBundle::from_sample(s);
            let noise_seed = RngState::new(eval_seed).fork(s.seed).seed();
            let mut stats = RunStats::new();
            let img = sample(params, &bundle, mode, schedule, noise_seed, &mut stats)?;
            Ok(metrics_for_image(&img, s))
        })
        .collect();
    let mut acc = EvalMetrics {
        subject_mse: 0.0,
        glyph_accuracy: 0.0,
        palette_distance: 0.0,
    };
    for m in per {
        let m = m?;
        acc.subject_mse += m.subject_mse;
        acc.glyph_accuracy += m.glyph_accuracy;
        acc.palette_distance += m.palette_distance;
    }
    let n = samples.len() as f64;
    Ok(EvalMetrics {
        subject_mse: acc.subject_mse / n,
        glyph_accuracy: acc.glyph_accuracy / n,
        palette_distance: acc.palette_distance / n,
    })
}
