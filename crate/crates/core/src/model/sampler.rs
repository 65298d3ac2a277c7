//! Euler sampling of the rectified-flow model on the discrete grid
//! t = 1, (T-1)/T, ..., 1/T, then linear pixel decoding.

use super::forward::{encode_bundle, forward_cached, forward_decoupled, forward_full};
use super::{ModelConfig, ModelParams, Network};
use crate::arraymath::{draw_normal, lit, DenseArray, RngState};
use crate::attention::{warm_cache, AttentionMode, ConditionCache, RunStats};
use crate::conditions::{unpatchify, ConditionBundle};
use crate::error::{Error, Result};
use crate::synthdata::RgbImage;

/// Continuous time for a step index (the grid is (0, 1]).
pub fn timestep_value(cfg: &ModelConfig, t_index: usize) -> f64 {
    (t_index + 1) as f64 / cfg.steps as f64
}

/// Draws a step index from a cumulative distribution (stage-II sampling).
pub fn sample_timestep_index(cdf: &[f64], rng: &mut RngState) -> usize {
    super::train::pick_from_cdf(cdf, rng.uniform())
}

fn decode_image(net: &Network<f32>, cfg: &ModelConfig, x: &DenseArray<f32>) -> Result<RgbImage> {
    let mut pixels = crate::arraymath::matmul(x, &net.dec_w)?;
    crate::arraymath::add_bias_rows(&mut pixels, &net.dec_b);
    unpatchify(&pixels, cfg.image_size, cfg.image_size, cfg.patch)
}

/// Generates one image. `schedule = None` keeps every condition slot.
/// The condition cache for `DecoupledCached` is warmed internally.
pub fn sample(
    params: &ModelParams<f32>,
    bundle: &ConditionBundle,
    mode: AttentionMode,
    schedule: Option<&crate::importance::RoutingSchedule>,
    seed: u64,
    stats: &mut RunStats,
) -> Result<RgbImage> {
    let net = Network::from_params(params);
    let cfg = &params.config;
    let encoded = encode_bundle(&net, cfg, bundle, params.prompt_salt, false)?;
    let cache = match mode {
        AttentionMode::DecoupledCached => Some(warm_cache(&encoded.conds, &net.layers, stats)?),
        _ => None,
    };
    sample_loop(&net, cfg, &encoded, mode, schedule, cache.as_ref(), seed, stats)
}

/// As [`sample`], but against a caller-provided cache; errors if the cache
/// no longer matches the bundle's condition tokens.
pub fn sample_with_cache(
    params: &ModelParams<f32>,
    bundle: &ConditionBundle,
    schedule: Option<&crate::importance::RoutingSchedule>,
    cache: &ConditionCache<f32>,
    seed: u64,
    stats: &mut RunStats,
) -> Result<RgbImage> {
    let net = Network::from_params(params);
    let cfg = &params.config;
    let encoded = encode_bundle(&net, cfg, bundle, params.prompt_salt, false)?;
    if !cache.matches(&encoded.conds) {
        return Err(Error::CacheInvalid(
            "condition tokens changed since the cache was warmed".into(),
        ));
    }
    sample_loop(
        &net,
        cfg,
        &encoded,
        AttentionMode::DecoupledCached,
        schedule,
        Some(cache),
        seed,
        stats,
    )
}

#[allow(clippy::too_many_arguments)]
fn sample_loop(
    net: &Network<f32>,
    cfg: &ModelConfig,
    encoded: &super::EncodedBundle<f32>,
    mode: AttentionMode,
    schedule: Option<&crate::importance::RoutingSchedule>,
    cache: Option<&ConditionCache<f32>>,
    seed: u64,
    stats: &mut RunStats,
) -> Result<RgbImage> {
    let lz = cfg.noise_tokens();
    let mut rng = RngState::new(seed);
    let mut x = draw_normal::<f32>(&mut rng, lz * cfg.dim)
        .reshape(vec![lz, cfg.dim])
        .unwrap();
    let dt = lit::<f32>(1.0 / cfg.steps as f64);
    for k in 0..cfg.steps {
        let t_index = cfg.steps - 1 - k;
        let v = match mode {
            AttentionMode::Full => {
                forward_full(net, cfg, encoded, &x, t_index, schedule, stats, false)?.0
            }
            AttentionMode::Decoupled => {
                forward_decoupled(net, cfg, encoded, &x, t_index, schedule, stats, false)?.0
            }
            AttentionMode::DecoupledCached => {
                let c = cache.ok_or_else(|| {
                    Error::contract("cached sampling requires a warmed cache")
                })?;
                forward_cached(net, cfg, encoded, &x, t_index, schedule, c, stats)?
            }
        };
        x.add_scaled(-dt, &v);
    }
    decode_image(net, cfg, &x)
}
