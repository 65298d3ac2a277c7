//! Flow-matching training: per-sample loss with hand-written gradients,
//! Adam updates, and the two-stage procedure (full conditioning first,
//! pruned fine-tuning second).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{backward_decoupled, encode_backward, encode_bundle, forward_decoupled};
use super::{EvalMetrics, ModelConfig, ModelParams, Network};
use crate::arraymath::{draw_normal, lit, DenseArray, ParamStore, RngState, Scalar};
use crate::attention::RunStats;
use crate::conditions::ConditionBundle;
use crate::error::{Error, Result};
use crate::importance::{timestep_weights, ImportanceMap, RoutingSchedule};
use crate::synthdata::PosterSample;

/// One training step's loss components. The reported total is what the
/// optimizer minimizes: the velocity MSE plus the pixel reconstruction MSE
/// that trains the patch embedding / pixel decoder pair.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub flow: f64,
    pub recon: f64,
}

/// The continuous time value for a discrete step index (grid (0, 1]).
pub fn grid_time(cfg: &ModelConfig, t_index: usize) -> f64 {
    (t_index + 1) as f64 / cfg.steps as f64
}

/// Loss of one sample at one timestep, without gradients.
pub fn step_loss_only<T: Scalar>(
    net: &Network<T>,
    cfg: &ModelConfig,
    prompt_salt: u64,
    sample: &PosterSample,
    t_index: usize,
    eps: &DenseArray<T>,
    schedule: Option<&RoutingSchedule>,
) -> Result<StepLoss> {
    let bundle = ConditionBundle::from_sample(sample);
    let encoded = encode_bundle(net, cfg, &bundle, prompt_salt, false)?;
    let (x0, patches) = embed_poster(net, cfg, sample)?;
    let (x_t, v_target) = noisy_input(cfg, &x0, eps, t_index);
    let mut stats = RunStats::new();
    let (v_pred, _) = forward_decoupled(net, cfg, &encoded, &x_t, t_index, schedule, &mut stats, false)?;
    let flow = mse(&v_pred, &v_target);
    let recon = recon_loss(net, &x0, &patches).0;
    Ok(StepLoss {
        total: flow + recon,
        flow,
        recon,
    })
}

/// Loss of one sample at one timestep, with analytic gradients accumulated
/// into `grads`.
pub fn step_loss_and_grads<T: Scalar>(
    net: &Network<T>,
    cfg: &ModelConfig,
    prompt_salt: u64,
    sample: &PosterSample,
    t_index: usize,
    eps: &DenseArray<T>,
    schedule: Option<&RoutingSchedule>,
    grads: &mut Network<T>,
    stats: &mut RunStats,
) -> Result<StepLoss> {
    let bundle = ConditionBundle::from_sample(sample);
    let encoded = encode_bundle(net, cfg, &bundle, prompt_salt, true)?;
    let (x0, patches) = embed_poster(net, cfg, sample)?;
    let (x_t, v_target) = noisy_input(cfg, &x0, eps, t_index);
    let (v_pred, tape) =
        forward_decoupled(net, cfg, &encoded, &x_t, t_index, schedule, stats, true)?;
    let tape = tape.expect("tape requested");

    let n_flow = (v_pred.len()) as f64;
    let mut diff = v_pred.clone();
    diff.add_scaled(-T::one(), &v_target);
    let flow = diff.data().iter().map(|&x| (x * x).to_f64().unwrap()).sum::<f64>() / n_flow;
    let d_v_pred = diff.scale(lit::<T>(2.0 / n_flow));

    let (d_x_t, d_conds) = backward_decoupled(net, &tape, &d_v_pred, grads)?;
    encode_backward(net, tape_ref(&encoded), &d_conds, grads);

    // x0 receives gradient from three paths: the forward input
    // x_t = (1 - t) x0 + t eps, the target v = eps - x0, and the pixel
    // reconstruction term.
    let t_val = lit::<T>(grid_time(cfg, t_index));
    let mut d_x0 = d_x_t.scale(T::one() - t_val);
    d_x0.add_assign(&d_v_pred); // d(target) path: dL/dv_target = -d_v_pred, dv_target/dx0 = -1

    let (recon, d_x0_recon) = recon_loss_grad(net, &x0, &patches, grads);
    d_x0.add_assign(&d_x0_recon);

    grads
        .patch_w
        .add_assign(&crate::arraymath::matmul_tn(&patches, &d_x0).unwrap());
    grads.patch_b.add_assign(&crate::arraymath::col_sums(&d_x0));

    Ok(StepLoss {
        total: flow + recon,
        flow,
        recon,
    })
}

fn tape_ref<T: Scalar>(encoded: &super::EncodedBundle<T>) -> &super::forward::EncodeTape<T> {
    encoded.tape.as_ref().expect("encode tape requested")
}

/// Poster tokens x0 = patch embedding of the target image.
fn embed_poster<T: Scalar>(
    net: &Network<T>,
    cfg: &ModelConfig,
    sample: &PosterSample,
) -> Result<(DenseArray<T>, DenseArray<T>)> {
    let patches = crate::conditions::patchify::<T>(&sample.poster, cfg.patch)?;
    let mut x0 = crate::arraymath::matmul(&patches, &net.patch_w)?;
    crate::arraymath::add_bias_rows(&mut x0, &net.patch_b);
    Ok((x0, patches))
}

/// x_t = (1 - t) x0 + t eps and the straight-line velocity target eps - x0.
fn noisy_input<T: Scalar>(
    cfg: &ModelConfig,
    x0: &DenseArray<T>,
    eps: &DenseArray<T>,
    t_index: usize,
) -> (DenseArray<T>, DenseArray<T>) {
    let t = lit::<T>(grid_time(cfg, t_index));
    let mut x_t = x0.scale(T::one() - t);
    x_t.add_scaled(t, eps);
    let mut v = eps.clone();
    v.add_scaled(-T::one(), x0);
    (x_t, v)
}

fn mse<T: Scalar>(a: &DenseArray<T>, b: &DenseArray<T>) -> f64 {
    let n = a.len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64().unwrap();
            d * d
        })
        .sum::<f64>()
        / n
}

fn recon_loss<T: Scalar>(net: &Network<T>, x0: &DenseArray<T>, patches: &DenseArray<T>) -> (f64, DenseArray<T>) {
    let mut decoded = crate::arraymath::matmul(x0, &net.dec_w).unwrap();
    crate::arraymath::add_bias_rows(&mut decoded, &net.dec_b);
    let mut diff = decoded;
    diff.add_scaled(-T::one(), patches);
    let n = diff.len() as f64;
    let loss = diff.data().iter().map(|&x| (x * x).to_f64().unwrap()).sum::<f64>() / n;
    (loss, diff)
}

fn recon_loss_grad<T: Scalar>(
    net: &Network<T>,
    x0: &DenseArray<T>,
    patches: &DenseArray<T>,
    grads: &mut Network<T>,
) -> (f64, DenseArray<T>) {
    let (loss, diff) = recon_loss(net, x0, patches);
    let d_decoded = diff.scale(lit::<T>(2.0 / diff.len() as f64));
    grads
        .dec_w
        .add_assign(&crate::arraymath::matmul_tn(x0, &d_decoded).unwrap());
    grads.dec_b.add_assign(&crate::arraymath::col_sums(&d_decoded));
    let d_x0 = crate::arraymath::matmul_nt(&d_decoded, &net.dec_w).unwrap();
    (loss, d_x0)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with fixed hyperparameters (beta1 0.9, beta2 0.999, eps 1e-8).
/// Frozen store entries are skipped.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, e) in store.iter() {
            m.insert(name.clone(), vec![0.0; e.value.len()]);
            v.insert(name.clone(), vec![0.0; e.value.len()]);
        }
        Self { m, v, step: 0 }
    }

    pub fn update(&mut self, store: &mut ParamStore<f32>, lr: f32) {
        self.step += 1;
        let b1 = 0.9f32;
        let b2 = 0.999f32;
        let eps = 1e-8f32;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, entry) in store.iter_mut() {
            if entry.frozen {
                continue;
            }
            let m = self.m.get_mut(name).expect("adam slot");
            let v = self.v.get_mut(name).expect("adam slot");
            let g = entry.grad.data();
            let val = entry.value.data_mut();
            for i in 0..val.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                val[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training stages
// ---------------------------------------------------------------------------

/// Per-run record written next to every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: u8,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub wall_seconds: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
    pub eval: Option<EvalMetrics>,
}

fn draw_batch_element(
    rng: &RngState,
    step: usize,
    element: usize,
    dataset_len: usize,
    t_cdf: Option<&[f64]>,
    steps: usize,
) -> (usize, usize, RngState) {
    let mut r = rng.fork(step as u64).fork(element as u64);
    let sample_idx = r.range(dataset_len);
    let t_index = match t_cdf {
        None => r.range(steps),
        Some(cdf) => pick_from_cdf(cdf, r.uniform()),
    };
    (sample_idx, t_index, r.fork(0xE95))
}

pub(crate) fn pick_from_cdf(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

fn cdf_from_weights(w: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    w.iter()
        .map(|&x| {
            acc += x;
            acc
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    params: &mut ModelParams<f32>,
    dataset: &[PosterSample],
    steps: usize,
    lr: f32,
    schedule: Option<&RoutingSchedule>,
    t_weights: Option<&[f64]>,
    stage: u8,
    snapshot_dir: Option<&Path>,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::contract("training needs a non-empty dataset"));
    }
    let cfg = params.config.clone();
    let lz = cfg.noise_tokens();
    let d = cfg.dim;
    let rng = RngState::new(cfg.train_seed).fork(stage as u64);
    let t_cdf = t_weights.map(cdf_from_weights);
    let mut adam = AdamState::new(&params.store);
    let mut losses = Vec::with_capacity(steps);
    let start = Instant::now();

    for step in 0..steps {
        let net = Network::from_params(params);
        let salt = params.prompt_salt;
        let results: Vec<Result<(StepLoss, Network<f32>)>> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|element| {
                let (sample_idx, t_index, mut er) = draw_batch_element(
                    &rng,
                    step,
                    element,
                    dataset.len(),
                    t_cdf.as_deref(),
                    cfg.steps,
                );
                let eps = draw_normal::<f32>(&mut er, lz * d)
                    .reshape(vec![lz, d])
                    .unwrap();
                let mut grads = net.zeros_like();
                let mut stats = RunStats::new();
                let loss = step_loss_and_grads(
                    &net,
                    &cfg,
                    salt,
                    &dataset[sample_idx],
                    t_index,
                    &eps,
                    schedule,
                    &mut grads,
                    &mut stats,
                )?;
                Ok((loss, grads))
            })
            .collect();

        // fixed-order reduction keeps training bit-reproducible
        let mut total = 0.0;
        let mut batch_grads: Option<Network<f32>> = None;
        for r in results {
            let (loss, g) = r?;
            total += loss.total;
            match &mut batch_grads {
                None => batch_grads = Some(g),
                Some(acc) => acc.add_assign(&g),
            }
        }
        let mean_loss = total / cfg.batch_size as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss diverged at step {step} (stage {stage}, seed {})",
                cfg.train_seed
            )));
        }
        losses.push(mean_loss);

        let mut grads = batch_grads.expect("batch nonempty");
        let scale = 1.0f32 / cfg.batch_size as f32;
        scale_network(&mut grads, scale);
        params.store.zero_grads();
        grads.fold_grads_into(&mut params.store, &cfg);
        adam.update(&mut params.store, lr);

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = snapshot_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(format!("snapshot_step{:05}.pfck", step + 1));
                super::save_checkpoint(params, &path)?;
            }
        }
    }

    Ok(TrainReport {
        stage,
        seed: cfg.train_seed,
        steps,
        batch_size: cfg.batch_size,
        wall_seconds: start.elapsed().as_secs_f64(),
        initial_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
        eval: None,
    })
}

fn scale_network(net: &mut Network<f32>, s: f32) {
    // reuse add_assign-style traversal via a zero network would double
    // memory; scale in place instead
    for arr in [
        &mut net.patch_w,
        &mut net.patch_b,
        &mut net.dec_w,
        &mut net.dec_b,
        &mut net.time_embed,
        &mut net.anchor,
        &mut net.readout_w,
        &mut net.readout_b,
        &mut net.final_gamma,
        &mut net.final_beta,
    ] {
        for v in arr.data_mut() {
            *v *= s;
        }
    }
    for l in &mut net.layers {
        for arr in [
            &mut l.norm1_gamma,
            &mut l.norm1_beta,
            &mut l.attn.wq,
            &mut l.attn.wk,
            &mut l.attn.wv,
            &mut l.attn.wo,
            &mut l.norm2_gamma,
            &mut l.norm2_beta,
            &mut l.ffn_w1,
            &mut l.ffn_b1,
            &mut l.ffn_w2,
            &mut l.ffn_b2,
        ] {
            for v in arr.data_mut() {
                *v *= s;
            }
        }
    }
    let t = &mut net.tfem;
    for arr in [
        &mut t.ocr_w1,
        &mut t.ocr_b1,
        &mut t.ocr_w2,
        &mut t.ocr_b2,
        &mut t.wq,
        &mut t.wk,
        &mut t.wv,
        &mut t.ffn_w1,
        &mut t.ffn_b1,
        &mut t.ffn_w2,
        &mut t.ffn_b2,
        &mut t.norm_gamma,
        &mut t.norm_beta,
        &mut t.font_size,
    ] {
        for v in arr.data_mut() {
            *v *= s;
        }
    }
}

/// Stage I: all condition slots kept, uniform timestep sampling, decoupled
/// attention. Deterministic in the config seeds.
pub fn train_stage1(
    config: &ModelConfig,
    dataset: &[PosterSample],
    snapshot_dir: Option<&Path>,
) -> Result<(ModelParams<f32>, TrainReport)> {
    let mut params = ModelParams::<f32>::init(config)?;
    let report = train_loop(
        &mut params,
        dataset,
        config.stage1_steps,
        config.stage1_lr as f32,
        None,
        None,
        1,
        snapshot_dir,
    )?;
    Ok((params, report))
}

/// Stage II: resumes from Stage-I parameters, runs the pruned schedule,
/// samples timesteps proportionally to their importance mass, and uses the
/// lower stage-2 learning rate.
pub fn train_stage2(
    params: &ModelParams<f32>,
    dataset: &[PosterSample],
    schedule: &RoutingSchedule,
    map: &ImportanceMap,
    snapshot_dir: Option<&Path>,
) -> Result<(ModelParams<f32>, TrainReport)> {
    let cfg = &params.config;
    schedule.check_dims(cfg.layers, cfg.steps)?;
    if map.layers != cfg.layers || map.timesteps != cfg.steps {
        return Err(Error::ConfigMismatch(format!(
            "importance map is {}x{}, model runs {}x{}",
            map.layers, map.timesteps, cfg.layers, cfg.steps
        )));
    }
    if !map.config_fingerprint.is_empty() && map.config_fingerprint != cfg.fingerprint() {
        return Err(Error::ConfigMismatch(format!(
            "importance map fingerprint {} does not match model config {}",
            map.config_fingerprint,
            cfg.fingerprint()
        )));
    }
    let weights = timestep_weights(map);
    let mut tuned = params.clone();
    let report = train_loop(
        &mut tuned,
        dataset,
        cfg.stage2_steps,
        cfg.stage2_lr as f32,
        Some(schedule),
        Some(&weights),
        2,
        snapshot_dir,
    )?;
    Ok((tuned, report))
}
