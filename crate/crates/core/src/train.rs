//! Training: per-batch graph construction, input masking, edge-weight
//! perturbation, the three losses, Adam with cosine decay, and clipping.

use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::autodiff::{Tape, Var};
use crate::config::RunConfig;
use crate::diffusion::{diffusion_loss_var, draw_noise, DiffusionSchedule, NoiseDraw};
use crate::error::{Error, Result};
use crate::graph::{build_knn_graph, positional_features, ScaledLaplacian};
use crate::ingest::ProcessedDataset;
use crate::model::{decoder, encoder, grad, init_params, LatentGaussian, ModelConfig, ParamStore, ParamVars};
use crate::perturb::{adversarial_perturb, init_weights, PerturbConfig};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const FINAL_LR_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub w_diff: f64,
    pub w_kl: f64,
    pub w_rec: f64,
    pub mask_fraction: f64,
    pub grad_clip_norm: f64,
    pub knn_k: usize,
    pub seed: u64,
    pub disable_perturb: bool,
    pub disable_mask: bool,
    pub disable_lpe: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            w_diff: 1.0,
            w_kl: 1e-3,
            w_rec: 1.0,
            mask_fraction: 0.2,
            grad_clip_norm: 1.0,
            knn_k: 15,
            seed: 0,
            disable_perturb: false,
            disable_mask: false,
            disable_lpe: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("train.epochs must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("train.batch_size must be >= 2"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("train.learning_rate must be positive"));
        }
        for (name, w) in [("w_diff", self.w_diff), ("w_kl", self.w_kl), ("w_rec", self.w_rec)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!("train.{name} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::invalid(format!("train.mask_fraction must be in [0, 1), got {}", self.mask_fraction)));
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm > 0.0) {
            return Err(Error::invalid("train.grad_clip_norm must be positive"));
        }
        if self.knn_k == 0 {
            return Err(Error::invalid("train.knn_k must be >= 1"));
        }
        Ok(())
    }
}

/// Zeroes each entry independently with probability `m`; `mask[i]` is true
/// where entry `i` was zeroed.
pub fn mask_inputs<R: Rng + ?Sized>(x: &Tensor, m: f64, rng: &mut R) -> (Tensor, Vec<bool>) {
    let mut out = x.clone();
    let mut mask = vec![false; x.len()];
    if m > 0.0 {
        for (v, flag) in out.data_mut().iter_mut().zip(mask.iter_mut()) {
            if rng.random_bool(m) {
                *v = 0.0;
                *flag = true;
            }
        }
    }
    (out, mask)
}

pub fn kl_loss(lg: &LatentGaussian) -> f64 {
    let total: f64 = lg
        .mu
        .data()
        .iter()
        .zip(lg.log_var.data())
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum();
    0.5 * total / lg.mu.rows().max(1) as f64
}

fn kl_loss_var(tape: &mut Tape, mu: Var, log_var: Var) -> Var {
    let n = tape.value(mu).rows().max(1) as f64;
    let m2 = tape.mul(mu, mu);
    let e = tape.exp(log_var);
    let a = tape.add(m2, e);
    let b = tape.sub(a, log_var);
    let s = tape.sum(b);
    let d = tape.value(mu).len() as f64;
    let s = tape.add_const(s, &Tensor::scalar(-d));
    tape.scale(s, 0.5 / n)
}

fn log_factorial_mean(counts: &Tensor) -> f64 {
    counts.data().iter().map(|&x| ln_gamma(x + 1.0)).sum::<f64>() / counts.len().max(1) as f64
}

/// Mean Poisson negative log-likelihood of `counts` under `exp(log_rates)`.
pub fn recon_loss(log_rates: &Tensor, counts: &Tensor) -> Result<f64> {
    if log_rates.shape() != counts.shape() {
        return Err(Error::shape("recon_loss: rates and counts disagree"));
    }
    let s: f64 = log_rates.data().iter().zip(counts.data()).map(|(&lr, &x)| lr.exp() - x * lr).sum();
    Ok(s / counts.len().max(1) as f64 + log_factorial_mean(counts))
}

fn recon_loss_var(tape: &mut Tape, log_rates: Var, counts: &Tensor) -> Var {
    let rate = tape.exp(log_rates);
    let xl = tape.mul_const(log_rates, counts.clone());
    let d = tape.sub(rate, xl);
    let m = tape.mean(d);
    tape.add_const(m, &Tensor::scalar(log_factorial_mean(counts)))
}

pub fn total_loss(l_diff: f64, l_kl: f64, l_rec: f64, cfg: &TrainConfig) -> f64 {
    cfg.w_diff * l_diff + cfg.w_kl * l_kl + cfg.w_rec * l_rec
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// One bias-corrected Adam update.
pub fn optimizer_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (name, w) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::invalid(format!("no gradient for {name}")))?;
        let m = state.m.get_mut(name).ok_or_else(|| Error::invalid(format!("no optimizer state for {name}")))?;
        if g.shape() != w.shape() || m.shape() != w.shape() {
            return Err(Error::shape(format!("gradient shape mismatch for {name}")));
        }
        for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
        }
        let v = state.v.get_mut(name).expect("v mirrors m");
        for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
        }
        let m = state.m.get(name).expect("present");
        let v = state.v.get(name).expect("present");
        for ((wv, &mv), &vv) in w.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            *wv -= lr * (mv / c1) / ((vv / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescales `grads` so that their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_gradients(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale_all(max_norm / norm);
    }
    norm
}

/// Cosine decay from `lr` to `0.1 * lr` as `progress` goes from 0 to 1.
pub fn learning_rate_at(lr: f64, progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    lr * (FINAL_LR_FRACTION + (1.0 - FINAL_LR_FRACTION) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Splits a shuffled order into `ceil(n / b)` batches whose sizes differ by
/// at most one, never smaller than two rows.
pub fn batch_partition(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let n = order.len();
    let n_batches = n.div_ceil(batch_size).min(n / 2).max(1);
    let (base, extra) = (n / n_batches, n % n_batches);
    let mut out = Vec::with_capacity(n_batches);
    let mut start = 0;
    for b in 0..n_batches {
        let len = base + usize::from(b < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_diff: f64,
    pub l_kl: f64,
    pub l_rec: f64,
    pub l_total: f64,
    pub lr: f64,
    pub wall_ms: f64,
    pub perturb: String,
    pub perturb_calls: usize,
    pub grad_norm: f64,
}

/// Everything that changes while training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub perturb_calls: usize,
}

impl TrainState {
    pub fn new(model: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(model, &mut rng)?;
        let adam = AdamState::new(&params);
        Ok(Self { params, adam, rng, epoch: 0, perturb_calls: 0 })
    }
}

/// Fills the data-derived model sizes from `ds`.
pub fn resolve_model_config(model: &ModelConfig, ds: &ProcessedDataset) -> ModelConfig {
    ModelConfig { label_count: ds.filtered_counts.label_vocab.len(), n_genes: ds.n_genes(), ..*model }
}

/// Static per-dataset tensors used by every batch.
pub struct TrainingData<'a> {
    pub ds: &'a ProcessedDataset,
    pub counts: Tensor,
}

impl<'a> TrainingData<'a> {
    pub fn new(ds: &'a ProcessedDataset) -> Self {
        Self { ds, counts: ds.filtered_counts.to_tensor() }
    }
}

struct BatchLosses {
    l_diff: f64,
    l_kl: f64,
    l_rec: f64,
    l_total: f64,
    grad_norm: f64,
}

/// Everything random or graph-derived that one training step consumes.
pub struct BatchInputs {
    /// Masked expression followed by positional columns.
    pub features: Tensor,
    pub laplacian: Rc<ScaledLaplacian>,
    /// Unmasked counts, the reconstruction target.
    pub counts: Tensor,
    pub labels: Vec<usize>,
    /// Standard normal draws for the reparameterization.
    pub xi: Tensor,
    pub noise: NoiseDraw,
}

/// Builds the inputs of one step: batch k-NN graph, positional encodings,
/// input masking, edge-weight perturbation and noise draws.
pub fn prepare_batch(
    data: &TrainingData<'_>,
    rows: &[usize],
    state: &mut TrainState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    schedule: &DiffusionSchedule,
    perturb: &PerturbConfig,
) -> Result<BatchInputs> {
    let ds = data.ds;
    let n = rows.len();
    let coords = ds.pca_scores.select_rows(rows);
    let g = build_knn_graph(&coords, cfg.knn_k.min(n - 1))?;
    let lpe = if cfg.disable_lpe { Tensor::zeros(n, model.k_pe) } else { positional_features(&g, model.k_pe)? };
    let m = if cfg.disable_mask { 0.0 } else { cfg.mask_fraction };
    let (masked, _) = mask_inputs(&ds.lognorm.select_rows(rows), m, &mut state.rng);
    let g = if cfg.disable_perturb {
        g
    } else {
        let w0 = init_weights(&g, perturb, &mut state.rng)?;
        let w = adversarial_perturb(&g, &w0, perturb)?;
        state.perturb_calls += 1;
        g.with_weights(w)?
    };
    Ok(BatchInputs {
        features: Tensor::hcat(&[&masked, &lpe])?,
        laplacian: ScaledLaplacian::new(&g)?,
        counts: data.counts.select_rows(rows),
        labels: rows.iter().map(|&i| ds.filtered_counts.cell_labels[i]).collect(),
        xi: Tensor::randn(n, model.d_lat, &mut state.rng),
        noise: draw_noise(n, model.d_lat, schedule, model.p_uncond, &mut state.rng),
    })
}

/// Weighted training objective on a tape; also returns the unweighted
/// `[l_diff, l_kl, l_rec]`.
pub fn batch_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    model: &ModelConfig,
    cfg: &TrainConfig,
    inputs: &BatchInputs,
) -> Result<(Var, [f64; 3])> {
    let f = tape.constant(inputs.features.clone());
    let enc = encoder(tape, pv, model, f, &inputs.laplacian)?;
    let half = tape.scale(enc.log_var, 0.5);
    let std = tape.exp(half);
    let noise = tape.mul_const(std, inputs.xi.clone());
    let z0 = tape.add(enc.mu, noise);
    let l_diff = diffusion_loss_var(tape, pv, model, z0, &inputs.labels, &inputs.noise)?;
    let l_kl = kl_loss_var(tape, enc.mu, enc.log_var);
    let log_rates = decoder(tape, pv, model, enc.mu)?;
    let l_rec = recon_loss_var(tape, log_rates, &inputs.counts);
    let parts = [tape.value(l_diff).item(), tape.value(l_kl).item(), tape.value(l_rec).item()];
    let a = tape.scale(l_diff, cfg.w_diff);
    let b = tape.scale(l_kl, cfg.w_kl);
    let c = tape.scale(l_rec, cfg.w_rec);
    let ab = tape.add(a, b);
    Ok((tape.add(ab, c), parts))
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    data: &TrainingData<'_>,
    rows: &[usize],
    state: &mut TrainState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    schedule: &DiffusionSchedule,
    perturb: &PerturbConfig,
    lr: f64,
) -> Result<BatchLosses> {
    let inputs = prepare_batch(data, rows, state, model, cfg, schedule, perturb)?;
    let mut parts = [0.0; 3];
    let (l_total, mut grads) = grad(&state.params, |tape, pv| {
        let (loss, p) = batch_loss(tape, pv, model, cfg, &inputs)?;
        parts = p;
        Ok(loss)
    })?;
    if !grads.all_finite() {
        return Err(Error::numerical("non-finite gradient"));
    }
    let grad_norm = clip_gradients(&mut grads, cfg.grad_clip_norm);
    optimizer_step(&mut state.params, &grads, &mut state.adam, lr)?;
    Ok(BatchLosses { l_diff: parts[0], l_kl: parts[1], l_rec: parts[2], l_total, grad_norm })
}

/// One pass over shuffled batches. The learning rate follows the cosine
/// schedule per batch, using fractional progress through all epochs.
pub fn train_epoch(data: &TrainingData<'_>, state: &mut TrainState, cfg: &RunConfig) -> Result<EpochMetrics> {
    let start = Instant::now();
    let tc = &cfg.train;
    let n = data.ds.n_cells();
    if n < 2 {
        return Err(Error::invalid("training needs at least 2 cells"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut state.rng);
    let batches = batch_partition(&order, tc.batch_size);
    let total_steps = (tc.epochs * batches.len()) as f64;
    let mut sums = [0.0; 5];
    let mut lr = tc.learning_rate;
    let calls_before = state.perturb_calls;
    for (b, rows) in batches.iter().enumerate() {
        let step = (state.epoch * batches.len() + b) as f64;
        lr = learning_rate_at(tc.learning_rate, step / total_steps);
        let l = train_batch(data, rows, state, &cfg.model, tc, &cfg.diffusion, &cfg.perturb, lr)
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("epoch {} batch {b}: {msg}", state.epoch)),
                other => other,
            })?;
        for (s, v) in sums.iter_mut().zip([l.l_diff, l.l_kl, l.l_rec, l.l_total, l.grad_norm]) {
            *s += v;
        }
    }
    let k = batches.len() as f64;
    let metrics = EpochMetrics {
        epoch: state.epoch,
        l_diff: sums[0] / k,
        l_kl: sums[1] / k,
        l_rec: sums[2] / k,
        l_total: sums[3] / k,
        lr,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        perturb: if tc.disable_perturb { "disabled" } else { "enabled" }.to_string(),
        perturb_calls: state.perturb_calls - calls_before,
        grad_norm: sums[4] / k,
    };
    state.epoch += 1;
    Ok(metrics)
}

/// Full training run; `on_epoch` sees each epoch's metrics as they finish.
pub fn train(ds: &ProcessedDataset, cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainState> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.model = resolve_model_config(&cfg.model, ds);
    let data = TrainingData::new(ds);
    let mut state = TrainState::new(&cfg.model, cfg.train.seed)?;
    for _ in 0..cfg.train.epochs {
        let m = train_epoch(&data, &mut state, &cfg)?;
        on_epoch(&m);
    }
    Ok(state)
}
