//! Variance-preserving forward process `z_t = e^{-t} z_0 + sqrt(1 - e^{-2t}) eps`
//! and its reverse-time Euler-Maruyama sampler with classifier-free guidance.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{scorenet, scorenet_forward, ModelConfig, ParamStore, ParamVars};
use crate::tensor::Tensor;

/// Rows per network evaluation in the sampler; fixed so that output does
/// not depend on the thread count.
pub const SAMPLE_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSchedule {
    #[serde(rename = "T")]
    pub t_max: f64,
    pub t_min: f64,
    pub n_steps: usize,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { t_max: 3.0, t_min: 1e-3, n_steps: 500 }
    }
}

impl DiffusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min.is_finite() && self.t_max.is_finite() && 0.0 < self.t_min && self.t_min < self.t_max) {
            return Err(Error::invalid("diffusion schedule needs 0 < t_min < T"));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("diffusion.n_steps must be positive"));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        (self.t_max - self.t_min) / self.n_steps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(Error::invalid("guidance.scale must be finite and >= 0"));
        }
        Ok(())
    }
}

pub fn alpha(t: f64) -> f64 {
    (-t).exp()
}

pub fn marginal_std(t: f64) -> f64 {
    (-(-2.0 * t).exp_m1()).sqrt()
}

/// Row `i` uses time `t[i]`.
pub fn perturb_latent(z0: &Tensor, t: &[f64], eps: &Tensor) -> Result<Tensor> {
    if z0.shape() != eps.shape() || t.len() != z0.rows() {
        return Err(Error::shape("perturb_latent: z0, eps and t disagree"));
    }
    let mut out = Tensor::zeros(z0.rows(), z0.cols());
    for (i, &ti) in t.iter().enumerate() {
        let (a, s) = (alpha(ti), marginal_std(ti));
        for ((o, &z), &e) in out.row_mut(i).iter_mut().zip(z0.row(i)).zip(eps.row(i)) {
            *o = a * z + s * e;
        }
    }
    Ok(out)
}

/// Anything that predicts the injected noise from `(z_t, t, label)`.
pub trait NoisePredictor: Sync {
    fn d_lat(&self) -> usize;
    fn predict(&self, z_t: &Tensor, t: &[f64], labels: &[usize], drop: &[bool]) -> Result<Tensor>;
}

/// The learned noise predictor.
pub struct ScoreModel<'a> {
    pub params: &'a ParamStore,
    pub config: &'a ModelConfig,
}

impl NoisePredictor for ScoreModel<'_> {
    fn d_lat(&self) -> usize {
        self.config.d_lat
    }

    fn predict(&self, z_t: &Tensor, t: &[f64], labels: &[usize], drop: &[bool]) -> Result<Tensor> {
        scorenet_forward(z_t, t, labels, drop, self.params, self.config)
    }
}

/// Per-row draws for one evaluation of the denoising objective.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: Vec<f64>,
    pub eps: Tensor,
    pub drop: Vec<bool>,
}

pub fn draw_noise<R: Rng + ?Sized>(n: usize, d: usize, schedule: &DiffusionSchedule, p_uncond: f64, rng: &mut R) -> NoiseDraw {
    let t = (0..n).map(|_| rng.random_range(schedule.t_min..schedule.t_max)).collect();
    let eps = Tensor::randn(n, d, rng);
    let drop = (0..n).map(|_| rng.random_bool(p_uncond)).collect();
    NoiseDraw { t, eps, drop }
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Denoising loss for an arbitrary predictor.
pub fn diffusion_loss_with<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z0: &Tensor,
    labels: &[usize],
    schedule: &DiffusionSchedule,
    p_uncond: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let draw = draw_noise(z0.rows(), z0.cols(), schedule, p_uncond, rng);
    let z_t = perturb_latent(z0, &draw.t, &draw.eps)?;
    let eps_hat = predictor.predict(&z_t, &draw.t, labels, &draw.drop)?;
    Ok(mse(&eps_hat, &draw.eps))
}

pub fn diffusion_loss(
    z0: &Tensor,
    labels: &[usize],
    params: &ParamStore,
    cfg: &ModelConfig,
    schedule: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    diffusion_loss_with(&ScoreModel { params, config: cfg }, z0, labels, schedule, cfg.p_uncond, rng)
}

/// Differentiable denoising loss; gradients reach both the network and `z0`.
pub fn diffusion_loss_var(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    z0: Var,
    labels: &[usize],
    draw: &NoiseDraw,
) -> Result<Var> {
    let (n, d) = tape.value(z0).shape();
    if draw.eps.shape() != (n, d) || draw.t.len() != n {
        return Err(Error::shape("noise draw does not match the latent batch"));
    }
    let mut a = Tensor::zeros(n, d);
    let mut se = draw.eps.clone();
    for (i, &ti) in draw.t.iter().enumerate() {
        a.row_mut(i).iter_mut().for_each(|v| *v = alpha(ti));
        let s = marginal_std(ti);
        se.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    let scaled = tape.mul_const(z0, a);
    let z_t = tape.add_const(scaled, &se);
    let eps_hat = scorenet(tape, pv, cfg, z_t, &draw.t, labels, &draw.drop)?;
    let diff = tape.add_const(eps_hat, &draw.eps.scale(-1.0));
    let sq = tape.mul(diff, diff);
    Ok(tape.mean(sq))
}

fn guided<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z: &Tensor,
    t: &[f64],
    labels: &[usize],
    g: f64,
) -> Result<Tensor> {
    let n = z.rows();
    if g == 1.0 {
        return predictor.predict(z, t, labels, &vec![false; n]);
    }
    let uncond = predictor.predict(z, t, labels, &vec![true; n])?;
    if g == 0.0 {
        return Ok(uncond);
    }
    let cond = predictor.predict(z, t, labels, &vec![false; n])?;
    Ok(uncond.zip_map(&cond, |u, c| u + g * (c - u)))
}

fn sample_chunk<P: NoisePredictor + ?Sized>(
    predictor: &P,
    labels: &[usize],
    streams: &[u64],
    schedule: &DiffusionSchedule,
    g: f64,
    seed: u64,
) -> Result<Tensor> {
    let n = labels.len();
    let d = predictor.d_lat();
    let mut rngs: Vec<ChaCha8Rng> = streams
        .iter()
        .map(|&s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        })
        .collect();
    let mut z = Tensor::zeros(n, d);
    for (i, r) in rngs.iter_mut().enumerate() {
        z.row_mut(i).iter_mut().for_each(|v| *v = r.sample(StandardNormal));
    }
    let dt = schedule.step_size();
    let noise_scale = (2.0 * dt).sqrt();
    for step in 0..schedule.n_steps {
        let t = schedule.t_max - step as f64 * dt;
        let eps_hat = guided(predictor, &z, &vec![t; n], labels, g)?;
        let sigma = marginal_std(t);
        for (i, r) in rngs.iter_mut().enumerate() {
            for (zv, &e) in z.row_mut(i).iter_mut().zip(eps_hat.row(i)) {
                let s = -e / sigma;
                let xi: f64 = r.sample(StandardNormal);
                *zv += dt * (*zv + 2.0 * s) + noise_scale * xi;
            }
        }
        if !z.is_finite() {
            return Err(Error::numerical(format!("non-finite sampler state at step {step} (t = {t:.4})")));
        }
    }
    let t = schedule.t_min;
    let eps_hat = guided(predictor, &z, &vec![t; n], labels, g)?;
    let (a, s) = (alpha(t), marginal_std(t));
    let out = z.zip_map(&eps_hat, |zv, e| (zv - s * e) / a);
    if !out.is_finite() {
        return Err(Error::numerical("non-finite denoised output"));
    }
    Ok(out)
}

/// Reverse-time sampling where row `i` draws all its noise from stream
/// `streams[i]` of a generator seeded with `seed`.
pub fn sample_with_streams<P: NoisePredictor + ?Sized>(
    predictor: &P,
    labels: &[usize],
    streams: &[u64],
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Tensor> {
    schedule.validate()?;
    guidance.validate()?;
    if labels.len() != streams.len() {
        return Err(Error::shape("one RNG stream per row is required"));
    }
    let d = predictor.d_lat();
    if labels.is_empty() {
        return Ok(Tensor::zeros(0, d));
    }
    let chunks: Vec<Tensor> = labels
        .par_chunks(SAMPLE_CHUNK)
        .zip(streams.par_chunks(SAMPLE_CHUNK))
        .map(|(l, s)| sample_chunk(predictor, l, s, schedule, guidance.scale, seed))
        .collect::<Result<_>>()?;
    Tensor::vcat(&chunks.iter().collect::<Vec<_>>())
}

/// Reverse-time sampling with RNG streams keyed by row index.
pub fn sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    labels: &[usize],
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Tensor> {
    let streams: Vec<u64> = (0..labels.len() as u64).collect();
    sample_with_streams(predictor, labels, &streams, schedule, guidance, seed)
}
