//! The three networks: a Chebyshev graph encoder producing a diagonal
//! Gaussian latent, a conditional noise predictor, and a log-rate decoder.
//!
//! Forward passes are recorded on an [`autodiff::Tape`](crate::autodiff::Tape)
//! so the same code serves inference and gradient evaluation.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{CellGraph, ScaledLaplacian};
use crate::tensor::Tensor;

pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);
pub const LOG_RATE_CLAMP: (f64, f64) = (-20.0, 15.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_lat: usize,
    pub d_hid: usize,
    pub d_hid_mlp: usize,
    pub k_cheb: usize,
    pub n_enc_layers: usize,
    pub n_score_layers: usize,
    pub k_pe: usize,
    pub time_embed_dim: usize,
    pub label_embed_dim: usize,
    pub p_uncond: f64,
    /// Filled from the training data when zero.
    pub label_count: usize,
    /// Filled from the training data when zero.
    pub n_genes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_lat: 32,
            d_hid: 128,
            d_hid_mlp: 256,
            k_cheb: 3,
            n_enc_layers: 2,
            n_score_layers: 3,
            k_pe: 8,
            time_embed_dim: 64,
            label_embed_dim: 32,
            p_uncond: 0.1,
            label_count: 0,
            n_genes: 0,
        }
    }
}

impl ModelConfig {
    /// Checks the architecture hyperparameters (data-derived sizes may be 0).
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_lat", self.d_lat),
            ("d_hid", self.d_hid),
            ("d_hid_mlp", self.d_hid_mlp),
            ("k_cheb", self.k_cheb),
            ("n_enc_layers", self.n_enc_layers),
            ("n_score_layers", self.n_score_layers),
            ("k_pe", self.k_pe),
            ("time_embed_dim", self.time_embed_dim),
            ("label_embed_dim", self.label_embed_dim),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model.{name} must be positive")));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("model.time_embed_dim must be even"));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::invalid("model.p_uncond must be in [0, 1)"));
        }
        Ok(())
    }

    fn validate_complete(&self) -> Result<()> {
        self.validate()?;
        if self.label_count == 0 || self.n_genes == 0 {
            return Err(Error::invalid("model.label_count and model.n_genes must be set before initialization"));
        }
        Ok(())
    }

    pub fn encoder_input_width(&self) -> usize {
        self.n_genes + self.k_pe
    }
}

/// Named parameter tensors in deterministic (lexicographic) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols()))).collect() }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn scale_all(&mut self, c: f64) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}

/// Parameters registered as leaves on a tape.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ParamStore) -> Self {
        Self { vars: params.iter().map(|(k, t)| (k.clone(), tape.param(t.clone()))).collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

pub fn enc_layer_dims(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    (0..cfg.n_enc_layers).map(|l| (if l == 0 { cfg.encoder_input_width() } else { cfg.d_hid }, cfg.d_hid)).collect()
}

fn score_input_width(cfg: &ModelConfig) -> usize {
    cfg.d_lat + cfg.time_embed_dim + cfg.label_embed_dim
}

/// Glorot-uniform weights, zero biases, unit LayerNorm scales.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate_complete()?;
    let mut p = ParamStore::new();
    for (l, (fin, fout)) in enc_layer_dims(cfg).into_iter().enumerate() {
        for k in 0..cfg.k_cheb {
            p.insert(format!("enc.cheb{l}.theta{k}"), glorot(fin, fout, rng));
        }
        p.insert(format!("enc.cheb{l}.bias"), Tensor::zeros(1, fout));
    }
    for head in ["mu", "logvar"] {
        p.insert(format!("enc.{head}.w"), glorot(cfg.d_hid, cfg.d_lat, rng));
        p.insert(format!("enc.{head}.b"), Tensor::zeros(1, cfg.d_lat));
    }

    let td = cfg.time_embed_dim;
    p.insert("score.time.w1", glorot(td, td, rng));
    p.insert("score.time.b1", Tensor::zeros(1, td));
    p.insert("score.time.w2", glorot(td, td, rng));
    p.insert("score.time.b2", Tensor::zeros(1, td));
    p.insert("score.label.table", glorot(cfg.label_count, cfg.label_embed_dim, rng));
    p.insert("score.label.null", glorot(1, cfg.label_embed_dim, rng));
    for b in 0..cfg.n_score_layers {
        let fin = if b == 0 { score_input_width(cfg) } else { cfg.d_hid_mlp };
        p.insert(format!("score.block{b}.w"), glorot(fin, cfg.d_hid_mlp, rng));
        p.insert(format!("score.block{b}.b"), Tensor::zeros(1, cfg.d_hid_mlp));
        p.insert(format!("score.block{b}.ln_scale"), Tensor::full(1, cfg.d_hid_mlp, 1.0));
        p.insert(format!("score.block{b}.ln_shift"), Tensor::zeros(1, cfg.d_hid_mlp));
    }
    p.insert("score.out.w", glorot(cfg.d_hid_mlp, cfg.d_lat, rng));
    p.insert("score.out.b", Tensor::zeros(1, cfg.d_lat));

    p.insert("dec.w1", glorot(cfg.d_lat, cfg.d_hid, rng));
    p.insert("dec.b1", Tensor::zeros(1, cfg.d_hid));
    p.insert("dec.w2", glorot(cfg.d_hid, cfg.n_genes, rng));
    p.insert("dec.b2", Tensor::zeros(1, cfg.n_genes));
    Ok(p)
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let h = tape.matmul(x, w);
    tape.add_row(h, b)
}

/// `sum_k T_k(L - I) X theta_k + bias` via the Chebyshev recurrence.
pub fn chebconv(tape: &mut Tape, x: Var, lap: &Rc<ScaledLaplacian>, thetas: &[Var], bias: Var) -> Var {
    assert!(!thetas.is_empty(), "at least one Chebyshev coefficient");
    let mut acc = tape.matmul(x, thetas[0]);
    let mut prev = x;
    let mut cur = x;
    for (k, &theta) in thetas.iter().enumerate().skip(1) {
        let op: Rc<dyn crate::autodiff::SymmetricOperator> = lap.clone();
        let lx = tape.apply_operator(cur, op);
        let next = if k == 1 {
            lx
        } else {
            let twice = tape.scale(lx, 2.0);
            tape.sub(twice, prev)
        };
        let term = tape.matmul(next, theta);
        acc = tape.add(acc, term);
        prev = cur;
        cur = next;
    }
    tape.add_row(acc, bias)
}

pub struct EncoderOut {
    pub mu: Var,
    pub log_var: Var,
}

pub fn encoder(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, features: Var, lap: &Rc<ScaledLaplacian>) -> Result<EncoderOut> {
    let width = tape.value(features).cols();
    if width != cfg.encoder_input_width() {
        return Err(Error::shape(format!("encoder expects {} input columns, got {width}", cfg.encoder_input_width())));
    }
    let mut h = features;
    for l in 0..cfg.n_enc_layers {
        let thetas = (0..cfg.k_cheb).map(|k| pv.get(&format!("enc.cheb{l}.theta{k}"))).collect::<Result<Vec<_>>>()?;
        let bias = pv.get(&format!("enc.cheb{l}.bias"))?;
        let c = chebconv(tape, h, lap, &thetas, bias);
        h = tape.silu(c);
    }
    let mu = dense(tape, h, pv.get("enc.mu.w")?, pv.get("enc.mu.b")?);
    let lv = dense(tape, h, pv.get("enc.logvar.w")?, pv.get("enc.logvar.b")?);
    let log_var = tape.clamp(lv, LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1);
    if !tape.value(mu).is_finite() || !tape.value(log_var).is_finite() {
        return Err(Error::numerical("non-finite encoder activations"));
    }
    Ok(EncoderOut { mu, log_var })
}

/// Interleaved `[sin(t w_i), cos(t w_i)]` with `w_i` log-spaced in `[1, 1000]`.
pub fn sinusoidal_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let w = 1000f64.powf(frac);
        out.push((t * w).sin());
        out.push((t * w).cos());
    }
    out
}

pub fn time_embedding_var(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, t: &[f64]) -> Result<Var> {
    let dim = cfg.time_embed_dim;
    let mut sin = Tensor::zeros(t.len(), dim);
    for (i, &ti) in t.iter().enumerate() {
        sin.row_mut(i).copy_from_slice(&sinusoidal_features(ti, dim));
    }
    let s = tape.constant(sin);
    let h = dense(tape, s, pv.get("score.time.w1")?, pv.get("score.time.b1")?);
    let h = tape.silu(h);
    Ok(dense(tape, h, pv.get("score.time.w2")?, pv.get("score.time.b2")?))
}

/// Noise prediction for rows of `z_t`; rows with `drop[i]` use the null label.
pub fn scorenet(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    z_t: Var,
    t: &[f64],
    labels: &[usize],
    drop: &[bool],
) -> Result<Var> {
    let n = tape.value(z_t).rows();
    if t.len() != n || labels.len() != n || drop.len() != n {
        return Err(Error::shape("scorenet: t, labels and drop mask must have one entry per row"));
    }
    if tape.value(z_t).cols() != cfg.d_lat {
        return Err(Error::shape(format!("scorenet expects {} latent columns", cfg.d_lat)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.label_count) {
        return Err(Error::invalid(format!("label id {bad} outside 0..{}", cfg.label_count)));
    }
    let temb = time_embedding_var(tape, pv, cfg, t)?;
    let ids = labels.iter().zip(drop).map(|(&l, &d)| if d { None } else { Some(l) }).collect();
    let lemb = tape.embed(pv.get("score.label.table")?, pv.get("score.label.null")?, ids);
    let mut h = tape.hcat(&[z_t, temb, lemb]);
    for b in 0..cfg.n_score_layers {
        let d = dense(tape, h, pv.get(&format!("score.block{b}.w"))?, pv.get(&format!("score.block{b}.b"))?);
        let ln = tape.layer_norm(d);
        let sc = tape.mul_row(ln, pv.get(&format!("score.block{b}.ln_scale"))?);
        let sh = tape.add_row(sc, pv.get(&format!("score.block{b}.ln_shift"))?);
        h = tape.silu(sh);
    }
    Ok(dense(tape, h, pv.get("score.out.w")?, pv.get("score.out.b")?))
}

pub fn decoder(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, z: Var) -> Result<Var> {
    if tape.value(z).cols() != cfg.d_lat {
        return Err(Error::shape(format!("decoder expects {} latent columns", cfg.d_lat)));
    }
    let h = dense(tape, z, pv.get("dec.w1")?, pv.get("dec.b1")?);
    let h = tape.silu(h);
    let out = dense(tape, h, pv.get("dec.w2")?, pv.get("dec.b2")?);
    Ok(tape.clamp(out, LOG_RATE_CLAMP.0, LOG_RATE_CLAMP.1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mu: Tensor,
    pub log_var: Tensor,
}

/// Dense Chebyshev layer over a weighted graph, without a tape.
pub fn chebconv_forward(x: &Tensor, g: &CellGraph, thetas: &[Tensor], bias: &Tensor) -> Result<Tensor> {
    if x.rows() != g.n_nodes() {
        return Err(Error::shape(format!("{} feature rows for {} nodes", x.rows(), g.n_nodes())));
    }
    if thetas.is_empty() {
        return Err(Error::shape("need at least one Chebyshev coefficient matrix"));
    }
    let fout = thetas[0].cols();
    if thetas.iter().any(|t| t.shape() != (x.cols(), fout)) || bias.shape() != (1, fout) {
        return Err(Error::shape("Chebyshev coefficient shapes disagree with the input"));
    }
    let lap = ScaledLaplacian::new(g)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let tv: Vec<Var> = thetas.iter().map(|t| tape.constant(t.clone())).collect();
    let bv = tape.constant(bias.clone());
    let y = chebconv(&mut tape, xv, &lap, &tv, bv);
    Ok(tape.value(y).clone())
}

pub fn encoder_forward(features: &Tensor, g: &CellGraph, params: &ParamStore, cfg: &ModelConfig) -> Result<LatentGaussian> {
    if features.rows() != g.n_nodes() {
        return Err(Error::shape(format!("{} feature rows for {} nodes", features.rows(), g.n_nodes())));
    }
    let lap = ScaledLaplacian::new(g)?;
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let f = tape.constant(features.clone());
    let out = encoder(&mut tape, &pv, cfg, f, &lap)?;
    Ok(LatentGaussian { mu: tape.value(out.mu).clone(), log_var: tape.value(out.log_var).clone() })
}

pub fn scorenet_forward(
    z_t: &Tensor,
    t: &[f64],
    labels: &[usize],
    drop: &[bool],
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let z = tape.constant(z_t.clone());
    let out = scorenet(&mut tape, &pv, cfg, z, t, labels, drop)?;
    Ok(tape.value(out).clone())
}

pub fn decoder_forward(z: &Tensor, params: &ParamStore, cfg: &ModelConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let zv = tape.constant(z.clone());
    let out = decoder(&mut tape, &pv, cfg, zv)?;
    Ok(tape.value(out).clone())
}

pub fn time_embedding(t: &[f64], params: &ParamStore, cfg: &ModelConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let out = time_embedding_var(&mut tape, &pv, cfg, t)?;
    Ok(tape.value(out).clone())
}

/// `mu + exp(log_var / 2) * xi`.
pub fn reparameterize_with(lg: &LatentGaussian, xi: &Tensor) -> Tensor {
    let mut z = lg.mu.clone();
    for ((o, &lv), &e) in z.data_mut().iter_mut().zip(lg.log_var.data()).zip(xi.data()) {
        *o += (0.5 * lv).exp() * e;
    }
    z
}

pub fn reparameterize<R: Rng + ?Sized>(lg: &LatentGaussian, rng: &mut R) -> Tensor {
    let (r, c) = lg.mu.shape();
    let data = (0..r * c).map(|_| rng.sample(StandardNormal)).collect();
    let xi = Tensor::from_vec(r, c, data).expect("sized");
    reparameterize_with(lg, &xi)
}

/// Loss value and exact gradients of `loss_fn` with respect to every
/// parameter in `params`.
pub fn grad<F>(params: &ParamStore, loss_fn: F) -> Result<(f64, ParamStore)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let loss = loss_fn(&mut tape, &pv)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::numerical(format!("non-finite loss {value}")));
    }
    let mut g = tape.backward(loss);
    let grads = pv
        .iter()
        .map(|(name, &v)| {
            let t = params.get(name).expect("registered");
            (name.clone(), g.take(v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        })
        .collect();
    Ok((value, grads))
}
