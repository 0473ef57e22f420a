//! Spectral adversarial re-weighting of graph edges.
//!
//! Edge weights are pushed along the rank-1 direction `v v^T` of the dominant
//! eigenvector of the weighted adjacency, over `ip` alternating
//! recompute/step rounds, and then clipped.

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CellGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Total perturbation budget, as a max per-edge change.
    pub epsilon: f64,
    /// Refinement rounds.
    pub ip: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub power_iters: usize,
    pub power_tol: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            alpha_min: 0.9,
            alpha_max: 1.1,
            epsilon: 0.5,
            ip: 3,
            clip_lo: 1e-4,
            clip_hi: 10.0,
            power_iters: 50,
            power_tol: 1e-6,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha_max && self.alpha_max.is_finite()) {
            return Err(Error::invalid("perturb: need 0 < alpha_min <= alpha_max"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("perturb.epsilon must be finite and >= 0"));
        }
        if self.ip == 0 || self.power_iters == 0 {
            return Err(Error::invalid("perturb.ip and perturb.power_iters must be >= 1"));
        }
        if !(self.clip_lo > 0.0 && self.clip_lo < self.clip_hi && self.clip_hi.is_finite()) {
            return Err(Error::invalid("perturb: need 0 < clip_lo < clip_hi"));
        }
        if !(self.power_tol > 0.0) {
            return Err(Error::invalid("perturb.power_tol must be positive"));
        }
        Ok(())
    }
}

/// One uniform draw per undirected edge, mirrored onto both directions.
pub fn init_weights<R: Rng + ?Sized>(g: &CellGraph, cfg: &PerturbConfig, rng: &mut R) -> Result<Vec<f64>> {
    cfg.validate()?;
    let dist = Uniform::new_inclusive(cfg.alpha_min, cfg.alpha_max).map_err(|e| Error::invalid(e.to_string()))?;
    let mut w = vec![0.0; g.n_edges()];
    let rev = g.reverse_index();
    for (_, _, k) in g.undirected() {
        let x = dist.sample(rng);
        w[k] = x;
        w[rev[k]] = x;
    }
    Ok(w)
}

fn adjacency_apply(g: &CellGraph, weights: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (&(s, d), &w) in g.edges().iter().zip(weights) {
        y[s] += w * x[d];
    }
    y
}

/// Dominant eigenpair of the weighted adjacency by power iteration from the
/// all-ones vector.
///
/// Iterates on `A + (d_max / 2) I`: the shift leaves the eigenvectors alone
/// but separates `lambda_max` from `-lambda_max` on bipartite graphs, where
/// plain iteration oscillates. The returned eigenvalue is the Rayleigh
/// quotient of `A` itself.
pub fn principal_eigenvector(g: &CellGraph, weights: &[f64], iters: usize, tol: f64) -> Result<(Vec<f64>, f64)> {
    let n = g.n_nodes();
    if n == 0 || g.n_edges() == 0 {
        return Err(Error::numerical("principal eigenvector of an edgeless graph"));
    }
    if weights.len() != g.n_edges() {
        return Err(Error::shape(format!("{} weights for {} edges", weights.len(), g.n_edges())));
    }
    let mut deg = vec![0.0f64; n];
    for (&(s, _), &w) in g.edges().iter().zip(weights) {
        deg[s] += w.abs();
    }
    let shift = 0.5 * deg.iter().copied().fold(0.0, f64::max);

    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    for _ in 0..iters {
        let mut next = adjacency_apply(g, weights, &v);
        next.iter_mut().zip(&v).for_each(|(y, x)| *y += shift * x);
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::numerical("power iteration hit a zero or non-finite vector"));
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = next;
        if diff < tol {
            break;
        }
    }
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let av = adjacency_apply(g, weights, &v);
    let lambda = av.iter().zip(&v).map(|(a, b)| a * b).sum();
    Ok((v, lambda))
}

/// `ip` rounds of `w += (epsilon / ip) * delta` with `delta_ij = v_i v_j`
/// scaled to unit max-norm, then a final clip into `[clip_lo, clip_hi]`.
pub fn adversarial_perturb(g: &CellGraph, weights: &[f64], cfg: &PerturbConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if weights.len() != g.n_edges() {
        return Err(Error::shape(format!("{} weights for {} edges", weights.len(), g.n_edges())));
    }
    let mut w = weights.to_vec();
    if cfg.epsilon > 0.0 && g.n_edges() > 0 {
        let step = cfg.epsilon / cfg.ip as f64;
        for _ in 0..cfg.ip {
            let (v, _) = principal_eigenvector(g, &w, cfg.power_iters, cfg.power_tol)?;
            let delta: Vec<f64> = g.edges().iter().map(|&(i, j)| v[i] * v[j]).collect();
            let max = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            if max == 0.0 {
                break;
            }
            for (wk, d) in w.iter_mut().zip(&delta) {
                *wk += step * (d / max);
            }
        }
    }
    for x in &mut w {
        *x = x.clamp(cfg.clip_lo, cfg.clip_hi);
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn k2() -> CellGraph {
        CellGraph::from_undirected(2, &[(0, 1)]).unwrap()
    }

    #[test]
    fn init_weights_examples() {
        let g = CellGraph::from_undirected(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let cfg = PerturbConfig { alpha_min: 1.0, alpha_max: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(init_weights(&g, &cfg, &mut rng).unwrap().iter().all(|&w| w == 1.0));

        let cfg = PerturbConfig { alpha_min: 0.2, alpha_max: 0.7, ..Default::default() };
        let a = init_weights(&g, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = init_weights(&g, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&w| (0.2..=0.7).contains(&w)));
        assert!(g.with_weights(a).is_ok());
    }

    #[test]
    fn k2_closed_form() {
        let g = k2();
        let (v, l) = principal_eigenvector(&g, &[3.0, 3.0], 50, 1e-12).unwrap();
        let h = 0.5f64.sqrt();
        assert!((v[0] - h).abs() < 1e-12 && (v[1] - h).abs() < 1e-12);
        assert!((l - 3.0).abs() < 1e-12);
    }

    #[test]
    fn star_converges_despite_bipartite_spectrum() {
        let g = CellGraph::from_undirected(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let (v, l) = principal_eigenvector(&g, &vec![1.0; 6], 200, 1e-14).unwrap();
        assert!((l - 3f64.sqrt()).abs() < 1e-10);
        let s = 3f64.sqrt();
        let want = [s / 6f64.sqrt(), 1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt()];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn edgeless_graph_is_an_error() {
        let g = CellGraph::new(3, vec![], vec![]).unwrap();
        assert!(principal_eigenvector(&g, &[], 10, 1e-6).is_err());
    }

    #[test]
    fn one_step_on_k2() {
        let cfg = PerturbConfig { epsilon: 0.5, ip: 1, ..Default::default() };
        assert_eq!(adversarial_perturb(&k2(), &[1.0, 1.0], &cfg).unwrap(), vec![1.5, 1.5]);
    }

    #[test]
    fn zero_budget_only_clips() {
        let g = CellGraph::from_undirected(3, &[(0, 1), (1, 2)]).unwrap();
        let cfg = PerturbConfig { epsilon: 0.0, ..Default::default() };
        let w: Vec<f64> = g.edges().iter().map(|&(a, b)| if a.min(b) == 0 { 0.3 } else { 2.0 }).collect();
        assert_eq!(adversarial_perturb(&g, &w, &cfg).unwrap(), w);
        let wild: Vec<f64> = g.edges().iter().map(|&(a, b)| if a.min(b) == 0 { 1e-9 } else { 50.0 }).collect();
        let out = adversarial_perturb(&g, &wild, &cfg).unwrap();
        assert!(out.iter().all(|&x| x == 1e-4 || x == 10.0));
    }
}
