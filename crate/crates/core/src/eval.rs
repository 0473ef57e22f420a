//! Two-sample metrics in a shared PC space, the per-label evaluation
//! protocol, and graph-poisoning attacks with an encoder drift report.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_knn_graph, positional_features, CellGraph};
use crate::ingest::{fit_pca, median, normalize_rows, pca_project, CountMatrix};
use crate::model::{encoder_forward, ModelConfig, ParamStore};
use crate::tensor::Tensor;

/// RBF bandwidth: a fixed positive value or the median pooled distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gamma {
    Fixed(f64),
    Median(MedianBandwidth),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MedianBandwidth {
    Median,
}

impl Gamma {
    pub const MEDIAN: Gamma = Gamma::Median(MedianBandwidth::Median);
}

impl Default for Gamma {
    fn default() -> Self {
        Gamma::MEDIAN
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pcs: usize,
    pub max_support: usize,
    pub gamma: Gamma,
    /// Seed for the Wasserstein subsample.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { pcs: 30, max_support: 1000, gamma: Gamma::MEDIAN, seed: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pcs == 0 {
            return Err(Error::invalid("eval.pcs must be >= 1"));
        }
        if self.max_support == 0 {
            return Err(Error::invalid("eval.max_support must be >= 1"));
        }
        if let Gamma::Fixed(g) = self.gamma {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::invalid("eval.gamma must be positive or \"median\""));
            }
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median_pairwise_distance(x: &Tensor, y: &Tensor) -> f64 {
    let pooled: Vec<&[f64]> = (0..x.rows()).map(|i| x.row(i)).chain((0..y.rows()).map(|i| y.row(i))).collect();
    let d: Vec<f64> = (0..pooled.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let p = &pooled;
            ((i + 1)..p.len()).map(move |j| sq_dist(p[i], p[j]).sqrt())
        })
        .collect();
    median(&d)
}

fn kernel_mean(a: &Tensor, b: &Tensor, two_g2: f64) -> f64 {
    let rows: Vec<f64> = (0..a.rows())
        .into_par_iter()
        .map(|i| (0..b.rows()).map(|j| (-sq_dist(a.row(i), b.row(j)) / two_g2).exp()).sum::<f64>())
        .collect();
    rows.iter().sum::<f64>() / (a.rows() * b.rows()) as f64
}

/// Square root of the biased RBF-kernel MMD estimate.
pub fn rbf_mmd(x: &Tensor, y: &Tensor, gamma: Gamma) -> Result<f64> {
    if x.cols() != y.cols() {
        return Err(Error::shape(format!("mmd: {} vs {} columns", x.cols(), y.cols())));
    }
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::invalid("mmd needs at least one row per sample"));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::numerical("mmd: non-finite input"));
    }
    let g = match gamma {
        Gamma::Fixed(g) => g,
        Gamma::Median(_) => {
            let m = median_pairwise_distance(x, y);
            if m > 0.0 && m.is_finite() {
                m
            } else {
                1.0
            }
        }
    };
    let two_g2 = 2.0 * g * g;
    let v = kernel_mean(x, x, two_g2) + kernel_mean(y, y, two_g2) - 2.0 * kernel_mean(x, y, two_g2);
    Ok(v.max(0.0).sqrt())
}

/// Minimum-cost perfect matching on a square cost matrix (row-major);
/// returns the column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // Potentials formulation with 1-based sentinels.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn canonical_rows(x: &Tensor) -> Tensor {
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.sort_by(|&a, &b| {
        x.row(a).iter().zip(x.row(b)).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    x.select_rows(&idx)
}

fn subsample<R: Rng + ?Sized>(x: &Tensor, s: usize, rng: &mut R) -> Tensor {
    if s >= x.rows() {
        return x.clone();
    }
    let mut idx = sample_indices(rng, x.rows(), s).into_vec();
    idx.sort_unstable();
    x.select_rows(&idx)
}

/// Exact 2-Wasserstein distance between equal-size subsamples of at most
/// `max_support` rows. Rows are put in a canonical order before subsampling,
/// so the result does not depend on input row order.
pub fn wasserstein2<R: Rng + ?Sized>(x: &Tensor, y: &Tensor, max_support: usize, rng: &mut R) -> Result<f64> {
    if x.cols() != y.cols() {
        return Err(Error::shape(format!("wasserstein2: {} vs {} columns", x.cols(), y.cols())));
    }
    if x.rows() == 0 || y.rows() == 0 || max_support == 0 {
        return Err(Error::invalid("wasserstein2 needs at least one row per sample"));
    }
    let s = x.rows().min(y.rows()).min(max_support);
    let xs = subsample(&canonical_rows(x), s, rng);
    let ys = subsample(&canonical_rows(y), s, rng);
    let cost: Vec<f64> = (0..s).into_par_iter().flat_map_iter(|i| {
        let (xs, ys) = (&xs, &ys);
        (0..s).map(move |j| sq_dist(xs.row(i), ys.row(j)))
    }).collect();
    let assign = hungarian(&cost, s);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * s + j]).sum();
    Ok((total / s as f64).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub mmd: f64,
    pub wd: f64,
    pub n_real: usize,
    pub n_gen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mmd: f64,
    pub wd: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_label: Option<BTreeMap<String, LabelMetrics>>,
    pub missing_in_generated: Vec<String>,
    pub absent_in_real: Vec<String>,
    pub n_real: usize,
    pub n_gen: usize,
    pub pcs: usize,
    pub seeds: Vec<u64>,
}

/// Real and generated cells embedded in a PC space fit on the real cells.
pub struct SharedEmbedding {
    pub real: Tensor,
    pub generated: Tensor,
}

pub fn shared_embedding(real: &CountMatrix, generated: &CountMatrix, pcs: usize) -> Result<SharedEmbedding> {
    if real.gene_names != generated.gene_names {
        return Err(Error::invalid("gene mismatch: real and generated gene sets differ or are ordered differently"));
    }
    let cap = real.n_cells().saturating_sub(1).min(real.n_genes());
    if pcs == 0 || pcs > cap {
        return Err(Error::invalid(format!("pcs = {pcs} exceeds min(N_real - 1, D_f) = {cap}")));
    }
    let target = median(&real.row_sums().iter().map(|&s| s as f64).collect::<Vec<_>>());
    if !(target > 0.0) {
        return Err(Error::invalid("real data has a zero median library size"));
    }
    let xr = normalize_rows(real, target);
    let xg = normalize_rows(generated, target);
    let pca = fit_pca(&xr, pcs)?;
    Ok(SharedEmbedding { real: pca_project(&pca, &xr)?, generated: pca_project(&pca, &xg)? })
}

fn rows_with_label(cm: &CountMatrix, name: &str) -> Vec<usize> {
    (0..cm.n_cells()).filter(|&i| cm.label_name(i) == name).collect()
}

fn label_names(cm: &CountMatrix) -> BTreeSet<String> {
    (0..cm.n_cells()).map(|i| cm.label_name(i).to_string()).collect()
}

/// Metrics between real and generated cells; per-label mode averages the
/// metrics over labels present in both.
pub fn evaluation_protocol(real: &CountMatrix, generated: &CountMatrix, cfg: &EvalConfig, per_label: bool) -> Result<MetricReport> {
    cfg.validate()?;
    if generated.n_cells() == 0 {
        return Err(Error::invalid("generated dataset is empty"));
    }
    let emb = shared_embedding(real, generated, cfg.pcs)?;
    let real_labels = label_names(real);
    let gen_labels = label_names(generated);
    let missing: Vec<String> = real_labels.difference(&gen_labels).cloned().collect();
    let absent: Vec<String> = gen_labels.difference(&real_labels).cloned().collect();
    if !absent.is_empty() {
        log::warn!("labels present only in generated data are excluded: {absent:?}");
    }
    let mut report = MetricReport {
        mmd: 0.0,
        wd: 0.0,
        per_label: None,
        missing_in_generated: missing,
        absent_in_real: absent,
        n_real: real.n_cells(),
        n_gen: generated.n_cells(),
        pcs: cfg.pcs,
        seeds: vec![cfg.seed],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if !per_label {
        report.mmd = rbf_mmd(&emb.real, &emb.generated, cfg.gamma)?;
        report.wd = wasserstein2(&emb.real, &emb.generated, cfg.max_support, &mut rng)?;
        return Ok(report);
    }
    let shared: Vec<&String> = real_labels.intersection(&gen_labels).collect();
    if shared.is_empty() {
        return Err(Error::invalid("no label is shared between real and generated data"));
    }
    let mut table = BTreeMap::new();
    for name in shared {
        let r = emb.real.select_rows(&rows_with_label(real, name));
        let g = emb.generated.select_rows(&rows_with_label(generated, name));
        let m = LabelMetrics {
            mmd: rbf_mmd(&r, &g, cfg.gamma)?,
            wd: wasserstein2(&r, &g, cfg.max_support, &mut rng)?,
            n_real: r.rows(),
            n_gen: g.rows(),
        };
        table.insert(name.clone(), m);
    }
    let k = table.len() as f64;
    report.mmd = table.values().map(|m| m.mmd).sum::<f64>() / k;
    report.wd = table.values().map(|m| m.wd).sum::<f64>() / k;
    report.per_label = Some(table);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub mmd: Summary,
    pub wd: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub seeds: Vec<u64>,
    pub mmd: Summary,
    pub wd: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_label: Option<BTreeMap<String, LabelSummary>>,
    pub runs: Vec<MetricReport>,
}

/// Mean and standard deviation across runs (one per seed).
pub fn aggregate(runs: Vec<MetricReport>) -> AggregateReport {
    let seeds = runs.iter().flat_map(|r| r.seeds.iter().copied()).collect();
    let mmd = Summary::of(&runs.iter().map(|r| r.mmd).collect::<Vec<_>>());
    let wd = Summary::of(&runs.iter().map(|r| r.wd).collect::<Vec<_>>());
    let per_label = if runs.iter().all(|r| r.per_label.is_some()) && !runs.is_empty() {
        let mut values: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &runs {
            for (k, m) in r.per_label.as_ref().expect("checked") {
                let e = values.entry(k.clone()).or_default();
                e.0.push(m.mmd);
                e.1.push(m.wd);
            }
        }
        Some(values.into_iter().map(|(k, (m, w))| (k, LabelSummary { mmd: Summary::of(&m), wd: Summary::of(&w) })).collect())
    } else {
        None
    };
    AggregateReport { seeds, mmd, wd, per_label, runs }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Random,
    Dice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub fraction: f64,
    pub seed: u64,
}

fn check_fraction(frac: f64) -> Result<()> {
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::invalid(format!("attack fraction must be in [0, 1), got {frac}")));
    }
    Ok(())
}

fn edge_set(g: &CellGraph) -> Vec<(usize, usize)> {
    g.undirected().map(|(s, d, _)| (s, d)).collect()
}

/// Picks up to `n` removals from `candidates` in random order, skipping any
/// that would leave a node without edges.
fn pick_removals<R: Rng + ?Sized>(
    g: &CellGraph,
    mut candidates: Vec<(usize, usize)>,
    n: usize,
    rng: &mut R,
) -> HashSet<(usize, usize)> {
    let mut degree = vec![0usize; g.n_nodes()];
    for &(s, _) in g.edges() {
        degree[s] += 1;
    }
    candidates.shuffle(rng);
    let mut removed = HashSet::new();
    for (s, d) in candidates {
        if removed.len() == n {
            break;
        }
        if degree[s] > 1 && degree[d] > 1 {
            degree[s] -= 1;
            degree[d] -= 1;
            removed.insert((s, d));
        }
    }
    removed
}

fn insert_random<R: Rng + ?Sized>(
    n_nodes: usize,
    existing: &HashSet<(usize, usize)>,
    allowed: impl Fn(usize, usize) -> bool,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let pool: Vec<(usize, usize)> = (0..n_nodes)
        .flat_map(|i| ((i + 1)..n_nodes).map(move |j| (i, j)))
        .filter(|&(i, j)| allowed(i, j) && !existing.contains(&(i, j)))
        .collect();
    if pool.len() < n {
        return Err(Error::invalid(format!("graph too dense: {n} insertions requested, {} candidate pairs", pool.len())));
    }
    let mut picked: Vec<(usize, usize)> = sample_indices(rng, pool.len(), n).into_iter().map(|k| pool[k]).collect();
    picked.sort_unstable();
    Ok(picked)
}

fn rebuild(g: &CellGraph, removed: &HashSet<(usize, usize)>, added: &[(usize, usize)]) -> Result<CellGraph> {
    let mut pairs: Vec<(usize, usize)> = edge_set(g).into_iter().filter(|e| !removed.contains(e)).collect();
    pairs.extend_from_slice(added);
    CellGraph::from_undirected(g.n_nodes(), &pairs)
}

/// Removes `round(frac * |E_undirected|)` random edges and inserts as many
/// random non-edges. Output edges have unit weight.
pub fn attack_random<R: Rng + ?Sized>(g: &CellGraph, frac: f64, rng: &mut R) -> Result<CellGraph> {
    check_fraction(frac)?;
    let edges = edge_set(g);
    let n = (frac * edges.len() as f64).round() as usize;
    if n == 0 {
        return Ok(g.clone());
    }
    let existing: HashSet<_> = edges.iter().copied().collect();
    let removed = pick_removals(g, edges, n, rng);
    let added = insert_random(g.n_nodes(), &existing, |_, _| true, removed.len(), rng)?;
    rebuild(g, &removed, &added)
}

/// Deletes same-label edges and inserts the same number of cross-label
/// non-edges.
pub fn attack_dice<R: Rng + ?Sized>(g: &CellGraph, labels: &[usize], frac: f64, rng: &mut R) -> Result<CellGraph> {
    check_fraction(frac)?;
    if labels.len() != g.n_nodes() {
        return Err(Error::shape(format!("{} labels for {} nodes", labels.len(), g.n_nodes())));
    }
    let edges = edge_set(g);
    let n = (frac * edges.len() as f64).round() as usize;
    if n == 0 {
        return Ok(g.clone());
    }
    let existing: HashSet<_> = edges.iter().copied().collect();
    let internal: Vec<_> = edges.into_iter().filter(|&(s, d)| labels[s] == labels[d]).collect();
    let removed = pick_removals(g, internal, n, rng);
    let has_cross = (0..g.n_nodes()).any(|i| labels[i] != labels[0]);
    if !has_cross {
        return Err(Error::invalid("DICE: no cross-label pair available"));
    }
    let added = insert_random(g.n_nodes(), &existing, |i, j| labels[i] != labels[j], removed.len(), rng)?;
    rebuild(g, &removed, &added)
}

pub fn apply_attack(g: &CellGraph, labels: &[usize], spec: &AttackSpec) -> Result<CellGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        AttackKind::Random => attack_random(g, spec.fraction, &mut rng),
        AttackKind::Dice => attack_dice(g, labels, spec.fraction, &mut rng),
    }
}

/// A trained encoder to probe.
pub struct EncoderUnderTest<'a> {
    pub name: String,
    pub params: &'a ParamStore,
    pub config: &'a ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub attack: AttackKind,
    pub fraction: f64,
    pub model: String,
    pub drift: f64,
}

fn encode_on(features: &Tensor, g: &CellGraph, model: &EncoderUnderTest<'_>) -> Result<Tensor> {
    let lpe = positional_features(g, model.config.k_pe)?;
    let x = Tensor::hcat(&[features, &lpe])?;
    Ok(encoder_forward(&x, g, model.params, model.config)?.mu)
}

/// Mean per-cell 2-norm change of the encoder mean when the k-NN graph over
/// `coords` is replaced by its attacked version.
pub fn robustness_report(
    features: &Tensor,
    coords: &Tensor,
    labels: &[usize],
    knn_k: usize,
    models: &[EncoderUnderTest<'_>],
    attacks: &[AttackSpec],
) -> Result<Vec<RobustnessRow>> {
    if features.rows() != coords.rows() || labels.len() != coords.rows() {
        return Err(Error::shape("features, coordinates and labels must cover the same cells"));
    }
    let k = knn_k.min(coords.rows().saturating_sub(1)).max(1);
    let clean = build_knn_graph(coords, k)?;
    let mut rows = Vec::with_capacity(attacks.len() * models.len());
    let baselines = models.iter().map(|m| encode_on(features, &clean, m)).collect::<Result<Vec<_>>>()?;
    for spec in attacks {
        let attacked = apply_attack(&clean, labels, spec)?;
        for (m, base) in models.iter().zip(&baselines) {
            let mu = encode_on(features, &attacked, m)?;
            let drift = (0..mu.rows()).map(|i| sq_dist(mu.row(i), base.row(i)).sqrt()).sum::<f64>() / mu.rows() as f64;
            rows.push(RobustnessRow { attack: spec.kind, fraction: spec.fraction, model: m.name.clone(), drift });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::model::init_params;

    fn brute_force_w2(x: &Tensor, y: &Tensor) -> f64 {
        fn permute(k: usize, p: &mut Vec<usize>, x: &Tensor, y: &Tensor, best: &mut f64) {
            if k == p.len() {
                let c: f64 = (0..p.len()).map(|i| sq_dist(x.row(i), y.row(p[i]))).sum();
                *best = best.min(c);
                return;
            }
            for i in k..p.len() {
                p.swap(k, i);
                permute(k + 1, p, x, y, best);
                p.swap(k, i);
            }
        }
        let mut best = f64::INFINITY;
        permute(0, &mut (0..x.rows()).collect(), x, y, &mut best);
        (best / x.rows() as f64).sqrt()
    }

    #[test]
    fn aggregate_over_seeds() {
        let real = toy_counts(30, 0);
        let gen = toy_counts(30, 1);
        let runs = [3, 4]
            .map(|seed| evaluation_protocol(&real, &gen, &EvalConfig { pcs: 4, seed, ..Default::default() }, true).unwrap());
        let agg = aggregate(runs.to_vec());
        assert_eq!(agg.seeds, vec![3, 4]);
        assert!((agg.mmd.mean - 0.5 * (runs[0].mmd + runs[1].mmd)).abs() < 1e-15);
        assert!((agg.wd.std - (runs[0].wd - runs[1].wd).abs() / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg.per_label.unwrap().len(), 2);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for trial in 0..20 {
            let n = 1 + trial % 8;
            let x = Tensor::randn(n, 3, &mut rng);
            let y = Tensor::randn(n, 3, &mut rng);
            let w = wasserstein2(&x, &y, 1000, &mut rng).unwrap();
            assert!((w - brute_force_w2(&x, &y)).abs() < 1e-9);
        }
    }

    #[test]
    fn wasserstein_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(10, 2, &mut rng);
        assert_eq!(wasserstein2(&x, &x, 1000, &mut rng).unwrap(), 0.0);
        let a = Tensor::row_vector(&[0.0, 0.0]);
        let b = Tensor::row_vector(&[3.0, 4.0]);
        assert_eq!(wasserstein2(&a, &b, 10, &mut rng).unwrap(), 5.0);
        let shuffled = x.select_rows(&[3, 1, 4, 0, 5, 9, 2, 6, 8, 7]);
        let y = Tensor::randn(10, 2, &mut rng);
        let w1 = wasserstein2(&x, &y, 6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let w2 = wasserstein2(&shuffled, &y, 6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn mmd_closed_forms() {
        let x = Tensor::randn(30, 3, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(rbf_mmd(&x, &x, Gamma::MEDIAN).unwrap() < 1e-12);
        let a = Tensor::row_vector(&[0.0, 0.0]);
        let b = Tensor::row_vector(&[1.0, 1.0]);
        let g = 0.7;
        let d2: f64 = 2.0;
        let expect = (2.0 - 2.0 * (-d2 / (2.0 * g * g)).exp()).sqrt();
        assert!((rbf_mmd(&a, &b, Gamma::Fixed(g)).unwrap() - expect).abs() < 1e-15);
        let y = Tensor::randn(20, 3, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(rbf_mmd(&x, &y, Gamma::MEDIAN).unwrap(), rbf_mmd(&y, &x, Gamma::MEDIAN).unwrap());
    }

    #[test]
    fn mmd_grows_with_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = Tensor::from_vec(500, 1, (0..500).map(|_| normal.sample(&mut rng)).collect()).unwrap();
        let mut prev = -1.0;
        for delta in [0.0, 1.0, 2.0] {
            let y = Tensor::from_vec(500, 1, (0..500).map(|_| normal.sample(&mut rng) + delta).collect()).unwrap();
            let m = rbf_mmd(&x, &y, Gamma::MEDIAN).unwrap();
            assert!(m > prev);
            prev = m;
        }
    }

    fn toy_counts(n: usize, seed: u64) -> CountMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = (0..n * 8).map(|_| rng.random_range(0..20)).collect();
        let labels = (0..n).map(|i| if i % 3 == 0 { "A" } else { "B" }.to_string()).collect::<Vec<_>>();
        CountMatrix::with_string_labels(n, 8, counts, &labels, (0..8).map(|j| format!("g{j}")).collect()).unwrap()
    }

    #[test]
    fn protocol_self_distance_and_missing_labels() {
        let real = toy_counts(30, 0);
        let cfg = EvalConfig { pcs: 4, ..Default::default() };
        let r = evaluation_protocol(&real, &real, &cfg, false).unwrap();
        assert!(r.mmd < 1e-9 && r.wd < 1e-9);
        let r = evaluation_protocol(&real, &real, &cfg, true).unwrap();
        assert!(r.mmd < 1e-9 && r.wd < 1e-9);
        assert_eq!(r.per_label.unwrap().len(), 2);

        let only_b: Vec<usize> = (0..30).filter(|i| i % 3 != 0).collect();
        let gen = real.select_cells(&only_b);
        let r = evaluation_protocol(&real, &gen, &cfg, true).unwrap();
        assert_eq!(r.missing_in_generated, vec!["A".to_string()]);

        let mut other = real.clone();
        other.gene_names[0] = "zz".into();
        assert!(evaluation_protocol(&real, &other, &cfg, false).is_err());
        assert!(evaluation_protocol(&real, &real, &EvalConfig { pcs: 9, ..cfg }, false).is_err());
    }

    fn ring(n: usize) -> CellGraph {
        let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        pairs.extend((0..n).map(|i| (i, (i + 2) % n)));
        let pairs: Vec<_> = pairs.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
        CellGraph::from_undirected(n, &pairs).unwrap()
    }

    #[test]
    fn random_attack_preserves_edge_count() {
        let g = ring(12);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert_eq!(attack_random(&g, 0.01, &mut rng).unwrap(), g);
        let a = attack_random(&g, 0.3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = attack_random(&g, 0.3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_edges(), g.n_edges());
        assert_ne!(a, g);
        assert!(a.edges().iter().all(|&(s, d)| s != d));
    }

    #[test]
    fn dice_deletes_inside_and_connects_across() {
        let g = ring(16);
        let labels: Vec<usize> = (0..16).map(|i| i / 8).collect();
        let a = attack_dice(&g, &labels, 0.4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let before: HashSet<_> = edge_set(&g).into_iter().collect();
        let after: HashSet<_> = edge_set(&a).into_iter().collect();
        let deleted: Vec<_> = before.difference(&after).collect();
        let inserted: Vec<_> = after.difference(&before).collect();
        assert!(!deleted.is_empty());
        assert_eq!(deleted.len(), inserted.len());
        assert!(deleted.iter().all(|&&(s, d)| labels[s] == labels[d]));
        assert!(inserted.iter().all(|&&(s, d)| labels[s] != labels[d]));
        assert!(attack_dice(&g, &[0; 16], 0.4, &mut ChaCha8Rng::seed_from_u64(8)).is_err());
    }

    #[test]
    fn robustness_rows_and_zero_attack() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ModelConfig { d_lat: 2, d_hid: 4, k_cheb: 2, k_pe: 2, label_count: 2, n_genes: 3, ..Default::default() };
        let pa = init_params(&cfg, &mut rng).unwrap();
        let pb = init_params(&cfg, &mut rng).unwrap();
        let feats = Tensor::randn(20, 3, &mut rng);
        let coords = Tensor::randn(20, 2, &mut rng);
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let models = [
            EncoderUnderTest { name: "a".into(), params: &pa, config: &cfg },
            EncoderUnderTest { name: "b".into(), params: &pb, config: &cfg },
        ];
        let attacks = [
            AttackSpec { kind: AttackKind::Random, fraction: 0.0, seed: 1 },
            AttackSpec { kind: AttackKind::Random, fraction: 0.2, seed: 1 },
            AttackSpec { kind: AttackKind::Dice, fraction: 0.2, seed: 1 },
        ];
        let rows = robustness_report(&feats, &coords, &labels, 4, &models, &attacks).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].drift, 0.0);
        assert_eq!(rows[1].drift, 0.0);
        assert!(rows.iter().all(|r| r.drift >= 0.0));
        assert!(rows[2..].iter().any(|r| r.drift > 0.0));
    }
}
