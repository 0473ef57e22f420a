//! k-NN cell graphs, the symmetric normalized Laplacian, and Laplacian
//! positional encodings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::SymmetricOperator;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Directed edge list closed under reversal, with positive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    weights: Vec<f64>,
    reverse: Vec<usize>,
}

impl CellGraph {
    /// Validates and sorts the edges by `(src, dst)`.
    pub fn new(n_nodes: usize, edges: Vec<(usize, usize)>, weights: Vec<f64>) -> Result<Self> {
        if edges.len() != weights.len() {
            return Err(Error::shape(format!("{} edges but {} weights", edges.len(), weights.len())));
        }
        let mut index = BTreeMap::new();
        for (k, &(s, d)) in edges.iter().enumerate() {
            if s >= n_nodes || d >= n_nodes {
                return Err(Error::invalid(format!("edge ({s},{d}) outside {n_nodes} nodes")));
            }
            if s == d {
                return Err(Error::invalid(format!("self-loop at node {s}")));
            }
            if !(weights[k] > 0.0 && weights[k].is_finite()) {
                return Err(Error::invalid(format!("edge ({s},{d}) has non-positive weight {}", weights[k])));
            }
            if index.insert((s, d), weights[k]).is_some() {
                return Err(Error::invalid(format!("duplicate edge ({s},{d})")));
            }
        }
        for (&(s, d), &w) in &index {
            match index.get(&(d, s)) {
                Some(&rw) if rw == w => {}
                Some(_) => return Err(Error::invalid(format!("edge ({s},{d}) weight differs from its reverse"))),
                None => return Err(Error::invalid(format!("edge ({s},{d}) has no reverse"))),
            }
        }
        let edges: Vec<(usize, usize)> = index.keys().copied().collect();
        let weights: Vec<f64> = index.values().copied().collect();
        let pos: BTreeMap<(usize, usize), usize> = edges.iter().enumerate().map(|(k, &e)| (e, k)).collect();
        let reverse = edges.iter().map(|&(s, d)| pos[&(d, s)]).collect();
        Ok(Self { n_nodes, edges, weights, reverse })
    }

    /// Unit-weight graph from undirected pairs (each pair added both ways).
    pub fn from_undirected(n_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut edges = Vec::with_capacity(2 * pairs.len());
        for &(a, b) in pairs {
            edges.push((a, b));
            edges.push((b, a));
        }
        let w = vec![1.0; edges.len()];
        Self::new(n_nodes, edges, w)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index of the reversed edge for every edge.
    pub fn reverse_index(&self) -> &[usize] {
        &self.reverse
    }

    pub fn has_edge(&self, s: usize, d: usize) -> bool {
        self.edges.binary_search(&(s, d)).is_ok()
    }

    /// Undirected pairs `(i, j)` with `i < j`, with edge index of `(i, j)`.
    pub fn undirected(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.edges.iter().enumerate().filter(|(_, (s, d))| s < d).map(|(k, &(s, d))| (s, d, k))
    }

    /// Same topology with new per-edge weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.edges.len() {
            return Err(Error::shape(format!("{} weights for {} edges", weights.len(), self.edges.len())));
        }
        for (k, &w) in weights.iter().enumerate() {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("edge {k} has non-positive weight {w}")));
            }
            if weights[self.reverse[k]] != w {
                return Err(Error::invalid(format!("edge {k} weight differs from its reverse")));
            }
        }
        Ok(Self { weights, ..self.clone() })
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let edges = self.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        Self::new(self.n_nodes, edges, self.weights.clone())
    }

    /// Connected component id per node, numbered in order of first node.
    pub fn components(&self) -> Vec<usize> {
        let mut comp = vec![usize::MAX; self.n_nodes];
        let adj = self.adjacency_lists();
        let mut next = 0;
        for start in 0..self.n_nodes {
            if comp[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            comp[start] = next;
            while let Some(u) = stack.pop() {
                for &v in &adj[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(s, d) in &self.edges {
            adj[s].push(d);
        }
        adj
    }

    pub fn to_edge_tsv(&self) -> String {
        let mut s = String::new();
        for (&(a, b), w) in self.edges.iter().zip(&self.weights) {
            let _ = writeln!(s, "{a}\t{b}\t{w}");
        }
        s
    }

    pub fn write_edge_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Symmetrized k-nearest-neighbor graph in Euclidean space, unit weights.
pub fn build_knn_graph(coords: &Tensor, k: usize) -> Result<CellGraph> {
    let n = coords.rows();
    if n < 2 {
        return Err(Error::invalid(format!("k-NN graph needs at least 2 points, got {n}")));
    }
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} must be in 1..{n}")));
    }
    if !coords.is_finite() {
        return Err(Error::invalid("non-finite coordinates"));
    }
    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = coords.row(i);
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (xi.iter().zip(coords.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.truncate(k);
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    let mut set = std::collections::BTreeSet::new();
    for (i, nb) in neighbors.iter().enumerate() {
        for &j in nb {
            set.insert((i, j));
            set.insert((j, i));
        }
    }
    let edges: Vec<(usize, usize)> = set.into_iter().collect();
    let w = vec![1.0; edges.len()];
    CellGraph::new(n, edges, w)
}

/// Weighted out-degree of every node.
pub fn degree_vector(g: &CellGraph) -> Result<Vec<f64>> {
    let mut d = vec![0.0; g.n_nodes];
    for (&(s, _), &w) in g.edges.iter().zip(&g.weights) {
        d[s] += w;
    }
    if let Some(i) = d.iter().position(|&x| x <= 0.0) {
        return Err(Error::invalid(format!("isolated node {i}")));
    }
    Ok(d)
}

/// `D^{-1/2} A D^{-1/2}` held as per-edge coefficients.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    n: usize,
    edges: Vec<(usize, usize)>,
    coef: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn new(g: &CellGraph) -> Result<Self> {
        let d = degree_vector(g)?;
        let inv: Vec<f64> = d.iter().map(|x| 1.0 / x.sqrt()).collect();
        let coef = g.edges.iter().zip(&g.weights).map(|(&(s, t), &w)| w * inv[s] * inv[t]).collect();
        Ok(Self { n: g.n_nodes, edges: g.edges.clone(), coef })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// `y = alpha * x + beta * Â x`, column-wise over an `N x F` block.
    fn combine(&self, x: &[f64], f: usize, alpha: f64, beta: f64) -> Vec<f64> {
        let mut y: Vec<f64> = x.iter().map(|v| alpha * v).collect();
        for (&(s, t), &c) in self.edges.iter().zip(&self.coef) {
            let bc = beta * c;
            let (src, dst) = (&x[t * f..(t + 1) * f], s * f);
            for (o, v) in y[dst..dst + f].iter_mut().zip(src) {
                *o += bc * v;
            }
        }
        y
    }

    pub fn laplacian_apply(&self, x: &[f64]) -> Vec<f64> {
        self.combine(x, 1, 1.0, -1.0)
    }

    pub fn dense_laplacian(&self) -> Tensor {
        let mut l = Tensor::identity(self.n);
        for (&(s, t), &c) in self.edges.iter().zip(&self.coef) {
            l[(s, t)] -= c;
        }
        l
    }
}

/// `L_norm - I` (the Laplacian rescaled with `lambda_max = 2`), which is the
/// operator the Chebyshev recurrence runs on.
#[derive(Debug, Clone)]
pub struct ScaledLaplacian(NormalizedAdjacency);

impl ScaledLaplacian {
    pub fn new(g: &CellGraph) -> Result<Rc<Self>> {
        Ok(Rc::new(Self(NormalizedAdjacency::new(g)?)))
    }
}

impl SymmetricOperator for ScaledLaplacian {
    fn dim(&self) -> usize {
        self.0.n
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let y = self.0.combine(x.data(), x.cols(), 0.0, -1.0);
        Tensor::from_vec(x.rows(), x.cols(), y).expect("same shape")
    }
}

/// `(I - D^{-1/2} A D^{-1/2}) x`, computed edge-wise.
pub fn normalized_laplacian_apply(g: &CellGraph, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != g.n_nodes {
        return Err(Error::shape(format!("vector of length {} on a {}-node graph", x.len(), g.n_nodes)));
    }
    Ok(NormalizedAdjacency::new(g)?.laplacian_apply(x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpeMatrix {
    /// `N x k_pe`, one eigenvector per column.
    pub vectors: Tensor,
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenSolver {
    /// Dense decomposition up to [`DENSE_LIMIT`] nodes, Lanczos beyond.
    Auto,
    Dense,
    Lanczos,
}

pub const DENSE_LIMIT: usize = 512;
const LANCZOS_TOL: f64 = 1e-8;
const LANCZOS_MAX_ITERS: usize = 5000;

/// Normalized kernel directions `D^{1/2} 1_C`, one per connected component.
fn trivial_directions(g: &CellGraph, degrees: &[f64]) -> Vec<Vec<f64>> {
    let comp = g.components();
    let n_comp = comp.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![vec![0.0; g.n_nodes]; n_comp];
    for (i, &c) in comp.iter().enumerate() {
        out[c][i] = degrees[i].sqrt();
    }
    for v in &mut out {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
    }
    out
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Eigenvectors of `L_norm` for the `k_pe` smallest eigenvalues, skipping one
/// zero-eigenvalue direction per connected component.
pub fn compute_lpe(g: &CellGraph, k_pe: usize) -> Result<LpeMatrix> {
    compute_lpe_with(g, k_pe, EigenSolver::Auto)
}

pub fn compute_lpe_with(g: &CellGraph, k_pe: usize, solver: EigenSolver) -> Result<LpeMatrix> {
    lpe_impl(g, k_pe, solver, true)
}

fn lpe_impl(g: &CellGraph, k_pe: usize, solver: EigenSolver, warn_disconnected: bool) -> Result<LpeMatrix> {
    let n = g.n_nodes;
    let adj = NormalizedAdjacency::new(g)?;
    let degrees = degree_vector(g)?;
    let trivial = trivial_directions(g, &degrees);
    if trivial.len() > 1 && warn_disconnected {
        log::warn!("graph has {} connected components; excluding one kernel direction per component", trivial.len());
    }
    let available = n - trivial.len();
    if k_pe == 0 || k_pe > available {
        return Err(Error::invalid(format!(
            "k_pe = {k_pe} too large: {available} non-trivial directions available"
        )));
    }
    let use_dense = match solver {
        EigenSolver::Auto => n <= DENSE_LIMIT,
        EigenSolver::Dense => true,
        EigenSolver::Lanczos => false,
    };
    let (values, mut vectors) = if use_dense {
        dense_smallest(&adj, &trivial, k_pe)
    } else {
        lanczos_smallest(&adj, &trivial, k_pe)?
    };
    let mut out = Tensor::zeros(n, k_pe);
    for (c, v) in vectors.iter_mut().enumerate() {
        fix_sign(v);
        for (r, &x) in v.iter().enumerate() {
            out[(r, c)] = x;
        }
    }
    Ok(LpeMatrix { vectors: out, eigenvalues: values })
}

/// LPE block of width `k_pe` for model input; when the graph has fewer
/// non-trivial directions than `k_pe`, the missing columns are zero.
pub fn positional_features(g: &CellGraph, k_pe: usize) -> Result<Tensor> {
    let n_comp = g.components().into_iter().max().map_or(0, |m| m + 1);
    let available = g.n_nodes.saturating_sub(n_comp);
    let k = k_pe.min(available);
    let mut out = Tensor::zeros(g.n_nodes, k_pe);
    if k == 0 {
        return Ok(out);
    }
    if k < k_pe {
        log::debug!("only {k} of {k_pe} positional columns available; padding with zeros");
    }
    let lpe = lpe_impl(g, k, EigenSolver::Auto, false)?;
    for i in 0..g.n_nodes {
        out.row_mut(i)[..k].copy_from_slice(lpe.vectors.row(i));
    }
    Ok(out)
}

fn dense_smallest(adj: &NormalizedAdjacency, trivial: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = adj.n;
    let mut l = adj.dense_laplacian();
    // Lift the kernel directions above the spectrum (which lies in [0, 2]).
    for q in trivial {
        for i in 0..n {
            for j in 0..n {
                l[(i, j)] += 3.0 * q[i] * q[j];
            }
        }
    }
    let eig = DMatrix::from_row_slice(n, n, l.data()).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order[..k].iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = order[..k].iter().map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
    (values, vectors)
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Lanczos with full reorthogonalization on `2I - L` restricted to the
/// complement of the kernel directions, so the largest Ritz values map to
/// the smallest non-trivial Laplacian eigenvalues. A single start vector
/// resolves one vector per distinct eigenvalue.
fn lanczos_smallest(
    adj: &NormalizedAdjacency,
    trivial: &[Vec<f64>],
    k: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    use rand::Rng;
    let n = adj.n;
    let dim = n - trivial.len();
    let max_steps = dim.min(LANCZOS_MAX_ITERS);
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a4c_2b0f);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    orthogonalize(&mut v, trivial);
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut basis: Vec<Vec<f64>> = vec![v];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    loop {
        let m = basis.len();
        let q = &basis[m - 1];
        // w = (2I - L) q = q + Â q
        let mut w = adj.combine(q, 1, 1.0, 1.0);
        let a: f64 = w.iter().zip(q).map(|(x, y)| x * y).sum();
        alphas.push(a);
        let scale = norm(&w);
        for _ in 0..2 {
            orthogonalize(&mut w, trivial);
            orthogonalize(&mut w, &basis);
        }
        let b = norm(&w);
        let breakdown = b <= 1e-10 * scale.max(1.0);

        let converged_or_done = m >= max_steps || breakdown || (m >= k && m.is_multiple_of(5));
        if converged_or_done {
            let (theta, s) = tridiagonal_eigen(&alphas, &betas);
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&x, &y| theta[y].total_cmp(&theta[x]));
            let top = &order[..k.min(m)];
            let exhausted = m >= max_steps || breakdown;
            let converged = top.len() == k && top.iter().all(|&i| (b * s[(m - 1, i)]).abs() < LANCZOS_TOL);
            if converged || exhausted {
                if top.len() < k || !converged && m < dim {
                    return Err(Error::numerical(format!(
                        "Lanczos did not converge for {k} eigenpairs after {m} iterations"
                    )));
                }
                let mut values = Vec::with_capacity(k);
                let mut vectors = Vec::with_capacity(k);
                for &i in top {
                    values.push((2.0 - theta[i]).max(0.0));
                    let mut y = vec![0.0; n];
                    for (j, qj) in basis.iter().enumerate() {
                        let c = s[(j, i)];
                        y.iter_mut().zip(qj).for_each(|(o, x)| *o += c * x);
                    }
                    let ny = norm(&y);
                    y.iter_mut().for_each(|x| *x /= ny);
                    vectors.push(y);
                }
                return Ok((values, vectors));
            }
        }
        betas.push(b);
        w.iter_mut().for_each(|x| *x /= b);
        basis.push(w);
    }
}

fn tridiagonal_eigen(alphas: &[f64], betas: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let m = alphas.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alphas[i];
        if i + 1 < m {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = t.symmetric_eigen();
    (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
}
