#![allow(dead_code)]

use lapddpm::ingest::CountMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

pub const TYPES: [&str; 3] = ["alpha", "beta", "gamma"];

/// Three cell types (assigned round-robin) with type-specific Poisson rate
/// vectors.
pub fn synthetic_counts(n: usize, n_genes: usize, seed: u64) -> CountMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let base: Vec<f64> = (0..n_genes).map(|_| 0.8 + normal.sample(&mut rng)).collect();
    let rates: Vec<Vec<f64>> = TYPES
        .iter()
        .map(|_| base.iter().map(|b| (b + 0.9 * normal.sample(&mut rng)).exp()).collect())
        .collect();
    let mut counts = Vec::with_capacity(n * n_genes);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = i % TYPES.len();
        labels.push(TYPES[t].to_string());
        loop {
            let row: Vec<u32> = rates[t].iter().map(|&r| Poisson::new(r).unwrap().sample(&mut rng) as u32).collect();
            if row.iter().any(|&c| c > 0) {
                counts.extend(row);
                break;
            }
        }
    }
    let genes = (0..n_genes).map(|j| format!("gene{j:03}")).collect();
    CountMatrix::with_string_labels(n, n_genes, counts, &labels, genes).unwrap()
}

/// Seeded random split into (train, test) with `train_frac` of the cells.
pub fn split(cm: &CountMatrix, train_frac: f64, seed: u64) -> (CountMatrix, CountMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..cm.n_cells()).collect();
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_train = (train_frac * cm.n_cells() as f64).round() as usize;
    let (a, b) = idx.split_at(n_train);
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (cm.select_cells(&a), cm.select_cells(&b))
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns ascending eigenvalues and the matching unit eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[x][x].total_cmp(&m[y][y]));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|r| v[r][i]).collect()).collect();
    (values, vectors)
}

/// Dense `I - D^{-1/2} A D^{-1/2}` built straight from an edge list.
pub fn dense_normalized_laplacian(n: usize, edges: &[(usize, usize)], weights: &[f64]) -> Vec<Vec<f64>> {
    let mut deg = vec![0.0; n];
    for (&(s, _), &w) in edges.iter().zip(weights) {
        deg[s] += w;
    }
    let mut l: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for (&(s, d), &w) in edges.iter().zip(weights) {
        l[s][d] -= w / (deg[s] * deg[d]).sqrt();
    }
    l
}

/// A small model for fast tests.
pub fn tiny_model(n_genes: usize, label_count: usize) -> lapddpm::model::ModelConfig {
    lapddpm::model::ModelConfig {
        d_lat: 4,
        d_hid: 8,
        d_hid_mlp: 16,
        k_cheb: 2,
        n_enc_layers: 2,
        n_score_layers: 2,
        k_pe: 3,
        time_embed_dim: 8,
        label_embed_dim: 4,
        p_uncond: 0.1,
        label_count,
        n_genes,
    }
}
