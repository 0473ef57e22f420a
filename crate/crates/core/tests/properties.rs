mod common;

use lapddpm::eval::{evaluation_protocol, rbf_mmd, shared_embedding, wasserstein2, EvalConfig, Gamma};
use lapddpm::graph::{build_knn_graph, normalized_laplacian_apply};
use lapddpm::ingest::{filter_genes, fit_pca, normalize_log, pca_project, CountMatrix, TargetSum};
use lapddpm::model::{encoder_forward, init_params, scorenet_forward};
use lapddpm::perturb::{adversarial_perturb, init_weights, PerturbConfig};
use lapddpm::tensor::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng(seed));
    p
}

/// Row `perm[i]` of the result is row `i` of `x`.
fn scatter_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(p).copy_from_slice(x.row(i));
    }
    out
}

fn sorted_edges(edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut e = edges.to_vec();
    e.sort();
    e
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn knn_is_permutation_equivariant(n in 4usize..40, k in 1usize..6, seed in any::<u64>()) {
        let k = k.min(n - 1);
        let coords = Tensor::randn(n, 3, &mut rng(seed));
        let perm = permutation(n, seed ^ 1);
        let g = build_knn_graph(&coords, k).unwrap();
        let gp = build_knn_graph(&scatter_rows(&coords, &perm), k).unwrap();
        let relabeled: Vec<_> = g.edges().iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        prop_assert_eq!(sorted_edges(&relabeled), sorted_edges(gp.edges()));
    }

    #[test]
    fn laplacian_is_positive_semidefinite(n in 3usize..40, k in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = build_knn_graph(&Tensor::randn(n, 2, &mut r), k.min(n - 1)).unwrap();
        let x = Tensor::randn(n, 1, &mut r);
        let lx = normalized_laplacian_apply(&g, x.data()).unwrap();
        let q: f64 = x.data().iter().zip(&lx).map(|(a, b)| a * b).sum();
        prop_assert!(q >= -1e-10);
    }

    #[test]
    fn encoder_is_permutation_equivariant(seed in any::<u64>()) {
        let n = 6;
        let cfg = common::tiny_model(5, 2);
        let mut r = rng(seed);
        let params = init_params(&cfg, &mut r).unwrap();
        let g = build_knn_graph(&Tensor::randn(n, 2, &mut r), 2).unwrap();
        let feats = Tensor::randn(n, cfg.encoder_input_width(), &mut r);
        let perm = permutation(n, seed ^ 2);
        let out = encoder_forward(&feats, &g, &params, &cfg).unwrap();
        let outp = encoder_forward(&scatter_rows(&feats, &perm), &g.permuted(&perm).unwrap(), &params, &cfg).unwrap();
        prop_assert!(scatter_rows(&out.mu, &perm).max_abs_diff(&outp.mu) < 1e-12);
        prop_assert!(scatter_rows(&out.log_var, &perm).max_abs_diff(&outp.log_var) < 1e-12);
    }

    #[test]
    fn unconditional_scores_ignore_labels(seed in any::<u64>()) {
        let n = 7;
        let cfg = common::tiny_model(5, 3);
        let mut r = rng(seed);
        let params = init_params(&cfg, &mut r).unwrap();
        let z = Tensor::randn(n, cfg.d_lat, &mut r);
        let t: Vec<f64> = (0..n).map(|i| 0.1 + 0.3 * i as f64).collect();
        let a: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let b: Vec<usize> = (0..n).map(|i| (i + 1) % 3).collect();
        let drop = vec![true; n];
        let ya = scorenet_forward(&z, &t, &a, &drop, &params, &cfg).unwrap();
        let yb = scorenet_forward(&z, &t, &b, &drop, &params, &cfg).unwrap();
        prop_assert_eq!(ya.data(), yb.data());
    }

    #[test]
    fn perturbation_is_symmetric_and_bounded(n in 4usize..30, eps in 0.0f64..50.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = build_knn_graph(&Tensor::randn(n, 2, &mut r), 3.min(n - 1)).unwrap();
        let cfg = PerturbConfig { epsilon: eps, ..Default::default() };
        let w = init_weights(&g, &cfg, &mut r).unwrap();
        let out = adversarial_perturb(&g, &w, &cfg).unwrap();
        prop_assert_eq!(&out, &adversarial_perturb(&g, &w, &cfg).unwrap());
        for (e, &rev) in g.reverse_index().iter().enumerate() {
            prop_assert_eq!(out[e], out[rev]);
            prop_assert!((cfg.clip_lo..=cfg.clip_hi).contains(&out[e]));
        }
    }

    #[test]
    fn mmd_is_symmetric_and_nonnegative(n in 1usize..30, m in 1usize..30, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::randn(n, 3, &mut r);
        let y = Tensor::randn(m, 3, &mut r).map(|v| v + 0.5);
        let a = rbf_mmd(&x, &y, Gamma::MEDIAN).unwrap();
        let b = rbf_mmd(&y, &x, Gamma::MEDIAN).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn wasserstein_metric_axioms(n in 1usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::randn(n, 2, &mut r);
        let y = Tensor::randn(n, 2, &mut r);
        let z = Tensor::randn(n, 2, &mut r);
        let w = |a: &Tensor, b: &Tensor| wasserstein2(a, b, 1000, &mut rng(0)).unwrap();
        prop_assert!(w(&x, &x) < 1e-12);
        prop_assert!((w(&x, &y) - w(&y, &x)).abs() < 1e-12);
        prop_assert!(w(&x, &z) <= w(&x, &y) + w(&y, &z) + 1e-12);
    }

    #[test]
    fn normalization_ignores_row_scale(k in 1u32..20, seed in any::<u64>()) {
        let cm = common::synthetic_counts(6, 8, seed);
        let mut scaled = cm.counts().to_vec();
        scaled[..8].iter_mut().for_each(|c| *c *= k);
        let cm2 = CountMatrix::new(6, 8, scaled, cm.cell_labels.clone(), cm.label_vocab.clone(), cm.gene_names.clone()).unwrap();
        let a = normalize_log(&cm, TargetSum::Fixed(1e4)).unwrap();
        let b = normalize_log(&cm2, TargetSum::Fixed(1e4)).unwrap();
        for (x, y) in a.row(0).iter().zip(b.row(0)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gene_filter_is_idempotent(min_cells in 0usize..12, seed in any::<u64>()) {
        let cm = common::synthetic_counts(12, 15, seed);
        let once = filter_genes(&cm, min_cells);
        if let Ok(once) = once {
            let twice = filter_genes(&once.counts, min_cells).unwrap();
            prop_assert!(twice.gene_mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn pca_variances(n in 3usize..20, d in 2usize..10, seed in any::<u64>()) {
        let x = Tensor::randn(n, d, &mut rng(seed));
        let p = (n - 1).min(d);
        let pca = fit_pca(&x, p).unwrap();
        let ev = &pca.explained_variance;
        prop_assert!(ev.windows(2).all(|w| w[0] >= w[1]) && ev.iter().all(|&v| v >= 0.0));
        let total: f64 = (0..d).map(|j| variance(&x.column(j))).sum();
        prop_assert!((ev.iter().sum::<f64>() - total).abs() < 1e-8);
        let scores = pca_project(&pca, &x).unwrap();
        for (j, v) in ev.iter().enumerate() {
            prop_assert!((variance(&scores.column(j)) - v).abs() < 1e-6);
        }
    }
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn shuffled(cm: &CountMatrix, seed: u64) -> CountMatrix {
    cm.select_cells(&permutation(cm.n_cells(), seed))
}

#[test]
fn protocol_is_invariant_to_row_order() {
    let real = common::synthetic_counts(60, 25, 1);
    let gen = common::synthetic_counts(45, 25, 2);
    let cfg = EvalConfig { pcs: 5, ..Default::default() };
    let base = evaluation_protocol(&real, &gen, &cfg, true).unwrap();
    for (r, g) in [(shuffled(&real, 3), gen.clone()), (real.clone(), shuffled(&gen, 4))] {
        let rep = evaluation_protocol(&r, &g, &cfg, true).unwrap();
        assert!((rep.mmd - base.mmd).abs() < 1e-12);
        assert!((rep.wd - base.wd).abs() < 1e-12, "{} vs {}", rep.wd, base.wd);
    }
}

#[test]
fn embedding_is_fit_on_real_cells_only() {
    let real = common::synthetic_counts(40, 20, 5);
    let gen = common::synthetic_counts(30, 20, 6);
    let other = common::synthetic_counts(30, 20, 7);
    let a = shared_embedding(&real, &gen, 6).unwrap();
    let b = shared_embedding(&real, &other, 6).unwrap();
    assert_eq!(a.real, b.real);
}
