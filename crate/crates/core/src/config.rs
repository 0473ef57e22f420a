//! Top-level run configuration: one JSON object with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSchedule, GuidanceConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::ingest::PreprocessConfig;
use crate::model::ModelConfig;
use crate::perturb::PerturbConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub perturb: PerturbConfig,
    pub diffusion: DiffusionSchedule,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.perturb.validate()?;
        self.diffusion.validate()?;
        self.guidance.validate()?;
        self.eval.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Every configuration key with its default and meaning.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("preprocess.min_cells", "3", "keep genes detected in at least this many cells"),
    ("preprocess.target_sum", "\"median\"", "per-cell library size after normalization, or \"median\""),
    ("preprocess.p_pca", "30", "principal components used for k-NN graphs"),
    ("model.d_lat", "32", "latent dimension"),
    ("model.d_hid", "128", "encoder and decoder hidden width"),
    ("model.d_hid_mlp", "256", "noise-predictor hidden width"),
    ("model.k_cheb", "3", "Chebyshev polynomial order of each graph layer"),
    ("model.n_enc_layers", "2", "graph convolution layers in the encoder"),
    ("model.n_score_layers", "3", "hidden blocks in the noise predictor"),
    ("model.k_pe", "8", "Laplacian positional encoding width"),
    ("model.time_embed_dim", "64", "time embedding width (even)"),
    ("model.label_embed_dim", "32", "label embedding width"),
    ("model.p_uncond", "0.1", "probability of dropping the label during training"),
    ("model.label_count", "0", "number of labels (0: taken from data)"),
    ("model.n_genes", "0", "number of genes after filtering (0: taken from data)"),
    ("train.epochs", "200", "training epochs"),
    ("train.batch_size", "256", "cells per batch (>= 2)"),
    ("train.learning_rate", "0.001", "initial Adam learning rate; cosine decay to 10%"),
    ("train.w_diff", "1.0", "weight of the denoising loss"),
    ("train.w_kl", "0.001", "weight of the KL loss"),
    ("train.w_rec", "1.0", "weight of the Poisson reconstruction loss"),
    ("train.mask_fraction", "0.2", "fraction of input entries zeroed, in [0, 1)"),
    ("train.grad_clip_norm", "1.0", "global gradient norm bound"),
    ("train.knn_k", "15", "neighbors per cell in batch graphs"),
    ("train.seed", "0", "training seed"),
    ("train.disable_perturb", "false", "skip edge-weight perturbation"),
    ("train.disable_mask", "false", "skip input masking"),
    ("train.disable_lpe", "false", "replace positional encodings with zeros"),
    ("perturb.alpha_min", "0.9", "lower bound of initial edge weights"),
    ("perturb.alpha_max", "1.1", "upper bound of initial edge weights"),
    ("perturb.epsilon", "0.5", "total perturbation budget"),
    ("perturb.ip", "3", "perturbation rounds"),
    ("perturb.clip_lo", "0.0001", "minimum edge weight"),
    ("perturb.clip_hi", "10.0", "maximum edge weight"),
    ("perturb.power_iters", "50", "power iteration cap per round"),
    ("perturb.power_tol", "1e-6", "power iteration tolerance"),
    ("diffusion.T", "3.0", "diffusion time horizon"),
    ("diffusion.t_min", "0.001", "smallest diffusion time"),
    ("diffusion.n_steps", "500", "reverse sampler steps"),
    ("guidance.scale", "1.0", "classifier-free guidance scale (1: conditional, 0: unconditional)"),
    ("eval.pcs", "30", "principal components for metrics"),
    ("eval.max_support", "1000", "subsample size cap for the Wasserstein distance"),
    ("eval.gamma", "\"median\"", "RBF bandwidth, or \"median\""),
    ("eval.seed", "0", "Wasserstein subsample seed"),
];

pub fn config_help() -> String {
    let mut s = String::from("Config keys (JSON sections, default, meaning):\n");
    for (k, d, m) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<26} {d:<10} {m}\n"));
    }
    s
}
