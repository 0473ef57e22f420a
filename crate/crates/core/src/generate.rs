//! Sampling new cells from a checkpoint: reverse diffusion in latent space,
//! decoding to log-rates, and Poisson count draws.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::checkpoint::{file_sha256, Checkpoint};
use crate::diffusion::{sample_with_streams, GuidanceConfig, ScoreModel};
use crate::error::{Error, Result};
use crate::ingest::{write_dataset, CountMatrix};
use crate::model::decoder_forward;
use crate::tensor::Tensor;

const INVERSION_LIMIT: f64 = 10.0;
const POISSON_STREAM_FLAG: u64 = 1 << 63;
const LABEL_DRAW_STREAM: u64 = u64::MAX;

/// Exact Poisson draw: sequential-search inversion for small rates and
/// transformed rejection (PTRS) otherwise.
pub fn poisson_sample<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> u64 {
    if rate <= 0.0 || !rate.is_finite() {
        return 0;
    }
    if rate < INVERSION_LIMIT {
        let u: f64 = rng.random();
        let mut k = 0u64;
        let mut p = (-rate).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1;
            p *= rate / k as f64;
            cdf += p;
            if p <= 0.0 {
                break;
            }
        }
        return k;
    }
    let slam = rate.sqrt();
    let loglam = rate.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + rate + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln() <= -rate + k * loglam - ln_gamma(k + 1.0) {
            return k as u64;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRequest {
    /// Ordered `(label name, count)` pairs.
    PerLabel(Vec<(String, usize)>),
    /// Total count with labels drawn from the training label frequencies.
    Total(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub labels: LabelRequest,
    pub guidance: GuidanceConfig,
    pub seed: u64,
}

/// Parses `A=5,B=5`.
pub fn parse_per_label(spec: &str) -> Result<Vec<(String, usize)>> {
    spec.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|part| {
            let (name, n) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("per-label entry {part:?} is not NAME=COUNT")))?;
            let n = n.trim().parse().map_err(|_| Error::invalid(format!("bad count in {part:?}")))?;
            Ok((name.trim().to_string(), n))
        })
        .collect()
}

/// Label ids per output row, in output order.
pub fn resolve_labels(ckpt: &Checkpoint, req: &GenerationRequest) -> Result<Vec<usize>> {
    match &req.labels {
        LabelRequest::PerLabel(pairs) => {
            let mut out = Vec::new();
            for (name, n) in pairs {
                let id = ckpt
                    .label_vocab
                    .iter()
                    .position(|v| v == name)
                    .ok_or_else(|| Error::invalid(format!("unknown label {name:?}")))?;
                out.extend(std::iter::repeat_n(id, *n));
            }
            Ok(out)
        }
        LabelRequest::Total(n) => {
            if *n == 0 {
                return Ok(Vec::new());
            }
            let dist = WeightedIndex::new(&ckpt.label_counts)
                .map_err(|e| Error::invalid(format!("training label counts unusable: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
            rng.set_stream(LABEL_DRAW_STREAM);
            Ok((0..*n).map(|_| dist.sample(&mut rng)).collect())
        }
    }
}

/// Row stream ids keyed by `(label, occurrence of that label)`, so that
/// reordering a request reorders the output rows.
pub fn row_streams(labels: &[usize]) -> Vec<u64> {
    let mut seen: BTreeMap<usize, u64> = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let k = seen.entry(l).or_insert(0);
            let id = ((l as u64) << 32) | *k;
            *k += 1;
            id
        })
        .collect()
}

/// Decoded log-rates for latents `z`.
pub fn decode_log_rates(ckpt: &Checkpoint, z: &Tensor) -> Result<Tensor> {
    let log_rates = decoder_forward(z, &ckpt.params, &ckpt.config.model)?;
    if !log_rates.is_finite() {
        return Err(Error::numerical("non-finite decoder rates"));
    }
    Ok(log_rates)
}

/// Poisson counts for each row of `log_rates`, row `i` drawing from stream
/// `streams[i]`.
pub fn sample_counts(log_rates: &Tensor, streams: &[u64], seed: u64) -> Vec<u32> {
    let d = log_rates.cols();
    let rows: Vec<Vec<u32>> = (0..log_rates.rows())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(POISSON_STREAM_FLAG | streams[i]);
            log_rates.row(i).iter().map(|&lr| poisson_sample(lr.exp(), &mut rng).min(u64::from(u32::MAX)) as u32).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(rows.len() * d);
    rows.into_iter().for_each(|r| out.extend(r));
    out
}

pub fn generate(ckpt: &Checkpoint, req: &GenerationRequest) -> Result<CountMatrix> {
    let labels = resolve_labels(ckpt, req)?;
    let d = ckpt.gene_names.len();
    let vocab = ckpt.label_vocab.clone();
    if labels.is_empty() {
        return CountMatrix::new(0, d, Vec::new(), Vec::new(), vocab, ckpt.gene_names.clone());
    }
    let streams = row_streams(&labels);
    let model = ScoreModel { params: &ckpt.params, config: &ckpt.config.model };
    let z0 = sample_with_streams(&model, &labels, &streams, &ckpt.config.diffusion, &req.guidance, req.seed)?;
    let log_rates = decode_log_rates(ckpt, &z0)?;
    let counts = sample_counts(&log_rates, &streams, req.seed);
    CountMatrix::new(labels.len(), d, counts, labels, vocab, ckpt.gene_names.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub checkpoint_sha256: String,
    pub request: GenerationRequest,
    pub seed: u64,
    pub n_cells: usize,
    pub n_genes: usize,
}

/// Writes the dataset files plus `manifest.json`.
pub fn write_generated(dir: &Path, cm: &CountMatrix, ckpt_path: &Path, req: &GenerationRequest) -> Result<GenerationManifest> {
    let manifest = GenerationManifest {
        checkpoint_sha256: file_sha256(ckpt_path)?,
        request: req.clone(),
        seed: req.seed,
        n_cells: cm.n_cells(),
        n_genes: cm.n_genes(),
    };
    write_dataset(dir, cm)?;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
