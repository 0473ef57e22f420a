//! Trained-model files. Tensors are stored as little-endian `f32`; a
//! checkpoint is quantized once when it is built, so loading and saving it
//! again reproduces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::container::{self, Dtype};
use crate::error::{Error, Result};
use crate::ingest::{PcaModel, ProcessedDataset};
use crate::model::ParamStore;
use crate::tensor::Tensor;
use crate::train::{resolve_model_config, TrainState};

const MAGIC: &[u8; 8] = b"LAPDDPM1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::parse(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::parse("rng seed must be 32 bytes"))?;
        let word_pos: u128 = self.word_pos.parse().map_err(|e| Error::parse(format!("rng word_pos: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub label_vocab: Vec<String>,
    /// Training cells per label, aligned with `label_vocab`.
    pub label_counts: Vec<usize>,
    /// Genes kept after filtering, in model order.
    pub gene_names: Vec<String>,
    pub all_gene_names: Vec<String>,
    pub gene_mask: Vec<bool>,
    pub pca: PcaModel,
    pub params: ParamStore,
    pub rng: RngState,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    version: u32,
    config: RunConfig,
    label_vocab: Vec<String>,
    label_counts: Vec<usize>,
    gene_names: Vec<String>,
    all_gene_names: Vec<String>,
    gene_mask: Vec<bool>,
    rng: RngState,
    epoch: usize,
}

fn quantize(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

impl Checkpoint {
    /// Snapshot of a training run, with all tensors rounded to `f32`.
    pub fn from_training(ds: &ProcessedDataset, cfg: &RunConfig, state: &TrainState) -> Self {
        let mut config = cfg.clone();
        config.model = resolve_model_config(&cfg.model, ds);
        let cm = &ds.filtered_counts;
        let mut label_counts = vec![0; cm.label_vocab.len()];
        for &l in &cm.cell_labels {
            label_counts[l] += 1;
        }
        let mut params = state.params.clone();
        params.round_to_f32();
        let mut pca = ds.pca.clone();
        quantize(&mut pca.mean);
        quantize(pca.loadings.data_mut());
        quantize(&mut pca.explained_variance);
        Self {
            config,
            label_vocab: cm.label_vocab.clone(),
            label_counts,
            gene_names: cm.gene_names.clone(),
            all_gene_names: ds.all_gene_names.clone(),
            gene_mask: ds.gene_mask.clone(),
            pca,
            params,
            rng: RngState::capture(&state.rng),
            epoch: state.epoch,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            label_vocab: self.label_vocab.clone(),
            label_counts: self.label_counts.clone(),
            gene_names: self.gene_names.clone(),
            all_gene_names: self.all_gene_names.clone(),
            gene_mask: self.gene_mask.clone(),
            rng: self.rng.clone(),
            epoch: self.epoch,
        };
        let mean = Tensor::row_vector(&self.pca.mean);
        let ev = Tensor::row_vector(&self.pca.explained_variance);
        let mut tensors: Vec<(&str, &Tensor)> =
            vec![("pca.mean", &mean), ("pca.loadings", &self.pca.loadings), ("pca.explained_variance", &ev)];
        tensors.extend(self.params.iter().map(|(k, t)| (k.as_str(), t)));
        container::encode(MAGIC, &meta, &tensors, Dtype::F32)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors): (Meta, _) =
            container::decode(MAGIC, bytes, Dtype::F32, container::version_check(CHECKPOINT_VERSION))?;
        let mut map: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |k: &str| map.remove(k).ok_or_else(|| Error::parse(format!("checkpoint is missing tensor {k}")));
        let mean = take("pca.mean")?.into_data();
        let loadings = take("pca.loadings")?;
        let explained_variance = take("pca.explained_variance")?.into_data();
        let params: ParamStore = map.into_iter().collect();
        if meta.label_counts.len() != meta.label_vocab.len() {
            return Err(Error::parse("label_counts and label_vocab differ in length"));
        }
        if meta.gene_names.len() != meta.config.model.n_genes {
            return Err(Error::parse("gene names disagree with the model width"));
        }
        Ok(Self {
            config: meta.config,
            label_vocab: meta.label_vocab,
            label_counts: meta.label_counts,
            gene_names: meta.gene_names,
            all_gene_names: meta.all_gene_names,
            gene_mask: meta.gene_mask,
            pca: PcaModel { mean, loadings, explained_variance },
            params,
            rng: meta.rng,
            epoch: meta.epoch,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
