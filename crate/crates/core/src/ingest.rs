//! Count-matrix loading, gene filtering, library-size normalization and PCA.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::container::{self, Dtype};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raw UMI counts, cells by genes, with per-cell labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    n_cells: usize,
    n_genes: usize,
    counts: Vec<u32>,
    pub cell_labels: Vec<usize>,
    pub label_vocab: Vec<String>,
    pub gene_names: Vec<String>,
}

impl CountMatrix {
    pub fn new(
        n_cells: usize,
        n_genes: usize,
        counts: Vec<u32>,
        cell_labels: Vec<usize>,
        label_vocab: Vec<String>,
        gene_names: Vec<String>,
    ) -> Result<Self> {
        if counts.len() != n_cells * n_genes {
            return Err(Error::shape(format!("{} counts for a {n_cells}x{n_genes} matrix", counts.len())));
        }
        if cell_labels.len() != n_cells {
            return Err(Error::invalid(format!(
                "label count mismatch: {} labels for {n_cells} cells",
                cell_labels.len()
            )));
        }
        if let Some(bad) = cell_labels.iter().find(|&&l| l >= label_vocab.len()) {
            return Err(Error::invalid(format!("label id {bad} outside vocabulary")));
        }
        if gene_names.len() != n_genes {
            return Err(Error::invalid(format!("{} gene names for {n_genes} genes", gene_names.len())));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = gene_names.iter().find(|g| !seen.insert(g.as_str())) {
            return Err(Error::invalid(format!("duplicate gene name {dup:?}")));
        }
        Ok(Self { n_cells, n_genes, counts, cell_labels, label_vocab, gene_names })
    }

    /// Builds a matrix from string labels; the vocabulary is the sorted set
    /// of distinct labels.
    pub fn with_string_labels(
        n_cells: usize,
        n_genes: usize,
        counts: Vec<u32>,
        labels: &[String],
        gene_names: Vec<String>,
    ) -> Result<Self> {
        let vocab: Vec<String> = labels.iter().cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let ids = labels.iter().map(|l| index[l.as_str()]).collect();
        Self::new(n_cells, n_genes, counts, ids, vocab, gene_names)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn get(&self, cell: usize, gene: usize) -> u32 {
        self.counts[cell * self.n_genes + gene]
    }

    pub fn row(&self, cell: usize) -> &[u32] {
        &self.counts[cell * self.n_genes..(cell + 1) * self.n_genes]
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.n_cells).map(|i| self.row(i).iter().map(|&c| u64::from(c)).sum()).collect()
    }

    pub fn label_name(&self, cell: usize) -> &str {
        &self.label_vocab[self.cell_labels[cell]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.n_cells, self.n_genes, self.counts.iter().map(|&c| f64::from(c)).collect())
            .expect("shape checked at construction")
    }

    pub fn select_cells(&self, idx: &[usize]) -> CountMatrix {
        let mut counts = Vec::with_capacity(idx.len() * self.n_genes);
        for &i in idx {
            counts.extend_from_slice(self.row(i));
        }
        CountMatrix {
            n_cells: idx.len(),
            n_genes: self.n_genes,
            counts,
            cell_labels: idx.iter().map(|&i| self.cell_labels[i]).collect(),
            label_vocab: self.label_vocab.clone(),
            gene_names: self.gene_names.clone(),
        }
    }

    pub fn select_genes(&self, idx: &[usize]) -> CountMatrix {
        let mut counts = Vec::with_capacity(idx.len() * self.n_cells);
        for i in 0..self.n_cells {
            let r = self.row(i);
            counts.extend(idx.iter().map(|&j| r[j]));
        }
        CountMatrix {
            n_cells: self.n_cells,
            n_genes: idx.len(),
            counts,
            cell_labels: self.cell_labels.clone(),
            label_vocab: self.label_vocab.clone(),
            gene_names: idx.iter().map(|&j| self.gene_names[j].clone()).collect(),
        }
    }

    /// Restricts the genes to `names`, in that order.
    pub fn select_gene_names(&self, names: &[String]) -> Result<CountMatrix> {
        let index: BTreeMap<&str, usize> = self.gene_names.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
        let idx = names
            .iter()
            .map(|n| index.get(n.as_str()).copied().ok_or_else(|| Error::invalid(format!("gene {n:?} not present"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_genes(&idx))
    }

    pub fn label_histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for i in 0..self.n_cells {
            *h.entry(self.label_name(i).to_string()).or_insert(0) += 1;
        }
        h
    }
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = read_text(path)?;
    let mut lines: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    Ok(lines)
}

fn parse_count(tok: &str) -> Result<u32> {
    let tok = tok.trim();
    if let Ok(v) = tok.parse::<u32>() {
        return Ok(v);
    }
    match tok.parse::<f64>() {
        Ok(v) if v < 0.0 => Err(Error::parse(format!("negative count {tok:?}"))),
        Ok(v) if v.fract() == 0.0 && v <= f64::from(u32::MAX) => Ok(v as u32),
        Ok(_) => Err(Error::parse(format!("non-integer count {tok:?}"))),
        Err(_) => Err(Error::parse(format!("unparseable count {tok:?}"))),
    }
}

fn parse_matrix_market(text: &str) -> Result<(usize, usize, Vec<u32>)> {
    let mut lines = text.lines();
    let banner = lines.next().ok_or_else(|| Error::parse("empty Matrix Market file"))?;
    let fields: Vec<String> = banner.split_whitespace().map(str::to_ascii_lowercase).collect();
    if fields.len() < 5 || fields[0] != "%%matrixmarket" || fields[1] != "matrix" || fields[2] != "coordinate" {
        return Err(Error::parse(format!("malformed Matrix Market header: {banner:?}")));
    }
    if fields[3] != "integer" && fields[3] != "real" {
        return Err(Error::parse(format!("unsupported Matrix Market field {:?}", fields[3])));
    }
    if fields[4] != "general" {
        return Err(Error::parse(format!("unsupported Matrix Market symmetry {:?}", fields[4])));
    }
    let mut body = lines.filter(|l| !l.trim().is_empty() && !l.starts_with('%'));
    let size = body.next().ok_or_else(|| Error::parse("Matrix Market file has no size line"))?;
    let dims: Vec<usize> = size
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(format!("bad size line {size:?}"))))
        .collect::<Result<_>>()?;
    let [rows, cols, nnz] = dims[..] else {
        return Err(Error::parse(format!("bad size line {size:?}")));
    };
    let mut counts = vec![0u32; rows * cols];
    let mut seen = 0usize;
    for line in body {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::parse(format!("bad entry line {line:?}")));
        }
        let i: usize = toks[0].parse().map_err(|_| Error::parse(format!("bad row index in {line:?}")))?;
        let j: usize = toks[1].parse().map_err(|_| Error::parse(format!("bad column index in {line:?}")))?;
        if i == 0 || j == 0 || i > rows || j > cols {
            return Err(Error::parse(format!("entry ({i},{j}) outside {rows}x{cols}")));
        }
        let v = parse_count(toks[2])?;
        let slot = &mut counts[(i - 1) * cols + (j - 1)];
        *slot = slot.checked_add(v).ok_or_else(|| Error::parse("count overflow"))?;
        seen += 1;
    }
    if seen != nnz {
        return Err(Error::parse(format!("Matrix Market declares {nnz} entries, found {seen}")));
    }
    Ok((rows, cols, counts))
}

fn parse_csv(text: &str) -> Result<(usize, usize, Vec<u32>, Option<Vec<String>>)> {
    let rows: Vec<Vec<&str>> =
        text.lines().map(|l| l.trim_end_matches('\r')).filter(|l| !l.trim().is_empty()).map(|l| l.split(',').collect()).collect();
    let Some(first) = rows.first() else {
        return Err(Error::parse("empty counts.csv"));
    };
    let has_header = first.iter().any(|t| t.trim().parse::<f64>().is_err());
    let header = has_header.then(|| first.iter().map(|t| t.trim().to_string()).collect::<Vec<_>>());
    let data = if has_header { &rows[1..] } else { &rows[..] };
    let n_genes = first.len();
    let mut counts = Vec::with_capacity(data.len() * n_genes);
    for (i, r) in data.iter().enumerate() {
        if r.len() != n_genes {
            return Err(Error::parse(format!("counts.csv row {} has {} fields, expected {n_genes}", i + 1, r.len())));
        }
        for t in r {
            counts.push(parse_count(t)?);
        }
    }
    Ok((data.len(), n_genes, counts, header))
}

/// Loads `matrix.mtx` (or `counts.csv`) plus `labels.tsv` and optional
/// `genes.tsv` from `dir`. Cells with zero total count are rejected.
pub fn load_dataset(dir: &Path) -> Result<CountMatrix> {
    let cm = load_dataset_allow_empty(dir)?;
    if let Some(i) = cm.row_sums().iter().position(|&s| s == 0) {
        return Err(Error::invalid(format!("cell {i} has zero total count")));
    }
    Ok(cm)
}

/// Like [`load_dataset`], but accepts all-zero cells (as sampled counts may
/// contain).
pub fn load_dataset_allow_empty(dir: &Path) -> Result<CountMatrix> {
    let mtx = dir.join("matrix.mtx");
    let csv = dir.join("counts.csv");
    let (n, d, counts, csv_genes) = if mtx.exists() {
        let (n, d, c) = parse_matrix_market(&read_text(&mtx)?)?;
        (n, d, c, None)
    } else if csv.exists() {
        parse_csv(&read_text(&csv)?)?
    } else {
        return Err(Error::MissingFile(mtx));
    };

    let labels = read_lines(&dir.join("labels.tsv"))?;
    if labels.len() != n {
        return Err(Error::invalid(format!("label count mismatch: {} labels for {n} cells", labels.len())));
    }
    let labels: Vec<String> = labels.iter().map(|l| l.split('\t').next().unwrap_or("").to_string()).collect();

    let genes_path = dir.join("genes.tsv");
    let gene_names = if genes_path.exists() {
        let g: Vec<String> =
            read_lines(&genes_path)?.iter().map(|l| l.split('\t').next().unwrap_or("").to_string()).collect();
        if g.len() != d {
            return Err(Error::invalid(format!("genes.tsv has {} names for {d} genes", g.len())));
        }
        g
    } else if let Some(h) = csv_genes {
        h
    } else {
        (0..d).map(|j| format!("g{j}")).collect()
    };

    CountMatrix::with_string_labels(n, d, counts, &labels, gene_names)
}

/// Writes `matrix.mtx`, `labels.tsv` and `genes.tsv` into `dir`.
pub fn write_dataset(dir: &Path, cm: &CountMatrix) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let nnz = cm.counts.iter().filter(|&&c| c > 0).count();
    let mut mtx = String::new();
    mtx.push_str("%%MatrixMarket matrix coordinate integer general\n");
    let _ = writeln!(mtx, "{} {} {}", cm.n_cells, cm.n_genes, nnz);
    for i in 0..cm.n_cells {
        for (j, &c) in cm.row(i).iter().enumerate() {
            if c > 0 {
                let _ = writeln!(mtx, "{} {} {}", i + 1, j + 1, c);
            }
        }
    }
    let labels: String = (0..cm.n_cells).map(|i| format!("{}\n", cm.label_name(i))).collect();
    let genes: String = cm.gene_names.iter().map(|g| format!("{g}\n")).collect();
    for (name, body) in [("matrix.mtx", mtx), ("labels.tsv", labels), ("genes.tsv", genes)] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Genes kept after filtering, with the boolean mask over the input genes.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredCounts {
    pub counts: CountMatrix,
    pub gene_mask: Vec<bool>,
}

pub fn filter_genes(cm: &CountMatrix, min_cells: usize) -> Result<FilteredCounts> {
    if min_cells == 0 {
        return Err(Error::invalid("min_cells must be at least 1"));
    }
    let mut expressed = vec![0usize; cm.n_genes];
    for i in 0..cm.n_cells {
        for (e, &c) in expressed.iter_mut().zip(cm.row(i)) {
            *e += usize::from(c > 0);
        }
    }
    let gene_mask: Vec<bool> = expressed.iter().map(|&e| e >= min_cells).collect();
    let keep: Vec<usize> = (0..cm.n_genes).filter(|&j| gene_mask[j]).collect();
    if keep.is_empty() {
        return Err(Error::invalid("empty gene set"));
    }
    Ok(FilteredCounts { counts: cm.select_genes(&keep), gene_mask })
}

/// Per-cell normalization target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSum {
    Fixed(f64),
    Median(MedianTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MedianTag {
    Median,
}

impl Default for TargetSum {
    fn default() -> Self {
        TargetSum::Median(MedianTag::Median)
    }
}

impl TargetSum {
    pub const MEDIAN: TargetSum = TargetSum::Median(MedianTag::Median);

    pub fn resolve(&self, row_sums: &[u64]) -> f64 {
        match *self {
            TargetSum::Fixed(v) => v,
            TargetSum::Median(_) => median(&row_sums.iter().map(|&s| s as f64).collect::<Vec<_>>()),
        }
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scales each cell to `target` total counts, then applies `ln(1 + x)`.
pub fn normalize_log(cm: &CountMatrix, target: TargetSum) -> Result<Tensor> {
    let sums = cm.row_sums();
    if let Some(i) = sums.iter().position(|&s| s == 0) {
        return Err(Error::invalid(format!("zero row sum at cell {i}")));
    }
    let target = target.resolve(&sums);
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::invalid(format!("normalization target must be positive, got {target}")));
    }
    Ok(normalize_rows(cm, target))
}

/// Same transform as [`normalize_log`], mapping all-zero cells to zero rows.
pub(crate) fn normalize_rows(cm: &CountMatrix, target: f64) -> Tensor {
    let mut out = Tensor::zeros(cm.n_cells, cm.n_genes);
    for (i, s) in cm.row_sums().into_iter().enumerate() {
        if s == 0 {
            continue;
        }
        let f = target / s as f64;
        for (o, &c) in out.row_mut(i).iter_mut().zip(cm.row(i)) {
            *o = (f64::from(c) * f).ln_1p();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `D_f x P`, orthonormal columns.
    pub loadings: Tensor,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.loadings.cols()
    }
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Principal components of the column-centered `x`.
pub fn fit_pca(x: &Tensor, n_components: usize) -> Result<PcaModel> {
    let (n, d) = x.shape();
    let max = n.saturating_sub(1).min(d);
    if n_components == 0 || n_components > max {
        return Err(Error::invalid(format!("n_components {n_components} outside 1..={max}")));
    }
    if !x.is_finite() {
        return Err(Error::invalid("non-finite PCA input"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = x.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let denom = (n - 1) as f64;

    let mut loadings = Tensor::zeros(d, n_components);
    let mut explained = Vec::with_capacity(n_components);
    if d <= n {
        let mut cov = Tensor::zeros(d, d);
        crate::tensor::gemm(true, &centered, false, &centered, &mut cov, 0.0);
        let eig = DMatrix::from_row_slice(d, d, cov.data()).symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (c, &k) in order.iter().take(n_components).enumerate() {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            fix_sign(&mut v);
            for (r, val) in v.into_iter().enumerate() {
                loadings[(r, c)] = val;
            }
            explained.push((eig.eigenvalues[k] / denom).max(0.0));
        }
    } else {
        let mut gram = Tensor::zeros(n, n);
        crate::tensor::gemm(false, &centered, true, &centered, &mut gram, 0.0);
        let eig = DMatrix::from_row_slice(n, n, gram.data()).symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_components);
        for &k in order.iter().take(n_components) {
            let u = Tensor::from_vec(n, 1, eig.eigenvectors.column(k).iter().copied().collect())?;
            let mut v = centered.transpose().matmul(&u)?.into_data();
            orthonormalize_against(&mut v, &basis);
            fix_sign(&mut v);
            basis.push(v);
            explained.push((eig.eigenvalues[k] / denom).max(0.0));
        }
        for (c, v) in basis.iter().enumerate() {
            for (r, &val) in v.iter().enumerate() {
                loadings[(r, c)] = val;
            }
        }
    }
    for i in 1..explained.len() {
        if explained[i] > explained[i - 1] {
            explained[i] = explained[i - 1];
        }
    }
    Ok(PcaModel { mean, loadings, explained_variance: explained })
}

/// Gram-Schmidt step; falls back to a canonical direction when `v` is
/// (numerically) inside the span of `basis`.
fn orthonormalize_against(v: &mut Vec<f64>, basis: &[Vec<f64>]) {
    let project = |v: &mut Vec<f64>| {
        for b in basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
    };
    project(v);
    project(v);
    let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut axis = 0;
    while norm < 1e-12 && axis < v.len() {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[axis] = 1.0;
        project(v);
        project(v);
        norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        axis += 1;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
}

pub fn pca_project(model: &PcaModel, x: &Tensor) -> Result<Tensor> {
    if x.cols() != model.n_features() {
        return Err(Error::shape(format!("PCA expects {} columns, got {}", model.n_features(), x.cols())));
    }
    let mut centered = x.clone();
    for i in 0..centered.rows() {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&model.mean) {
            *v -= m;
        }
    }
    centered.matmul(&model.loadings)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub min_cells: usize,
    pub target_sum: TargetSum,
    pub p_pca: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { min_cells: 3, target_sum: TargetSum::MEDIAN, p_pca: 30 }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_cells == 0 {
            return Err(Error::invalid("preprocess.min_cells must be >= 1"));
        }
        if self.p_pca == 0 {
            return Err(Error::invalid("preprocess.p_pca must be >= 1"));
        }
        if let TargetSum::Fixed(v) = self.target_sum {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid("preprocess.target_sum must be positive or \"median\""));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedDataset {
    pub filtered_counts: CountMatrix,
    pub lognorm: Tensor,
    pub pca: PcaModel,
    pub pca_scores: Tensor,
    pub gene_mask: Vec<bool>,
    /// Gene names before filtering, aligned with `gene_mask`.
    pub all_gene_names: Vec<String>,
}

impl ProcessedDataset {
    pub fn n_cells(&self) -> usize {
        self.filtered_counts.n_cells()
    }

    pub fn n_genes(&self) -> usize {
        self.filtered_counts.n_genes()
    }
}

/// Filter, normalize and fit PCA. The component count is capped at
/// `min(N - 1, D_f)`.
pub fn preprocess(cm: &CountMatrix, cfg: &PreprocessConfig) -> Result<ProcessedDataset> {
    cfg.validate()?;
    let filtered = filter_genes(cm, cfg.min_cells)?;
    let lognorm = normalize_log(&filtered.counts, cfg.target_sum)?;
    let cap = cm.n_cells().saturating_sub(1).min(filtered.counts.n_genes());
    let p = cfg.p_pca.min(cap);
    if p < cfg.p_pca {
        log::warn!("p_pca {} capped to {p} by data size", cfg.p_pca);
    }
    let pca = fit_pca(&lognorm, p)?;
    let pca_scores = pca_project(&pca, &lognorm)?;
    Ok(ProcessedDataset {
        filtered_counts: filtered.counts,
        lognorm,
        pca,
        pca_scores,
        gene_mask: filtered.gene_mask,
        all_gene_names: cm.gene_names.clone(),
    })
}

/// Applies a fitted gene mask, normalization target and PCA to new cells.
pub fn apply_preprocess(
    cm: &CountMatrix,
    gene_mask: &[bool],
    target: TargetSum,
    pca: &PcaModel,
) -> Result<(CountMatrix, Tensor, Tensor)> {
    if gene_mask.len() != cm.n_genes() {
        return Err(Error::shape(format!("gene mask covers {} genes, data has {}", gene_mask.len(), cm.n_genes())));
    }
    let keep: Vec<usize> = (0..cm.n_genes()).filter(|&j| gene_mask[j]).collect();
    let filtered = cm.select_genes(&keep);
    let lognorm = normalize_log(&filtered, target)?;
    let scores = pca_project(pca, &lognorm)?;
    Ok((filtered, lognorm, scores))
}

const CACHE_MAGIC: &[u8; 8] = b"LAPDPRC1";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    version: u32,
    label_vocab: Vec<String>,
    cell_labels: Vec<usize>,
    gene_names: Vec<String>,
    all_gene_names: Vec<String>,
    gene_mask: Vec<bool>,
}

pub fn encode_processed(ds: &ProcessedDataset) -> Result<Vec<u8>> {
    let meta = CacheMeta {
        version: CACHE_VERSION,
        label_vocab: ds.filtered_counts.label_vocab.clone(),
        cell_labels: ds.filtered_counts.cell_labels.clone(),
        gene_names: ds.filtered_counts.gene_names.clone(),
        all_gene_names: ds.all_gene_names.clone(),
        gene_mask: ds.gene_mask.clone(),
    };
    let counts = ds.filtered_counts.to_tensor();
    let mean = Tensor::row_vector(&ds.pca.mean);
    let ev = Tensor::row_vector(&ds.pca.explained_variance);
    container::encode(
        CACHE_MAGIC,
        &meta,
        &[
            ("counts", &counts),
            ("lognorm", &ds.lognorm),
            ("pca_scores", &ds.pca_scores),
            ("pca.mean", &mean),
            ("pca.loadings", &ds.pca.loadings),
            ("pca.explained_variance", &ev),
        ],
        Dtype::F64,
    )
}

pub fn decode_processed(bytes: &[u8]) -> Result<ProcessedDataset> {
    let (meta, tensors): (CacheMeta, _) =
        container::decode(CACHE_MAGIC, bytes, Dtype::F64, container::version_check(CACHE_VERSION))?;
    let mut map: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut take = |k: &str| map.remove(k).ok_or_else(|| Error::parse(format!("cache is missing tensor {k}")));
    let counts_t = take("counts")?;
    let lognorm = take("lognorm")?;
    let pca_scores = take("pca_scores")?;
    let mean = take("pca.mean")?.into_data();
    let loadings = take("pca.loadings")?;
    let explained_variance = take("pca.explained_variance")?.into_data();
    let counts = counts_t.data().iter().map(|&v| v as u32).collect();
    let filtered_counts = CountMatrix::new(
        counts_t.rows(),
        counts_t.cols(),
        counts,
        meta.cell_labels,
        meta.label_vocab,
        meta.gene_names,
    )?;
    Ok(ProcessedDataset {
        filtered_counts,
        lognorm,
        pca: PcaModel { mean, loadings, explained_variance },
        pca_scores,
        gene_mask: meta.gene_mask,
        all_gene_names: meta.all_gene_names,
    })
}

pub fn save_processed(path: &Path, ds: &ProcessedDataset) -> Result<()> {
    let bytes = encode_processed(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_processed(path: &Path) -> Result<ProcessedDataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_processed(&bytes)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cm(rows: &[&[u32]]) -> CountMatrix {
        let n = rows.len();
        let d = rows[0].len();
        let counts = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let labels: Vec<String> = (0..n).map(|i| format!("L{}", i % 2)).collect();
        CountMatrix::with_string_labels(n, d, counts, &labels, (0..d).map(|j| format!("g{j}")).collect()).unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn loads_dense_csv() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "counts.csv", "1,0\n3,2\n");
        write(dir.path(), "labels.tsv", "A\nB\n");
        let m = load_dataset(dir.path()).unwrap();
        assert_eq!((m.n_cells(), m.n_genes()), (2, 2));
        assert_eq!(m.counts(), &[1, 0, 3, 2]);
        assert_eq!(m.label_vocab, vec!["A", "B"]);
        assert_eq!(m.gene_names, vec!["g0", "g1"]);
    }

    #[test]
    fn csv_header_supplies_gene_names() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "counts.csv", "CD3,MS4A1\n1,0\n3,2\n");
        write(dir.path(), "labels.tsv", "B\nA\n");
        let m = load_dataset(dir.path()).unwrap();
        assert_eq!(m.gene_names, vec!["CD3", "MS4A1"]);
        assert_eq!(m.cell_labels, vec![1, 0]);
    }

    #[test]
    fn loads_single_entry_matrix_market() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "matrix.mtx", "%%MatrixMarket matrix coordinate integer general\n% c\n1 1 1\n1 1 5\n");
        write(dir.path(), "labels.tsv", "T\n");
        let m = load_dataset(dir.path()).unwrap();
        assert_eq!(m.counts(), &[5]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "counts.csv", "1,0\n3,2\n");
        write(dir.path(), "labels.tsv", "A\nB\nC\n");
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("label count mismatch"), "{err}");

        write(dir.path(), "counts.csv", "1,0.5\n3,2\n");
        write(dir.path(), "labels.tsv", "A\nB\n");
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("non-integer"));
        write(dir.path(), "counts.csv", "1,-1\n3,2\n");
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("negative"));
        write(dir.path(), "counts.csv", "0,0\n3,2\n");
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("zero total"));

        let other = tempfile::tempdir().unwrap();
        write(other.path(), "matrix.mtx", "%%MatrixMarket matrix array integer general\n1 1\n5\n");
        write(other.path(), "labels.tsv", "A\n");
        assert!(load_dataset(other.path()).unwrap_err().to_string().contains("header"));

        let empty = tempfile::tempdir().unwrap();
        write(empty.path(), "counts.csv", "1\n");
        assert!(matches!(load_dataset(empty.path()), Err(Error::MissingFile(p)) if p.ends_with("labels.tsv")));
    }

    #[test]
    fn write_then_load_roundtrips() {
        let m = cm(&[&[1, 0, 4], &[0, 2, 0], &[7, 0, 1]]);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &m).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), m);
    }

    #[test]
    fn filtering_examples() {
        let m = cm(&[&[1, 0, 2], &[0, 0, 3]]);
        let f = filter_genes(&m, 1).unwrap();
        assert_eq!(f.gene_mask, vec![true, false, true]);
        let f = filter_genes(&m, 2).unwrap();
        assert_eq!(f.gene_mask, vec![false, false, true]);
        assert_eq!(f.counts.counts(), &[2, 3]);
        let dense = cm(&[&[1, 2], &[3, 4]]);
        assert_eq!(filter_genes(&dense, 1).unwrap().counts, dense);
        assert!(filter_genes(&m, 3).unwrap_err().to_string().contains("empty gene set"));
        assert!(filter_genes(&m, 0).is_err());
    }

    #[test]
    fn normalization_examples() {
        let x = normalize_log(&cm(&[&[2, 2]]), TargetSum::Fixed(4.0)).unwrap();
        assert!(x.data().iter().all(|v| (v - 3f64.ln()).abs() < 1e-15));
        let x = normalize_log(&cm(&[&[0, 4]]), TargetSum::Fixed(4.0)).unwrap();
        assert_eq!(x[(0, 0)], 0.0);
        assert!((x[(0, 1)] - 5f64.ln()).abs() < 1e-15);
        assert_eq!(TargetSum::MEDIAN.resolve(&[2, 6]), 4.0);
        let x = normalize_log(&cm(&[&[1, 1], &[3, 3]]), TargetSum::MEDIAN).unwrap();
        assert!((x[(0, 0)] - 3f64.ln()).abs() < 1e-15);
        let json = serde_json::to_string(&TargetSum::MEDIAN).unwrap();
        assert_eq!(json, "\"median\"");
        assert_eq!(serde_json::from_str::<TargetSum>("1e4").unwrap(), TargetSum::Fixed(1e4));
    }

    #[test]
    fn pca_on_a_line_captures_all_variance() {
        let dir = [1.0, -2.0, 0.5];
        let rows: Vec<Vec<f64>> = (0..10).map(|i| dir.iter().map(|d| d * i as f64 + 1.0).collect()).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let m = fit_pca(&x, 1).unwrap();
        let total: f64 = (0..3)
            .map(|j| {
                let c = x.column(j);
                let mu = c.iter().sum::<f64>() / 10.0;
                c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 9.0
            })
            .sum();
        assert!((m.explained_variance[0] - total).abs() < 1e-9);
    }

    #[test]
    fn rank_two_data_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let basis = Tensor::randn(2, 6, &mut rng);
        let coef = Tensor::randn(15, 2, &mut rng);
        let x = coef.matmul(&basis).unwrap();
        let m = fit_pca(&x, 2).unwrap();
        let scores = pca_project(&m, &x).unwrap();
        let recon = scores.matmul(&m.loadings.transpose()).unwrap();
        for i in 0..15 {
            for j in 0..6 {
                assert!((recon[(i, j)] + m.mean[j] - x[(i, j)]).abs() < 1e-8);
            }
        }
        let gram = m.loadings.transpose().matmul(&m.loadings).unwrap();
        assert!(gram.max_abs_diff(&Tensor::identity(2)) < 1e-6);
    }

    #[test]
    fn wide_data_uses_gram_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(6, 20, &mut rng);
        let m = fit_pca(&x, 5).unwrap();
        let gram = m.loadings.transpose().matmul(&m.loadings).unwrap();
        assert!(gram.max_abs_diff(&Tensor::identity(5)) < 1e-6);
        let s = pca_project(&m, &x).unwrap();
        for c in 0..5 {
            let col = s.column(c);
            let var = col.iter().map(|v| v * v).sum::<f64>() / 5.0;
            assert!((var - m.explained_variance[c]).abs() < 1e-6);
        }
        assert!(fit_pca(&x, 6).is_err());
        assert!(fit_pca(&x, 0).is_err());
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(12, 4, &mut rng);
        let m = fit_pca(&x, 3).unwrap();
        let at_mean = Tensor::from_rows(&[m.mean.clone(), m.mean.clone()]).unwrap();
        assert!(pca_project(&m, &at_mean).unwrap().data().iter().all(|v| v.abs() < 1e-15));
        let step: Vec<f64> = (0..4).map(|j| m.mean[j] + m.loadings[(j, 0)]).collect();
        let s = pca_project(&m, &Tensor::row_vector(&step)).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-12 && s[(0, 1)].abs() < 1e-12 && s[(0, 2)].abs() < 1e-12);

        let y = Tensor::randn(5, 4, &mut rng);
        let got = pca_project(&m, &y).unwrap();
        for i in 0..5 {
            for c in 0..3 {
                let want: f64 = (0..4).map(|j| (y[(i, j)] - m.mean[j]) * m.loadings[(j, c)]).sum();
                assert!((got[(i, c)] - want).abs() < 1e-12);
            }
        }
        assert!(pca_project(&m, &Tensor::zeros(1, 3)).is_err());
    }

    #[test]
    fn processed_cache_roundtrips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20;
        let d = 8;
        let counts: Vec<u32> = (0..n * d).map(|_| rng.random_range(0..6)).map(|c: u32| c + 1).collect();
        let labels: Vec<String> = (0..n).map(|i| ["x", "y"][i % 2].to_string()).collect();
        let m = CountMatrix::with_string_labels(n, d, counts, &labels, (0..d).map(|j| format!("g{j}")).collect())
            .unwrap();
        let ds = preprocess(&m, &PreprocessConfig { p_pca: 4, ..Default::default() }).unwrap();
        let bytes = encode_processed(&ds).unwrap();
        let back = decode_processed(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_processed(&back).unwrap(), bytes);
    }
}
