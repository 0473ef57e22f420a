//! `lapddpm` command-line driver.
//!
//! Exit codes: 0 success, 1 I/O or format error, 2 invalid input or
//! configuration, 3 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use lapddpm::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use lapddpm::config::{config_help, RunConfig};
use lapddpm::eval::{aggregate, evaluation_protocol, robustness_report, AttackKind, AttackSpec, EncoderUnderTest, MetricReport};
use lapddpm::generate::{generate, parse_per_label, write_generated, GenerationRequest, LabelRequest};
use lapddpm::ingest::{load_dataset, load_dataset_allow_empty, load_processed, preprocess, save_processed, CountMatrix, TargetSum};
use lapddpm::train::train;
use lapddpm::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "lapddpm", version, about = "Graph-conditioned latent diffusion for single-cell count matrices")]
struct Cli {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter genes, normalize, fit PCA and write a processed cache.
    Preprocess(PreprocessArgs),
    /// Train a model on a processed cache and write a checkpoint.
    Train(TrainArgs),
    /// Sample cells from a checkpoint into a dataset directory.
    Generate(GenerateArgs),
    /// Compare generated cells with real cells.
    Eval(EvalArgs),
    /// Measure encoder drift under graph attacks for two checkpoints.
    Attack(AttackArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Dataset directory (matrix.mtx or counts.csv, labels.tsv, genes.tsv).
    #[arg(long, value_name = "DIR")]
    input: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long)]
    min_cells: Option<usize>,
    /// A positive number or "median".
    #[arg(long)]
    target_sum: Option<String>,
    #[arg(long)]
    p_pca: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Processed cache written by `preprocess`.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long, value_name = "CKPT")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    mask_fraction: Option<f64>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip edge-weight perturbation.
    #[arg(long)]
    no_perturb: bool,
    /// Skip input masking.
    #[arg(long)]
    no_mask: bool,
    /// Replace positional encodings with zeros.
    #[arg(long)]
    no_lpe: bool,
    /// Also append the per-epoch JSON log to this file.
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    /// Total cells, labels drawn from the training label frequencies.
    #[arg(long, conflicts_with = "per_label", required_unless_present = "per_label")]
    n: Option<usize>,
    /// Cells per label, e.g. `A=5,B=5`.
    #[arg(long, value_name = "SPEC")]
    per_label: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Guidance scale (1: conditional, 0: unconditional).
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    n_steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Real (held-out) dataset directory.
    #[arg(long, value_name = "DIR")]
    real: PathBuf,
    /// Generated dataset directory.
    #[arg(long, value_name = "DIR", required_unless_present = "ckpt")]
    gen: Option<PathBuf>,
    /// Generate afresh for each seed from this checkpoint, matching the real
    /// label counts, instead of reading `--gen`.
    #[arg(long, value_name = "CKPT", conflicts_with = "gen")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    pcs: Option<usize>,
    #[arg(long)]
    max_support: Option<usize>,
    /// Average metrics over labels present in both datasets.
    #[arg(long)]
    per_label: bool,
    /// Comma-separated seeds; each run uses its seed for subsampling (and
    /// for generation with `--ckpt`).
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Restrict the real genes to those of the generated data, by name.
    #[arg(long)]
    align_genes: bool,
    /// Write per-label metrics as CSV.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// Processed cache of the cells to encode.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Checkpoint trained with perturbation.
    #[arg(long, value_name = "CKPT")]
    ckpt_a: PathBuf,
    /// Checkpoint trained without perturbation.
    #[arg(long, value_name = "CKPT")]
    ckpt_b: PathBuf,
    /// Comma-separated attack kinds: random, dice.
    #[arg(long, value_delimiter = ',', default_value = "random,dice")]
    kinds: Vec<String>,
    /// Comma-separated fractions of edges to modify.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    knn_k: Option<usize>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn emit_json(value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::Parse(e.to_string()))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::Io { path: "<stdout>".into(), source: e })
}

fn parse_target_sum(s: &str) -> Result<TargetSum> {
    if s.eq_ignore_ascii_case("median") {
        return Ok(TargetSum::MEDIAN);
    }
    s.parse().map(TargetSum::Fixed).map_err(|_| Error::Invalid(format!("target_sum must be a number or \"median\", got {s:?}")))
}

fn cmd_preprocess(cfg: &mut RunConfig, a: &PreprocessArgs) -> Result<()> {
    if let Some(v) = a.min_cells {
        cfg.preprocess.min_cells = v;
    }
    if let Some(v) = &a.target_sum {
        cfg.preprocess.target_sum = parse_target_sum(v)?;
    }
    if let Some(v) = a.p_pca {
        cfg.preprocess.p_pca = v;
    }
    cfg.validate()?;
    let cm = load_dataset(&a.input)?;
    let ds = preprocess(&cm, &cfg.preprocess)?;
    save_processed(&a.out, &ds)?;
    emit_json(&serde_json::json!({
        "n_cells": cm.n_cells(),
        "n_genes": cm.n_genes(),
        "n_genes_filtered": ds.n_genes(),
        "p_pca": ds.pca.n_components(),
        "label_histogram": cm.label_histogram(),
    }))
}

fn cmd_train(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = a.mask_fraction {
        t.mask_fraction = v;
    }
    if let Some(v) = a.knn_k {
        t.knn_k = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    t.disable_perturb |= a.no_perturb;
    t.disable_mask |= a.no_mask;
    t.disable_lpe |= a.no_lpe;
    cfg.validate()?;
    let ds = load_processed(&a.data)?;
    let mut log_file = match &a.log {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::Io { path: p.clone(), source: e })?),
        None => None,
    };
    let mut io_err = None;
    let state = train(&ds, cfg, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        println!("{line}");
        if let Some(f) = log_file.as_mut() {
            if let Err(e) = writeln!(f, "{line}") {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let (Some(e), Some(p)) = (io_err, &a.log) {
        return Err(Error::Io { path: p.clone(), source: e });
    }
    let ckpt = Checkpoint::from_training(&ds, cfg, &state);
    save_checkpoint(&a.out, &ckpt)?;
    log::info!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn label_request(n: Option<usize>, per_label: Option<&str>) -> Result<LabelRequest> {
    match (n, per_label) {
        (_, Some(spec)) => Ok(LabelRequest::PerLabel(parse_per_label(spec)?)),
        (Some(n), None) => Ok(LabelRequest::Total(n)),
        (None, None) => Err(Error::Invalid("either --n or --per-label is required".into())),
    }
}

/// Applies the config file (when given) and flags to a checkpoint's
/// sampling settings.
fn sampling_overrides(ckpt: &mut Checkpoint, cfg: Option<&RunConfig>, guidance: Option<f64>, n_steps: Option<usize>) -> Result<()> {
    if let Some(c) = cfg {
        ckpt.config.diffusion = c.diffusion;
        ckpt.config.guidance = c.guidance;
    }
    if let Some(g) = guidance {
        ckpt.config.guidance.scale = g;
    }
    if let Some(s) = n_steps {
        ckpt.config.diffusion.n_steps = s;
    }
    ckpt.config.diffusion.validate()?;
    ckpt.config.guidance.validate()
}

fn cmd_generate(file_cfg: Option<&RunConfig>, a: &GenerateArgs) -> Result<()> {
    let labels = label_request(a.n, a.per_label.as_deref())?;
    let mut ckpt = load_checkpoint(&a.ckpt)?;
    sampling_overrides(&mut ckpt, file_cfg, a.guidance, a.n_steps)?;
    let req = GenerationRequest { labels, guidance: ckpt.config.guidance, seed: a.seed };
    let cm = generate(&ckpt, &req)?;
    let manifest = write_generated(&a.out, &cm, &a.ckpt, &req)?;
    emit_json(&manifest)
}

fn per_label_csv(runs: &[MetricReport]) -> String {
    let mut s = String::from("seed,label,mmd,wd,n_real,n_gen\n");
    for r in runs {
        for (label, m) in r.per_label.iter().flatten() {
            let _ = writeln!(s, "{},{label},{},{},{},{}", r.seeds[0], m.mmd, m.wd, m.n_real, m.n_gen);
        }
    }
    s
}

fn cmd_eval(cfg: &mut RunConfig, a: &EvalArgs) -> Result<()> {
    if let Some(v) = a.pcs {
        cfg.eval.pcs = v;
    }
    if let Some(v) = a.max_support {
        cfg.eval.max_support = v;
    }
    cfg.validate()?;
    let seeds = a.seeds.clone().unwrap_or_else(|| vec![cfg.eval.seed]);
    if seeds.is_empty() {
        return Err(Error::Invalid("--seeds must list at least one seed".into()));
    }
    let real = load_dataset(&a.real)?;
    let ckpt = a.ckpt.as_deref().map(load_checkpoint).transpose()?;
    let fixed_gen = a.gen.as_deref().map(load_dataset_allow_empty).transpose()?;
    let gen_genes = match (&fixed_gen, &ckpt) {
        (Some(g), _) => g.gene_names.clone(),
        (None, Some(c)) => c.gene_names.clone(),
        (None, None) => return Err(Error::Invalid("one of --gen or --ckpt is required".into())),
    };
    let real = if a.align_genes { real.select_gene_names(&gen_genes)? } else { real };

    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let generated: CountMatrix = match (&fixed_gen, &ckpt) {
            (Some(g), _) => g.clone(),
            (None, Some(c)) => {
                let hist = real.label_histogram();
                let known: Vec<(String, usize)> =
                    hist.into_iter().filter(|(k, _)| c.label_vocab.contains(k)).collect();
                let req = GenerationRequest { labels: LabelRequest::PerLabel(known), guidance: c.config.guidance, seed };
                generate(c, &req)?
            }
            (None, None) => unreachable!("checked above"),
        };
        let ecfg = lapddpm::eval::EvalConfig { seed, ..cfg.eval };
        runs.push(evaluation_protocol(&real, &generated, &ecfg, a.per_label)?);
    }
    if let Some(p) = &a.csv {
        fs::write(p, per_label_csv(&runs)).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    }
    emit_json(&aggregate(runs))
}

fn parse_kind(s: &str) -> Result<AttackKind> {
    match s.trim().to_ascii_lowercase().as_str() {
        "random" => Ok(AttackKind::Random),
        "dice" => Ok(AttackKind::Dice),
        other => Err(Error::Invalid(format!("unknown attack kind {other:?}"))),
    }
}

fn cmd_attack(cfg: &mut RunConfig, a: &AttackArgs) -> Result<()> {
    if let Some(v) = a.knn_k {
        cfg.train.knn_k = v;
    }
    cfg.validate()?;
    let kinds = a.kinds.iter().map(|k| parse_kind(k)).collect::<Result<Vec<_>>>()?;
    let mut attacks = Vec::new();
    for &kind in &kinds {
        for &fraction in &a.fractions {
            attacks.push(AttackSpec { kind, fraction, seed: a.seed });
        }
    }
    let ds = load_processed(&a.data)?;
    let ca = load_checkpoint(&a.ckpt_a)?;
    let cb = load_checkpoint(&a.ckpt_b)?;
    for c in [&ca, &cb] {
        if c.gene_names != ds.filtered_counts.gene_names {
            return Err(Error::Invalid("checkpoint genes differ from the processed data".into()));
        }
    }
    let models = [
        EncoderUnderTest { name: "a".into(), params: &ca.params, config: &ca.config.model },
        EncoderUnderTest { name: "b".into(), params: &cb.params, config: &cb.config.model },
    ];
    let rows = robustness_report(&ds.lognorm, &ds.pca_scores, &ds.filtered_counts.cell_labels, cfg.train.knn_k, &models, &attacks)?;
    let mut table = format!("{:<8} {:>9} {:<6} {:>12}\n", "attack", "fraction", "model", "drift");
    for r in &rows {
        let kind = match r.attack {
            AttackKind::Random => "random",
            AttackKind::Dice => "dice",
        };
        let _ = writeln!(table, "{kind:<8} {:>9.4} {:<6} {:>12.6}", r.fraction, r.model, r.drift);
    }
    eprint!("{table}");
    emit_json(&rows)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LAPDDPM_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::Invalid(format!("LAPDDPM_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Invalid("LAPDDPM_THREADS must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(&mut cfg, a),
        Command::Train(a) => cmd_train(&mut cfg, a),
        Command::Generate(a) => cmd_generate(cli.config.is_some().then_some(&cfg), a),
        Command::Eval(a) => cmd_eval(&mut cfg, a),
        Command::Attack(a) => cmd_attack(&mut cfg, a),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Io => 1,
        ErrorKind::Validation => 2,
        ErrorKind::Numerical => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let help = config_help();
    let command = Cli::command().after_long_help(help.clone()).mut_subcommands(|s| s.after_help(help.clone()));
    let matches = command.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
