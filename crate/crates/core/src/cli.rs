//! `scgplvm simulate | train | eval | gradcheck`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use scgplvm::data::{filter_qc, load_dataset, read_metadata, write_dense_csv, write_metadata, write_triplet, CountFormat};
use scgplvm::metrics::{self, MetricsReport};
use scgplvm::sim::{simulate, SimConfig};
use scgplvm::svgp::export_latents;
use scgplvm::trainer::{build_model, gradcheck, preset_spec, train, Preset, TrainConfig, TrainOutputs};

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "scgplvm", version, about = "Amortized SVGP Bayesian GPLVM for single-cell counts")]
pub struct Cli {
    /// Worker threads; defaults to all cores. `1` gives bit-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic grouped, batched count dataset.
    Simulate(SimulateArgs),
    /// Fit a model and export the latent embedding.
    Train(TrainArgs),
    /// Score an embedding against cell-type and batch labels.
    Eval(EvalArgs),
    /// Compare analytic ELBO gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Csv,
    Mtx,
}

impl From<Format> for CountFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => CountFormat::Csv,
            Format::Mtx => CountFormat::MtxTriplet,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON simulation config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_cells_per_batch: Option<usize>,
    #[arg(long)]
    n_genes: Option<usize>,
    #[arg(long)]
    n_groups: Option<usize>,
    #[arg(long)]
    n_batches: Option<usize>,
    #[arg(long)]
    de_prob: Option<f64>,
    #[arg(long)]
    de_logfc_sigma: Option<f64>,
    #[arg(long)]
    batch_logfc_sigma: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Count matrix (dense CSV or `%%shape` triplet file).
    #[arg(long)]
    data: PathBuf,
    /// Metadata CSV with `cell_id,batch,celltype`.
    #[arg(long)]
    meta: PathBuf,
    /// Count file format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long, default_value_t = 200)]
    min_cell_counts: u64,
    #[arg(long, default_value_t = 3)]
    min_cells_per_gene: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long, default_value = "proposed")]
    preset: Preset,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Embedding CSV: `cell_id` followed by one column per latent dimension.
    #[arg(long)]
    embedding: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    #[arg(long, default_value_t = metrics::DEFAULT_K)]
    knn: usize,
    #[arg(long, default_value_t = metrics::DEFAULT_RESOLUTION)]
    resolution: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long, default_value = "proposed")]
    preset: Preset,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cells in the frozen batch.
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Coordinates sampled per parameter group.
    #[arg(long, default_value_t = 5)]
    n_params: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes that map onto exit codes.
#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
}

/// 1 for IO and unreadable inputs, 2 for invalid configs or inputs that
/// fail validation, 3 for numerical failures.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use scgplvm::Error as E;
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => 2,
                Failure::Numerical(_) => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) | E::Parse { .. } | E::Checkpoint(_) => 1,
                E::NonFiniteLoss { .. } | E::NotPositiveDefinite { .. } => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return 1;
        }
    }
    1
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a, cli.threads),
        Command::Train(a) => cmd_train(a, cli.threads),
        Command::Eval(a) => cmd_eval(a, cli.threads),
        Command::Gradcheck(a) => cmd_gradcheck(a, cli.threads),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Record of one invocation: enough to rerun it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub config: Value,
    pub inputs: Vec<FileHash>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    /// Output files relative to the run directory.
    pub outputs: Vec<FileHash>,
}

impl RunManifest {
    fn start(command: &str, seed: u64, threads: Option<usize>, config: Value, inputs: &[&Path]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            threads,
            config,
            inputs,
            started_at: now(),
            finished_at: None,
            status: "running".into(),
            outputs: Vec::new(),
        })
    }

    fn finish(&mut self, out: &Path, files: &[&str]) -> Result<()> {
        self.outputs = files
            .iter()
            .map(|f| {
                Ok(FileHash {
                    path: f.to_string(),
                    sha256: sha256_file(&out.join(f))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.finished_at = Some(now());
        self.status = "completed".into();
        self.write(out)
    }

    /// Writes through a temporary file and a rename, so readers never see a
    /// partial manifest.
    fn write(&self, out: &Path) -> Result<()> {
        let tmp = out.join(format!("{MANIFEST}.tmp"));
        let mut w = BufWriter::new(File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        drop(w);
        fs::rename(&tmp, out.join(MANIFEST))?;
        Ok(())
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

fn read_json_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("config {}: {e}", path.display())).into())
}

fn infer_format(path: &Path, explicit: Option<Format>) -> CountFormat {
    explicit
        .unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
            Some("mtx") | Some("txt") => Format::Mtx,
            _ => Format::Csv,
        })
        .into()
}

fn cmd_simulate(a: SimulateArgs, threads: Option<usize>) -> Result<()> {
    let mut cfg: SimConfig = match &a.config {
        Some(p) => read_json_config(p)?,
        None => SimConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n_cells_per_batch {
        cfg.n_cells_per_batch = v;
    }
    if let Some(v) = a.n_genes {
        cfg.n_genes = v;
    }
    if let Some(v) = a.n_groups {
        cfg.n_groups = v;
    }
    if let Some(v) = a.n_batches {
        cfg.n_batches = v;
    }
    if let Some(v) = a.de_prob {
        cfg.de_prob = v;
    }
    if let Some(v) = a.de_logfc_sigma {
        cfg.de_logfc_sigma = v;
    }
    if let Some(v) = a.batch_logfc_sigma {
        cfg.batch_logfc_sigma = v;
    }
    cfg.validate()?;
    create_out(&a.out)?;
    let inputs: Vec<&Path> = a.config.iter().map(PathBuf::as_path).collect();
    let mut manifest = RunManifest::start("simulate", cfg.seed, threads, serde_json::to_value(&cfg)?, &inputs)?;
    manifest.write(&a.out)?;

    let ds = simulate(&cfg)?;
    let counts = match a.format {
        Format::Csv => {
            write_dense_csv(&ds, &a.out.join("counts.csv"))?;
            "counts.csv"
        }
        Format::Mtx => {
            write_triplet(&ds, &a.out.join("counts.mtx"))?;
            "counts.mtx"
        }
    };
    write_metadata(&ds, &a.out.join("meta.csv"))?;
    manifest.finish(&a.out, &[counts, "meta.csv"])?;
    println!("simulated {} cells x {} genes -> {}", ds.n_cells(), ds.n_genes(), a.out.display());
    Ok(())
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => read_json_config(p),
        None => Ok(TrainConfig::default()),
    }
}

fn load_filtered(input: &DataArgs) -> Result<scgplvm::data::CountDataset> {
    let format = infer_format(&input.data, input.format);
    let ds = load_dataset(&input.data, &input.meta, format)
        .with_context(|| format!("loading {}", input.data.display()))?;
    Ok(filter_qc(&ds, input.min_cell_counts, input.min_cells_per_gene)?)
}

fn cmd_train(a: TrainArgs, threads: Option<usize>) -> Result<()> {
    let mut cfg = train_config(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    cfg.validate()?;
    let preset = preset_spec(a.preset);
    let mut inputs: Vec<&Path> = vec![&a.input.data, &a.input.meta];
    if let Some(p) = &a.config {
        inputs.push(p);
    }
    let config = serde_json::json!({
        "preset": a.preset.name(),
        "model": preset,
        "train": cfg,
        "min_cell_counts": a.input.min_cell_counts,
        "min_cells_per_gene": a.input.min_cells_per_gene,
    });
    // Inputs are hashed before the output directory is touched, so a missing
    // file fails without leaving a partial run behind.
    let mut manifest = RunManifest::start("train", cfg.seed, threads, config, &inputs)?;
    let ds = load_filtered(&a.input)?;
    create_out(&a.out)?;
    manifest.write(&a.out)?;

    let (state, data) = build_model(&preset, &ds, &cfg)?;
    let outputs = TrainOutputs {
        checkpoint_dir: Some(a.out.join("checkpoints")),
    };
    let (state, log) = train(state, &data, &cfg, &outputs)?;
    log.write_csv(&a.out.join("train_log.csv"))?;
    log.write_timing_csv(&a.out.join("timing.csv"))?;
    let latents = export_latents(&state, &data)?;
    write_embedding(&a.out.join("embedding.csv"), &ds.cell_ids, latents.mean.view())?;
    write_embedding(&a.out.join("embedding_var.csv"), &ds.cell_ids, latents.var.view())?;
    manifest.finish(
        &a.out,
        &[
            "train_log.csv",
            "embedding.csv",
            "embedding_var.csv",
            "checkpoints/final.json",
            "checkpoints/final.bin",
        ],
    )?;
    if let Some(last) = log.epochs.last() {
        println!("epoch {} mean elbo {:.6e}", last.epoch + 1, last.mean_elbo);
    }
    println!(
        "embedding {} x {} -> {}",
        latents.mean.nrows(),
        latents.mean.ncols(),
        a.out.join("embedding.csv").display()
    );
    Ok(())
}

fn write_embedding(path: &Path, ids: &[String], values: ndarray::ArrayView2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write!(w, "cell_id")?;
    for q in 1..=values.ncols() {
        write!(w, ",z{q}")?;
    }
    writeln!(w)?;
    for (id, row) in ids.iter().zip(values.rows()) {
        write!(w, "{id}")?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn read_embedding(path: &Path) -> Result<(Vec<String>, ndarray::Array2<f64>)> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let q = rdr.headers()?.len().saturating_sub(1);
    if q == 0 {
        return Err(Failure::Config(format!("{}: no latent columns", path.display())).into());
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("reading {}", path.display()))?;
        if rec.len() != q + 1 {
            return Err(Failure::Config(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                i + 1,
                rec.len(),
                q + 1
            ))
            .into());
        }
        ids.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Failure::Config(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok((ids, metrics::to_matrix(&rows)?))
}

fn cmd_eval(a: EvalArgs, threads: Option<usize>) -> Result<()> {
    let config = serde_json::json!({
        "knn": a.knn,
        "resolution": a.resolution,
        "seed": a.seed,
    });
    let mut manifest = RunManifest::start("eval", a.seed, threads, config, &[&a.embedding, &a.meta])?;
    let (ids, coords) = read_embedding(&a.embedding)?;
    let meta = read_metadata(&a.meta)?;
    let celltype = meta
        .celltype
        .as_ref()
        .ok_or_else(|| Failure::Config(format!("{}: no celltype column", a.meta.display())))?;
    let pos: HashMap<&str, usize> = meta.cell_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut batches = Vec::with_capacity(ids.len());
    let mut types = Vec::with_capacity(ids.len());
    for id in &ids {
        let &i = pos
            .get(id.as_str())
            .ok_or_else(|| Failure::Config(format!("cell `{id}` in the embedding is missing from the metadata")))?;
        batches.push(meta.batch[i].clone());
        types.push(celltype[i].clone());
    }
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Failure::Config(format!("{}: embedding has non-finite entries", a.embedding.display())).into());
    }
    create_out(&a.out)?;
    manifest.write(&a.out)?;
    let report = metrics::evaluate(coords.view(), &batches, &types, a.knn, a.resolution, a.seed)?;
    write_report(&a.out.join("metrics.json"), &report)?;
    manifest.finish(&a.out, &["metrics.json"])?;
    println!("avg_bio {:.4}", report.avg_bio);
    println!("avg_batch {:.4}", report.avg_batch);
    Ok(())
}

fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, threads: Option<usize>) -> Result<()> {
    let mut cfg = train_config(a.config.as_deref())?;
    cfg.seed = a.seed;
    cfg.batch_size = a.batch_size;
    cfg.validate()?;
    let preset = preset_spec(a.preset);
    let ds = load_filtered(&a.input)?;
    let (state, data) = build_model(&preset, &ds, &cfg)?;
    let groups = gradcheck(&state, &data, &cfg, a.n_params)?;
    let mut worst = 0.0f64;
    for g in &groups {
        println!("{:<24} max_rel_error {:.3e} ({} coords)", g.group, g.max_rel_error, g.n_checked);
        worst = worst.max(g.max_rel_error);
    }
    if let Some(out) = &a.out {
        create_out(out)?;
        let config = serde_json::json!({ "preset": a.preset.name(), "model": preset, "train": cfg, "n_params": a.n_params });
        let mut manifest = RunManifest::start("gradcheck", cfg.seed, threads, config, &[&a.input.data, &a.input.meta])?;
        let report: Vec<Value> = groups
            .iter()
            .map(|g| serde_json::json!({ "group": g.group, "max_rel_error": g.max_rel_error, "n_checked": g.n_checked }))
            .collect();
        let mut w = BufWriter::new(File::create(out.join("gradcheck.json"))?);
        serde_json::to_writer_pretty(&mut w, &report)?;
        writeln!(w)?;
        w.flush()?;
        drop(w);
        manifest.finish(out, &["gradcheck.json"])?;
    }
    if !worst.is_finite() {
        bail!(Failure::Numerical("gradient check produced a non-finite error".into()));
    }
    if worst >= a.tol {
        return Err(anyhow!(Failure::Numerical(format!(
            "max relative error {worst:.3e} exceeds {:.1e}",
            a.tol
        ))));
    }
    Ok(())
}
