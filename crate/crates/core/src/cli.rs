//! Command-line front end: argument parsing, run configuration and the
//! subcommand drivers.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::add::aspect_entropy_report;
use crate::data::{ingest, split, Dataset, DatasetSplit, Delimiter, InteractionMatrix};
use crate::error::{Error, Result};
use crate::eval::{evaluate, score_all, top_n, Metric, RankingResult};
use crate::gradcheck::{self, GradcheckOptions};
use crate::jg::score_breakdown;
use crate::synth::{generate_with, Membership};
use crate::trainer::{fit, Checkpoint, TrainConfig};

/// Default contrast weight per dataset family.
pub fn default_gamma(dataset: &str) -> f64 {
    match dataset.to_ascii_lowercase().as_str() {
        "akindle" | "amazon-kindle" | "kindle" => 0.001,
        _ => 0.1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Prepared dataset directory written by `ingest`.
    pub dir: PathBuf,
    /// Fraction of each user's interactions kept for training.
    pub train_ratio: f64,
    /// Fraction of the held-out interactions used for validation.
    pub valid_of_test: f64,
    /// Split seed; the training seed when absent.
    pub split_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            train_ratio: 0.8,
            valid_of_test: 0.1,
            split_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub cutoffs: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { cutoffs: vec![20, 50] }
    }
}

/// Everything a run needs, as read from `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Output directory for checkpoints, logs and reports.
    pub out: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    fn split_seed(&self) -> u64 {
        self.data.split_seed.unwrap_or(self.train.seed)
    }
}

/// Reference for every `--config` key, shown by `--help`.
pub const CONFIG_HELP: &str = "\
Configuration file keys (TOML; every key optional, defaults shown):

  out = \"\"                     output directory

  [data]
  dir = \"data\"                 dataset directory written by `ingest`
  train_ratio = 0.8             per-user fraction kept for training
  valid_of_test = 0.1           fraction of held-out interactions used for validation
  split_seed                    split seed (defaults to train.seed)

  [train]
  aspects = 5                   number of aspects A
  dim = 20                      per-aspect latent width d (A * d = 100)
  hidden = 64                   encoder hidden width
  lr = 0.001                    Adam learning rate
  batch_size = 128
  epochs = 50                   upper bound on epochs
  patience = 10                 epochs without validation improvement before stopping
  gamma = 0.1                   contrast weight (0.1 for ML1M and Yelp, 0.001 for AKindle)
  tau = 0.2                     InfoNCE temperature
  temp = 0.1                    aspect-probability softmax temperature
  beta = 1.0                    KL weight
  seed = 0
  ablate = []                   no_add, no_ud, no_id, no_nrc, no_uns, no_ans, no_nps
  input_dropout = 0.0           encoder input dropout rate
  normalize_input = false       L2-normalize encoder inputs
  precision = \"f64\"            f64 or f32 (parameters rounded to f32)
  deterministic = false         single-threaded, bitwise-reproducible kernels
  check_freezing = false        fail if a frozen side receives gradient

  [eval]
  cutoffs = [20, 50]            N for Recall@N and NDCG@N

Exit codes: 0 ok, 1 usage or config error, 2 data or checkpoint error, 3 numeric error.";

#[derive(Debug, Parser)]
#[command(
    name = "dualvae",
    version,
    about = "Dual disentangled VAEs for implicit-feedback recommendation",
    after_long_help = CONFIG_HELP
)]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert an interaction file (or a synthetic world) into a dataset directory.
    Ingest(IngestArgs),
    /// Train a model and write checkpoint, training log and validation metrics.
    #[command(after_long_help = CONFIG_HELP)]
    Train(RunArgs),
    /// Train with ablation flags (same as `train --ablate`).
    #[command(after_long_help = CONFIG_HELP)]
    Ablate(RunArgs),
    /// Report Recall@N and NDCG@N for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Top-N items per user with per-aspect score addends.
    Recommend(RecommendArgs),
    /// Write per-entity aspect probabilities.
    ExportAspects(CheckpointArgs),
    /// Train over a grid of learning rates, contrast weights and aspect counts.
    #[command(after_long_help = CONFIG_HELP)]
    Sweep(SweepArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by every training-like command.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Run configuration (TOML: [data], [train], [eval] sections and `out`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single-threaded, bitwise-reproducible kernels.
    #[arg(long)]
    pub deterministic: bool,
    /// Comma-separated ablation flags: no_add,no_ud,no_id,no_nrc,no_uns,no_ans,no_nps.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<String>,
    /// Overrides `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `data.dir`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if self.deterministic {
            cfg.train.deterministic = true;
        }
        for flag in &self.ablate {
            if !cfg.train.ablate.contains(flag) {
                cfg.train.ablate.push(flag.clone());
            }
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(d) = &self.data {
            cfg.data.dir = d.clone();
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Interaction file: `user item [...]` per line.
    #[arg(long, required_unless_present = "synthetic")]
    pub input: Option<PathBuf>,
    /// tsv, csv or dat; detected from the first line when absent.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub min_user_core: usize,
    #[arg(long, default_value_t = 1)]
    pub min_item_core: usize,
    /// Keep only the N most active users (after core filtering).
    #[arg(long)]
    pub top_users: Option<usize>,
    /// Generate a planted-aspect world instead of reading a file.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long, default_value_t = 400)]
    pub users: usize,
    #[arg(long, default_value_t = 400)]
    pub items: usize,
    #[arg(long, default_value_t = 4)]
    pub aspects: usize,
    #[arg(long, default_value_t = 0.01)]
    pub density: f64,
    /// Dirichlet concentration for mixed membership; one-hot when absent.
    #[arg(long)]
    pub mixed_alpha: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Defaults to `<out>/checkpoint.bin`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub ck: CheckpointArgs,
    /// test, validation or train.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Do not exclude known interactions from rankings.
    #[arg(long)]
    pub no_mask: bool,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[command(flatten)]
    pub ck: CheckpointArgs,
    /// Comma-separated original user ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub users: Vec<String>,
    #[arg(long, short = 'n', default_value_t = 10)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    pub lr: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub gamma: Vec<f64>,
    /// Aspect counts; `dim` is rescaled to keep `aspects * dim` fixed.
    #[arg(long, value_delimiter = ',')]
    pub aspects: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Train(a) => cmd_train(&a.resolve()?).map(|_| ()),
        Command::Ablate(a) => {
            if a.ablate.is_empty() {
                return Err(Error::Config("ablate requires --ablate FLAGS".into()));
            }
            cmd_train(&a.resolve()?).map(|_| ())
        }
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
        Command::Recommend(a) => cmd_recommend(&a),
        Command::ExportAspects(a) => cmd_export_aspects(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Gradcheck(a) => cmd_gradcheck(a.seed),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    if a.synthetic {
        let membership = match a.mixed_alpha {
            Some(alpha) => Membership::Mixed { alpha },
            None => Membership::OneHot,
        };
        let (matrix, world) = generate_with(a.users, a.items, a.aspects, a.density, membership, a.seed)?;
        let ds = Dataset {
            matrix,
            user_ids: (0..a.users).map(|u| format!("u{u}")).collect(),
            item_ids: (0..a.items).map(|i| format!("i{i}")).collect(),
        };
        ds.save(&a.out)?;
        let mut planted = String::from("side\tid\taspect\n");
        for (u, asp) in world.user_aspect.iter().enumerate() {
            planted.push_str(&format!("user\tu{u}\t{asp}\n"));
        }
        for (i, asp) in world.item_aspect.iter().enumerate() {
            planted.push_str(&format!("item\ti{i}\t{asp}\n"));
        }
        write(&a.out.join("planted.tsv"), &planted)?;
        println!("synthetic: {} users, {} items, {} interactions", a.users, a.items, ds.matrix.nnz());
        return Ok(());
    }
    let input = a.input.as_ref().ok_or_else(|| Error::Config("--input is required".into()))?;
    let delim = a.format.as_deref().map(str::parse::<Delimiter>).transpose()?;
    let mut ds = ingest(input, delim, a.min_user_core, a.min_item_core)?;
    if let Some(k) = a.top_users {
        ds = keep_top_users(&ds, k, a.min_user_core, a.min_item_core)?;
    }
    ds.save(&a.out)?;
    println!(
        "{}: {} users, {} items, {} interactions",
        a.out.display(),
        ds.matrix.num_users(),
        ds.matrix.num_items(),
        ds.matrix.nnz()
    );
    Ok(())
}

/// Restricts to the `k` users with the most interactions (ties by index),
/// then re-applies core filtering.
pub fn keep_top_users(ds: &Dataset, k: usize, min_user: usize, min_item: usize) -> Result<Dataset> {
    let m = &ds.matrix;
    let mut users: Vec<usize> = (0..m.num_users()).collect();
    users.sort_by(|&a, &b| m.user_row(b).len().cmp(&m.user_row(a).len()).then(a.cmp(&b)));
    let keep: std::collections::HashSet<usize> = users.into_iter().take(k).collect();
    let raw: Vec<(String, String)> = m
        .pairs()
        .filter(|(u, _)| keep.contains(&(*u as usize)))
        .map(|(u, i)| (ds.user_ids[u as usize].clone(), ds.item_ids[i as usize].clone()))
        .collect();
    crate::data::from_token_pairs(&raw, min_user, min_item)
}

/// Dataset and deterministic split for a run.
pub fn load_split(cfg: &RunConfig) -> Result<(Dataset, DatasetSplit)> {
    let ds = Dataset::load(&cfg.data.dir)?;
    let sp = split(&ds.matrix, cfg.data.train_ratio, cfg.data.valid_of_test, cfg.split_seed())?;
    Ok((ds, sp))
}

/// Result of a training command.
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub best_val_r20: f64,
    pub content_hash: String,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let (ds, sp) = load_split(cfg)?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write(&cfg.out.join("config.toml"), &cfg.to_toml()?)?;
    let log_path = cfg.out.join("train_log.tsv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let outcome = fit(&sp.train, &sp.validation, &cfg.train, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let mut best = outcome.best;
    best.data_fingerprint = ds.id_fingerprint();
    let ck_path = cfg.out.join("checkpoint.bin");
    best.save(&ck_path)?;
    let state = best.state(&sp.train)?;
    let val = evaluate(&state, &sp.validation, &[&sp.train], &cfg.eval.cutoffs)?;
    val.write_tsv(&cfg.out.join("val_metrics.tsv"))?;
    print!("{}", val.to_tsv());
    println!("checkpoint\t{}\tepoch {}", ck_path.display(), best.epoch);
    Ok(TrainReport {
        checkpoint: ck_path,
        best_val_r20: best.best_metric,
        content_hash: best.content_hash()?,
    })
}

fn open_checkpoint(a: &CheckpointArgs) -> Result<(RunConfig, Dataset, DatasetSplit, Checkpoint)> {
    let cfg = a.run.resolve()?;
    let path = a.checkpoint.clone().unwrap_or_else(|| cfg.out.join("checkpoint.bin"));
    let ck = Checkpoint::load(&path)?;
    let (ds, _) = load_split(&cfg)?;
    if !ck.data_fingerprint.is_empty() && ck.data_fingerprint != ds.id_fingerprint() {
        return Err(Error::Data(format!(
            "checkpoint {} was trained on a dataset with different id maps than {}",
            path.display(),
            cfg.data.dir.display()
        )));
    }
    // The split follows the checkpoint's training seed unless pinned.
    let seed = cfg.data.split_seed.unwrap_or(ck.config.seed);
    let sp = split(&ds.matrix, cfg.data.train_ratio, cfg.data.valid_of_test, seed)?;
    Ok((cfg, ds, sp, ck))
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<RankingResult> {
    let (cfg, _, sp, ck) = open_checkpoint(&a.ck)?;
    let state = ck.state(&sp.train)?;
    let (target, masks): (&InteractionMatrix, Vec<&InteractionMatrix>) = match a.split.as_str() {
        "test" => (&sp.test, vec![&sp.train, &sp.validation]),
        "validation" => (&sp.validation, vec![&sp.train]),
        "train" => (&sp.train, vec![]),
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    let masks = if a.no_mask { Vec::new() } else { masks };
    let res = evaluate(&state, target, &masks, &cfg.eval.cutoffs)?;
    let text = res.to_tsv();
    print!("{text}");
    write(&cfg.out.join(format!("metrics_{}.tsv", a.split)), &text)?;
    Ok(res)
}

pub fn cmd_recommend(a: &RecommendArgs) -> Result<()> {
    let (_, ds, sp, ck) = open_checkpoint(&a.ck)?;
    let state = ck.state(&sp.train)?;
    let aspects = ck.config.aspects;
    let mut out = String::from("user\trank\titem\tscore");
    for k in 0..aspects {
        out.push_str(&format!("\taspect{k}"));
    }
    out.push('\n');
    for id in &a.users {
        let u = ds
            .user_ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::Data(format!("unknown user id {id:?}")))?;
        let scores = score_all(&state, &[u], &[&sp.train])?;
        for (rank, i) in top_n(scores.row_slice(0), a.top).into_iter().enumerate() {
            let (_, addends) = score_breakdown(u, i, &state)?;
            let g: f64 = addends.iter().sum();
            out.push_str(&format!("{id}\t{}\t{}\t{g:.6}", rank + 1, ds.item_ids[i]));
            for v in addends {
                out.push_str(&format!("\t{v:.6}"));
            }
            out.push('\n');
        }
    }
    print!("{out}");
    Ok(())
}

pub fn cmd_export_aspects(a: &CheckpointArgs) -> Result<()> {
    let (cfg, ds, _, ck) = open_checkpoint(a)?;
    for (name, probs, ids) in [
        ("user_aspects.tsv", &ck.user_probs, &ds.user_ids),
        ("item_aspects.tsv", &ck.item_probs, &ds.item_ids),
    ] {
        let report = aspect_entropy_report(probs);
        let mut text = String::from("id");
        for k in 0..probs.cols() {
            text.push_str(&format!("\tp{k}"));
        }
        text.push_str("\targmax\tentropy\n");
        for (r, id) in ids.iter().enumerate() {
            text.push_str(id);
            for v in probs.row_slice(r) {
                text.push_str(&format!("\t{v:.6}"));
            }
            text.push_str(&format!("\t{}\t{:.6}\n", report.argmax[r], report.entropy[r]));
        }
        let path = cfg.out.join(name);
        write(&path, &text)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let base = a.run.resolve()?;
    let lrs = if a.lr.is_empty() { vec![base.train.lr] } else { a.lr.clone() };
    let gammas = if a.gamma.is_empty() { vec![base.train.gamma] } else { a.gamma.clone() };
    let aspects = if a.aspects.is_empty() { vec![base.train.aspects] } else { a.aspects.clone() };
    let total = base.train.aspects * base.train.dim;
    let mut table = String::from("lr\tgamma\taspects\tdim\tbest_val_r20\n");
    for &lr in &lrs {
        for &gamma in &gammas {
            for &k in &aspects {
                let mut cfg = base.clone();
                cfg.train.lr = lr;
                cfg.train.gamma = gamma;
                cfg.train.aspects = k;
                cfg.train.dim = (total / k.max(1)).max(1);
                cfg.out = base.out.join(format!("lr{lr}_g{gamma}_a{k}"));
                let rep = cmd_train(&cfg)?;
                table.push_str(&format!("{lr}\t{gamma}\t{k}\t{}\t{:.6}\n", cfg.train.dim, rep.best_val_r20));
            }
        }
    }
    write(&base.out.join("sweep.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_gradcheck(seed: u64) -> Result<()> {
    let report = gradcheck::run(&GradcheckOptions {
        seed,
        ..GradcheckOptions::default()
    })?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Contract("gradient check failed".into()))
    }
}

/// Macro Recall@20 of a result, for callers that only need the headline.
pub fn recall20(res: &RankingResult) -> f64 {
    res.value(Metric::Recall, 20).unwrap_or(0.0)
}
