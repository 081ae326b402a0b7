//! Alternating user/item optimization with Adam, aspect-probability
//! refresh at phase boundaries, early stopping and checkpointing.

mod adam;
mod checkpoint;

use std::io::Write;

use log::{debug, info};
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};

use crate::data::{make_batches, InteractionMatrix, Side};
use crate::error::{Error, Result};
use crate::eval::validation_recall;
use crate::model::{side_objective, Ablation, ModelConfig, ModelParams, ModelState, SideVars, PARAM_NAMES};
use crate::nrc::ContrastConfig;
use crate::tensor::{set_parallel, RngState, Tape, Tensor};

/// Parameter storage precision. `F32` rounds parameters to single precision
/// after every update; arithmetic stays in f64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of aspects `A`.
    pub aspects: usize,
    /// Per-aspect latent width `d`.
    pub dim: usize,
    /// Encoder hidden width.
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Upper bound on epochs.
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Contrast weight.
    pub gamma: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Aspect-probability softmax temperature.
    pub temp: f64,
    /// KL weight.
    pub beta: f64,
    pub seed: u64,
    /// Ablation flags: no_add, no_ud, no_id, no_nrc, no_uns, no_ans, no_nps.
    pub ablate: Vec<String>,
    pub input_dropout: f64,
    pub normalize_input: bool,
    pub precision: Precision,
    /// Single-threaded kernels.
    pub deterministic: bool,
    /// Track frozen-side gradients during every phase and fail if nonzero.
    pub check_freezing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            aspects: 5,
            dim: 20,
            hidden: 64,
            lr: 1e-3,
            batch_size: 128,
            epochs: 50,
            patience: 10,
            gamma: 0.1,
            tau: 0.2,
            temp: 0.1,
            beta: 1.0,
            seed: 0,
            ablate: Vec::new(),
            input_dropout: 0.0,
            normalize_input: false,
            precision: Precision::F64,
            deterministic: false,
            check_freezing: false,
        }
    }
}

impl TrainConfig {
    pub fn ablation(&self) -> Result<Ablation> {
        Ablation::parse_list(&self.ablate)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            aspects: self.aspects,
            dim: self.dim,
            hidden: self.hidden,
            temp: self.temp,
            beta: self.beta,
            contrast: ContrastConfig {
                tau: self.tau,
                gamma: self.gamma,
                ..ContrastConfig::default()
            },
            ablation: self.ablation()?,
            input_dropout: self.input_dropout,
            normalize_input: self.normalize_input,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Batch-size-weighted averages over one phase.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseStats {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    /// Unweighted contrast sum per entity.
    pub contrast: f64,
    pub batches: usize,
    /// Largest |gradient| seen on any frozen-side parameter; `None` when unchecked.
    pub frozen_grad_max: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub user: PhaseStats,
    pub item: PhaseStats,
    pub val_r20: f64,
}

impl EpochStats {
    pub fn tsv_header() -> &'static str {
        "epoch\tphase\tloss\trecon\tkl\tcontrast\tval_r20"
    }

    pub fn tsv_rows(&self) -> String {
        let mut out = String::new();
        for (side, p) in [(Side::User, &self.user), (Side::Item, &self.item)] {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                self.epoch,
                side.name(),
                p.loss,
                p.recon,
                p.kl,
                p.contrast,
                self.val_r20
            ));
        }
        out
    }
}

/// Live training run. The state always holds the evaluation view consistent
/// with the current parameters and stored probabilities.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    model: ModelConfig,
    train: &'a InteractionMatrix,
    params: ModelParams,
    state: ModelState,
    adam_user: AdamState,
    adam_item: AdamState,
    rng: RngState,
    epoch: usize,
}

const NOISE_STREAM: u64 = 1 << 32;

impl<'a> Trainer<'a> {
    pub fn new(train: &'a InteractionMatrix, cfg: TrainConfig) -> Result<Trainer<'a>> {
        cfg.validate()?;
        if train.nnz() == 0 {
            return Err(Error::Data("training matrix has no interactions".into()));
        }
        set_parallel(!cfg.deterministic);
        let model = cfg.model()?;
        let mut params = ModelParams::init(train.num_users(), train.num_items(), &model, cfg.seed);
        if cfg.precision == Precision::F32 {
            round_to_f32(&mut params);
        }
        let state = ModelState::bootstrap(&params, train, &model)?;
        Ok(Trainer {
            adam_user: AdamState::new(params.user.tensors()),
            adam_item: AdamState::new(params.item.tensors()),
            rng: RngState::derived(cfg.seed, NOISE_STREAM),
            cfg,
            model,
            train,
            params,
            state,
            epoch: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// User phase, refresh both sides, item phase, refresh both sides.
    /// Returns the phase statistics; validation is left to the caller.
    pub fn train_epoch_pair(&mut self) -> Result<(PhaseStats, PhaseStats)> {
        self.epoch += 1;
        let user = self.run_phase(Side::User)?;
        self.state.refresh(&self.params, self.train, &self.model, Side::User)?;
        self.state.refresh(&self.params, self.train, &self.model, Side::Item)?;
        let item = self.run_phase(Side::Item)?;
        self.state.refresh(&self.params, self.train, &self.model, Side::Item)?;
        self.state.refresh(&self.params, self.train, &self.model, Side::User)?;
        // Re-encode items under the new P so the state equals what a
        // checkpoint (params, P, C) rebuilds.
        let p = self.state.user.probs.clone();
        let c = self.state.item.probs.clone();
        self.state = ModelState::from_probs(&self.params, self.train, &self.model, p, c)?;
        Ok((user, item))
    }

    fn run_phase(&mut self, side: Side) -> Result<PhaseStats> {
        let names: Vec<String> = PARAM_NAMES.iter().map(|p| format!("{}.{p}", side.name())).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut stats = PhaseStats {
            frozen_grad_max: self.cfg.check_freezing.then_some(0.0),
            ..PhaseStats::default()
        };
        let mut seen = 0usize;
        let batches = make_batches(self.train, side, self.cfg.batch_size, self.cfg.seed, self.epoch as u64);
        for (b, batch) in batches.enumerate() {
            let rows = batch.slab.rows();
            let mut tape = Tape::new();
            let frozen = self
                .cfg
                .check_freezing
                .then(|| SideVars::register(self.params.side(side.other()), &mut tape, true));
            let eps: Vec<Tensor> = (0..self.model.aspects)
                .map(|_| self.rng.standard_normal(rows, self.model.dim))
                .collect();
            let dropout = (self.model.input_dropout > 0.0).then_some(&mut self.rng);
            let obj = side_objective(&mut tape, &self.params, &self.state, side, &batch.slab, Some(&eps), dropout, &self.model)?;
            let loss = tape.value(obj.total).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{} loss at epoch {} batch {b} is {loss}",
                    side.name(),
                    self.epoch
                )));
            }
            let grads = tape.backward(obj.total)?;
            if let (Some(frozen), Some(max)) = (frozen, stats.frozen_grad_max.as_mut()) {
                for v in frozen.all() {
                    *max = max.max(grads.get(v).max_abs());
                }
                if *max != 0.0 {
                    return Err(Error::Contract(format!(
                        "{} phase produced nonzero gradient {max} on frozen {} parameters (epoch {}, batch {b})",
                        side.name(),
                        side.other().name(),
                        self.epoch
                    )));
                }
            }
            let g: Vec<Tensor> = obj.vars.all().iter().map(|&v| grads.get(v)).collect();
            let adam = match side {
                Side::User => &mut self.adam_user,
                Side::Item => &mut self.adam_item,
            };
            let sp = self.params.side_mut(side);
            adam_step(&mut sp.tensors_mut(), &g, &names, adam, self.cfg.lr)?;
            if self.cfg.precision == Precision::F32 {
                for t in sp.tensors_mut() {
                    round_tensor(t);
                }
            }
            let w = rows as f64;
            stats.loss += w * loss;
            stats.recon += w * obj.terms.recon;
            stats.kl += w * obj.terms.kl;
            stats.contrast += w * obj.contrast;
            stats.batches += 1;
            seen += rows;
        }
        let n = seen.max(1) as f64;
        stats.loss /= n;
        stats.recon /= n;
        stats.kl /= n;
        stats.contrast /= n;
        debug!("epoch {} {} phase: loss {:.5}", self.epoch, side.name(), stats.loss);
        Ok(stats)
    }

    pub fn checkpoint(&self, best_metric: f64) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            params: self.params.clone(),
            user_probs: self.state.user.probs.clone(),
            item_probs: self.state.item.probs.clone(),
            rng: self.rng.clone(),
            epoch: self.epoch,
            best_metric,
            data_fingerprint: String::new(),
        }
    }
}

fn round_tensor(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = f64::from(*v as f32);
    }
}

fn round_to_f32(params: &mut ModelParams) {
    for side in [Side::User, Side::Item] {
        for t in params.side_mut(side).tensors_mut() {
            round_tensor(t);
        }
    }
}

/// Result of [`fit`]: the best checkpoint and per-epoch history.
pub struct FitOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Trains until `epochs` or until `patience` epochs pass without a strictly
/// better validation Recall@20, keeping the best epoch's checkpoint.
/// With patience 0 training stops after the first epoch.
pub fn fit(
    train: &InteractionMatrix,
    validation: &InteractionMatrix,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(train, cfg.clone())?;
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", EpochStats::tsv_header()).map_err(log_err)?;
    }
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::new();
    let mut since_best = 0usize;
    for _ in 0..cfg.epochs {
        let (user, item) = trainer.train_epoch_pair()?;
        let val_r20 = validation_recall(trainer.state(), train, validation)?;
        let stats = EpochStats {
            epoch: trainer.epoch(),
            user,
            item,
            val_r20,
        };
        info!(
            "epoch {}: user loss {:.4}, item loss {:.4}, val R@20 {:.4}",
            stats.epoch, user.loss, item.loss, val_r20
        );
        if let Some(w) = log.as_deref_mut() {
            w.write_all(stats.tsv_rows().as_bytes()).map_err(log_err)?;
        }
        history.push(stats);
        if best.as_ref().is_none_or(|b| val_r20 > b.best_metric) {
            best = Some(trainer.checkpoint(val_r20));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    Ok(FitOutcome {
        best: best.expect("at least one epoch"),
        history,
    })
}

fn log_err(e: std::io::Error) -> Error {
    Error::Io {
        path: "<training log>".into(),
        source: e,
    }
}
