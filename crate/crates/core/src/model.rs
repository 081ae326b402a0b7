//! Model parameters, frozen per-side state, and the per-side training
//! objective (ELBO plus weighted neighborhood contrast).

use crate::add::{aspect_probs, uniform_probs};
use crate::data::{InteractionMatrix, Side};
use crate::dvi::{mask_slab, Encoder, EncoderVars};
use crate::error::{Error, Result};
use crate::jg::{elbo_on_tape, Decoder, DecoderVars, ElboTerms};
use crate::nrc::{contrast_on_tape, neighborhood_reprs, ContrastConfig};
use crate::tensor::{RngState, Tape, Tensor, Var};

/// Table-3 style ablation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Aspect probabilities pinned uniform on both sides.
    pub no_add: bool,
    /// User-side probabilities pinned uniform.
    pub no_ud: bool,
    /// Item-side probabilities pinned uniform.
    pub no_id: bool,
    /// Contrastive term removed.
    pub no_nrc: bool,
    /// Entity-level negatives removed.
    pub no_uns: bool,
    /// Aspect-level negatives removed.
    pub no_ans: bool,
    /// Positive pair is the code with itself.
    pub no_nps: bool,
}

pub const ABLATION_FLAGS: [&str; 7] = ["no_add", "no_ud", "no_id", "no_nrc", "no_uns", "no_ans", "no_nps"];

impl Ablation {
    pub fn parse_list(list: &[String]) -> Result<Ablation> {
        let mut ab = Ablation::default();
        for flag in list {
            ab.set(flag.trim(), true)?;
        }
        Ok(ab)
    }

    pub fn set(&mut self, flag: &str, on: bool) -> Result<()> {
        let slot = match flag {
            "no_add" => &mut self.no_add,
            "no_ud" => &mut self.no_ud,
            "no_id" => &mut self.no_id,
            "no_nrc" => &mut self.no_nrc,
            "no_uns" => &mut self.no_uns,
            "no_ans" => &mut self.no_ans,
            "no_nps" => &mut self.no_nps,
            other => return Err(Error::Config(format!("unknown ablation flag {other:?}"))),
        };
        *slot = on;
        Ok(())
    }

    pub fn active(&self) -> Vec<String> {
        let flags = [
            self.no_add,
            self.no_ud,
            self.no_id,
            self.no_nrc,
            self.no_uns,
            self.no_ans,
            self.no_nps,
        ];
        ABLATION_FLAGS
            .iter()
            .zip(flags)
            .filter(|(_, on)| *on)
            .map(|(n, _)| n.to_string())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub aspects: usize,
    /// Per-aspect latent width.
    pub dim: usize,
    pub hidden: usize,
    /// Softmax temperature over prototype affinities.
    pub temp: f64,
    /// KL weight.
    pub beta: f64,
    pub contrast: ContrastConfig,
    pub ablation: Ablation,
    /// Training-time input dropout rate (0 disables).
    pub input_dropout: f64,
    /// L2-normalize input rows before masking.
    pub normalize_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            aspects: 5,
            dim: 20,
            hidden: 64,
            temp: 0.1,
            beta: 1.0,
            contrast: ContrastConfig::default(),
            ablation: Ablation::default(),
            input_dropout: 0.0,
            normalize_input: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aspects == 0 || self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("aspects, dim and hidden must all be >= 1".into()));
        }
        if !(self.temp > 0.0) {
            return Err(Error::Config(format!("temp must be > 0, got {}", self.temp)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return Err(Error::Config(format!("input_dropout must be in [0, 1), got {}", self.input_dropout)));
        }
        self.contrast.validate()
    }

    /// Whether `side` computes its aspect probabilities from prototypes.
    pub fn disentangled(&self, side: Side) -> bool {
        let ab = &self.ablation;
        !ab.no_add
            && match side {
                Side::User => !ab.no_ud,
                Side::Item => !ab.no_id,
            }
    }

    pub fn contrast_enabled(&self) -> bool {
        !self.ablation.no_nrc
    }

    /// Effective contrast settings after ablation flags.
    pub fn contrast_config(&self) -> ContrastConfig {
        ContrastConfig {
            use_entity_negs: self.contrast.use_entity_negs && !self.ablation.no_uns,
            use_aspect_negs: self.contrast.use_aspect_negs && !self.ablation.no_ans,
            use_neighbor_pos: self.contrast.use_neighbor_pos && !self.ablation.no_nps,
            gamma: if self.ablation.no_nrc { 0.0 } else { self.contrast.gamma },
            ..self.contrast
        }
    }

    /// Encoder input for a slab: optional row normalization, then dropout
    /// when a generator is supplied.
    pub fn prepare_input(&self, slab: &Tensor, rng: Option<&mut RngState>) -> Tensor {
        let mut x = if self.normalize_input { slab.normalize_rows() } else { slab.clone() };
        if let Some(rng) = rng {
            if self.input_dropout > 0.0 {
                let keep = 1.0 - self.input_dropout;
                for v in x.data_mut() {
                    *v = if rng.uniform() < keep { *v / keep } else { 0.0 };
                }
            }
        }
        x
    }
}

/// Trainable parameters of one side.
#[derive(Clone, Debug, PartialEq)]
pub struct SideParams {
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// `A × d`; row `a` anchors aspect `a`.
    pub prototypes: Tensor,
}

pub const PARAM_NAMES: [&str; 7] = ["enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w", "dec_b", "prototypes"];

impl SideParams {
    pub fn init(input: usize, cfg: &ModelConfig, rng: &mut RngState) -> SideParams {
        SideParams {
            encoder: Encoder::init(input, cfg.hidden, cfg.dim, rng),
            decoder: Decoder::init(cfg.dim, rng),
            prototypes: rng.normal(cfg.aspects, cfg.dim, 1.0 / (cfg.dim as f64).sqrt()),
        }
    }

    /// Tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 7] {
        [
            &self.encoder.w1,
            &self.encoder.b1,
            &self.encoder.w2,
            &self.encoder.b2,
            &self.decoder.w,
            &self.decoder.b,
            &self.prototypes,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.encoder.w1,
            &mut self.encoder.b1,
            &mut self.encoder.w2,
            &mut self.encoder.b2,
            &mut self.decoder.w,
            &mut self.decoder.b,
            &mut self.prototypes,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub user: SideParams,
    pub item: SideParams,
}

impl ModelParams {
    pub fn init(num_users: usize, num_items: usize, cfg: &ModelConfig, seed: u64) -> ModelParams {
        let mut rng = RngState::derived(seed, 0);
        let user = SideParams::init(num_items, cfg, &mut rng);
        let item = SideParams::init(num_users, cfg, &mut rng);
        ModelParams { user, item }
    }

    pub fn side(&self, side: Side) -> &SideParams {
        match side {
            Side::User => &self.user,
            Side::Item => &self.item,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut SideParams {
        match side {
            Side::User => &mut self.user,
            Side::Item => &mut self.item,
        }
    }

    /// `(qualified name, tensor)` for every parameter, user side first.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(14);
        for side in [Side::User, Side::Item] {
            for (name, t) in PARAM_NAMES.iter().zip(self.side(side).tensors()) {
                out.push((format!("{}.{name}", side.name()), t));
            }
        }
        out
    }

    pub fn num_users(&self) -> usize {
        self.item.encoder.input_dim()
    }

    pub fn num_items(&self) -> usize {
        self.user.encoder.input_dim()
    }
}

/// Tape handles for one side's parameters.
#[derive(Clone, Copy, Debug)]
pub struct SideVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
    pub prototypes: Var,
}

impl SideVars {
    pub fn register(params: &SideParams, tape: &mut Tape, trainable: bool) -> SideVars {
        let encoder = EncoderVars::register(&params.encoder, tape, trainable);
        let decoder = DecoderVars::register(&params.decoder, tape, trainable);
        let prototypes = if trainable {
            tape.leaf(params.prototypes.clone())
        } else {
            tape.constant(params.prototypes.clone())
        };
        SideVars {
            encoder,
            decoder,
            prototypes,
        }
    }

    /// Handles in [`PARAM_NAMES`] order.
    pub fn all(&self) -> [Var; 7] {
        [
            self.encoder.w1,
            self.encoder.b1,
            self.encoder.w2,
            self.encoder.b2,
            self.decoder.w,
            self.decoder.b,
            self.prototypes,
        ]
    }
}

/// Evaluation-mode view of one side: per-aspect posterior means, their
/// decoded images, and the stored aspect probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SideState {
    /// `A` tensors of `entities × d`.
    pub means: Vec<Tensor>,
    /// `f(means[a])` per aspect.
    pub decoded: Vec<Tensor>,
    /// `entities × A`.
    pub probs: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub user: SideState,
    pub item: SideState,
}

impl ModelState {
    pub fn side(&self, side: Side) -> &SideState {
        match side {
            Side::User => &self.user,
            Side::Item => &self.item,
        }
    }

    fn side_mut(&mut self, side: Side) -> &mut SideState {
        match side {
            Side::User => &mut self.user,
            Side::Item => &mut self.item,
        }
    }

    /// Uniform probabilities on both sides, means encoded under them.
    pub fn bootstrap(params: &ModelParams, train: &InteractionMatrix, cfg: &ModelConfig) -> Result<ModelState> {
        let p = uniform_probs(train.num_users(), cfg.aspects);
        let c = uniform_probs(train.num_items(), cfg.aspects);
        Self::from_probs(params, train, cfg, p, c)
    }

    /// Means recomputed from the stored probabilities `p` (users) and `c` (items).
    pub fn from_probs(
        params: &ModelParams,
        train: &InteractionMatrix,
        cfg: &ModelConfig,
        p: Tensor,
        c: Tensor,
    ) -> Result<ModelState> {
        let (um, ud) = encode_side(params, train, cfg, Side::User, &c)?;
        let (im, id) = encode_side(params, train, cfg, Side::Item, &p)?;
        Ok(ModelState {
            user: SideState {
                means: um,
                decoded: ud,
                probs: p,
            },
            item: SideState {
                means: im,
                decoded: id,
                probs: c,
            },
        })
    }

    /// Re-encodes `side` against the other side's stored probabilities and
    /// recomputes its own probabilities from the new means.
    pub fn refresh(&mut self, params: &ModelParams, train: &InteractionMatrix, cfg: &ModelConfig, side: Side) -> Result<()> {
        let (means, decoded) = encode_side(params, train, cfg, side, &self.side(side.other()).probs)?;
        let probs = if cfg.disentangled(side) {
            aspect_probs(&means, &params.side(side).prototypes, cfg.temp)?
        } else {
            uniform_probs(train.len(side), cfg.aspects)
        };
        *self.side_mut(side) = SideState { means, decoded, probs };
        Ok(())
    }
}

const ENCODE_CHUNK: usize = 512;

/// Posterior means and decoded means of every entity on `side`, with inputs
/// masked by `other_probs`.
pub fn encode_side(
    params: &ModelParams,
    train: &InteractionMatrix,
    cfg: &ModelConfig,
    side: Side,
    other_probs: &Tensor,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let sp = params.side(side);
    let count = train.len(side);
    let mut means: Vec<Vec<f64>> = vec![Vec::with_capacity(count * cfg.dim); cfg.aspects];
    let entities: Vec<usize> = (0..count).collect();
    for chunk in entities.chunks(ENCODE_CHUNK) {
        let slab = train.dense(side, chunk);
        let input = cfg.prepare_input(&slab, None);
        for (a, acc) in means.iter_mut().enumerate() {
            let mean = sp.encoder.encode_mean(&mask_slab(&input, &other_probs.column(a))?)?;
            acc.extend_from_slice(mean.data());
        }
    }
    let means: Vec<Tensor> = means
        .into_iter()
        .map(|m| Tensor::from_vec(count, cfg.dim, m))
        .collect::<Result<_>>()?;
    let decoded = means.iter().map(|m| sp.decoder.apply(m)).collect::<Result<_>>()?;
    Ok((means, decoded))
}

/// One side's minimized objective on a batch, plus its reported parts.
pub struct SideObjective {
    pub total: Var,
    pub vars: SideVars,
    pub terms: ElboTerms,
    /// Batch-averaged contrast sum before the γ weight.
    pub contrast: f64,
    pub codes: Vec<Var>,
}

/// Records `L = −ELBO + γ · Σ_a InfoNCE` for a batch of `side` entities,
/// with the other side frozen in `state`.
///
/// `eps` holds one `B × d` noise tensor per aspect (None = evaluation
/// mode); `dropout_rng` enables input dropout when configured.
pub fn side_objective(
    tape: &mut Tape,
    params: &ModelParams,
    state: &ModelState,
    side: Side,
    slab: &Tensor,
    eps: Option<&[Tensor]>,
    dropout_rng: Option<&mut RngState>,
    cfg: &ModelConfig,
) -> Result<SideObjective> {
    let vars = SideVars::register(params.side(side), tape, true);
    let other = state.side(side.other());
    let input = cfg.prepare_input(slab, dropout_rng);
    let graph = elbo_on_tape(tape, &vars, other, slab, &input, eps, cfg, cfg.disentangled(side))?;
    let terms = graph.terms(tape, cfg.beta);
    let batch = slab.rows().max(1) as f64;
    let ccfg = cfg.contrast_config();
    if !cfg.contrast_enabled() {
        return Ok(SideObjective {
            total: graph.loss,
            vars,
            terms,
            contrast: 0.0,
            codes: graph.codes,
        });
    }
    let valid: Vec<bool> = (0..slab.rows()).map(|r| slab.row_slice(r).iter().any(|&v| v != 0.0)).collect();
    let reprs = neighborhood_reprs(slab, &other.means, &other.probs)?;
    let repr_vars: Vec<Var> = reprs.into_iter().map(|o| tape.constant(o)).collect();
    let contrast_sum = contrast_on_tape(tape, &graph.codes, &repr_vars, &valid, &ccfg)?;
    let contrast = tape.value(contrast_sum).item() / batch;
    let weighted = tape.scale(contrast_sum, ccfg.gamma / batch);
    let total = tape.add(graph.loss, weighted)?;
    Ok(SideObjective {
        total,
        vars,
        terms,
        contrast,
        codes: graph.codes,
    })
}
