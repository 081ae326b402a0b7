//! Neighborhood contrast: aspect-level neighborhood aggregates as positives
//! for each entity's aspect codes, with other aspects of the same entity and
//! the same aspect of other batch entities as negatives (InfoNCE).

use crate::data::{NeighborSets, Side};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, NORM_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastConfig {
    pub tau: f64,
    pub gamma: f64,
    /// Same aspect of other batch entities as negatives.
    pub use_entity_negs: bool,
    /// Other aspects of the same entity as negatives.
    pub use_aspect_negs: bool,
    /// Neighborhood aggregate as the positive; otherwise the code itself.
    pub use_neighbor_pos: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau: 0.2,
            gamma: 0.1,
            use_entity_negs: true,
            use_aspect_negs: true,
            use_neighbor_pos: true,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// `o^a = Σ_{j ∈ N(entity)} probs[j, a] · latents[a][j]` for one entity.
///
/// `latents` and `probs` belong to the opposite side. An empty
/// neighborhood yields the zero vector.
pub fn neighborhood_repr(
    side: Side,
    entity: usize,
    aspect: usize,
    latents: &[Tensor],
    probs: &Tensor,
    neighbors: &NeighborSets,
) -> Vec<f64> {
    let lat = &latents[aspect];
    let mut o = vec![0.0; lat.cols()];
    for &j in neighbors.of(side, entity) {
        let w = probs.get(j as usize, aspect);
        for (acc, v) in o.iter_mut().zip(lat.row_slice(j as usize)) {
            *acc += w * v;
        }
    }
    o
}

/// Batched aggregates: for each aspect, `slab · (probs[:, a] ⊗ latents[a])`,
/// a `B × d` matrix whose rows are the batch entities' `o^a`.
pub fn neighborhood_reprs(slab: &Tensor, latents: &[Tensor], probs: &Tensor) -> Result<Vec<Tensor>> {
    latents
        .iter()
        .enumerate()
        .map(|(a, lat)| slab.matmul(&lat.mul_col_broadcast(&probs.column(a))))
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= NORM_FLOOR || nb <= NORM_FLOOR {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// InfoNCE loss of one anchor `(entity, aspect)` within a batch.
///
/// `codes[a]` and `reprs[a]` are `B × d`, rows in batch order; `entity` is
/// a row index. `valid[v]` marks batch rows allowed as entity-level
/// negatives (non-empty neighborhoods).
pub fn infonce(
    entity: usize,
    aspect: usize,
    codes: &[Tensor],
    reprs: &[Tensor],
    valid: &[bool],
    cfg: &ContrastConfig,
) -> f64 {
    let z = codes[aspect].row_slice(entity);
    let positive = if cfg.use_neighbor_pos {
        reprs[aspect].row_slice(entity)
    } else {
        z
    };
    let pos = cosine(z, positive) / cfg.tau;
    let mut logits = vec![pos];
    if cfg.use_aspect_negs {
        for (b, rep) in reprs.iter().enumerate() {
            if b != aspect {
                logits.push(cosine(z, rep.row_slice(entity)) / cfg.tau);
            }
        }
    }
    if cfg.use_entity_negs {
        for v in 0..reprs[aspect].rows() {
            if v != entity && valid[v] {
                logits.push(cosine(z, reprs[aspect].row_slice(v)) / cfg.tau);
            }
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - pos
}

/// User-anchor loss (negatives are batch users).
pub fn infonce_user(
    user: usize,
    aspect: usize,
    codes: &[Tensor],
    reprs: &[Tensor],
    valid: &[bool],
    cfg: &ContrastConfig,
) -> f64 {
    infonce(user, aspect, codes, reprs, valid, cfg)
}

/// Item-anchor loss (negatives are batch items).
pub fn infonce_item(
    item: usize,
    aspect: usize,
    codes: &[Tensor],
    reprs: &[Tensor],
    valid: &[bool],
    cfg: &ContrastConfig,
) -> f64 {
    infonce(item, aspect, codes, reprs, valid, cfg)
}

/// Sum of InfoNCE losses over every valid batch row and every aspect, as a
/// `1 × 1` node. Rows with `valid[r] == false` are neither anchors nor
/// negatives. Gradients flow through the codes and, when they are tape
/// nodes rather than constants, the aggregates.
pub fn contrast_on_tape(
    tape: &mut Tape,
    codes: &[Var],
    reprs: &[Var],
    valid: &[bool],
    cfg: &ContrastConfig,
) -> Result<Var> {
    let aspects = codes.len();
    let batch = valid.len();
    let inv_tau = 1.0 / cfg.tau;
    let valid_col = tape.constant(Tensor::from_vec(batch, 1, valid.iter().map(|&v| f64::from(v)).collect())?);
    let neg_mask = tape.constant(Tensor::from_fn(batch, batch, |u, v| f64::from(u != v && valid[v])));
    let unit_z: Vec<Var> = codes.iter().map(|&z| tape.normalize_rows(z)).collect();
    let unit_o: Vec<Var> = reprs.iter().map(|&o| tape.normalize_rows(o)).collect();
    let mut total: Option<Var> = None;
    for a in 0..aspects {
        let partner = if cfg.use_neighbor_pos { unit_o[a] } else { unit_z[a] };
        let pos = tape.dot_rows(unit_z[a], partner)?;
        let pos = tape.scale(pos, inv_tau);
        let mut denom = tape.exp(pos);
        if cfg.use_aspect_negs {
            for b in (0..aspects).filter(|&b| b != a) {
                let s = tape.dot_rows(unit_z[a], unit_o[b])?;
                let s = tape.scale(s, inv_tau);
                let e = tape.exp(s);
                denom = tape.add(denom, e)?;
            }
        }
        if cfg.use_entity_negs && batch > 1 {
            let ot = tape.transpose(unit_o[a]);
            let sims = tape.matmul(unit_z[a], ot)?;
            let sims = tape.scale(sims, inv_tau);
            let e = tape.exp(sims);
            let e = tape.mul(e, neg_mask)?;
            let s = tape.sum_rows(e);
            denom = tape.add(denom, s)?;
        }
        let log_denom = tape.log(denom)?;
        let loss = tape.sub(log_denom, pos)?;
        let loss = tape.mul(loss, valid_col)?;
        let s = tape.sum(loss);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::Config("at least one aspect is required".into()))
}

/// `vae_loss + γ · contrast`, both already batch-averaged.
pub fn total_loss(vae_loss: f64, contrast: f64, gamma: f64) -> f64 {
    vae_loss + gamma * contrast
}
