//! Finite-difference check of every parameter group's gradient of the
//! per-side training objective on a small random instance.

use std::fmt::Write as _;

use crate::data::{InteractionMatrix, Side};
use crate::error::Result;
use crate::model::{side_objective, ModelConfig, ModelParams, ModelState};
use crate::tensor::{RngState, Tape, Tensor};

pub const USERS: usize = 8;
pub const ITEMS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    UserEncoder,
    ItemEncoder,
    UserDecoder,
    ItemDecoder,
    /// Item prototypes `H`.
    ItemPrototypes,
    /// User prototypes `M`.
    UserPrototypes,
}

pub const GROUPS: [Group; 6] = [
    Group::UserEncoder,
    Group::ItemEncoder,
    Group::UserDecoder,
    Group::ItemDecoder,
    Group::ItemPrototypes,
    Group::UserPrototypes,
];

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::UserEncoder => "encoder(u)",
            Group::ItemEncoder => "encoder(i)",
            Group::UserDecoder => "decoder(u)",
            Group::ItemDecoder => "decoder(i)",
            Group::ItemPrototypes => "prototypes(H)",
            Group::UserPrototypes => "prototypes(M)",
        }
    }

    pub fn side(self) -> Side {
        match self {
            Group::UserEncoder | Group::UserDecoder | Group::UserPrototypes => Side::User,
            _ => Side::Item,
        }
    }

    /// Indices into the side's parameter list.
    fn slots(self) -> &'static [usize] {
        match self {
            Group::UserEncoder | Group::ItemEncoder => &[0, 1, 2, 3],
            Group::UserDecoder | Group::ItemDecoder => &[4, 5],
            Group::UserPrototypes | Group::ItemPrototypes => &[6],
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: negate the analytic gradient of this group.
    pub flip_sign: Option<Group>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            flip_sign: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub group: Group,
    pub max_rel_err: f64,
    pub coordinates: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.tolerance)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("group\tcoords\tmax_rel_err\tstatus\n");
        for g in &self.groups {
            let status = if g.max_rel_err < self.tolerance { "ok" } else { "FAIL" };
            let _ = writeln!(out, "{}\t{}\t{:.3e}\t{}", g.group.name(), g.coordinates, g.max_rel_err, status);
        }
        out
    }
}

/// Config of the check instance. A unit softmax temperature keeps scores
/// away from zero, where `ln g` is too curved for a 1e-5 central difference.
pub fn instance_config() -> ModelConfig {
    ModelConfig {
        aspects: 3,
        dim: 4,
        hidden: 8,
        temp: 1.0,
        ..ModelConfig::default()
    }
}

fn instance_matrix(rng: &mut RngState) -> Result<InteractionMatrix> {
    let mut pairs = Vec::new();
    for u in 0..USERS {
        for i in 0..ITEMS {
            if rng.uniform() < 0.35 || i == u || i == u + USERS / 2 {
                pairs.push((u as u32, i as u32));
            }
        }
    }
    InteractionMatrix::from_pairs(USERS, ITEMS, &pairs)
}

/// Gradient denominator floor; below it errors are measured absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = instance_config();
    let mut rng = RngState::derived(opts.seed, 7);
    let matrix = instance_matrix(&mut rng)?;
    let params = ModelParams::init(USERS, ITEMS, &cfg, opts.seed);
    let mut state = ModelState::bootstrap(&params, &matrix, &cfg)?;
    state.refresh(&params, &matrix, &cfg, Side::Item)?;
    state.refresh(&params, &matrix, &cfg, Side::User)?;

    let mut groups = Vec::new();
    for side in [Side::User, Side::Item] {
        let entities: Vec<usize> = (0..matrix.len(side)).collect();
        let slab = matrix.dense(side, &entities);
        let eps: Vec<Tensor> = (0..cfg.aspects)
            .map(|_| rng.standard_normal(entities.len(), cfg.dim))
            .collect();
        let objective = |p: &ModelParams| -> Result<f64> {
            let mut tape = Tape::new();
            let obj = side_objective(&mut tape, p, &state, side, &slab, Some(&eps), None, &cfg)?;
            Ok(tape.value(obj.total).item())
        };
        let mut tape = Tape::new();
        let obj = side_objective(&mut tape, &params, &state, side, &slab, Some(&eps), None, &cfg)?;
        let grads = tape.backward(obj.total)?;
        let analytic: Vec<Tensor> = obj.vars.all().iter().map(|&v| grads.get(v)).collect();

        for group in GROUPS.into_iter().filter(|g| g.side() == side) {
            let sign = if opts.flip_sign == Some(group) { -1.0 } else { 1.0 };
            let mut worst = 0.0f64;
            let mut coords = 0;
            for &slot in group.slots() {
                let len = params.side(side).tensors()[slot].len();
                for k in 0..len {
                    let mut plus = params.clone();
                    plus.side_mut(side).tensors_mut()[slot].data_mut()[k] += opts.step;
                    let mut minus = params.clone();
                    minus.side_mut(side).tensors_mut()[slot].data_mut()[k] -= opts.step;
                    let numeric = (objective(&plus)? - objective(&minus)?) / (2.0 * opts.step);
                    let a = sign * analytic[slot].data()[k];
                    let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                    worst = worst.max(err);
                    coords += 1;
                }
            }
            groups.push(GroupResult {
                group,
                max_rel_err: worst,
                coordinates: coords,
            });
        }
    }
    groups.sort_by_key(|g| GROUPS.iter().position(|x| *x == g.group));
    Ok(GradcheckReport {
        groups,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes_every_group() {
        let report = run(&GradcheckOptions::default()).unwrap();
        assert!(report.passed(), "{}", report.render());
        let names: Vec<_> = report.groups.iter().map(|g| g.group.name()).collect();
        assert_eq!(
            names,
            ["encoder(u)", "encoder(i)", "decoder(u)", "decoder(i)", "prototypes(H)", "prototypes(M)"]
        );
    }

    #[test]
    fn flipped_sign_is_reported() {
        let report = run(&GradcheckOptions {
            flip_sign: Some(Group::ItemDecoder),
            ..GradcheckOptions::default()
        })
        .unwrap();
        assert!(!report.passed());
        for g in &report.groups {
            assert_eq!(g.max_rel_err >= report.tolerance, g.group == Group::ItemDecoder, "{}", report.render());
        }
    }
}
