//! Joint generation: skip-connection decoder, aspect-weighted score and
//! Poisson likelihood, plus the per-side ELBO graph used for training.

use crate::data::Side;
use crate::dvi::{encode_on_tape, kl_rows_on_tape, mask_slab, reparameterize_on_tape, PosteriorVars};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ModelState, SideState, SideVars};
use crate::tensor::{sigmoid, RngState, Tape, Tensor, Var};

/// `f(z) = tanh(z W + b)`, a `d → d` map shared across aspects of one side.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub w: Tensor,
    pub b: Tensor,
}

impl Decoder {
    pub fn init(dim: usize, rng: &mut RngState) -> Decoder {
        Decoder {
            w: rng.normal(dim, dim, 1.0 / (dim as f64).sqrt()),
            b: Tensor::zeros(1, dim),
        }
    }

    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        let mut out = z.matmul(&self.w)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_slice_mut(r).iter_mut().zip(self.b.data()) {
                *o = (*o + b).tanh();
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub w: Var,
    pub b: Var,
}

impl DecoderVars {
    pub fn register(dec: &Decoder, tape: &mut Tape, trainable: bool) -> DecoderVars {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        DecoderVars {
            w: put(&dec.w),
            b: put(&dec.b),
        }
    }

    pub fn apply_on_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let pre = tape.matmul(z, self.w)?;
        let pre = tape.add(pre, self.b)?;
        Ok(tape.tanh(pre))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `⟨z_u, z_i⟩ + ⟨f_u(z_u), f_i(z_i)⟩` for one aspect.
pub fn skip_score(z_user: &[f64], z_item: &[f64], user_dec: &Decoder, item_dec: &Decoder) -> Result<f64> {
    if z_user.len() != z_item.len() {
        return Err(Error::Dimension {
            op: "skip_score",
            left: [1, z_user.len()],
            right: [1, z_item.len()],
        });
    }
    let fu = user_dec.apply(&Tensor::row(z_user))?;
    let fi = item_dec.apply(&Tensor::row(z_item))?;
    Ok(dot(z_user, z_item) + dot(fu.data(), fi.data()))
}

/// `g = Σ_a p^a c^a σ(skip^a)`; all three slices are indexed by aspect.
pub fn joint_score_from_parts(user_probs: &[f64], item_probs: &[f64], skips: &[f64]) -> f64 {
    aspect_addends(user_probs, item_probs, skips).iter().sum()
}

/// The per-aspect terms `p^a c^a σ(skip^a)` whose sum is the joint score.
pub fn aspect_addends(user_probs: &[f64], item_probs: &[f64], skips: &[f64]) -> Vec<f64> {
    user_probs
        .iter()
        .zip(item_probs)
        .zip(skips)
        .map(|((p, c), s)| p * c * sigmoid(*s))
        .collect()
}

/// Joint score of `(user, item)` using the state's latent means (evaluation mode).
pub fn joint_score(user: usize, item: usize, state: &ModelState) -> Result<f64> {
    let (_, addends) = score_breakdown(user, item, state)?;
    Ok(addends.iter().sum())
}

/// `(skips, addends)` per aspect for one pair.
pub fn score_breakdown(
    user: usize,
    item: usize,
    state: &ModelState,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (us, is) = (&state.user, &state.item);
    let aspects = us.means.len();
    let mut skips = Vec::with_capacity(aspects);
    for a in 0..aspects {
        let zu = us.means[a].row_slice(user);
        let zi = is.means[a].row_slice(item);
        let s = dot(zu, zi) + dot(us.decoded[a].row_slice(user), is.decoded[a].row_slice(item));
        skips.push(s);
    }
    let addends = aspect_addends(us.probs.row_slice(user), is.probs.row_slice(item), &skips);
    Ok((skips, addends))
}

/// Dense `|users| × n` score block in evaluation mode.
pub fn score_block(users: &[usize], state: &ModelState) -> Result<Tensor> {
    let (us, is) = (&state.user, &state.item);
    let n = is.probs.rows();
    let mut g = Tensor::zeros(users.len(), n);
    for a in 0..us.means.len() {
        let zu = us.means[a].gather_rows(users);
        let fu = us.decoded[a].gather_rows(users);
        let mut skip = zu.matmul_t(&is.means[a])?;
        skip.add_assign(&fu.matmul_t(&is.decoded[a])?);
        let pu: Vec<f64> = users.iter().map(|&u| us.probs.get(u, a)).collect();
        let ci = is.probs.column(a);
        for (r, &p) in pu.iter().enumerate() {
            for ((o, &s), &c) in g.row_slice_mut(r).iter_mut().zip(skip.row_slice(r)).zip(&ci) {
                *o += p * c * sigmoid(s);
            }
        }
    }
    Ok(g)
}

/// `r ln g − g` (the `ln r!` term vanishes for binary feedback).
pub fn poisson_loglik(r: f64, g: f64) -> Result<f64> {
    if g <= 0.0 || g.is_nan() {
        return Err(Error::Domain {
            op: "poisson_loglik",
            detail: format!("rate must be positive, got {g}"),
        });
    }
    Ok(r * g.ln() - g)
}

/// Batch-averaged ELBO pieces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl: f64,
    pub beta: f64,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        self.recon - self.beta * self.kl
    }

    /// Quantity minimized during training.
    pub fn loss(&self) -> f64 {
        -self.elbo()
    }
}

/// Nodes of one side's ELBO graph for a batch.
pub struct ElboGraph {
    /// `−(recon − β·KL)` averaged over the batch, `1 × 1`.
    pub loss: Var,
    /// Per-entity reconstruction log-likelihood, `B × 1`.
    pub recon_rows: Var,
    /// Per-entity KL summed over aspects, `B × 1`.
    pub kl_rows: Var,
    pub posteriors: Vec<PosteriorVars>,
    /// Latent codes fed to the decoder (samples, or means in evaluation mode).
    pub codes: Vec<Var>,
    /// Live aspect probabilities of the batch entities, `B × A`.
    pub own_probs: Var,
    /// Full joint score block `B × |other side|`.
    pub scores: Var,
    pub batch: usize,
}

/// Builds the ELBO for a batch of `side` entities against the frozen
/// opposite side.
///
/// The batch input is masked per aspect with the opposite side's stored
/// probabilities; the batch's own probabilities are computed live from its
/// posterior means so gradients reach the side's prototypes. With
/// `eps = None` the codes are the means.
pub fn elbo_on_tape(
    tape: &mut Tape,
    own: &SideVars,
    other: &SideState,
    slab: &Tensor,
    input: &Tensor,
    eps: Option<&[Tensor]>,
    cfg: &ModelConfig,
    own_disentangled: bool,
) -> Result<ElboGraph> {
    let aspects = cfg.aspects;
    let dim = cfg.dim;
    let batch = slab.rows();
    if other.probs.rows() != slab.cols() || other.probs.cols() != aspects {
        return Err(Error::Dimension {
            op: "elbo",
            left: slab.shape(),
            right: other.probs.shape(),
        });
    }
    let mut posteriors = Vec::with_capacity(aspects);
    let mut codes = Vec::with_capacity(aspects);
    let mut sig = Vec::with_capacity(aspects);
    let mut kl_total: Option<Var> = None;
    for a in 0..aspects {
        let masked = tape.constant(mask_slab(input, &other.probs.column(a))?);
        let post = encode_on_tape(tape, &own.encoder, masked, dim)?;
        let z = match eps {
            Some(e) => reparameterize_on_tape(tape, &post, &e[a])?,
            None => post.mean,
        };
        let kl = kl_rows_on_tape(tape, &post)?;
        kl_total = Some(match kl_total {
            Some(acc) => tape.add(acc, kl)?,
            None => kl,
        });

        let other_means = tape.constant(other.means[a].clone());
        let other_means_t = tape.transpose(other_means);
        let linear = tape.matmul(z, other_means_t)?;
        let fz = own.decoder.apply_on_tape(tape, z)?;
        let other_dec = tape.constant(other.decoded[a].clone());
        let other_dec_t = tape.transpose(other_dec);
        let nonlinear = tape.matmul(fz, other_dec_t)?;
        let skip = tape.add(linear, nonlinear)?;
        sig.push(tape.sigmoid(skip));
        posteriors.push(post);
        codes.push(z);
    }

    let own_probs = if own_disentangled {
        let means: Vec<Var> = posteriors.iter().map(|p| p.mean).collect();
        crate::add::aspect_probs_on_tape(tape, &means, own.prototypes, cfg.temp)?
    } else {
        tape.constant(crate::add::uniform_probs(batch, aspects))
    };

    let mut scores: Option<Var> = None;
    for (a, &s) in sig.iter().enumerate() {
        let p_col = tape.slice_cols(own_probs, a, a + 1)?;
        let c_row = tape.constant(Tensor::row(&other.probs.column(a)));
        let weight = tape.matmul(p_col, c_row)?;
        let term = tape.mul(weight, s)?;
        scores = Some(match scores {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let scores = scores.expect("at least one aspect");

    let r = tape.constant(slab.clone());
    let log_g = tape.log(scores)?;
    let hits = tape.mul(r, log_g)?;
    let ll = tape.sub(hits, scores)?;
    let recon_rows = tape.sum_rows(ll);
    let kl_rows = kl_total.expect("at least one aspect");
    let weighted_kl = tape.scale(kl_rows, cfg.beta);
    let neg_elbo = tape.sub(weighted_kl, recon_rows)?;
    let total = tape.sum(neg_elbo);
    let loss = tape.scale(total, 1.0 / batch.max(1) as f64);
    Ok(ElboGraph {
        loss,
        recon_rows,
        kl_rows,
        posteriors,
        codes,
        own_probs,
        scores,
        batch,
    })
}

impl ElboGraph {
    pub fn terms(&self, tape: &Tape, beta: f64) -> ElboTerms {
        let b = self.batch.max(1) as f64;
        ElboTerms {
            recon: tape.value(self.recon_rows).sum() / b,
            kl: tape.value(self.kl_rows).sum() / b,
            beta,
        }
    }
}

/// User-side ELBO terms for a batch with item parameters and `C` frozen.
pub fn user_side_loss(
    params: &ModelParams,
    state: &ModelState,
    users: &[usize],
    slab: &Tensor,
    eps: Option<&[Tensor]>,
    cfg: &ModelConfig,
) -> Result<ElboTerms> {
    side_loss(Side::User, params, state, users, slab, eps, cfg)
}

/// Item-side mirror of [`user_side_loss`], with user parameters and `P` frozen.
pub fn item_side_loss(
    params: &ModelParams,
    state: &ModelState,
    items: &[usize],
    slab: &Tensor,
    eps: Option<&[Tensor]>,
    cfg: &ModelConfig,
) -> Result<ElboTerms> {
    side_loss(Side::Item, params, state, items, slab, eps, cfg)
}

fn side_loss(
    side: Side,
    params: &ModelParams,
    state: &ModelState,
    entities: &[usize],
    slab: &Tensor,
    eps: Option<&[Tensor]>,
    cfg: &ModelConfig,
) -> Result<ElboTerms> {
    debug_assert_eq!(entities.len(), slab.rows());
    let mut tape = Tape::new();
    let vars = SideVars::register(params.side(side), &mut tape, true);
    let input = cfg.prepare_input(slab, None);
    let graph = elbo_on_tape(
        &mut tape,
        &vars,
        state.side(side.other()),
        slab,
        &input,
        eps,
        cfg,
        cfg.disentangled(side),
    )?;
    Ok(graph.terms(&tape, cfg.beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_decoder(d: usize) -> Decoder {
        Decoder {
            w: Tensor::zeros(d, d),
            b: Tensor::zeros(1, d),
        }
    }

    #[test]
    fn skip_at_origin_is_zero() {
        let mut rng = RngState::new(1);
        let du = Decoder::init(3, &mut rng);
        let di = Decoder::init(3, &mut rng);
        assert_eq!(skip_score(&[0.0; 3], &[0.0; 3], &du, &di).unwrap(), 0.0);
    }

    #[test]
    fn skip_without_nonlinearity_is_inner_product() {
        let s = skip_score(&[1.0, 2.0], &[0.5, -3.0], &zero_decoder(2), &zero_decoder(2)).unwrap();
        assert_eq!(s, 0.5 - 6.0);
    }

    #[test]
    fn skip_gradient_matches_finite_differences() {
        let mut rng = RngState::new(3);
        let du = Decoder::init(4, &mut rng);
        let di = Decoder::init(4, &mut rng);
        let zu = rng.standard_normal(1, 4);
        let zi = rng.standard_normal(1, 4);
        let mut tape = Tape::new();
        let zv = tape.leaf(zu.clone());
        let iv = tape.constant(zi.clone());
        let duv = DecoderVars::register(&du, &mut tape, false);
        let div = DecoderVars::register(&di, &mut tape, false);
        let lin = tape.dot_rows(zv, iv).unwrap();
        let fu = duv.apply_on_tape(&mut tape, zv).unwrap();
        let fi = div.apply_on_tape(&mut tape, iv).unwrap();
        let nl = tape.dot_rows(fu, fi).unwrap();
        let root = tape.add(lin, nl).unwrap();
        assert!((tape.value(root).item() - skip_score(zu.data(), zi.data(), &du, &di).unwrap()).abs() < 1e-14);
        let g = tape.backward(root).unwrap().get(zv);
        for k in 0..4 {
            let (mut up, mut dn) = (zu.clone(), zu.clone());
            up.data_mut()[k] += 1e-6;
            dn.data_mut()[k] -= 1e-6;
            let num = (skip_score(up.data(), zi.data(), &du, &di).unwrap()
                - skip_score(dn.data(), zi.data(), &du, &di).unwrap())
                / 2e-6;
            assert!((g.data()[k] - num).abs() / num.abs().max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn joint_score_examples() {
        assert_eq!(joint_score_from_parts(&[1.0], &[1.0], &[0.0]), 0.5);
        assert!((joint_score_from_parts(&[0.5, 0.5], &[0.5, 0.5], &[0.0, 0.0]) - 0.25).abs() < 1e-15);
        let base = joint_score_from_parts(&[0.3, 0.7], &[0.6, 0.4], &[0.2, -1.0]);
        let up = joint_score_from_parts(&[0.3, 0.7], &[0.6, 0.4], &[0.2, -0.5]);
        assert!(up > base);
    }

    #[test]
    fn poisson_examples() {
        assert!((poisson_loglik(0.0, 0.3).unwrap() + 0.3).abs() < 1e-15);
        assert_eq!(poisson_loglik(1.0, 1.0).unwrap(), -1.0);
        assert!(poisson_loglik(1.0, 0.0).is_err());
        // d/dg (ln g − g) = 1/g − 1 ≥ 0 on (0, 1]: maximum at the boundary.
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=100 {
            let g = k as f64 / 100.0;
            let v = poisson_loglik(1.0, g).unwrap();
            assert!(v > prev);
            assert!(1.0 / g - 1.0 >= 0.0);
            prev = v;
        }
    }
}
