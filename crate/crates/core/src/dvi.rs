//! Aspect-masked variational encoding with diagonal Gaussian posteriors.

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tape, Tensor, Var};

/// Bounds applied to the encoder's log-variance output before `exp`.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Elementwise `r ⊗ aspect_col`. Summed over aspects of a simplex-valued
/// probability matrix this reproduces `r`.
pub fn mask_interactions(r: &[f64], aspect_col: &[f64]) -> Result<Vec<f64>> {
    if r.len() != aspect_col.len() {
        return Err(Error::Dimension {
            op: "mask_interactions",
            left: [1, r.len()],
            right: [1, aspect_col.len()],
        });
    }
    Ok(r.iter().zip(aspect_col).map(|(x, c)| x * c).collect())
}

/// Batched masking: every row of `slab` multiplied by `aspect_col` (one entry per column).
pub fn mask_slab(slab: &Tensor, aspect_col: &[f64]) -> Result<Tensor> {
    if slab.cols() != aspect_col.len() {
        return Err(Error::Dimension {
            op: "mask_slab",
            left: slab.shape(),
            right: [aspect_col.len(), 1],
        });
    }
    Ok(slab.mul_row_broadcast(aspect_col))
}

/// One-hidden-layer tanh encoder `input → hidden → [μ; log σ²]`, shared by
/// all aspects of one side.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Posterior parameters for a batch on one aspect.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub mean: Tensor,
    pub std: Tensor,
}

impl Encoder {
    pub fn init(input: usize, hidden: usize, dim: usize, rng: &mut RngState) -> Encoder {
        let s1 = (2.0 / (input + hidden) as f64).sqrt();
        let s2 = (2.0 / (hidden + 2 * dim) as f64).sqrt();
        Encoder {
            w1: rng.normal(input, hidden, s1),
            b1: Tensor::zeros(1, hidden),
            w2: rng.normal(hidden, 2 * dim, s2),
            b2: Tensor::zeros(1, 2 * dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w2.cols() / 2
    }

    /// Raw `[μ; log σ²]` rows (log-variance not yet clamped).
    pub fn forward(&self, masked: &Tensor) -> Result<Tensor> {
        if masked.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "encode",
                left: masked.shape(),
                right: self.w1.shape(),
            });
        }
        let h = add_row(&masked.matmul(&self.w1)?, &self.b1).map(f64::tanh);
        Ok(add_row(&h.matmul(&self.w2)?, &self.b2))
    }

    /// `(μ, σ)` for each row, `σ = exp(½ · clamp(log σ²))`.
    pub fn encode(&self, masked: &Tensor) -> Result<Posterior> {
        let out = self.forward(masked)?;
        out.ensure_finite("encoder output")?;
        let d = self.latent_dim();
        let mean = out.slice_cols(0, d);
        let std = out
            .slice_cols(d, 2 * d)
            .map(|lv| (0.5 * lv.clamp(LOGVAR_MIN, LOGVAR_MAX)).exp());
        Ok(Posterior { mean, std })
    }

    /// Mean only, for refreshing frozen state and evaluation.
    pub fn encode_mean(&self, masked: &Tensor) -> Result<Tensor> {
        let out = self.forward(masked)?;
        out.ensure_finite("encoder output")?;
        Ok(out.slice_cols(0, self.latent_dim()))
    }
}

fn add_row(t: &Tensor, row: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        for (o, b) in out.row_slice_mut(r).iter_mut().zip(row.data()) {
            *o += b;
        }
    }
    out
}

/// Encoder parameters as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl EncoderVars {
    pub fn register(enc: &Encoder, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        EncoderVars {
            w1: put(&enc.w1),
            b1: put(&enc.b1),
            w2: put(&enc.w2),
            b2: put(&enc.b2),
        }
    }
}

/// Posterior nodes for one aspect of a batch.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mean: Var,
    /// Clamped log-variance.
    pub logvar: Var,
    pub std: Var,
}

pub fn encode_on_tape(tape: &mut Tape, enc: &EncoderVars, masked: Var, dim: usize) -> Result<PosteriorVars> {
    let pre = tape.matmul(masked, enc.w1)?;
    let pre = tape.add(pre, enc.b1)?;
    let hidden = tape.tanh(pre);
    let out = tape.matmul(hidden, enc.w2)?;
    let out = tape.add(out, enc.b2)?;
    tape.value(out).ensure_finite("encoder output")?;
    let mean = tape.slice_cols(out, 0, dim)?;
    let raw_lv = tape.slice_cols(out, dim, 2 * dim)?;
    let logvar = tape.clamp(raw_lv, LOGVAR_MIN, LOGVAR_MAX);
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    Ok(PosteriorVars { mean, logvar, std })
}

/// `z = μ + σ ⊗ ε`.
pub fn reparameterize(mean: &Tensor, std: &Tensor, eps: &Tensor) -> Tensor {
    let mut z = mean.clone();
    for ((zv, s), e) in z.data_mut().iter_mut().zip(std.data()).zip(eps.data()) {
        *zv += s * e;
    }
    z
}

/// Draws `ε ~ N(0, I)` and returns `(z, ε)`.
pub fn sample_latent(mean: &Tensor, std: &Tensor, rng: &mut RngState) -> (Tensor, Tensor) {
    let eps = rng.standard_normal(mean.rows(), mean.cols());
    (reparameterize(mean, std, &eps), eps)
}

pub fn reparameterize_on_tape(tape: &mut Tape, post: &PosteriorVars, eps: &Tensor) -> Result<Var> {
    let e = tape.constant(eps.clone());
    let noise = tape.mul(post.std, e)?;
    tape.add(post.mean, noise)
}

/// `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (σ² + μ² − 1 − ln σ²)`.
pub fn kl_gaussian(mean: &[f64], std: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(std)
        .map(|(&m, &s)| {
            let var = s * s;
            var + m * m - 1.0 - var.ln()
        })
        .sum::<f64>()
}

/// Per-row KL as a `rows × 1` node.
pub fn kl_rows_on_tape(tape: &mut Tape, post: &PosteriorVars) -> Result<Var> {
    let var = tape.exp(post.logvar);
    let msq = tape.mul(post.mean, post.mean)?;
    let t = tape.add(var, msq)?;
    let t = tape.sub(t, post.logvar)?;
    let t = tape.add_scalar(t, -1.0);
    let s = tape.sum_rows(t);
    Ok(tape.scale(s, 0.5))
}
