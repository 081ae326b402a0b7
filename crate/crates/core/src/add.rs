//! Prototype attention: per-entity aspect probabilities from the cosine
//! affinity between each aspect's latent mean and that aspect's prototype.
//!
//! Item rows (`C`) use the item prototypes, user rows (`P`) the user
//! prototypes; the computation is identical, only the inputs differ.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// `entities × A` matrix whose rows lie on the probability simplex.
pub type AspectProbabilities = Tensor;

pub fn uniform_probs(entities: usize, aspects: usize) -> AspectProbabilities {
    Tensor::filled(entities, aspects, 1.0 / aspects as f64)
}

/// Affinity matrix `S[e, a] = cos(means[a][e], prototypes[a])`.
///
/// Zero-norm means or prototypes contribute an affinity of 0.
pub fn affinities(means: &[Tensor], prototypes: &Tensor) -> Result<Tensor> {
    check_shapes(means, prototypes)?;
    let aspects = means.len();
    let entities = means[0].rows();
    let protos = prototypes.normalize_rows();
    let mut zero_norm = 0usize;
    let mut s = Tensor::zeros(entities, aspects);
    for (a, mean) in means.iter().enumerate() {
        let unit = mean.normalize_rows();
        let proto = protos.row_slice(a);
        for e in 0..entities {
            let row = unit.row_slice(e);
            let dot: f64 = row.iter().zip(proto).map(|(x, y)| x * y).sum();
            if dot == 0.0 && row.iter().all(|&v| v == 0.0) {
                zero_norm += 1;
            }
            s.set(e, a, dot);
        }
    }
    if zero_norm > 0 {
        log::warn!("{zero_norm} zero-norm latent means; cosine affinity set to 0");
    }
    Ok(s)
}

/// Softmax over aspects of `affinity / temp`.
pub fn aspect_probs(means: &[Tensor], prototypes: &Tensor, temp: f64) -> Result<AspectProbabilities> {
    check_temp(temp)?;
    Ok(affinities(means, prototypes)?.scaled(1.0 / temp).softmax_rows())
}

/// `C`: item-aspect probabilities from item means and item prototypes.
pub fn item_aspect_probs(item_means: &[Tensor], item_prototypes: &Tensor, temp: f64) -> Result<AspectProbabilities> {
    aspect_probs(item_means, item_prototypes, temp)
}

/// `P`: user-aspect probabilities from user means and user prototypes.
pub fn user_aspect_probs(user_means: &[Tensor], user_prototypes: &Tensor, temp: f64) -> Result<AspectProbabilities> {
    aspect_probs(user_means, user_prototypes, temp)
}

/// Differentiable version over tape variables, gradients reaching both the
/// means and the prototypes.
pub fn aspect_probs_on_tape(tape: &mut Tape, means: &[Var], prototypes: Var, temp: f64) -> Result<Var> {
    check_temp(temp)?;
    let unit_protos = tape.normalize_rows(prototypes);
    let protos_t = tape.transpose(unit_protos);
    let mut cols = Vec::with_capacity(means.len());
    for (a, &mean) in means.iter().enumerate() {
        let unit = tape.normalize_rows(mean);
        // Cosines against every prototype; only prototype `a` is kept.
        let all = tape.matmul(unit, protos_t)?;
        cols.push(tape.slice_cols(all, a, a + 1)?);
    }
    let s = tape.concat_cols(&cols)?;
    let scaled = tape.scale(s, 1.0 / temp);
    Ok(tape.softmax_rows(scaled))
}

fn check_temp(temp: f64) -> Result<()> {
    if temp > 0.0 && temp.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("aspect temperature must be > 0, got {temp}")))
    }
}

fn check_shapes(means: &[Tensor], prototypes: &Tensor) -> Result<()> {
    let Some(first) = means.first() else {
        return Err(Error::Config("at least one aspect is required".into()));
    };
    if prototypes.rows() != means.len() {
        return Err(Error::Dimension {
            op: "aspect_probs",
            left: [means.len(), first.cols()],
            right: prototypes.shape(),
        });
    }
    for m in means {
        if m.shape() != first.shape() || m.cols() != prototypes.cols() {
            return Err(Error::Dimension {
                op: "aspect_probs",
                left: m.shape(),
                right: prototypes.shape(),
            });
        }
    }
    Ok(())
}

/// Per-row entropy (nats) and dominant aspect of a probability matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AspectEntropyReport {
    pub entropy: Vec<f64>,
    /// Ties go to the lowest aspect index.
    pub argmax: Vec<usize>,
}

pub fn aspect_entropy_report(probs: &Tensor) -> AspectEntropyReport {
    let mut entropy = Vec::with_capacity(probs.rows());
    let mut argmax = Vec::with_capacity(probs.rows());
    for r in 0..probs.rows() {
        let row = probs.row_slice(r);
        entropy.push(-row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>());
        let mut best = 0;
        for (a, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = a;
            }
        }
        argmax.push(best);
    }
    AspectEntropyReport { entropy, argmax }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;
    use proptest::prelude::*;

    fn means_from(rng: &mut RngState, entities: usize, aspects: usize, d: usize) -> Vec<Tensor> {
        (0..aspects).map(|_| rng.standard_normal(entities, d)).collect()
    }

    /// Explicit-loop recomputation: cosines, exp, normalize.
    fn loop_oracle(means: &[Tensor], protos: &Tensor, temp: f64) -> Vec<Vec<f64>> {
        let entities = means[0].rows();
        (0..entities)
            .map(|e| {
                let scores: Vec<f64> = (0..means.len())
                    .map(|a| {
                        let z = means[a].row_slice(e);
                        let h = protos.row_slice(a);
                        let dot: f64 = z.iter().zip(h).map(|(x, y)| x * y).sum();
                        let nz = z.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nh = h.iter().map(|x| x * x).sum::<f64>().sqrt();
                        (dot / (nz * nh) / temp).exp()
                    })
                    .collect();
                let total: f64 = scores.iter().sum();
                scores.iter().map(|s| s / total).collect()
            })
            .collect()
    }

    #[test]
    fn equal_affinities_give_uniform_rows() {
        let means = vec![Tensor::row(&[1.0, 0.0]); 4];
        let protos = Tensor::from_rows(&vec![vec![0.0, 2.0]; 4]).unwrap();
        let c = item_aspect_probs(&means, &protos, 0.1).unwrap();
        for &p in c.data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let p = user_aspect_probs(&means, &protos, 1.0).unwrap();
        for &v in p.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_aspect_is_one() {
        let c = item_aspect_probs(&[Tensor::row(&[0.3, -1.0])], &Tensor::row(&[1.0, 1.0]), 0.1).unwrap();
        assert_eq!(c.data(), &[1.0]);
    }

    #[test]
    fn two_aspects_hand_softmax() {
        let means = vec![Tensor::row(&[1.0, 0.0]), Tensor::row(&[1.0, 0.0])];
        let protos = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let c = item_aspect_probs(&means, &protos, 1.0).unwrap();
        assert!((c.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((c.get(0, 1) - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn zero_norm_latent_counts_as_zero_affinity() {
        let means = vec![Tensor::row(&[0.0, 0.0]), Tensor::row(&[1.0, 0.0])];
        let protos = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let s = affinities(&means, &protos).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let means = vec![Tensor::row(&[1.0])];
        assert!(aspect_probs(&means, &Tensor::row(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = RngState::new(21);
        let means = means_from(&mut rng, 30, 5, 4);
        let protos = rng.standard_normal(5, 4);
        for temp in [0.1, 1.0] {
            let p = user_aspect_probs(&means, &protos, temp).unwrap();
            let oracle = loop_oracle(&means, &protos, temp);
            for (e, row) in oracle.iter().enumerate() {
                for (a, &v) in row.iter().enumerate() {
                    assert!((p.get(e, a) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tape_version_matches_plain_version() {
        let mut rng = RngState::new(4);
        let means = means_from(&mut rng, 6, 3, 5);
        let protos = rng.standard_normal(3, 5);
        let mut tape = Tape::new();
        let mv: Vec<Var> = means.iter().map(|m| tape.leaf(m.clone())).collect();
        let pv = tape.leaf(protos.clone());
        let out = aspect_probs_on_tape(&mut tape, &mv, pv, 0.1).unwrap();
        let plain = aspect_probs(&means, &protos, 0.1).unwrap();
        for (x, y) in tape.value(out).data().iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_reach_means_and_prototypes() {
        let mut rng = RngState::new(8);
        let means = means_from(&mut rng, 4, 3, 4);
        let protos = rng.standard_normal(3, 4);
        let weights = rng.standard_normal(4, 3);
        let eval = |means: &[Tensor], protos: &Tensor| -> f64 {
            let p = aspect_probs(means, protos, 0.5).unwrap();
            p.zip_map(&weights, |a, b| a * b).sum()
        };
        let mut tape = Tape::new();
        let mv: Vec<Var> = means.iter().map(|m| tape.leaf(m.clone())).collect();
        let pv = tape.leaf(protos.clone());
        let out = aspect_probs_on_tape(&mut tape, &mv, pv, 0.5).unwrap();
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let root = tape.sum(prod);
        let grads = tape.backward(root).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-7);
        let gp = grads.get(pv);
        for k in 0..protos.len() {
            let (mut up, mut dn) = (protos.clone(), protos.clone());
            up.data_mut()[k] += h;
            dn.data_mut()[k] -= h;
            let num = (eval(&means, &up) - eval(&means, &dn)) / (2.0 * h);
            assert!(rel(gp.data()[k], num) < 1e-4, "prototype {k}");
        }
        for (a, var) in mv.iter().enumerate() {
            let g = grads.get(*var);
            for k in 0..means[a].len() {
                let (mut up, mut dn) = (means.clone(), means.clone());
                up[a].data_mut()[k] += h;
                dn[a].data_mut()[k] -= h;
                let num = (eval(&up, &protos) - eval(&dn, &protos)) / (2.0 * h);
                assert!(rel(g.data()[k], num) < 1e-4, "mean {a}/{k}");
            }
        }
    }

    #[test]
    fn entropy_report_examples() {
        let t = Tensor::from_rows(&[vec![0.25; 4], vec![1.0, 0.0, 0.0, 0.0], vec![0.5, 0.5, 0.0, 0.0]]).unwrap();
        let r = aspect_entropy_report(&t);
        assert!((r.entropy[0] - 4f64.ln()).abs() < 1e-12);
        assert_eq!(r.entropy[1], 0.0);
        assert_eq!(r.argmax, vec![0, 0, 0]);
        let two = aspect_entropy_report(&Tensor::row(&[0.7, 0.3]));
        assert!((two.entropy[0] - 0.6109).abs() < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rows_on_simplex_and_permutation_equivariant(seed in 0u64..10_000, temp in 0.05..2.0f64) {
            let mut rng = RngState::new(seed);
            let means = means_from(&mut rng, 5, 4, 3);
            let protos = rng.standard_normal(4, 3);
            let p = aspect_probs(&means, &protos, temp).unwrap();
            for r in 0..5 {
                let row = p.row_slice(r);
                prop_assert!(row.iter().all(|&v| v > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let perm = [2usize, 0, 3, 1];
            let pm: Vec<Tensor> = perm.iter().map(|&a| means[a].clone()).collect();
            let pp = protos.gather_rows(&perm);
            let q = aspect_probs(&pm, &pp, temp).unwrap();
            for r in 0..5 {
                for (k, &a) in perm.iter().enumerate() {
                    prop_assert!((q.get(r, k) - p.get(r, a)).abs() < 1e-14);
                }
            }
        }

        #[test]
        fn softmax_shift_invariance(scores in prop::collection::vec(-1.0..1.0f64, 6), shift in -5.0..5.0f64) {
            let s = Tensor::from_vec(1, 6, scores).unwrap();
            let a = s.softmax_rows();
            let b = s.map(|v| v + shift).softmax_rows();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
