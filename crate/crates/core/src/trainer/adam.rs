use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> AdamState {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts before any
/// parameter is touched, naming the offending parameter.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], names: &[&str], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[k].shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        if !g.is_finite() {
            let name = names.get(k).copied().unwrap_or("?");
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        }
        let v = state.v[k].data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
        let (m, v) = (state.m[k].data(), state.v[k].data());
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = Tensor::row(&[1.0, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros(1, 2)], &["p"], &mut st, 0.1).unwrap();
        assert_eq!(p, before);

        st.m[0] = Tensor::row(&[1.0, 1.0]);
        st.v[0] = Tensor::row(&[1.0, 1.0]);
        adam_step(&mut [&mut p], &[Tensor::zeros(1, 2)], &["p"], &mut st, 0.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.m[0].data(), &[0.9, 0.9]);
        assert_eq!(st.v[0].data(), &[0.999, 0.999]);
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let mut p = Tensor::row(&[0.0, 0.0, 0.0]);
        let mut st = AdamState::new([&p]);
        let g = Tensor::row(&[3.0, -0.02, 1e4]);
        adam_step(&mut [&mut p], &[g], &["p"], &mut st, 0.01).unwrap();
        for (x, s) in p.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 0.01).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn matches_scalar_trace_on_square() {
        let (lr, mut x, mut m, mut v) = (0.1f64, 1.5f64, 0.0f64, 0.0f64);
        let mut p = Tensor::scalar(x);
        let mut st = AdamState::new([&p]);
        for t in 1..=10 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
            let grad = Tensor::scalar(2.0 * p.item());
            adam_step(&mut [&mut p], &[grad], &["x"], &mut st, lr).unwrap();
            assert!((p.item() - x).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::row(&[1.0]);
        let mut st = AdamState::new([&p]);
        let err = adam_step(&mut [&mut p], &[Tensor::row(&[f64::NAN])], &["user.enc_w1"], &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("user.enc_w1"));
        assert_eq!(p.item(), 1.0);
        assert_eq!(st.step, 0);
    }
}
