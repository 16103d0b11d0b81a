//! Adam with bias correction and global gradient-norm clipping.

use crate::numerics::Tensor;
use crate::{Error, Result, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<F>>) -> Self {
        let m: Vec<Tensor<F>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One Adam update. `grads[i] == None` means parameter `i` received no
/// gradient and is treated as a zero gradient.
pub fn adam_step<F: Scalar>(
    params: &mut [&mut Tensor<F>],
    grads: &[Option<Vec<F>>],
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.len() != p.len() || state.m[i].shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    name: format!("parameter {i}"),
                    expected: p.shape().to_vec(),
                    found: vec![g.len()],
                });
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let (b1, b2) = (F::lit(BETA1), F::lit(BETA2));
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let data = p.data_mut();
        for k in 0..data.len() {
            let g = grads[i].as_ref().map_or(F::zero(), |g| g[k]);
            m[k] = b1 * m[k] + (F::one() - b1) * g;
            v[k] = b2 * v[k] + (F::one() - b2) * g * g;
            let mhat = m[k].as_f64() / c1;
            let vhat = v[k].as_f64() / c2;
            data[k] -= F::lit(lr * mhat / (vhat.sqrt() + ADAM_EPS));
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Option<Vec<F>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::lit(max_norm / norm);
        grads.iter_mut().flatten().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![x]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        for g in [3.0, -0.02, 1e-3] {
            let mut p = scalar(1.0);
            let mut state = AdamState::new([&p]);
            adam_step(&mut [&mut p], &[Some(vec![g])], &mut state, 0.01).unwrap();
            let delta = p.data()[0] - 1.0;
            assert!((delta + 0.01 * g.signum()).abs() < 1e-6, "{delta}");
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar(0.7);
        let mut state = AdamState::new([&p]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Some(vec![0.0])], &mut state, 0.1).unwrap();
        }
        adam_step(&mut [&mut p], &[None], &mut state, 0.1).unwrap();
        assert_eq!(p.data()[0], 0.7);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = scalar(1.0);
        let mut state = AdamState::new([&p]);
        for _ in 0..200 {
            let g = 2.0 * p.data()[0];
            adam_step(&mut [&mut p], &[Some(vec![g])], &mut state, 0.1).unwrap();
        }
        assert!(p.data()[0].abs() < 0.01, "{}", p.data()[0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar(1.0);
        let mut state = AdamState::new([&p]);
        assert!(adam_step(&mut [&mut p], &[Some(vec![1.0, 2.0])], &mut state, 0.1).is_err());
        assert!(adam_step(&mut [&mut p], &[], &mut state, 0.1).is_err());
    }

    #[test]
    fn clipping_caps_joint_norm() {
        let mut g: Vec<Option<Vec<f64>>> = vec![Some(vec![3.0, 0.0]), None, Some(vec![4.0])];
        let norm = clip_grad_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-15);
        let mut small: Vec<Option<Vec<f64>>> = vec![Some(vec![0.1])];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap()[0], 0.1);
    }
}
