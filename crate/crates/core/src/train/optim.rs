use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Momentum buffers, one per trainable parameter, zero at start.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            velocity: store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }
}

/// `v ← m·v + g; θ ← θ − lr·v` for every parameter whose group is in
/// `groups`. Other parameters and their velocities are left untouched.
pub fn sgd_update<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
    groups: &[ParamGroup],
) -> Result<()> {
    if state.velocity.len() != store.len() {
        return Err(Error::shape(format!(
            "optimizer holds {} velocity buffers for {} parameters",
            state.velocity.len(),
            store.len()
        )));
    }
    let (lr, m) = (T::from_f64(lr), T::from_f64(momentum));
    for (p, v) in store.params_mut().iter_mut().zip(&mut state.velocity) {
        if v.shape() != p.value.shape() {
            return Err(Error::shape(format!(
                "velocity {:?} does not match parameter {} {:?}",
                v.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if !groups.contains(&p.group) {
            continue;
        }
        for ((theta, vel), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
            *vel = m * *vel + g;
            *theta = *theta - lr * *vel;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add_param("w".into(), ParamGroup::Features, Tensor::scalar(value));
        s.params_mut()[id.index()].grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn plain_sgd() {
        let mut s = single(0.0, 1.0);
        let mut st = OptimizerState::new(&s);
        sgd_update(&mut s, &mut st, 0.1, 0.0, &ParamGroup::ALL).unwrap();
        assert!((s.params()[0].value.item() + 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut s = single(0.0, 1.0);
        let mut st = OptimizerState::new(&s);
        sgd_update(&mut s, &mut st, 0.1, 0.9, &ParamGroup::ALL).unwrap();
        sgd_update(&mut s, &mut st, 0.1, 0.9, &ParamGroup::ALL).unwrap();
        assert!((s.params()[0].value.item() + 0.29).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_decays_velocity() {
        let mut s = single(1.0, 0.0);
        let mut st = OptimizerState::new(&s);
        st.velocity[0] = Tensor::scalar(2.0);
        sgd_update(&mut s, &mut st, 0.1, 0.9, &ParamGroup::ALL).unwrap();
        assert!((s.params()[0].value.item() - (1.0 - 0.1 * 0.9 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn frozen_group_untouched() {
        let mut s = single(1.0, 5.0);
        let mut st = OptimizerState::new(&s);
        sgd_update(&mut s, &mut st, 0.1, 0.9, &[ParamGroup::Domain]).unwrap();
        assert_eq!(s.params()[0].value.item(), 1.0);
        assert_eq!(st.velocity[0].item(), 0.0);
    }

    #[test]
    fn mismatched_state() {
        let mut s = single(1.0, 5.0);
        let mut st = OptimizerState { velocity: vec![] };
        assert!(sgd_update(&mut s, &mut st, 0.1, 0.9, &ParamGroup::ALL).is_err());
    }
}
