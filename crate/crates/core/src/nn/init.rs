//! He-normal initialization: weights ~ N(0, 2 / fan_in), biases zero,
//! batch-norm scale one and shift zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{BatchNorm3dLayer, Conv3dLayer, LinearLayer};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

pub trait InitParameters {
    fn init_parameters<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R);
}

/// Initializes one layer from a fresh seeded generator.
pub fn init_parameters<T: Scalar, L: InitParameters>(layer: &L, store: &mut ParamStore<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layer.init_parameters(store, &mut rng);
}

pub fn he_normal<T: Scalar, R: Rng>(store: &mut ParamStore<T>, id: ParamId, fan_in: usize, rng: &mut R) {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    for v in store.value_mut(id).data_mut() {
        *v = T::from_f64(normal.sample(rng));
    }
}

impl InitParameters for Conv3dLayer {
    fn init_parameters<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        he_normal(store, self.weight, self.fan_in(), rng);
        if let Some(b) = self.bias {
            store.value_mut(b).fill(T::zero());
        }
    }
}

impl InitParameters for LinearLayer {
    fn init_parameters<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        he_normal(store, self.weight, self.in_features, rng);
        store.value_mut(self.bias).fill(T::zero());
    }
}

impl InitParameters for BatchNorm3dLayer {
    fn init_parameters<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, _rng: &mut R) {
        store.value_mut(self.gamma).fill(T::one());
        store.value_mut(self.beta).fill(T::zero());
        store.buffer_mut(self.running_mean).fill(T::zero());
        store.buffer_mut(self.running_var).fill(T::one());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ConvGeometry;
    use crate::params::ParamGroup;

    #[test]
    fn same_seed_same_weights() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        let la = LinearLayer::new(&mut a, "fc", ParamGroup::Action, 7, 5);
        let lb = LinearLayer::new(&mut b, "fc", ParamGroup::Action, 7, 5);
        init_parameters(&la, &mut a, 42);
        init_parameters(&lb, &mut b, 42);
        let (wa, wb) = (a.value(la.weight).data(), b.value(lb.weight).data());
        assert!(wa.iter().zip(wb).all(|(x, y)| x.to_bits() == y.to_bits()));
        init_parameters(&lb, &mut b, 43);
        assert_ne!(a.value(la.weight).data(), b.value(lb.weight).data());
    }

    #[test]
    fn biases_zero_after_init() {
        let mut s = ParamStore::<f64>::new();
        let c = Conv3dLayer::new(&mut s, "c", ParamGroup::Features, 2, 4, [3, 3, 3], ConvGeometry::default(), true)
            .unwrap();
        s.value_mut(c.bias.unwrap()).fill(3.0);
        init_parameters(&c, &mut s, 1);
        assert!(s.value(c.bias.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_variance_matches_fan_in() {
        // 10 000 weights with fan_in 100
        let mut s = ParamStore::<f64>::new();
        let l = LinearLayer::new(&mut s, "fc", ParamGroup::Domain, 100, 100);
        init_parameters(&l, &mut s, 9);
        let w = s.value(l.weight).data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = 2.0 / 100.0;
        assert!((var - expected).abs() <= 0.1 * expected, "var {var}");
    }
}
