use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::Activation;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Fully connected layer: weights `[out, in]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let weight = store.add_param(
            format!("{name}.weight"),
            group,
            Tensor::zeros(&[out_features, in_features]),
        );
        let bias = store.add_param(format!("{name}.bias"), group, Tensor::zeros(&[out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.out_features * (self.in_features + 1)
    }

    /// `activation(x · Wᵀ + b)`.
    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        activation: Activation,
    ) -> Result<Var> {
        let w = graph.param(store, self.weight);
        let b = graph.param(store, self.bias);
        let y = graph.linear(x, w, Some(b))?;
        graph.activation(y, activation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input() {
        let mut store = ParamStore::<f64>::new();
        let l = LinearLayer::new(&mut store, "fc", ParamGroup::Action, 3, 3);
        let w = store.value_mut(l.weight).data_mut();
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let y = l.forward(&mut g, &store, x, Activation::Identity).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut store = ParamStore::<f64>::new();
        let l = LinearLayer::new(&mut store, "fc", ParamGroup::Action, 4, 2);
        store.value_mut(l.bias).data_mut().copy_from_slice(&[0.25, -1.0]);
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[3, 4]));
        let y = l.forward(&mut g, &store, x, Activation::Identity).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -1.0, 0.25, -1.0, 0.25, -1.0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let l = LinearLayer::new(&mut store, "fc", ParamGroup::Action, 4, 2);
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[3, 5]));
        assert!(l.forward(&mut g, &store, x, Activation::Relu).is_err());
    }
}
