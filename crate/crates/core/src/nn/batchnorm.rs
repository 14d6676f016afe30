//! Per-channel batch normalization for `[N, C, ...]` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{BufferId, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) struct BnSaved<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

/// `(batch, channels, plane)` where plane is the product of trailing axes.
fn layout(shape: &[usize]) -> (usize, usize, usize) {
    let (n, c) = (shape[0], shape[1]);
    (n, c, shape[2..].iter().product())
}

pub(crate) fn forward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>, Vec<T>, Vec<T>)> {
    let (n, c, plane) = layout(x.shape());
    let count = n * plane;
    if count < 2 {
        return Err(Error::invalid(
            "train-mode batch norm needs at least two values per channel",
        ));
    }
    let xd = x.data();
    let inv_count = T::from_f64((count) as f64).recip();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s = s + xd[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
        let m = s * inv_count;
        let mut ss = T::zero();
        for b in 0..n {
            for &v in &xd[(b * c + ch) * plane..][..plane] {
                let dv = v - m;
                ss = ss + dv * dv;
            }
        }
        mean[ch] = m;
        var[ch] = ss * inv_count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (m, is, gm, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in off..off + plane {
                let h = (xd[i] - m) * is;
                xhat[i] = h;
                out[i] = gm * h + bt;
            }
        }
    }
    let xhat = Tensor::new(x.shape(), xhat)?;
    Ok((
        Tensor::new(x.shape(), out)?,
        BnSaved { xhat, inv_std },
        mean,
        var,
    ))
}

pub(crate) fn backward_train<T: Scalar>(
    g: &Tensor<T>,
    gamma: &[T],
    saved: &BnSaved<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, plane) = layout(g.shape());
    let (gd, hd) = (g.data(), saved.xhat.data());
    let count = T::from_f64((n * plane) as f64);
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                gbeta[ch] = gbeta[ch] + gd[i];
                ggamma[ch] = ggamma[ch] + gd[i] * hd[i];
            }
        }
    }
    // dx = γ·inv_std/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
    let mut gx = vec![T::zero(); gd.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let k = gamma[ch] * saved.inv_std[ch] / count;
            for i in off..off + plane {
                gx[i] = k * (count * gd[i] - gbeta[ch] - hd[i] * ggamma[ch]);
            }
        }
    }
    (Tensor::new(g.shape(), gx).unwrap(), ggamma, gbeta)
}

pub(crate) fn forward_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
) -> Tensor<T> {
    let (n, c, plane) = layout(x.shape());
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for i in off..off + plane {
                out[i] = xd[i] * scale + shift;
            }
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

pub(crate) fn backward_eval<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, plane) = layout(g.shape());
    let (gd, xd) = (g.data(), x.data());
    let mut gx = vec![T::zero(); gd.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            for i in off..off + plane {
                gx[i] = gd[i] * scale;
                gbeta[ch] = gbeta[ch] + gd[i];
                ggamma[ch] = ggamma[ch] + gd[i] * (xd[i] - mean[ch]) * inv_std[ch];
            }
        }
    }
    (Tensor::new(g.shape(), gx).unwrap(), ggamma, gbeta)
}

/// Batch normalization over channel axis 1 with learned affine parameters
/// and running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm3dLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm3dLayer {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        channels: usize,
    ) -> Self {
        let gamma = store.add_param(format!("{name}.gamma"), group, Tensor::ones(&[channels]));
        let beta = store.add_param(format!("{name}.beta"), group, Tensor::zeros(&[channels]));
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]));
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    /// Normalizes with batch statistics and folds them into the running
    /// statistics (unbiased variance, PyTorch convention).
    pub fn forward_train<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gamma = graph.param(store, self.gamma);
        let beta = graph.param(store, self.beta);
        let (y, mean, var) = graph.batch_norm_train(x, gamma, beta, T::from_f64(self.eps))?;
        let shape = graph.value(x).shape();
        let count = shape[0] * shape[2..].iter().product::<usize>();
        let unbias = T::from_f64((count) as f64) / T::from_f64((count - 1) as f64);
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        let rm = store.buffer_mut(self.running_mean).data_mut();
        for (r, &b) in rm.iter_mut().zip(&mean) {
            *r = keep * *r + m * b;
        }
        let rv = store.buffer_mut(self.running_var).data_mut();
        for (r, &b) in rv.iter_mut().zip(&var) {
            *r = keep * *r + m * b * unbias;
        }
        Ok(y)
    }

    /// Normalizes with the running statistics.
    pub fn forward_eval<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gamma = graph.param(store, self.gamma);
        let beta = graph.param(store, self.beta);
        graph.batch_norm_eval(
            x,
            gamma,
            beta,
            store.buffer(self.running_mean).data(),
            store.buffer(self.running_var).data(),
            T::from_f64(self.eps),
        )
    }

    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => self.forward_train(graph, store, x),
            Mode::Eval => self.forward_eval(graph, store, x),
        }
    }

    pub fn num_parameters(&self) -> usize {
        2 * self.channels
    }
}
