//! Windowed 3D max/average pooling without padding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolDims {
    pub batch: usize,
    pub channels: usize,
    pub input: [usize; 3],
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
}

impl PoolDims {
    pub fn infer(shape: &[usize], window: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        if shape.len() != 5 {
            return Err(Error::shape(format!("pool3d expects 5-D input, got {shape:?}")));
        }
        if window.contains(&0) || stride.contains(&0) {
            return Err(Error::invalid("pool window and stride must be positive"));
        }
        let input = [shape[2], shape[3], shape[4]];
        let mut output = [0; 3];
        for a in 0..3 {
            if window[a] > input[a] {
                return Err(Error::shape(format!(
                    "pool window {window:?} exceeds input extents {input:?}"
                )));
            }
            output[a] = (input[a] - window[a]) / stride[a] + 1;
        }
        Ok(Self {
            batch: shape[0],
            channels: shape[1],
            input,
            window,
            stride,
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.channels,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    /// Flat in-plane offsets of the window anchored at output `(t, h, w)`,
    /// in ascending order.
    fn window_offsets(&self, t: usize, h: usize, w: usize) -> impl Iterator<Item = usize> + '_ {
        let [_, ih, iw] = self.input;
        let [wt, wh, ww] = self.window;
        let (t0, h0, w0) = (t * self.stride[0], h * self.stride[1], w * self.stride[2]);
        (0..wt).flat_map(move |a| {
            (0..wh).flat_map(move |b| (0..ww).map(move |c| ((t0 + a) * ih + h0 + b) * iw + w0 + c))
        })
    }
}

/// Returns the pooled values and, for max pooling, the flat input index each
/// output was taken from (lowest index wins ties).
pub(crate) fn forward<T: Scalar>(x: &[T], d: &PoolDims, kind: PoolKind) -> (Vec<T>, Vec<usize>) {
    let in_plane: usize = d.input.iter().product();
    let out_plane: usize = d.output.iter().product();
    let wvol = T::from_f64(d.window.iter().product::<usize>() as f64);
    let mut out = Vec::with_capacity(d.batch * d.channels * out_plane);
    let mut argmax = Vec::new();
    for nc in 0..d.batch * d.channels {
        let base = nc * in_plane;
        for t in 0..d.output[0] {
            for h in 0..d.output[1] {
                for w in 0..d.output[2] {
                    match kind {
                        PoolKind::Max => {
                            let mut best = usize::MAX;
                            for off in d.window_offsets(t, h, w) {
                                if best == usize::MAX || x[base + off] > x[best] {
                                    best = base + off;
                                }
                            }
                            out.push(x[best]);
                            argmax.push(best);
                        }
                        PoolKind::Avg => {
                            let s: T = d.window_offsets(t, h, w).map(|o| x[base + o]).sum();
                            out.push(s / wvol);
                        }
                    }
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn backward<T: Scalar>(g: &[T], d: &PoolDims, kind: PoolKind, argmax: &[usize]) -> Vec<T> {
    let in_plane: usize = d.input.iter().product();
    let mut gx = vec![T::zero(); d.batch * d.channels * in_plane];
    match kind {
        PoolKind::Max => {
            for (&src, &gv) in argmax.iter().zip(g) {
                gx[src] = gx[src] + gv;
            }
        }
        PoolKind::Avg => {
            let wvol = T::from_f64(d.window.iter().product::<usize>() as f64);
            let out_plane: usize = d.output.iter().product();
            for nc in 0..d.batch * d.channels {
                let base = nc * in_plane;
                for t in 0..d.output[0] {
                    for h in 0..d.output[1] {
                        for w in 0..d.output[2] {
                            let o = nc * out_plane + (t * d.output[1] + h) * d.output[2] + w;
                            let share = g[o] / wvol;
                            for off in d.window_offsets(t, h, w) {
                                gx[base + off] = gx[base + off] + share;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}
