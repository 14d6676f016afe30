//! 3D convolution over `[N, C, T, H, W]` video tensors.
//!
//! Cross-correlation (no kernel flip) with zero padding, per-axis stride and
//! channel groups. For output channel `j` in group `g` and output position
//! `(t, y, x)`:
//!
//! ```text
//! out[n, j, t, y, x] = b[j] + Σ_m Σ_l Σ_h Σ_w  W[j, m, l, h, w] · in[n, g·Cg + m, t·st + l − pt, y·sh + h − ph, x·sw + w − pw]
//! ```
//!
//! where `m` runs over the `Cg = C_in / groups` input channels of the group
//! and out-of-range input positions read as zero. The activation is applied
//! after the bias by [`Conv3dLayer::forward`].
//!
//! The kernels unfold each group's input into a patch matrix and reduce the
//! convolution to matrix products; pointwise convolutions skip the unfold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::gemm::{gemm_nn, gemm_nt, transpose};
use crate::nn::Activation;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: [1; 3],
            padding: [0; 3],
            groups: 1,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: [usize; 3], padding: [usize; 3], groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1 with the padding that keeps extents unchanged for odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self {
            stride: [1; 3],
            padding: kernel.map(|k| k / 2),
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// `floor((input + 2·pad − kernel) / stride) + 1`, or an error when the
/// kernel does not fit the padded input.
pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::invalid("kernel extent and stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Fully resolved sizes of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub geometry: ConvGeometry,
}

impl ConvDims {
    pub fn infer(x_shape: &[usize], w_shape: &[usize], geometry: ConvGeometry) -> Result<Self> {
        if x_shape.len() != 5 || w_shape.len() != 5 {
            return Err(Error::shape(format!(
                "conv3d expects 5-D input and weight, got {x_shape:?} and {w_shape:?}"
            )));
        }
        let groups = geometry.groups;
        let (c_in, c_out) = (x_shape[1], w_shape[0]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::shape(format!(
                "groups={groups} must divide C_in={c_in} and C_out={c_out}"
            )));
        }
        if w_shape[1] != c_in / groups {
            return Err(Error::shape(format!(
                "weight expects {} input channels per group, input provides {}",
                w_shape[1],
                c_in / groups
            )));
        }
        let input = [x_shape[2], x_shape[3], x_shape[4]];
        let kernel = [w_shape[2], w_shape[3], w_shape[4]];
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = output_extent(
                input[a],
                kernel[a],
                geometry.stride[a],
                geometry.padding[a],
            )?;
        }
        Ok(Self {
            batch: x_shape[0],
            c_in,
            c_out,
            input,
            kernel,
            output,
            geometry,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.c_out,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn cin_per_group(&self) -> usize {
        self.c_in / self.geometry.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.geometry.groups
    }

    /// Output indices `o` along `axis` for which `o·s + k − p` lands inside
    /// the input, as a half-open range.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.geometry.stride[axis];
        let p = self.geometry.padding[axis];
        let len = self.input[axis];
        let out = self.output[axis];
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        // o·s + k − p ≤ len − 1  ⇔  o ≤ (len − 1 + p − k) / s
        let hi = if len + p > k {
            ((len - 1 + p - k) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

impl ConvDims {
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.geometry.stride == [1, 1, 1] && self.geometry.padding == [0, 0, 0]
    }

    /// Rows of the unfolded input: `C_in / groups · kernel volume`.
    fn patch_len(&self) -> usize {
        self.cin_per_group() * self.kernel_volume()
    }
}

/// Unfolds the input channels of one group into a `patch_len × out_plane`
/// matrix whose row order matches the weight layout `[m, l, h, w]`.
fn im2col<T: Scalar>(xg: &[T], d: &ConvDims, col: &mut [T]) {
    let [it_n, ih, iw] = d.input;
    let [ot_n, oh_n, ow_n] = d.output;
    let [kt_n, kh_n, kw_n] = d.kernel;
    let [st, sh, sw] = d.geometry.stride;
    let [pt, ph, pw] = d.geometry.padding;
    let (in_plane, out_plane) = (d.in_plane(), d.out_plane());
    let mut r = 0;
    for m in 0..d.cin_per_group() {
        let xc = &xg[m * in_plane..][..in_plane];
        for kt in 0..kt_n {
            for kh in 0..kh_n {
                for kw in 0..kw_n {
                    let row = &mut col[r * out_plane..][..out_plane];
                    let (lo, hi) = d.valid(2, kw);
                    for ot in 0..ot_n {
                        let it = (ot * st + kt) as isize - pt as isize;
                        for oh in 0..oh_n {
                            let dst = &mut row[(ot * oh_n + oh) * ow_n..][..ow_n];
                            let ihh = (oh * sh + kh) as isize - ph as isize;
                            if it < 0 || it as usize >= it_n || ihh < 0 || ihh as usize >= ih || lo >= hi {
                                dst.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(it as usize * ih + ihh as usize) * iw..][..iw];
                            dst[..lo].fill(T::zero());
                            dst[hi..].fill(T::zero());
                            let start = lo * sw + kw - pw;
                            if sw == 1 {
                                dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                            } else {
                                for (j, o) in (lo..hi).enumerate() {
                                    dst[o] = src[start + j * sw];
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Scalar>(col: &[T], d: &ConvDims, gxg: &mut [T]) {
    let [it_n, ih, iw] = d.input;
    let [ot_n, oh_n, ow_n] = d.output;
    let [kt_n, kh_n, kw_n] = d.kernel;
    let [st, sh, sw] = d.geometry.stride;
    let [pt, ph, pw] = d.geometry.padding;
    let (in_plane, out_plane) = (d.in_plane(), d.out_plane());
    let mut r = 0;
    for m in 0..d.cin_per_group() {
        let gc = &mut gxg[m * in_plane..][..in_plane];
        for kt in 0..kt_n {
            for kh in 0..kh_n {
                for kw in 0..kw_n {
                    let row = &col[r * out_plane..][..out_plane];
                    let (lo, hi) = d.valid(2, kw);
                    r += 1;
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * sw + kw - pw;
                    for ot in 0..ot_n {
                        let it = (ot * st + kt) as isize - pt as isize;
                        if it < 0 || it as usize >= it_n {
                            continue;
                        }
                        for oh in 0..oh_n {
                            let ihh = (oh * sh + kh) as isize - ph as isize;
                            if ihh < 0 || ihh as usize >= ih {
                                continue;
                            }
                            let src = &row[(ot * oh_n + oh) * ow_n..][..ow_n];
                            let dst = &mut gc[(it as usize * ih + ihh as usize) * iw..][..iw];
                            if sw == 1 {
                                for (g, &v) in dst[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                    *g = *g + v;
                                }
                            } else {
                                for (j, o) in (lo..hi).enumerate() {
                                    let i = start + j * sw;
                                    dst[i] = dst[i] + src[o];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let (in_plane, out_plane) = (d.in_plane(), d.out_plane());
    let (cin_g, cout_g, kdim) = (d.cin_per_group(), d.cout_per_group(), d.patch_len());
    let pointwise = d.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kdim * out_plane] };
    let mut out = vec![T::zero(); d.batch * d.c_out * out_plane];
    for n in 0..d.batch {
        if let Some(b) = bias {
            for co in 0..d.c_out {
                out[(n * d.c_out + co) * out_plane..][..out_plane].fill(b[co]);
            }
        }
        for g in 0..d.geometry.groups {
            let xg = &x[(n * d.c_in + g * cin_g) * in_plane..][..cin_g * in_plane];
            let cols: &[T] = if pointwise {
                xg
            } else {
                im2col(xg, d, &mut col);
                &col
            };
            let wg = &w[g * cout_g * kdim..][..cout_g * kdim];
            let og = &mut out[(n * d.c_out + g * cout_g) * out_plane..][..cout_g * out_plane];
            gemm_nn(cout_g, out_plane, kdim, wg, cols, og);
        }
    }
    out
}

/// Gradient with respect to the input.
pub(crate) fn conv3d_backward_input<T: Scalar>(gout: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let (in_plane, out_plane) = (d.in_plane(), d.out_plane());
    let (cin_g, cout_g, kdim) = (d.cin_per_group(), d.cout_per_group(), d.patch_len());
    let pointwise = d.is_pointwise();
    let w_t: Vec<Vec<T>> = (0..d.geometry.groups)
        .map(|g| transpose(cout_g, kdim, &w[g * cout_g * kdim..][..cout_g * kdim]))
        .collect();
    let mut gcol = if pointwise { Vec::new() } else { vec![T::zero(); kdim * out_plane] };
    let mut gin = vec![T::zero(); d.batch * d.c_in * in_plane];
    for n in 0..d.batch {
        for (g, wg_t) in w_t.iter().enumerate() {
            let gog = &gout[(n * d.c_out + g * cout_g) * out_plane..][..cout_g * out_plane];
            let gxg = &mut gin[(n * d.c_in + g * cin_g) * in_plane..][..cin_g * in_plane];
            if pointwise {
                gemm_nn(kdim, out_plane, cout_g, wg_t, gog, gxg);
            } else {
                gcol.fill(T::zero());
                gemm_nn(kdim, out_plane, cout_g, wg_t, gog, &mut gcol);
                col2im(&gcol, d, gxg);
            }
        }
    }
    gin
}

/// Gradients with respect to the weights and the bias.
pub(crate) fn conv3d_backward_params<T: Scalar>(gout: &[T], x: &[T], d: &ConvDims) -> (Vec<T>, Vec<T>) {
    let (in_plane, out_plane) = (d.in_plane(), d.out_plane());
    let (cin_g, cout_g, kdim) = (d.cin_per_group(), d.cout_per_group(), d.patch_len());
    let pointwise = d.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kdim * out_plane] };
    let mut gw = vec![T::zero(); d.c_out * kdim];
    let mut gb = vec![T::zero(); d.c_out];
    for n in 0..d.batch {
        for co in 0..d.c_out {
            let plane = &gout[(n * d.c_out + co) * out_plane..][..out_plane];
            gb[co] = gb[co] + plane.iter().copied().sum::<T>();
        }
        for g in 0..d.geometry.groups {
            let xg = &x[(n * d.c_in + g * cin_g) * in_plane..][..cin_g * in_plane];
            let cols: &[T] = if pointwise {
                xg
            } else {
                im2col(xg, d, &mut col);
                &col
            };
            let gog = &gout[(n * d.c_out + g * cout_g) * out_plane..][..cout_g * out_plane];
            gemm_nt(cout_g, out_plane, kdim, gog, cols, &mut gw[g * cout_g * kdim..][..cout_g * kdim]);
        }
    }
    (gw, gb)
}

/// A 3D convolution layer: weights `[C_out, C_in / groups, L, H, W]` and an
/// optional bias `[C_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub geometry: ConvGeometry,
}

impl Conv3dLayer {
    /// Registers zero-valued parameters in `store`; see
    /// [`crate::nn::init`] for initialization.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        geometry: ConvGeometry,
        with_bias: bool,
    ) -> Result<Self> {
        let groups = geometry.groups;
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::shape(format!(
                "{name}: groups={groups} must divide C_in={in_channels} and C_out={out_channels}"
            )));
        }
        if kernel.contains(&0) || geometry.stride.contains(&0) {
            return Err(Error::invalid(format!(
                "{name}: kernel extents and strides must be positive"
            )));
        }
        let w_shape = [
            out_channels,
            in_channels / groups,
            kernel[0],
            kernel[1],
            kernel[2],
        ];
        let weight = store.add_param(format!("{name}.weight"), group, Tensor::zeros(&w_shape));
        let bias = with_bias.then(|| {
            store.add_param(format!("{name}.bias"), group, Tensor::zeros(&[out_channels]))
        });
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            geometry,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.geometry.groups * self.kernel.iter().product::<usize>()
    }

    pub fn num_parameters(&self) -> usize {
        self.out_channels * self.fan_in() + self.bias.map_or(0, |_| self.out_channels)
    }

    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = output_extent(
                input[a],
                self.kernel[a],
                self.geometry.stride[a],
                self.geometry.padding[a],
            )?;
        }
        Ok(out)
    }

    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        activation: Activation,
    ) -> Result<Var> {
        let w = graph.param(store, self.weight);
        let b = self.bias.map(|b| graph.param(store, b));
        let y = graph.conv3d(x, w, b, self.geometry)?;
        graph.activation(y, activation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        assert_eq!(output_extent(16, 3, 2, 1).unwrap(), 8);
        assert_eq!(output_extent(32, 3, 1, 1).unwrap(), 32);
        assert_eq!(output_extent(5, 3, 1, 0).unwrap(), 3);
        assert!(output_extent(2, 3, 1, 0).is_err());
    }

    #[test]
    fn valid_ranges_cover_padding() {
        let d = ConvDims::infer(
            &[1, 1, 4, 4, 5],
            &[1, 1, 3, 3, 3],
            ConvGeometry::new([1, 1, 2], [1, 1, 1], 1),
        )
        .unwrap();
        assert_eq!(d.output, [4, 4, 3]);
        // kernel offset 0 reads x·2 − 1: invalid for output 0 only
        assert_eq!(d.valid(2, 0), (1, 3));
        assert_eq!(d.valid(2, 1), (0, 3));
        // offset 2 reads x·2 + 1 ≤ 4 → outputs 0, 1
        assert_eq!(d.valid(2, 2), (0, 2));
    }

    #[test]
    fn groups_must_divide_channels() {
        let err = ConvDims::infer(
            &[1, 4, 2, 2, 2],
            &[6, 1, 1, 1, 1],
            ConvGeometry::default().with_groups(3),
        );
        assert!(err.is_err());
    }
}
