//! Direct-summation conv3d oracle.

use dinet::nn::ConvGeometry;
use dinet::{Graph, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct Case {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let groups = [1, 1, 2, 3][rng.random_range(0..4)];
    let c_in = groups * rng.random_range(1..=3);
    let c_out = groups * rng.random_range(1..=3);
    let kernel = [0; 3].map(|_| rng.random_range(1..=3));
    let padding = [0; 3].map(|_| rng.random_range(0..=1));
    let stride = [0; 3].map(|_| rng.random_range(1..=2));
    let input = [0, 1, 2].map(|d| kernel[d] + rng.random_range(0..=4));
    Case {
        n: rng.random_range(1..=2),
        c_in,
        c_out,
        groups,
        input,
        kernel,
        stride,
        padding,
    }
}

fn extent(input: usize, k: usize, s: usize, p: usize) -> usize {
    (input + 2 * p - k) / s + 1
}

/// `y[n,o,t,h,w] = b[o] + Σ_{c,l,i,j} W[o,c,l,i,j]·x[n, g·cpg+c, t·s+l−p, ...]`.
pub fn naive(case: &Case, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let [ti, hi, wi] = case.input;
    let [kt, kh, kw] = case.kernel;
    let out = [0, 1, 2].map(|d| extent(case.input[d], case.kernel[d], case.stride[d], case.padding[d]));
    let cin_g = case.c_in / case.groups;
    let cout_g = case.c_out / case.groups;
    let mut y = Vec::with_capacity(case.n * case.c_out * out[0] * out[1] * out[2]);
    for n in 0..case.n {
        for o in 0..case.c_out {
            let g = o / cout_g;
            for t in 0..out[0] {
                for h in 0..out[1] {
                    for q in 0..out[2] {
                        let mut acc = b[o];
                        for c in 0..cin_g {
                            let ci = g * cin_g + c;
                            for l in 0..kt {
                                for i in 0..kh {
                                    for j in 0..kw {
                                        let tt = (t * case.stride[0] + l) as isize - case.padding[0] as isize;
                                        let hh = (h * case.stride[1] + i) as isize - case.padding[1] as isize;
                                        let ww = (q * case.stride[2] + j) as isize - case.padding[2] as isize;
                                        if tt < 0 || hh < 0 || ww < 0 {
                                            continue;
                                        }
                                        let (tt, hh, ww) = (tt as usize, hh as usize, ww as usize);
                                        if tt >= ti || hh >= hi || ww >= wi {
                                            continue;
                                        }
                                        let xv = x[(((n * case.c_in + ci) * ti + tt) * hi + hh) * wi + ww];
                                        let wv = w[(((o * cin_g + c) * kt + l) * kh + i) * kw + j];
                                        acc += wv * xv;
                                    }
                                }
                            }
                        }
                        y.push(acc);
                    }
                }
            }
        }
    }
    y
}

pub fn engine<T: Scalar>(case: &Case, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut g = Graph::<T>::new();
    let [ti, hi, wi] = case.input;
    let [kt, kh, kw] = case.kernel;
    let xv = g.input(Tensor::from_f64_slice(&[case.n, case.c_in, ti, hi, wi], x).unwrap());
    let wv = g.input(Tensor::from_f64_slice(&[case.c_out, case.c_in / case.groups, kt, kh, kw], w).unwrap());
    let bv = g.input(Tensor::from_f64_slice(&[case.c_out], b).unwrap());
    let geometry = ConvGeometry::new(case.stride, case.padding, case.groups);
    let y = g.conv3d(xv, wv, Some(bv), geometry).unwrap();
    g.value(y).to_f64_vec()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Returns the worst (f32, f64) deviation over `count` random configurations.
pub fn worst_deviation(count: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let case = random_case(&mut rng);
        let x = random_vec(&mut rng, case.n * case.c_in * case.input.iter().product::<usize>());
        let w = random_vec(&mut rng, case.c_out * case.c_in / case.groups * case.kernel.iter().product::<usize>());
        let b = random_vec(&mut rng, case.c_out);
        let want = naive(&case, &x, &w, &b);
        // Single precision is compared against the oracle on the same rounded inputs.
        let round = |v: &[f64]| v.iter().map(|&e| e as f32 as f64).collect::<Vec<_>>();
        let (x32, w32, b32) = (round(&x), round(&w), round(&b));
        let want32 = naive(&case, &x32, &w32, &b32);
        worst32 = worst32.max(max_abs_diff(&engine::<f32>(&case, &x32, &w32, &b32), &want32));
        worst64 = worst64.max(max_abs_diff(&engine::<f64>(&case, &x, &w, &b), &want));
    }
    (worst32, worst64)
}
