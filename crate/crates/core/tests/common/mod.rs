//! Scalar reference implementations shared by the integration tests.
#![allow(dead_code)]

use fbsd::Tensor;
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let u = Uniform::new(-1.0, 1.0);
    Tensor::from_fn(shape, |_| u.sample(rng))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row-major `m×k` times `k×n`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

/// Zero-padded cross-correlation; returns the output shape and data.
pub fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> (Vec<usize>, Vec<f64>) {
    let [b, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for n in 0..b {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = bias.map_or(0.0, |bb| bb.data()[oc]);
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * kh + i) * kw + j];
                                s += xv * wv;
                            }
                        }
                    }
                    out[((n * o + oc) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    (vec![b, o, oh, ow], out)
}

/// What part 1 (`c×n1`) gathers from part 2 (`c×n2`) for one image: for every
/// pixel of part 1, a softmax over negated inner products with the pixels of
/// part 2 weights those pixels.
pub fn oracle_complement(x1: &[f64], x2: &[f64], c: usize, n1: usize, n2: usize) -> Vec<f64> {
    let mut y = vec![0.0; c * n1];
    for i in 0..n1 {
        let mut sims = vec![0.0; n2];
        for (j, s) in sims.iter_mut().enumerate() {
            for ch in 0..c {
                *s += x1[ch * n1 + i] * x2[ch * n2 + j];
            }
        }
        let m = sims.iter().map(|s| -s).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = sims.iter().map(|s| (-s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for ch in 0..c {
            for j in 0..n2 {
                y[ch * n1 + i] += x2[ch * n2 + j] * e[j] / z;
            }
        }
    }
    y
}
