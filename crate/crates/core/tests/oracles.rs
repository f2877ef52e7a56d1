//! Tensor kernels and module outputs against straightforward scalar loops.

mod common;

use common::{max_abs_diff, naive_conv, naive_matmul, oracle_complement, rand_tensor, transpose};
use fbsd::fdm::{diversify, pcm_pair, FdmConfig};
use fbsd::model::{activation_map, Model, ModelConfig};
use fbsd::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matmul_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (7, 13, 9), (32, 17, 40)] {
        let a = rand_tensor(&[m, k], &mut rng);
        let b = rand_tensor(&[k, n], &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let want = naive_matmul(a.data(), b.data(), m, k, n);
        assert!(max_abs_diff(tape.value(c).data(), &want) <= 1e-10);
    }
}

#[test]
fn transposed_batched_matmul_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (batch, m, k, n) = (3, 4, 6, 5);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [batch, k, m] } else { [batch, m, k] };
        let sb = if tb { [batch, n, k] } else { [batch, k, n] };
        let a = rand_tensor(&sa, &mut rng);
        let b = rand_tensor(&sb, &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul_t(va, vb, ta, tb).unwrap();
        assert_eq!(tape.shape(c), &[batch, m, n]);
        for i in 0..batch {
            let ai = a.slice(i);
            let bi = b.slice(i);
            let ai = if ta { transpose(ai, k, m) } else { ai.to_vec() };
            let bi = if tb { transpose(bi, n, k) } else { bi.to_vec() };
            let want = naive_matmul(&ai, &bi, m, k, n);
            assert!(max_abs_diff(tape.value(c).slice(i), &want) <= 1e-10, "ta={ta} tb={tb}");
        }
    }
}

#[test]
fn matmul_rejects_mismatched_inner_dims() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    assert!(tape.matmul(a, b).is_err());
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cases = [
        // (B, C, H, W, O, k, stride, pad, bias)
        (1, 1, 3, 3, 1, 1, 1, 0, false),
        (2, 3, 8, 8, 4, 3, 1, 1, true),
        (2, 3, 8, 6, 5, 4, 2, 1, true),
        (1, 2, 7, 9, 3, 3, 2, 0, false),
        (3, 4, 5, 5, 2, 1, 1, 0, true),
    ];
    for &(b, c, h, w, o, k, stride, pad, with_bias) in &cases {
        let x = rand_tensor(&[b, c, h, w], &mut rng);
        let wt = rand_tensor(&[o, c, k, k], &mut rng);
        let bias = rand_tensor(&[o], &mut rng);
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let vw = tape.constant(wt.clone());
        let vb = with_bias.then(|| tape.constant(bias.clone()));
        let y = tape.conv2d(vx, vw, vb, stride, pad).unwrap();
        let (shape, want) = naive_conv(&x, &wt, with_bias.then_some(&bias), stride, pad);
        assert_eq!(tape.shape(y), shape.as_slice());
        assert!(max_abs_diff(tape.value(y).data(), &want) <= 1e-10);
    }
}

#[test]
fn conv2d_rejects_channel_mismatch_and_oversized_kernels() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
    assert!(tape.conv2d(x, w, None, 1, 1).is_err());
    let big = tape.constant(Tensor::zeros(&[2, 3, 7, 7]));
    assert!(tape.conv2d(x, big, None, 1, 0).is_err());
    let w3 = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
    assert!(tape.conv2d(x, w3, None, 2, 0).is_err(), "fractional output extent");
    assert!(tape.conv2d(x, w3, None, 0, 1).is_err(), "zero stride");
}

#[test]
fn pcm_pair_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for &(c, (h1, w1), (h2, w2)) in &[
        (1, (1, 1), (1, 1)),
        (2, (2, 3), (3, 3)),
        (4, (3, 3), (1, 2)),
        (3, (3, 2), (2, 2)),
        (4, (3, 3), (3, 3)),
    ] {
        let (n1, n2) = (h1 * w1, h2 * w2);
        let x1 = rand_tensor(&[2, c, h1, w1], &mut rng);
        let x2 = rand_tensor(&[2, c, h2, w2], &mut rng);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x1.clone()), tape.constant(x2.clone()));
        let pv = pcm_pair(&mut tape, a, b, 1.0).unwrap();
        for n in 0..2 {
            let want12 = oracle_complement(x1.slice(n), x2.slice(n), c, n1, n2);
            let want21 = oracle_complement(x2.slice(n), x1.slice(n), c, n2, n1);
            assert!(max_abs_diff(tape.value(pv.y_1_from_2).slice(n), &want12) <= 1e-6);
            assert!(max_abs_diff(tape.value(pv.y_2_from_1).slice(n), &want21) <= 1e-6);
        }
    }
}

#[test]
fn diversify_sums_complements_from_all_other_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = 3;
    let sizes = [(3, 3), (2, 2), (1, 2)];
    let parts: Vec<Tensor<f64>> = sizes.iter().map(|&(h, w)| rand_tensor(&[1, c, h, w], &mut rng)).collect();
    let mut tape = Tape::new();
    let vars: Vec<_> = parts.iter().map(|p| tape.constant(p.clone())).collect();
    let gamma = 0.7f32;
    let z = diversify(&mut tape, &vars, &FdmConfig { gamma, temperature: 1.0 }).unwrap();
    for i in 0..3 {
        let ni = sizes[i].0 * sizes[i].1;
        let mut want = parts[i].data().to_vec();
        for j in (0..3).filter(|&j| j != i) {
            let nj = sizes[j].0 * sizes[j].1;
            let y = oracle_complement(parts[i].data(), parts[j].data(), c, ni, nj);
            for (w, v) in want.iter_mut().zip(y) {
                *w += gamma as f64 * v;
            }
        }
        assert!(max_abs_diff(tape.value(z[i]).data(), &want) <= 1e-6);
    }
}

#[test]
fn activation_maps_are_channel_means_of_stage_outputs() {
    let cfg = ModelConfig {
        stage_channels: [2, 3, 4, 3, 2],
        embed_dim: 4,
        ..ModelConfig::default()
    };
    let model = Model::<f64>::build(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[2, 3, 64, 64], &mut rng);
    let art = model.infer(&x).unwrap();
    for stage in 3..=5 {
        let fm = &art.stage_maps[stage - 1];
        let [b, c, h, w] = fm.shape().try_into().unwrap();
        let maps = activation_map(&art, stage).unwrap();
        assert_eq!(maps.len(), b);
        for (n, map) in maps.iter().enumerate() {
            assert_eq!(map.shape(), &[h, w]);
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for ch in 0..c {
                        s += fm.data()[((n * c + ch) * h + y) * w + xx];
                    }
                    assert!((map.data()[y * w + xx] - s / c as f64).abs() <= 1e-12);
                }
            }
        }
    }
    assert!(activation_map(&art, 2).is_err());
    assert!(activation_map(&art, 6).is_err());
}
