//! Part modules and the assembled model: identities, normalisation and
//! structural invariants.

use fbsd::fbsm::{boost, suppress, Fbsm, FbsmConfig};
use fbsd::fdm::{diversify, pcm_pair, FdmConfig};
use fbsd::model::{average_probs, Model, ModelConfig, PARTS, STAGES};
use fbsd::nn::{classifier_head, ParamSet};
use fbsd::tape::first_argmax;
use fbsd::{Tape, Tensor};
use proptest::prelude::*;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(-1.0f32, 1.0);
    Tensor::from_fn(shape, |_| u.sample(&mut rng))
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        stage_channels: [4, 6, 8, 8, 8],
        embed_dim: 8,
        ..ModelConfig::default()
    }
}

fn run_fbsm(x: &Tensor<f32>, cfg: FbsmConfig, seed: u64) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    let mut params = ParamSet::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let module = Fbsm::init(&mut params, "m", cfg, x.shape()[1], 5, &mut rng).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let vx = tape.constant(x.clone());
    let out = module.forward(&mut tape, &bound, vx).unwrap();
    (
        tape.value(out.x_s).clone(),
        tape.value(out.b).clone(),
        tape.value(out.x_p).clone(),
    )
}

fn stripe_of(col: usize, width: usize, k: usize) -> usize {
    col / (width / k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_alpha_leaves_the_boosted_input_unchanged(seed in any::<u64>(), k in 1usize..=4) {
        let x = rand_tensor(&[2, 3, 3, 4 * k], seed);
        let b = rand_tensor(&[2, k], seed ^ 1).map(f32::abs);
        let mut tape = Tape::new();
        let (vx, vb) = (tape.constant(x.clone()), tape.constant(b));
        let y = boost(&mut tape, vx, vb, 0.0).unwrap();
        prop_assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn zero_beta_leaves_the_suppressed_feature_unchanged(seed in any::<u64>(), k in 1usize..=4) {
        let x = rand_tensor(&[2, 3, 4, 2 * k], seed);
        let (x_s, _, _) = run_fbsm(&x, FbsmConfig { k, alpha: 0.5, beta: 0.0 }, seed);
        prop_assert_eq!(x_s.data(), x.data());
    }

    #[test]
    fn zero_gamma_leaves_parts_unchanged(seed in any::<u64>()) {
        let shapes = [[2, 4, 3, 3], [2, 4, 2, 2], [2, 4, 1, 2]];
        let parts: Vec<Tensor<f32>> = shapes.iter().enumerate().map(|(i, s)| rand_tensor(s, seed ^ i as u64)).collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = parts.iter().map(|p| tape.constant(p.clone())).collect();
        let z = diversify(&mut tape, &vars, &FdmConfig { gamma: 0.0, temperature: 1.0 }).unwrap();
        for (zi, xi) in z.iter().zip(&parts) {
            prop_assert_eq!(tape.value(*zi).data(), xi.data());
        }
    }

    #[test]
    fn stripe_weights_sum_to_one(seed in any::<u64>(), k in 1usize..=4, scale in 0.1f32..50.0) {
        let x = rand_tensor(&[3, 4, 2, 3 * k], seed).map(|v| v * scale);
        let (_, b, _) = run_fbsm(&x, FbsmConfig { k, ..FbsmConfig::default() }, seed);
        prop_assert_eq!(b.shape(), &[3, k]);
        for row in b.data().chunks(k) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn suppression_scales_exactly_the_first_argmax_stripe(seed in any::<u64>(), k in 1usize..=4, beta in 0.0f32..=1.0) {
        let w = 2 * k;
        let x = rand_tensor(&[2, 3, 3, w], seed);
        let (x_s, b, _) = run_fbsm(&x, FbsmConfig { k, alpha: 0.5, beta }, seed);
        let hw = 3 * w;
        for n in 0..2 {
            let top = first_argmax(&b.data()[n * k..(n + 1) * k]);
            for (i, (&s, &v)) in x_s.slice(n).iter().zip(x.slice(n)).enumerate() {
                let col = (i % hw) % w;
                let want = if stripe_of(col, w, k) == top { v * (1.0 - beta) } else { v };
                prop_assert_eq!(s, want);
            }
        }
    }

    #[test]
    fn attention_columns_sum_to_one(seed in any::<u64>(), n1 in 1usize..=9, n2 in 1usize..=9, scale in 0.1f32..10.0) {
        let a = rand_tensor(&[2, 4, n1], seed).map(|v| v * scale);
        let b = rand_tensor(&[2, 4, n2], seed ^ 7).map(|v| v * scale);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let pv = pcm_pair(&mut tape, va, vb, 1.0).unwrap();
        // part 1 attends over the pixels of part 2: each row is one distribution
        for row in tape.value(pv.attn_1_from_2).data().chunks(n2) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
        // part 2 attends over the pixels of part 1 along axis 1
        let t = tape.value(pv.attn_2_from_1);
        for bi in 0..2 {
            for j in 0..n2 {
                let col: f32 = (0..n1).map(|i| t.data()[(bi * n1 + i) * n2 + j]).sum();
                prop_assert!((col - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn averaged_probabilities_sum_to_one(seed in any::<u64>(), n in 2usize..=10) {
        let probs: Vec<Tensor<f32>> = (0..PARTS)
            .map(|i| {
                let logits = rand_tensor(&[4, n], seed ^ i as u64).map(|v| v * 20.0);
                let mut tape = Tape::new();
                let l = tape.constant(logits);
                let p = tape.softmax(l, 1).unwrap();
                tape.value(p).clone()
            })
            .collect();
        let avg = average_probs(&probs);
        for row in avg.data().chunks(n) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn head_is_invariant_to_spatial_permutation(seed in any::<u64>(), shift in 1usize..9) {
        let z = rand_tensor(&[2, 4, 3, 3], seed);
        let mut shuffled = z.clone();
        for (dst, src) in shuffled.data_mut().chunks_mut(9).zip(z.data().chunks(9)) {
            for (i, d) in dst.iter_mut().enumerate() {
                *d = src[(i + shift) % 9];
            }
        }
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = fbsd::nn::LinearLayer::init(&mut params, "h", fbsd::nn::Group::New, 4, 5, &mut rng).unwrap();
        let logits = |input: &Tensor<f32>| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let v = tape.constant(input.cast::<f64>());
            let l = classifier_head(&mut tape, &bound, &head, v).unwrap();
            tape.value(l).clone()
        };
        let (a, b) = (logits(&z), logits(&shuffled));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn model_stage_sizes_and_part_shapes() {
    let cfg = small_cfg();
    let model = Model::<f32>::build(&cfg).unwrap();
    let art = model.infer(&rand_tensor(&[2, 3, 64, 64], 1)).unwrap();
    let sizes: Vec<usize> = art.stage_maps.iter().map(|m| m.shape()[2]).collect();
    assert_eq!(sizes, vec![32, 16, 8, 4, 2]);
    for (i, part) in art.fbsm.iter().enumerate() {
        let s = 8 >> i;
        assert_eq!(part.x_p.shape(), &[2, cfg.embed_dim, s, s]);
        assert_eq!(part.x_s.shape(), art.stage_maps[i + 2].shape());
    }
    assert_eq!(art.logits.len(), PARTS);
    assert_eq!(art.stage_maps.len(), STAGES);
}

#[test]
fn invalid_stripe_count_names_the_stage() {
    let cfg = ModelConfig { k: 4, ..ModelConfig::default() };
    let err = Model::<f32>::build(&cfg).unwrap_err().to_string();
    assert!(err.contains("stage 5"), "{err}");
    let cfg = ModelConfig { input_size: 48, ..ModelConfig::default() };
    assert!(Model::<f32>::build(&cfg).is_err());
}

#[test]
fn diversification_adds_no_parameters() {
    let with = Model::<f32>::build(&ModelConfig { gamma: 1.0, ..ModelConfig::default() }).unwrap();
    let without = Model::<f32>::build(&ModelConfig { gamma: 0.0, ..ModelConfig::default() }).unwrap();
    assert_eq!(with.param_count(), without.param_count());
    assert_eq!(with.params.len(), without.params.len());
}

#[test]
fn null_strengths_reduce_to_the_plain_multi_head_network() {
    let model = Model::<f32>::build(&small_cfg()).unwrap().with_strengths(0.0, 0.0, 0.0).unwrap();
    let x = rand_tensor(&[2, 3, 64, 64], 2);
    let got = model.infer(&x).unwrap();

    // Same parameters, wired by hand: stages, part conv + relu, GAP + linear.
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let mut h = tape.constant(x);
    let mut want = Vec::new();
    for s in 0..STAGES {
        for conv in model.stage_convs(s) {
            let y = conv.forward(&mut tape, &bound, h).unwrap();
            h = tape.relu(y);
        }
        if s >= 2 {
            let part = &model.fbsm_modules()[s - 2].part_conv;
            let p = part.forward(&mut tape, &bound, h).unwrap();
            let p = tape.relu(p);
            let l = classifier_head(&mut tape, &bound, &model.heads()[s - 2], p).unwrap();
            want.push(tape.value(l).clone());
        }
    }
    assert_eq!(got.logits, want);
}

#[test]
fn suppression_reaches_the_next_stage() {
    let base = Model::<f32>::build(&small_cfg()).unwrap();
    let x = rand_tensor(&[1, 3, 64, 64], 3);
    let on = base.infer(&x).unwrap();
    let off = base.with_strengths(0.5, 0.0, 1.0).unwrap().infer(&x).unwrap();
    assert_eq!(on.stage_maps[2], off.stage_maps[2]);
    assert_ne!(on.fbsm[0].x_s, off.fbsm[0].x_s);
    assert_ne!(on.stage_maps[3], off.stage_maps[3]);
}

#[test]
fn full_suppression_zeroes_the_selected_stripe() {
    let x = rand_tensor(&[1, 2, 2, 8], 4);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let b = tape.constant(Tensor::new(vec![1, 4], vec![0.1f32, 0.4, 0.4, 0.1]).unwrap());
    let y = suppress(&mut tape, vx, b, 1.0).unwrap();
    for (i, (&o, &v)) in tape.value(y).data().iter().zip(x.data()).enumerate() {
        let col = i % 8;
        // ties resolve to the lowest index, stripe 1
        if (2..4).contains(&col) {
            assert_eq!(o, 0.0);
        } else {
            assert_eq!(o, v);
        }
    }
}

#[test]
fn single_stripe_softmax_is_exactly_one() {
    let x = rand_tensor(&[2, 3, 2, 5], 5);
    let (_, b, _) = run_fbsm(&x, FbsmConfig { k: 1, ..FbsmConfig::default() }, 5);
    assert!(b.data().iter().all(|&v| v == 1.0));
}

#[test]
fn part_features_are_non_negative() {
    let x = rand_tensor(&[2, 3, 4, 8], 6);
    let (_, _, x_p) = run_fbsm(&x, FbsmConfig::default(), 6);
    assert!(x_p.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn mismatched_part_channels_are_rejected() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
    let b = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
    assert!(diversify(&mut tape, &[a, b], &FdmConfig::default()).is_err());
    assert!(diversify(&mut tape, &[a], &FdmConfig::default()).is_err());
}

#[test]
fn predictions_are_batch_independent() {
    let model = Model::<f32>::build(&small_cfg()).unwrap();
    let x = rand_tensor(&[3, 3, 64, 64], 7);
    let all = model.predict(&x).unwrap();
    for (i, p) in all.iter().enumerate() {
        let one = Tensor::new(vec![1, 3, 64, 64], x.slice(i).to_vec()).unwrap();
        let single = &model.predict(&one).unwrap()[0];
        assert_eq!(single.class, p.class);
        for (a, b) in single.probs.iter().zip(&p.probs) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn wrong_input_size_is_a_dimension_error() {
    let model = Model::<f32>::build(&small_cfg()).unwrap();
    assert!(model.infer(&Tensor::zeros(&[1, 3, 32, 32])).is_err());
    assert!(model.infer(&Tensor::zeros(&[1, 1, 64, 64])).is_err());
}
