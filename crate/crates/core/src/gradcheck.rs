//! Central-difference verification of tape gradients in `f64`.

use rand::distributions::{Distribution, Uniform};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fbsm::{Fbsm, FbsmConfig};
use crate::fdm::{diversify, FdmConfig};
use crate::model::{Model, ModelConfig};
use crate::nn::{Bound, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many coordinates per input (chosen at random).
    /// `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// max |analytic − numeric| / max(1, |analytic|) over checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±eps probe crossed a relu kink or a suppression
    /// switch; their finite difference is meaningless and they are skipped.
    pub skipped: usize,
    pub pass: bool,
}

/// Check the gradient of a scalar function of a single tensor.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_gradients(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), cfg)
}

/// Check the gradient of a scalar function with respect to every input.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor<f64>],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::usage(format!(
                "gradcheck needs a scalar function, got shape {:?}",
                tape.shape(out)
            )));
        }
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(inputs)?;
    let base_sig = tape.kink_signature();
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()))
        })
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        pass: true,
    };
    let mut probe = inputs.to_vec();
    for (which, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < x.numel() => {
                let mut c = sample(&mut rng, x.numel(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..x.numel()).collect(),
        };
        for j in coords {
            let orig = x.data()[j];
            probe[which].data_mut()[j] = orig + cfg.eps;
            let (tp, _, op) = eval(&probe)?;
            let (fp, sp) = (tp.value(op).item(), tp.kink_signature());
            probe[which].data_mut()[j] = orig - cfg.eps;
            let (tm, _, om) = eval(&probe)?;
            let (fm, sm) = (tm.value(om).item(), tm.kink_signature());
            probe[which].data_mut()[j] = orig;

            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = analytic[which].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    if report.checked == 0 {
        return Err(Error::usage("gradcheck: every coordinate sits on a kink; resample the point"));
    }
    report.pass = report.max_rel_err <= cfg.tol;
    Ok(report)
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let u = Uniform::new(-scale, scale);
    Tensor::from_fn(shape, |_| u.sample(rng))
}

/// `Σ x ⊙ r` with a fixed random `r`, turning any tensor into a scalar with
/// a generic gradient.
fn probe_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(random(tape.shape(x), 1.0, &mut rng));
    let p = tape.mul(x, r)?;
    Ok(tape.sum(p))
}

/// Gradients of both outputs of a part module with respect to its input,
/// grader and part convolution.
pub fn fbsm_suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::<f64>::new();
    let module = Fbsm::init(&mut params, "fbsm", FbsmConfig { k: 4, alpha: 0.5, beta: 0.5 }, 3, 4, &mut rng)?;
    let mut inputs = vec![random(&[2, 3, 4, 8], 1.0, &mut rng)];
    for p in params.iter() {
        inputs.push(random(p.value.shape(), 0.5, &mut rng));
    }
    check_gradients(
        |tape, vars| {
            let bound = Bound::from_vars(vars[1..].to_vec());
            let out = module.forward(tape, &bound, vars[0])?;
            let a = probe_sum(tape, out.x_p, 1)?;
            let b = probe_sum(tape, out.x_s, 2)?;
            tape.add(a, b)
        },
        &inputs,
        cfg,
    )
}

/// Gradients of the diversified features with respect to three parts of
/// different spatial sizes.
pub fn fdm_suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inputs: Vec<Tensor<f64>> = [[3, 3], [2, 2], [1, 2]]
        .iter()
        .map(|&[h, w]| random(&[2, 3, h, w], 1.0, &mut rng))
        .collect();
    check_gradients(
        |tape, vars| {
            let z = diversify(tape, vars, &FdmConfig::default())?;
            let mut total = probe_sum(tape, z[0], 10)?;
            for (i, &zi) in z.iter().enumerate().skip(1) {
                let s = probe_sum(tape, zi, 10 + i as u64)?;
                total = tape.add(total, s)?;
            }
            Ok(total)
        },
        &inputs,
        cfg,
    )
}

/// Reduced-width model used by [`model_suite`]: one 64×64 image, two stripes.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        stage_channels: [2, 3, 2, 3, 2],
        embed_dim: 3,
        num_classes: 4,
        k: 2,
        ..ModelConfig::default()
    }
}

/// End-to-end gradient of the summed head losses with respect to every
/// parameter and the input image. Without an explicit coordinate cap, 16
/// random coordinates per tensor are probed.
pub fn model_suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let cfg = &GradcheckConfig {
        max_coords: cfg.max_coords.or(Some(16)),
        ..*cfg
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::<f64>::build(&ModelConfig {
        seed: cfg.seed,
        ..tiny_model_config()
    })?;
    let mut inputs: Vec<Tensor<f64>> = model
        .params
        .iter()
        .map(|p| {
            // non-zero biases keep activations away from exact relu kinks
            if p.name.ends_with(".bias") {
                random(p.value.shape(), 0.1, &mut rng)
            } else {
                p.value.clone()
            }
        })
        .collect();
    inputs.push(random(&[1, 3, 64, 64], 1.0, &mut rng));
    let n = model.params.len();
    check_gradients(
        |tape, vars| {
            let bound = Bound::from_vars(vars[..n].to_vec());
            let fv = model.forward_vars(tape, &bound, vars[n])?;
            model.loss_var(tape, &fv, &[1])
        },
        &inputs,
        cfg,
    )
}
