//! Feature boosting and suppression.
//!
//! A feature map `X: B×C×H×W` is cut into `k` equal stripes along its width.
//! A shared 1×1 grader scores every stripe (relu, then spatial mean), and a
//! softmax over the `k` scores gives importance weights `b`. The map is then
//! split two ways:
//!
//! - the part feature `relu(h(X + α·(b ⊗ X)))`, where stripe `i` is scaled by
//!   `b_i` and `h` is a 3×3 convolution to the shared embedding width;
//! - the suppressed feature, a copy of `X` whose most important stripe is
//!   multiplied by `1 − β`. It feeds the next backbone stage so that later
//!   stages are pushed towards other regions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, ConvLayer, ConvSpec, Group, ParamSet};
use crate::tape::{first_argmax, Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_K: usize = 4;

/// Normalised stripe importance for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct StripeWeights<T> {
    /// Softmax-normalised weights; sums to one.
    pub b: Vec<T>,
    /// Raw per-stripe scores before normalisation.
    pub b_raw: Vec<T>,
    /// Smallest index attaining `max(b)`.
    pub argmax_index: usize,
}

/// Hyperparameters of one module.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FbsmConfig {
    pub k: usize,
    pub alpha: f32,
    pub beta: f32,
}

impl Default for FbsmConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl FbsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("stripe count k must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        Ok(())
    }

    /// Reject feature widths that cannot be split evenly.
    pub fn check_width(&self, width: usize) -> Result<()> {
        if width % self.k != 0 {
            return Err(Error::config(format!(
                "feature width {width} is not divisible into k={} stripes",
                self.k
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fbsm {
    pub cfg: FbsmConfig,
    /// 1×1 convolution `C → 1`, shared by all stripes.
    pub grader: ConvLayer,
    /// 3×3 convolution `C → D` producing the part feature.
    pub part_conv: ConvLayer,
}

/// Tape handles produced by [`Fbsm::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FbsmVars {
    pub x_p: Var,
    pub x_s: Var,
    pub b: Var,
    pub b_raw: Var,
}

/// Materialised pair `(X_p, X_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FbsmOutput<T> {
    pub x_p: Tensor<T>,
    pub x_s: Tensor<T>,
}

impl FbsmVars {
    pub fn output<T: Scalar>(&self, tape: &Tape<T>) -> FbsmOutput<T> {
        FbsmOutput {
            x_p: tape.value(self.x_p).clone(),
            x_s: tape.value(self.x_s).clone(),
        }
    }
}

impl Fbsm {
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        cfg: FbsmConfig,
        in_c: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let grader = ConvLayer::init(
            params,
            &format!("{name}.grader"),
            Group::New,
            ConvSpec {
                in_c,
                out_c: 1,
                kernel: 1,
                stride: 1,
                pad: 0,
            },
            rng,
        )?;
        let part_conv = ConvLayer::init(
            params,
            &format!("{name}.part"),
            Group::New,
            ConvSpec {
                in_c,
                out_c: embed_dim,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            rng,
        )?;
        Ok(Self {
            cfg,
            grader,
            part_conv,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<FbsmVars> {
        let (b_raw, b) = stripe_importance(tape, bound, &self.grader, x, self.cfg.k)?;
        let boosted = boost(tape, x, b, T::lit(self.cfg.alpha.into()))?;
        let h = self.part_conv.forward(tape, bound, boosted)?;
        let x_p = tape.relu(h);
        let x_s = suppress(tape, x, b, T::lit(self.cfg.beta.into()))?;
        Ok(FbsmVars { x_p, x_s, b, b_raw })
    }
}

/// Raw scores `B×k` (`gap(relu(φ(X_i)))`) and their softmax.
pub fn stripe_importance<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    grader: &ConvLayer,
    x: Var,
    k: usize,
) -> Result<(Var, Var)> {
    // φ is 1×1, so grading the whole map and then pooling per stripe equals
    // grading each stripe separately.
    let scores = grader.forward(tape, bound, x)?;
    let active = tape.relu(scores);
    let b_raw = tape.stripe_mean(active, k)?;
    let b = tape.softmax(b_raw, 1)?;
    Ok((b_raw, b))
}

/// Per-image [`StripeWeights`] read back from the tape.
pub fn stripe_weights<T: Scalar>(tape: &Tape<T>, b_raw: Var, b: Var) -> Vec<StripeWeights<T>> {
    let k = tape.shape(b)[1];
    tape.value(b)
        .data()
        .chunks(k)
        .zip(tape.value(b_raw).data().chunks(k))
        .map(|(bw, raw)| StripeWeights {
            b: bw.to_vec(),
            b_raw: raw.to_vec(),
            argmax_index: first_argmax(bw),
        })
        .collect()
}

/// `X + α·(b ⊗ X)`: stripe `i` scaled by `1 + α·b_i`.
pub fn boost<T: Scalar>(tape: &mut Tape<T>, x: Var, b: Var, alpha: T) -> Result<Var> {
    let scaled = tape.scale(b, alpha);
    let factors = tape.add_scalar(scaled, T::one());
    tape.stripe_scale(x, factors)
}

/// `S ⊗ X` with `s_i = 1 − β` on the first maximal stripe of `b`, else 1.
pub fn suppress<T: Scalar>(tape: &mut Tape<T>, x: Var, b: Var, beta: T) -> Result<Var> {
    tape.suppress(x, b, T::one() - beta)
}
