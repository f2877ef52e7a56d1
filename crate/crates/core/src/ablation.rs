//! Three-way module ablation and the stripe-diversity statistic.

use std::collections::HashSet;

use crate::data::{AugmentConfig, Dataset};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::train::{eval_batches, train_loop, OptimConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// α = β = γ = 0: part convs and heads only, modules inert.
    Backbone,
    /// Boosting and suppression on, diversification off (γ = 0).
    Fbsm,
    /// Everything on.
    FbsmFdm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Backbone, Variant::Fbsm, Variant::FbsmFdm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Backbone => "backbone",
            Variant::Fbsm => "fbsm",
            Variant::FbsmFdm => "fbsm_fdm",
        }
    }

    /// Model config for this variant, keeping the strengths of `base` where
    /// the variant enables a module.
    pub fn config(self, base: &ModelConfig) -> ModelConfig {
        let (alpha, beta, gamma) = match self {
            Variant::Backbone => (0.0, 0.0, 0.0),
            Variant::Fbsm => (base.alpha, base.beta, 0.0),
            Variant::FbsmFdm => (base.alpha, base.beta, base.gamma),
        };
        ModelConfig {
            alpha,
            beta,
            gamma,
            ..base.clone()
        }
    }
}

/// How spread out the per-stage most important stripes are.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diversity {
    /// Mean number of distinct argmax stripes across the three part modules.
    pub mean_span: f32,
    /// Fraction of samples whose argmax stripes cover at least two stripes.
    pub frac_multi: f32,
}

/// Stripe diversity of `model` on the evaluation transform of `ds`.
pub fn stripe_diversity(model: &Model<f32>, ds: &Dataset, aug: &AugmentConfig) -> Result<Diversity> {
    let mut spans = Vec::with_capacity(ds.len());
    for (images, _) in eval_batches(ds, aug, 64)? {
        let art = model.infer(&images)?;
        for i in 0..images.shape()[0] {
            let picked: HashSet<usize> = art.stripe_weights.iter().map(|m| m[i].argmax_index).collect();
            spans.push(picked.len());
        }
    }
    let n = spans.len() as f64;
    Ok(Diversity {
        mean_span: (spans.iter().sum::<usize>() as f64 / n) as f32,
        frac_multi: (spans.iter().filter(|&&s| s >= 2).count() as f64 / n) as f32,
    })
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub final_acc: f32,
    pub best_acc: f32,
    pub diversity: Diversity,
    pub state: TrainState,
    pub model: Model<f32>,
}

/// Train one model config with `seed` driving both initialisation and
/// shuffling.
pub fn run_seed(
    cfg: &ModelConfig,
    optim: &OptimConfig,
    aug: &AugmentConfig,
    train: &Dataset,
    eval: &Dataset,
    seed: u64,
) -> Result<RunResult> {
    let mut model = Model::<f32>::build(&ModelConfig { seed, ..cfg.clone() })?;
    let optim = OptimConfig { seed, ..optim.clone() };
    let state = train_loop(&mut model, train, eval, &optim, aug)?;
    let diversity = stripe_diversity(&model, eval, aug)?;
    Ok(RunResult {
        seed,
        final_acc: state.history.last().map_or(0.0, |m| m.eval_acc),
        best_acc: state.best_acc,
        diversity,
        state,
        model,
    })
}

#[derive(Clone, Debug)]
pub struct VariantSummary {
    pub variant: Variant,
    /// Mean over seeds of the final-epoch evaluation accuracy.
    pub mean_acc: f32,
    pub runs: Vec<RunResult>,
}

/// Train every variant for every seed.
pub fn ablate(
    base: &ModelConfig,
    optim: &OptimConfig,
    aug: &AugmentConfig,
    train: &Dataset,
    eval: &Dataset,
    seeds: &[u64],
) -> Result<Vec<VariantSummary>> {
    Variant::ALL
        .iter()
        .map(|&variant| {
            let cfg = variant.config(base);
            let runs = seeds
                .iter()
                .map(|&s| run_seed(&cfg, optim, aug, train, eval, s))
                .collect::<Result<Vec<_>>>()?;
            let mean_acc = (runs.iter().map(|r| r.final_acc as f64).sum::<f64>() / runs.len() as f64) as f32;
            Ok(VariantSummary {
                variant,
                mean_acc,
                runs,
            })
        })
        .collect()
}
