//! Five-stage convolutional backbone with part modules after stages 3–5,
//! feature diversification across the three part features, and one
//! classifier head per part.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fbsm::{stripe_weights, Fbsm, FbsmConfig, FbsmOutput, FbsmVars, StripeWeights};
use crate::fdm::{diversify, FdmConfig};
use crate::nn::{classifier_head, Bound, ConvLayer, ConvSpec, Group, LinearLayer, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Number of part features / classifier heads.
pub const PARTS: usize = 3;
pub const STAGES: usize = 5;
/// Zero-based index of the first stage followed by a part module.
pub const FIRST_PART_STAGE: usize = 2;

/// Entry convolution of every stage: 4×4, stride 2, pad 1 halves an even
/// extent exactly.
const ENTRY_KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stage_channels: [usize; STAGES],
    /// Convolutions per stage including the stride-2 entry convolution.
    pub convs_per_stage: usize,
    /// Stripes per part module.
    pub k: usize,
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
    /// Softmax temperature for the diversification attention.
    pub temperature: f32,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub input_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128, 256],
            convs_per_stage: 2,
            k: 2,
            alpha: 0.5,
            beta: 0.5,
            gamma: 1.0,
            temperature: 1.0,
            embed_dim: 128,
            num_classes: 8,
            in_channels: 3,
            input_size: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn fbsm(&self) -> FbsmConfig {
        FbsmConfig {
            k: self.k,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn fdm(&self) -> FdmConfig {
        FdmConfig {
            gamma: self.gamma,
            temperature: self.temperature,
        }
    }

    /// Spatial extent of the output of zero-based stage `s`.
    pub fn stage_size(&self, s: usize) -> usize {
        self.input_size >> (s + 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.fbsm().validate()?;
        self.fdm().validate()?;
        if self.stage_channels.contains(&0) {
            return Err(Error::config("stage channel counts must be positive"));
        }
        if self.convs_per_stage == 0 {
            return Err(Error::config("convs_per_stage must be at least 1"));
        }
        if self.embed_dim == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::config("embed_dim, num_classes and in_channels must be positive"));
        }
        if self.input_size == 0 || self.input_size % (1 << STAGES) != 0 {
            return Err(Error::config(format!(
                "input size {} must be a positive multiple of {}",
                self.input_size,
                1 << STAGES
            )));
        }
        for s in FIRST_PART_STAGE..STAGES {
            let w = self.stage_size(s);
            if w % self.k != 0 {
                return Err(Error::config(format!(
                    "stage {} output width {w} is not divisible into k={} stripes",
                    s + 1,
                    self.k
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
    stages: Vec<Vec<ConvLayer>>,
    fbsms: Vec<Fbsm>,
    heads: Vec<LinearLayer>,
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Output of every backbone stage, before any part module.
    pub stages: Vec<Var>,
    pub fbsm: Vec<FbsmVars>,
    /// Enhanced part features after diversification.
    pub enhanced: Vec<Var>,
    pub logits: Vec<Var>,
}

/// Materialised intermediate values of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardArtifacts<T> {
    pub stage_maps: Vec<Tensor<T>>,
    /// Per part module, per image.
    pub stripe_weights: Vec<Vec<StripeWeights<T>>>,
    pub fbsm: Vec<FbsmOutput<T>>,
    pub enhanced: Vec<Tensor<T>>,
    pub logits: Vec<Tensor<T>>,
    pub probs: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub class: usize,
    /// Mean of the per-head softmax outputs.
    pub probs: Vec<T>,
}

fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let n = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let s: T = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v = *v / s);
    }
    out
}

/// Average of per-head probability rows, `B×N`.
pub fn average_probs<T: Scalar>(probs: &[Tensor<T>]) -> Tensor<T> {
    let mut acc = Tensor::zeros(probs[0].shape());
    for p in probs {
        for (a, &v) in acc.data_mut().iter_mut().zip(p.data()) {
            *a = *a + v;
        }
    }
    let t = T::from_usize(probs.len()).unwrap();
    acc.map(|v| v / t)
}

/// First index of the maximum of every row.
pub fn argmax_rows<T: Scalar>(m: &Tensor<T>) -> Vec<usize> {
    let n = m.shape()[1];
    m.data().chunks(n).map(crate::tape::first_argmax).collect()
}

impl<T: Scalar> Model<T> {
    /// Deterministically initialise a model from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let mut stages = Vec::with_capacity(STAGES);
        let mut in_c = cfg.in_channels;
        for (s, &out_c) in cfg.stage_channels.iter().enumerate() {
            let mut convs = Vec::with_capacity(cfg.convs_per_stage);
            for j in 0..cfg.convs_per_stage {
                let spec = if j == 0 {
                    ConvSpec {
                        in_c,
                        out_c,
                        kernel: ENTRY_KERNEL,
                        stride: 2,
                        pad: 1,
                    }
                } else {
                    ConvSpec {
                        in_c: out_c,
                        out_c,
                        kernel: 3,
                        stride: 1,
                        pad: 1,
                    }
                };
                let name = format!("stage{}.conv{}", s + 1, j);
                convs.push(ConvLayer::init(&mut params, &name, Group::Backbone, spec, &mut rng)?);
            }
            stages.push(convs);
            in_c = out_c;
        }
        let mut fbsms = Vec::with_capacity(PARTS);
        for (i, s) in (FIRST_PART_STAGE..STAGES).enumerate() {
            fbsms.push(Fbsm::init(
                &mut params,
                &format!("fbsm{i}"),
                cfg.fbsm(),
                cfg.stage_channels[s],
                cfg.embed_dim,
                &mut rng,
            )?);
        }
        let mut heads = Vec::with_capacity(PARTS);
        for i in 0..PARTS {
            heads.push(LinearLayer::init(
                &mut params,
                &format!("head{i}"),
                Group::New,
                cfg.embed_dim,
                cfg.num_classes,
                &mut rng,
            )?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            params,
            stages,
            fbsms,
            heads,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn fbsm_modules(&self) -> &[Fbsm] {
        &self.fbsms
    }

    pub fn heads(&self) -> &[LinearLayer] {
        &self.heads
    }

    pub fn stage_convs(&self, s: usize) -> &[ConvLayer] {
        &self.stages[s]
    }

    /// Same architecture and weights, different element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            stages: self.stages.clone(),
            fbsms: self.fbsms.clone(),
            heads: self.heads.clone(),
        }
    }

    /// Copy of this model with different module strengths. Parameters are
    /// shared bitwise; only forward behaviour changes.
    pub fn with_strengths(&self, alpha: f32, beta: f32, gamma: f32) -> Result<Self> {
        let mut m = self.clone();
        m.cfg.alpha = alpha;
        m.cfg.beta = beta;
        m.cfg.gamma = gamma;
        m.cfg.validate()?;
        for f in &mut m.fbsms {
            f.cfg = m.cfg.fbsm();
        }
        Ok(m)
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let c = &self.cfg;
        if shape.len() != 4 || shape[1] != c.in_channels || shape[2] != c.input_size || shape[3] != c.input_size {
            return Err(Error::Dimension {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: vec![0, c.in_channels, c.input_size, c.input_size],
            });
        }
        Ok(())
    }

    /// Record the full forward pass on `tape`.
    pub fn forward_vars(&self, tape: &mut Tape<T>, bound: &Bound, images: Var) -> Result<ForwardVars> {
        self.check_images(tape.shape(images))?;
        let mut x = images;
        let mut stage_vars = Vec::with_capacity(STAGES);
        let mut fbsm_vars = Vec::with_capacity(PARTS);
        for (s, convs) in self.stages.iter().enumerate() {
            for conv in convs {
                let y = conv.forward(tape, bound, x)?;
                x = tape.relu(y);
            }
            stage_vars.push(x);
            if s >= FIRST_PART_STAGE {
                let fv = self.fbsms[s - FIRST_PART_STAGE].forward(tape, bound, x)?;
                x = fv.x_s;
                fbsm_vars.push(fv);
            }
        }
        let parts: Vec<Var> = fbsm_vars.iter().map(|f| f.x_p).collect();
        let enhanced = diversify(tape, &parts, &self.cfg.fdm())?;
        let logits = enhanced
            .iter()
            .zip(&self.heads)
            .map(|(&z, head)| classifier_head(tape, bound, head, z))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardVars {
            stages: stage_vars,
            fbsm: fbsm_vars,
            enhanced,
            logits,
        })
    }

    /// Sum over heads of the batch-mean cross entropy.
    pub fn loss_var(&self, tape: &mut Tape<T>, fv: &ForwardVars, labels: &[usize]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for &l in &fv.logits {
            let ce = tape.cross_entropy(l, labels)?;
            total = Some(match total {
                None => ce,
                Some(t) => tape.add(t, ce)?,
            });
        }
        Ok(total.expect("three heads"))
    }

    pub fn artifacts(&self, tape: &Tape<T>, fv: &ForwardVars) -> ForwardArtifacts<T> {
        let logits: Vec<Tensor<T>> = fv.logits.iter().map(|&l| tape.value(l).clone()).collect();
        ForwardArtifacts {
            stage_maps: fv.stages.iter().map(|&s| tape.value(s).clone()).collect(),
            stripe_weights: fv
                .fbsm
                .iter()
                .map(|f| stripe_weights(tape, f.b_raw, f.b))
                .collect(),
            fbsm: fv.fbsm.iter().map(|f| f.output(tape)).collect(),
            enhanced: fv.enhanced.iter().map(|&z| tape.value(z).clone()).collect(),
            probs: logits.iter().map(softmax_rows).collect(),
            logits,
        }
    }

    /// Training loss on a batch, with every intermediate value.
    pub fn forward_train(&self, images: &Tensor<T>, labels: &[usize]) -> Result<(T, ForwardArtifacts<T>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let fv = self.forward_vars(&mut tape, &bound, x)?;
        let loss = self.loss_var(&mut tape, &fv, labels)?;
        Ok((tape.value(loss).item(), self.artifacts(&tape, &fv)))
    }

    /// Loss and parameter gradients on a batch, in parameter order.
    /// Parameters the loss does not reach get `None`.
    pub fn loss_and_grads(&self, images: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<Option<Tensor<T>>>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let x = tape.constant(images.clone());
        let fv = self.forward_vars(&mut tape, &bound, x)?;
        let loss = self.loss_var(&mut tape, &fv, labels)?;
        tape.backward(loss)?;
        let value = tape.value(loss).item();
        Ok((value, self.params.grads(&mut tape, &bound)))
    }

    /// Forward pass without gradients.
    pub fn infer(&self, images: &Tensor<T>) -> Result<ForwardArtifacts<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let fv = self.forward_vars(&mut tape, &bound, x)?;
        Ok(self.artifacts(&tape, &fv))
    }

    /// Class of the averaged head probabilities, per image.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<Prediction<T>>> {
        let art = self.infer(images)?;
        Ok(predictions_from_probs(&art.probs))
    }
}

pub fn predictions_from_probs<T: Scalar>(probs: &[Tensor<T>]) -> Vec<Prediction<T>> {
    let avg = average_probs(probs);
    let n = avg.shape()[1];
    avg.data()
        .chunks(n)
        .map(|row| Prediction {
            class: crate::tape::first_argmax(row),
            probs: row.to_vec(),
        })
        .collect()
}

/// Channel-mean activation map of 1-based `stage` (3, 4 or 5), taken before
/// the part module, one `H×W` map per image.
pub fn activation_map<T: Scalar>(art: &ForwardArtifacts<T>, stage: usize) -> Result<Vec<Tensor<T>>> {
    if !(FIRST_PART_STAGE + 1..=STAGES).contains(&stage) {
        return Err(Error::usage(format!("activation maps exist for stages 3-5, not {stage}")));
    }
    let fm = &art.stage_maps[stage - 1];
    channel_mean(fm)
}

/// Mean over axis 1 of a `B×C×H×W` tensor.
pub fn channel_mean<T: Scalar>(fm: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let &[b, c, h, w] = fm.shape() else {
        return Err(Error::Dimension {
            op: "channel_mean",
            lhs: fm.shape().to_vec(),
            rhs: vec![],
        });
    };
    let n = T::from_usize(c).unwrap();
    (0..b)
        .map(|bi| {
            let sample = &fm.data()[bi * c * h * w..(bi + 1) * c * h * w];
            let mut acc = vec![T::zero(); h * w];
            for plane in sample.chunks(h * w) {
                acc.iter_mut().zip(plane).for_each(|(a, &v)| *a = *a + v);
            }
            Tensor::new(vec![h, w], acc.into_iter().map(|v| v / n).collect())
        })
        .collect()
}
