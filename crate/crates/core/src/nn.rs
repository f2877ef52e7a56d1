//! Parameter storage, convolution/affine layers and the classifier head.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    /// Backbone stage convolutions.
    Backbone,
    /// Layers introduced on top of the backbone: graders, part convs, heads.
    New,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

/// Ordered, uniquely named trainable parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

/// Tape variables for every parameter of a [`ParamSet`], by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Use existing tape variables, in parameter order, as the bound set.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        if !value.is_finite() {
            return Err(Error::config(format!("parameter {name:?} is not finite")));
        }
        self.params.push(Param { name, group, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Place every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }

    /// Gradients after a backward pass, in parameter order. Parameters the
    /// loss does not depend on get `None`.
    pub fn grads(&self, tape: &mut Tape<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
        bound.vars.iter().map(|&v| tape.take_grad(v)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Gain for layers followed by a relu.
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
/// Gain for layers with no nonlinearity after them, such as classifier heads.
pub const LINEAR_GAIN: f64 = 1.0;

/// Kaiming-uniform tensor: `U(-b, b)` with `b = gain·sqrt(3 / fan_in)`, giving
/// standard deviation `gain / sqrt(fan_in)`.
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// `weight: O×C×kh×kw`, `bias: O`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    /// Register `<name>.weight` and `<name>.bias`, Kaiming-initialised with zero bias.
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        group: Group,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = spec.in_c * spec.kernel * spec.kernel;
        let w = kaiming_uniform(&[spec.out_c, spec.in_c, spec.kernel, spec.kernel], fan_in, RELU_GAIN, rng);
        let weight = params.add(format!("{name}.weight"), group, w)?;
        let bias = params.add(format!("{name}.bias"), group, Tensor::zeros(&[spec.out_c]))?;
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            pad: spec.pad,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            bound.var(self.weight),
            Some(bound.var(self.bias)),
            self.stride,
            self.pad,
        )
    }

    pub fn out_channels<T: Scalar>(&self, params: &ParamSet<T>) -> usize {
        params.get(self.weight).value.shape()[0]
    }
}

/// `weight: N×D`, `bias: N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        group: Group,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = kaiming_uniform(&[out_dim, in_dim], in_dim, LINEAR_GAIN, rng);
        let weight = params.add(format!("{name}.weight"), group, w)?;
        let bias = params.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound.var(self.weight), bound.var(self.bias))
    }
}

/// Global-average-pool a `B×D×H×W` part feature and map it to `B×N` logits.
pub fn classifier_head<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cls: &LinearLayer,
    z: Var,
) -> Result<Var> {
    let zs = tape.shape(z).to_vec();
    let ws = tape.shape(bound.var(cls.weight)).to_vec();
    if zs.len() != 4 || zs[1] != ws[1] {
        return Err(Error::config(format!(
            "classifier head expects {} channels, feature has shape {zs:?}",
            ws[1]
        )));
    }
    let pooled = tape.gap(z)?;
    cls.forward(tape, bound, pooled)
}
