//! Named-tensor checkpoint files and model/optimiser state persistence.
//!
//! Layout, little-endian throughout: magic `FBCK`, u32 version, u32 tensor
//! count, then per tensor a u16 name length, the UTF-8 name, a u8 dtype
//! (0 = f32), a u8 rank, u32 extents and the raw payload. Integer metadata is
//! stored bit-cast into f32 slots so every value survives a roundtrip.

use std::fs;
use std::path::Path;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, PARTS, STAGES};
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::train::{EpochMetrics, OptimConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"FBCK";
pub const VERSION: u32 = 1;

/// Ordered collection of uniquely named f32 tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

fn entry_len(name: &str, t: &Tensor<f32>) -> usize {
    2 + name.len() + 1 + 1 + 4 * t.ndim() + 4 * t.numel()
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::usage(format!("duplicate checkpoint tensor {name}")));
        }
        if name.len() > u16::MAX as usize || t.ndim() > u8::MAX as usize {
            return Err(Error::usage(format!("checkpoint tensor {name} cannot be encoded")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Byte offset of the entry called `name` in the encoded file.
    pub fn offset_of(&self, name: &str) -> Option<u64> {
        let mut at = 12;
        for (n, t) in &self.entries {
            if n == name {
                return Some(at as u64);
            }
            at += entry_len(n, t);
        }
        None
    }

    pub fn encode(&self) -> Vec<u8> {
        let total = 12 + self.entries.iter().map(|(n, t)| entry_len(n, t)).sum::<usize>();
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"FBCK\""));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let start = r.at as u64;
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::format(start + 2, "tensor name is not UTF-8"))?
                .to_owned();
            let dtype = r.take(1, "dtype")?[0];
            if dtype != 0 {
                return Err(Error::format(r.at as u64 - 1, format!("tensor {name}: unsupported dtype {dtype}")));
            }
            let ndim = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("extent")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = numel
                .filter(|&n| n > 0 && n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::format(start, format!("tensor {name}: bad shape {shape:?}")))?;
            let payload = r.take(4 * n, &format!("payload of {name}"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(start, e.to_string()))?;
            if ck.get(&name).is_some() {
                return Err(Error::format(start, format!("duplicate tensor {name}")));
            }
            ck.entries.push((name, t));
        }
        if r.at != bytes.len() {
            return Err(Error::format(
                r.at as u64,
                format!("{} trailing bytes after the last tensor", bytes.len() - r.at),
            ));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::format(0, format!("checkpoint has no tensor {name}")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.bytes.len() as u64, format!("truncated while reading {what}")));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn int(v: usize) -> f32 {
    f32::from_bits(v as u32)
}

fn seed_words(seed: u64) -> [f32; 2] {
    [f32::from_bits(seed as u32), f32::from_bits((seed >> 32) as u32)]
}

fn vector(v: Vec<f32>) -> Tensor<f32> {
    let n = v.len();
    Tensor::new(vec![n], v).expect("non-empty metadata")
}

/// Fixed-length metadata vector reader.
struct Fields<'a> {
    name: &'static str,
    data: &'a [f32],
    at: usize,
}

impl<'a> Fields<'a> {
    fn open(ck: &'a Checkpoint, name: &'static str, len: usize) -> Result<Self> {
        let t = ck.require(name)?;
        if t.shape() != [len] {
            return Err(Error::format(
                ck.offset_of(name).unwrap_or(0),
                format!("tensor {name} has shape {:?}, expected [{len}]", t.shape()),
            ));
        }
        Ok(Self { name, data: t.data(), at: 0 })
    }

    fn f(&mut self) -> f32 {
        self.at += 1;
        self.data[self.at - 1]
    }

    fn int(&mut self) -> usize {
        self.f().to_bits() as usize
    }

    fn seed(&mut self) -> u64 {
        let lo = self.f().to_bits() as u64;
        let hi = self.f().to_bits() as u64;
        lo | hi << 32
    }
}

const MODEL_META: usize = STAGES + 12;
const OPTIM_META: usize = 8;
const AUGMENT_META: usize = 5;
const HISTORY_COLS: usize = 5 + PARTS;

pub fn model_meta(cfg: &ModelConfig) -> Tensor<f32> {
    let mut v: Vec<f32> = cfg.stage_channels.iter().map(|&c| int(c)).collect();
    v.extend([
        int(cfg.convs_per_stage),
        int(cfg.k),
        cfg.alpha,
        cfg.beta,
        cfg.gamma,
        cfg.temperature,
        int(cfg.embed_dim),
        int(cfg.num_classes),
        int(cfg.in_channels),
        int(cfg.input_size),
    ]);
    v.extend(seed_words(cfg.seed));
    vector(v)
}

pub fn read_model_meta(ck: &Checkpoint) -> Result<ModelConfig> {
    let mut f = Fields::open(ck, "meta/model", MODEL_META)?;
    let mut stage_channels = [0; STAGES];
    stage_channels.iter_mut().for_each(|c| *c = f.int());
    let cfg = ModelConfig {
        stage_channels,
        convs_per_stage: f.int(),
        k: f.int(),
        alpha: f.f(),
        beta: f.f(),
        gamma: f.f(),
        temperature: f.f(),
        embed_dim: f.int(),
        num_classes: f.int(),
        in_channels: f.int(),
        input_size: f.int(),
        seed: f.seed(),
    };
    cfg.validate()
        .map_err(|e| Error::format(ck.offset_of(f.name).unwrap_or(0), e.to_string()))?;
    Ok(cfg)
}

fn optim_meta(cfg: &OptimConfig) -> Tensor<f32> {
    let mut v = vec![
        cfg.momentum,
        cfg.weight_decay,
        cfg.lr_backbone,
        cfg.lr_new_multiplier,
        int(cfg.epochs),
        int(cfg.batch_size),
    ];
    v.extend(seed_words(cfg.seed));
    vector(v)
}

fn read_optim_meta(ck: &Checkpoint) -> Result<OptimConfig> {
    let mut f = Fields::open(ck, "meta/optim", OPTIM_META)?;
    Ok(OptimConfig {
        momentum: f.f(),
        weight_decay: f.f(),
        lr_backbone: f.f(),
        lr_new_multiplier: f.f(),
        epochs: f.int(),
        batch_size: f.int(),
        seed: f.seed(),
    })
}

fn augment_meta(cfg: &AugmentConfig) -> Tensor<f32> {
    vector(vec![int(cfg.resize), int(cfg.crop), cfg.mean, cfg.std, cfg.flip_prob])
}

fn read_augment_meta(ck: &Checkpoint) -> Result<AugmentConfig> {
    let mut f = Fields::open(ck, "meta/augment", AUGMENT_META)?;
    Ok(AugmentConfig {
        resize: f.int(),
        crop: f.int(),
        mean: f.f(),
        std: f.f(),
        flip_prob: f.f(),
    })
}

/// Training context stored alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub state: TrainState,
}

fn push_params(ck: &mut Checkpoint, prefix: &str, params: &ParamSet<f32>) -> Result<()> {
    for p in params.iter() {
        ck.push(format!("{prefix}/{}", p.name), p.value.clone())?;
    }
    Ok(())
}

/// Copy `prefix/<name>` tensors into `params`, rejecting the first missing or
/// differently shaped tensor.
fn read_params(ck: &Checkpoint, prefix: &str, params: &mut ParamSet<f32>) -> Result<()> {
    for p in params.iter_mut() {
        let name = format!("{prefix}/{}", p.name);
        let t = ck.get(&name).ok_or_else(|| {
            Error::format(0, format!("checkpoint lacks tensor {name} of shape {:?}", p.value.shape()))
        })?;
        if t.shape() != p.value.shape() {
            return Err(Error::format(
                ck.offset_of(&name).unwrap_or(0),
                format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                ),
            ));
        }
        p.value = t.clone();
    }
    Ok(())
}

/// Load the `param/*` tensors of `ck` into an existing model.
pub fn load_params_into(model: &mut Model<f32>, ck: &Checkpoint) -> Result<()> {
    read_params(ck, "param", &mut model.params)
}

pub fn to_checkpoint(model: &Model<f32>, session: Option<&Session>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.push("meta/model", model_meta(&model.cfg))?;
    push_params(&mut ck, "param", &model.params)?;
    let Some(s) = session else { return Ok(ck) };
    ck.push("meta/optim", optim_meta(&s.optim))?;
    ck.push("meta/augment", augment_meta(&s.augment))?;
    let st = &s.state;
    ck.push(
        "state/counters",
        vector(vec![int(st.epoch), int(st.step), int(st.best_epoch), st.best_acc]),
    )?;
    for (p, v) in model.params.iter().zip(&st.velocity) {
        ck.push(format!("velocity/{}", p.name), v.clone())?;
    }
    if let Some(best) = &st.best_params {
        push_params(&mut ck, "best", best)?;
    }
    if !st.step_losses.is_empty() {
        ck.push("state/step_losses", vector(st.step_losses.clone()))?;
    }
    if !st.history.is_empty() {
        let mut rows = Vec::with_capacity(st.history.len() * HISTORY_COLS);
        for m in &st.history {
            rows.extend([int(m.epoch), m.train_loss, m.eval_acc]);
            rows.extend(m.head_acc);
            rows.extend([m.eval_loss, m.lr]);
        }
        ck.push("state/history", Tensor::new(vec![st.history.len(), HISTORY_COLS], rows)?)?;
    }
    Ok(ck)
}

/// Rebuild the model, and the training session when present.
pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Model<f32>, Option<Session>)> {
    let cfg = read_model_meta(ck)?;
    let mut model = Model::build(&cfg)?;
    load_params_into(&mut model, ck)?;
    if ck.get("meta/optim").is_none() {
        return Ok((model, None));
    }
    let optim = read_optim_meta(ck)?;
    let augment = read_augment_meta(ck)?;
    let mut c = Fields::open(ck, "state/counters", 4)?;
    let mut state = TrainState::new(&model.params);
    state.epoch = c.int();
    state.step = c.int();
    state.best_epoch = c.int();
    state.best_acc = c.f();
    let mut vel = model.params.clone();
    read_params(ck, "velocity", &mut vel)?;
    state.velocity = vel.iter().map(|p| p.value.clone()).collect();
    if ck.names().any(|n| n.starts_with("best/")) {
        let mut best = model.params.clone();
        read_params(ck, "best", &mut best)?;
        state.best_params = Some(best);
    }
    if let Some(t) = ck.get("state/step_losses") {
        state.step_losses = t.data().to_vec();
    }
    if let Some(t) = ck.get("state/history") {
        if t.ndim() != 2 || t.shape()[1] != HISTORY_COLS {
            return Err(Error::format(
                ck.offset_of("state/history").unwrap_or(0),
                format!("tensor state/history has shape {:?}", t.shape()),
            ));
        }
        state.history = t
            .data()
            .chunks(HISTORY_COLS)
            .map(|r| EpochMetrics {
                epoch: r[0].to_bits() as usize,
                train_loss: r[1],
                eval_acc: r[2],
                head_acc: [r[3], r[4], r[5]],
                eval_loss: r[6],
                lr: r[7],
            })
            .collect();
    }
    if state.step_losses.len() != state.step || state.history.len() != state.epoch {
        return Err(Error::format(0, "training counters disagree with the stored history"));
    }
    Ok((model, Some(Session { optim, augment, state })))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model<f32>, session: Option<&Session>) -> Result<()> {
    to_checkpoint(model, session)?.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model<f32>, Option<Session>)> {
    from_checkpoint(&Checkpoint::load(path)?)
}
