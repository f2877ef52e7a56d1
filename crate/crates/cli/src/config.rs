//! `key=value` run configuration shared by every subcommand.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fbsd::data::{AugmentConfig, SynthSpec};
use fbsd::model::{ModelConfig, STAGES};
use fbsd::train::OptimConfig;

/// A configuration problem, reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub synth: SynthSpec,
    /// Seeds trained per ablation variant.
    pub seeds: Vec<u64>,
    /// Samples held out for evaluation when no separate eval set is given.
    /// Zero holds out a third of the data.
    pub holdout: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            synth: SynthSpec::default(),
            seeds: vec![0, 1, 2],
            holdout: 0,
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key with its current value, in `key=value` form.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, o, a, s) = (&self.model, &self.optim, &self.augment, &self.synth);
        vec![
            ("seed", m.seed.to_string()),
            ("stage_channels", join(&m.stage_channels)),
            ("convs_per_stage", m.convs_per_stage.to_string()),
            ("k", m.k.to_string()),
            ("alpha", m.alpha.to_string()),
            ("beta", m.beta.to_string()),
            ("gamma", m.gamma.to_string()),
            ("temperature", m.temperature.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("input_size", m.input_size.to_string()),
            ("momentum", o.momentum.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("lr_backbone", o.lr_backbone.to_string()),
            ("lr_new_multiplier", o.lr_new_multiplier.to_string()),
            ("epochs", o.epochs.to_string()),
            ("batch_size", o.batch_size.to_string()),
            ("resize", a.resize.to_string()),
            ("crop", a.crop.to_string()),
            ("norm_mean", a.mean.to_string()),
            ("norm_std", a.std.to_string()),
            ("flip_prob", a.flip_prob.to_string()),
            ("image_size", s.size.to_string()),
            ("background", s.background.to_string()),
            ("contrast", s.contrast.to_string()),
            ("noise", s.noise.to_string()),
            ("jitter", s.jitter.to_string()),
            ("synth_seed", s.seed.to_string()),
            ("seeds", join(&self.seeds)),
            ("holdout", self.holdout.to_string()),
        ]
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    /// Assign one key. `Err` carries a description without location.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let bad = || format!("malformed value {v:?} for key {key}");
        macro_rules! parse {
            ($field:expr) => {
                $field = v.parse().map_err(|_| bad())?
            };
        }
        match key {
            "seed" => {
                parse!(self.model.seed);
                self.optim.seed = self.model.seed;
            }
            "stage_channels" => {
                let c: Vec<usize> = list(v).ok_or_else(bad)?;
                self.model.stage_channels = c
                    .try_into()
                    .map_err(|_| format!("stage_channels needs {STAGES} values"))?;
            }
            "convs_per_stage" => parse!(self.model.convs_per_stage),
            "k" => parse!(self.model.k),
            "alpha" => parse!(self.model.alpha),
            "beta" => parse!(self.model.beta),
            "gamma" => parse!(self.model.gamma),
            "temperature" => parse!(self.model.temperature),
            "embed_dim" => parse!(self.model.embed_dim),
            "num_classes" => {
                parse!(self.model.num_classes);
                self.synth.num_classes = self.model.num_classes;
            }
            "input_size" => parse!(self.model.input_size),
            "momentum" => parse!(self.optim.momentum),
            "weight_decay" => parse!(self.optim.weight_decay),
            "lr_backbone" => parse!(self.optim.lr_backbone),
            "lr_new_multiplier" => parse!(self.optim.lr_new_multiplier),
            "epochs" => parse!(self.optim.epochs),
            "batch_size" => parse!(self.optim.batch_size),
            "resize" => parse!(self.augment.resize),
            "crop" => parse!(self.augment.crop),
            "norm_mean" => parse!(self.augment.mean),
            "norm_std" => parse!(self.augment.std),
            "flip_prob" => parse!(self.augment.flip_prob),
            "image_size" => parse!(self.synth.size),
            "background" => parse!(self.synth.background),
            "contrast" => parse!(self.synth.contrast),
            "noise" => parse!(self.synth.noise),
            "jitter" => parse!(self.synth.jitter),
            "synth_seed" => parse!(self.synth.seed),
            "seeds" => self.seeds = list(v).filter(|s: &Vec<u64>| !s.is_empty()).ok_or_else(bad)?,
            "holdout" => parse!(self.holdout),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Apply `key=value` lines; `#` starts a comment, later keys win.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!("{origin}:{}: expected key=value, got {line:?}", n + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| ConfigError(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), ConfigError> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("--set expects key=value, got {s:?}")))?;
            self.set(k.trim(), v).map_err(|e| ConfigError(format!("--set: {e}")))?;
        }
        Ok(())
    }

    /// Check every value against its domain; the message names the key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let named = |what: &str, r: fbsd::Result<()>| r.map_err(|e| ConfigError(format!("{what}: {e}")));
        named("model", self.model.validate())?;
        named("optimiser", self.optim.validate())?;
        named("augmentation", self.augment.validate())?;
        named("synthetic data", self.synth.validate())?;
        if self.augment.crop != self.model.input_size {
            return Err(ConfigError(format!(
                "crop={} must equal input_size={}",
                self.augment.crop, self.model.input_size
            )));
        }
        Ok(())
    }

    /// Defaults, then `file`, then `--set` overrides, then validation.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(p) = file {
            let text = fs::read_to_string(p)
                .map_err(|e| ConfigError(format!("cannot read {}: {e}", p.display())))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        cfg.apply_overrides(sets)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let mut c = RunConfig::default();
        c.apply_text("# nothing here\n\n", "t").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn defaults_roundtrip_through_render() {
        let mut c = RunConfig::default();
        c.apply_text(&RunConfig::default().render(), "t").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(RunConfig::default().render().contains("alpha=0.5\n"));
    }

    #[test]
    fn later_keys_win_and_comments_are_ignored() {
        let mut c = RunConfig::default();
        c.apply_text("alpha=0.1\nalpha=0.7 # boost\n", "t").unwrap();
        assert_eq!(c.model.alpha, 0.7);
    }

    #[test]
    fn unknown_and_malformed_keys_name_the_line() {
        let mut c = RunConfig::default();
        let e = c.apply_text("alpha=0.5\nbogus=1\n", "f.cfg").unwrap_err();
        assert!(e.0.contains("f.cfg:2") && e.0.contains("bogus"), "{e}");
        let e = c.apply_text("epochs=many\n", "f.cfg").unwrap_err();
        assert!(e.0.contains("f.cfg:1") && e.0.contains("epochs"), "{e}");
    }

    #[test]
    fn out_of_domain_beta_is_rejected() {
        let mut c = RunConfig::default();
        c.apply_text("beta=1.5\n", "t").unwrap();
        assert!(c.validate().unwrap_err().0.contains("beta"));
    }
}
