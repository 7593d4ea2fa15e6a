//! Flat `key = value` configuration covering the model and the training run.
//!
//! Keys are dotted paths (`model.trace.max_len`, `optim.lr`); `#` starts a
//! comment. Unknown keys are errors.

use std::fmt::Display;
use std::str::FromStr;

use crate::energy::GradientMode;
use crate::error::{Error, Result};
use crate::network::{ModelConfig, PgmVariant, TasbVariant};
use crate::ssm::Discretization;
use crate::training::{LossConfig, OptimizerKind};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

fn choice<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        Error::config(format!("`{key}`: `{v}` is not one of {}", names.join(", ")))
    })
}

fn name_of<T: PartialEq>(t: T, options: &[(&'static str, T)]) -> &'static str {
    options.iter().find(|(_, o)| *o == t).map(|(n, _)| *n).expect("every variant is named")
}

const GRADIENT_MODES: [(&str, GradientMode); 2] = [("central", GradientMode::Central), ("sobel", GradientMode::Sobel)];
const DISCRETIZATIONS: [(&str, Discretization); 2] = [("euler", Discretization::Euler), ("zoh", Discretization::Zoh)];
const TASB_VARIANTS: [(&str, TasbVariant); 3] = [
    ("tasb", TasbVariant::Tasb),
    ("resblock", TasbVariant::ResBlock),
    ("bottleneck", TasbVariant::Bottleneck),
];
const PGM_VARIANTS: [(&str, PgmVariant); 3] = [
    ("energy", PgmVariant::EnergyOnly),
    ("energy_traj", PgmVariant::EnergyTraj),
    ("full", PgmVariant::Full),
];
const OPTIMIZERS: [(&str, OptimizerKind); 2] = [("adam", OptimizerKind::Adam), ("momentum", OptimizerKind::Momentum)];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", ln + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let l = &mut self.loss;
        let o = &mut l.optimizer;
        match key {
            "model.height" => m.height = num(key, v)?,
            "model.width" => m.width = num(key, v)?,
            "model.channels" => {
                let parts: Vec<usize> = v.split(',').map(|p| num(key, p.trim())).collect::<Result<_>>()?;
                m.channels = parts
                    .try_into()
                    .map_err(|_| Error::config(format!("`{key}` needs four comma-separated widths")))?;
            }
            "model.blocks_per_stage" => m.blocks_per_stage = num(key, v)?,
            "model.sentences" => m.sentences = num(key, v)?,
            "model.words" => m.words = num(key, v)?,
            "model.token_channels" => m.token_channels = num(key, v)?,
            "model.seeds.k_max" => m.seeds.k_max = num(key, v)?,
            "model.seeds.min_energy_frac" => m.seeds.min_energy_frac = num(key, v)?,
            "model.seeds.nms_radius" => m.seeds.nms_radius = num(key, v)?,
            "model.trace.eta" => m.trace.eta = num(key, v)?,
            "model.trace.epsilon" => m.trace.epsilon = num(key, v)?,
            "model.trace.max_len" => m.trace.max_len = num(key, v)?,
            "model.trace.decay_ratio" => m.trace.decay_ratio = num(key, v)?,
            "model.gradient_mode" => m.gradient_mode = choice(key, v, &GRADIENT_MODES)?,
            "model.ss2d.ratio" => m.ss2d.bottleneck.ratio = num(key, v)?,
            "model.ss2d.d_state" => m.ss2d.bottleneck.d_state = num(key, v)?,
            "model.ss2d.discretization" => m.ss2d.bottleneck.scan.discretization = choice(key, v, &DISCRETIZATIONS)?,
            "model.ss2d.selective" => m.ss2d.bottleneck.scan.selective = flag(key, v)?,
            "model.ss2d.share_directions" => m.ss2d.share_directions = flag(key, v)?,
            "model.use_pgm" => m.use_pgm = flag(key, v)?,
            "model.use_tasb" => m.use_tasb = flag(key, v)?,
            "model.tasb_variant" => m.tasb_variant = choice(key, v, &TASB_VARIANTS)?,
            "model.pgm_variant" => m.pgm_variant = choice(key, v, &PGM_VARIANTS)?,
            "loss.alpha" => l.alpha = num(key, v)?,
            "loss.beta" => l.beta = num(key, v)?,
            "train.epochs" => l.epochs = num(key, v)?,
            "train.batch_size" => l.batch_size = num(key, v)?,
            "train.seed" => l.seed = num(key, v)?,
            "optim.kind" => o.kind = choice(key, v, &OPTIMIZERS)?,
            "optim.lr" => o.lr = num(key, v)?,
            "optim.beta1" => o.beta1 = num(key, v)?,
            "optim.beta2" => o.beta2 = num(key, v)?,
            "optim.eps" => o.eps = num(key, v)?,
            "optim.momentum" => o.momentum = num(key, v)?,
            "optim.weight_decay" => o.weight_decay = num(key, v)?,
            "optim.clip_norm" => o.clip_norm = if v == "none" { None } else { Some(num(key, v)?) },
            "optim.cosine" => o.cosine = flag(key, v)?,
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let l = &self.loss;
        let o = &l.optimizer;
        let c = m.channels;
        vec![
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.channels", format!("{},{},{},{}", c[0], c[1], c[2], c[3])),
            ("model.blocks_per_stage", m.blocks_per_stage.to_string()),
            ("model.sentences", m.sentences.to_string()),
            ("model.words", m.words.to_string()),
            ("model.token_channels", m.token_channels.to_string()),
            ("model.seeds.k_max", m.seeds.k_max.to_string()),
            ("model.seeds.min_energy_frac", m.seeds.min_energy_frac.to_string()),
            ("model.seeds.nms_radius", m.seeds.nms_radius.to_string()),
            ("model.trace.eta", m.trace.eta.to_string()),
            ("model.trace.epsilon", m.trace.epsilon.to_string()),
            ("model.trace.max_len", m.trace.max_len.to_string()),
            ("model.trace.decay_ratio", m.trace.decay_ratio.to_string()),
            ("model.gradient_mode", name_of(m.gradient_mode, &GRADIENT_MODES).into()),
            ("model.ss2d.ratio", m.ss2d.bottleneck.ratio.to_string()),
            ("model.ss2d.d_state", m.ss2d.bottleneck.d_state.to_string()),
            ("model.ss2d.discretization", name_of(m.ss2d.bottleneck.scan.discretization, &DISCRETIZATIONS).into()),
            ("model.ss2d.selective", m.ss2d.bottleneck.scan.selective.to_string()),
            ("model.ss2d.share_directions", m.ss2d.share_directions.to_string()),
            ("model.use_pgm", m.use_pgm.to_string()),
            ("model.use_tasb", m.use_tasb.to_string()),
            ("model.tasb_variant", name_of(m.tasb_variant, &TASB_VARIANTS).into()),
            ("model.pgm_variant", name_of(m.pgm_variant, &PGM_VARIANTS).into()),
            ("loss.alpha", l.alpha.to_string()),
            ("loss.beta", l.beta.to_string()),
            ("train.epochs", l.epochs.to_string()),
            ("train.batch_size", l.batch_size.to_string()),
            ("train.seed", l.seed.to_string()),
            ("optim.kind", name_of(o.kind, &OPTIMIZERS).into()),
            ("optim.lr", o.lr.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.momentum", o.momentum.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("optim.clip_norm", o.clip_norm.map_or("none".into(), |c| c.to_string())),
            ("optim.cosine", o.cosine.to_string()),
        ]
    }

    /// Canonical text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Model text only, as stored in checkpoints.
    pub fn model_text(&self) -> String {
        self.entries()
            .iter()
            .filter(|(k, _)| k.starts_with("model."))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut c = RunConfig::default();
        c.set("model.channels", "16, 32, 64, 64").unwrap();
        c.set("optim.lr", "0.00037").unwrap();
        c.set("optim.clip_norm", "none").unwrap();
        c.set("model.pgm_variant", "energy_traj").unwrap();
        c.set("model.ss2d.discretization", "zoh").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_blank_lines_and_errors() {
        let c = RunConfig::parse("# header\n\nloss.beta = 0.25 # aux\ntrain.epochs=3\n").unwrap();
        assert_eq!((c.loss.beta, c.loss.epochs), (0.25, 3));
        for bad in ["nope = 1", "model.height = big", "model.use_pgm = maybe", "model.channels = 1,2", "just words"] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn every_key_is_settable() {
        let c = RunConfig::default();
        let mut d = RunConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
    }
}
