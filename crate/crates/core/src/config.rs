//! Flat `section.key = value` run configuration.

use std::fmt::{Display, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::synth::{Background, ShapeKind};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::infer::InferMode;
use crate::metrics::{Conventions, FAggregation};
use crate::model::ModelConfig;
use crate::tensor::BetaConvention;
use crate::train::TrainConfig;

pub const RESOLVED_NAME: &str = "config.resolved.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalConfig {
    pub conventions: Conventions,
    pub aggregation: FAggregation,
    pub mode: InferMode,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: SynthConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got `{value}`"
        ))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_pair<T: FromStr + Copy>(key: &str, value: &str) -> Result<[T; 2]> {
    match parse_list::<T>(key, value)?.as_slice() {
        [a] => Ok([*a, *a]),
        [a, b] => Ok([*a, *b]),
        _ => Err(Error::Config(format!(
            "{key}: expected one or two values, got `{value}`"
        ))),
    }
}

fn parse_beta(key: &str, value: &str) -> Result<BetaConvention> {
    match value {
        "foreground-fraction" => Ok(BetaConvention::ForegroundFraction),
        "background-fraction" => Ok(BetaConvention::BackgroundFraction),
        _ => Err(Error::Config(format!(
            "{key}: expected foreground-fraction or background-fraction, got `{value}`"
        ))),
    }
}

fn beta_name(b: BetaConvention) -> &'static str {
    match b {
        BetaConvention::ForegroundFraction => "foreground-fraction",
        BetaConvention::BackgroundFraction => "background-fraction",
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `section.key = value`", i + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(e))))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let b = &mut self.model.backbone;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "backbone.levels" => b.levels = parse(key, v)?,
            "backbone.convs_per_level" => b.convs_per_level = parse_list(key, v)?,
            "backbone.channels_per_level" => b.channels_per_level = parse_list(key, v)?,
            "backbone.kernel_size" => b.kernel_size = parse(key, v)?,
            "backbone.input_size" => b.input_size = parse_pair(key, v)?,
            "rfc.per_level_channels" => self.model.rfc.per_level_channels = parse(key, v)?,
            "rfc.combined_channels" => self.model.rfc.combined_channels = parse(key, v)?,
            "heads.variant" => self.model.heads.variant = v.parse()?,
            "heads.bpr" => self.model.heads.bpr = parse_bool(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.max_iters" => t.max_iters = parse(key, v)?,
            "train.lr_decay_factor" => t.lr_decay_factor = parse(key, v)?,
            "train.plateau_window" => t.plateau_window = parse(key, v)?,
            "train.plateau_threshold" => t.plateau_threshold = parse(key, v)?,
            "train.min_lr" => t.min_lr = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.alpha_f" => t.alpha_f = parse(key, v)?,
            "train.alpha_l" => t.alpha_l = parse(key, v)?,
            "train.beta" => t.beta = parse_beta(key, v)?,
            "train.log_eps" => t.log_eps = parse(key, v)?,
            "train.augment" => t.augment = parse_bool(key, v)?,
            "train.normalize_loss" => t.normalize_loss = parse_bool(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "eval.empty_precision" => self.eval.conventions.empty_precision = parse(key, v)?,
            "eval.empty_recall" => self.eval.conventions.empty_recall = parse(key, v)?,
            "eval.f_aggregation" => self.eval.aggregation = v.parse()?,
            "eval.mode" => self.eval.mode = v.parse()?,
            "data.count" => d.count = parse(key, v)?,
            "data.size" => d.size = parse(key, v)?,
            "data.shapes" => d.shapes = parse_list::<ShapeKind>(key, v)?,
            "data.contrast_range" => d.contrast_range = parse_pair(key, v)?,
            "data.backgrounds" => d.backgrounds = parse_list::<Background>(key, v)?,
            "data.multi_object_prob" => d.multi_object_prob = parse(key, v)?,
            "data.boundary_touch_prob" => d.boundary_touch_prob = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        let c = &self.eval.conventions;
        for (k, v) in [
            ("eval.empty_precision", c.empty_precision),
            ("eval.empty_recall", c.empty_recall),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{k} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Every key with its effective value, parseable by [`RunConfig::parse`].
    pub fn resolved(&self) -> String {
        let b = &self.model.backbone;
        let t = &self.train;
        let d = &self.data;
        let entries: Vec<(&str, String)> = vec![
            ("backbone.levels", b.levels.to_string()),
            ("backbone.convs_per_level", join(&b.convs_per_level)),
            ("backbone.channels_per_level", join(&b.channels_per_level)),
            ("backbone.kernel_size", b.kernel_size.to_string()),
            ("backbone.input_size", join(&b.input_size)),
            (
                "rfc.per_level_channels",
                self.model.rfc.per_level_channels.to_string(),
            ),
            (
                "rfc.combined_channels",
                self.model.rfc.combined_channels.to_string(),
            ),
            ("heads.variant", self.model.heads.variant.to_string()),
            ("heads.bpr", self.model.heads.bpr.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.max_iters", t.max_iters.to_string()),
            ("train.lr_decay_factor", t.lr_decay_factor.to_string()),
            ("train.plateau_window", t.plateau_window.to_string()),
            ("train.plateau_threshold", t.plateau_threshold.to_string()),
            ("train.min_lr", t.min_lr.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.alpha_f", t.alpha_f.to_string()),
            ("train.alpha_l", t.alpha_l.to_string()),
            ("train.beta", beta_name(t.beta).to_string()),
            ("train.log_eps", t.log_eps.to_string()),
            ("train.augment", t.augment.to_string()),
            ("train.normalize_loss", t.normalize_loss.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            (
                "eval.empty_precision",
                self.eval.conventions.empty_precision.to_string(),
            ),
            (
                "eval.empty_recall",
                self.eval.conventions.empty_recall.to_string(),
            ),
            ("eval.f_aggregation", self.eval.aggregation.to_string()),
            ("eval.mode", self.eval.mode.to_string()),
            ("data.count", d.count.to_string()),
            ("data.size", d.size.to_string()),
            ("data.shapes", join(&d.shapes)),
            ("data.contrast_range", join(&d.contrast_range)),
            ("data.backgrounds", join(&d.backgrounds)),
            ("data.multi_object_prob", d.multi_object_prob.to_string()),
            (
                "data.boundary_touch_prob",
                d.boundary_touch_prob.to_string(),
            ),
            ("data.seed", d.seed.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, self.resolved()).map_err(|e| Error::io(&path, e))
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn defaults_round_trip_through_resolved_echo() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.resolved()).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# desk run\n\
                    train.lr = 0.005  # halved\n\
                    heads.variant = amulet-1/4\n\
                    heads.bpr = false\n\
                    backbone.input_size = 32\n\
                    data.shapes = disc, ring\n\
                    train.beta = background-fraction\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.lr, 0.005);
        assert_eq!(cfg.model.heads.variant, Variant { min_stride: 4 });
        assert!(!cfg.model.heads.bpr);
        assert_eq!(cfg.model.backbone.input_size, [32, 32]);
        assert_eq!(cfg.data.shapes, vec![ShapeKind::Disc, ShapeKind::Ring]);
        assert_eq!(cfg.train.beta, BetaConvention::BackgroundFraction);
        assert_eq!(RunConfig::parse(&cfg.resolved()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let err = RunConfig::parse("train.lr = 0.1\ntrain.lrr = 0.1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2") && err.contains("train.lrr"), "{err}");
    }

    #[test]
    fn malformed_values_are_rejected() {
        assert!(RunConfig::parse("train.lr = fast").is_err());
        assert!(RunConfig::parse("heads.bpr = maybe").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("backbone.levels = 4").is_err());
        assert!(RunConfig::parse("eval.empty_precision = 2").is_err());
    }
}
