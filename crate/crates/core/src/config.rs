//! Flat `key = value` run configuration covering the model, the synthetic
//! data and training.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::extractor::ExtractorConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Synthesis settings; `seed` (key `data_seed`) is the base seed of a dataset.
    pub synth: SynthConfig,
    /// Number of pairs `synth` writes by default.
    pub samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::desk(), train: TrainConfig::default(), synth: SynthConfig::desk(0), samples: 240 }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "max_disparity" => m.max_disparity = parse(key, v)?,
            "groups" => m.groups = parse(key, v)?,
            "stem" => {
                let w: Vec<usize> = parse_list(key, v)?;
                m.extractor.stem = w.try_into().map_err(|_| Error::Config("`stem` needs three widths".into()))?;
            }
            "encoder" => m.extractor.encoder = parse_list(key, v)?,
            "decoder" => m.extractor.decoder = parse(key, v)?,
            "depth" => m.depth = parse(key, v)?,
            "disparity_stride" => m.disparity_stride = parse(key, v)?,
            "gwc" => m.gwc = parse_bool(key, v)?,
            "atrous" => m.atrous = parse_bool(key, v)?,
            "image_branch" => m.image_branch = parse_bool(key, v)?,
            "light_final" => m.light_final = parse_bool(key, v)?,
            "height" => s.height = parse(key, v)?,
            "width" => s.width = parse(key, v)?,
            "shapes_min" => s.shapes.0 = parse(key, v)?,
            "shapes_max" => s.shapes.1 = parse(key, v)?,
            "disparities" => s.disparities = parse_list(key, v)?,
            "noise" => s.noise = parse(key, v)?,
            "data_seed" => s.seed = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "lr_halve_epochs" => t.lr_halve_epochs = parse_list(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "val_count" => t.val_count = parse(key, v)?,
            "chromatic_strength" => t.chromatic_strength = parse(key, v)?,
            "asymmetric_prob" => t.asymmetric_prob = parse(key, v)?,
            "occlusion_prob" => t.occlusion_prob = parse(key, v)?,
            "occlusion_min" => t.occlusion_side.0 = parse(key, v)?,
            "occlusion_max" => t.occlusion_side.1 = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        let mut synth = self.synth.clone();
        synth.max_disparity = self.model.max_disparity;
        synth.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Synthesis settings for sample `index` of a dataset with this config.
    pub fn synth_for(&self, index: usize) -> SynthConfig {
        SynthConfig {
            max_disparity: self.model.max_disparity,
            seed: self.synth.seed.wrapping_mul(1_000_003).wrapping_add(index as u64),
            ..self.synth.clone()
        }
    }

    /// Every key with its value, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let (m, t, s) = (&self.model, &self.train, &self.synth);
        let ExtractorConfig { stem, encoder, decoder } = &m.extractor;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("max_disparity", m.max_disparity.to_string());
        kv("groups", m.groups.to_string());
        kv("stem", join(stem));
        kv("encoder", join(encoder));
        kv("decoder", decoder.to_string());
        kv("depth", m.depth.to_string());
        kv("disparity_stride", m.disparity_stride.to_string());
        kv("gwc", m.gwc.to_string());
        kv("atrous", m.atrous.to_string());
        kv("image_branch", m.image_branch.to_string());
        kv("light_final", m.light_final.to_string());
        kv("height", s.height.to_string());
        kv("width", s.width.to_string());
        kv("shapes_min", s.shapes.0.to_string());
        kv("shapes_max", s.shapes.1.to_string());
        kv("disparities", join(&s.disparities));
        kv("noise", s.noise.to_string());
        kv("data_seed", s.seed.to_string());
        kv("samples", self.samples.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("lr_halve_epochs", join(&t.lr_halve_epochs));
        kv("clip_norm", t.clip_norm.to_string());
        kv("seed", t.seed.to_string());
        kv("val_count", t.val_count.to_string());
        kv("chromatic_strength", t.chromatic_strength.to_string());
        kv("asymmetric_prob", t.asymmetric_prob.to_string());
        kv("occlusion_prob", t.occlusion_prob.to_string());
        kv("occlusion_min", t.occlusion_side.0.to_string());
        kv("occlusion_max", t.occlusion_side.1.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_and_comments() {
        let cfg = RunConfig::parse("# desk run\nepochs = 3 # short\nlr_halve_epochs = 1, 2\ngwc = off\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr_halve_epochs, vec![1, 2]);
        assert!(!cfg.model.gwc);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        match RunConfig::parse("epochs = 3\nlearning_rate = 0.1\n") {
            Err(Error::Config(msg)) => assert!(msg.contains("line 2") && msg.contains("learning_rate"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
