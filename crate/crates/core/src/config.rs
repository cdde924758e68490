//! Run configuration: a flat TOML key/value file whose keys are exactly the
//! field names of [`RunConfig`], with same-named command-line overrides.
//!
//! Resolution order: built-in defaults (or the desk-scale profile when
//! `desk_scale = true`), then the file, then overrides. Unknown keys are
//! errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::{CfTarget, LossWeights};
use crate::net::{ChainMode, CriticSpec, GeneratorSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    #[serde(rename = "lambda_cF")]
    pub lambda_cf: f64,
    #[serde(rename = "lambda_F")]
    pub lambda_f: f64,
    #[serde(rename = "lambda_pF")]
    pub lambda_pf: f64,
    pub lambda_adv: f64,
    #[serde(rename = "cF_target")]
    pub cf_target: CfTarget,
    pub critic_steps_per_gen_step: usize,
    pub clip_value: f64,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    pub checkpoint_every: u64,
    /// Write a sample grid every this many epochs (0 disables).
    pub sample_every: u64,
    pub desk_scale: bool,
    pub gen_depth: usize,
    pub gen_base_channels: usize,
    pub critic_depth: usize,
    pub critic_base_channels: usize,
    pub hole_channel: bool,
    /// `vgg16` or `compact`.
    pub feature_net: String,
    /// Pretrained extractor weights; random fixed weights when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vgg_weights: Option<PathBuf>,
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            image_size: 256,
            batch_size: 5,
            epochs: 100,
            lr_g: 1e-4,
            lr_d: 1e-12,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            lambda_cf: w.lambda_cf,
            lambda_f: w.lambda_f,
            lambda_pf: w.lambda_pf,
            lambda_adv: w.lambda_adv,
            cf_target: CfTarget::MaskedInput,
            critic_steps_per_gen_step: 1,
            clip_value: 0.01,
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            resume: None,
            checkpoint_every: 1000,
            sample_every: 1,
            desk_scale: false,
            gen_depth: 5,
            gen_base_channels: 64,
            critic_depth: 4,
            critic_base_channels: 64,
            hole_channel: false,
            feature_net: "vgg16".into(),
            vgg_weights: None,
            test_fraction: 0.1,
        }
    }
}

impl RunConfig {
    /// Laptop-sized profile: 64×64 images, depth-4 networks with 32 base
    /// channels, a compact extractor and equal learning rates so the critic
    /// actually trains.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            batch_size: 4,
            lr_d: 1e-4,
            checkpoint_every: 100,
            desk_scale: true,
            gen_depth: 4,
            gen_base_channels: 32,
            critic_depth: 4,
            critic_base_channels: 32,
            feature_net: "compact".into(),
            ..Self::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cf: self.lambda_cf,
            lambda_f: self.lambda_f,
            lambda_pf: self.lambda_pf,
            lambda_adv: self.lambda_adv,
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            depth: self.gen_depth,
            base_channels: self.gen_base_channels,
            input_channels: 3,
            hole_channel: self.hole_channel,
            chain_mode: ChainMode::Add,
        }
    }

    pub fn critic_spec(&self) -> CriticSpec {
        CriticSpec {
            depth: self.critic_depth,
            base_channels: self.critic_base_channels,
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return err("learning rates must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.critic_steps_per_gen_step == 0 {
            return err("critic_steps_per_gen_step must be at least 1".into());
        }
        if !(self.clip_value > 0.0) {
            return err("clip_value must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("adam betas must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return err("test_fraction must lie in [0, 1)".into());
        }
        if !matches!(self.feature_net.as_str(), "vgg16" | "compact") {
            return err(format!("feature_net `{}` is not vgg16 or compact", self.feature_net));
        }
        self.loss_weights().validate()?;
        let g = self.generator_spec();
        g.validate()?;
        g.check_input(self.image_size, self.image_size)?;
        let c = self.critic_spec();
        c.validate()?;
        c.check_input(self.image_size, self.image_size)?;
        Ok(())
    }

    /// Resolves defaults, a config file and `(key, raw value)` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let file_table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut override_table = toml::Table::new();
        for (k, raw) in overrides {
            override_table.insert(k.clone(), parse_scalar(raw));
        }
        let desk = override_table
            .get("desk_scale")
            .or_else(|| file_table.get("desk_scale"))
            .map(|v| {
                v.as_bool()
                    .ok_or_else(|| Error::Config("desk_scale must be true or false".into()))
            })
            .transpose()?
            .unwrap_or(false);
        let base = if desk { Self::desk() } else { Self::default() };
        let mut merged = toml::Table::try_from(&base)
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        for (k, v) in file_table.into_iter().chain(override_table) {
            let v = match (merged.get(&k), v) {
                (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            merged.insert(k, v);
        }
        merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Interprets a command-line value as a TOML scalar, falling back to a
/// string.
fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Splits `--key value`, `--key=value` and bare `--flag` tokens into pairs.
/// Dashes inside keys become underscores.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let tok = &args[i];
        let Some(body) = tok.strip_prefix("--") else {
            return Err(Error::Config(format!("expected --key, found `{tok}`")));
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => match args.get(i + 1) {
                Some(next) if !next.starts_with("--") => {
                    i += 1;
                    (body.to_string(), next.clone())
                }
                _ => (body.to_string(), "true".to_string()),
            },
        };
        out.push((key.replace('-', "_"), value));
        i += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(xs: &[(&str, &str)]) -> Vec<(String, String)> {
        xs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn default_values() {
        let c = RunConfig::default();
        assert_eq!(c.batch_size, 5);
        assert_eq!(c.epochs, 100);
        assert_eq!(c.lr_g, 1e-4);
        assert_eq!(c.lr_d, 1e-12);
        assert_eq!((c.beta1, c.beta2), (0.9, 0.999));
        c.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "desk_scale = true\nlr_g = 1\nseed = 7\nlambda_F = 5.0\n").unwrap();
        let c = RunConfig::resolve(Some(&p), &pairs(&[("seed", "9"), ("out_dir", "runs/x")])).unwrap();
        assert_eq!(c.image_size, 64);
        assert_eq!(c.lr_g, 1.0);
        assert_eq!(c.seed, 9);
        assert_eq!(c.lambda_f, 5.0);
        assert_eq!(c.out_dir, PathBuf::from("runs/x"));
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(
            RunConfig::resolve(None, &pairs(&[("learning_rate", "0.1")])),
            Err(Error::Config(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "bogus = 1\n").unwrap();
        assert!(RunConfig::resolve(Some(&p), &[]).is_err());
    }

    #[test]
    fn override_tokenizing() {
        let args: Vec<String> = ["--lr-d", "1e-4", "--desk_scale", "--cF_target=ground_truth", "--seed", "3"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let kv = parse_override_args(&args).unwrap();
        assert_eq!(
            kv,
            pairs(&[("lr_d", "1e-4"), ("desk_scale", "true"), ("cF_target", "ground_truth"), ("seed", "3")])
        );
        let c = RunConfig::resolve(None, &kv).unwrap();
        assert_eq!(c.lr_d, 1e-4);
        assert_eq!(c.cf_target, CfTarget::GroundTruth);
        assert!(c.desk_scale);
        assert!(parse_override_args(&["seed".to_string()]).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let c = RunConfig {
            image_size: 72,
            ..RunConfig::desk()
        };
        assert!(c.validate().is_err());
        let c = RunConfig {
            lr_d: 0.0,
            ..RunConfig::desk()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let c = RunConfig::desk();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.hash(), back.hash());
        assert_ne!(c.hash(), RunConfig::default().hash());
    }
}
