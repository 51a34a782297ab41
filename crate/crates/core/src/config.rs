//! Run configuration: one TOML file, every section optional, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacker::AttackerConfig;
use crate::attacks::{AttackRegistry, AttacksConfig};
use crate::backbone::BackboneConfig;
use crate::codec::CodecConfig;
use crate::embedder::{EmbedConfig, LossWeights};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, ReportConfig};
use crate::extractor::{DetectorConfig, ExtractorConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub codec: CodecConfig,
    pub embed: EmbedConfig,
    pub loss: LossWeights,
    pub extractor: ExtractorConfig,
    pub detector: DetectorConfig,
    pub attacks: AttacksConfig,
    pub attacker: AttackerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub report: ReportConfig,
}

/// 1-based line of a byte offset.
fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl RunConfig {
    /// Parses and validates. Errors carry the offending line when known.
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(src).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(sp) => Error::Config(format!("line {}: {msg}", line_of(src, sp.start))),
                None => Error::Config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&src).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The effective configuration, defaults filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.codec.targets()?;
        self.embed.validate()?;
        self.loss.validate()?;
        self.attacker.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        AttackRegistry::from_config(&self.attacks)?;
        let (l, z) = (self.codec.message_bits, self.backbone.feature_dim);
        if l == 0 {
            return Err(Error::Config("codec.message_bits must be positive".into()));
        }
        if l > z {
            return Err(Error::Config(format!(
                "codec.message_bits = {l} exceeds backbone.feature_dim = {z}; at most {z} orthonormal directions exist"
            )));
        }
        if !(0.0..=1.0).contains(&self.detector.lambda) {
            return Err(Error::Config("detector.lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_reports_line() {
        let src = "[codec]\nmessage_bits = 8\n\n[embed]\nperturb_scale = 0.1\nbogus = 1\n";
        match RunConfig::from_toml_str(src) {
            Err(Error::Config(m)) => assert!(m.starts_with("line 6"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_many_bits_is_config_error() {
        let src = "[backbone]\nfeature_dim = 8\n[codec]\nmessage_bits = 9\n";
        assert!(matches!(RunConfig::from_toml_str(src), Err(Error::Config(_))));
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.codec.message_bits = 32;
        c.train.ablation = crate::train::Ablation::FixedDirections;
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
