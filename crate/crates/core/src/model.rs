//! The assembled watermarking system: frozen encoder plus the trained parts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::attacker::{FailureMemory, Policy};
use crate::attacks::AttackRegistry;
use crate::backbone::{key_fingerprint, Backbone};
use crate::codec::{DirectionGenerator, DirectionSet, GeneratorCache, Message, ProjectionTargets};
use crate::config::RunConfig;
use crate::embedder::Embedder;
use crate::error::Result;
use crate::extractor::{ber, DetectionVerdict, Extractor};
use crate::image::Image;
use crate::seed;
use crate::train::Ablation;

#[derive(Clone, Debug)]
pub struct Watermarker {
    pub cfg: RunConfig,
    pub backbone: Backbone,
    pub generator: DirectionGenerator,
    pub embedder: Embedder,
    pub extractor: Extractor,
    pub policy: Policy,
    pub memory: FailureMemory,
    pub registry: AttackRegistry,
    pub targets: ProjectionTargets,
}

impl Watermarker {
    /// Fresh, untrained system. All initial weights come from `train.seed`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(&cfg.backbone)?;
        let (z, l, r) = (cfg.backbone.feature_dim, cfg.codec.message_bits, cfg.backbone.resolution());
        let s = cfg.train.seed;
        let registry = AttackRegistry::from_config(&cfg.attacks)?;
        let init = |k: u64| seed::rng(s, &[seed::stream::INIT, k]);
        Ok(Watermarker {
            generator: DirectionGenerator::new(z, l, &mut init(0))?,
            embedder: Embedder::new(&cfg.embed, z, r, &mut init(1))?,
            extractor: Extractor::new(&cfg.extractor, z, l, &mut init(2)),
            policy: Policy::new(z, registry.len(), cfg.attacker.hidden, &mut init(3)),
            memory: FailureMemory::new(cfg.attacker.memory_capacity),
            targets: cfg.codec.targets()?,
            registry,
            backbone,
            cfg: cfg.clone(),
        })
    }

    pub fn resolution(&self) -> usize {
        self.backbone.resolution()
    }

    pub fn message_bits(&self) -> usize {
        self.cfg.codec.message_bits
    }

    /// Directions for `key`, plus the generator cache needed to train them.
    /// The naive-embedding ablation uses the first `L` coordinate axes.
    pub fn directions_with_cache(&self, key: &str) -> Result<(DirectionSet, Option<GeneratorCache>)> {
        let fp = key_fingerprint(key);
        if self.cfg.train.ablation == Ablation::NaiveEmbedding {
            let mut d = DirectionSet::canonical(self.message_bits(), self.backbone.feature_dim())?;
            d.key_fingerprint = fp;
            return Ok((d, None));
        }
        let kf = self.backbone.encode_key(key)?;
        let (d, c) = self.generator.forward(&kf, &fp)?;
        Ok((d, Some(c)))
    }

    pub fn directions(&self, key: &str) -> Result<DirectionSet> {
        Ok(self.directions_with_cache(key)?.0)
    }

    pub fn embed(&self, img: &Image, msg: &Message, dirs: &DirectionSet) -> Result<Image> {
        self.embedder.embed(&self.backbone, img, msg, dirs, &self.targets)
    }

    pub fn extract(&self, img: &Image, dirs: &DirectionSet) -> Result<Message> {
        self.extractor.extract(&self.backbone, img, dirs)
    }

    /// BER against the reference message and the fake/genuine decision at
    /// the configured threshold.
    pub fn verify(&self, img: &Image, dirs: &DirectionSet, reference: &Message) -> Result<DetectionVerdict> {
        self.extractor.detect(&self.backbone, img, dirs, reference, self.cfg.detector.lambda)
    }

    pub fn bit_error_rate(&self, img: &Image, dirs: &DirectionSet, reference: &Message) -> Result<f64> {
        ber(&self.extract(img, dirs)?, reference)
    }
}

/// Deterministic message for the key-derived mode, so no sidecar is needed.
pub fn key_derived_message(key: &str, l: usize) -> Message {
    let h = Sha256::digest(format!("latmark-message:{key}").as_bytes());
    let mut s = [0u8; 32];
    s.copy_from_slice(&h[..32]);
    Message::random(l, &mut ChaCha8Rng::from_seed(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_derived_message_is_stable_and_keyed() {
        let a = key_derived_message("alpha", 64);
        assert_eq!(a, key_derived_message("alpha", 64));
        assert_ne!(a, key_derived_message("beta", 64));
        assert_eq!(a.len(), 64);
    }
}
