//! Message recovery from direction projections and the BER verdict.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, LatentFeature};
use crate::codec::{self, DirectionSet, Message};
use crate::error::{shape_check, Error, Result};
use crate::image::Image;
use crate::nn::{self, Act, Linear, Params, SkipMlp, SkipMlpCache, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorArch {
    /// MLP over the `L` direction projections.
    Projection,
    /// MLP over a learned 128-D compression of the raw feature.
    Compressed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub arch: ExtractorArch,
    pub hidden: usize,
    /// Initial gain of the projection skip path (`logits = gain * p` at init).
    pub skip_gain: f64,
    pub compressed_dim: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { arch: ExtractorArch::Projection, hidden: 256, skip_gain: 20.0, compressed_dim: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub lambda: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { lambda: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Extractor {
    Projection { mlp: SkipMlp },
    Compressed { proj: Linear, l1: Linear, l2: Linear },
}

pub enum ExtractCache {
    Projection { p: Vec<f64>, feature: Vec<f64>, mlp: SkipMlpCache },
    Compressed { feature: Vec<f64>, c: Vec<f64>, pre: Vec<f64>, h: Vec<f64> },
}

impl Extractor {
    pub fn new(cfg: &ExtractorConfig, zeta: usize, l: usize, rng: &mut ChaCha8Rng) -> Self {
        match cfg.arch {
            ExtractorArch::Projection => {
                let g = cfg.skip_gain;
                Extractor::Projection {
                    mlp: SkipMlp::new(l, cfg.hidden, l, Act::Gelu, rng, |r, c| if r == c { g } else { 0.0 }),
                }
            }
            ExtractorArch::Compressed => Extractor::Compressed {
                proj: Linear::new(zeta, cfg.compressed_dim, rng),
                l1: Linear::new(cfg.compressed_dim, cfg.hidden, rng),
                l2: Linear::new(cfg.hidden, l, rng),
            },
        }
    }

    /// Logits for a feature under a direction set.
    pub fn forward(&self, feature: &[f64], dirs: &DirectionSet) -> Result<(Vec<f64>, ExtractCache)> {
        shape_check("feature vs directions", feature.len(), dirs.zeta)?;
        Ok(match self {
            Extractor::Projection { mlp } => {
                shape_check("extractor width", mlp.l1.inp(), dirs.l)?;
                let p = dirs.project_raw(feature);
                let (y, c) = mlp.forward(&p);
                (y, ExtractCache::Projection { p, feature: feature.to_vec(), mlp: c })
            }
            Extractor::Compressed { proj, l1, l2 } => {
                let c = proj.forward(feature);
                let pre = l1.forward(&c);
                let h: Vec<f64> = pre.iter().map(|&v| Act::Gelu.f(v)).collect();
                let y = l2.forward(&h);
                shape_check("extractor width", y.len(), dirs.l)?;
                (y, ExtractCache::Compressed { feature: feature.to_vec(), c, pre, h })
            }
        })
    }

    /// Accumulates parameter gradients and returns (d feature, d direction rows).
    pub fn backward(
        &self,
        cache: &ExtractCache,
        dirs: &DirectionSet,
        dlogits: &[f64],
        g: &mut Extractor,
    ) -> (Vec<f64>, Vec<f64>) {
        match (self, cache, g) {
            (Extractor::Projection { mlp }, ExtractCache::Projection { feature, mlp: c, .. }, Extractor::Projection { mlp: gm }) => {
                let dp = mlp.backward(c, dlogits, gm);
                let df = dirs.combine(&dp);
                let mut dd = vec![0.0; dirs.l * dirs.zeta];
                for (i, &d) in dp.iter().enumerate() {
                    for (o, f) in dd[i * dirs.zeta..(i + 1) * dirs.zeta].iter_mut().zip(feature) {
                        *o += d * f;
                    }
                }
                (df, dd)
            }
            (
                Extractor::Compressed { proj, l1, l2 },
                ExtractCache::Compressed { feature, c, pre, h },
                Extractor::Compressed { proj: gp, l1: g1, l2: g2 },
            ) => {
                let dh = l2.backward(h, dlogits, g2);
                let dpre: Vec<f64> = dh.iter().zip(pre).map(|(d, p)| d * Act::Gelu.df(*p)).collect();
                let dc = l1.backward(c, &dpre, g1);
                let df = proj.backward(feature, &dc, gp);
                (df, vec![0.0; dirs.l * dirs.zeta])
            }
            _ => unreachable!("extractor, cache and gradient buffer disagree on architecture"),
        }
    }

    pub fn logits(&self, feature: &LatentFeature, dirs: &DirectionSet) -> Result<Vec<f64>> {
        Ok(self.forward(feature.as_slice(), dirs)?.0)
    }

    /// Encode, project and decode one image.
    pub fn extract(&self, bb: &Backbone, img: &Image, dirs: &DirectionSet) -> Result<Message> {
        let f = bb.encode_image(img)?;
        Ok(Message::from_logits(self.logits(&f, dirs)?))
    }

    pub fn detect(
        &self,
        bb: &Backbone,
        img: &Image,
        dirs: &DirectionSet,
        reference: &Message,
        lambda: f64,
    ) -> Result<DetectionVerdict> {
        let m = self.extract(bb, img, dirs)?;
        DetectionVerdict::new(ber(&m, reference)?, lambda, m)
    }

    /// Projection stage shared with the codec.
    pub fn projections(feature: &LatentFeature, dirs: &DirectionSet) -> Result<Vec<f64>> {
        codec::project(feature, dirs)
    }
}

impl Params for Extractor {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Extractor::Projection { mlp } => mlp.visit(f),
            Extractor::Compressed { proj, l1, l2 } => {
                proj.visit(&mut |n, t| f(&format!("proj.{n}"), t));
                l1.visit(&mut |n, t| f(&format!("l1.{n}"), t));
                l2.visit(&mut |n, t| f(&format!("l2.{n}"), t));
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Extractor::Projection { mlp } => mlp.visit_mut(f),
            Extractor::Compressed { proj, l1, l2 } => {
                proj.visit_mut(&mut |n, t| f(&format!("proj.{n}"), t));
                l1.visit_mut(&mut |n, t| f(&format!("l1.{n}"), t));
                l2.visit_mut(&mut |n, t| f(&format!("l2.{n}"), t));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionVerdict {
    pub ber: f64,
    pub threshold: f64,
    pub is_fake: bool,
    pub bits_recovered: Message,
}

impl DetectionVerdict {
    pub fn new(ber: f64, lambda: f64, bits: Message) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Validation(format!("threshold {lambda} outside [0, 1]")));
        }
        Ok(DetectionVerdict { ber, threshold: lambda, is_fake: is_fake(ber, lambda), bits_recovered: bits })
    }
}

/// Strict: exactly-at-threshold is genuine.
pub fn is_fake(ber: f64, lambda: f64) -> bool {
    ber > lambda
}

pub fn ber(a: &Message, b: &Message) -> Result<f64> {
    ber_bits(&a.bits, &b.bits)
}

pub fn ber_bits(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!("messages differ in length ({} vs {})", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Validation("empty messages".into()));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64)
}

pub const CALIBRATION_GRID: usize = 1000;

/// Grid point `k / 1000`, `k = 0..=1000`, maximising balanced accuracy
/// (genuine iff `ber <= lambda`); ties go to the larger threshold.
pub fn calibrate_threshold(benign: &[f64], malicious: &[f64]) -> Result<f64> {
    Ok(calibrate_threshold_scored(benign, malicious)?.0)
}

/// Threshold together with its balanced accuracy.
pub fn calibrate_threshold_scored(benign: &[f64], malicious: &[f64]) -> Result<(f64, f64)> {
    if benign.is_empty() || malicious.is_empty() {
        return Err(Error::Validation("calibration needs benign and malicious samples".into()));
    }
    let mut best = (0.0, f64::NEG_INFINITY);
    for k in 0..=CALIBRATION_GRID {
        let lam = k as f64 / CALIBRATION_GRID as f64;
        let bal = balanced_accuracy(benign, malicious, lam);
        if bal >= best.1 {
            best = (lam, bal);
        }
    }
    Ok(best)
}

pub fn balanced_accuracy(benign: &[f64], malicious: &[f64], lambda: f64) -> f64 {
    let tnr = benign.iter().filter(|&&b| !is_fake(b, lambda)).count() as f64 / benign.len() as f64;
    let tpr = malicious.iter().filter(|&&b| is_fake(b, lambda)).count() as f64 / malicious.len() as f64;
    0.5 * (tnr + tpr)
}

/// Mean per-bit BCE (clamped probabilities) and its logit gradient.
pub fn bce_with_grad(logits: &[f64], bits: &[u8]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut g = Vec::with_capacity(logits.len());
    for (&l, &b) in logits.iter().zip(bits) {
        let p = nn::sigmoid(l);
        let pc = p.clamp(1e-7, 1.0 - 1e-7);
        loss -= if b == 1 { pc.ln() } else { (1.0 - pc).ln() };
        let inside = p > 1e-7 && p < 1.0 - 1e-7;
        g.push(if inside { (p - b as f64) / n } else { 0.0 });
    }
    (loss / n, g)
}

/// Mean sigmoid disagreement with `bits` and its logit gradient.
pub fn soft_ber_with_grad(logits: &[f64], bits: &[u8]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut v = 0.0;
    let mut g = Vec::with_capacity(logits.len());
    for (&l, &b) in logits.iter().zip(bits) {
        let p = nn::sigmoid(l);
        let s = if b == 1 { -1.0 } else { 1.0 };
        v += if b == 1 { 1.0 - p } else { p };
        g.push(s * p * (1.0 - p) / n);
    }
    (v / n, g)
}
