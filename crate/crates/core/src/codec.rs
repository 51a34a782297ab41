//! Key-derived orthonormal directions and the projection code on top of them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::LatentFeature;
use crate::error::{shape_check, Error, Result};
use crate::nn::{self, Linear, Params, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub message_bits: usize,
    pub xi_one: f64,
    pub xi_zero: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { message_bits: 512, xi_one: 0.1, xi_zero: -0.1 }
    }
}

impl CodecConfig {
    pub fn targets(&self) -> Result<ProjectionTargets> {
        ProjectionTargets::new(self.xi_one, self.xi_zero)
    }
}

/// Projection magnitudes for bit 1 and bit 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionTargets {
    pub xi_one: f64,
    pub xi_zero: f64,
}

impl Default for ProjectionTargets {
    fn default() -> Self {
        ProjectionTargets { xi_one: 0.1, xi_zero: -0.1 }
    }
}

impl ProjectionTargets {
    pub fn new(xi_one: f64, xi_zero: f64) -> Result<Self> {
        let ok = xi_one > xi_zero && xi_one.abs() < 1.0 && xi_zero.abs() < 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "projection targets need -1 < xi_zero < xi_one < 1, got ({xi_zero}, {xi_one})"
            )));
        }
        Ok(ProjectionTargets { xi_one, xi_zero })
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.xi_one + self.xi_zero)
    }

    pub fn half_gap(&self) -> f64 {
        0.5 * (self.xi_one - self.xi_zero)
    }
}

/// Binary payload, optionally with the logits it was decoded from.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub bits: Vec<u8>,
    pub logits: Option<Vec<f64>>,
}

impl Message {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Validation("message bits must be 0 or 1".into()));
        }
        Ok(Message { bits, logits: None })
    }

    pub fn from_logits(logits: Vec<f64>) -> Self {
        let bits = logits.iter().map(|&l| u8::from(l > 0.0)).collect();
        Message { bits, logits: Some(logits) }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// +1 for bit 1, -1 for bit 0.
    pub fn signs(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 }).collect()
    }

    pub fn random(len: usize, rng: &mut impl rand::Rng) -> Self {
        Message { bits: (0..len).map(|_| rng.random_range(0..2u8)).collect(), logits: None }
    }

    /// Bits packed most-significant first, one hex digit per four bits.
    pub fn to_hex(&self) -> String {
        self.bits
            .chunks(4)
            .map(|c| {
                let mut v = 0u32;
                for i in 0..4 {
                    v = (v << 1) | c.get(i).copied().unwrap_or(0) as u32;
                }
                char::from_digit(v, 16).unwrap()
            })
            .collect()
    }

    pub fn from_hex(s: &str, len: usize) -> Result<Self> {
        let s = s.trim();
        if s.len() != len.div_ceil(4) {
            return Err(Error::Validation(format!(
                "expected {} hex digits for {len} bits, got {}",
                len.div_ceil(4),
                s.len()
            )));
        }
        let mut bits = Vec::with_capacity(len);
        for ch in s.chars() {
            let v = ch.to_digit(16).ok_or_else(|| Error::Validation(format!("invalid hex digit {ch:?}")))?;
            for i in (0..4).rev() {
                bits.push(((v >> i) & 1) as u8);
            }
        }
        if bits[len..].iter().any(|&b| b != 0) {
            return Err(Error::Validation("padding bits must be zero".into()));
        }
        bits.truncate(len);
        Message::new(bits)
    }
}

/// `L` orthonormal rows of length `zeta`.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet {
    pub rows: Vec<f64>,
    pub l: usize,
    pub zeta: usize,
    pub key_fingerprint: String,
}

impl DirectionSet {
    /// First `l` standard basis vectors; used when embedding bypasses the
    /// learned directions.
    pub fn canonical(l: usize, zeta: usize) -> Result<Self> {
        if l > zeta {
            return Err(Error::Config(format!("cannot fit {l} directions in {zeta} dimensions")));
        }
        let mut rows = vec![0.0; l * zeta];
        for i in 0..l {
            rows[i * zeta + i] = 1.0;
        }
        Ok(DirectionSet { rows, l, zeta, key_fingerprint: String::new() })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.zeta..(i + 1) * self.zeta]
    }

    /// Largest deviation of the Gram matrix from the identity.
    pub fn gram_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.l {
            for j in i..self.l {
                let g = nn::dot(self.row(i), self.row(j));
                let t = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - t).abs());
            }
        }
        worst
    }

    /// `D^T c`: combination of rows.
    pub fn combine(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.zeta];
        for (i, &ci) in c.iter().enumerate() {
            if ci == 0.0 {
                continue;
            }
            for (o, d) in out.iter_mut().zip(self.row(i)) {
                *o += ci * d;
            }
        }
        out
    }

    /// Projection of a raw vector onto every row.
    pub fn project_raw(&self, v: &[f64]) -> Vec<f64> {
        (0..self.l).map(|i| nn::dot(self.row(i), v)).collect()
    }

    /// Orthogonal projector onto the span of the rows.
    pub fn span_project(&self, v: &[f64]) -> Vec<f64> {
        self.combine(&self.project_raw(v))
    }
}

/// Intermediate values of [`orthonormalize`] needed for its adjoint.
#[derive(Clone, Debug)]
pub struct OrthoCache {
    /// Projection coefficients `c[i][j]`, `j < i`.
    coef: Vec<Vec<f64>>,
    /// Residual before normalisation for each row.
    resid: Vec<Vec<f64>>,
    norms: Vec<f64>,
    signs: Vec<f64>,
}

const SIGN_TOL: f64 = 1e-9;
const DEGENERATE_TOL: f64 = 1e-10;

fn sign_of_first(v: &[f64]) -> f64 {
    match v.iter().find(|x| x.abs() > SIGN_TOL) {
        Some(x) if *x < 0.0 => -1.0,
        _ => 1.0,
    }
}

/// Modified Gram-Schmidt on the rows of `raw` (`l x zeta`), then flips each
/// row so its first non-negligible entry is positive.
///
/// A row that collapses onto earlier rows is nudged by seeded noise of
/// scale 1e-6 and retried once.
pub fn orthonormalize(raw: &[f64], l: usize, zeta: usize, seed: u64) -> Result<(Vec<f64>, OrthoCache)> {
    if l > zeta {
        return Err(Error::Config(format!("cannot fit {l} orthonormal directions in {zeta} dimensions")));
    }
    shape_check("raw direction matrix", raw.len(), l * zeta)?;
    let mut out = vec![0.0; l * zeta];
    let mut cache = OrthoCache {
        coef: Vec::with_capacity(l),
        resid: Vec::with_capacity(l),
        norms: Vec::with_capacity(l),
        signs: Vec::with_capacity(l),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..l {
        let src = &raw[i * zeta..(i + 1) * zeta];
        let scale = nn::norm(src).max(1.0);
        let mut row = src.to_vec();
        let mut attempt = 0;
        let (v, coef, n) = loop {
            let mut v = row.clone();
            let mut coef = Vec::with_capacity(i);
            for j in 0..i {
                let d = &out[j * zeta..(j + 1) * zeta];
                let c = nn::dot(&v, d);
                for (a, b) in v.iter_mut().zip(d) {
                    *a -= c * b;
                }
                coef.push(c);
            }
            let n = nn::norm(&v);
            if n > DEGENERATE_TOL * scale {
                break (v, coef, n);
            }
            if attempt == 1 {
                return Err(Error::Validation(format!("direction {i} is linearly dependent on earlier rows")));
            }
            attempt += 1;
            for r in row.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *r += 1e-6 * scale * e;
            }
        };
        let u: Vec<f64> = v.iter().map(|x| x / n).collect();
        let s = sign_of_first(&u);
        for (o, x) in out[i * zeta..(i + 1) * zeta].iter_mut().zip(&u) {
            *o = s * x;
        }
        cache.coef.push(coef);
        cache.resid.push(v);
        cache.norms.push(n);
        cache.signs.push(s);
    }
    Ok((out, cache))
}

/// Adjoint of [`orthonormalize`] (signs held fixed).
pub fn orthonormalize_backward(d: &[f64], cache: &OrthoCache, dd_out: &[f64], l: usize, zeta: usize) -> Vec<f64> {
    let mut dd = dd_out.to_vec();
    let mut draw = vec![0.0; l * zeta];
    for i in (0..l).rev() {
        let di = &d[i * zeta..(i + 1) * zeta];
        let g_i = dd[i * zeta..(i + 1) * zeta].to_vec();
        let p = nn::dot(di, &g_i);
        let (n, s) = (cache.norms[i], cache.signs[i]);
        let mut g: Vec<f64> = g_i.iter().zip(di).map(|(a, b)| s * (a - b * p) / n).collect();
        let mut v = cache.resid[i].clone();
        for j in (0..i).rev() {
            let dj = &d[j * zeta..(j + 1) * zeta];
            let c = cache.coef[i][j];
            // v before this step
            for (a, b) in v.iter_mut().zip(dj) {
                *a += c * b;
            }
            let gd = nn::dot(dj, &g);
            let ddj = &mut dd[j * zeta..(j + 1) * zeta];
            for k in 0..zeta {
                ddj[k] -= c * g[k] + gd * v[k];
            }
            for (a, b) in g.iter_mut().zip(dj) {
                *a -= gd * b;
            }
        }
        draw[i * zeta..(i + 1) * zeta].copy_from_slice(&g);
    }
    draw
}

/// The direction generator: key feature -> 256 -> `L * zeta`, then
/// orthonormalised.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionGenerator {
    pub l1: Linear,
    pub l2: Linear,
    pub l: usize,
    pub zeta: usize,
}

pub struct GeneratorCache {
    key: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    ortho: OrthoCache,
}

impl DirectionGenerator {
    pub const HIDDEN: usize = 256;

    pub fn new(zeta: usize, l: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if l > zeta {
            return Err(Error::Config(format!("message_bits ({l}) exceeds feature_dim ({zeta})")));
        }
        Ok(DirectionGenerator {
            l1: Linear::new(zeta, Self::HIDDEN, rng),
            l2: Linear::new(Self::HIDDEN, l * zeta, rng),
            l,
            zeta,
        })
    }

    pub fn raw(&self, key: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let pre = self.l1.forward(key);
        let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let raw = self.l2.forward(&hidden);
        (pre, hidden, raw)
    }

    pub fn forward(&self, key: &LatentFeature, fingerprint: &str) -> Result<(DirectionSet, GeneratorCache)> {
        shape_check("key feature", key.dim(), self.zeta)?;
        let (pre, hidden, raw) = self.raw(key.as_slice());
        let (rows, ortho) = orthonormalize(&raw, self.l, self.zeta, 0x6469_7273)?;
        let set = DirectionSet { rows, l: self.l, zeta: self.zeta, key_fingerprint: fingerprint.to_string() };
        Ok((set, GeneratorCache { key: key.as_slice().to_vec(), pre, hidden, ortho }))
    }

    pub fn backward(&self, set: &DirectionSet, cache: &GeneratorCache, d_rows: &[f64], g: &mut DirectionGenerator) {
        let draw = orthonormalize_backward(&set.rows, &cache.ortho, d_rows, self.l, self.zeta);
        let dh = self.l2.backward(&cache.hidden, &draw, &mut g.l2);
        let dpre: Vec<f64> = dh.iter().zip(&cache.pre).map(|(d, p)| if *p > 0.0 { *d } else { 0.0 }).collect();
        self.l1.backward(&cache.key, &dpre, &mut g.l1);
    }
}

impl Params for DirectionGenerator {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.l1.visit(&mut |n, t| f(&format!("l1.{n}"), t));
        self.l2.visit(&mut |n, t| f(&format!("l2.{n}"), t));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.l1.visit_mut(&mut |n, t| f(&format!("l1.{n}"), t));
        self.l2.visit_mut(&mut |n, t| f(&format!("l2.{n}"), t));
    }
}

/// Generate the direction set for a key feature.
pub fn generate_directions(key: &LatentFeature, generator: &DirectionGenerator, fingerprint: &str) -> Result<DirectionSet> {
    Ok(generator.forward(key, fingerprint)?.0)
}

pub fn target_projections(message: &Message, targets: &ProjectionTargets) -> Vec<f64> {
    message.bits.iter().map(|&b| if b == 1 { targets.xi_one } else { targets.xi_zero }).collect()
}

pub fn project(feature: &LatentFeature, directions: &DirectionSet) -> Result<Vec<f64>> {
    shape_check("feature vs direction width", feature.dim(), directions.zeta)?;
    Ok(directions.project_raw(feature.as_slice()))
}

/// Bit 1 iff the projection is strictly above the midpoint of the targets.
pub fn hard_decode(projections: &[f64], targets: &ProjectionTargets) -> Message {
    let mid = targets.midpoint();
    Message { bits: projections.iter().map(|&p| u8::from(p > mid)).collect(), logits: None }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_two_by_two() {
        let (d, _) = orthonormalize(&[1.0, 0.0, 1.0, 1.0], 2, 2, 0).unwrap();
        assert_eq!(d, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn sign_fix_and_degenerate_rows() {
        let (d, _) = orthonormalize(&[-2.0, 0.0, 0.0, 0.0, -3.0, 0.0], 2, 3, 0).unwrap();
        assert_eq!(&d[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&d[3..], &[0.0, 1.0, 0.0]);
        let (d, _) = orthonormalize(&[1.0, 1.0, 0.0, 2.0, 2.0, 0.0], 2, 3, 5).unwrap();
        let set = DirectionSet { rows: d, l: 2, zeta: 3, key_fingerprint: String::new() };
        assert!(set.gram_error() < 1e-9);
        assert!(orthonormalize(&[0.0; 6], 3, 2, 0).is_err());
    }

    #[test]
    fn backward_matches_fd() {
        let (l, z) = (3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw: Vec<f64> = (0..l * z).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w: Vec<f64> = (0..l * z).map(|i| (i as f64 * 0.91).cos()).collect();
        let obj = |r: &[f64]| nn::dot(&orthonormalize(r, l, z, 0).unwrap().0, &w);
        let (d, c) = orthonormalize(&raw, l, z, 0).unwrap();
        let g = orthonormalize_backward(&d, &c, &w, l, z);
        for i in 0..l * z {
            let mut a = raw.clone();
            let mut b = raw.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let num = (obj(&a) - obj(&b)) / 2e-6;
            assert!((num - g[i]).abs() < 1e-7, "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn hex_roundtrip() {
        let m = Message::new(vec![1, 0, 1, 1, 0, 0, 0, 1, 1]).unwrap();
        let h = m.to_hex();
        assert_eq!(h, "b18");
        assert_eq!(Message::from_hex(&h, 9).unwrap(), m);
        assert!(Message::from_hex("b19", 9).is_err());
        assert!(Message::from_hex("zz", 8).is_err());
    }

    #[test]
    fn tie_decodes_to_zero() {
        let t = ProjectionTargets::default();
        assert_eq!(hard_decode(&[0.0, 0.07, -0.02], &t).bits, vec![0, 1, 0]);
    }
}
