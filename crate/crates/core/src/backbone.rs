//! Frozen semantic encoder producing unit-norm features for images and keys.
//!
//! The toy `spectral` architecture pools oriented band energies of an
//! opponent-colour spectrum and maps their logarithms through one affine
//! layer before renormalising. Band energies are insensitive to translation,
//! which keeps features stable under crops and small geometric edits while
//! content edits move them. The `dense` architecture is a plain
//! flatten-MLP encoder.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, Act, Linear, Params, Tensor};
use crate::synth;

/// Unit-norm semantic feature.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFeature(Vec<f64>);

impl LatentFeature {
    /// Normalises `z`; fails on zero or non-finite input.
    pub fn from_unnormalized(z: &[f64]) -> Result<Self> {
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("feature has non-finite components".into()));
        }
        let n = nn::norm(z);
        if n <= f64::MIN_POSITIVE {
            return Err(Error::Validation("cannot normalise a zero feature".into()));
        }
        Ok(LatentFeature(z.iter().map(|v| v / n).collect()))
    }

    /// Wraps an already normalised vector, checking the unit-norm contract.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if !v.iter().all(|x| x.is_finite()) || (nn::norm(&v) - 1.0).abs() > 1e-6 {
            return Err(Error::Validation("feature is not unit norm".into()));
        }
        Ok(LatentFeature(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneMode {
    Toy,
    Pretrained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneArch {
    Spectral,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub mode: BackboneMode,
    pub arch: BackboneArch,
    pub feature_dim: usize,
    /// Defaults to 64 in toy mode and 224 otherwise.
    pub resolution: Option<usize>,
    pub seed: u64,
    pub radial_bins: usize,
    pub orientation_bins: usize,
    pub dense_hidden: usize,
    /// Archive holding encoder weights (pretrained mode).
    pub weights: Option<String>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            mode: BackboneMode::Toy,
            arch: BackboneArch::Spectral,
            feature_dim: 512,
            resolution: None,
            seed: 0,
            radial_bins: 10,
            orientation_bins: 10,
            dense_hidden: 256,
            weights: None,
        }
    }
}

impl BackboneConfig {
    pub fn resolution(&self) -> usize {
        self.resolution.unwrap_or(match self.mode {
            BackboneMode::Toy => 64,
            BackboneMode::Pretrained => 224,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.resolution() == 0 {
            return Err(Error::Config("feature_dim and resolution must be positive".into()));
        }
        if self.arch == BackboneArch::Spectral && (self.radial_bins == 0 || self.orientation_bins == 0) {
            return Err(Error::Config("spectral encoder needs at least one band".into()));
        }
        if self.mode == BackboneMode::Pretrained && self.weights.is_none() {
            return Err(Error::Config("pretrained backbone requires backbone.weights".into()));
        }
        Ok(())
    }
}

const LOG_EPS: f64 = 1e-4;
const OPPONENT: [[f64; 3]; 3] = [[0.299, 0.587, 0.114], [0.5, -0.5, 0.0], [0.25, 0.25, -0.5]];

/// Fixed spectral pooling stage.
#[derive(Clone)]
struct SpectralFront {
    r: usize,
    window: Vec<f64>,
    /// Per band: (flat frequency index, weight).
    bands: Vec<Vec<(usize, f64)>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectralFront {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralFront").field("r", &self.r).field("bands", &self.bands.len()).finish()
    }
}

fn fftfreq(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

impl SpectralFront {
    fn new(r: usize, nr: usize, no: usize) -> Self {
        let pi = std::f64::consts::PI;
        let scale = r as f64 / 64.0;
        let (rmin, rmax) = (1.5 * scale, 28.0 * scale);
        let lstep = if nr > 1 { (rmax / rmin).ln() / (nr - 1) as f64 } else { (rmax / rmin).ln() };
        let sig_r = 0.5 * lstep;
        let sig_o = 0.5 * pi / no as f64;
        let mut bands = Vec::with_capacity(nr * no);
        for ir in 0..nr {
            let cr = if nr > 1 { (rmin.ln() + lstep * ir as f64).exp() } else { (rmin * rmax).sqrt() };
            for io in 0..no {
                let co = io as f64 * pi / no as f64;
                let mut w = Vec::new();
                for ky in 0..r {
                    let fy = fftfreq(ky, r);
                    for kx in 0..r {
                        let fx = fftfreq(kx, r);
                        if ky == 0 && kx == 0 {
                            continue;
                        }
                        let rad = (fx * fx + fy * fy).sqrt();
                        let ang = fy.atan2(fx).rem_euclid(pi);
                        let lr = (rad.ln() - cr.ln()) / sig_r;
                        let da = (ang - co + pi / 2.0).rem_euclid(pi) - pi / 2.0;
                        let v = (-0.5 * lr * lr).exp() * (-0.5 * (da / sig_o).powi(2)).exp();
                        w.push((ky * r + kx, v));
                    }
                }
                let max = w.iter().map(|p| p.1).fold(0.0, f64::max);
                w.retain(|p| p.1 > 1e-4 * max && p.1 > 0.0);
                let s: f64 = w.iter().map(|p| p.1).sum();
                if s > 0.0 {
                    w.iter_mut().for_each(|p| p.1 /= s);
                }
                bands.push(w);
            }
        }
        let window = if r >= 8 {
            let hann: Vec<f64> = (0..r)
                .map(|n| 0.5 - 0.5 * (2.0 * pi * n as f64 / (r - 1) as f64).cos())
                .collect();
            (0..r * r).map(|i| (hann[i / r] * hann[i % r]).sqrt()).collect()
        } else {
            vec![1.0; r * r]
        };
        let fft = FftPlanner::new().plan_fft_forward(r);
        SpectralFront { r, window, bands, fft }
    }

    fn n_out(&self) -> usize {
        3 * self.bands.len()
    }

    fn fft2(&self, buf: &mut [Complex<f64>]) {
        let r = self.r;
        for row in buf.chunks_exact_mut(r) {
            self.fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); r];
        for x in 0..r {
            for y in 0..r {
                col[y] = buf[y * r + x];
            }
            self.fft.process(&mut col);
            for y in 0..r {
                buf[y * r + x] = col[y];
            }
        }
    }

    /// Opponent transform, centring and windowing: image -> 3 planes.
    fn prep(&self, x: &[f64]) -> Vec<f64> {
        let n = self.r * self.r;
        let mut y = vec![0.0; 3 * n];
        for c in 0..3 {
            let plane = &mut y[c * n..(c + 1) * n];
            for i in 0..n {
                plane[i] = OPPONENT[c][0] * x[i] + OPPONENT[c][1] * x[n + i] + OPPONENT[c][2] * x[2 * n + i];
            }
            let m = plane.iter().sum::<f64>() / n as f64;
            for i in 0..n {
                plane[i] = (plane[i] - m) * self.window[i];
            }
        }
        y
    }

    fn prep_adjoint(&self, dy: &[f64]) -> Vec<f64> {
        let n = self.r * self.r;
        let mut dx = vec![0.0; 3 * n];
        for c in 0..3 {
            let g: Vec<f64> = (0..n).map(|i| dy[c * n + i] * self.window[i]).collect();
            let m = g.iter().sum::<f64>() / n as f64;
            for i in 0..n {
                let v = g[i] - m;
                for d in 0..3 {
                    dx[d * n + i] += OPPONENT[c][d] * v;
                }
            }
        }
        dx
    }

    fn spectra(&self, y: &[f64]) -> Vec<Complex<f64>> {
        let n = self.r * self.r;
        let mut spec: Vec<Complex<f64>> = y.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for c in 0..3 {
            self.fft2(&mut spec[c * n..(c + 1) * n]);
        }
        spec
    }

    /// Band energies per channel, `3 * bands` values.
    fn energies(&self, spec: &[Complex<f64>]) -> Vec<f64> {
        let n = self.r * self.r;
        let nf = n as f64;
        let mut e = Vec::with_capacity(self.n_out());
        for c in 0..3 {
            let s = &spec[c * n..(c + 1) * n];
            for band in &self.bands {
                e.push(band.iter().map(|&(k, w)| w * s[k].norm_sqr() / nf).sum());
            }
        }
        e
    }

    /// Adjoint from band-energy cotangent to image cotangent.
    fn energies_vjp(&self, spec: &[Complex<f64>], de: &[f64]) -> Vec<f64> {
        let n = self.r * self.r;
        let nb = self.bands.len();
        let mut buf = vec![Complex::new(0.0, 0.0); 3 * n];
        for c in 0..3 {
            let mut dp = vec![0.0; n];
            for (b, band) in self.bands.iter().enumerate() {
                let d = de[c * nb + b];
                if d == 0.0 {
                    continue;
                }
                for &(k, w) in band {
                    dp[k] += d * w;
                }
            }
            for k in 0..n {
                buf[c * n + k] = spec[c * n + k].conj() * dp[k];
            }
            self.fft2(&mut buf[c * n..(c + 1) * n]);
        }
        let scale = 2.0 / n as f64;
        let dy: Vec<f64> = buf.iter().map(|v| v.re * scale).collect();
        self.prep_adjoint(&dy)
    }

    fn energies_jvp(&self, spec: &[Complex<f64>], dx: &[f64]) -> Vec<f64> {
        let n = self.r * self.r;
        let dy = self.prep(dx);
        let dspec = self.spectra(&dy);
        let nf = n as f64;
        let mut de = Vec::with_capacity(self.n_out());
        for c in 0..3 {
            let dp: Vec<f64> = (0..n)
                .map(|k| 2.0 / nf * (spec[c * n + k].conj() * dspec[c * n + k]).re)
                .collect();
            for band in &self.bands {
                de.push(band.iter().map(|&(k, w)| w * dp[k]).sum());
            }
        }
        de
    }
}

#[derive(Clone, Debug)]
enum Arch {
    Spectral { front: SpectralFront, proj: Linear },
    Dense { l1: Linear, l2: Linear },
}

/// Saved activations for one forward pass.
#[derive(Clone, Debug)]
pub struct EncodeCache {
    inner: CacheInner,
    pub z_norm: f64,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug)]
enum CacheInner {
    Spectral { spec: Vec<Complex<f64>>, energy: Vec<f64> },
    Dense { pre: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    arch: Arch,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.resolution();
        let z = cfg.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261_636b_626f_6e65);
        let arch = match cfg.arch {
            BackboneArch::Spectral => {
                let front = SpectralFront::new(r, cfg.radial_bins, cfg.orientation_bins);
                let nb = front.n_out();
                let mut proj = Linear::zeros(nb, z);
                let s = 1.0 / (nb as f64).sqrt();
                proj.w.data.iter_mut().for_each(|v| *v = { let z: f64 = StandardNormal.sample(&mut rng); z * s });
                Arch::Spectral { front, proj }
            }
            BackboneArch::Dense => {
                let l1 = Linear::new(3 * r * r, cfg.dense_hidden, &mut rng);
                let l2 = Linear::new(cfg.dense_hidden, z, &mut rng);
                Arch::Dense { l1, l2 }
            }
        };
        let mut bb = Backbone { cfg: cfg.clone(), arch };
        match (&cfg.mode, &cfg.weights) {
            (BackboneMode::Pretrained, Some(path)) => {
                let ar = Archive::read(Path::new(path))?;
                bb.load_named("backbone", &ar.tensors)?;
            }
            _ => bb.calibrate()?,
        }
        Ok(bb)
    }

    /// Centres features on a seeded reference set so the unit sphere is used
    /// evenly rather than around one dominant direction.
    fn calibrate(&mut self) -> Result<()> {
        let r = self.cfg.resolution();
        let refs = synth::dataset(64, r, self.cfg.seed.wrapping_add(0x5eed));
        let z = self.cfg.feature_dim;
        let mut mean = vec![0.0; z];
        for img in &refs {
            let pre = self.pre_features(&img.data)?;
            for (m, v) in mean.iter_mut().zip(pre) {
                *m += v / refs.len() as f64;
            }
        }
        let out = match &mut self.arch {
            Arch::Spectral { proj, .. } => proj,
            Arch::Dense { l2, .. } => l2,
        };
        for (b, m) in out.b.data.iter_mut().zip(&mean) {
            *b -= m;
        }
        Ok(())
    }

    fn pre_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(match &self.arch {
            Arch::Spectral { front, proj } => {
                let e = front.energies(&front.spectra(&front.prep(x)));
                let h: Vec<f64> = e.iter().map(|v| (v + LOG_EPS).ln()).collect();
                proj.forward(&h)
            }
            Arch::Dense { l1, l2 } => {
                let h: Vec<f64> = l1.forward(x).into_iter().map(|v| Act::Gelu.f(v)).collect();
                l2.forward(&h)
            }
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    pub fn resolution(&self) -> usize {
        self.cfg.resolution()
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let r = self.resolution();
        if img.h != r || img.w != r {
            return Err(Error::Shape(format!(
                "image is {}x{}, encoder expects {r}x{r}",
                img.h, img.w
            )));
        }
        img.validate()
    }

    /// Forward pass keeping what the adjoints need.
    pub fn forward(&self, img: &Image) -> Result<EncodeCache> {
        self.check_image(img)?;
        let x = &img.data;
        let (inner, z) = match &self.arch {
            Arch::Spectral { front, proj } => {
                let spec = front.spectra(&front.prep(x));
                let energy = front.energies(&spec);
                let h: Vec<f64> = energy.iter().map(|v| (v + LOG_EPS).ln()).collect();
                (CacheInner::Spectral { spec, energy }, proj.forward(&h))
            }
            Arch::Dense { l1, l2 } => {
                let pre = l1.forward(x);
                let h: Vec<f64> = pre.iter().map(|&v| Act::Gelu.f(v)).collect();
                (CacheInner::Dense { pre }, l2.forward(&h))
            }
        };
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("encoder produced non-finite activations".into()));
        }
        let (feature, z_norm) = nn::normalize(&z);
        Ok(EncodeCache { inner, z_norm, feature })
    }

    pub fn encode_image(&self, img: &Image) -> Result<LatentFeature> {
        let c = self.forward(img)?;
        Ok(LatentFeature(c.feature))
    }

    /// Image cotangent for a feature cotangent `df`.
    pub fn vjp(&self, cache: &EncodeCache, df: &[f64]) -> Vec<f64> {
        let dz = nn::normalize_backward(&cache.feature, cache.z_norm, df);
        match (&self.arch, &cache.inner) {
            (Arch::Spectral { front, proj }, CacheInner::Spectral { spec, energy }) => {
                let dh = proj.backward_input(&dz);
                let de: Vec<f64> = dh.iter().zip(energy).map(|(d, e)| d / (e + LOG_EPS)).collect();
                front.energies_vjp(spec, &de)
            }
            (Arch::Dense { l1, l2 }, CacheInner::Dense { pre, .. }) => {
                let dh = l2.backward_input(&dz);
                let dpre: Vec<f64> = dh.iter().zip(pre).map(|(d, p)| d * Act::Gelu.df(*p)).collect();
                l1.backward_input(&dpre)
            }
            _ => unreachable!("cache built by a different architecture"),
        }
    }

    /// Feature tangent for an image tangent `dx`.
    pub fn jvp(&self, cache: &EncodeCache, dx: &[f64]) -> Vec<f64> {
        let dz = match (&self.arch, &cache.inner) {
            (Arch::Spectral { front, proj }, CacheInner::Spectral { spec, energy }) => {
                let de = front.energies_jvp(spec, dx);
                let dh: Vec<f64> = de.iter().zip(energy).map(|(d, e)| d / (e + LOG_EPS)).collect();
                proj.jvp(&dh)
            }
            (Arch::Dense { l1, l2 }, CacheInner::Dense { pre, .. }) => {
                let dpre = l1.jvp(dx);
                let dh: Vec<f64> = dpre.iter().zip(pre).map(|(d, p)| d * Act::Gelu.df(*p)).collect();
                l2.jvp(&dh)
            }
            _ => unreachable!("cache built by a different architecture"),
        };
        let f = &cache.feature;
        let p = nn::dot(f, &dz);
        f.iter().zip(&dz).map(|(fi, d)| (d - fi * p) / cache.z_norm).collect()
    }

    /// Key feature from a seeded SHA-256 expansion of the key string.
    pub fn encode_key(&self, key: &str) -> Result<LatentFeature> {
        encode_key(key, &self.cfg)
    }
}

impl Params for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match &self.arch {
            Arch::Spectral { proj, .. } => proj.visit(&mut |n, t| f(&format!("proj.{n}"), t)),
            Arch::Dense { l1, l2 } => {
                l1.visit(&mut |n, t| f(&format!("l1.{n}"), t));
                l2.visit(&mut |n, t| f(&format!("l2.{n}"), t));
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match &mut self.arch {
            Arch::Spectral { proj, .. } => proj.visit_mut(&mut |n, t| f(&format!("proj.{n}"), t)),
            Arch::Dense { l1, l2 } => {
                l1.visit_mut(&mut |n, t| f(&format!("l1.{n}"), t));
                l2.visit_mut(&mut |n, t| f(&format!("l2.{n}"), t));
            }
        }
    }
}

/// Seeded hash expansion of `key` into a unit vector of `cfg.feature_dim` values.
pub fn encode_key(key: &str, cfg: &BackboneConfig) -> Result<LatentFeature> {
    if key.is_empty() {
        return Err(Error::Validation("secret key must not be empty".into()));
    }
    let z = cfg.feature_dim;
    let mut uniforms = Vec::with_capacity(z + 4);
    let mut counter: u32 = 0;
    while uniforms.len() < z + (z % 2) {
        let mut h = Sha256::new();
        h.update(b"latmark/key/v1");
        h.update(cfg.seed.to_le_bytes());
        h.update((key.len() as u64).to_le_bytes());
        h.update(key.as_bytes());
        h.update(counter.to_le_bytes());
        let out = h.finalize();
        for chunk in out.chunks_exact(8) {
            let mut b = [0u8; 8];
            b.copy_from_slice(chunk);
            let u = u64::from_le_bytes(b) >> 11;
            uniforms.push((u as f64 + 0.5) / (1u64 << 53) as f64);
        }
        counter += 1;
    }
    let mut vals = Vec::with_capacity(z + 1);
    for pair in uniforms.chunks_exact(2) {
        let rad = (-2.0 * pair[0].ln()).sqrt();
        let th = std::f64::consts::TAU * pair[1];
        vals.push(rad * th.cos());
        vals.push(rad * th.sin());
        if vals.len() >= z {
            break;
        }
    }
    vals.truncate(z);
    LatentFeature::from_unnormalized(&vals)
}

/// Short hex fingerprint of a key; safe to store.
pub fn key_fingerprint(key: &str) -> String {
    let mut h = Sha256::new();
    h.update(b"latmark/fingerprint/v1");
    h.update(key.as_bytes());
    hex::encode(&h.finalize()[..16])
}
