//! Benign and malicious image transforms, their strength mapping, and the
//! adjoints used to route embedder gradients through them.
//!
//! Every transform's forward pass is exact. The differentiable path reuses
//! that output and supplies a backward map: JPEG is straight-through, the
//! rest are piecewise linear in the input so their adjoints are exact away
//! from clamp boundaries.

use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Benign,
    Malicious,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Transform {
    Jpeg,
    Noise,
    Crop,
    Jitter,
    Affine,
    Mixup,
    PatchSwap,
    ElasticWarp,
    /// Shell command with `{input}`, `{output}` and `{strength}` placeholders.
    External(String),
}

impl Transform {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "jpeg" => Transform::Jpeg,
            "noise" => Transform::Noise,
            "crop" => Transform::Crop,
            "jitter" => Transform::Jitter,
            "affine" => Transform::Affine,
            "mixup" => Transform::Mixup,
            "patch_swap" => Transform::PatchSwap,
            "elastic_warp" => Transform::ElasticWarp,
            _ => return None,
        })
    }

    fn defaults(&self) -> (AttackKind, f64, f64) {
        use AttackKind::*;
        match self {
            Transform::Jpeg => (Benign, 30.0, 95.0),
            Transform::Noise => (Benign, 0.0, 0.1),
            Transform::Crop => (Benign, 0.6, 1.0),
            Transform::Jitter => (Benign, 0.0, 0.3),
            Transform::Affine => (Benign, 0.0, 15.0),
            Transform::Mixup => (Malicious, 0.3, 0.9),
            Transform::PatchSwap => (Malicious, 0.2, 0.6),
            Transform::ElasticWarp => (Malicious, 2.0, 10.0),
            Transform::External(_) => (Malicious, 0.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackSpec {
    pub id: usize,
    pub name: String,
    pub kind: AttackKind,
    pub param_min: f64,
    pub param_max: f64,
    pub has_surrogate: bool,
    pub transform: Transform,
}

/// Ordered attack set; composition always follows this order.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackRegistry {
    pub specs: Vec<AttackSpec>,
}

/// One `[[attacks.entries]]` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    pub name: String,
    pub kind: Option<AttackKind>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttacksConfig {
    /// Empty means the built-in registry.
    pub entries: Vec<AttackEntry>,
    pub external_cmd: Option<String>,
    pub external_kind: Option<AttackKind>,
}

pub const DEFAULT_NAMES: [&str; 8] =
    ["jpeg", "noise", "crop", "jitter", "affine", "mixup", "patch_swap", "elastic_warp"];

impl AttackRegistry {
    pub fn default_registry() -> Self {
        let entries: Vec<AttackEntry> = DEFAULT_NAMES
            .iter()
            .map(|n| AttackEntry { name: n.to_string(), kind: None, min: None, max: None, enabled: true })
            .collect();
        Self::build(&entries, None, None).expect("built-in registry is valid")
    }

    pub fn from_config(cfg: &AttacksConfig) -> Result<Self> {
        if cfg.entries.is_empty() {
            let mut reg = Self::default_registry();
            if let Some(cmd) = &cfg.external_cmd {
                reg.push_external(cmd, cfg.external_kind.unwrap_or(AttackKind::Malicious));
            }
            return Ok(reg);
        }
        Self::build(&cfg.entries, cfg.external_cmd.as_deref(), cfg.external_kind)
    }

    fn build(entries: &[AttackEntry], external: Option<&str>, ext_kind: Option<AttackKind>) -> Result<Self> {
        let mut reg = AttackRegistry { specs: Vec::new() };
        for e in entries.iter().filter(|e| e.enabled) {
            let t = Transform::from_name(&e.name)
                .ok_or_else(|| Error::Config(format!("unknown attack {:?}", e.name)))?;
            if reg.specs.iter().any(|s| s.name == e.name) {
                return Err(Error::Config(format!("attack {:?} listed twice", e.name)));
            }
            let (kind, lo, hi) = t.defaults();
            let (lo, hi) = (e.min.unwrap_or(lo), e.max.unwrap_or(hi));
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("attack {}: need min < max, got [{lo}, {hi}]", e.name)));
            }
            reg.specs.push(AttackSpec {
                id: reg.specs.len(),
                name: e.name.clone(),
                kind: e.kind.unwrap_or(kind),
                param_min: lo,
                param_max: hi,
                has_surrogate: true,
                transform: t,
            });
        }
        if let Some(cmd) = external {
            reg.push_external(cmd, ext_kind.unwrap_or(AttackKind::Malicious));
        }
        if reg.specs.is_empty() {
            return Err(Error::Config("attack registry is empty".into()));
        }
        Ok(reg)
    }

    fn push_external(&mut self, cmd: &str, kind: AttackKind) {
        self.specs.push(AttackSpec {
            id: self.specs.len(),
            name: "external".into(),
            kind,
            param_min: 0.0,
            param_max: 1.0,
            has_surrogate: false,
            transform: Transform::External(cmd.to_string()),
        });
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn indices(&self, kind: AttackKind) -> Vec<usize> {
        self.specs.iter().filter(|s| s.kind == kind).map(|s| s.id).collect()
    }
}

/// Selection vector and strengths, plus the policy statistics that produced them.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AttackAction {
    pub selected: Vec<u8>,
    pub strengths: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_prob: f64,
    pub entropy: f64,
}

impl AttackAction {
    /// Deterministic action (no policy); `probs` are the selection itself.
    pub fn fixed(selected: Vec<u8>, strengths: Vec<f64>) -> Self {
        let probs = selected.iter().map(|&a| a as f64).collect();
        AttackAction { selected, strengths, probs, log_prob: 0.0, entropy: 0.0 }
    }

    pub fn none(n: usize) -> Self {
        Self::fixed(vec![0; n], vec![0.0; n])
    }

    pub fn single(n: usize, which: usize, tau: f64) -> Self {
        let mut a = Self::none(n);
        a.selected[which] = 1;
        a.strengths[which] = tau;
        a
    }

    pub fn count(&self) -> usize {
        self.selected.iter().map(|&a| a as usize).sum()
    }

    pub fn has_kind(&self, reg: &AttackRegistry, kind: AttackKind) -> bool {
        self.selected.iter().zip(&reg.specs).any(|(&a, s)| a == 1 && s.kind == kind)
    }
}

/// `min + (max - min) * tau`, written so both endpoints are reproduced exactly.
pub fn map_params(spec: &AttackSpec, tau: f64) -> f64 {
    let t = if (0.0..=1.0).contains(&tau) {
        tau
    } else {
        log::warn!("attack {}: strength {tau} outside [0, 1], clamping", spec.name);
        if tau.is_nan() {
            0.0
        } else {
            tau.clamp(0.0, 1.0)
        }
    };
    (1.0 - t) * spec.param_min + t * spec.param_max
}

/// Per-call randomness and the donor image for content-mixing attacks.
#[derive(Clone, Copy, Debug)]
pub struct AttackContext<'a> {
    pub seed: u64,
    pub donor: Option<&'a Image>,
}

/// Bilinear resampling as a 4-tap linear map, so the adjoint is a scatter.
#[derive(Clone, Debug)]
struct Warp {
    taps: Vec<[(u32, f64); 4]>,
}

impl Warp {
    /// `grid(y, x)` gives normalised source coordinates in [-1, 1]
    /// (pixel-centre convention); out-of-range samples repeat the border.
    fn new(h: usize, w: usize, grid: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (gx, gy) = grid(y, x);
                let ix = (((gx + 1.0) * w as f64 - 1.0) / 2.0).clamp(0.0, (w - 1) as f64);
                let iy = (((gy + 1.0) * h as f64 - 1.0) / 2.0).clamp(0.0, (h - 1) as f64);
                let (ix, iy) = (if ix.is_finite() { ix } else { 0.0 }, if iy.is_finite() { iy } else { 0.0 });
                let x0 = (ix.floor() as usize).min(w.saturating_sub(2));
                let y0 = (iy.floor() as usize).min(h.saturating_sub(2));
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let (tx, ty) = (ix - x0 as f64, iy - y0 as f64);
                let at = |yy: usize, xx: usize| (yy * w + xx) as u32;
                taps.push([
                    (at(y0, x0), (1.0 - ty) * (1.0 - tx)),
                    (at(y0, x1), (1.0 - ty) * tx),
                    (at(y1, x0), ty * (1.0 - tx)),
                    (at(y1, x1), ty * tx),
                ]);
            }
        }
        Warp { taps }
    }

    fn apply(&self, img: &Image) -> Image {
        let n = img.plane();
        let mut out = Image::zeros(img.h, img.w);
        for c in 0..3 {
            let src = &img.data[c * n..(c + 1) * n];
            for (o, t) in out.data[c * n..(c + 1) * n].iter_mut().zip(&self.taps) {
                *o = t.iter().map(|&(i, w)| w * src[i as usize]).sum();
            }
        }
        out
    }

    fn adjoint(&self, dy: &[f64], n: usize) -> Vec<f64> {
        let mut dx = vec![0.0; dy.len()];
        for c in 0..3 {
            for (p, t) in self.taps.iter().enumerate() {
                let g = dy[c * n + p];
                for &(i, w) in t {
                    dx[c * n + i as usize] += w * g;
                }
            }
        }
        dx
    }
}

fn base_coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

/// Backward record for one applied transform.
#[derive(Clone, Debug)]
enum Step {
    Straight,
    Mask(Vec<bool>),
    Warp(Warp),
    Jitter { gain: f64, mask: Vec<bool> },
    Mixup(f64),
    Keep(Vec<bool>),
}

/// Adjoint of a composed attack.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    steps: Vec<Step>,
    plane: usize,
}

impl Trace {
    /// Maps an output cotangent to an input cotangent.
    pub fn backward(&self, dy: &[f64]) -> Vec<f64> {
        let mut g = dy.to_vec();
        for step in self.steps.iter().rev() {
            g = match step {
                Step::Straight => g,
                Step::Mask(m) | Step::Keep(m) => g.iter().zip(m).map(|(v, &k)| if k { *v } else { 0.0 }).collect(),
                Step::Warp(w) => w.adjoint(&g, self.plane),
                Step::Jitter { gain, mask } => {
                    let gm: Vec<f64> = g.iter().zip(mask).map(|(v, &k)| if k { *v } else { 0.0 }).collect();
                    let s: f64 = gm.iter().sum::<f64>() / gm.len() as f64;
                    gm.iter().map(|v| gain * v + (1.0 - gain) * s).collect()
                }
                Step::Mixup(b) => g.iter().map(|v| (1.0 - b) * v).collect(),
            };
        }
        g
    }

    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }
}

fn clamp_with_mask(v: &mut [f64]) -> Vec<bool> {
    v.iter_mut()
        .map(|x| {
            let inside = (0.0..=1.0).contains(x);
            *x = x.clamp(0.0, 1.0);
            inside
        })
        .collect()
}

const QY: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57.,
    69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64.,
    81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

const QC: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., 18., 21., 26., 66., 99., 99., 99., 99., 24., 26., 56., 99., 99., 99.,
    99., 99., 47., 66., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
];

fn quant_table(q: f64, base: &[f64; 64]) -> [f64; 64] {
    let s = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (o, b) in t.iter_mut().zip(base) {
        *o = ((b * s + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    m
}

/// Baseline JPEG round trip: YCbCr, 8x8 DCT, quantisation with the standard
/// tables scaled to `quality`, inverse, and 8-bit rounding.
pub fn jpeg(img: &Image, quality: f64) -> Result<Image> {
    if !(quality > 0.0 && quality <= 100.0) {
        return Err(Error::Validation(format!("JPEG quality {quality} outside (0, 100]")));
    }
    let (h, w) = (img.h, img.w);
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let m = dct_matrix();
    let tables = [quant_table(quality, &QY), quant_table(quality, &QC), quant_table(quality, &QC)];
    let mut planes = vec![vec![0.0; ph * pw]; 3];
    for y in 0..ph {
        for x in 0..pw {
            let (sy, sx) = (y.min(h - 1), x.min(w - 1));
            let r = img.at(0, sy, sx) * 255.0;
            let g = img.at(1, sy, sx) * 255.0;
            let b = img.at(2, sy, sx) * 255.0;
            planes[0][y * pw + x] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
            planes[1][y * pw + x] = -0.168736 * r - 0.331264 * g + 0.5 * b;
            planes[2][y * pw + x] = 0.5 * r - 0.418688 * g - 0.081312 * b;
        }
    }
    for (plane, table) in planes.iter_mut().zip(&tables) {
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut blk = [[0.0; 8]; 8];
                for (i, row) in blk.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = plane[(by + i) * pw + bx + j];
                    }
                }
                // d = M b M^T
                let mut tmp = [[0.0; 8]; 8];
                let mut d = [[0.0; 8]; 8];
                for k in 0..8 {
                    for j in 0..8 {
                        tmp[k][j] = (0..8).map(|n| m[k][n] * blk[n][j]).sum();
                    }
                }
                for k in 0..8 {
                    for l in 0..8 {
                        let v: f64 = (0..8).map(|n| tmp[k][n] * m[l][n]).sum();
                        let t = table[k * 8 + l];
                        d[k][l] = (v / t).round_ties_even() * t;
                    }
                }
                // b = M^T d M
                for n in 0..8 {
                    for l in 0..8 {
                        tmp[n][l] = (0..8).map(|k| m[k][n] * d[k][l]).sum();
                    }
                }
                for n in 0..8 {
                    for j in 0..8 {
                        plane[(by + n) * pw + bx + j] = (0..8).map(|l| tmp[n][l] * m[l][j]).sum();
                    }
                }
            }
        }
    }
    let mut out = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * pw + x;
            let (yy, cb, cr) = (planes[0][i] + 128.0, planes[1][i], planes[2][i]);
            let rgb = [yy + 1.402 * cr, yy - 0.344136 * cb - 0.714136 * cr, yy + 1.772 * cb];
            for (c, v) in rgb.iter().enumerate() {
                out.set(c, y, x, v.round_ties_even().clamp(0.0, 255.0) / 255.0);
            }
        }
    }
    Ok(out)
}

/// Keys cubic kernel (a = -0.75).
fn cubic(t: f64) -> f64 {
    let a = -0.75;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic upsampling of a `g x g` grid to `h x w` with corner alignment.
fn upsample_cubic(grid: &[f64], g: usize, h: usize, w: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize| if n > 1 { i as f64 * (g - 1) as f64 / (n - 1) as f64 } else { 0.0 };
    let taps = |u: f64| -> [(usize, f64); 4] {
        let f = u.floor();
        let t = u - f;
        let base = f as isize;
        let mut out = [(0usize, 0.0); 4];
        for (k, o) in out.iter_mut().enumerate() {
            let idx = (base - 1 + k as isize).clamp(0, g as isize - 1) as usize;
            *o = (idx, cubic(t - (k as f64 - 1.0)));
        }
        out
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let ty = taps(coord(y, h));
        for x in 0..w {
            let tx = taps(coord(x, w));
            let mut v = 0.0;
            for &(iy, wy) in &ty {
                for &(ix, wx) in &tx {
                    v += wy * wx * grid[iy * g + ix];
                }
            }
            out[y * w + x] = v;
        }
    }
    out
}

static EXTERNAL_COUNTER: AtomicU64 = AtomicU64::new(0);

fn run_external(cmd: &str, img: &Image, strength: f64) -> Result<Image> {
    let n = EXTERNAL_COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir();
    let stem = format!("latmark-ext-{}-{n}", std::process::id());
    let input: PathBuf = dir.join(format!("{stem}-in.png"));
    let output: PathBuf = dir.join(format!("{stem}-out.png"));
    img.save(&input)?;
    let line = cmd
        .replace("{input}", &input.display().to_string())
        .replace("{output}", &output.display().to_string())
        .replace("{strength}", &format!("{strength}"));
    let status = Command::new("sh").arg("-c").arg(&line).status().map_err(|e| Error::io(&input, e));
    let _ = std::fs::remove_file(&input);
    let status = status?;
    if !status.success() {
        let _ = std::fs::remove_file(&output);
        return Err(Error::Validation(format!("external attack exited with {status}")));
    }
    let out = Image::load(&output);
    let _ = std::fs::remove_file(&output);
    Ok(out?.resize(img.h, img.w))
}

fn apply_one(
    img: &Image,
    spec: &AttackSpec,
    p: f64,
    rng: &mut ChaCha8Rng,
    donor: Option<&Image>,
) -> Result<(Image, Step)> {
    let (h, w) = (img.h, img.w);
    let need_donor = || -> Result<&Image> {
        let d = donor.ok_or_else(|| Error::Validation(format!("{} needs a donor image", spec.name)))?;
        if d.h != h || d.w != w {
            return Err(Error::Shape(format!("{}: donor is {}x{}, image is {h}x{w}", spec.name, d.h, d.w)));
        }
        Ok(d)
    };
    Ok(match &spec.transform {
        Transform::Jpeg => (jpeg(img, p)?, Step::Straight),
        Transform::Noise => {
            let mut out = img.clone();
            for v in out.data.iter_mut() {
                *v += p * rng.sample::<f64, _>(StandardNormal);
            }
            let mask = clamp_with_mask(&mut out.data);
            (out, Step::Mask(mask))
        }
        Transform::Crop => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Validation(format!("crop keep fraction {p} leaves an empty window")));
            }
            let ox = rng.random::<f64>() * (1.0 - p);
            let oy = rng.random::<f64>() * (1.0 - p);
            let warp = Warp::new(h, w, |y, x| {
                let gx = ((base_coord(x, w) + 1.0) / 2.0 * p + ox) * 2.0 - 1.0;
                let gy = ((base_coord(y, h) + 1.0) / 2.0 * p + oy) * 2.0 - 1.0;
                (gx, gy)
            });
            (warp.apply(img), Step::Warp(warp))
        }
        Transform::Jitter => {
            let sb = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
            let sc = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
            let m = img.data.iter().sum::<f64>() / img.data.len() as f64;
            let gain = 1.0 + sc * p;
            let mut out = img.clone();
            for v in out.data.iter_mut() {
                *v = (*v - m) * gain + m + sb * p * 0.5;
            }
            let mask = clamp_with_mask(&mut out.data);
            (out, Step::Jitter { gain, mask })
        }
        Transform::Affine => {
            let sign = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
            let th = (p * sign).to_radians();
            let (c, s) = (th.cos(), th.sin());
            let warp = Warp::new(h, w, |y, x| {
                let (gx, gy) = (base_coord(x, w), base_coord(y, h));
                (c * gx - s * gy, s * gx + c * gy)
            });
            (warp.apply(img), Step::Warp(warp))
        }
        Transform::Mixup => {
            let d = need_donor()?;
            let out = Image {
                h,
                w,
                data: img.data.iter().zip(&d.data).map(|(a, b)| (1.0 - p) * a + p * b).collect(),
            };
            (out, Step::Mixup(p))
        }
        Transform::PatchSwap => {
            let d = need_donor()?;
            let sh = ((p.sqrt() * h as f64).round() as usize).min(h);
            let sw = ((p.sqrt() * w as f64).round() as usize).min(w);
            let oy = rng.random_range(0..=h - sh);
            let ox = rng.random_range(0..=w - sw);
            let n = h * w;
            let mut keep = vec![true; 3 * n];
            let mut out = img.clone();
            for c in 0..3 {
                for y in oy..oy + sh {
                    for x in ox..ox + sw {
                        let i = c * n + y * w + x;
                        out.data[i] = d.data[i];
                        keep[i] = false;
                    }
                }
            }
            (out, Step::Keep(keep))
        }
        Transform::ElasticWarp => {
            const G: usize = 9;
            let grid: Vec<f64> = (0..2 * G * G).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let dx = upsample_cubic(&grid[..G * G], G, h, w);
            let dy = upsample_cubic(&grid[G * G..], G, h, w);
            let mean_mag = dx.iter().zip(&dy).map(|(a, b)| (a * a + b * b).sqrt()).sum::<f64>() / (h * w) as f64;
            if !(mean_mag > 0.0) {
                return Err(Error::Validation("degenerate displacement field".into()));
            }
            let (kx, ky) = (p * 2.0 / w as f64 / mean_mag, p * 2.0 / h as f64 / mean_mag);
            let warp = Warp::new(h, w, |y, x| {
                let i = y * w + x;
                (base_coord(x, w) + kx * dx[i], base_coord(y, h) + ky * dy[i])
            });
            (warp.apply(img), Step::Warp(warp))
        }
        Transform::External(cmd) => (run_external(cmd, img, p)?, Step::Straight),
    })
}

/// Exact composition in registry order.
pub fn apply(img: &Image, action: &AttackAction, reg: &AttackRegistry, ctx: &AttackContext) -> Result<Image> {
    Ok(apply_traced(img, action, reg, ctx)?.0)
}

/// Same output as [`apply`] together with the adjoint of the composition.
pub fn apply_surrogate(
    img: &Image,
    action: &AttackAction,
    reg: &AttackRegistry,
    ctx: &AttackContext,
) -> Result<(Image, Trace)> {
    apply_traced(img, action, reg, ctx)
}

fn apply_traced(
    img: &Image,
    action: &AttackAction,
    reg: &AttackRegistry,
    ctx: &AttackContext,
) -> Result<(Image, Trace)> {
    if action.selected.len() != reg.len() || action.strengths.len() != reg.len() {
        return Err(Error::Shape(format!(
            "action covers {} attacks, registry has {}",
            action.selected.len(),
            reg.len()
        )));
    }
    let mut cur = img.clone();
    let mut trace = Trace { steps: Vec::new(), plane: img.plane() };
    for (l, spec) in reg.specs.iter().enumerate() {
        if action.selected[l] == 0 {
            continue;
        }
        let p = map_params(spec, action.strengths[l]);
        let mut rng = seed::rng(ctx.seed, &[l as u64]);
        match apply_one(&cur, spec, p, &mut rng, ctx.donor) {
            Ok((out, step)) => {
                cur = out;
                trace.steps.push(step);
            }
            Err(e) => log::warn!("attack {} failed ({e}); using identity", spec.name),
        }
    }
    Ok((cur, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn img() -> Image {
        synth::dataset(1, 16, 3).remove(0)
    }

    #[test]
    fn jpeg_is_idempotent_enough_and_ordered() {
        let x = synth::dataset(1, 32, 1).remove(0);
        let mse = |a: &Image| a.data.iter().zip(&x.data).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        let lo = jpeg(&x, 30.0).unwrap();
        let hi = jpeg(&x, 95.0).unwrap();
        assert!(mse(&hi) < mse(&lo));
        assert!(lo.data.iter().all(|v| (v * 255.0 - (v * 255.0).round()).abs() < 1e-9));
    }

    #[test]
    fn jpeg_handles_odd_sizes() {
        let x = Image::filled(5, 11, 0.5);
        let y = jpeg(&x, 75.0).unwrap();
        assert_eq!((y.h, y.w), (5, 11));
        assert!(y.data.iter().all(|v| (v - 128.0 / 255.0).abs() < 2.0 / 255.0));
    }

    #[test]
    fn warp_adjoint_is_transpose() {
        let reg = AttackRegistry::default_registry();
        let x = img();
        let donor = synth::dataset(2, 16, 8).remove(1);
        let ctx = AttackContext { seed: 5, donor: Some(&donor) };
        for name in ["crop", "affine", "elastic_warp", "mixup", "patch_swap"] {
            let a = AttackAction::single(reg.len(), reg.index_of(name).unwrap(), 0.7);
            let (_, tr) = apply_surrogate(&x, &a, &reg, &ctx).unwrap();
            let u: Vec<f64> = (0..x.data.len()).map(|i| (i as f64 * 0.3).sin()).collect();
            let v: Vec<f64> = (0..x.data.len()).map(|i| (i as f64 * 0.7).cos()).collect();
            let ux = Image { h: 16, w: 16, data: u.clone() };
            // linear part only: subtract the donor contribution via a zero-image run
            let zero = Image::zeros(16, 16);
            let fu = apply(&ux, &a, &reg, &ctx).unwrap();
            let f0 = apply(&zero, &a, &reg, &ctx).unwrap();
            let lhs: f64 = fu.data.iter().zip(&f0.data).zip(&v).map(|((p, q), w)| (p - q) * w).sum();
            let rhs: f64 = u.iter().zip(tr.backward(&v)).map(|(p, q)| p * q).sum();
            assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()), "{name}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn failure_falls_back_to_identity() {
        let reg = AttackRegistry::default_registry();
        let x = img();
        let a = AttackAction::single(reg.len(), reg.index_of("mixup").unwrap(), 0.5);
        let y = apply(&x, &a, &reg, &AttackContext { seed: 0, donor: None }).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn registry_config_validation() {
        let bad = AttacksConfig {
            entries: vec![AttackEntry { name: "jpeg".into(), kind: None, min: Some(5.0), max: Some(5.0), enabled: true }],
            ..Default::default()
        };
        assert!(AttackRegistry::from_config(&bad).is_err());
        let unknown = AttacksConfig {
            entries: vec![AttackEntry { name: "blur".into(), kind: None, min: None, max: None, enabled: true }],
            ..Default::default()
        };
        assert!(AttackRegistry::from_config(&unknown).is_err());
        let ext = AttacksConfig { external_cmd: Some("cp {input} {output}".into()), ..Default::default() };
        let reg = AttackRegistry::from_config(&ext).unwrap();
        assert_eq!(reg.len(), 9);
        assert_eq!(reg.specs[8].kind, AttackKind::Malicious);
    }

    #[test]
    fn external_hook_round_trips() {
        let ext = AttacksConfig { external_cmd: Some("cp {input} {output}".into()), ..Default::default() };
        let reg = AttackRegistry::from_config(&ext).unwrap();
        let x = img().quantize8();
        let a = AttackAction::single(reg.len(), 8, 0.5);
        let y = apply(&x, &a, &reg, &AttackContext { seed: 0, donor: None }).unwrap();
        assert_eq!(y, x);
    }
}
