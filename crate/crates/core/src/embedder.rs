//! Message fusion, spherical perturbation, image rendering and the
//! watermarker loss.
//!
//! In residual mode the renderer steers the frozen encoder: starting from
//! the cover image it takes a few normalised encoder-gradient steps whose
//! feature-space targets come from a learned map of the remaining latent
//! gap. The residual is held at a fixed RMS amplitude, which pins PSNR.
//! Backward treats the steering points as constants, so the gradient is
//! exact for a single step and a truncation beyond that.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, EncodeCache, LatentFeature};
use crate::codec::{DirectionSet, Message, ProjectionTargets};
use crate::error::{shape_check, Error, Result};
use crate::extractor::{bce_with_grad, ber_bits, soft_ber_with_grad};
use crate::image::Image;
use crate::nn::{self, Act, Linear, Params, SkipMlp, SkipMlpCache, Tensor};

/// The perturbed feature `q`; same unit-norm contract as any feature.
pub type PerturbedFeature = LatentFeature;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageMode {
    RandomSidecar,
    KeyDerived,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    /// `s` in `q = normalize(f + s * dq)`.
    pub perturb_scale: f64,
    /// Add a rendered residual to the cover (true) or regenerate the image from `q`.
    pub residual_mode: bool,
    pub message_mode: MessageMode,
    pub phi_hidden: usize,
    /// Initial weight of the feature block of the perturbation net's skip path.
    pub feature_gain: f64,
    /// Initial weight of the fused-message block of that skip path.
    pub message_gain: f64,
    /// Steering steps of the residual renderer.
    pub steps: usize,
    pub step_size: f64,
    /// RMS of the residual before the output tanh.
    pub amplitude: f64,
    pub steer_hidden: usize,
    /// Restrict the latent gap to the span of the directions before steering.
    pub span_only: bool,
    pub regen_hidden: usize,
    pub regen_grid: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            perturb_scale: 0.2,
            residual_mode: true,
            message_mode: MessageMode::RandomSidecar,
            phi_hidden: 512,
            feature_gain: -5.0,
            message_gain: 3.0,
            steps: 3,
            step_size: 0.5,
            amplitude: 0.03,
            steer_hidden: 256,
            span_only: true,
            regen_hidden: 256,
            regen_grid: 16,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perturb_scale > 0.0) || !(self.amplitude >= 0.0) || !(self.step_size > 0.0) {
            return Err(Error::Config("embed: perturb_scale and step_size must be positive".into()));
        }
        if self.residual_mode && self.steps == 0 {
            return Err(Error::Config("embed.steps must be at least 1".into()));
        }
        if self.regen_grid == 0 || self.phi_hidden == 0 {
            return Err(Error::Config("embed: layer sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.1, beta: 1.0, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|v| !(*v >= 0.0)) || all.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("loss weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }

    pub fn combine(&self, clip: f64, dir: f64, ext: f64) -> f64 {
        self.alpha * clip + self.beta * dir + self.gamma * ext
    }
}

/// `sum_i s_i * xi * d_i` with `s_i = +1` for bit 1 and `-1` for bit 0,
/// `xi = (xi_one - xi_zero) / 2`.
pub fn fuse_message_directions(msg: &Message, dirs: &DirectionSet, targets: &ProjectionTargets) -> Result<Vec<f64>> {
    shape_check("message vs directions", msg.len(), dirs.l)?;
    let xi = targets.half_gap();
    let c: Vec<f64> = msg.signs().iter().map(|s| s * xi).collect();
    Ok(dirs.combine(&c))
}

#[derive(Clone, Debug, PartialEq)]
enum Decoder {
    Residual { steer: SkipMlp },
    Regen { l1: Linear, l2: Linear, grid: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    cfg: EmbedConfig,
    zeta: usize,
    res: usize,
    phi: SkipMlp,
    dec: Decoder,
}

pub struct PerturbCache {
    mlp: SkipMlpCache,
    dq: Vec<f64>,
    q: Vec<f64>,
    z_norm: f64,
}

struct StepCache {
    enc: EncodeCache,
    /// Latent gap before projection, `q - f(x_k)`.
    gap: Vec<f64>,
    steer: SkipMlpCache,
    g: Vec<f64>,
    g_norm: f64,
    pre: Vec<f64>,
    pre_norm: f64,
}

enum RenderCache {
    Residual { steps: Vec<StepCache>, rho: Vec<f64>, pass: Vec<bool> },
    Regen { pre: Vec<f64>, h: Vec<f64>, q: Vec<f64>, out: Vec<f64> },
}

/// Everything [`Embedder::backward`] needs from one embedding.
pub struct EmbedCache {
    signs: Vec<f64>,
    xi: f64,
    pert: PerturbCache,
    render: RenderCache,
}

const KAPPA: f64 = 1e-6;

fn rms_normalize(v: &[f64], amp: f64) -> (Vec<f64>, f64) {
    let n = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64 + KAPPA * KAPPA).sqrt();
    (v.iter().map(|x| amp * x / n).collect(), n)
}

/// Adjoint of `y = amp * v / sqrt(mean(v^2) + kappa^2)`.
fn rms_normalize_backward(v: &[f64], n: f64, amp: f64, dy: &[f64]) -> Vec<f64> {
    let len = v.len() as f64;
    let proj: f64 = v.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>() / (len * n * n);
    v.iter().zip(dy).map(|(vi, di)| amp / n * (di - vi * proj)).collect()
}

/// Bilinear taps from a `g x g` grid to `r x r` (pixel-centre aligned).
fn upsample_taps(g: usize, r: usize) -> Vec<[(usize, f64); 2]> {
    (0..r)
        .map(|i| {
            let u = ((i as f64 + 0.5) * g as f64 / r as f64 - 0.5).clamp(0.0, (g - 1) as f64);
            let i0 = (u.floor() as usize).min(g.saturating_sub(2));
            let i1 = (i0 + 1).min(g - 1);
            let t = u - i0 as f64;
            [(i0, 1.0 - t), (i1, t)]
        })
        .collect()
}

impl Embedder {
    pub fn new(cfg: &EmbedConfig, zeta: usize, res: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (gf, gu) = (cfg.feature_gain, cfg.message_gain);
        let phi = SkipMlp::new(2 * zeta, cfg.phi_hidden, zeta, Act::Gelu, rng, |r, c| {
            if c == r {
                gf
            } else if c == r + zeta {
                gu
            } else {
                0.0
            }
        });
        let dec = if cfg.residual_mode {
            Decoder::Residual {
                steer: SkipMlp::new(zeta, cfg.steer_hidden, zeta, Act::Gelu, rng, |r, c| if r == c { 1.0 } else { 0.0 }),
            }
        } else {
            let g = cfg.regen_grid;
            let mut l2 = Linear::new(cfg.regen_hidden, 3 * g * g, rng);
            l2.w.data.iter_mut().for_each(|v| *v *= 0.1);
            Decoder::Regen { l1: Linear::new(zeta, cfg.regen_hidden, rng), l2, grid: g }
        };
        Ok(Embedder { cfg: cfg.clone(), zeta, res, phi, dec })
    }

    pub fn config(&self) -> &EmbedConfig {
        &self.cfg
    }

    /// Zeroes the perturbation net's output layer, so `q = f`.
    pub fn zero_output(&mut self) {
        self.phi.out.w.fill(0.0);
        self.phi.out.b.fill(0.0);
    }

    pub fn perturb(&self, f: &LatentFeature, fused: &[f64]) -> Result<(PerturbedFeature, PerturbCache)> {
        shape_check("feature", f.dim(), self.zeta)?;
        shape_check("fused message", fused.len(), self.zeta)?;
        let mut input = f.as_slice().to_vec();
        input.extend_from_slice(fused);
        let (y, mlp) = self.phi.forward(&input);
        let dq: Vec<f64> = y.iter().map(|v| v.tanh()).collect();
        let s = self.cfg.perturb_scale;
        let z: Vec<f64> = f.as_slice().iter().zip(&dq).map(|(a, b)| a + s * b).collect();
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence("perturbation net produced non-finite activations".into()));
        }
        let (q, z_norm) = nn::normalize(&z);
        if !(z_norm > 0.0) {
            return Err(Error::Divergence("perturbed feature collapsed to zero".into()));
        }
        let qf = LatentFeature::new(q.clone())?;
        Ok((qf, PerturbCache { mlp, dq, q, z_norm }))
    }

    /// Returns the cotangent of the fused vector.
    fn perturb_backward(&self, c: &PerturbCache, dq_out: &[f64], g: &mut Embedder) -> Vec<f64> {
        let dz = nn::normalize_backward(&c.q, c.z_norm, dq_out);
        let s = self.cfg.perturb_scale;
        let dy: Vec<f64> = dz.iter().zip(&c.dq).map(|(d, t)| s * d * (1.0 - t * t)).collect();
        let dinput = self.phi.backward(&c.mlp, &dy, &mut g.phi);
        dinput[self.zeta..].to_vec()
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        if x.h != self.res || x.w != self.res {
            return Err(Error::Shape(format!("image is {}x{}, embedder renders {r}x{r}", x.h, x.w, r = self.res)));
        }
        Ok(())
    }

    fn render(
        &self,
        bb: &Backbone,
        x: &Image,
        q: &[f64],
        dirs: &DirectionSet,
    ) -> Result<(Image, Vec<f64>, RenderCache)> {
        match &self.dec {
            Decoder::Residual { steer } => {
                let k_steps = self.cfg.steps;
                let amp = self.cfg.amplitude;
                let eta = if k_steps == 1 { 1.0 } else { self.cfg.step_size };
                let s = self.cfg.perturb_scale;
                let mut res = vec![0.0; x.data.len()];
                let mut steps = Vec::with_capacity(k_steps);
                for _ in 0..k_steps {
                    let xk = Image { h: x.h, w: x.w, data: x.data.iter().zip(&res).map(|(a, b)| a + b).collect() };
                    let enc = bb.forward(&xk)?;
                    let gap: Vec<f64> = q.iter().zip(&enc.feature).map(|(a, b)| a - b).collect();
                    let r = if self.cfg.span_only { dirs.span_project(&gap) } else { gap.clone() };
                    let r_s: Vec<f64> = r.iter().map(|v| v / s).collect();
                    let (u, sc) = steer.forward(&r_s);
                    let g = bb.vjp(&enc, &u);
                    let (gh, g_norm) = rms_normalize(&g, 1.0);
                    let pre: Vec<f64> = res.iter().zip(&gh).map(|(a, b)| a + eta * amp * b).collect();
                    let (next, pre_norm) = rms_normalize(&pre, amp);
                    res = next;
                    steps.push(StepCache { enc, gap, steer: sc, g, g_norm, pre, pre_norm });
                }
                let rho: Vec<f64> = res.iter().map(|v| v.tanh()).collect();
                let mut pass = Vec::with_capacity(rho.len());
                let mut out = x.clone();
                for (o, r) in out.data.iter_mut().zip(&rho) {
                    let v = *o + r;
                    pass.push((0.0..=1.0).contains(&v));
                    *o = v.clamp(0.0, 1.0);
                }
                Ok((out, rho.clone(), RenderCache::Residual { steps, rho, pass }))
            }
            Decoder::Regen { l1, l2, grid } => {
                let g = *grid;
                let pre = l1.forward(q);
                let h: Vec<f64> = pre.iter().map(|&v| Act::Gelu.f(v)).collect();
                let low = l2.forward(&h);
                let (r, n) = (self.res, self.res * self.res);
                let taps = upsample_taps(g, r);
                let mut out = vec![0.0; 3 * n];
                for c in 0..3 {
                    for y in 0..r {
                        for xx in 0..r {
                            let mut v = 0.0;
                            for &(iy, wy) in &taps[y] {
                                for &(ix, wx) in &taps[xx] {
                                    v += wy * wx * low[c * g * g + iy * g + ix];
                                }
                            }
                            out[c * n + y * r + xx] = v.tanh();
                        }
                    }
                }
                let img = Image { h: r, w: r, data: out.iter().map(|v| 0.5 * (v + 1.0)).collect() };
                Ok((img, out.clone(), RenderCache::Regen { pre, h, q: q.to_vec(), out }))
            }
        }
    }

    /// Returns (dq, d direction rows) for an output-image cotangent.
    fn render_backward(
        &self,
        bb: &Backbone,
        cache: &RenderCache,
        dx_out: &[f64],
        q: &[f64],
        dirs: &DirectionSet,
        g: &mut Embedder,
    ) -> (Vec<f64>, Vec<f64>) {
        let z = self.zeta;
        let mut dq = vec![0.0; z];
        let mut dd = vec![0.0; dirs.l * z];
        match (&self.dec, cache, &mut g.dec) {
            (Decoder::Residual { steer }, RenderCache::Residual { steps, rho, pass }, Decoder::Residual { steer: gs }) => {
                let k_steps = steps.len();
                let amp = self.cfg.amplitude;
                let eta = if k_steps == 1 { 1.0 } else { self.cfg.step_size };
                let s = self.cfg.perturb_scale;
                let mut dres: Vec<f64> = dx_out
                    .iter()
                    .zip(pass)
                    .zip(rho)
                    .map(|((d, &p), r)| if p { d * (1.0 - r * r) } else { 0.0 })
                    .collect();
                for st in steps.iter().rev() {
                    let dpre = rms_normalize_backward(&st.pre, st.pre_norm, amp, &dres);
                    let dgh: Vec<f64> = dpre.iter().map(|v| eta * amp * v).collect();
                    let dg = rms_normalize_backward(&st.g, st.g_norm, 1.0, &dgh);
                    let du = bb.jvp(&st.enc, &dg);
                    let dr_s = steer.backward(&st.steer, &du, gs);
                    let dr: Vec<f64> = dr_s.iter().map(|v| v / s).collect();
                    if self.cfg.span_only {
                        // r = sum_i d_i <d_i, gap>
                        let c_gap = dirs.project_raw(&st.gap);
                        let c_dr = dirs.project_raw(&dr);
                        for (a, b) in dq.iter_mut().zip(dirs.combine(&c_dr)) {
                            *a += b;
                        }
                        for i in 0..dirs.l {
                            let row = &mut dd[i * z..(i + 1) * z];
                            for k in 0..z {
                                row[k] += c_gap[i] * dr[k] + c_dr[i] * st.gap[k];
                            }
                        }
                    } else {
                        dq.iter_mut().zip(&dr).for_each(|(a, b)| *a += b);
                    }
                    // earlier steering points are treated as constants
                    dres = dpre;
                }
            }
            (Decoder::Regen { l1, l2, grid }, RenderCache::Regen { pre, h, q: qc, out }, Decoder::Regen { l1: g1, l2: g2, .. }) => {
                let gsz = *grid;
                let (r, n) = (self.res, self.res * self.res);
                let taps = upsample_taps(gsz, r);
                let mut dlow = vec![0.0; 3 * gsz * gsz];
                for c in 0..3 {
                    for y in 0..r {
                        for xx in 0..r {
                            let i = c * n + y * r + xx;
                            let d = 0.5 * dx_out[i] * (1.0 - out[i] * out[i]);
                            for &(iy, wy) in &taps[y] {
                                for &(ix, wx) in &taps[xx] {
                                    dlow[c * gsz * gsz + iy * gsz + ix] += wy * wx * d;
                                }
                            }
                        }
                    }
                }
                let dh = l2.backward(h, &dlow, g2);
                let dpre: Vec<f64> = dh.iter().zip(pre).map(|(d, p)| d * Act::Gelu.df(*p)).collect();
                let dqr = l1.backward(qc, &dpre, g1);
                dq.iter_mut().zip(&dqr).for_each(|(a, b)| *a += b);
                let _ = q;
            }
            _ => unreachable!("decoder and cache disagree"),
        }
        (dq, dd)
    }

    /// Decoded image in [-1, 1]: the residual in residual mode, the full
    /// regenerated image otherwise.
    pub fn decode_image(&self, bb: &Backbone, x: &Image, q: &PerturbedFeature, dirs: &DirectionSet) -> Result<Image> {
        self.check_image(x)?;
        let (_, decoded, _) = self.render(bb, x, q.as_slice(), dirs)?;
        Ok(Image { h: x.h, w: x.w, data: decoded })
    }

    /// Watermarks `x` given its (precomputed) clean feature `f`.
    pub fn embed_with_cache(
        &self,
        bb: &Backbone,
        x: &Image,
        f: &LatentFeature,
        msg: &Message,
        dirs: &DirectionSet,
        targets: &ProjectionTargets,
    ) -> Result<(Image, PerturbedFeature, EmbedCache)> {
        self.check_image(x)?;
        let fused = fuse_message_directions(msg, dirs, targets)?;
        let (q, pert) = self.perturb(f, &fused)?;
        let (img, _, render) = self.render(bb, x, q.as_slice(), dirs)?;
        if !img.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence("renderer produced non-finite pixels".into()));
        }
        Ok((img, q, EmbedCache { signs: msg.signs(), xi: targets.half_gap(), pert, render }))
    }

    pub fn embed(
        &self,
        bb: &Backbone,
        x: &Image,
        msg: &Message,
        dirs: &DirectionSet,
        targets: &ProjectionTargets,
    ) -> Result<Image> {
        let f = bb.encode_image(x)?;
        Ok(self.embed_with_cache(bb, x, &f, msg, dirs, targets)?.0)
    }

    /// Accumulates parameter gradients for a watermarked-image cotangent and
    /// returns the cotangent of the direction rows.
    pub fn backward(
        &self,
        bb: &Backbone,
        cache: &EmbedCache,
        dx_out: &[f64],
        dirs: &DirectionSet,
        g: &mut Embedder,
    ) -> Vec<f64> {
        let (dq, mut dd) = self.render_backward(bb, &cache.render, dx_out, &cache.pert.q, dirs, g);
        let dfused = self.perturb_backward(&cache.pert, &dq, g);
        let z = self.zeta;
        for (i, s) in cache.signs.iter().enumerate() {
            let c = s * cache.xi;
            for (o, v) in dd[i * z..(i + 1) * z].iter_mut().zip(&dfused) {
                *o += c * v;
            }
        }
        dd
    }
}

impl Params for Embedder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.phi.visit(&mut |n, t| f(&format!("phi.{n}"), t));
        match &self.dec {
            Decoder::Residual { steer } => steer.visit(&mut |n, t| f(&format!("steer.{n}"), t)),
            Decoder::Regen { l1, l2, .. } => {
                l1.visit(&mut |n, t| f(&format!("regen.l1.{n}"), t));
                l2.visit(&mut |n, t| f(&format!("regen.l2.{n}"), t));
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.phi.visit_mut(&mut |n, t| f(&format!("phi.{n}"), t));
        match &mut self.dec {
            Decoder::Residual { steer } => steer.visit_mut(&mut |n, t| f(&format!("steer.{n}"), t)),
            Decoder::Regen { l1, l2, .. } => {
                l1.visit_mut(&mut |n, t| f(&format!("regen.l1.{n}"), t));
                l2.visit_mut(&mut |n, t| f(&format!("regen.l2.{n}"), t));
            }
        }
    }
}

/// Logits of one extraction together with the message they should match.
pub type Branch<'a> = (&'a [f64], &'a [u8]);

/// Inputs of the watermarker loss for one batch.
#[derive(Default)]
pub struct LossInputs<'a> {
    /// `(f(x), f(x'))` pairs.
    pub clip: Vec<(&'a [f64], &'a [f64])>,
    pub clean: Vec<Branch<'a>>,
    pub benign: Vec<Branch<'a>>,
    pub malicious: Vec<Branch<'a>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clip: f64,
    pub dir: f64,
    /// `-BER` on the malicious branch (hard bits).
    pub ext: f64,
    /// `-soft BER`, the differentiable stand-in.
    pub ext_surrogate: f64,
    /// Weighted sum with the hard `ext`.
    pub total: f64,
    /// Weighted sum with the surrogate; this is what gradients descend.
    pub surrogate_total: f64,
    /// Branches that had no samples this step and contributed 0.
    pub missing: Vec<String>,
}

/// Gradients of `surrogate_total`.
#[derive(Clone, Debug, Default)]
pub struct LossGrads {
    /// d/d f(x') for each clip pair.
    pub clip: Vec<Vec<f64>>,
    pub clean: Vec<Vec<f64>>,
    pub benign: Vec<Vec<f64>>,
    pub malicious: Vec<Vec<f64>>,
}

/// `alpha * L_clip + beta * L_dir + gamma * L_ext`.
///
/// `L_clip` is the mean squared feature distance, `L_dir` the mean BCE on
/// clean extractions plus the mean BCE on benign-attacked ones, and `L_ext`
/// minus the mean BER on malicious extractions.
pub fn loss_w(inp: &LossInputs, w: &LossWeights) -> Result<(LossBreakdown, LossGrads)> {
    let mut out = LossBreakdown::default();
    let mut grads = LossGrads::default();
    if inp.clip.is_empty() {
        out.missing.push("clip".into());
    } else {
        let n = inp.clip.len() as f64;
        for (f, fw) in &inp.clip {
            shape_check("clip pair", f.len(), fw.len())?;
            out.clip += f.iter().zip(*fw).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
            grads.clip.push(f.iter().zip(*fw).map(|(a, b)| -2.0 * w.alpha * (a - b) / n).collect());
        }
    }
    let bce_branch = |items: &[Branch], name: &str, out: &mut LossBreakdown| -> Result<Vec<Vec<f64>>> {
        if items.is_empty() {
            out.missing.push(name.into());
            return Ok(Vec::new());
        }
        let n = items.len() as f64;
        let mut gs = Vec::with_capacity(items.len());
        for (l, b) in items {
            shape_check("logits vs message", l.len(), b.len())?;
            let (v, g) = bce_with_grad(l, b);
            out.dir += v / n;
            gs.push(g.iter().map(|x| w.beta * x / n).collect());
        }
        Ok(gs)
    };
    grads.clean = bce_branch(&inp.clean, "clean", &mut out)?;
    grads.benign = bce_branch(&inp.benign, "benign", &mut out)?;
    if inp.malicious.is_empty() {
        out.missing.push("malicious".into());
    } else {
        let n = inp.malicious.len() as f64;
        for (l, b) in &inp.malicious {
            shape_check("logits vs message", l.len(), b.len())?;
            let hard: Vec<u8> = l.iter().map(|&v| u8::from(v > 0.0)).collect();
            out.ext -= ber_bits(&hard, b)? / n;
            let (v, g) = soft_ber_with_grad(l, b);
            out.ext_surrogate -= v / n;
            grads.malicious.push(g.iter().map(|x| -w.gamma * x / n).collect());
        }
    }
    out.total = w.combine(out.clip, out.dir, out.ext);
    out.surrogate_total = w.combine(out.clip, out.dir, out.ext_surrogate);
    if !out.surrogate_total.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss: {out:?}")));
    }
    Ok((out, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::synth;
    use rand::SeedableRng;

    fn setup(residual: bool) -> (Backbone, Embedder, DirectionSet) {
        let bcfg = BackboneConfig {
            feature_dim: 8,
            resolution: Some(8),
            radial_bins: 3,
            orientation_bins: 3,
            ..Default::default()
        };
        let bb = Backbone::new(&bcfg).unwrap();
        let cfg = EmbedConfig {
            residual_mode: residual,
            steps: 1,
            phi_hidden: 16,
            steer_hidden: 12,
            regen_hidden: 10,
            regen_grid: 4,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = Embedder::new(&cfg, 8, 8, &mut rng).unwrap();
        (bb, emb, DirectionSet::canonical(4, 8).unwrap())
    }

    #[test]
    fn zero_output_is_identity() {
        let (bb, mut emb, dirs) = setup(true);
        emb.zero_output();
        let x = synth::dataset(1, 8, 0).remove(0);
        let m = Message::new(vec![1, 0, 1, 1]).unwrap();
        let y = emb.embed(&bb, &x, &m, &dirs, &ProjectionTargets::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn fuse_basis_case() {
        let dirs = DirectionSet::canonical(2, 4).unwrap();
        let m = Message::new(vec![1, 0]).unwrap();
        let v = fuse_message_directions(&m, &dirs, &ProjectionTargets::default()).unwrap();
        assert!(v.iter().zip([0.1, -0.1, 0.0, 0.0]).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn regen_output_in_range() {
        let (bb, emb, dirs) = setup(false);
        let x = synth::dataset(1, 8, 0).remove(0);
        let f = bb.encode_image(&x).unwrap();
        let d = emb.decode_image(&bb, &x, &f, &dirs).unwrap();
        assert!(d.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(d.data.len(), 3 * 64);
    }

    #[test]
    fn weighted_sum_example() {
        let w = LossWeights { alpha: 1.0, beta: 1.0, gamma: 1.0 };
        assert!((w.combine(0.2, 0.5, -0.8) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn missing_branches_are_flagged() {
        let f = [1.0, 0.0];
        let fw = [0.0, 1.0];
        let inp = LossInputs { clip: vec![(&f, &fw)], ..Default::default() };
        let (b, _) = loss_w(&inp, &LossWeights::default()).unwrap();
        assert_eq!(b.clip, 2.0);
        assert_eq!(b.missing, vec!["clean", "benign", "malicious"]);
        assert_eq!(b.dir, 0.0);
        assert_eq!(b.ext, 0.0);
    }

    #[test]
    fn complement_gives_minus_one() {
        let l = [5.0, -5.0, -5.0];
        let m = [0u8, 1, 1];
        let inp = LossInputs { malicious: vec![(&l, &m)], ..Default::default() };
        let (b, _) = loss_w(&inp, &LossWeights::default()).unwrap();
        assert_eq!(b.ext, -1.0);
    }

    fn fd_check(residual: bool) {
        let (bb, mut emb, _) = setup(residual);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = crate::codec::DirectionGenerator::new(8, 4, &mut rng).unwrap();
        let key = bb.encode_key("k").unwrap();
        let (dirs, _) = gen.forward(&key, "fp").unwrap();
        let mut x = synth::dataset(1, 8, 2).remove(0);
        x.data.iter_mut().for_each(|v| *v = 0.2 + 0.6 * *v);
        let f = bb.encode_image(&x).unwrap();
        let m = Message::new(vec![1, 0, 0, 1]).unwrap();
        let t = ProjectionTargets::default();
        let w: Vec<f64> = (0..x.data.len()).map(|i| (i as f64 * 0.7).sin()).collect();
        let obj = |e: &Embedder, d: &DirectionSet| {
            let (y, _, _) = e.embed_with_cache(&bb, &x, &f, &m, d, &t).unwrap();
            nn::dot(&y.data, &w)
        };
        let (_, _, cache) = emb.embed_with_cache(&bb, &x, &f, &m, &dirs, &t).unwrap();
        let mut g = nn::grads_like(&emb);
        let dd = emb.backward(&bb, &cache, &w, &dirs, &mut g);
        let flat = emb.flat();
        let gflat = g.flat();
        let h = 1e-6;
        let mut checked = 0;
        for i in (0..flat.len()).step_by(flat.len() / 40 + 1) {
            let mut a = flat.clone();
            a[i] += h;
            emb.set_flat(&a);
            let up = obj(&emb, &dirs);
            a[i] -= 2.0 * h;
            emb.set_flat(&a);
            let dn = obj(&emb, &dirs);
            let num = (up - dn) / (2.0 * h);
            let err = (num - gflat[i]).abs() / num.abs().max(gflat[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: fd {num} vs {}", gflat[i]);
            checked += 1;
        }
        emb.set_flat(&flat);
        assert!(checked > 10);
        for i in 0..dirs.rows.len() {
            let mut a = dirs.clone();
            a.rows[i] += h;
            let up = obj(&emb, &a);
            a.rows[i] -= 2.0 * h;
            let num = (up - obj(&emb, &a)) / (2.0 * h);
            let err = (num - dd[i]).abs() / num.abs().max(dd[i].abs()).max(1e-6);
            assert!(err < 1e-4, "row entry {i}: fd {num} vs {}", dd[i]);
        }
    }

    #[test]
    fn residual_backward_matches_fd_single_step() {
        fd_check(true);
    }

    #[test]
    fn regen_backward_matches_fd() {
        fd_check(false);
    }
}
