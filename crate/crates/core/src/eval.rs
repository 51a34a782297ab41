//! Image-quality and robustness metrics, the evaluation protocol and reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{apply, AttackAction, AttackContext, AttackKind};
use crate::codec::{DirectionSet, Message};
use crate::error::{shape_check, Error, Result};
use crate::extractor::{ber, calibrate_threshold_scored, is_fake};
use crate::image::Image;
use crate::model::Watermarker;
use crate::seed::{self, stream};

/// PSNR is reported as this value for identical images.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out procedural images when no directory is given.
    pub test_images: usize,
    pub test_seed: u64,
    pub data_dir: Option<String>,
    pub strengths: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { test_images: 64, test_seed: 99_999, data_dir: None, strengths: vec![0.25, 0.5, 0.75], seed: 5 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.test_images < 2 {
            return Err(Error::Config("eval.test_images must be at least 2".into()));
        }
        if self.strengths.is_empty() || self.strengths.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("eval.strengths must be a non-empty list in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub out_dir: String,
    pub plots: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { out_dir: "report".into(), plots: true }
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::Shape(format!("images differ in size: {}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    shape_check("pixel buffer", a.data.len(), b.data.len())
}

/// Peak signal-to-noise ratio for a [0, 1] range, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64; SSIM_WIN]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WIN + 1, w - SSIM_WIN + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over channels: 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    if a.h < SSIM_WIN || a.w < SSIM_WIN {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WIN}x{SSIM_WIN} pixels, got {}x{}", a.h, a.w)));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = gaussian_window();
    let (h, w, n) = (a.h, a.w, a.plane());
    let mut total = 0.0;
    for c in 0..3 {
        let x = &a.data[c * n..(c + 1) * n];
        let y = &b.data[c * n..(c + 1) * n];
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let exx = filter_valid(&prod(x, x), h, w, &k);
        let eyy = filter_valid(&prod(y, y), h, w, &k);
        let exy = filter_valid(&prod(x, y), h, w, &k);
        let mut s = 0.0;
        for i in 0..mx.len() {
            let sx = exx[i] - mx[i] * mx[i];
            let sy = eyy[i] - my[i] * my[i];
            let sxy = exy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * sxy + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (sx + sy + c2);
            s += num / den;
        }
        total += s / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// Bit recovery accuracy, `1 - BER`.
pub fn bra(recovered: &Message, reference: &Message) -> Result<f64> {
    Ok(1.0 - ber(recovered, reference)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub lambda: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// F1 with the convention that an undefined ratio counts as 0.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Detection quality with malicious edits as the positive class.
pub fn detection_metrics(benign_ber: &[f64], malicious_ber: &[f64], lambda: f64) -> DetectionMetrics {
    let tp = malicious_ber.iter().filter(|&&b| is_fake(b, lambda)).count();
    let fp = benign_ber.iter().filter(|&&b| is_fake(b, lambda)).count();
    let (fn_, tn) = (malicious_ber.len() - tp, benign_ber.len() - fp);
    let n = (tp + fp + tn + fn_).max(1) as f64;
    DetectionMetrics {
        lambda,
        tp,
        fp,
        tn,
        fn_,
        precision: if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 },
        recall: if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 },
        f1: f1_score(tp, fp, fn_),
        accuracy: (tp + tn) as f64 / n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack: String,
    pub kind: AttackKind,
    pub strength: f64,
    /// Mean bit recovery accuracy.
    pub bra: f64,
    /// Fraction flagged as fake at the configured threshold.
    pub flagged: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrengthSummary {
    pub strength: f64,
    pub benign_bra: f64,
    pub malicious_bra: f64,
    /// `benign_bra - malicious_bra`.
    pub gap: f64,
    pub detection: DetectionMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub key_fingerprint: String,
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub clean_bra: f64,
    pub attacks: Vec<AttackResult>,
    pub strengths: Vec<StrengthSummary>,
}

impl EvalReport {
    pub fn at_strength(&self, tau: f64) -> Option<&StrengthSummary> {
        self.strengths.iter().find(|s| (s.strength - tau).abs() < 1e-12)
    }
}

fn eval_message(model: &Watermarker, cfg: &EvalConfig, i: usize) -> Message {
    Message::random(model.message_bits(), &mut seed::rng(cfg.seed, &[stream::EVAL, i as u64]))
}

/// Watermarks every image with its own seeded message.
pub fn watermark_set(model: &Watermarker, dirs: &DirectionSet, images: &[Image], cfg: &EvalConfig) -> Result<Vec<(Image, Message)>> {
    images
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let m = eval_message(model, cfg, i);
            Ok((model.embed(x, &m, dirs)?, m))
        })
        .collect()
}

/// Per-image BER after a single registry attack at strength `tau`; donor for
/// image `i` is image `i + 1` (cyclic).
pub fn attacked_bers(
    model: &Watermarker,
    dirs: &DirectionSet,
    images: &[Image],
    marked: &[(Image, Message)],
    attack: usize,
    tau: f64,
    cfg: &EvalConfig,
) -> Result<Vec<f64>> {
    let n = images.len();
    let action = AttackAction::single(model.registry.len(), attack, tau);
    marked
        .iter()
        .enumerate()
        .map(|(i, (xw, m))| {
            let ctx = AttackContext {
                seed: seed::derive(cfg.seed, &[stream::ATTACK, attack as u64, i as u64, tau.to_bits()]),
                donor: Some(&images[(i + 1) % n]),
            };
            let xa = apply(xw, &action, &model.registry, &ctx)?;
            model.bit_error_rate(&xa, dirs, m)
        })
        .collect()
}

/// Benign and malicious BER pools at `tau`, over every registry attack.
pub fn detection_scores(
    model: &Watermarker,
    dirs: &DirectionSet,
    images: &[Image],
    marked: &[(Image, Message)],
    tau: f64,
    cfg: &EvalConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut b, mut m) = (Vec::new(), Vec::new());
    for spec in &model.registry.specs {
        let v = attacked_bers(model, dirs, images, marked, spec.id, tau, cfg)?;
        match spec.kind {
            AttackKind::Benign => b.extend(v),
            AttackKind::Malicious => m.extend(v),
        }
    }
    Ok((b, m))
}

/// Threshold maximising balanced accuracy at strength 0.5, and that accuracy.
pub fn calibrate(model: &Watermarker, dirs: &DirectionSet, images: &[Image], cfg: &EvalConfig) -> Result<(f64, f64)> {
    let marked = watermark_set(model, dirs, images, cfg)?;
    let (b, m) = detection_scores(model, dirs, images, &marked, 0.5, cfg)?;
    calibrate_threshold_scored(&b, &m)
}

pub fn evaluate(model: &Watermarker, dirs: &DirectionSet, images: &[Image], cfg: &EvalConfig) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Validation("evaluation needs at least one image".into()));
    }
    let marked = watermark_set(model, dirs, images, cfg)?;
    let n = images.len() as f64;
    let mut ps = 0.0;
    let mut ss = Some(0.0);
    let mut clean = 0.0;
    for (x, (xw, m)) in images.iter().zip(&marked) {
        ps += psnr(x, xw)? / n;
        ss = match (ss, ssim(x, xw)) {
            (Some(a), Ok(v)) => Some(a + v / n),
            _ => None,
        };
        clean += (1.0 - model.bit_error_rate(xw, dirs, m)?) / n;
    }
    let lambda = model.cfg.detector.lambda;
    let mut attacks = Vec::new();
    let mut strengths = Vec::new();
    for &tau in &cfg.strengths {
        let (mut bpool, mut mpool) = (Vec::new(), Vec::new());
        let (mut bsum, mut msum, mut bn, mut mn) = (0.0, 0.0, 0usize, 0usize);
        for spec in &model.registry.specs {
            let v = attacked_bers(model, dirs, images, &marked, spec.id, tau, cfg)?;
            let bra_a = 1.0 - v.iter().sum::<f64>() / v.len() as f64;
            let flagged = v.iter().filter(|&&b| is_fake(b, lambda)).count() as f64 / v.len() as f64;
            attacks.push(AttackResult { attack: spec.name.clone(), kind: spec.kind, strength: tau, bra: bra_a, flagged });
            match spec.kind {
                AttackKind::Benign => {
                    bsum += bra_a;
                    bn += 1;
                    bpool.extend(v);
                }
                AttackKind::Malicious => {
                    msum += bra_a;
                    mn += 1;
                    mpool.extend(v);
                }
            }
        }
        let benign_bra = if bn > 0 { bsum / bn as f64 } else { f64::NAN };
        let malicious_bra = if mn > 0 { msum / mn as f64 } else { f64::NAN };
        strengths.push(StrengthSummary {
            strength: tau,
            benign_bra,
            malicious_bra,
            gap: benign_bra - malicious_bra,
            detection: detection_metrics(&bpool, &mpool, lambda),
        });
    }
    Ok(EvalReport {
        images: images.len(),
        key_fingerprint: dirs.key_fingerprint.clone(),
        psnr: ps,
        ssim: ss,
        clean_bra: clean,
        attacks,
        strengths,
    })
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart with values in [0, 1].
pub fn bar_chart_svg(title: &str, labels: &[String], series: &[(String, Vec<f64>)]) -> String {
    const COLORS: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];
    let (w, h, left, bottom, top) = (80.0 + 70.0 * labels.len() as f64, 320.0, 50.0, 60.0, 40.0);
    let plot_h = h - bottom - top;
    let group = 70.0;
    let bw = (group - 14.0) / series.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, esc(title));
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, w - 10.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y + 4.0);
    }
    for (gi, label) in labels.iter().enumerate() {
        let gx = left + 7.0 + group * gi as f64;
        for (si, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(gi).copied().unwrap_or(0.0);
            let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            let bh = plot_h * v;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                gx + bw * si as f64,
                top + plot_h - bh,
                bw - 1.0,
                bh,
                COLORS[si % COLORS.len()]
            );
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, gx + (group - 14.0) / 2.0, h - bottom + 14.0, esc(label));
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let x = left + 110.0 * si as f64;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, h - 22.0, COLORS[si % COLORS.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x + 14.0, h - 13.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.json`, and with `plots`, `bra_by_attack.svg` and `benign_vs_malicious.svg`.
pub fn write_report(report: &EvalReport, dir: &Path, plots: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("report.json");
    std::fs::write(&p, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&p, e))?;
    if !plots {
        return Ok(());
    }
    let mut names: Vec<String> = Vec::new();
    for a in &report.attacks {
        if !names.contains(&a.attack) {
            names.push(a.attack.clone());
        }
    }
    let series: Vec<(String, Vec<f64>)> = report
        .strengths
        .iter()
        .map(|s| {
            let vals = names
                .iter()
                .map(|n| {
                    report
                        .attacks
                        .iter()
                        .find(|a| &a.attack == n && a.strength == s.strength)
                        .map_or(f64::NAN, |a| a.bra)
                })
                .collect();
            (format!("strength {:.2}", s.strength), vals)
        })
        .collect();
    let p = dir.join("bra_by_attack.svg");
    std::fs::write(&p, bar_chart_svg("Bit recovery accuracy by attack", &names, &series)).map_err(|e| Error::io(&p, e))?;
    let labels: Vec<String> = report.strengths.iter().map(|s| format!("{:.2}", s.strength)).collect();
    let series = vec![
        ("benign".to_string(), report.strengths.iter().map(|s| s.benign_bra).collect()),
        ("malicious".to_string(), report.strengths.iter().map(|s| s.malicious_bra).collect()),
    ];
    let p = dir.join("benign_vs_malicious.svg");
    std::fs::write(&p, bar_chart_svg("Mean bit recovery accuracy by strength", &labels, &series)).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn psnr_of_known_mse() {
        let a = Image::filled(4, 4, 0.5);
        let b = Image::filled(4, 4, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_identity_and_small_images() {
        let x = synth::dataset(1, 24, 0).remove(0);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        assert!(ssim(&x, &y).unwrap() < 0.5);
        assert!(ssim(&Image::zeros(10, 10), &Image::zeros(10, 10)).is_err());
    }

    #[test]
    fn f1_conventions() {
        assert_eq!(f1_score(0, 0, 0), 0.0);
        assert_eq!(f1_score(0, 3, 2), 0.0);
        assert!((f1_score(1, 1, 0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s = bar_chart_svg("t<1>", &["a".into(), "b".into()], &[("s".into(), vec![0.5, f64::NAN])]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("t&lt;1&gt;"));
    }
}
