//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Criteria 11-14 train the desk-scale recipe (seven runs in total). Set
//! `LATMARK_ACCEPTANCE_QUICK=1` to skip them while iterating; they are then
//! reported as SKIP, never as PASS.

use std::time::{Duration, Instant};

use latmark::attacker::{
    bernoulli_entropy, logit_gradients, reward_curiosity, reward_proximity, FailureMemory, Policy,
};
use latmark::attacks::{map_params, AttackEntry, AttackRegistry};
use latmark::codec::{hard_decode, target_projections, CodecConfig};
use latmark::embedder::fuse_message_directions;
use latmark::eval::{self, bra, psnr, ssim, EvalReport};
use latmark::extractor::{ber, is_fake, DetectionVerdict};
use latmark::train::{Ablation, EpochStats, Trainer};
use latmark::{synth, Image, LatentFeature, Message, RunConfig, Watermarker};
use latmark::nn::Params;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DESK: &str = include_str!("../../../configs/desk.toml");

struct Outcome {
    pass: Option<bool>,
    detail: String,
}

fn pass(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass: Some(ok), detail: detail.into() }
}

fn desk() -> RunConfig {
    RunConfig::from_toml_str(DESK).expect("desk recipe parses")
}

fn c01_orthonormality() -> Outcome {
    let t0 = Instant::now();
    let m = Watermarker::new(&desk()).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let d = m.directions(&format!("key-{i}-{}", i * 7919)).unwrap();
        worst = worst.max(d.gram_error());
    }
    let dt = t0.elapsed();
    pass(worst < 1e-5 && dt < Duration::from_secs(10), format!("max |GG^T - I| = {worst:.2e} in {:.2}s", dt.as_secs_f64()))
}

fn c02_sphere() -> Outcome {
    let cfg = desk();
    let m = Watermarker::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dirs = m.directions("sphere").unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..500 {
        let img = if i % 2 == 0 {
            synth::gen_image(&mut rng, 64)
        } else {
            let data = (0..3 * 64 * 64).map(|_| rng.random::<f64>()).collect();
            Image::from_data(64, 64, data).unwrap()
        };
        let f = m.backbone.encode_image(&img).unwrap();
        let msg = Message::random(64, &mut rng);
        let fused = fuse_message_directions(&msg, &dirs, &m.targets).unwrap();
        let (q, _) = m.embedder.perturb(&f, &fused).unwrap();
        for v in [&f, &q] {
            worst = worst.max((latmark::nn::norm(v.as_slice()) - 1.0).abs());
            checked += 1;
        }
    }
    pass(worst < 1e-6, format!("{checked} features, max |norm - 1| = {worst:.2e}"))
}

fn c03_codec_roundtrip() -> Outcome {
    let t = CodecConfig::default().targets().unwrap();
    let mut bad = 0;
    for v in 0u32..4096 {
        let bits: Vec<u8> = (0..12).map(|i| ((v >> (11 - i)) & 1) as u8).collect();
        let m = Message::new(bits).unwrap();
        if hard_decode(&target_projections(&m, &t), &t) != m {
            bad += 1;
        }
    }
    pass(bad == 0, format!("4096 messages, {bad} mismatches"))
}

fn c04_param_map() -> Outcome {
    let mut reg = AttackRegistry::default_registry();
    reg.specs.extend(
        AttackRegistry::from_config(&latmark::attacks::AttacksConfig {
            entries: vec![AttackEntry { name: "noise".into(), kind: None, min: Some(0.013), max: Some(0.77), enabled: true }],
            external_cmd: Some("true".into()),
            external_kind: None,
        })
        .unwrap()
        .specs,
    );
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for s in &reg.specs {
        exact &= map_params(s, 0.0) == s.param_min && map_params(s, 1.0) == s.param_max;
        worst = worst.max((map_params(s, 0.5) - (s.param_min + s.param_max) / 2.0).abs());
    }
    pass(exact && worst <= 1e-12, format!("{} entries, endpoints exact: {exact}, midpoint error {worst:.1e}", reg.len()))
}

fn c05_bernoulli() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = Policy::new(8, 3, [4, 4], &mut rng);
    let logit = (0.3f64 / 0.7).ln();
    p.logits.b.data.iter_mut().for_each(|b| *b = logit);
    let f = LatentFeature::from_unnormalized(&[1.0, 0.5, -0.2, 0.0, 0.3, 0.0, 0.0, 0.1]).unwrap();
    let n = 10_000;
    let hits: usize = (0..n).map(|_| p.act(&f, &[true; 3], 0.0, &mut rng).action.selected[0] as usize).sum();
    let freq = hits as f64 / n as f64;
    pass((freq - 0.3).abs() <= 0.015, format!("empirical frequency {freq:.4} at P = 0.3"))
}

fn c06_entropy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = Watermarker::new(&desk()).unwrap();
    let f = m.backbone.encode_image(&synth::gen_image(&mut rng, 64)).unwrap();
    let n = m.registry.len();
    let ro = m.policy.act(&f, &vec![true; n], 0.0, &mut rng);
    let want = n as f64 * std::f64::consts::LN_2;
    let err = (ro.action.entropy - want).abs();
    let analytic = (bernoulli_entropy(0.5) - std::f64::consts::LN_2).abs();
    pass(err < 1e-9 && analytic < 1e-12, format!("entropy {:.12} vs |A| ln 2 = {want:.12}", ro.action.entropy))
}

fn c07_reinforce() -> Outcome {
    // Two independent Bernoulli arms; J = sum_a P(a) R(a) over 4 outcomes.
    // Both analytic components sit well above the Monte Carlo noise floor.
    let theta = [0.4, -0.7];
    let reward = |a: [u8; 2]| 0.5 + 3.0 * a[0] as f64 - 2.0 * a[1] as f64 + 0.5 * (a[0] * a[1]) as f64;
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let p = [sig(theta[0]), sig(theta[1])];
    let mut analytic = [0.0; 2];
    for a0 in 0..2u8 {
        for a1 in 0..2u8 {
            let a = [a0, a1];
            let pr: f64 = (0..2).map(|i| if a[i] == 1 { p[i] } else { 1.0 - p[i] }).product();
            for i in 0..2 {
                analytic[i] += pr * reward(a) * (a[i] as f64 - p[i]);
            }
        }
    }
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sels: Vec<[u8; 2]> = (0..n).map(|_| [u8::from(rng.random::<f64>() < p[0]), u8::from(rng.random::<f64>() < p[1])]).collect();
    let rewards: Vec<f64> = sels.iter().map(|&a| reward(a)).collect();
    let active = [true, true];
    let views: Vec<(&[f64], &[u8], &[bool])> = sels.iter().map(|s| (&theta[..], &s[..], &active[..])).collect();
    // gradient of the loss is minus the estimate of dJ
    let g = logit_gradients(&views, &rewards, 0.0, 0.0);
    let est: Vec<f64> = (0..2).map(|i| -g.iter().map(|r| r[i]).sum::<f64>()).collect();
    let rel = (0..2).map(|i| (est[i] - analytic[i]).abs() / analytic[i].abs()).fold(0.0, f64::max);
    pass(rel < 0.05, format!("sample {:.4?} vs analytic {:.4?}, max rel err {:.2}%", est, analytic, 100.0 * rel))
}

fn c08_rewards() -> Outcome {
    let (delta, nu, eps) = (1.0, 0.1, 1e-6);
    let mut e1 = vec![0.0; 16];
    let mut e2 = vec![0.0; 16];
    e1[3] = 1.0;
    e2[11] = 1.0;
    let (a, b) = (LatentFeature::new(e1).unwrap(), LatentFeature::new(e2).unwrap());
    let cur = reward_curiosity(&a, &b, delta);
    let cur2 = reward_curiosity(&a, &b, 2.5);
    let mut mem = FailureMemory::new(4);
    let empty = reward_proximity(&a, &mem, nu, eps);
    mem.update(&a, 1.0, 0.5);
    let prox = reward_proximity(&a, &mem, nu, eps);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cap = 37;
    let mut fifo = FailureMemory::new(cap);
    let mut shadow = std::collections::VecDeque::new();
    let mut fifo_ok = true;
    for i in 0..10_000 {
        let v: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5 + 1e-3).collect();
        let f = LatentFeature::from_unnormalized(&v).unwrap();
        let ber: f64 = rng.random();
        if fifo.update(&f, ber, 0.3) {
            if shadow.len() == cap {
                shadow.pop_front();
            }
            shadow.push_back(f);
        }
        fifo_ok &= fifo.len() <= cap && (i % 97 != 0 || fifo.entries().eq(shadow.iter()));
    }
    fifo_ok &= fifo.entries().eq(shadow.iter());
    let ok = cur == 2.0 * delta && cur2 == 5.0 && prox == nu / eps && empty == 0.0 && fifo_ok;
    pass(ok, format!("curiosity {cur}, proximity {prox:e} (nu/eps = {:e}), empty {empty}, FIFO ok {fifo_ok}", nu / eps))
}

fn tiny_gradcheck_config() -> RunConfig {
    let src = r#"
[backbone]
feature_dim = 8
resolution = 8
radial_bins = 3
orientation_bins = 3

[codec]
message_bits = 4

[embed]
steps = 1
phi_hidden = 16
steer_hidden = 12

[extractor]
hidden = 16

[attacker]
hidden = [8, 8]

[train]
batch_size = 4
synthetic_images = 4

[attacks]
entries = [
  { name = "noise" }, { name = "crop" }, { name = "jitter" }, { name = "affine" },
  { name = "mixup" }, { name = "patch_swap" }, { name = "elastic_warp" },
]
"#;
    RunConfig::from_toml_str(src).unwrap()
}

fn c09_gradcheck() -> Outcome {
    let t0 = Instant::now();
    let cfg = tiny_gradcheck_config();
    let mut data = synth::dataset(4, 8, 9);
    for img in &mut data {
        img.data.iter_mut().for_each(|v| *v = 0.15 + 0.7 * *v);
    }
    let mut t = Trainer::new(&cfg, "gradient-check", data).unwrap();
    let idx = [0, 1, 2, 3];
    let (lb, g) = t.loss_and_gradient(&idx, 0, 0).unwrap();
    let p0 = t.watermarker_params();
    let ng = t.model.generator.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // all embedder and extractor weights, a random sample of generator weights
    let mut coords: Vec<usize> = (ng..p0.len()).collect();
    coords.extend((0..400).map(|_| rng.random_range(0..ng)));
    let h = 1e-6;
    let (mut num2, mut den2, mut worst) = (0.0, 0.0, 0.0f64);
    for &i in &coords {
        let mut p = p0.clone();
        p[i] = p0[i] + h;
        t.set_watermarker_params(&p).unwrap();
        let up = t.loss_and_gradient(&idx, 0, 0).unwrap().0.surrogate_total;
        p[i] = p0[i] - h;
        t.set_watermarker_params(&p).unwrap();
        let dn = t.loss_and_gradient(&idx, 0, 0).unwrap().0.surrogate_total;
        let fd = (up - dn) / (2.0 * h);
        num2 += (fd - g[i]).powi(2);
        den2 += fd * fd;
        let scale = fd.abs().max(g[i].abs());
        if scale > 1e-4 {
            worst = worst.max((fd - g[i]).abs() / scale);
        }
    }
    t.set_watermarker_params(&p0).unwrap();
    let rel = (num2 / den2.max(1e-300)).sqrt();
    let dt = t0.elapsed();
    pass(
        rel < 1e-3 && worst < 1e-3 && dt < Duration::from_secs(60) && lb.missing.is_empty(),
        format!(
            "{} coordinates: aggregate rel err {rel:.2e}, worst coordinate {worst:.2e}, {:.1}s",
            coords.len(),
            dt.as_secs_f64()
        ),
    )
}

fn c10_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data: Vec<f64> = (0..3 * 32 * 32).map(|_| 0.1 + 0.8 * rng.random::<f64>()).collect();
    let a = Image::from_data(32, 32, data).unwrap();
    let mut b = a.clone();
    b.data.iter_mut().for_each(|v| *v += 0.1);
    let p = psnr(&a, &b).unwrap();
    let x = synth::gen_image(&mut rng, 32);
    let s = ssim(&x, &x).unwrap();
    let mut bra_ok = true;
    for u in 0..16u8 {
        for v in 0..16u8 {
            let bits = |w: u8| Message::new((0..4).map(|i| (w >> i) & 1).collect()).unwrap();
            let (mu, mv) = (bits(u), bits(v));
            let expected = 1.0 - (u ^ v).count_ones() as f64 / 4.0;
            bra_ok &= bra(&mu, &mv).unwrap() == 1.0 - ber(&mu, &mv).unwrap() && bra(&mu, &mv).unwrap() == expected;
        }
    }
    pass((p - 20.0).abs() <= 1e-6 && s == 1.0 && bra_ok, format!("PSNR {p:.9} dB, SSIM(x,x) = {s}, BRA exhaustive ok {bra_ok}"))
}

fn c15_verdict() -> Outcome {
    let mut bad = 0;
    for &lambda in &[0.0, 0.5, 0.8, 1.0] {
        for k in 0..=100 {
            let b = k as f64 / 100.0;
            let v = DetectionVerdict::new(b, lambda, Message::new(vec![0]).unwrap()).unwrap();
            if v.is_fake != (b > lambda) || is_fake(b, lambda) != (b > lambda) {
                bad += 1;
            }
        }
    }
    pass(bad == 0, format!("404 grid points, {bad} disagreements"))
}

struct Run {
    report: EvalReport,
    history: Vec<EpochStats>,
    seconds: f64,
}

fn recipe(seed: u64, ablation: Ablation) -> Run {
    let mut cfg = desk();
    cfg.train.seed = seed;
    cfg.train.ablation = ablation;
    let r = cfg.backbone.resolution();
    let t0 = Instant::now();
    let data = synth::dataset(cfg.train.synthetic_images, r, seed.wrapping_add(1000));
    let key = format!("desk-key-{seed}");
    let mut t = Trainer::new(&cfg, &key, data).unwrap();
    t.train(None).unwrap();
    let seconds = t0.elapsed().as_secs_f64();
    let test = synth::dataset(cfg.eval.test_images, r, cfg.eval.test_seed);
    let dirs = t.model.directions(&key).unwrap();
    let report = eval::evaluate(&t.model, &dirs, &test, &cfg.eval).unwrap();
    let s = report.at_strength(0.5).unwrap();
    eprintln!(
        "  [{ablation:?} seed {seed}] {seconds:.0}s  psnr {:.2}  clean {:.3}  benign {:.3}  malicious {:.3}  gap {:.3}",
        report.psnr, report.clean_bra, s.benign_bra, s.malicious_bra, s.gap
    );
    Run { report, history: t.history.clone(), seconds }
}

fn main() {
    let quick = std::env::var("LATMARK_ACCEPTANCE_QUICK").is_ok_and(|v| !v.is_empty() && v != "0");
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "direction orthonormality", c01_orthonormality()),
        (2, "latent sphere contract", c02_sphere()),
        (3, "codec round trip", c03_codec_roundtrip()),
        (4, "parameter map exactness", c04_param_map()),
        (5, "Bernoulli sampling statistics", c05_bernoulli()),
        (6, "entropy analytic check", c06_entropy()),
        (7, "policy-gradient correctness", c07_reinforce()),
        (8, "reward formulas", c08_rewards()),
        (9, "loss gradient check", c09_gradcheck()),
        (10, "metric oracles", c10_metrics()),
    ];
    if quick {
        for (n, name) in [(11, "desk-scale semi-fragility"), (12, "desk-scale imperceptibility"), (13, "ablation direction"), (14, "determinism")] {
            results.push((n, name, Outcome { pass: None, detail: "skipped (LATMARK_ACCEPTANCE_QUICK)".into() }));
        }
    } else {
        let seeds = [0u64, 1, 2];
        let full: Vec<Run> = seeds.iter().map(|&s| recipe(s, Ablation::Full)).collect();
        let fixed: Vec<Run> = seeds.iter().map(|&s| recipe(s, Ablation::FixedDirections)).collect();
        let repeat = recipe(0, Ablation::Full);

        let mut ok11 = 0;
        let mut d11 = Vec::new();
        for (s, r) in seeds.iter().zip(&full) {
            let t = r.report.at_strength(0.5).unwrap();
            let ok = r.report.clean_bra >= 0.95
                && t.benign_bra >= 0.85
                && t.malicious_bra <= 0.60
                && t.benign_bra - t.malicious_bra >= 0.2
                && r.seconds <= 900.0;
            ok11 += usize::from(ok);
            d11.push(format!(
                "seed {s}: clean {:.3} benign {:.3} malicious {:.3} gap {:.3} {:.0}s [{}]",
                r.report.clean_bra,
                t.benign_bra,
                t.malicious_bra,
                t.gap,
                r.seconds,
                if ok { "ok" } else { "miss" }
            ));
        }
        results.push((11, "desk-scale semi-fragility", pass(ok11 >= 2, format!("{ok11}/3 seeds; {}", d11.join("; ")))));

        let mean_psnr = full.iter().map(|r| r.report.psnr).sum::<f64>() / full.len() as f64;
        let all30 = full.iter().all(|r| r.report.psnr >= 30.0);
        results.push((12, "desk-scale imperceptibility", pass(all30, format!("mean PSNR {mean_psnr:.2} dB (per seed {:?})", full.iter().map(|r| (r.report.psnr * 100.0).round() / 100.0).collect::<Vec<_>>()))));

        let mut ok13 = 0;
        let mut d13 = Vec::new();
        for ((s, f), x) in seeds.iter().zip(&full).zip(&fixed) {
            let (gf, gx) = (f.report.at_strength(0.5).unwrap().gap, x.report.at_strength(0.5).unwrap().gap);
            ok13 += usize::from(gx <= gf);
            d13.push(format!("seed {s}: fixed {gx:.3} vs full {gf:.3}"));
        }
        results.push((13, "ablation direction", pass(ok13 >= 2, format!("{ok13}/3 seeds; {}", d13.join("; ")))));

        let same = repeat.history == full[0].history && repeat.report == full[0].report;
        results.push((14, "determinism", pass(same, format!("{} epochs compared, identical: {same}", repeat.history.len()))));
    }
    results.push((15, "detection protocol", c15_verdict()));

    let mut failed = 0;
    println!();
    for (n, name, o) in &results {
        let tag = match o.pass {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!("criterion {n:>2} {tag}  {name}: {}", o.detail);
    }
    if failed > 0 {
        println!("\n{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
