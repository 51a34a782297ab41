//! Alternating optimisation of the watermarker and the attack policy,
//! ablation schedules, and checkpoints.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::attacker::{self, policy_gradient, PolicyRollout, RewardBreakdown};
use crate::attacks::{apply_surrogate, AttackAction, AttackContext, AttackKind, Trace};
use crate::backbone::{key_fingerprint, EncodeCache, LatentFeature};
use crate::codec::{DirectionSet, Message};
use crate::config::RunConfig;
use crate::embedder::{loss_w, EmbedCache, LossBreakdown, LossInputs};
use crate::error::{Error, Result};
use crate::extractor::{ber_bits, ExtractCache};
use crate::image::Image;
use crate::model::Watermarker;
use crate::nn::{self, Adam, Params, Tensor};
use crate::seed::{self, stream};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Training variants used to isolate each component's contribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// No attacked variants at all; only clean extraction is trained.
    NoAttacker,
    /// First benign attack on benign items, first malicious on malicious, at strength 0.5.
    FixedAttack,
    /// Every attack of the item's kind, strength 0.5.
    FixedSequence,
    /// Fair-coin selection, uniform strengths.
    RandomCombo,
    /// One attack per item, cycling through the registry, strength ramping with the epoch.
    SingleRamp,
    /// Random subsets whose size grows with the epoch, strength 0.5.
    Progressive,
    /// Learned policy restricted to the first attack of each kind.
    SingleLearnable,
    /// Hand-made schedule: strength 0.25, 0.5, 0.75 over thirds of training.
    FixedCurriculum,
    NoProximity,
    NoCuriosity,
    /// Direction generator frozen at initialisation.
    FixedDirections,
    /// Message carried on the first `L` coordinate axes.
    NaiveEmbedding,
}

impl Ablation {
    pub const ALL: [Ablation; 13] = [
        Ablation::Full,
        Ablation::NoAttacker,
        Ablation::FixedAttack,
        Ablation::FixedSequence,
        Ablation::RandomCombo,
        Ablation::SingleRamp,
        Ablation::Progressive,
        Ablation::SingleLearnable,
        Ablation::FixedCurriculum,
        Ablation::NoProximity,
        Ablation::NoCuriosity,
        Ablation::FixedDirections,
        Ablation::NaiveEmbedding,
    ];

    fn uses_policy(self) -> bool {
        matches!(
            self,
            Ablation::Full
                | Ablation::SingleLearnable
                | Ablation::NoProximity
                | Ablation::NoCuriosity
                | Ablation::FixedDirections
                | Ablation::NaiveEmbedding
        )
    }

    fn trains_directions(self) -> bool {
        !matches!(self, Ablation::FixedDirections | Ablation::NaiveEmbedding)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of each batch routed to malicious attacks.
    pub malicious_ratio: f64,
    pub seed: u64,
    /// Attacker update every k watermarker steps.
    pub attacker_every_k: usize,
    pub ablation: Ablation,
    /// Procedural training images when no data directory is given.
    pub synthetic_images: usize,
    pub data_dir: Option<String>,
    /// Write a checkpoint every this many epochs (the last epoch always).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-4,
            malicious_ratio: 0.5,
            seed: 0,
            attacker_every_k: 1,
            ablation: Ablation::Full,
            synthetic_images: 512,
            data_dir: None,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("train.learning_rate must be a non-negative number".into()));
        }
        if !(0.0..=1.0).contains(&self.malicious_ratio) {
            return Err(Error::Config("train.malicious_ratio must lie in [0, 1]".into()));
        }
        if self.attacker_every_k == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("train.attacker_every_k and train.checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub surrogate_loss: f64,
    pub clip: f64,
    pub dir: f64,
    pub ext: f64,
    pub ber_clean: f64,
    pub ber_benign: f64,
    pub ber_malicious: f64,
    pub psnr: f64,
    pub reward: f64,
    pub policy_loss: f64,
    /// Mean selection probability per registry attack.
    pub attack_probs: Vec<f64>,
    /// Mean strength head output per registry attack.
    pub attack_strengths: Vec<f64>,
    pub memory_len: usize,
}

#[derive(Clone, Debug, Default)]
pub struct StepStats {
    pub loss: f64,
    pub surrogate_loss: f64,
    pub clip: f64,
    pub dir: f64,
    pub ext: f64,
    pub ber_clean: f64,
    pub ber_benign: Option<f64>,
    pub ber_malicious: Option<f64>,
    pub psnr: f64,
    pub reward: Option<f64>,
    pub policy_loss: Option<f64>,
    probs: Vec<Vec<f64>>,
    strengths: Vec<Vec<f64>>,
}

struct Attacked {
    kind: AttackKind,
    trace: Trace,
    enc: EncodeCache,
    logits: Vec<f64>,
    cache: ExtractCache,
    rollout: Option<PolicyRollout>,
    action: AttackAction,
}

struct Item {
    msg: Message,
    embed: EmbedCache,
    enc: EncodeCache,
    logits: Vec<f64>,
    cache: ExtractCache,
    psnr: f64,
    attacked: Option<Attacked>,
}

/// Result of the forward and backward pass of one batch.
struct Computed {
    loss: LossBreakdown,
    stats: StepStats,
    generator: Option<crate::codec::DirectionGenerator>,
    embedder: crate::embedder::Embedder,
    extractor: crate::extractor::Extractor,
    rollouts: Vec<PolicyRollout>,
    rewards: Vec<RewardBreakdown>,
    failures: Vec<(LatentFeature, f64)>,
}

/// Optimiser state for every trained part.
#[derive(Clone, Debug)]
struct Optimizers {
    generator: Adam,
    embedder: Adam,
    extractor: Adam,
    policy: Adam,
}

pub struct Trainer {
    pub model: Watermarker,
    key: String,
    fingerprint: String,
    data: Vec<Image>,
    features: Vec<LatentFeature>,
    opt: Optimizers,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn hard_bits(logits: &[f64]) -> Vec<u8> {
    logits.iter().map(|&v| u8::from(v > 0.0)).collect()
}

fn complement(bits: &[u8]) -> Vec<u8> {
    bits.iter().map(|b| 1 - b).collect()
}

impl Trainer {
    pub fn new(cfg: &RunConfig, key: &str, data: Vec<Image>) -> Result<Self> {
        if key.is_empty() {
            return Err(Error::Validation("watermark key must not be empty".into()));
        }
        let model = Watermarker::new(cfg)?;
        let lr = cfg.train.learning_rate;
        let plr = cfg.attacker.learning_rate.unwrap_or(lr);
        let opt = Optimizers { generator: Adam::new(lr), embedder: Adam::new(lr), extractor: Adam::new(lr), policy: Adam::new(plr) };
        Self::assemble(model, key, data, opt, 0, Vec::new())
    }

    fn assemble(
        model: Watermarker,
        key: &str,
        data: Vec<Image>,
        opt: Optimizers,
        epoch: usize,
        history: Vec<EpochStats>,
    ) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::Validation("training needs at least two images".into()));
        }
        let r = model.resolution();
        let mut features = Vec::with_capacity(data.len());
        for (i, img) in data.iter().enumerate() {
            if img.h != r || img.w != r {
                return Err(Error::Shape(format!("training image {i} is {}x{}, expected {r}x{r}", img.h, img.w)));
            }
            features.push(model.backbone.encode_image(img)?);
        }
        Ok(Trainer { model, key: key.to_string(), fingerprint: key_fingerprint(key), data, features, opt, epoch, history })
    }

    pub fn config(&self) -> &RunConfig {
        &self.model.cfg
    }

    pub fn key_fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.config().train.batch_size)
    }

    /// Runs the remaining epochs, checkpointing to `ckpt` when given.
    pub fn train(&mut self, ckpt: Option<&Path>) -> Result<&[EpochStats]> {
        let (total, every) = (self.config().train.epochs, self.config().train.checkpoint_every);
        while self.epoch < total {
            let t0 = Instant::now();
            let st = self.train_epoch()?;
            log::info!(
                "epoch {} loss {:.4} clip {:.4} dir {:.4} ext {:.4} ber clean {:.3} benign {:.3} malicious {:.3} psnr {:.2} ({:.1}s)",
                st.epoch,
                st.loss,
                st.clip,
                st.dir,
                st.ext,
                st.ber_clean,
                st.ber_benign,
                st.ber_malicious,
                st.psnr,
                t0.elapsed().as_secs_f64()
            );
            if let Some(p) = ckpt {
                if self.epoch % every == 0 || self.epoch == total {
                    self.save(p)?;
                }
            }
        }
        Ok(&self.history)
    }

    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        let e = self.epoch;
        let b = self.config().train.batch_size;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut seed::rng(self.config().train.seed, &[stream::SHUFFLE, e as u64]));
        let mut steps = Vec::new();
        for (bi, idx) in order.chunks(b).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            steps.push(self.train_step(idx, e, bi)?);
        }
        let n_att = self.model.registry.len();
        let col_mean = |rows: Vec<&Vec<f64>>| -> Vec<f64> {
            let n = rows.len().max(1) as f64;
            (0..n_att).map(|l| rows.iter().map(|r| r[l]).sum::<f64>() / n).collect()
        };
        let st = EpochStats {
            epoch: e + 1,
            loss: mean(steps.iter().map(|s| s.loss)).unwrap_or(0.0),
            surrogate_loss: mean(steps.iter().map(|s| s.surrogate_loss)).unwrap_or(0.0),
            clip: mean(steps.iter().map(|s| s.clip)).unwrap_or(0.0),
            dir: mean(steps.iter().map(|s| s.dir)).unwrap_or(0.0),
            ext: mean(steps.iter().map(|s| s.ext)).unwrap_or(0.0),
            ber_clean: mean(steps.iter().map(|s| s.ber_clean)).unwrap_or(0.0),
            ber_benign: mean(steps.iter().filter_map(|s| s.ber_benign)).unwrap_or(0.0),
            ber_malicious: mean(steps.iter().filter_map(|s| s.ber_malicious)).unwrap_or(0.0),
            psnr: mean(steps.iter().map(|s| s.psnr)).unwrap_or(0.0),
            reward: mean(steps.iter().filter_map(|s| s.reward)).unwrap_or(0.0),
            policy_loss: mean(steps.iter().filter_map(|s| s.policy_loss)).unwrap_or(0.0),
            attack_probs: col_mean(steps.iter().flat_map(|s| s.probs.iter()).collect()),
            attack_strengths: col_mean(steps.iter().flat_map(|s| s.strengths.iter()).collect()),
            memory_len: self.model.memory.len(),
        };
        self.epoch += 1;
        self.history.push(st.clone());
        Ok(st)
    }

    /// Action for one item under a scripted (non-learned) schedule.
    fn scripted_action(&self, kind: AttackKind, epoch: usize, batch: usize, i: usize) -> AttackAction {
        let reg = &self.model.registry;
        let n = reg.len();
        let pool = reg.indices(kind);
        let epochs = self.config().train.epochs.max(1);
        let mut rng = seed::rng(self.config().train.seed, &[stream::ACTION, epoch as u64, batch as u64, i as u64]);
        let frac = |e: usize| if epochs > 1 { e as f64 / (epochs - 1) as f64 } else { 1.0 };
        let mut a = AttackAction::none(n);
        if pool.is_empty() {
            return a;
        }
        match self.config().train.ablation {
            Ablation::FixedAttack => a = AttackAction::single(n, pool[0], 0.5),
            Ablation::FixedSequence => {
                for &l in &pool {
                    a.selected[l] = 1;
                    a.strengths[l] = 0.5;
                }
            }
            Ablation::RandomCombo => {
                for &l in &pool {
                    a.selected[l] = u8::from(rng.random::<f64>() < 0.5);
                    a.strengths[l] = rng.random::<f64>();
                }
                if kind == AttackKind::Malicious && a.count() == 0 {
                    let l = pool[rng.random_range(0..pool.len())];
                    a.selected[l] = 1;
                    a.strengths[l] = rng.random::<f64>();
                }
            }
            Ablation::SingleRamp => {
                a = AttackAction::single(n, pool[(batch + i) % pool.len()], frac(epoch));
            }
            Ablation::Progressive => {
                let k = 1 + ((epoch * pool.len()) / epochs).min(pool.len() - 1);
                let mut p = pool.clone();
                p.shuffle(&mut rng);
                for &l in &p[..k] {
                    a.selected[l] = 1;
                    a.strengths[l] = 0.5;
                }
            }
            Ablation::FixedCurriculum => {
                let tau = [0.25, 0.5, 0.75][(3 * epoch / epochs).min(2)];
                a = AttackAction::single(n, pool[batch % pool.len()], tau);
            }
            _ => unreachable!("learned schedules do not use scripted actions"),
        }
        a
    }

    fn active_mask(&self, kind: AttackKind) -> Vec<bool> {
        let reg = &self.model.registry;
        let single = self.config().train.ablation == Ablation::SingleLearnable;
        let first = |k| reg.indices(k).first().copied();
        reg.specs
            .iter()
            .map(|s| match (kind, single) {
                (AttackKind::Benign, false) => s.kind == AttackKind::Benign,
                (AttackKind::Malicious, false) => true,
                (k, true) => first(k) == Some(s.id),
            })
            .collect()
    }

    /// Malicious items must carry at least one malicious attack; when the
    /// sample has none, the most likely malicious attack is switched on.
    fn force_malicious(&self, ro: &mut PolicyRollout) {
        let reg = &self.model.registry;
        if ro.action.has_kind(reg, AttackKind::Malicious) {
            return;
        }
        let best = reg
            .indices(AttackKind::Malicious)
            .into_iter()
            .filter(|&l| ro.active[l])
            .max_by(|&a, &b| ro.logits[a].total_cmp(&ro.logits[b]));
        if let Some(l) = best {
            ro.action.selected[l] = 1;
            ro.action.strengths[l] = ro.tau_mean[l];
            ro.action.log_prob += attacker::log_bernoulli(ro.logits[l], 1) - attacker::log_bernoulli(ro.logits[l], 0);
        }
    }

    /// One watermarker step followed (every k steps) by one attacker step.
    pub fn train_step(&mut self, idx: &[usize], epoch: usize, batch: usize) -> Result<StepStats> {
        let c = self.compute(idx, epoch, batch)?;
        let cfg = &self.model.cfg;
        let mut st = c.stats;
        if let Some(g) = &c.generator {
            self.opt.generator.step(&mut self.model.generator, g);
        }
        self.opt.embedder.step(&mut self.model.embedder, &c.embedder);
        self.opt.extractor.step(&mut self.model.extractor, &c.extractor);

        let global = epoch * self.batches_per_epoch() + batch;
        if !c.rollouts.is_empty() && global % cfg.train.attacker_every_k == 0 {
            let mut g_pol = nn::grads_like(&self.model.policy);
            let pl = policy_gradient(&self.model.policy, &c.rollouts, &c.rewards, cfg.attacker.r, cfg.attacker.strength_std, &mut g_pol)?;
            self.opt.policy.step(&mut self.model.policy, &g_pol);
            st.policy_loss = Some(pl);
        }
        let fail_thr = cfg.attacker.fail_threshold.unwrap_or(cfg.detector.lambda);
        for (fa, b) in &c.failures {
            self.model.memory.update(fa, *b, fail_thr);
        }

        let m = &self.model;
        if !(m.generator.all_finite() && m.embedder.all_finite() && m.extractor.all_finite() && m.policy.all_finite()) {
            return Err(Error::Divergence(format!("epoch {epoch} batch {batch}: non-finite parameters after update")));
        }
        Ok(st)
    }

    /// Watermarker loss and its gradient for one batch, without updating
    /// anything. The gradient is flattened in the order of
    /// [`Trainer::watermarker_params`].
    pub fn loss_and_gradient(&self, idx: &[usize], epoch: usize, batch: usize) -> Result<(LossBreakdown, Vec<f64>)> {
        let c = self.compute(idx, epoch, batch)?;
        let mut g = match &c.generator {
            Some(gg) => gg.flat(),
            None if self.config().train.ablation.trains_directions() => vec![0.0; self.model.generator.num_params()],
            None => Vec::new(),
        };
        g.extend(c.embedder.flat());
        g.extend(c.extractor.flat());
        Ok((c.loss, g))
    }

    /// Trainable watermarker parameters: generator (when trained), embedder, extractor.
    pub fn watermarker_params(&self) -> Vec<f64> {
        let mut p = if self.config().train.ablation.trains_directions() { self.model.generator.flat() } else { Vec::new() };
        p.extend(self.model.embedder.flat());
        p.extend(self.model.extractor.flat());
        p
    }

    pub fn set_watermarker_params(&mut self, p: &[f64]) -> Result<()> {
        let ng = if self.config().train.ablation.trains_directions() { self.model.generator.num_params() } else { 0 };
        let ne = self.model.embedder.num_params();
        let nx = self.model.extractor.num_params();
        crate::error::shape_check("watermarker parameters", p.len(), ng + ne + nx)?;
        if ng > 0 {
            self.model.generator.set_flat(&p[..ng]);
        }
        self.model.embedder.set_flat(&p[ng..ng + ne]);
        self.model.extractor.set_flat(&p[ng + ne..]);
        Ok(())
    }

    fn compute(&self, idx: &[usize], epoch: usize, batch: usize) -> Result<Computed> {
        let cfg = self.model.cfg.clone();
        let ablation = cfg.train.ablation;
        let s = cfg.train.seed;
        let at = |st: u64, i: usize| [st, epoch as u64, batch as u64, i as u64];
        let (dirs, gcache) = self.model.directions_with_cache(&self.key)?;
        let bsz = idx.len();
        let n_mal = (bsz as f64 * cfg.train.malicious_ratio).round() as usize;
        let m = &self.model;

        let mut items = Vec::with_capacity(bsz);
        for (i, &k) in idx.iter().enumerate() {
            let x = &self.data[k];
            let f = &self.features[k];
            let msg = Message::random(m.message_bits(), &mut seed::rng(s, &at(stream::MESSAGE, i)));
            let (xw, _, embed) = m.embedder.embed_with_cache(&m.backbone, x, f, &msg, &dirs, &m.targets)?;
            let enc = m.backbone.forward(&xw)?;
            let (logits, cache) = m.extractor.forward(&enc.feature, &dirs)?;
            let psnr = crate::eval::psnr(x, &xw)?;
            let attacked = if ablation == Ablation::NoAttacker {
                None
            } else {
                let kind = if i >= bsz - n_mal { AttackKind::Malicious } else { AttackKind::Benign };
                let fw = LatentFeature::new(enc.feature.clone())?;
                let (action, rollout) = if ablation.uses_policy() {
                    let mut rng = seed::rng(s, &at(stream::ACTION, i));
                    let mut ro = m.policy.act(&fw, &self.active_mask(kind), cfg.attacker.strength_std, &mut rng);
                    if kind == AttackKind::Malicious {
                        self.force_malicious(&mut ro);
                    }
                    (ro.action.clone(), Some(ro))
                } else {
                    (self.scripted_action(kind, epoch, batch, i), None)
                };
                let donor_ix = seed::rng(s, &at(stream::DONOR, i)).random_range(0..self.data.len());
                let ctx = AttackContext { seed: seed::derive(s, &at(stream::ATTACK, i)), donor: Some(&self.data[donor_ix]) };
                let (xa, trace) = apply_surrogate(&xw, &action, &m.registry, &ctx)?;
                let enc_a = m.backbone.forward(&xa)?;
                let (la, ca) = m.extractor.forward(&enc_a.feature, &dirs)?;
                Some(Attacked { kind, trace, enc: enc_a, logits: la, cache: ca, rollout, action })
            };
            items.push(Item { msg, embed, enc, logits, cache, psnr, attacked });
        }

        // watermarker update
        let f_clean: Vec<&[f64]> = idx.iter().map(|&k| self.features[k].as_slice()).collect();
        let mut inp = LossInputs::default();
        let mut slots = Vec::with_capacity(bsz);
        for (i, it) in items.iter().enumerate() {
            inp.clip.push((f_clean[i], it.enc.feature.as_slice()));
            inp.clean.push((it.logits.as_slice(), it.msg.bits.as_slice()));
            slots.push(match &it.attacked {
                Some(a) if a.kind == AttackKind::Benign => {
                    inp.benign.push((a.logits.as_slice(), it.msg.bits.as_slice()));
                    Some((AttackKind::Benign, inp.benign.len() - 1))
                }
                Some(a) => {
                    inp.malicious.push((a.logits.as_slice(), it.msg.bits.as_slice()));
                    Some((AttackKind::Malicious, inp.malicious.len() - 1))
                }
                None => None,
            });
        }
        let (lb, lg) = loss_w(&inp, &cfg.loss)?;
        if !lb.total.is_finite() {
            return Err(Error::Divergence(format!("epoch {epoch} batch {batch}: loss is {}", lb.total)));
        }
        let mut g_emb = nn::grads_like(&m.embedder);
        let mut g_ext = nn::grads_like(&m.extractor);
        let mut dd = vec![0.0; dirs.rows.len()];
        let add = |dst: &mut Vec<f64>, src: &[f64]| dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        for (i, it) in items.iter().enumerate() {
            let (mut dfw, ddc) = m.extractor.backward(&it.cache, &dirs, &lg.clean[i], &mut g_ext);
            add(&mut dd, &ddc);
            add(&mut dfw, &lg.clip[i]);
            let mut dxw = m.backbone.vjp(&it.enc, &dfw);
            if let (Some(a), Some((kind, j))) = (&it.attacked, slots[i]) {
                let dl = match kind {
                    AttackKind::Benign => &lg.benign[j],
                    AttackKind::Malicious => &lg.malicious[j],
                };
                let (dfa, dda) = m.extractor.backward(&a.cache, &dirs, dl, &mut g_ext);
                add(&mut dd, &dda);
                add(&mut dxw, &a.trace.backward(&m.backbone.vjp(&a.enc, &dfa)));
            }
            add(&mut dd, &m.embedder.backward(&m.backbone, &it.embed, &dxw, &dirs, &mut g_emb));
        }

        // attacker rewards, computed on detached features before any update
        let mut rollouts = Vec::new();
        let mut rewards = Vec::new();
        let mut reward_all = Vec::new();
        let mut failures = Vec::new();
        let (mut probs, mut strengths) = (Vec::new(), Vec::new());
        for it in &items {
            let Some(a) = &it.attacked else { continue };
            let target = match (a.kind, cfg.attacker.fragility_reward) {
                (AttackKind::Malicious, true) => complement(&it.msg.bits),
                _ => it.msg.bits.clone(),
            };
            let fw = LatentFeature::new(it.enc.feature.clone())?;
            let fa = LatentFeature::new(a.enc.feature.clone())?;
            let failure = attacker::reward_failure(&a.logits, &target)?;
            let curiosity = if ablation == Ablation::NoCuriosity {
                0.0
            } else {
                attacker::reward_curiosity(&fw, &fa, cfg.attacker.delta)
            };
            let proximity = if ablation == Ablation::NoProximity {
                0.0
            } else {
                attacker::reward_proximity(&fa, &m.memory, cfg.attacker.nu, cfg.attacker.epsilon)
            };
            let pen = cfg.attacker.o * a.action.count() as f64;
            let rw = RewardBreakdown::new(failure, curiosity, proximity, pen, cfg.attacker.action_penalty_sign);
            reward_all.push(rw.total);
            failures.push((fa, ber_bits(&hard_bits(&a.logits), &target)?));
            if let Some(ro) = &a.rollout {
                probs.push(ro.action.probs.clone());
                strengths.push(ro.tau_mean.clone());
                rollouts.push(ro.clone());
                rewards.push(rw);
            }
        }

        // stats before the update
        let ber_of = |l: &[f64], b: &[u8]| ber_bits(&hard_bits(l), b).unwrap_or(1.0);
        let st = StepStats {
            loss: lb.total,
            surrogate_loss: lb.surrogate_total,
            clip: lb.clip,
            dir: lb.dir,
            ext: lb.ext,
            ber_clean: mean(inp.clean.iter().map(|(l, b)| ber_of(l, b))).unwrap_or(0.0),
            ber_benign: mean(inp.benign.iter().map(|(l, b)| ber_of(l, b))),
            ber_malicious: mean(inp.malicious.iter().map(|(l, b)| ber_of(l, b))),
            psnr: mean(items.iter().map(|it| it.psnr.min(100.0))).unwrap_or(0.0),
            reward: mean(reward_all.iter().copied()),
            policy_loss: None,
            probs,
            strengths,
        };
        drop(inp);

        let generator = match &gcache {
            Some(gc) if ablation.trains_directions() => {
                let mut g_gen = nn::grads_like(&m.generator);
                m.generator.backward(&dirs, gc, &dd, &mut g_gen);
                Some(g_gen)
            }
            _ => None,
        };
        Ok(Computed { loss: lb, stats: st, generator, embedder: g_emb, extractor: g_ext, rollouts, rewards, failures })
    }

    /// Writes a self-contained checkpoint (weights, optimiser state, failure
    /// memory, config, key fingerprint, epoch and history). The key itself
    /// is never stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ar = model_archive(&self.model, &self.fingerprint, self.epoch, &self.history)?;
        for (name, adam) in [
            ("generator", &self.opt.generator),
            ("embedder", &self.opt.embedder),
            ("extractor", &self.opt.extractor),
            ("policy", &self.opt.policy),
        ] {
            let (t, mm, vv) = adam.state();
            ar.push(format!("adam.{name}.m"), Tensor { shape: vec![mm.len()], data: mm.to_vec() });
            ar.push(format!("adam.{name}.v"), Tensor { shape: vec![vv.len()], data: vv.to_vec() });
            ar.meta["adam_steps"][name] = serde_json::json!(t);
        }
        ar.write(path)
    }

    /// Continues a run from a checkpoint. The key must match the one used to
    /// start it; `data` must be the same training set for an identical run.
    pub fn resume(path: &Path, key: &str, data: Vec<Image>) -> Result<Self> {
        let (model, meta, ar) = load_checkpoint(path, Some(key))?;
        let lr = model.cfg.train.learning_rate;
        let plr = model.cfg.attacker.learning_rate.unwrap_or(lr);
        let mut opt = Optimizers { generator: Adam::new(lr), embedder: Adam::new(lr), extractor: Adam::new(lr), policy: Adam::new(plr) };
        for (name, adam) in [
            ("generator", &mut opt.generator),
            ("embedder", &mut opt.embedder),
            ("extractor", &mut opt.extractor),
            ("policy", &mut opt.policy),
        ] {
            let t = meta.adam_steps.get(name).copied().unwrap_or(0);
            let get = |k: &str| ar.get(&format!("adam.{name}.{k}")).map(|t| t.data.clone());
            if let (Some(mm), Some(vv)) = (get("m"), get("v")) {
                adam.set_state(t, mm, vv);
            }
        }
        Self::assemble(model, key, data, opt, meta.epoch, meta.history)
    }
}

/// Checkpoint header stored in the archive metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config: RunConfig,
    pub key_fingerprint: String,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    #[serde(default)]
    pub adam_steps: std::collections::BTreeMap<String, u64>,
}

fn model_archive(m: &Watermarker, fingerprint: &str, epoch: usize, history: &[EpochStats]) -> Result<Archive> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        config: m.cfg.clone(),
        key_fingerprint: fingerprint.to_string(),
        epoch,
        history: history.to_vec(),
        adam_steps: Default::default(),
    };
    let mut ar = Archive::new(serde_json::to_value(&meta)?);
    ar.extend(m.backbone.named("backbone"));
    ar.extend(m.generator.named("generator"));
    ar.extend(m.embedder.named("embedder"));
    ar.extend(m.extractor.named("extractor"));
    ar.extend(m.policy.named("policy"));
    ar.push("memory", m.memory.to_tensor());
    Ok(ar)
}

/// Loads a checkpoint. With `key`, its fingerprint must match the stored one.
pub fn load_checkpoint(path: &Path, key: Option<&str>) -> Result<(Watermarker, CheckpointMeta, Archive)> {
    let ar = Archive::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ar.meta.clone())
        .map_err(|e| Error::Archive(format!("{}: not a checkpoint ({e})", path.display())))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Archive(format!("checkpoint version {} is not supported", meta.version)));
    }
    if let Some(k) = key {
        if key_fingerprint(k) != meta.key_fingerprint {
            return Err(Error::Validation("key does not match the key this checkpoint was trained with".into()));
        }
    }
    let mut model = Watermarker::new(&meta.config)?;
    model.generator.load_named("generator", &ar.tensors)?;
    model.embedder.load_named("embedder", &ar.tensors)?;
    model.extractor.load_named("extractor", &ar.tensors)?;
    model.policy.load_named("policy", &ar.tensors)?;
    if let Some(t) = ar.get("memory") {
        model.memory = attacker::FailureMemory::from_tensor(meta.config.attacker.memory_capacity, t)?;
    }
    Ok((model, meta, ar))
}

/// Saves only what inference needs plus the header (no optimiser state).
pub fn save_model(m: &Watermarker, key: &str, path: &Path) -> Result<()> {
    model_archive(m, &key_fingerprint(key), 0, &[])?.write(path)
}

/// Checks the key against a checkpoint and returns the model with its directions.
pub fn load_for_key(path: &Path, key: &str) -> Result<(Watermarker, DirectionSet)> {
    let (m, _, _) = load_checkpoint(path, Some(key))?;
    let d = m.directions(key)?;
    Ok((m, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    pub(crate) fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.backbone.feature_dim = 16;
        c.backbone.resolution = Some(16);
        c.backbone.radial_bins = 3;
        c.backbone.orientation_bins = 4;
        c.codec.message_bits = 8;
        c.embed.phi_hidden = 16;
        c.embed.steer_hidden = 16;
        c.extractor.hidden = 16;
        c.attacker.hidden = [8, 8];
        c.train.batch_size = 4;
        c.train.epochs = 2;
        c.train.synthetic_images = 8;
        c
    }

    #[test]
    fn every_ablation_runs_a_step() {
        for ab in Ablation::ALL {
            let mut c = tiny();
            c.train.ablation = ab;
            let mut t = Trainer::new(&c, "k", synth::dataset(8, 16, 1)).unwrap();
            let st = t.train_step(&[0, 1, 2, 3], 0, 0).unwrap();
            assert!(st.loss.is_finite(), "{ab:?}");
            assert_eq!(st.ber_benign.is_none(), ab == Ablation::NoAttacker, "{ab:?}");
        }
    }

    #[test]
    fn watermarker_step_leaves_policy_alone() {
        let mut c = tiny();
        c.train.ablation = Ablation::FixedAttack;
        let mut t = Trainer::new(&c, "k", synth::dataset(8, 16, 1)).unwrap();
        let before = t.model.policy.flat();
        let emb = t.model.embedder.flat();
        t.train_step(&[0, 1, 2, 3], 0, 0).unwrap();
        assert_eq!(t.model.policy.flat(), before);
        assert_ne!(t.model.embedder.flat(), emb);
    }

    #[test]
    fn attacker_step_leaves_watermarker_alone() {
        let mut c = tiny();
        c.train.learning_rate = 0.0;
        c.attacker.learning_rate = Some(1e-2);
        let mut t = Trainer::new(&c, "k", synth::dataset(8, 16, 1)).unwrap();
        let (e, x, g, p) = (t.model.embedder.flat(), t.model.extractor.flat(), t.model.generator.flat(), t.model.policy.flat());
        t.train_step(&[0, 1, 2, 3], 0, 0).unwrap();
        assert_eq!(t.model.embedder.flat(), e);
        assert_eq!(t.model.extractor.flat(), x);
        assert_eq!(t.model.generator.flat(), g);
        assert_ne!(t.model.policy.flat(), p);
    }

    #[test]
    fn fixed_directions_stay_fixed() {
        let mut c = tiny();
        c.train.ablation = Ablation::FixedDirections;
        let mut t = Trainer::new(&c, "k", synth::dataset(8, 16, 1)).unwrap();
        let g = t.model.generator.flat();
        t.train_epoch().unwrap();
        assert_eq!(t.model.generator.flat(), g);
    }

    #[test]
    fn empty_key_rejected() {
        assert!(Trainer::new(&tiny(), "", synth::dataset(8, 16, 1)).is_err());
    }

    #[test]
    fn wrong_key_cannot_resume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.lmk");
        let t = Trainer::new(&tiny(), "right", synth::dataset(8, 16, 1)).unwrap();
        t.save(&p).unwrap();
        assert!(matches!(Trainer::resume(&p, "wrong", synth::dataset(8, 16, 1)), Err(Error::Validation(_))));
    }
}
