//! Attack policy, shaped rewards, failure memory and the score-function loss.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use crate::attacks::AttackAction;
use crate::backbone::LatentFeature;
use crate::error::{shape_check, Error, Result};
use crate::nn::{self, Linear, Params, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltySign {
    /// Subtract `o * sum(a)` from the reward.
    Penalty,
    /// Add it, as the reward equation is literally written.
    Bonus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackerConfig {
    pub delta: f64,
    pub nu: f64,
    pub epsilon: f64,
    pub o: f64,
    pub r: f64,
    pub memory_capacity: usize,
    pub action_penalty_sign: PenaltySign,
    /// Extraction-failure threshold for memory writes; defaults to the detector threshold.
    pub fail_threshold: Option<f64>,
    /// Std of the Gaussian exploration around the strength head.
    pub strength_std: f64,
    /// Score malicious rollouts against the complemented message, so the
    /// attacker hunts for manipulations the watermark survives.
    pub fragility_reward: bool,
    pub hidden: [usize; 2],
    pub learning_rate: Option<f64>,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            delta: 1.0,
            nu: 0.1,
            epsilon: 1e-6,
            o: 0.01,
            r: 0.01,
            memory_capacity: 1024,
            action_penalty_sign: PenaltySign::Penalty,
            fail_threshold: None,
            strength_std: 0.1,
            fragility_reward: true,
            hidden: [256, 128],
            learning_rate: None,
        }
    }
}

impl AttackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("attacker.epsilon must be positive".into()));
        }
        if [self.delta, self.nu, self.o, self.r, self.strength_std].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("attacker weights must be non-negative".into()));
        }
        if self.memory_capacity == 0 {
            return Err(Error::Config("attacker.memory_capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub failure: f64,
    pub curiosity: f64,
    pub proximity: f64,
    pub action_penalty: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(failure: f64, curiosity: f64, proximity: f64, action_penalty: f64, sign: PenaltySign) -> Self {
        let total = match sign {
            PenaltySign::Penalty => failure + curiosity + proximity - action_penalty,
            PenaltySign::Bonus => failure + curiosity + proximity + action_penalty,
        };
        RewardBreakdown { failure, curiosity, proximity, action_penalty, total }
    }
}

/// Mean per-bit BCE between sigmoid(logits), clamped to [1e-7, 1-1e-7], and `bits`.
pub fn reward_failure(logits: &[f64], bits: &[u8]) -> Result<f64> {
    shape_check("logits vs message", logits.len(), bits.len())?;
    if logits.is_empty() {
        return Err(Error::Validation("empty message".into()));
    }
    let s: f64 = logits
        .iter()
        .zip(bits)
        .map(|(&l, &b)| {
            let p = nn::sigmoid(l).clamp(1e-7, 1.0 - 1e-7);
            if b == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(s / logits.len() as f64)
}

pub fn reward_curiosity(before: &LatentFeature, after: &LatentFeature, delta: f64) -> f64 {
    let d: f64 = before.as_slice().iter().zip(after.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
    delta * d
}

pub fn reward_proximity(f: &LatentFeature, memory: &FailureMemory, nu: f64, eps: f64) -> f64 {
    match memory.nearest_distance(f) {
        Some(rho) => nu / (rho + eps),
        None => 0.0,
    }
}

/// FIFO buffer of features whose extraction failed.
#[derive(Clone, Debug, PartialEq)]
pub struct FailureMemory {
    capacity: usize,
    entries: VecDeque<LatentFeature>,
}

impl FailureMemory {
    pub fn new(capacity: usize) -> Self {
        FailureMemory { capacity: capacity.max(1), entries: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &LatentFeature> {
        self.entries.iter()
    }

    /// Appends `f` iff `ber > fail_threshold`; returns whether it did.
    pub fn update(&mut self, f: &LatentFeature, ber: f64, fail_threshold: f64) -> bool {
        if ber > fail_threshold {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(f.clone());
            true
        } else {
            false
        }
    }

    pub fn nearest_distance(&self, f: &LatentFeature) -> Option<f64> {
        self.entries
            .iter()
            .map(|e| e.as_slice().iter().zip(f.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .min_by(|a, b| a.total_cmp(b))
    }

    pub fn to_tensor(&self) -> Tensor {
        let dim = self.entries.front().map_or(0, |e| e.dim());
        let mut t = Tensor::zeros(&[self.entries.len(), dim]);
        for (i, e) in self.entries.iter().enumerate() {
            t.data[i * dim..(i + 1) * dim].copy_from_slice(e.as_slice());
        }
        t
    }

    pub fn from_tensor(capacity: usize, t: &Tensor) -> Result<Self> {
        let mut m = FailureMemory::new(capacity);
        if t.shape.len() != 2 {
            return Err(Error::Archive("failure memory tensor must be 2-D".into()));
        }
        let dim = t.shape[1];
        for row in t.data.chunks(dim.max(1)).take(t.shape[0]) {
            if m.entries.len() == m.capacity {
                m.entries.pop_front();
            }
            m.entries.push_back(LatentFeature::new(row.to_vec())?);
        }
        Ok(m)
    }
}

/// Shared trunk with a selection-logit head and a strength head.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub l1: Linear,
    pub l2: Linear,
    pub logits: Linear,
    pub tau: Linear,
}

/// What a rollout needs for its gradient.
#[derive(Clone, Debug)]
pub struct PolicyRollout {
    pub action: AttackAction,
    input: Vec<f64>,
    h1_pre: Vec<f64>,
    h1: Vec<f64>,
    h2_pre: Vec<f64>,
    h2: Vec<f64>,
    pub logits: Vec<f64>,
    pub tau_mean: Vec<f64>,
    /// Coordinates the policy actually decided.
    pub active: Vec<bool>,
    /// Gaussian log-density of the sampled strengths of selected attacks.
    pub strength_log_prob: f64,
}

impl Policy {
    /// Output heads start at zero: every attack at P = 0.5 and strength 0.5.
    pub fn new(zeta: usize, n_attacks: usize, hidden: [usize; 2], rng: &mut ChaCha8Rng) -> Self {
        Policy {
            l1: Linear::new(zeta, hidden[0], rng),
            l2: Linear::new(hidden[0], hidden[1], rng),
            logits: Linear::zeros(hidden[1], n_attacks),
            tau: Linear::zeros(hidden[1], n_attacks),
        }
    }

    pub fn n_attacks(&self) -> usize {
        self.logits.out()
    }

    fn trunk(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let h1_pre = self.l1.forward(f);
        let h1: Vec<f64> = h1_pre.iter().map(|v| v.max(0.0)).collect();
        let h2_pre = self.l2.forward(&h1);
        let h2: Vec<f64> = h2_pre.iter().map(|v| v.max(0.0)).collect();
        (h1_pre, h1, h2_pre, h2)
    }

    /// Selection probabilities and mean strengths.
    pub fn heads(&self, f: &LatentFeature) -> (Vec<f64>, Vec<f64>) {
        let (_, _, _, h2) = self.trunk(f.as_slice());
        let p = self.logits.forward(&h2).into_iter().map(nn::sigmoid).collect();
        let t = self.tau.forward(&h2).into_iter().map(nn::sigmoid).collect();
        (p, t)
    }

    /// Samples an action. Inactive coordinates are forced to 0 and do not
    /// enter the log-probability or entropy.
    pub fn act(&self, f: &LatentFeature, active: &[bool], strength_std: f64, rng: &mut ChaCha8Rng) -> PolicyRollout {
        let n = self.n_attacks();
        assert_eq!(active.len(), n, "mask length");
        let (h1_pre, h1, h2_pre, h2) = self.trunk(f.as_slice());
        let logits = self.logits.forward(&h2);
        let tau_mean: Vec<f64> = self.tau.forward(&h2).into_iter().map(nn::sigmoid).collect();
        let probs: Vec<f64> = logits.iter().map(|&l| nn::sigmoid(l)).collect();
        let mut selected = vec![0u8; n];
        let mut strengths = vec![0.0; n];
        let (mut lp, mut ent, mut slp) = (0.0, 0.0, 0.0);
        for l in 0..n {
            let u: f64 = rng.random();
            let e: f64 = rng.sample(StandardNormal);
            if !active[l] {
                strengths[l] = tau_mean[l];
                continue;
            }
            let a = u8::from(u < probs[l]);
            selected[l] = a;
            lp += log_bernoulli(logits[l], a);
            ent += bernoulli_entropy(probs[l]);
            if strength_std > 0.0 && a == 1 {
                let t = (tau_mean[l] + strength_std * e).clamp(0.0, 1.0);
                strengths[l] = t;
                slp += -0.5 * ((t - tau_mean[l]) / strength_std).powi(2);
            } else {
                strengths[l] = tau_mean[l];
            }
        }
        let action = AttackAction { selected, strengths, probs, log_prob: lp, entropy: ent };
        PolicyRollout {
            action,
            input: f.as_slice().to_vec(),
            h1_pre,
            h1,
            h2_pre,
            h2,
            logits,
            tau_mean,
            active: active.to_vec(),
            strength_log_prob: slp,
        }
    }

    /// Accumulates gradients for a head cotangent pair.
    fn backward(&self, ro: &PolicyRollout, dlogits: &[f64], dtau_pre: &[f64], g: &mut Policy) {
        let mut dh2 = self.logits.backward(&ro.h2, dlogits, &mut g.logits);
        let dh2b = self.tau.backward(&ro.h2, dtau_pre, &mut g.tau);
        dh2.iter_mut().zip(&dh2b).for_each(|(a, b)| *a += b);
        let dh2p: Vec<f64> = dh2.iter().zip(&ro.h2_pre).map(|(d, p)| if *p > 0.0 { *d } else { 0.0 }).collect();
        let dh1 = self.l2.backward(&ro.h1, &dh2p, &mut g.l2);
        let dh1p: Vec<f64> = dh1.iter().zip(&ro.h1_pre).map(|(d, p)| if *p > 0.0 { *d } else { 0.0 }).collect();
        self.l1.backward(&ro.input, &dh1p, &mut g.l1);
    }
}

impl Params for Policy {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.l1.visit(&mut |n, t| f(&format!("l1.{n}"), t));
        self.l2.visit(&mut |n, t| f(&format!("l2.{n}"), t));
        self.logits.visit(&mut |n, t| f(&format!("logits.{n}"), t));
        self.tau.visit(&mut |n, t| f(&format!("tau.{n}"), t));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.l1.visit_mut(&mut |n, t| f(&format!("l1.{n}"), t));
        self.l2.visit_mut(&mut |n, t| f(&format!("l2.{n}"), t));
        self.logits.visit_mut(&mut |n, t| f(&format!("logits.{n}"), t));
        self.tau.visit_mut(&mut |n, t| f(&format!("tau.{n}"), t));
    }
}

/// `a ln P + (1-a) ln(1-P)` computed from the logit without cancellation.
pub fn log_bernoulli(logit: f64, a: u8) -> f64 {
    // ln sigmoid(x) = -softplus(-x)
    let softplus = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    if a == 1 {
        -softplus(-logit)
    } else {
        -softplus(logit)
    }
}

pub fn bernoulli_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Recomputes log-probability and entropy from the stored probabilities.
pub fn action_stats(selected: &[u8], probs: &[f64]) -> (f64, f64) {
    let lp = selected
        .iter()
        .zip(probs)
        .map(|(&a, &p)| if a == 1 { p.ln() } else { (1.0 - p).ln() })
        .sum();
    let ent = probs.iter().map(|&p| bernoulli_entropy(p)).sum();
    (lp, ent)
}

fn baseline(samples: &[(AttackAction, RewardBreakdown)]) -> f64 {
    samples.iter().map(|(_, r)| r.total).sum::<f64>() / samples.len() as f64
}

/// `mean(-(R - b) * log_prob) - r * mean(entropy)` with `b` the batch-mean reward.
pub fn policy_loss(samples: &[(AttackAction, RewardBreakdown)], r: f64) -> Result<f64> {
    policy_loss_with_baseline(samples, r, None)
}

/// As [`policy_loss`] with an explicit baseline (`None` = batch mean).
pub fn policy_loss_with_baseline(
    samples: &[(AttackAction, RewardBreakdown)],
    r: f64,
    base: Option<f64>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("policy loss needs at least one sample".into()));
    }
    let b = base.unwrap_or_else(|| baseline(samples));
    let n = samples.len() as f64;
    let pg: f64 = samples.iter().map(|(a, rw)| -(rw.total - b) * a.log_prob).sum::<f64>() / n;
    let h: f64 = samples.iter().map(|(a, _)| a.entropy).sum::<f64>() / n;
    Ok(pg - r * h)
}

/// Gradient of the policy loss with respect to each rollout's selection
/// logits, for a given baseline.
pub fn logit_gradients(
    rollouts: &[(&[f64], &[u8], &[bool])],
    rewards: &[f64],
    r: f64,
    base: f64,
) -> Vec<Vec<f64>> {
    let n = rollouts.len() as f64;
    rollouts
        .iter()
        .zip(rewards)
        .map(|((logits, sel, active), &rw)| {
            let adv = rw - base;
            logits
                .iter()
                .zip(sel.iter())
                .zip(active.iter())
                .map(|((&lg, &a), &on)| {
                    if !on {
                        return 0.0;
                    }
                    let p = nn::sigmoid(lg);
                    // d log p(a)/d logit = a - P ; dH/d logit = -logit P (1-P)
                    let dlp = a as f64 - p;
                    let dh = -lg * p * (1.0 - p);
                    (-adv * dlp - r * dh) / n
                })
                .collect()
        })
        .collect()
}

/// Policy gradient over a batch; returns the loss value.
pub fn policy_gradient(
    policy: &Policy,
    rollouts: &[PolicyRollout],
    rewards: &[RewardBreakdown],
    r: f64,
    strength_std: f64,
    g: &mut Policy,
) -> Result<f64> {
    if rollouts.is_empty() || rollouts.len() != rewards.len() {
        return Err(Error::Validation("policy gradient needs matching non-empty batches".into()));
    }
    let samples: Vec<(AttackAction, RewardBreakdown)> = rollouts
        .iter()
        .zip(rewards)
        .map(|(ro, rw)| {
            let mut a = ro.action.clone();
            a.log_prob += ro.strength_log_prob;
            (a, rw.clone())
        })
        .collect();
    let base = baseline(&samples);
    let loss = policy_loss_with_baseline(&samples, r, Some(base))?;
    let views: Vec<(&[f64], &[u8], &[bool])> =
        rollouts.iter().map(|ro| (ro.logits.as_slice(), ro.action.selected.as_slice(), ro.active.as_slice())).collect();
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let dlogits = logit_gradients(&views, &totals, r, base);
    let n = rollouts.len() as f64;
    for ((ro, dl), rw) in rollouts.iter().zip(&dlogits).zip(&totals) {
        let adv = rw - base;
        let dtau: Vec<f64> = (0..policy.n_attacks())
            .map(|l| {
                if strength_std == 0.0 || !ro.active[l] || ro.action.selected[l] == 0 {
                    return 0.0;
                }
                let m = ro.tau_mean[l];
                let dlp_dm = (ro.action.strengths[l] - m) / (strength_std * strength_std);
                -adv * dlp_dm * m * (1.0 - m) / n
            })
            .collect();
        policy.backward(ro, dl, &dtau, g);
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn log_bernoulli_matches_naive() {
        for &l in &[-3.0, -0.2, 0.0, 1.5] {
            let p = nn::sigmoid(l);
            assert!((log_bernoulli(l, 1) - p.ln()).abs() < 1e-12);
            assert!((log_bernoulli(l, 0) - (1.0 - p).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_policy_is_fair_coin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Policy::new(6, 4, [8, 8], &mut rng);
        let f = LatentFeature::from_unnormalized(&[1.0, 2.0, 0.0, 0.0, -1.0, 0.5]).unwrap();
        let ro = p.act(&f, &[true; 4], 0.0, &mut rng);
        assert!(ro.action.probs.iter().all(|&q| q == 0.5));
        assert!(ro.tau_mean.iter().all(|&q| q == 0.5));
        assert!((ro.action.entropy - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_coordinates_stay_off() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Policy::new(4, 3, [8, 8], &mut rng);
        let f = LatentFeature::from_unnormalized(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        for _ in 0..50 {
            let ro = p.act(&f, &[true, false, true], 0.1, &mut rng);
            assert_eq!(ro.action.selected[1], 0);
            assert!((ro.action.entropy - 2.0 * 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn strength_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = Policy::new(4, 2, [6, 5], &mut rng);
        p.tau.w.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * (i as f64).sin());
        p.logits.w.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.2 * (i as f64).cos());
        let f = LatentFeature::from_unnormalized(&[0.3, -0.2, 0.9, 0.1]).unwrap();
        let ros: Vec<PolicyRollout> = (0..4).map(|_| p.act(&f, &[true, true], 0.1, &mut rng)).collect();
        let rewards: Vec<RewardBreakdown> = (0..4)
            .map(|i| RewardBreakdown::new(i as f64 * 0.3, 0.1, 0.0, 0.0, PenaltySign::Penalty))
            .collect();
        let mut g = nn::grads_like(&p);
        policy_gradient(&p, &ros, &rewards, 0.05, 0.1, &mut g).unwrap();
        // objective with actions and sampled strengths held fixed
        let obj = |q: &Policy| -> f64 {
            let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
            let b = totals.iter().sum::<f64>() / 4.0;
            let mut s = 0.0;
            for (ro, t) in ros.iter().zip(&totals) {
                let (pr, tm) = q.heads(&f);
                let logit: Vec<f64> = pr.iter().map(|p| (p / (1.0 - p)).ln()).collect();
                let mut lp: f64 = ro.action.selected.iter().zip(&logit).map(|(&a, &l)| log_bernoulli(l, a)).sum();
                for l in 0..2 {
                    if ro.action.selected[l] == 1 {
                        lp += -0.5 * ((ro.action.strengths[l] - tm[l]) / 0.1).powi(2);
                    }
                }
                let h: f64 = pr.iter().map(|&x| bernoulli_entropy(x)).sum();
                s += -(t - b) * lp - 0.05 * h;
            }
            s / 4.0
        };
        let flat = p.flat();
        let gf = g.flat();
        for i in (0..flat.len()).step_by(7) {
            let mut a = p.clone();
            let mut b = p.clone();
            let mut fa = flat.clone();
            let mut fb = flat.clone();
            fa[i] += 1e-6;
            fb[i] -= 1e-6;
            a.set_flat(&fa);
            b.set_flat(&fb);
            let num = (obj(&a) - obj(&b)) / 2e-6;
            assert!((num - gf[i]).abs() < 1e-6 * (1.0 + num.abs()), "param {i}: {num} vs {}", gf[i]);
        }
    }
}
