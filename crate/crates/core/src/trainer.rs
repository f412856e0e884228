//! Option-critic PPO for event-triggered control: rollout collection, GAE,
//! the clipped surrogates for the policy over options and the control
//! policy, option-value regression and the epoch loop.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::envsim::EtcEnv;
use crate::error::{Error, Result};
use crate::neuralnet::{log_softmax, Adam, AdamConfig, Direction, GradientTape, MlpNetwork};
use crate::policy::{
    communication_savings, gaussian_log_prob, EtcObservation, OptionId, OptionSemantics, PolicyConfig, PolicySet,
};
use crate::seeds::{Rng, SeedStreams};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub option: OptionId,
    pub option_log_prob: f64,
    /// Raw control sample; present whenever the control policy acted.
    pub action: Option<Vec<f64>>,
    pub action_log_prob: f64,
    pub delta: bool,
    pub r_ctrl: f64,
    /// `r_ctrl - lambda * delta`.
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
    /// Last step of an episode or of the batch.
    pub cut: bool,
    /// Option values at `obs` under the collection-time network.
    pub q: Vec<f64>,
    /// `V(next_obs)` under the collection-time networks, filled on cut steps.
    pub bootstrap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Etc,
    /// Both options are control policies; every slot communicates.
    Periodic,
    /// Option and control policies are updated in alternating windows.
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda_comm: f64,
    pub lambda_gae: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    /// The entropy coefficient is divided by 10 after every this many epochs.
    pub entropy_decay_every: usize,
    /// Use `+tau * log(mu) * mu` as written instead of the entropy bonus.
    pub literal_entropy_sign: bool,
    pub epoch_transitions: usize,
    pub epochs: usize,
    pub optimizer_iterations: usize,
    /// Minibatch size per option.
    pub batch_size: usize,
    pub mode: TrainMode,
    /// Window length in epochs for `alternating` mode.
    pub alternating_window: usize,
    pub lr_mu: f64,
    pub lr_pi: f64,
    pub lr_q: f64,
    /// Global gradient-norm cap per network; `0` disables.
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    /// Multiplier applied to rewards before advantage and value estimation.
    pub reward_scale: f64,
    pub policy: PolicyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda_comm: 0.1,
            lambda_gae: 0.95,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            entropy_decay_every: 1000,
            literal_entropy_sign: false,
            epoch_transitions: 2048,
            epochs: 500,
            optimizer_iterations: 10,
            batch_size: 64,
            mode: TrainMode::Etc,
            alternating_window: 10,
            lr_mu: 3e-4,
            lr_pi: 3e-4,
            lr_q: 3e-4,
            max_grad_norm: 0.5,
            normalize_advantages: true,
            reward_scale: 1.0,
            policy: PolicyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(self.lambda_comm >= 0.0) {
            return bad("lambda_comm must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) {
            return bad("lambda_gae must be in [0, 1]");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if !(self.entropy_coef >= 0.0) || self.entropy_decay_every == 0 {
            return bad("entropy schedule must be non-negative with a positive period");
        }
        if self.epoch_transitions == 0 || self.optimizer_iterations == 0 || self.batch_size == 0 {
            return bad("transition, iteration and batch counts must be positive");
        }
        if self.mode == TrainMode::Alternating && self.alternating_window == 0 {
            return bad("alternating_window must be positive");
        }
        if !(self.lr_mu > 0.0 && self.lr_pi > 0.0 && self.lr_q > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.reward_scale > 0.0) || !self.reward_scale.is_finite() {
            return bad("reward_scale must be positive");
        }
        if self.mode == TrainMode::Periodic && self.policy.semantics != OptionSemantics::Periodic {
            return bad("periodic mode needs periodic policy semantics");
        }
        self.policy.validate()
    }

    /// Entropy coefficient in force once `epochs_done` epochs have completed.
    pub fn entropy_coef_after(&self, epochs_done: usize) -> f64 {
        let k = (epochs_done / self.entropy_decay_every) as i32;
        self.entropy_coef / 10f64.powi(k)
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            max_grad_norm: self.max_grad_norm,
            ..Default::default()
        }
    }
}

/// `a` restricted to `[b, c]`.
pub fn clip(a: f64, b: f64, c: f64) -> Result<f64> {
    if c < b {
        return Err(Error::InvalidParameter(format!("clip bounds reversed: [{b}, {c}]")));
    }
    Ok(a.max(b).min(c))
}

/// Samples from the current policy. Episodes are restarted at the start of
/// the call and whenever the horizon is reached.
pub fn collect_rollouts(
    env: &mut EtcEnv,
    ps: &PolicySet,
    cfg: &TrainConfig,
    env_rng: &mut Rng,
    policy_rng: &mut Rng,
) -> Result<Vec<Transition>> {
    let n = cfg.epoch_transitions;
    let mut out = Vec::with_capacity(n);
    env.reset(env_rng);
    let mut obs = env.observe(env_rng);
    for t in 0..n {
        let o = EtcObservation::from_vec(obs);
        let q = ps.q_values(&o)?;
        let d = ps.act(&o, policy_rng, false)?;
        let step = env.step(d.delta, d.transmit.as_deref(), env_rng)?;
        let next_obs = env.observe(env_rng);
        let cut = step.truncated || t + 1 == n;
        let bootstrap = if cut {
            ps.value(&EtcObservation::from_vec(next_obs.clone()))?
        } else {
            0.0
        };
        let penalty = if d.delta { cfg.lambda_comm } else { 0.0 };
        out.push(Transition {
            obs: o.as_slice().to_vec(),
            option: d.option,
            option_log_prob: d.option_log_prob,
            action: d.action,
            action_log_prob: d.action_log_prob,
            delta: d.delta,
            r_ctrl: step.r_ctrl,
            reward: step.r_ctrl - penalty,
            next_obs: next_obs.clone(),
            terminal: false,
            cut,
            q,
            bootstrap,
        });
        if step.truncated {
            env.reset(env_rng);
            obs = env.observe(env_rng);
        } else {
            obs = next_obs;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaeStep {
    pub reward: f64,
    pub value: f64,
    /// Value of the successor; ignored on terminal steps.
    pub next_value: f64,
    pub terminal: bool,
    /// Trajectory segment ends here.
    pub cut: bool,
}

/// `A_t = sum_l (gamma lambda)^l delta_{t+l}` within each segment.
pub fn gae(steps: &[GaeStep], gamma: f64, lambda: f64) -> Vec<f64> {
    let mut adv = vec![0.0; steps.len()];
    let mut running = 0.0;
    for (t, s) in steps.iter().enumerate().rev() {
        if s.cut {
            running = 0.0;
        }
        let next = if s.terminal { 0.0 } else { s.next_value };
        let td = s.reward + gamma * next - s.value;
        running = td + gamma * lambda * running;
        adv[t] = running;
    }
    adv
}

/// GAE inputs with `Q'(x, o)` as the baseline and the rollout's next option
/// for the successor value; segment cuts bootstrap with `V(x')`.
pub fn gae_steps(transitions: &[Transition], reward_scale: f64) -> Vec<GaeStep> {
    transitions
        .iter()
        .enumerate()
        .map(|(t, tr)| {
            let next_value = if tr.cut {
                tr.bootstrap
            } else {
                let nx = &transitions[t + 1];
                nx.q[nx.option.index()]
            };
            GaeStep {
                reward: tr.reward * reward_scale,
                value: tr.q[tr.option.index()],
                next_value,
                terminal: tr.terminal,
                cut: tr.cut,
            }
        })
        .collect()
}

/// `Q'(x, o) - max_o' Q'(x, o')`.
pub fn option_advantage(q: &[f64], option: OptionId) -> f64 {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    q[option.index()] - max
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
}

pub fn advantages(transitions: &[Transition], gamma: f64, lambda: f64, reward_scale: f64) -> AdvantageBatch {
    let pi = gae(&gae_steps(transitions, reward_scale), gamma, lambda);
    let mu = transitions.iter().map(|t| option_advantage(&t.q, t.option)).collect();
    AdvantageBatch { pi, mu }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MuSample {
    pub obs: Vec<f64>,
    pub option: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiSample {
    pub obs: Vec<f64>,
    /// Control-policy stream that produced the action.
    pub stream: usize,
    pub action: Vec<f64>,
    pub old_log_prob: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QSample {
    pub obs: Vec<f64>,
    pub option: usize,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyTerm {
    pub coef: f64,
    pub literal_sign: bool,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub tape: GradientTape,
    pub used: usize,
    /// Samples dropped because their probability ratio was not finite.
    pub skipped: usize,
}

/// `min(r A, clip(r) A)` and its derivative with respect to `r`.
fn surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, adv)
    } else {
        (clipped, 0.0)
    }
}

/// Clipped surrogate for the policy over options plus the entropy term;
/// the objective is maximized.
pub fn loss_mu(mu: &MlpNetwork, batch: &[MuSample], eps: f64, entropy: EntropyTerm) -> Result<LossOutput> {
    let mut tape = GradientTape::zeros_like(mu);
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for s in batch {
        let f = mu.forward_recorded(&s.obs)?;
        let z = f.raw();
        let p = f.output();
        let lp = log_softmax(z, s.option);
        let ratio = (lp - s.old_log_prob).exp();
        let inv_old = (-s.old_log_prob).exp();
        if !ratio.is_finite() || !inv_old.is_finite() {
            skipped += 1;
            continue;
        }
        let (surr, d_ratio) = surrogate(ratio, s.advantage, eps);
        let mut up = vec![0.0; p.len()];
        up[s.option] += d_ratio * inv_old;
        let mut ent = 0.0;
        if entropy.coef != 0.0 {
            if entropy.literal_sign {
                ent = entropy.coef * lp * p[s.option];
                up[s.option] += entropy.coef * (lp + 1.0);
            } else {
                for i in 0..p.len() {
                    let lpi = log_softmax(z, i);
                    ent -= entropy.coef * p[i] * lpi;
                    up[i] -= entropy.coef * (lpi + 1.0);
                }
            }
        }
        total += surr + ent;
        mu.backward_into(&f, &up, &mut tape)?;
        used += 1;
    }
    if used > 0 {
        tape.scale(1.0 / used as f64);
        total /= used as f64;
    }
    Ok(LossOutput {
        value: total,
        tape,
        used,
        skipped,
    })
}

/// Clipped surrogate for the control policy; maximized. An empty batch is a
/// no-op with `used == 0`.
pub fn loss_pi(pi: &MlpNetwork, batch: &[PiSample], eps: f64) -> Result<LossOutput> {
    let mut tape = GradientTape::zeros_like(pi);
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    let raw_dim = pi.raw_dim();
    for s in batch {
        let a = s.action.len();
        let lo = s.stream * a;
        if lo + a > raw_dim {
            return Err(Error::InvalidParameter(format!("no control stream {}", s.stream)));
        }
        let f = pi.forward_recorded(&s.obs)?;
        let mean = &f.raw()[lo..lo + a];
        let log_std = &pi.log_std()[lo..lo + a];
        let lp = gaussian_log_prob(mean, log_std, &s.action);
        let ratio = (lp - s.old_log_prob).exp();
        if !ratio.is_finite() {
            skipped += 1;
            continue;
        }
        let (surr, d_ratio) = surrogate(ratio, s.advantage, eps);
        let g = d_ratio * ratio;
        let mut up = vec![0.0; 2 * raw_dim];
        for j in 0..a {
            let var = (2.0 * log_std[j]).exp();
            let diff = s.action[j] - mean[j];
            up[lo + j] = g * diff / var;
            up[raw_dim + lo + j] = g * (diff * diff / var - 1.0);
        }
        total += surr;
        pi.backward_into(&f, &up, &mut tape)?;
        used += 1;
    }
    if used > 0 {
        tape.scale(1.0 / used as f64);
        total /= used as f64;
    }
    Ok(LossOutput {
        value: total,
        tape,
        used,
        skipped,
    })
}

/// Mean squared error of the option values against fixed targets; minimized.
pub fn loss_q(q: &MlpNetwork, batch: &[QSample]) -> Result<LossOutput> {
    let mut tape = GradientTape::zeros_like(q);
    let mut total = 0.0;
    for s in batch {
        let f = q.forward_recorded(&s.obs)?;
        let e = f.output()[s.option] - s.target;
        total += e * e;
        let mut up = vec![0.0; q.output_dim()];
        up[s.option] = 2.0 * e;
        q.backward_into(&f, &up, &mut tape)?;
    }
    if !batch.is_empty() {
        tape.scale(1.0 / batch.len() as f64);
        total /= batch.len() as f64;
    }
    Ok(LossOutput {
        value: total,
        tape,
        used: batch.len(),
        skipped: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_r_ctrl: f64,
    pub savings: f64,
    pub option_fracs: Vec<f64>,
    pub tau: f64,
    pub loss_mu: f64,
    pub loss_pi: f64,
    pub loss_q: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Policy with the highest training-batch mean reward.
    pub best: PolicySet,
    pub best_epoch: Option<usize>,
    pub last: PolicySet,
    pub metrics: Vec<EpochMetrics>,
    /// Reason training stopped early, if it did.
    pub diverged: Option<String>,
}

pub fn batch_metrics(transitions: &[Transition], option_count: usize) -> (f64, f64, f64, Vec<f64>) {
    let n = transitions.len().max(1) as f64;
    let mean_reward = transitions.iter().map(|t| t.reward).sum::<f64>() / n;
    let mean_r_ctrl = transitions.iter().map(|t| t.r_ctrl).sum::<f64>() / n;
    let deltas: Vec<bool> = transitions.iter().map(|t| t.delta).collect();
    let mut fracs = vec![0.0; option_count];
    for t in transitions {
        fracs[t.option.index()] += 1.0 / n;
    }
    (mean_reward, mean_r_ctrl, communication_savings(&deltas), fracs)
}

pub fn train(env: &EtcEnv, cfg: &TrainConfig, seed: u64) -> Result<TrainResult> {
    train_with(env, cfg, seed, |_| {})
}

/// Like [`train`] with a callback after every epoch.
pub fn train_with(
    env: &EtcEnv,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainResult> {
    cfg.validate()?;
    let streams = SeedStreams::new(seed);
    let ps = PolicySet::new(
        env.plant().state_dim(),
        env.actuator().action_limit(),
        &cfg.policy,
        &mut streams.rng("policy-init"),
    )?;
    train_from(env, ps, cfg, seed, on_epoch)
}

/// Continues training an existing policy.
pub fn train_from(
    env: &EtcEnv,
    mut ps: PolicySet,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainResult> {
    cfg.validate()?;
    let streams = SeedStreams::new(seed);
    let mut env = env.clone();
    let mut env_rng = streams.rng("env");
    let mut policy_rng = streams.rng("sampling");
    let mut batch_rng = streams.rng("minibatch");
    let mut adam_mu = Adam::new(ps.mu(), cfg.adam(cfg.lr_mu));
    let mut adam_pi = Adam::new(ps.pi(), cfg.adam(cfg.lr_pi));
    let mut adam_q = Adam::new(ps.q(), cfg.adam(cfg.lr_q));
    let k = ps.option_count();

    let mut best = ps.clone();
    let mut best_reward = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut diverged = None;

    for epoch in 0..cfg.epochs {
        let tau = cfg.entropy_coef_after(epoch);
        let transitions = match collect_rollouts(&mut env, &ps, cfg, &mut env_rng, &mut policy_rng) {
            Ok(t) => t,
            Err(e) => {
                diverged = Some(format!("epoch {epoch}: rollout failed: {e}"));
                break;
            }
        };
        let (mean_reward, mean_r_ctrl, savings, option_fracs) = batch_metrics(&transitions, k);
        if mean_reward > best_reward {
            best_reward = mean_reward;
            best = ps.clone();
            best_epoch = Some(epoch);
        }

        let adv = advantages(&transitions, cfg.gamma, cfg.lambda_gae, cfg.reward_scale);
        let pi_adv = normalized_pi_advantages(&ps, &transitions, &adv.pi, cfg.normalize_advantages);
        let (update_mu, update_pi) = match cfg.mode {
            TrainMode::Alternating => {
                let mu_window = (epoch / cfg.alternating_window) % 2 == 0;
                (mu_window, !mu_window)
            }
            _ => (true, true),
        };

        let mut by_option: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, t) in transitions.iter().enumerate() {
            by_option[t.option.index()].push(i);
        }
        let entropy = EntropyTerm {
            coef: tau,
            literal_sign: cfg.literal_entropy_sign,
        };
        let mut losses = (0.0, 0.0, 0.0);
        let mut failure = None;
        for _ in 0..cfg.optimizer_iterations {
            let mut idx = Vec::new();
            for group in &by_option {
                if group.len() <= cfg.batch_size {
                    idx.extend_from_slice(group);
                } else {
                    idx.extend(
                        sample_indices(&mut batch_rng, group.len(), cfg.batch_size)
                            .iter()
                            .map(|j| group[j]),
                    );
                }
            }
            let mu_batch: Vec<MuSample> = idx
                .iter()
                .map(|&i| MuSample {
                    obs: transitions[i].obs.clone(),
                    option: transitions[i].option.index(),
                    old_log_prob: transitions[i].option_log_prob,
                    advantage: adv.mu[i],
                })
                .collect();
            let pi_batch: Vec<PiSample> = idx
                .iter()
                .filter_map(|&i| {
                    let t = &transitions[i];
                    let stream = ps.pi_stream(t.option)?;
                    Some(PiSample {
                        obs: t.obs.clone(),
                        stream,
                        action: t.action.clone()?,
                        old_log_prob: t.action_log_prob,
                        advantage: pi_adv[i],
                    })
                })
                .collect();
            let q_batch: Vec<QSample> = idx
                .iter()
                .map(|&i| {
                    let t = &transitions[i];
                    let o = t.option.index();
                    QSample {
                        obs: t.obs.clone(),
                        option: o,
                        target: t.q[o] + adv.pi[i],
                    }
                })
                .collect();

            let step = (|| -> Result<(f64, f64, f64)> {
                let lm = loss_mu(ps.mu(), &mu_batch, cfg.clip_eps, entropy)?;
                let lp = loss_pi(ps.pi(), &pi_batch, cfg.clip_eps)?;
                let lq = loss_q(ps.q(), &q_batch)?;
                for (name, v) in [("mu", lm.value), ("pi", lp.value), ("q", lq.value)] {
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!("{name} loss")));
                    }
                }
                if update_mu && lm.used > 0 {
                    adam_mu.step(ps.mu_mut(), &lm.tape, Direction::Ascent)?;
                }
                if update_pi && lp.used > 0 {
                    adam_pi.step(ps.pi_mut(), &lp.tape, Direction::Ascent)?;
                }
                adam_q.step(ps.q_mut(), &lq.tape, Direction::Descent)?;
                Ok((lm.value, lp.value, lq.value))
            })();
            match step {
                Ok(l) => losses = l,
                Err(e) => {
                    failure = Some(format!("epoch {epoch}: {e}"));
                    break;
                }
            }
        }
        let m = EpochMetrics {
            epoch,
            mean_reward,
            mean_r_ctrl,
            savings,
            option_fracs,
            tau,
            loss_mu: losses.0,
            loss_pi: losses.1,
            loss_q: losses.2,
        };
        on_epoch(&m);
        metrics.push(m);
        if failure.is_some() {
            diverged = failure;
            break;
        }
    }
    Ok(TrainResult {
        best,
        best_epoch,
        last: ps,
        metrics,
        diverged,
    })
}

fn normalized_pi_advantages(ps: &PolicySet, transitions: &[Transition], adv: &[f64], normalize: bool) -> Vec<f64> {
    if !normalize {
        return adv.to_vec();
    }
    let acted: Vec<f64> = transitions
        .iter()
        .zip(adv)
        .filter(|(t, _)| ps.pi_stream(t.option).is_some())
        .map(|(_, a)| *a)
        .collect();
    if acted.len() < 2 {
        return adv.to_vec();
    }
    let mean = acted.iter().sum::<f64>() / acted.len() as f64;
    let var = acted.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / acted.len() as f64;
    let std = var.sqrt().max(1e-8);
    adv.iter().map(|a| (a - mean) / std).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub deterministic: bool,
    /// An episode is stable while `|x[0]|` stays below this bound.
    pub angle_limit: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 10,
            deterministic: true,
            angle_limit: std::f64::consts::FRAC_PI_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub r_ctrl: f64,
    pub savings: f64,
    pub max_abs_angle: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: Vec<EpisodeStats>,
    pub mean_r_ctrl: f64,
    pub mean_savings: f64,
    pub all_stable: bool,
}

impl EvalSummary {
    pub fn from_episodes(episodes: Vec<EpisodeStats>) -> Self {
        let n = episodes.len().max(1) as f64;
        Self {
            mean_r_ctrl: episodes.iter().map(|e| e.r_ctrl).sum::<f64>() / n,
            mean_savings: episodes.iter().map(|e| e.savings).sum::<f64>() / n,
            all_stable: episodes.iter().all(|e| e.stable),
            episodes,
        }
    }
}

/// One closed-loop step seen by [`evaluate_policy_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStep<'a> {
    pub episode: usize,
    pub t: usize,
    /// Plant state before the step.
    pub state: &'a [f64],
    pub applied: &'a [f64],
    pub delta: bool,
    pub r_ctrl: f64,
}

/// Rolls the policy out for full-horizon episodes. `r_ctrl` is the episode sum.
pub fn evaluate_policy(env: &EtcEnv, ps: &PolicySet, cfg: &EvalConfig, rng: &mut Rng) -> Result<EvalSummary> {
    evaluate_policy_with(env, ps, cfg, rng, |_| {})
}

/// Like [`evaluate_policy`] with a callback after every step.
pub fn evaluate_policy_with(
    env: &EtcEnv,
    ps: &PolicySet,
    cfg: &EvalConfig,
    rng: &mut Rng,
    mut on_step: impl FnMut(&EvalStep),
) -> Result<EvalSummary> {
    let mut env = env.clone();
    let mut episodes = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        env.reset(rng);
        let mut deltas = Vec::new();
        let mut r_ctrl = 0.0;
        let mut max_abs = env.state().x[0].abs();
        loop {
            let obs = EtcObservation::from_vec(env.observe(rng));
            let d = ps.act(&obs, rng, cfg.deterministic)?;
            let before = env.state().x.clone();
            let step = env.step(d.delta, d.transmit.as_deref(), rng)?;
            on_step(&EvalStep {
                episode,
                t: deltas.len(),
                state: &before,
                applied: &step.applied,
                delta: d.delta,
                r_ctrl: step.r_ctrl,
            });
            deltas.push(d.delta);
            r_ctrl += step.r_ctrl;
            max_abs = max_abs.max(env.state().x[0].abs());
            if step.truncated {
                break;
            }
        }
        episodes.push(EpisodeStats {
            r_ctrl,
            savings: communication_savings(&deltas),
            max_abs_angle: max_abs,
            stable: max_abs < cfg.angle_limit,
        });
    }
    Ok(EvalSummary::from_episodes(episodes))
}
