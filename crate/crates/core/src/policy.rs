//! The option-based ETC policy: a policy over options deciding whether to
//! communicate, an intra-option Gaussian control policy and a split-stream
//! option-value estimator.
//!
//! There is no termination function; a fresh option is chosen every step.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::neuralnet::{log_softmax, Activation, MlpNetwork, NetSpec, OutputHead};
use crate::seeds::Rng;

/// `x~ = (y, u_prev)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtcObservation {
    values: Vec<f64>,
}

impl EtcObservation {
    pub fn new(measurement: &[f64], held_action: &[f64]) -> Self {
        let mut values = measurement.to_vec();
        values.extend_from_slice(held_action);
        Self { values }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptionId {
    /// Skip the slot; the actuator keeps its last command.
    Hold,
    /// Sample and transmit a new command.
    Transmit,
    /// Transmit the zero command.
    Zero,
}

impl OptionId {
    pub fn index(self) -> usize {
        match self {
            OptionId::Hold => 0,
            OptionId::Transmit => 1,
            OptionId::Zero => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(OptionId::Hold),
            1 => Ok(OptionId::Transmit),
            2 => Ok(OptionId::Zero),
            _ => Err(Error::InvalidParameter(format!("option index {i} out of range"))),
        }
    }
}

/// How options map onto actuator behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptionSemantics {
    /// Option 0 holds, option 1 samples from the control policy, option 2 sends zero.
    #[default]
    Etc,
    /// Every option is its own control policy and every slot communicates.
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub option_count: usize,
    pub semantics: OptionSemantics,
    pub init_log_std: f64,
    /// Initial weight scale of the option-logit and action-mean output layers.
    pub head_init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            option_count: 2,
            semantics: OptionSemantics::Etc,
            init_log_std: -0.5,
            head_init_scale: 0.01,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.option_count == 0 || self.option_count > 3 {
            return Err(Error::InvalidParameter(format!(
                "option_count must be 1, 2 or 3, got {}",
                self.option_count
            )));
        }
        if self.semantics == OptionSemantics::Etc && self.option_count == 1 {
            return Err(Error::InvalidParameter(
                "event-triggered semantics need at least two options".into(),
            ));
        }
        if !self.init_log_std.is_finite() || !(self.head_init_scale >= 0.0) {
            return Err(Error::InvalidParameter("bad initial scales".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyManifest {
    pub option_count: usize,
    pub semantics: OptionSemantics,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_limit: Vec<f64>,
    /// Observation entries in order, e.g. `["y0", "y1", "u_prev0"]`.
    pub observation: Vec<String>,
}

/// Result of one step of policy evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub option: OptionId,
    pub option_log_prob: f64,
    /// Raw sample from the control policy, present whenever it was evaluated.
    pub action: Option<Vec<f64>>,
    pub action_log_prob: f64,
    pub delta: bool,
    /// Clipped command to transmit when `delta` is set.
    pub transmit: Option<Vec<f64>>,
}

#[derive(Debug)]
pub struct PolicySet {
    mu: MlpNetwork,
    pi: MlpNetwork,
    q: MlpNetwork,
    manifest: PolicyManifest,
    pi_evaluations: AtomicU64,
}

impl Clone for PolicySet {
    fn clone(&self) -> Self {
        Self {
            mu: self.mu.clone(),
            pi: self.pi.clone(),
            q: self.q.clone(),
            manifest: self.manifest.clone(),
            pi_evaluations: AtomicU64::new(self.pi_evaluations()),
        }
    }
}

impl PartialEq for PolicySet {
    fn eq(&self, other: &Self) -> bool {
        self.mu == other.mu && self.pi == other.pi && self.q == other.q && self.manifest == other.manifest
    }
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
    mean.iter()
        .zip(log_std)
        .zip(x)
        .map(|((m, ls), v)| {
            let z = (v - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

impl PolicySet {
    pub fn new(state_dim: usize, action_limit: &[f64], config: &PolicyConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let action_dim = action_limit.len();
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::InvalidParameter(
                "state and action dimensions must be positive".into(),
            ));
        }
        let obs_dim = state_dim + action_dim;
        let k = config.option_count;
        let pi_streams = match config.semantics {
            OptionSemantics::Etc => 1,
            OptionSemantics::Periodic => k,
        };
        let mu = MlpNetwork::new(
            &NetSpec::new(obs_dim, &config.hidden, 1)
                .streams(k)
                .activation(config.activation)
                .head(OutputHead::Softmax)
                .output_scale(config.head_init_scale),
            rng,
        )?;
        let pi = MlpNetwork::new(
            &NetSpec::new(obs_dim, &config.hidden, action_dim)
                .streams(pi_streams)
                .activation(config.activation)
                .head(OutputHead::Gaussian)
                .init_log_std(config.init_log_std)
                .output_scale(config.head_init_scale),
            rng,
        )?;
        let q = MlpNetwork::new(
            &NetSpec::new(obs_dim, &config.hidden, 1)
                .streams(k)
                .activation(config.activation)
                .head(OutputHead::Linear),
            rng,
        )?;
        let manifest = PolicyManifest {
            option_count: k,
            semantics: config.semantics,
            state_dim,
            action_dim,
            action_limit: action_limit.to_vec(),
            observation: observation_names(state_dim, action_dim),
        };
        Self::from_parts(mu, pi, q, manifest)
    }

    pub fn from_parts(mu: MlpNetwork, pi: MlpNetwork, q: MlpNetwork, manifest: PolicyManifest) -> Result<Self> {
        let obs_dim = manifest.state_dim + manifest.action_dim;
        let k = manifest.option_count;
        let bad = |m: &str| Err(Error::Format(m.to_string()));
        if k == 0 || k > 3 {
            return bad("option_count must be 1, 2 or 3");
        }
        if manifest.action_limit.len() != manifest.action_dim {
            return bad("action_limit length differs from action_dim");
        }
        if manifest.action_limit.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return bad("action limits must be positive and finite");
        }
        for (name, net) in [("mu", &mu), ("pi", &pi), ("q", &q)] {
            if net.input_dim() != obs_dim {
                return Err(Error::Format(format!(
                    "{name} network expects {} inputs, manifest implies {obs_dim}",
                    net.input_dim()
                )));
            }
        }
        if mu.head() != OutputHead::Softmax || mu.raw_dim() != k {
            return bad("mu network must be a softmax over option_count logits");
        }
        if q.head() != OutputHead::Linear || q.raw_dim() != k {
            return bad("q network must output one value per option");
        }
        let pi_streams = match manifest.semantics {
            OptionSemantics::Etc => 1,
            OptionSemantics::Periodic => k,
        };
        if pi.head() != OutputHead::Gaussian || pi.raw_dim() != pi_streams * manifest.action_dim {
            return bad("pi network must be gaussian with one mean per action and stream");
        }
        Ok(Self {
            mu,
            pi,
            q,
            manifest,
            pi_evaluations: AtomicU64::new(0),
        })
    }

    pub fn mu(&self) -> &MlpNetwork {
        &self.mu
    }

    pub fn pi(&self) -> &MlpNetwork {
        &self.pi
    }

    pub fn q(&self) -> &MlpNetwork {
        &self.q
    }

    pub fn mu_mut(&mut self) -> &mut MlpNetwork {
        &mut self.mu
    }

    pub fn pi_mut(&mut self) -> &mut MlpNetwork {
        &mut self.pi
    }

    pub fn q_mut(&mut self) -> &mut MlpNetwork {
        &mut self.q
    }

    pub fn manifest(&self) -> &PolicyManifest {
        &self.manifest
    }

    pub fn option_count(&self) -> usize {
        self.manifest.option_count
    }

    pub fn semantics(&self) -> OptionSemantics {
        self.manifest.semantics
    }

    pub fn obs_dim(&self) -> usize {
        self.manifest.state_dim + self.manifest.action_dim
    }

    pub fn action_dim(&self) -> usize {
        self.manifest.action_dim
    }

    pub fn action_limit(&self) -> &[f64] {
        &self.manifest.action_limit
    }

    /// Number of control-policy evaluations since construction.
    pub fn pi_evaluations(&self) -> u64 {
        self.pi_evaluations.load(Ordering::Relaxed)
    }

    fn check_obs(&self, obs: &EtcObservation) -> Result<()> {
        check_dim("observation", self.obs_dim(), obs.dim())
    }

    /// Option logits `zeta`.
    pub fn option_logits(&self, obs: &EtcObservation) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        let z = self.mu.forward_raw(obs.as_slice())?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("option logits".into()));
        }
        Ok(z)
    }

    pub fn option_probs(&self, obs: &EtcObservation) -> Result<Vec<f64>> {
        let z = self.option_logits(obs)?;
        Ok(crate::neuralnet::softmax(&z))
    }

    /// `Z > 0` holds, otherwise communicates. Only defined for two options.
    pub fn decide_deterministic(&self, obs: &EtcObservation) -> Result<OptionId> {
        if self.option_count() != 2 {
            return Err(Error::InvalidParameter(
                "deterministic decision needs exactly two options".into(),
            ));
        }
        let z = self.option_logits(obs)?;
        Ok(if z[0] - z[1] > 0.0 {
            OptionId::Hold
        } else {
            OptionId::Transmit
        })
    }

    /// Greedy option: the Z rule for two options, otherwise the first argmax.
    pub fn greedy_option(&self, obs: &EtcObservation) -> Result<OptionId> {
        if self.option_count() == 2 {
            return self.decide_deterministic(obs);
        }
        let z = self.option_logits(obs)?;
        let mut best = 0;
        for (i, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = i;
            }
        }
        OptionId::from_index(best)
    }

    pub fn sample_option(&self, obs: &EtcObservation, rng: &mut Rng) -> Result<(OptionId, f64)> {
        let z = self.option_logits(obs)?;
        let p = crate::neuralnet::softmax(&z);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = p.len() - 1;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                pick = i;
                break;
            }
        }
        while p[pick] == 0.0 && pick > 0 {
            pick -= 1;
        }
        Ok((OptionId::from_index(pick)?, log_softmax(&z, pick)))
    }

    /// Which control-policy stream serves `option`, if any.
    pub fn pi_stream(&self, option: OptionId) -> Option<usize> {
        match (self.semantics(), option) {
            (OptionSemantics::Etc, OptionId::Transmit) => Some(0),
            (OptionSemantics::Etc, _) => None,
            (OptionSemantics::Periodic, o) if o.index() < self.option_count() => Some(o.index()),
            _ => None,
        }
    }

    /// Mean and log-std of the control policy for `stream`.
    pub fn action_distribution(&self, obs: &EtcObservation, stream: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_obs(obs)?;
        let a = self.action_dim();
        if (stream + 1) * a > self.pi.raw_dim() {
            return Err(Error::InvalidParameter(format!("no control stream {stream}")));
        }
        self.pi_evaluations.fetch_add(1, Ordering::Relaxed);
        let raw = self.pi.forward_raw(obs.as_slice())?;
        let mean = raw[stream * a..(stream + 1) * a].to_vec();
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action mean".into()));
        }
        let log_std = self.pi.log_std()[stream * a..(stream + 1) * a].to_vec();
        Ok((mean, log_std))
    }

    /// Draws a raw (unclipped) action and its log-density.
    pub fn sample_action(&self, obs: &EtcObservation, stream: usize, rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
        let (mean, log_std) = self.action_distribution(obs, stream)?;
        let u: Vec<f64> = mean
            .iter()
            .zip(&log_std)
            .map(|(m, ls)| {
                let n: f64 = rng.sample(StandardNormal);
                m + ls.exp() * n
            })
            .collect();
        let lp = gaussian_log_prob(&mean, &log_std, &u);
        Ok((u, lp))
    }

    fn clip(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(&self.manifest.action_limit)
            .map(|(u, l)| u.clamp(-l, *l))
            .collect()
    }

    /// Maps an option (and the sampled action if one was drawn) to the
    /// communication flag and the command to transmit.
    pub fn apply_option(&self, option: OptionId, action: Option<&[f64]>) -> Result<(bool, Option<Vec<f64>>)> {
        if option.index() >= self.option_count() {
            return Err(Error::InvalidParameter(format!("option {option:?} not enabled")));
        }
        match (self.semantics(), option) {
            (OptionSemantics::Etc, OptionId::Hold) => Ok((false, None)),
            (OptionSemantics::Etc, OptionId::Zero) => Ok((true, Some(vec![0.0; self.action_dim()]))),
            _ => {
                let a = action.ok_or(Error::MissingAction)?;
                check_dim("action", self.action_dim(), a.len())?;
                Ok((true, Some(self.clip(a))))
            }
        }
    }

    pub fn q_values(&self, obs: &EtcObservation) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        let q = self.q.forward(obs.as_slice())?;
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("option values".into()));
        }
        Ok(q)
    }

    /// `V(x~) = sum_o mu(o|x~) Q(x~, o)`.
    pub fn value(&self, obs: &EtcObservation) -> Result<f64> {
        let p = self.option_probs(obs)?;
        let q = self.q_values(obs)?;
        Ok(p.iter().zip(&q).map(|(a, b)| a * b).sum())
    }

    /// One step of behavior. Stochastic mode samples both the option and the
    /// action; deterministic mode uses the greedy option and the mean action.
    /// The control policy is only evaluated when the chosen option needs it.
    pub fn act(&self, obs: &EtcObservation, rng: &mut Rng, deterministic: bool) -> Result<Decision> {
        let (option, option_log_prob) = if deterministic {
            (self.greedy_option(obs)?, 0.0)
        } else {
            self.sample_option(obs, rng)?
        };
        let (action, action_log_prob) = match self.pi_stream(option) {
            Some(stream) if deterministic => (Some(self.action_distribution(obs, stream)?.0), 0.0),
            Some(stream) => {
                let (u, lp) = self.sample_action(obs, stream, rng)?;
                (Some(u), lp)
            }
            None => (None, 0.0),
        };
        let (delta, transmit) = self.apply_option(option, action.as_deref())?;
        Ok(Decision {
            option,
            option_log_prob,
            action,
            action_log_prob,
            delta,
            transmit,
        })
    }

    /// Writes `mu.json`, `pi.json`, `q.json` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("mu.json"), self.mu.save())?;
        std::fs::write(dir.join("pi.json"), self.pi.save())?;
        std::fs::write(dir.join("q.json"), self.q.save())?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| std::fs::read_to_string(dir.join(name));
        let manifest: PolicyManifest = serde_json::from_str(&read("manifest.json")?)?;
        let mu = MlpNetwork::load(&read("mu.json")?)?;
        let pi = MlpNetwork::load(&read("pi.json")?)?;
        let q = MlpNetwork::load(&read("q.json")?)?;
        Self::from_parts(mu, pi, q, manifest)
    }
}

fn observation_names(state_dim: usize, action_dim: usize) -> Vec<String> {
    (0..state_dim)
        .map(|i| format!("y{i}"))
        .chain((0..action_dim).map(|i| format!("u_prev{i}")))
        .collect()
}

/// `1 - (communicating slots) / N`.
pub fn communication_savings(deltas: &[bool]) -> f64 {
    if deltas.is_empty() {
        return 0.0;
    }
    1.0 - deltas.iter().filter(|d| **d).count() as f64 / deltas.len() as f64
}
