//! Verify-and-refine loop for ETC policies.
//!
//! Counterexamples from the verifier plus quasi-random points from the
//! input box are classified, given admissible targets, and used for
//! supervised updates of the option and control networks until the region
//! is certified invariant.

use serde::{Deserialize, Serialize};

use crate::envsim::LinearSystem;
use crate::error::{check_dim, Error, Result};
use crate::neuralnet::{Adam, AdamConfig, Direction, GradientTape, MlpNetwork};
use crate::policy::{communication_savings, EtcObservation, OptionId, PolicySet};
use crate::trainer::LossOutput;
use crate::verifier::{
    check_point_et, check_stability_composed, comm_saving_possible, compose, find_valid_input_et, BoxRegion,
    StabilityReport, StabilityStatus, VerifierConfig,
};

/// Largest supported Sobol dimension.
pub const MAX_SOBOL_DIM: usize = 16;
const SOBOL_BITS: usize = 32;

/// `(degree, coefficients, initial direction numbers)` for dimensions
/// 2..=16 from the Joe-Kuo "new-joe-kuo-6.21201" table.
const JOE_KUO: [(u32, u32, &[u32]); MAX_SOBOL_DIM - 1] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
];

/// Unscrambled Sobol sequence in Gray-code order; index 0 is the origin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SobolSampler {
    directions: Vec<[u32; SOBOL_BITS]>,
    state: Vec<u32>,
    index: u64,
}

impl SobolSampler {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_SOBOL_DIM {
            return Err(Error::InvalidParameter(format!(
                "Sobol dimension must be in 1..={MAX_SOBOL_DIM}, got {dim}"
            )));
        }
        let mut directions = Vec::with_capacity(dim);
        let mut first = [0u32; SOBOL_BITS];
        for (k, v) in first.iter_mut().enumerate() {
            *v = 1 << (SOBOL_BITS - 1 - k);
        }
        directions.push(first);
        for &(s, a, m) in JOE_KUO.iter().take(dim - 1) {
            let s = s as usize;
            let mut v = [0u32; SOBOL_BITS];
            for k in 0..s.min(SOBOL_BITS) {
                v[k] = m[k] << (SOBOL_BITS - 1 - k);
            }
            for k in s..SOBOL_BITS {
                let mut x = v[k - s] ^ (v[k - s] >> s);
                for j in 1..s {
                    if (a >> (s - 1 - j)) & 1 == 1 {
                        x ^= v[k - j];
                    }
                }
                v[k] = x;
            }
            directions.push(v);
        }
        Ok(Self {
            directions,
            state: vec![0; dim],
            index: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.state.len()
    }

    /// Index of the point the next call to [`next_point`](Self::next_point)
    /// returns.
    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let out = self
            .state
            .iter()
            .map(|&s| s as f64 / (1u64 << SOBOL_BITS) as f64)
            .collect();
        let c = (!self.index).trailing_zeros() as usize;
        if c < SOBOL_BITS {
            for (s, v) in self.state.iter_mut().zip(&self.directions) {
                *s ^= v[c];
            }
        }
        self.index += 1;
        out
    }

    pub fn skip(&mut self, n: u64) {
        for _ in 0..n {
            self.next_point();
        }
    }
}

/// Points `skip..skip + count` of the Sobol sequence mapped into `region`.
pub fn sobol_points(region: &BoxRegion, count: usize, skip: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::InvalidParameter("need at least one Sobol point".into()));
    }
    let mut s = SobolSampler::new(region.dim())?;
    s.skip(skip);
    Ok((0..count).map(|_| region.from_unit(&s.next_point())).collect())
}

/// Supervised targets for one refinement round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrainBatch {
    /// Points whose one-step successor leaves the region, as `(x, u_prev)`.
    pub crit: Vec<Vec<f64>>,
    /// Admissible input for each critical point.
    pub u_crit: Vec<Vec<f64>>,
    /// Points that communicate although holding is safe.
    pub comm_saving: Vec<Vec<f64>>,
}

impl RetrainBatch {
    pub fn is_empty(&self) -> bool {
        self.crit.is_empty() && self.comm_saving.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    pub max_epochs: usize,
    pub sobol_points: usize,
    /// Gradient steps per loss phase and round.
    pub steps: usize,
    pub lr_mu: f64,
    pub lr_pi: f64,
    /// Communication probability sought at critical points.
    pub crit_target: f64,
    /// Communication probability sought where communication can be saved.
    pub saving_target: f64,
    /// Deterministic linear rollouts for the savings estimate.
    pub savings_rollouts: usize,
    pub savings_horizon: usize,
    pub verifier: VerifierConfig,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 20,
            sobol_points: 256,
            steps: 200,
            lr_mu: 1e-3,
            lr_pi: 1e-3,
            crit_target: 0.6,
            saving_target: 0.4,
            savings_rollouts: 10,
            savings_horizon: 200,
            verifier: VerifierConfig::default(),
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sobol_points == 0 {
            return Err(Error::InvalidParameter("sobol_points must be positive".into()));
        }
        for (name, p) in [("crit_target", self.crit_target), ("saving_target", self.saving_target)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("{name} must be a probability")));
            }
        }
        if !(self.lr_mu > 0.0 && self.lr_pi > 0.0) {
            return Err(Error::InvalidParameter("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of `(P(communicate | x) - target)^2` and its gradient for the
/// option network.
pub fn comm_prob_loss(mu: &MlpNetwork, points: &[Vec<f64>], target: f64) -> Result<LossOutput> {
    let mut tape = GradientTape::zeros_like(mu);
    let mut total = 0.0;
    let k = OptionId::Transmit.index();
    for x in points {
        let f = mu.forward_recorded(x)?;
        let p = f.output();
        let diff = p[k] - target;
        total += diff * diff;
        let mut up = vec![0.0; p.len()];
        up[k] = 2.0 * diff;
        mu.backward_into(&f, &up, &mut tape)?;
    }
    let n = points.len();
    if n > 0 {
        tape.scale(1.0 / n as f64);
        total /= n as f64;
    }
    Ok(LossOutput {
        value: total,
        tape,
        used: n,
        skipped: 0,
    })
}

/// Mean of `|mean(x) - u|^2` for the control network.
pub fn action_loss(pi: &MlpNetwork, points: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<LossOutput> {
    check_dim("action targets", points.len(), targets.len())?;
    let mut tape = GradientTape::zeros_like(pi);
    let mut total = 0.0;
    for (x, u) in points.iter().zip(targets) {
        let f = pi.forward_recorded(x)?;
        check_dim("action target", pi.raw_dim(), u.len())?;
        let mut up = vec![0.0; f.output().len()];
        for (i, (m, t)) in f.raw().iter().zip(u).enumerate() {
            let diff = m - t;
            total += diff * diff;
            up[i] = 2.0 * diff;
        }
        pi.backward_into(&f, &up, &mut tape)?;
    }
    let n = points.len();
    if n > 0 {
        tape.scale(1.0 / n as f64);
        total /= n as f64;
    }
    Ok(LossOutput {
        value: total,
        tape,
        used: n,
        skipped: 0,
    })
}

/// Optimizer state carried across refinement rounds.
#[derive(Debug, Clone)]
pub struct SupervisedOptimizers {
    mu: Adam,
    pi: Adam,
}

impl SupervisedOptimizers {
    pub fn new(ps: &PolicySet, lr_mu: f64, lr_pi: f64) -> Self {
        let cfg = |lr| AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        };
        Self {
            mu: Adam::new(ps.mu(), cfg(lr_mu)),
            pi: Adam::new(ps.pi(), cfg(lr_pi)),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisedLosses {
    pub saving_before: f64,
    pub saving_after: f64,
    pub action_before: f64,
    pub action_after: f64,
    pub crit_before: f64,
    pub crit_after: f64,
}

/// Runs the communication-saving phase, then the critical-point phase
/// (control targets and communication probability together), `steps`
/// full-batch steps each.
pub fn supervised_step(
    ps: &mut PolicySet,
    batch: &RetrainBatch,
    opt: &mut SupervisedOptimizers,
    cfg: &RetrainConfig,
) -> Result<SupervisedLosses> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty retraining batch".into()));
    }
    check_dim("critical targets", batch.crit.len(), batch.u_crit.len())?;
    let mut out = SupervisedLosses::default();
    if !batch.comm_saving.is_empty() {
        out.saving_before = comm_prob_loss(ps.mu(), &batch.comm_saving, cfg.saving_target)?.value;
        for _ in 0..cfg.steps {
            let l = comm_prob_loss(ps.mu(), &batch.comm_saving, cfg.saving_target)?;
            opt.mu.step(ps.mu_mut(), &l.tape, Direction::Descent)?;
        }
        out.saving_after = comm_prob_loss(ps.mu(), &batch.comm_saving, cfg.saving_target)?.value;
    }
    if !batch.crit.is_empty() {
        out.action_before = action_loss(ps.pi(), &batch.crit, &batch.u_crit)?.value;
        out.crit_before = comm_prob_loss(ps.mu(), &batch.crit, cfg.crit_target)?.value;
        for _ in 0..cfg.steps {
            let la = action_loss(ps.pi(), &batch.crit, &batch.u_crit)?;
            opt.pi.step(ps.pi_mut(), &la.tape, Direction::Descent)?;
            let lc = comm_prob_loss(ps.mu(), &batch.crit, cfg.crit_target)?;
            opt.mu.step(ps.mu_mut(), &lc.tape, Direction::Descent)?;
        }
        out.action_after = action_loss(ps.pi(), &batch.crit, &batch.u_crit)?.value;
        out.crit_after = comm_prob_loss(ps.mu(), &batch.crit, cfg.crit_target)?.value;
    }
    Ok(out)
}

/// Deterministic closed loop on the linear system from `(x0, u0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRollout {
    pub states: Vec<Vec<f64>>,
    pub deltas: Vec<bool>,
}

pub fn linear_rollout(
    ps: &PolicySet,
    sys: &LinearSystem,
    x0: &[f64],
    u0: &[f64],
    action_limit: &[f64],
    steps: usize,
) -> Result<LinearRollout> {
    let mut x = x0.to_vec();
    let mut held = u0.to_vec();
    let mut states = vec![x.clone()];
    let mut deltas = Vec::with_capacity(steps);
    for _ in 0..steps {
        let obs = EtcObservation::new(&x, &held);
        let transmit = ps.decide_deterministic(&obs)? == OptionId::Transmit;
        if transmit {
            let (mean, _) = ps.action_distribution(&obs, 0)?;
            held = mean.iter().zip(action_limit).map(|(u, l)| u.clamp(-l, *l)).collect();
        }
        x = crate::envsim::step_linear(sys, &x, &held)?;
        states.push(x.clone());
        deltas.push(transmit);
    }
    Ok(LinearRollout { states, deltas })
}

/// Mean savings over deterministic linear rollouts started at Sobol points
/// of `region` with zero held input.
pub fn savings_estimate(
    ps: &PolicySet,
    sys: &LinearSystem,
    region: &BoxRegion,
    action_limit: &[f64],
    rollouts: usize,
    horizon: usize,
) -> Result<f64> {
    if rollouts == 0 || horizon == 0 {
        return Ok(0.0);
    }
    let starts = sobol_points(region, rollouts, 1)?;
    let zero = vec![0.0; action_limit.len()];
    let mut total = 0.0;
    for x0 in &starts {
        total += communication_savings(&linear_rollout(ps, sys, x0, &zero, action_limit, horizon)?.deltas);
    }
    Ok(total / rollouts as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainEpoch {
    pub epoch: usize,
    pub witnesses: usize,
    pub crit: usize,
    pub comm_saving: usize,
    pub certified: bool,
    pub savings: f64,
    pub losses: SupervisedLosses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RetrainStatus {
    Certified,
    /// Epoch budget spent without a certificate.
    Uncertified,
    /// No admissible input exists at this `(x, u_prev)`; the region cannot
    /// be made invariant with this input limit.
    NotControlInvariant {
        point: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct RetrainResult {
    pub policy: PolicySet,
    pub status: RetrainStatus,
    /// Refinement rounds applied.
    pub epochs: usize,
    pub history: Vec<RetrainEpoch>,
    pub last_report: StabilityReport,
}

/// Splits candidate points into critical and communication-saving sets.
pub fn classify_points(
    ps: &PolicySet,
    sys: &LinearSystem,
    region: &BoxRegion,
    action_limit: &[f64],
    witnesses: &[Vec<f64>],
    samples: &[Vec<f64>],
) -> Result<std::result::Result<RetrainBatch, Vec<f64>>> {
    let net = compose(ps, sys, action_limit)?;
    let mut batch = RetrainBatch::default();
    let add_crit = |p: &Vec<f64>, batch: &mut RetrainBatch| -> Result<bool> {
        match find_valid_input_et(p, sys, region, action_limit)? {
            Some(u) => {
                batch.crit.push(p.clone());
                batch.u_crit.push(u);
                Ok(true)
            }
            None => Ok(false),
        }
    };
    for w in witnesses {
        if !add_crit(w, &mut batch)? {
            return Ok(Err(w.clone()));
        }
    }
    for p in samples {
        if check_point_et(p, &net, region)? {
            if !add_crit(p, &mut batch)? {
                return Ok(Err(p.clone()));
            }
        } else if comm_saving_possible(p, &net, region)? {
            batch.comm_saving.push(p.clone());
        }
    }
    Ok(Ok(batch))
}

pub fn refine_policy_et(
    ps: &PolicySet,
    sys: &LinearSystem,
    region: &BoxRegion,
    action_limit: &[f64],
    cfg: &RetrainConfig,
) -> Result<RetrainResult> {
    refine_policy_et_with(ps, sys, region, action_limit, cfg, |_| {})
}

/// [`refine_policy_et`] with a callback after every round.
pub fn refine_policy_et_with(
    ps: &PolicySet,
    sys: &LinearSystem,
    region: &BoxRegion,
    action_limit: &[f64],
    cfg: &RetrainConfig,
    mut on_epoch: impl FnMut(&RetrainEpoch),
) -> Result<RetrainResult> {
    cfg.validate()?;
    check_dim("region", sys.state_dim(), region.dim())?;
    let input = region.augmented(action_limit)?;
    let mut policy = ps.clone();
    let mut opt = SupervisedOptimizers::new(&policy, cfg.lr_mu, cfg.lr_pi);
    let mut history = Vec::new();
    let check = |p: &PolicySet| -> Result<StabilityReport> {
        check_stability_composed(&compose(p, sys, action_limit)?, region, action_limit, &cfg.verifier)
    };
    let mut report = check(&policy)?;
    for epoch in 0..cfg.max_epochs {
        if report.status == StabilityStatus::Certified {
            return Ok(RetrainResult {
                policy,
                status: RetrainStatus::Certified,
                epochs: epoch,
                history,
                last_report: report,
            });
        }
        let witnesses: Vec<Vec<f64>> = report.witnesses.iter().map(|w| w.input.clone()).collect();
        let samples = sobol_points(&input, cfg.sobol_points, 1 + (epoch * cfg.sobol_points) as u64)?;
        let batch = match classify_points(&policy, sys, region, action_limit, &witnesses, &samples)? {
            Ok(b) => b,
            Err(point) => {
                return Ok(RetrainResult {
                    policy,
                    status: RetrainStatus::NotControlInvariant { point },
                    epochs: epoch,
                    history,
                    last_report: report,
                })
            }
        };
        let losses = if batch.is_empty() {
            SupervisedLosses::default()
        } else {
            supervised_step(&mut policy, &batch, &mut opt, cfg)?
        };
        report = check(&policy)?;
        let record = RetrainEpoch {
            epoch: epoch + 1,
            witnesses: witnesses.len(),
            crit: batch.crit.len(),
            comm_saving: batch.comm_saving.len(),
            certified: report.status == StabilityStatus::Certified,
            savings: savings_estimate(
                &policy,
                sys,
                region,
                action_limit,
                cfg.savings_rollouts,
                cfg.savings_horizon,
            )?,
            losses,
        };
        on_epoch(&record);
        history.push(record);
    }
    let status = if report.status == StabilityStatus::Certified {
        RetrainStatus::Certified
    } else {
        RetrainStatus::Uncertified
    };
    Ok(RetrainResult {
        policy,
        status,
        epochs: cfg.max_epochs,
        history,
        last_report: report,
    })
}
