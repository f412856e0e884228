//! Classical comparison controllers: discrete-time LQR with five trigger laws,
//! and a random-skip wrapper around an always-communicating learned policy.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envsim::{linearize_pendulum, EtcEnv, PendulumParams, Plant};
use crate::error::{check_dim, Error, Result};
use crate::policy::{communication_savings, EtcObservation, PolicySet};
use crate::seeds::{Rng, SeedStreams};
use crate::trainer::{EpisodeStats, EvalConfig, EvalSummary};

pub const DARE_TOL: f64 = 1e-12;
pub const DARE_MAX_ITER: usize = 100_000;

/// Iterates the Riccati recursion from `P = Q` to its fixed point and returns
/// `(P, K)` with `K = (R + B'PB)^-1 B'PA`; the control law is `u = -K x`.
pub fn dare_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let m = b.ncols();
    check_dim("DARE A columns", n, a.ncols())?;
    check_dim("DARE B rows", n, b.nrows())?;
    check_dim("DARE Q", n, q.nrows())?;
    check_dim("DARE Q", n, q.ncols())?;
    check_dim("DARE R", m, r.nrows())?;
    check_dim("DARE R", m, r.ncols())?;
    if r.clone().cholesky().is_none() {
        return Err(Error::InvalidParameter("R must be positive definite".into()));
    }
    let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let s = r + b.transpose() * p * b;
        let rhs = b.transpose() * p * a;
        s.lu()
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidParameter("R + B'PB is singular".into()))
    };
    let mut p = q.clone();
    for _ in 0..DARE_MAX_ITER {
        let k = gain(&p)?;
        let next = a.transpose() * &p * a - a.transpose() * &p * b * &k + q;
        let next = (&next + next.transpose()) * 0.5;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NoConvergence(DARE_MAX_ITER));
        }
        let change = (&next - &p).amax();
        p = next;
        if change < DARE_TOL {
            let k = gain(&p)?;
            return Ok((p, k));
        }
    }
    Err(Error::NoConvergence(DARE_MAX_ITER))
}

/// `|| P - (A'PA - A'PB (R + B'PB)^-1 B'PA + Q) ||_max`.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let s = r + b.transpose() * p * b;
    let s_inv = s.try_inverse().expect("invertible");
    let rhs = a.transpose() * p * a - a.transpose() * p * b * s_inv * b.transpose() * p * a + q;
    (p - rhs).amax()
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrController {
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q_weights: DMatrix<f64>,
    pub r_weights: DMatrix<f64>,
}

impl LqrController {
    pub fn design(a: &DMatrix<f64>, b: &DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let (p, k) = dare_solve(a, b, &q, &r)?;
        Ok(Self {
            k,
            p,
            q_weights: q,
            r_weights: r,
        })
    }

    /// Weights taken from the reward: `diag(1, 0.1)` on the state and the
    /// control weight on the input.
    pub fn pendulum(params: &PendulumParams) -> Result<Self> {
        let sys = linearize_pendulum(params);
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.1]));
        let r = DMatrix::from_element(1, 1, params.ctrl_weight);
        Self::design(sys.a(), sys.b(), q, r)
    }

    /// Unsaturated command `-K x`.
    pub fn action(&self, x: &[f64]) -> Vec<f64> {
        let u = &self.k * nalgebra::DVector::from_column_slice(x);
        u.iter().map(|v| -v).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    Always,
    RandomSkip,
    StateNorm,
    OutputBased,
    StateDiff,
}

impl TriggerKind {
    pub const ALL: [TriggerKind; 5] = [
        TriggerKind::Always,
        TriggerKind::RandomSkip,
        TriggerKind::StateNorm,
        TriggerKind::OutputBased,
        TriggerKind::StateDiff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TriggerKind::Always => "always",
            TriggerKind::RandomSkip => "random_skip",
            TriggerKind::StateNorm => "state_norm",
            TriggerKind::OutputBased => "output_based",
            TriggerKind::StateDiff => "state_diff",
        }
    }
}

impl std::str::FromStr for TriggerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TriggerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown trigger rule '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRule {
    pub kind: TriggerKind,
    pub threshold: f64,
    /// State at the last triggering instant.
    pub last_trigger_state: Vec<f64>,
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

impl TriggerRule {
    pub fn new(kind: TriggerKind, threshold: f64, x0: &[f64]) -> Result<Self> {
        if !(threshold >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "threshold must be non-negative, got {threshold}"
            )));
        }
        Ok(Self {
            kind,
            threshold,
            last_trigger_state: x0.to_vec(),
        })
    }

    /// Decides whether to communicate at state `x`; updates the stored state
    /// when it does. Only `random_skip` consumes randomness.
    pub fn decide(&mut self, x: &[f64], k: &DMatrix<f64>, rng: &mut Rng) -> bool {
        let xi = self.threshold;
        let xh = &self.last_trigger_state;
        let fire = match self.kind {
            TriggerKind::Always => true,
            TriggerKind::RandomSkip => {
                let nu: f64 = rng.random();
                nu > xi
            }
            TriggerKind::StateNorm => norm(x.iter().copied()) > xi,
            TriggerKind::OutputBased => {
                let kx = k * nalgebra::DVector::from_column_slice(x);
                let kxh = k * nalgebra::DVector::from_column_slice(xh);
                (&kxh - &kx).norm() > xi * kx.norm()
            }
            TriggerKind::StateDiff => norm(xh.iter().zip(x).map(|(a, b)| a - b)) > xi * norm(x.iter().copied()),
        };
        if fire {
            self.last_trigger_state.copy_from_slice(x);
        }
        fire
    }
}

/// Per-step record of a trigger rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerStep {
    pub delta: bool,
    pub applied: Vec<f64>,
    pub last_trigger_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerEpisode {
    pub steps: Vec<TriggerStep>,
    pub stats: EpisodeStats,
}

/// One full-horizon episode of LQR under a trigger law. The trigger acts on
/// the (possibly noisy) measured state.
pub fn trigger_rollout(
    env: &mut EtcEnv,
    lqr: &LqrController,
    kind: TriggerKind,
    threshold: f64,
    angle_limit: f64,
    rng: &mut Rng,
) -> Result<TriggerEpisode> {
    let n = env.plant().state_dim();
    env.reset(rng);
    let y0 = env.observe(rng);
    let mut rule = TriggerRule::new(kind, threshold, &y0[..n])?;
    let mut steps = Vec::new();
    let mut r_ctrl = 0.0;
    let mut max_abs = env.state().x[0].abs();
    loop {
        let obs = env.observe(rng);
        let y = &obs[..n];
        let delta = rule.decide(y, &lqr.k, rng);
        let u = if delta { Some(lqr.action(y)) } else { None };
        let step = env.step(delta, u.as_deref(), rng)?;
        r_ctrl += step.r_ctrl;
        max_abs = max_abs.max(env.state().x[0].abs());
        steps.push(TriggerStep {
            delta,
            applied: step.applied,
            last_trigger_state: rule.last_trigger_state.clone(),
        });
        if step.truncated {
            break;
        }
    }
    let deltas: Vec<bool> = steps.iter().map(|s| s.delta).collect();
    Ok(TriggerEpisode {
        stats: EpisodeStats {
            r_ctrl,
            savings: communication_savings(&deltas),
            max_abs_angle: max_abs,
            stable: max_abs < angle_limit,
        },
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rule: TriggerKind,
    pub xi: f64,
    pub seed: u64,
    pub savings: f64,
    pub r_ctrl_abs: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rule: TriggerKind,
    pub xi: f64,
    pub savings_mean: f64,
    pub savings_std: f64,
    pub r_ctrl_abs_mean: f64,
    pub r_ctrl_abs_std: f64,
    pub all_stable: bool,
}

/// Runs `rollouts` episodes per threshold. Rollout `i` uses the same
/// initial state for every rule and threshold.
pub fn baseline_sweep(
    env: &EtcEnv,
    lqr: &LqrController,
    kind: TriggerKind,
    xis: &[f64],
    rollouts: usize,
    seed: u64,
    angle_limit: f64,
) -> Result<Vec<SweepRow>> {
    let streams = SeedStreams::new(seed);
    let mut rows = Vec::with_capacity(xis.len() * rollouts);
    for &xi in xis {
        for i in 0..rollouts {
            let mut env = env.clone();
            let mut rng = streams.child("rollout", i as u64).rng("episode");
            let ep = trigger_rollout(&mut env, lqr, kind, xi, angle_limit, &mut rng)?;
            rows.push(SweepRow {
                rule: kind,
                xi,
                seed: i as u64,
                savings: ep.stats.savings,
                r_ctrl_abs: ep.stats.r_ctrl.abs(),
                stable: ep.stats.stable,
            });
        }
    }
    Ok(rows)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups rows by `(rule, xi)` in first-seen order.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut keys: Vec<(TriggerKind, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(k, x)| k == r.rule && x == r.xi) {
            keys.push((r.rule, r.xi));
        }
    }
    keys.into_iter()
        .map(|(rule, xi)| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| r.rule == rule && r.xi == xi).collect();
            let (savings_mean, savings_std) = mean_std(&group.iter().map(|r| r.savings).collect::<Vec<_>>());
            let (r_ctrl_abs_mean, r_ctrl_abs_std) = mean_std(&group.iter().map(|r| r.r_ctrl_abs).collect::<Vec<_>>());
            SweepSummary {
                rule,
                xi,
                savings_mean,
                savings_std,
                r_ctrl_abs_mean,
                r_ctrl_abs_std,
                all_stable: group.iter().all(|r| r.stable),
            }
        })
        .collect()
}

/// Evaluates an always-communicating policy that skips each slot with
/// probability `skip_prob`. Skip draws come from `skip_rng` so the plant and
/// noise streams match a plain evaluation.
pub fn random_skip_eval(
    env: &EtcEnv,
    ps: &PolicySet,
    skip_prob: f64,
    cfg: &EvalConfig,
    env_rng: &mut Rng,
    skip_rng: &mut Rng,
) -> Result<EvalSummary> {
    if !(0.0..=1.0).contains(&skip_prob) {
        return Err(Error::InvalidParameter(format!(
            "skip probability {skip_prob} outside [0, 1]"
        )));
    }
    let mut env = env.clone();
    let mut episodes = Vec::with_capacity(cfg.episodes);
    for _ in 0..cfg.episodes {
        env.reset(env_rng);
        let mut deltas = Vec::new();
        let mut r_ctrl = 0.0;
        let mut max_abs = env.state().x[0].abs();
        loop {
            let obs = EtcObservation::from_vec(env.observe(env_rng));
            let nu: f64 = skip_rng.random();
            let step = if nu < skip_prob {
                deltas.push(false);
                env.step(false, None, env_rng)?
            } else {
                let d = ps.act(&obs, env_rng, cfg.deterministic)?;
                let transmit = d.transmit.ok_or(Error::MissingAction)?;
                deltas.push(true);
                env.step(true, Some(&transmit), env_rng)?
            };
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

/// A pendulum environment whose plant is the exact linear discretization.
pub fn linearized_pendulum_env(params: &PendulumParams, cfg: crate::envsim::EnvConfig) -> Result<EtcEnv> {
    let sys = linearize_pendulum(params);
    let cost = crate::envsim::QuadraticCost {
        state_weights: vec![1.0, 0.1],
        input_weights: vec![params.ctrl_weight],
    };
    EtcEnv::new(Plant::Linear { sys, cost }, vec![params.max_torque], cfg)
}
