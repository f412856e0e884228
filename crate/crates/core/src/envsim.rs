//! Discrete-time plant simulation with zero-order-hold actuation.
//!
//! Two plants are supported: the standard swing-up pendulum (semi-implicit
//! Euler, angle measured from the upright position) and arbitrary discrete
//! linear systems `x' = A x + B u`. The actuator keeps the last transmitted
//! command and re-applies it on every step without communication.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::seeds::Rng;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        PI
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub x: Vec<f64>,
}

impl PlantState {
    pub fn new(x: Vec<f64>) -> Self {
        Self { x }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub y: Vec<f64>,
    pub noise_w: Vec<f64>,
}

/// Identity measurement map with additive noise.
pub fn measure(state: &PlantState, noise: Option<&[f64]>) -> Result<Measurement> {
    let noise_w = match noise {
        Some(w) => {
            check_dim("measurement noise", state.dim(), w.len())?;
            w.to_vec()
        }
        None => vec![0.0; state.dim()],
    };
    let y = state.x.iter().zip(&noise_w).map(|(x, w)| x + w).collect();
    Ok(Measurement { y, noise_w })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actuator {
    held_action: Vec<f64>,
    action_limit: Vec<f64>,
}

impl Actuator {
    /// The held action starts at zero.
    pub fn new(action_limit: Vec<f64>) -> Result<Self> {
        if action_limit.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidParameter(
                "actuator limits must be positive and finite".into(),
            ));
        }
        Ok(Self {
            held_action: vec![0.0; action_limit.len()],
            action_limit,
        })
    }

    pub fn held_action(&self) -> &[f64] {
        &self.held_action
    }

    pub fn action_limit(&self) -> &[f64] {
        &self.action_limit
    }

    pub fn dim(&self) -> usize {
        self.action_limit.len()
    }

    /// Overwrites the held command, saturating each component to its limit.
    pub fn transmit(&mut self, action: &[f64]) -> Result<()> {
        check_dim("transmitted action", self.dim(), action.len())?;
        for ((h, &a), &lim) in self.held_action.iter_mut().zip(action).zip(&self.action_limit) {
            *h = a.clamp(-lim, lim);
        }
        Ok(())
    }

    pub fn set_held(&mut self, action: &[f64]) -> Result<()> {
        self.transmit(action)
    }

    pub fn clip(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(&self.action_limit)
            .map(|(&a, &lim)| a.clamp(-lim, lim))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    dt: f64,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidParameter("A must be square".into()));
        }
        check_dim("B rows", a.nrows(), b.nrows())?;
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter("dt must be positive".into()));
        }
        Ok(Self { a, b, dt })
    }

    pub fn from_rows(a: &[&[f64]], b: &[&[f64]], dt: f64) -> Result<Self> {
        let n = a.len();
        let m = b.first().map_or(0, |r| r.len());
        let am = DMatrix::from_fn(n, n, |i, j| a[i][j]);
        let bm = DMatrix::from_fn(b.len(), m, |i, j| b[i][j]);
        Self::new(am, bm, dt)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// `A x + B u`.
pub fn step_linear(sys: &LinearSystem, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    check_dim("linear step state", sys.state_dim(), x.len())?;
    check_dim("linear step input", sys.input_dim(), u.len())?;
    let next = &sys.a * DVector::from_column_slice(x) + &sys.b * DVector::from_column_slice(u);
    Ok(next.as_slice().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumParams {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    pub ctrl_weight: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_torque: 2.0,
            max_speed: 8.0,
            ctrl_weight: 0.1,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gravity", self.gravity),
            ("mass", self.mass),
            ("length", self.length),
            ("dt", self.dt),
            ("max_torque", self.max_torque),
            ("max_speed", self.max_speed),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("pendulum {name} must be positive")));
            }
        }
        if !self.ctrl_weight.is_finite() {
            return Err(Error::InvalidParameter("ctrl_weight must be finite".into()));
        }
        Ok(())
    }

    /// Angular acceleration coefficients `(3g/2l, 3/(m l^2))`.
    pub fn coefficients(&self) -> (f64, f64) {
        (
            3.0 * self.gravity / (2.0 * self.length),
            3.0 / (self.mass * self.length * self.length),
        )
    }
}

/// Exact zero-order-hold discretization of the pendulum linearized about
/// the upright equilibrium.
pub fn linearize_pendulum(params: &PendulumParams) -> LinearSystem {
    let (ka, kb) = params.coefficients();
    let mut aug = DMatrix::<f64>::zeros(3, 3);
    aug[(0, 1)] = 1.0;
    aug[(1, 0)] = ka;
    aug[(1, 2)] = kb;
    let e = (aug * params.dt).exp();
    let a = e.view((0, 0), (2, 2)).into_owned();
    let b = e.view((0, 2), (2, 1)).into_owned();
    LinearSystem { a, b, dt: params.dt }
}

/// Pendulum control reward `-(theta^2 + 0.1 theta_dot^2 + w u^2)`.
pub fn control_reward(state: &PlantState, u: &[f64], params: &PendulumParams) -> f64 {
    let th = wrap_angle(state.x[0]);
    let thdot = state.x[1];
    let u2: f64 = u.iter().map(|v| v * v).sum();
    -(th * th + 0.1 * thdot * thdot + params.ctrl_weight * u2)
}

/// Quadratic stage cost for linear plants: `-(sum q_i x_i^2 + sum r_j u_j^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    pub state_weights: Vec<f64>,
    pub input_weights: Vec<f64>,
}

impl QuadraticCost {
    pub fn reward(&self, x: &[f64], u: &[f64]) -> f64 {
        let sx: f64 = x.iter().zip(&self.state_weights).map(|(v, w)| w * v * v).sum();
        let su: f64 = u.iter().zip(&self.input_weights).map(|(v, w)| w * v * v).sum();
        -(sx + su)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Plant {
    Pendulum(PendulumParams),
    Linear { sys: LinearSystem, cost: QuadraticCost },
}

impl Plant {
    pub fn state_dim(&self) -> usize {
        match self {
            Plant::Pendulum(_) => 2,
            Plant::Linear { sys, .. } => sys.state_dim(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Plant::Pendulum(_) => 1,
            Plant::Linear { sys, .. } => sys.input_dim(),
        }
    }

    /// Plant dynamics for one sampling period; `u` is the applied action.
    pub fn dynamics(&self, state: &PlantState, u: &[f64]) -> Result<PlantState> {
        check_dim("plant state", self.state_dim(), state.dim())?;
        check_dim("plant input", self.action_dim(), u.len())?;
        match self {
            Plant::Pendulum(p) => {
                let (ka, kb) = p.coefficients();
                let th = state.x[0];
                let torque = u[0].clamp(-p.max_torque, p.max_torque);
                // Velocity first, then position with the new velocity.
                let thdot = (state.x[1] + (ka * th.sin() + kb * torque) * p.dt).clamp(-p.max_speed, p.max_speed);
                let th = wrap_angle(th + thdot * p.dt);
                Ok(PlantState::new(vec![th, thdot]))
            }
            Plant::Linear { sys, .. } => Ok(PlantState::new(step_linear(sys, &state.x, u)?)),
        }
    }

    pub fn control_reward(&self, state: &PlantState, u: &[f64]) -> f64 {
        match self {
            Plant::Pendulum(p) => control_reward(state, u, p),
            Plant::Linear { cost, .. } => cost.reward(&state.x, u),
        }
    }

    /// Post-processing applied to a state after noise injection.
    fn normalize(&self, state: &mut PlantState) {
        if let Plant::Pendulum(_) = self {
            state.x[0] = wrap_angle(state.x[0]);
        }
    }
}

/// One ZOH step. With `delta` set the actuator first latches `new_action`;
/// the held command is then applied to the plant and returned.
pub fn step_zoh(
    plant: &Plant,
    state: &PlantState,
    actuator: &mut Actuator,
    delta: bool,
    new_action: Option<&[f64]>,
    noise: Option<&[f64]>,
) -> Result<(PlantState, Vec<f64>)> {
    check_dim("actuator", plant.action_dim(), actuator.dim())?;
    if delta {
        let a = new_action.ok_or(Error::MissingAction)?;
        actuator.transmit(a)?;
    }
    let applied = actuator.held_action().to_vec();
    let mut next = plant.dynamics(state, &applied)?;
    if let Some(v) = noise {
        check_dim("process noise", next.dim(), v.len())?;
        for (x, n) in next.x.iter_mut().zip(v) {
            *x += n;
        }
        plant.normalize(&mut next);
    }
    Ok((next, applied))
}

/// Axis-aligned box of initial states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialStateDist {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl InitialStateDist {
    pub fn sample(&self, rng: &mut Rng) -> PlantState {
        PlantState::new(
            self.low
                .iter()
                .zip(&self.high)
                .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub horizon: usize,
    pub init_low: Vec<f64>,
    pub init_high: Vec<f64>,
    pub process_noise_std: f64,
    pub measurement_noise_std: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 200,
            init_low: vec![-0.2, -0.2],
            init_high: vec![0.2, 0.2],
            process_noise_std: 0.0,
            measurement_noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub applied: Vec<f64>,
    pub r_ctrl: f64,
    /// Horizon reached; the caller resets.
    pub truncated: bool,
}

/// A plant wrapped with an actuator, an episode clock and an initial-state
/// distribution. Observations are `(y, u_ac[k-1])`.
#[derive(Debug, Clone)]
pub struct EtcEnv {
    plant: Plant,
    state: PlantState,
    actuator: Actuator,
    t: usize,
    cfg: EnvConfig,
}

impl EtcEnv {
    pub fn new(plant: Plant, action_limit: Vec<f64>, cfg: EnvConfig) -> Result<Self> {
        check_dim("initial-state low", plant.state_dim(), cfg.init_low.len())?;
        check_dim("initial-state high", plant.state_dim(), cfg.init_high.len())?;
        if cfg.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be positive".into()));
        }
        let actuator = Actuator::new(action_limit)?;
        check_dim("actuator", plant.action_dim(), actuator.dim())?;
        let state = PlantState::new(vec![0.0; plant.state_dim()]);
        Ok(Self {
            plant,
            state,
            actuator,
            t: 0,
            cfg,
        })
    }

    pub fn pendulum(params: PendulumParams, cfg: EnvConfig) -> Result<Self> {
        params.validate()?;
        let limit = params.max_torque;
        Self::new(Plant::Pendulum(params), vec![limit], cfg)
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn actuator(&self) -> &Actuator {
        &self.actuator
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn obs_dim(&self) -> usize {
        self.plant.state_dim() + self.plant.action_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.plant.action_dim()
    }

    pub fn reset(&mut self, rng: &mut Rng) {
        let dist = InitialStateDist {
            low: self.cfg.init_low.clone(),
            high: self.cfg.init_high.clone(),
        };
        self.state = dist.sample(rng);
        self.plant.normalize(&mut self.state);
        self.actuator
            .set_held(&vec![0.0; self.actuator.dim()])
            .expect("actuator dimension is fixed");
        self.t = 0;
    }

    /// Starts an episode from an explicit state and held action.
    pub fn reset_to(&mut self, state: PlantState, held: &[f64]) -> Result<()> {
        check_dim("reset state", self.plant.state_dim(), state.dim())?;
        self.state = state;
        self.actuator.set_held(held)?;
        self.t = 0;
        Ok(())
    }

    pub fn observe(&self, rng: &mut Rng) -> Vec<f64> {
        let noise = gaussian_vec(self.cfg.measurement_noise_std, self.state.dim(), rng);
        let m = measure(&self.state, noise.as_deref()).expect("noise matches state dimension");
        let mut obs = m.y;
        obs.extend_from_slice(self.actuator.held_action());
        obs
    }

    pub fn step(&mut self, delta: bool, action: Option<&[f64]>, rng: &mut Rng) -> Result<EnvStep> {
        let noise = gaussian_vec(self.cfg.process_noise_std, self.state.dim(), rng);
        let (next, applied) = step_zoh(
            &self.plant,
            &self.state,
            &mut self.actuator,
            delta,
            action,
            noise.as_deref(),
        )?;
        if next.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("plant state {:?}", next.x)));
        }
        let r_ctrl = self.plant.control_reward(&self.state, &applied);
        self.state = next;
        self.t += 1;
        Ok(EnvStep {
            applied,
            r_ctrl,
            truncated: self.t >= self.cfg.horizon,
        })
    }
}

fn gaussian_vec(std: f64, n: usize, rng: &mut Rng) -> Option<Vec<f64>> {
    if std > 0.0 {
        let dist = Normal::new(0.0, std).expect("positive std");
        Some((0..n).map(|_| dist.sample(rng)).collect())
    } else {
        None
    }
}
