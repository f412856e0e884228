//! One-step invariance checks for deterministic ETC policies under linear
//! dynamics.
//!
//! The policy and plant fold into a [`PiecewiseLinearNet`]; unsafe inputs
//! are searched for by branch-and-bound ([`bab`]) on top of a small simplex
//! solver ([`lp`]).

pub mod bab;
pub mod lp;
pub mod pwl;

use serde::{Deserialize, Serialize};

pub use bab::{
    maximize_violation, Bound, HalfSpaceQuery, HalfSpaceVerdict, OutputConstraint, SearchOptions, SearchStats,
    ACCEPT_TOL, VIOLATION_TOL,
};
pub use pwl::{compose, AffineMap, Evaluation, PiecewiseLinearNet};

use crate::envsim::LinearSystem;
use crate::error::{check_dim, Error, Result};
use crate::policy::PolicySet;

/// Closed axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("box upper bound", lower.len(), upper.len())?;
        if lower.iter().chain(&upper).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("box bounds must be finite".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::InvalidParameter("box lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    /// `[-r, r]` in every dimension.
    pub fn symmetric(radius: &[f64]) -> Result<Self> {
        Self::new(radius.iter().map(|r| -r).collect(), radius.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| l <= v && v <= u)
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| v.clamp(*l, *u))
            .collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    /// Cartesian product `self x other`.
    pub fn product(&self, other: &BoxRegion) -> BoxRegion {
        BoxRegion {
            lower: self.lower.iter().chain(&other.lower).copied().collect(),
            upper: self.upper.iter().chain(&other.upper).copied().collect(),
        }
    }

    /// Maps a point of the unit cube affinely into the box.
    pub fn from_unit(&self, t: &[f64]) -> Vec<f64> {
        t.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, u))| l + t * (u - l))
            .collect()
    }

    /// Input box `M x [-u_lim, u_lim]` over `(x, u_prev)`.
    pub fn augmented(&self, action_limit: &[f64]) -> Result<BoxRegion> {
        Ok(self.product(&BoxRegion::symmetric(action_limit)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Communicate,
    Hold,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Communicate => "communicate",
            Branch::Hold => "hold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Upper,
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierConfig {
    /// The hold branch requires `Z >= margin`; `Z` in `[0, margin]` is
    /// checked under the communicate branch instead.
    pub margin: f64,
    /// Branch-and-bound nodes per half-space.
    pub node_budget: u64,
    /// Keep searching the remaining half-spaces after the first witness.
    pub collect_all: bool,
    /// Bisect the input box while more ReLUs than this are undecided;
    /// `usize::MAX` gives pure ReLU splitting.
    pub input_split_above: usize,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            margin: 1e-9,
            node_budget: 200_000,
            collect_all: true,
            input_split_above: 8,
        }
    }
}

/// "From some input in `input`, can the `branch` next state leave `target`?"
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationQuery {
    pub input: BoxRegion,
    pub branch: Branch,
    pub target: BoxRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    /// `(x, u_prev)`.
    pub input: Vec<f64>,
    pub branch: Branch,
    pub dim: usize,
    pub side: Side,
    pub z: f64,
    pub next_state: Vec<f64>,
    pub violation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryStatus {
    Sat,
    Unsat,
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationOutcome {
    pub status: QueryStatus,
    /// In half-space order; only the first unless `collect_all`.
    pub witnesses: Vec<Witness>,
    pub stats: SearchStats,
}

impl VerificationOutcome {
    pub fn witness(&self) -> Option<&Witness> {
        self.witnesses.first()
    }
}

/// The `2n` half-spaces outside `target`, upper before lower per dimension.
fn half_spaces(net: &PiecewiseLinearNet, q: &VerificationQuery, margin: f64) -> Vec<(usize, Side, HalfSpaceQuery)> {
    let n = net.state_dim();
    let outs = net.output_dim();
    let mut z = vec![0.0; outs];
    z[0] = 1.0;
    let (first, z_constraint) = match q.branch {
        Branch::Communicate => (
            1,
            OutputConstraint {
                coeffs: z,
                bound: Bound::Le,
                rhs: margin,
            },
        ),
        Branch::Hold => (
            1 + n,
            OutputConstraint {
                coeffs: z,
                bound: Bound::Ge,
                rhs: margin,
            },
        ),
    };
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        for side in [Side::Upper, Side::Lower] {
            let mut objective = vec![0.0; outs];
            let offset = match side {
                Side::Upper => {
                    objective[first + i] = 1.0;
                    q.target.upper[i]
                }
                Side::Lower => {
                    objective[first + i] = -1.0;
                    -q.target.lower[i]
                }
            };
            out.push((
                i,
                side,
                HalfSpaceQuery {
                    input: q.input.clone(),
                    constraints: vec![z_constraint.clone()],
                    objective,
                    offset,
                },
            ));
        }
    }
    out
}

pub fn solve_query(
    net: &PiecewiseLinearNet,
    q: &VerificationQuery,
    cfg: &VerifierConfig,
) -> Result<VerificationOutcome> {
    check_dim("target box", net.state_dim(), q.target.dim())?;
    if !(cfg.margin.is_finite() && cfg.margin >= 0.0) {
        return Err(Error::InvalidParameter("margin must be non-negative".into()));
    }
    let mut stats = SearchStats::default();
    let mut witnesses = Vec::new();
    let mut unknown = false;
    for (dim, side, hq) in half_spaces(net, q, cfg.margin) {
        let mut sub = SearchStats::default();
        let opts = SearchOptions {
            node_budget: cfg.node_budget,
            input_split_above: cfg.input_split_above,
        };
        let verdict = maximize_violation(net, &hq, &opts, &mut sub)?;
        stats.add(&sub);
        match verdict {
            HalfSpaceVerdict::Sat { input, eval, violation } => {
                let next_state = match q.branch {
                    Branch::Communicate => eval.communicate_next().to_vec(),
                    Branch::Hold => eval.hold_next().to_vec(),
                };
                witnesses.push(Witness {
                    input,
                    branch: q.branch,
                    dim,
                    side,
                    z: eval.z(),
                    next_state,
                    violation,
                });
                if !cfg.collect_all {
                    break;
                }
            }
            HalfSpaceVerdict::Unsat => {}
            HalfSpaceVerdict::Unknown => unknown = true,
        }
    }
    let status = if !witnesses.is_empty() {
        QueryStatus::Sat
    } else if unknown {
        QueryStatus::Unknown
    } else {
        QueryStatus::Unsat
    };
    Ok(VerificationOutcome {
        status,
        witnesses,
        stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StabilityStatus {
    /// `M` is positively invariant under the deterministic policy.
    Certified,
    Unstable,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub status: StabilityStatus,
    pub witnesses: Vec<Witness>,
    pub communicate: QueryStatus,
    pub hold: QueryStatus,
    pub stats: SearchStats,
}

/// Runs the communicate and hold queries on an already composed network.
pub fn check_stability_composed(
    net: &PiecewiseLinearNet,
    region: &BoxRegion,
    action_limit: &[f64],
    cfg: &VerifierConfig,
) -> Result<StabilityReport> {
    let input = region.augmented(action_limit)?;
    let mut stats = SearchStats::default();
    let mut witnesses = Vec::new();
    let mut statuses = [QueryStatus::Unsat; 2];
    for (slot, branch) in [Branch::Communicate, Branch::Hold].into_iter().enumerate() {
        let q = VerificationQuery {
            input: input.clone(),
            branch,
            target: region.clone(),
        };
        let out = solve_query(net, &q, cfg)?;
        stats.add(&out.stats);
        statuses[slot] = out.status;
        witnesses.extend(out.witnesses);
    }
    let status = if !witnesses.is_empty() {
        StabilityStatus::Unstable
    } else if statuses.contains(&QueryStatus::Unknown) {
        StabilityStatus::Unknown
    } else {
        StabilityStatus::Certified
    };
    Ok(StabilityReport {
        status,
        witnesses,
        communicate: statuses[0],
        hold: statuses[1],
        stats,
    })
}

pub fn check_stability_et(
    ps: &PolicySet,
    sys: &LinearSystem,
    region: &BoxRegion,
    action_limit: &[f64],
    cfg: &VerifierConfig,
) -> Result<StabilityReport> {
    let net = compose(ps, sys, action_limit)?;
    check_stability_composed(&net, region, action_limit, cfg)
}

/// Smallest-magnitude input in `[-u_lim, u_lim]` keeping `A x + B u` in
/// `region`, if one exists. Uses the L1 norm when there are several inputs.
pub fn find_valid_input_et(
    input: &[f64],
    sys: &LinearSystem,
    region: &BoxRegion,
    action_limit: &[f64],
) -> Result<Option<Vec<f64>>> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    check_dim("augmented state", n + m, input.len())?;
    check_dim("region", n, region.dim())?;
    check_dim("action limit", m, action_limit.len())?;
    let x = &input[..n];
    let ax: Vec<f64> = (0..n).map(|i| (0..n).map(|j| sys.a()[(i, j)] * x[j]).sum()).collect();
    if m == 1 {
        let (mut lo, mut hi) = (-action_limit[0], action_limit[0]);
        for i in 0..n {
            let b = sys.b()[(i, 0)];
            let (a, c) = (region.lower[i] - ax[i], region.upper[i] - ax[i]);
            if b > 0.0 {
                lo = lo.max(a / b);
                hi = hi.min(c / b);
            } else if b < 0.0 {
                lo = lo.max(c / b);
                hi = hi.min(a / b);
            } else if a > 0.0 || c < 0.0 {
                return Ok(None);
            }
        }
        if lo > hi + 1e-12 {
            return Ok(None);
        }
        let u = if lo > hi { 0.5 * (lo + hi) } else { 0.0f64.clamp(lo, hi) };
        return Ok(Some(vec![u]));
    }
    let mut prog = lp::LinearProgram::new();
    let u: Vec<usize> = (0..m)
        .map(|a| prog.add_var(0.0, -action_limit[a], action_limit[a]))
        .collect();
    let t: Vec<usize> = (0..m).map(|a| prog.add_var(-1.0, 0.0, action_limit[a])).collect();
    for a in 0..m {
        prog.add_constraint(vec![(t[a], 1.0), (u[a], -1.0)], lp::Sense::Ge, 0.0);
        prog.add_constraint(vec![(t[a], 1.0), (u[a], 1.0)], lp::Sense::Ge, 0.0);
    }
    for i in 0..n {
        let row: Vec<(usize, f64)> = (0..m).map(|a| (u[a], sys.b()[(i, a)])).collect();
        prog.add_constraint(row.clone(), lp::Sense::Ge, region.lower[i] - ax[i]);
        prog.add_constraint(row, lp::Sense::Le, region.upper[i] - ax[i]);
    }
    match prog.solve() {
        lp::LpStatus::Optimal { x, .. } => Ok(Some(
            (0..m)
                .map(|a| x[u[a]].clamp(-action_limit[a], action_limit[a]))
                .collect(),
        )),
        lp::LpStatus::Infeasible => Ok(None),
        _ => Err(Error::Verification("admissible-input LP did not terminate".into())),
    }
}

/// True when the deterministic one-step map leaves `region` from `input`.
pub fn check_point_et(input: &[f64], net: &PiecewiseLinearNet, region: &BoxRegion) -> Result<bool> {
    let e = net.evaluate(input)?;
    let next = if e.z() <= 0.0 {
        e.communicate_next()
    } else {
        e.hold_next()
    };
    Ok(!region.contains(next))
}

/// True when the policy communicates at `input` although holding would
/// keep the state in `region`.
pub fn comm_saving_possible(input: &[f64], net: &PiecewiseLinearNet, region: &BoxRegion) -> Result<bool> {
    let e = net.evaluate(input)?;
    Ok(e.z() <= 0.0 && region.contains(e.hold_next()))
}

#[cfg(test)]
mod tests;
