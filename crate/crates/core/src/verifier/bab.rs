//! Branch-and-bound over ReLU phases.
//!
//! Bounds come from forward symbolic intervals (affine lower/upper functions
//! of the inputs) intersected with plain interval arithmetic. Each node
//! solves the triangle relaxation as an LP; a candidate is only reported
//! after exact re-evaluation confirms it.

use serde::{Deserialize, Serialize};

use super::lp::{LinearProgram, LpStatus, Sense};
use super::pwl::{Evaluation, PiecewiseLinearNet};
use super::BoxRegion;
use crate::error::{check_dim, Error, Result};

/// A candidate must exceed the target bound by more than this.
pub const VIOLATION_TOL: f64 = 1e-9;
/// Slack allowed on side constraints when re-checking a candidate.
pub const ACCEPT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Le,
    Ge,
}

/// `coeffs . outputs (<= | >=) rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputConstraint {
    pub coeffs: Vec<f64>,
    pub bound: Bound,
    pub rhs: f64,
}

impl OutputConstraint {
    pub fn holds(&self, outputs: &[f64], slack: f64) -> bool {
        let v = dot(&self.coeffs, outputs);
        match self.bound {
            Bound::Le => v <= self.rhs + slack,
            Bound::Ge => v >= self.rhs - slack,
        }
    }
}

/// Is there an input in `input` meeting every constraint with
/// `objective . outputs - offset > VIOLATION_TOL`?
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpaceQuery {
    pub input: BoxRegion,
    pub constraints: Vec<OutputConstraint>,
    pub objective: Vec<f64>,
    pub offset: f64,
}

impl HalfSpaceQuery {
    pub fn violation(&self, outputs: &[f64]) -> f64 {
        dot(&self.objective, outputs) - self.offset
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    pub nodes: u64,
    pub lp_calls: u64,
    pub bound_prunes: u64,
    pub lp_prunes: u64,
    pub inconclusive_leaves: u64,
    /// Undecided ReLUs before any split, maximum over sub-queries.
    pub root_unstable: u64,
}

impl SearchStats {
    pub fn add(&mut self, other: &SearchStats) {
        self.nodes += other.nodes;
        self.lp_calls += other.lp_calls;
        self.bound_prunes += other.bound_prunes;
        self.lp_prunes += other.lp_prunes;
        self.inconclusive_leaves += other.inconclusive_leaves;
        self.root_unstable = self.root_unstable.max(other.root_unstable);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HalfSpaceVerdict {
    Sat {
        input: Vec<f64>,
        eval: Evaluation,
        violation: f64,
    },
    Unsat,
    /// Node budget ran out or a fully fixed leaf disagreed with exact
    /// evaluation.
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Free,
    Active,
    Inactive,
}

/// Affine function of the inputs; last entry is the constant.
type Linear = Vec<f64>;

struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
    post_lo: Vec<f64>,
    post_hi: Vec<f64>,
    post_l: Vec<Linear>,
    post_u: Vec<Linear>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lin_min(f: &Linear, b: &BoxRegion) -> f64 {
    let d = b.dim();
    f[d] + (0..d)
        .map(|i| {
            if f[i] >= 0.0 {
                f[i] * b.lower[i]
            } else {
                f[i] * b.upper[i]
            }
        })
        .sum::<f64>()
}

fn lin_max(f: &Linear, b: &BoxRegion) -> f64 {
    let d = b.dim();
    f[d] + (0..d)
        .map(|i| {
            if f[i] >= 0.0 {
                f[i] * b.upper[i]
            } else {
                f[i] * b.lower[i]
            }
        })
        .sum::<f64>()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Lower and upper bounds of `row . [inputs, post] + bias`, combining
/// symbolic and plain interval bounds.
fn row_bounds(row: &[f64], bias: f64, input: &BoxRegion, b: &Bounds) -> (f64, f64, Linear, Linear) {
    let d = input.dim();
    let mut l = vec![0.0; d + 1];
    let mut u = vec![0.0; d + 1];
    l[d] = bias;
    u[d] = bias;
    let (mut ilo, mut ihi) = (bias, bias);
    for i in 0..d {
        l[i] = row[i];
        u[i] = row[i];
        let (a, c) = (row[i] * input.lower[i], row[i] * input.upper[i]);
        ilo += a.min(c);
        ihi += a.max(c);
    }
    for (k, &w) in row[d..].iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        if w > 0.0 {
            axpy(&mut l, w, &b.post_l[k]);
            axpy(&mut u, w, &b.post_u[k]);
            ilo += w * b.post_lo[k];
            ihi += w * b.post_hi[k];
        } else {
            axpy(&mut l, w, &b.post_u[k]);
            axpy(&mut u, w, &b.post_l[k]);
            ilo += w * b.post_hi[k];
            ihi += w * b.post_lo[k];
        }
    }
    let lo = lin_min(&l, input).max(ilo);
    let hi = lin_max(&u, input).min(ihi);
    (lo, hi, l, u)
}

/// Propagates bounds under the given phase fixes; `None` when a fix is
/// contradicted by the bounds.
fn propagate(net: &PiecewiseLinearNet, input: &BoxRegion, phases: &[Phase]) -> Option<Bounds> {
    let d = input.dim();
    let total = net.num_relus();
    let mut b = Bounds {
        lo: Vec::with_capacity(total),
        hi: Vec::with_capacity(total),
        post_lo: Vec::with_capacity(total),
        post_hi: Vec::with_capacity(total),
        post_l: Vec::with_capacity(total),
        post_u: Vec::with_capacity(total),
    };
    let zero = vec![0.0; d + 1];
    for layer in net.layers() {
        for r in 0..layer.rows {
            let k = b.lo.len();
            let (lo, hi, l, u) = row_bounds(layer.row(r), layer.bias[r], input, &b);
            let phase = match phases[k] {
                Phase::Free if lo >= 0.0 => Phase::Active,
                Phase::Free if hi <= 0.0 => Phase::Inactive,
                p => p,
            };
            match phase {
                Phase::Active => {
                    if hi < 0.0 {
                        return None;
                    }
                    b.post_lo.push(lo.max(0.0));
                    b.post_hi.push(hi);
                    b.post_l.push(l);
                    b.post_u.push(u);
                }
                Phase::Inactive => {
                    if lo > 0.0 {
                        return None;
                    }
                    b.post_lo.push(0.0);
                    b.post_hi.push(0.0);
                    b.post_l.push(zero.clone());
                    b.post_u.push(zero.clone());
                }
                Phase::Free => {
                    let s = hi / (hi - lo);
                    let mut up = u;
                    up[d] -= lo;
                    up.iter_mut().for_each(|v| *v *= s);
                    b.post_lo.push(0.0);
                    b.post_hi.push(hi);
                    b.post_l.push(if hi > -lo { l } else { zero.clone() });
                    b.post_u.push(up);
                }
            }
            b.lo.push(lo);
            b.hi.push(hi);
        }
    }
    Some(b)
}

/// Range of a linear form over the outputs.
fn output_form_bounds(net: &PiecewiseLinearNet, coeffs: &[f64], input: &BoxRegion, b: &Bounds) -> (f64, f64) {
    let out = net.output();
    let mut row = vec![0.0; out.cols];
    let mut bias = 0.0;
    for (o, &c) in coeffs.iter().enumerate() {
        if c != 0.0 {
            axpy(&mut row, c, out.row(o));
            bias += c * out.bias[o];
        }
    }
    let (lo, hi, _, _) = row_bounds(&row, bias, input, b);
    (lo, hi)
}

fn is_unstable(phase: Phase, lo: f64, hi: f64) -> bool {
    phase == Phase::Free && lo < 0.0 && hi > 0.0
}

/// Triangle relaxation; returns the maximizing input, or `None` when the
/// relaxation is infeasible or cannot reach the tolerance.
fn relaxation(
    net: &PiecewiseLinearNet,
    q: &HalfSpaceQuery,
    region: &BoxRegion,
    phases: &[Phase],
    b: &Bounds,
) -> std::result::Result<Option<Vec<f64>>, ()> {
    let d = region.dim();
    let mut lp = LinearProgram::new();
    for i in 0..d {
        lp.add_var(0.0, region.lower[i], region.upper[i]);
    }
    // Expressions are dense over the LP variables plus a constant.
    let mut exprs: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut e = vec![0.0; d + 1];
            e[i] = 1.0;
            e
        })
        .collect();
    let mut constraints: Vec<(Vec<f64>, Sense)> = Vec::new();
    let mut k = 0;
    for layer in net.layers() {
        for r in 0..layer.rows {
            let width = lp.num_vars() + 1;
            let mut pre = vec![0.0; width];
            for (c, &w) in layer.row(r).iter().enumerate() {
                if w != 0.0 {
                    let e = &exprs[c];
                    for (j, v) in e[..e.len() - 1].iter().enumerate() {
                        pre[j] += w * v;
                    }
                    pre[width - 1] += w * e[e.len() - 1];
                }
            }
            pre[width - 1] += layer.bias[r];
            let (lo, hi) = (b.lo[k], b.hi[k]);
            let phase = phases[k];
            let post = if is_unstable(phase, lo, hi) {
                let h = lp.add_var(0.0, 0.0, hi);
                let mut post = vec![0.0; h + 2];
                post[h] = 1.0;
                let mut pre_ext = pre.clone();
                let c = pre_ext.pop().unwrap_or(0.0);
                pre_ext.resize(h + 1, 0.0);
                pre_ext.push(c);
                // h - pre >= 0
                let mut g = pre_ext.iter().map(|v| -v).collect::<Vec<_>>();
                g[h] += 1.0;
                constraints.push((g, Sense::Ge));
                // s (pre - lo) - h >= 0
                let s = hi / (hi - lo);
                let mut t: Vec<f64> = pre_ext.iter().map(|v| s * v).collect();
                t[h + 1] -= s * lo;
                t[h] -= 1.0;
                constraints.push((t, Sense::Ge));
                post
            } else if phase == Phase::Inactive || (phase == Phase::Free && hi <= 0.0) {
                if phase == Phase::Inactive && hi > 0.0 {
                    // pre <= 0
                    constraints.push((pre.iter().map(|v| -v).collect(), Sense::Ge));
                }
                vec![0.0; width]
            } else {
                if phase == Phase::Active && lo < 0.0 {
                    constraints.push((pre.clone(), Sense::Ge));
                }
                pre
            };
            exprs.push(post);
            k += 1;
        }
    }
    let nv = lp.num_vars();
    let widen = |e: &[f64]| -> Vec<f64> {
        let mut v = e[..e.len() - 1].to_vec();
        v.resize(nv, 0.0);
        v.push(e[e.len() - 1]);
        v
    };
    let out = net.output();
    let output_expr = |coeffs: &[f64]| -> Vec<f64> {
        let mut acc = vec![0.0; nv + 1];
        for (o, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (col, &w) in out.row(o).iter().enumerate() {
                if w != 0.0 {
                    axpy(&mut acc, c * w, &widen(&exprs[col]));
                }
            }
            acc[nv] += c * out.bias[o];
        }
        acc
    };
    // Every stored constraint reads `expr >= 0`.
    for (e, sense) in constraints {
        let e = widen(&e);
        let coeffs = (0..nv).filter(|&j| e[j] != 0.0).map(|j| (j, e[j])).collect();
        lp.add_constraint(coeffs, sense, -e[nv]);
    }
    for c in &q.constraints {
        let e = output_expr(&c.coeffs);
        let coeffs = (0..nv).filter(|&j| e[j] != 0.0).map(|j| (j, e[j])).collect();
        let sense = match c.bound {
            Bound::Le => Sense::Le,
            Bound::Ge => Sense::Ge,
        };
        lp.add_constraint(coeffs, sense, c.rhs - e[nv]);
    }
    let obj = output_expr(&q.objective);
    lp.objective = obj[..nv].to_vec();
    match lp.solve() {
        LpStatus::Optimal { value, x } => {
            if value + obj[nv] - q.offset <= VIOLATION_TOL {
                Ok(None)
            } else {
                Ok(Some(x[..d].to_vec()))
            }
        }
        LpStatus::Infeasible => Ok(None),
        LpStatus::Unbounded | LpStatus::Stalled => Err(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchOptions {
    pub node_budget: u64,
    /// Bisect the input box instead of splitting a ReLU while more than
    /// this many ReLUs are undecided.
    pub input_split_above: usize,
}

struct Node {
    phases: Vec<Phase>,
    region: BoxRegion,
}

/// Complete search for a violating input, bounded by the node budget.
pub fn maximize_violation(
    net: &PiecewiseLinearNet,
    q: &HalfSpaceQuery,
    opts: &SearchOptions,
    stats: &mut SearchStats,
) -> Result<HalfSpaceVerdict> {
    check_dim("query input box", net.input_dim(), q.input.dim())?;
    check_dim("objective", net.output_dim(), q.objective.len())?;
    for c in &q.constraints {
        check_dim("output constraint", net.output_dim(), c.coeffs.len())?;
    }
    let accept = |x: &[f64]| -> Result<Option<HalfSpaceVerdict>> {
        let x = q.input.clamp(x);
        let eval = net.evaluate(&x)?;
        let v = q.violation(&eval.outputs);
        if v > VIOLATION_TOL && q.constraints.iter().all(|c| c.holds(&eval.outputs, ACCEPT_TOL)) {
            Ok(Some(HalfSpaceVerdict::Sat {
                input: x,
                eval,
                violation: v,
            }))
        } else {
            Ok(None)
        }
    };
    // Cheap falsification at the corners and the center.
    let d = q.input.dim();
    if d <= 10 {
        for mask in 0u32..(1 << d) {
            let corner: Vec<f64> = (0..d)
                .map(|i| {
                    if mask & (1 << i) != 0 {
                        q.input.upper[i]
                    } else {
                        q.input.lower[i]
                    }
                })
                .collect();
            if let Some(sat) = accept(&corner)? {
                return Ok(sat);
            }
        }
    }
    if let Some(sat) = accept(&q.input.center())? {
        return Ok(sat);
    }
    let widths: Vec<f64> = q.input.lower.iter().zip(&q.input.upper).map(|(l, u)| u - l).collect();
    let mut stack = vec![Node {
        phases: vec![Phase::Free; net.num_relus()],
        region: q.input.clone(),
    }];
    let mut inconclusive = false;
    while let Some(Node { phases, region }) = stack.pop() {
        if stats.nodes >= opts.node_budget {
            return Ok(HalfSpaceVerdict::Unknown);
        }
        stats.nodes += 1;
        let Some(b) = propagate(net, &region, &phases) else {
            stats.bound_prunes += 1;
            continue;
        };
        let undecided: Vec<usize> = (0..phases.len())
            .filter(|&k| is_unstable(phases[k], b.lo[k], b.hi[k]))
            .collect();
        if stats.nodes == 1 {
            stats.root_unstable = stats.root_unstable.max(undecided.len() as u64);
        }
        let (_, obj_hi) = output_form_bounds(net, &q.objective, &region, &b);
        let side_infeasible = q.constraints.iter().any(|c| {
            let (lo, hi) = output_form_bounds(net, &c.coeffs, &region, &b);
            match c.bound {
                Bound::Le => lo > c.rhs + ACCEPT_TOL,
                Bound::Ge => hi < c.rhs - ACCEPT_TOL,
            }
        });
        if obj_hi - q.offset <= VIOLATION_TOL || side_infeasible {
            stats.bound_prunes += 1;
            continue;
        }
        stats.lp_calls += 1;
        let candidate = match relaxation(net, q, &region, &phases, &b) {
            Ok(Some(x)) => region.clamp(&x),
            Ok(None) => {
                stats.lp_prunes += 1;
                continue;
            }
            Err(()) => {
                return Err(Error::Verification("relaxation LP did not terminate".into()));
            }
        };
        if let Some(sat) = accept(&candidate)? {
            return Ok(sat);
        }
        if undecided.len() > opts.input_split_above {
            let dim = (0..d).filter(|&i| widths[i] > 0.0).max_by(|&i, &j| {
                let wi = (region.upper[i] - region.lower[i]) / widths[i];
                let wj = (region.upper[j] - region.lower[j]) / widths[j];
                wi.partial_cmp(&wj).unwrap_or(std::cmp::Ordering::Equal).then(j.cmp(&i))
            });
            if let Some(i) = dim {
                let mid = 0.5 * (region.lower[i] + region.upper[i]);
                if mid > region.lower[i] && mid < region.upper[i] {
                    let mut low = region.clone();
                    low.upper[i] = mid;
                    let mut high = region;
                    high.lower[i] = mid;
                    let (first, second) = if candidate[i] >= mid { (high, low) } else { (low, high) };
                    stack.push(Node {
                        phases: phases.clone(),
                        region: second,
                    });
                    stack.push(Node { phases, region: first });
                    continue;
                }
            }
        }
        let split = undecided.iter().copied().max_by(|&i, &j| {
            (b.hi[i] - b.lo[i])
                .partial_cmp(&(b.hi[j] - b.lo[j]))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(j.cmp(&i))
        });
        let Some(k) = split else {
            stats.inconclusive_leaves += 1;
            inconclusive = true;
            continue;
        };
        let first_active = net.evaluate(&candidate)?.pre[k] >= 0.0;
        let mut active = phases.clone();
        active[k] = Phase::Active;
        let mut inactive = phases;
        inactive[k] = Phase::Inactive;
        let (first, second) = if first_active {
            (active, inactive)
        } else {
            (inactive, active)
        };
        stack.push(Node {
            phases: second,
            region: region.clone(),
        });
        stack.push(Node { phases: first, region });
    }
    Ok(if inconclusive {
        HalfSpaceVerdict::Unknown
    } else {
        HalfSpaceVerdict::Unsat
    })
}
