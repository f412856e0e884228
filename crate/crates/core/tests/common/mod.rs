//! Shared fixtures for integration tests.
#![allow(dead_code)]

use etclab::envsim::LinearSystem;
use etclab::neuralnet::Activation;
use etclab::policy::{PolicyConfig, PolicySet};
use etclab::seeds::Rng;
use etclab::verifier::{
    compose, solve_query, BoxRegion, Branch, PiecewiseLinearNet, QueryStatus, Side, VerificationQuery, VerifierConfig,
    VIOLATION_TOL,
};
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::{Rng as _, SeedableRng};

/// Small random verification instance: a ReLU policy with at most ten
/// ReLUs after composition, a random 2-state system, region and limit.
pub struct Instance {
    pub ps: PolicySet,
    pub sys: LinearSystem,
    pub region: BoxRegion,
    pub limit: Vec<f64>,
    pub net: PiecewiseLinearNet,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = Rng::seed_from_u64(seed);
    let hidden = match rng.random_range(0..3) {
        0 => vec![1],
        1 => vec![2],
        _ => vec![1, 1],
    };
    let limit = vec![rng.random_range(0.2..2.0)];
    let cfg = PolicyConfig {
        hidden,
        activation: Activation::Relu,
        head_init_scale: 1.0,
        ..PolicyConfig::default()
    };
    let mut ps = PolicySet::new(2, &limit, &cfg, &mut rng).unwrap();
    for which in 0..2 {
        let net = if which == 0 { ps.mu_mut() } else { ps.pi_mut() };
        for i in 0..net.layers().len() {
            let l = net.layer_mut(i);
            for w in &mut l.weights {
                *w *= 2.0;
            }
            for b in &mut l.bias {
                *b = rng.random_range(-0.5..0.5);
            }
        }
    }
    let a: Vec<f64> = (0..4).map(|_| rng.random_range(-0.8..0.8)).collect();
    let b: Vec<f64> = (0..2).map(|_| rng.random_range(-0.6..0.6)).collect();
    let sys = LinearSystem::from_rows(&[&a[..2], &a[2..]], &[&[b[0]], &[b[1]]], 0.05).unwrap();
    let lower: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..-0.3)).collect();
    let upper: Vec<f64> = (0..2).map(|_| rng.random_range(0.3..1.5)).collect();
    let region = BoxRegion::new(lower, upper).unwrap();
    let net = compose(&ps, &sys, &limit).unwrap();
    assert!(net.num_relus() <= 10);
    Instance {
        ps,
        sys,
        region,
        limit,
        net,
    }
}

/// Largest `objective . outputs - offset` over `input` subject to
/// `Z <= z_rhs` (or `Z >= z_rhs` when `z_le` is false), found by solving one
/// LP per activation pattern. `None` when every pattern is infeasible.
pub fn enumerate_max(
    net: &PiecewiseLinearNet,
    input: &BoxRegion,
    z_le: bool,
    z_rhs: f64,
    objective: &[f64],
    offset: f64,
) -> Option<f64> {
    let d = net.input_dim();
    let k = net.num_relus();
    let mut best: Option<f64> = None;
    for pattern in 0u32..(1 << k) {
        // Affine forms over the inputs, constant last.
        let mut cols: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut e = vec![0.0; d + 1];
                e[i] = 1.0;
                e
            })
            .collect();
        let mut rows: Vec<(Vec<f64>, ComparisonOp)> = Vec::new();
        let mut unit = 0;
        for layer in net.layers() {
            for r in 0..layer.rows {
                let mut pre = vec![0.0; d + 1];
                pre[d] = layer.bias[r];
                for (c, w) in layer.row(r).iter().enumerate() {
                    for j in 0..=d {
                        pre[j] += w * cols[c][j];
                    }
                }
                let active = pattern & (1 << unit) != 0;
                rows.push((pre.clone(), if active { ComparisonOp::Ge } else { ComparisonOp::Le }));
                cols.push(if active { pre } else { vec![0.0; d + 1] });
                unit += 1;
            }
        }
        let out = net.output();
        let form = |coeffs: &[f64]| -> Vec<f64> {
            let mut e = vec![0.0; d + 1];
            for (o, &c) in coeffs.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                for (col, w) in out.row(o).iter().enumerate() {
                    for j in 0..=d {
                        e[j] += c * w * cols[col][j];
                    }
                }
                e[d] += c * out.bias[o];
            }
            e
        };
        let mut z = vec![0.0; net.output_dim()];
        z[0] = 1.0;
        let mut ze = form(&z);
        ze[d] -= z_rhs;
        rows.push((ze, if z_le { ComparisonOp::Le } else { ComparisonOp::Ge }));
        let oe = form(objective);

        let mut p = Problem::new(OptimizationDirection::Maximize);
        let vars: Vec<_> = (0..d)
            .map(|i| p.add_var(oe[i], (input.lower[i], input.upper[i])))
            .collect();
        // Each row reads `form (op) 0`.
        for (e, op) in rows {
            p.add_constraint((0..d).map(|j| (vars[j], e[j])).collect::<Vec<_>>(), op, -e[d]);
        }
        if let Ok(sol) = p.solve() {
            let v = sol.objective() + oe[d] - offset;
            best = Some(best.map_or(v, |b: f64| b.max(v)));
        }
    }
    best
}

/// Oracle verdict; `None` when the optimum is too close to the threshold
/// to call either way.
pub fn oracle_sat(max: Option<f64>) -> Option<bool> {
    match max {
        None => Some(false),
        Some(v) if (v - VIOLATION_TOL).abs() < 1e-7 => None,
        Some(v) => Some(v > VIOLATION_TOL),
    }
}

#[derive(Debug, Default)]
pub struct CompletenessTally {
    pub instances: usize,
    pub half_spaces: usize,
    pub agree: usize,
    pub disagree: Vec<String>,
    pub ambiguous: usize,
    pub sat: usize,
    pub unsat: usize,
    pub unsound_witnesses: usize,
}

/// Compares `solve_query` against enumeration on every half-space of both
/// branches and re-verifies every witness by exact evaluation.
pub fn completeness_run(seeds: std::ops::Range<u64>, cfg: &VerifierConfig) -> CompletenessTally {
    let mut t = CompletenessTally::default();
    for seed in seeds {
        let inst = random_instance(seed);
        let input = inst.region.augmented(&inst.limit).unwrap();
        let n = 2;
        t.instances += 1;
        for branch in [Branch::Communicate, Branch::Hold] {
            let q = VerificationQuery {
                input: input.clone(),
                branch,
                target: inst.region.clone(),
            };
            let out = solve_query(&inst.net, &q, cfg).unwrap();
            let first = match branch {
                Branch::Communicate => 1,
                Branch::Hold => 1 + n,
            };
            for w in &out.witnesses {
                let e = inst.net.evaluate(&w.input).unwrap();
                let next = if branch == Branch::Communicate {
                    e.communicate_next()
                } else {
                    e.hold_next()
                };
                let v = match w.side {
                    Side::Upper => next[w.dim] - inst.region.upper[w.dim],
                    Side::Lower => inst.region.lower[w.dim] - next[w.dim],
                };
                let z_ok = match branch {
                    Branch::Communicate => e.z() <= cfg.margin + 1e-9,
                    Branch::Hold => e.z() > 0.0,
                };
                if !(input.contains(&w.input) && z_ok && v > VIOLATION_TOL) {
                    t.unsound_witnesses += 1;
                }
            }
            for dim in 0..n {
                for side in [Side::Upper, Side::Lower] {
                    t.half_spaces += 1;
                    let mut objective = vec![0.0; inst.net.output_dim()];
                    let offset = match side {
                        Side::Upper => {
                            objective[first + dim] = 1.0;
                            inst.region.upper[dim]
                        }
                        Side::Lower => {
                            objective[first + dim] = -1.0;
                            -inst.region.lower[dim]
                        }
                    };
                    let max = enumerate_max(
                        &inst.net,
                        &input,
                        branch == Branch::Communicate,
                        cfg.margin,
                        &objective,
                        offset,
                    );
                    let found = out.witnesses.iter().any(|w| w.dim == dim && w.side == side);
                    match oracle_sat(max) {
                        None => t.ambiguous += 1,
                        Some(expected) => {
                            if expected {
                                t.sat += 1;
                            } else {
                                t.unsat += 1;
                            }
                            if expected == found && !(out.status == QueryStatus::Unknown && !found) {
                                t.agree += 1;
                            } else {
                                t.disagree.push(format!(
                                    "seed {seed} {branch:?} dim {dim} {side:?}: oracle {max:?}, solver {:?}",
                                    out.status
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    t
}
