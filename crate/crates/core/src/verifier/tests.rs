use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

use super::*;
use crate::envsim::step_linear;
use crate::neuralnet::{Activation, Layer, MlpNetwork, OutputHead};
use crate::policy::{EtcObservation, OptionSemantics, PolicyConfig, PolicyManifest};
use crate::seeds::Rng;

fn dense(rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>) -> Layer {
    Layer {
        rows,
        cols,
        blocks: 1,
        weights,
        bias,
    }
}

/// Hidden-layer-free policy: `u = W (x, u_prev) + c`, `Z = z_bias`.
fn affine_policy(n: usize, m: usize, w: Vec<f64>, c: Vec<f64>, z_bias: f64, limit: f64) -> PolicySet {
    let d = n + m;
    let mu = MlpNetwork::from_parts(
        vec![dense(2, d, vec![0.0; 2 * d], vec![z_bias, 0.0])],
        Activation::Relu,
        OutputHead::Softmax,
        vec![],
    )
    .unwrap();
    let pi = MlpNetwork::from_parts(
        vec![dense(m, d, w, c)],
        Activation::Relu,
        OutputHead::Gaussian,
        vec![-0.5; m],
    )
    .unwrap();
    let q = MlpNetwork::from_parts(
        vec![dense(2, d, vec![0.0; 2 * d], vec![0.0; 2])],
        Activation::Relu,
        OutputHead::Linear,
        vec![],
    )
    .unwrap();
    let manifest = PolicyManifest {
        option_count: 2,
        semantics: OptionSemantics::Etc,
        state_dim: n,
        action_dim: m,
        action_limit: vec![limit; m],
        observation: (0..d).map(|i| format!("o{i}")).collect(),
    };
    PolicySet::from_parts(mu, pi, q, manifest).unwrap()
}

fn scalar(a: f64, b: f64) -> LinearSystem {
    LinearSystem::from_rows(&[&[a]], &[&[b]], 0.05).unwrap()
}

fn relu_policy(n: usize, m: usize, hidden: &[usize], limit: f64, rng: &mut Rng) -> PolicySet {
    let cfg = PolicyConfig {
        hidden: hidden.to_vec(),
        activation: Activation::Relu,
        head_init_scale: 1.0,
        ..PolicyConfig::default()
    };
    let mut ps = PolicySet::new(n, &vec![limit; m], &cfg, rng).unwrap();
    for which in 0..2 {
        let net = if which == 0 { ps.mu_mut() } else { ps.pi_mut() };
        for i in 0..net.layers().len() {
            for b in &mut net.layer_mut(i).bias {
                *b = rng.random_range(-0.5..0.5);
            }
        }
    }
    ps
}

/// Policy then dynamics, evaluated separately.
fn direct(ps: &PolicySet, sys: &LinearSystem, input: &[f64], limit: &[f64]) -> Vec<f64> {
    let n = sys.state_dim();
    let obs = EtcObservation::from_vec(input.to_vec());
    let z = ps.option_logits(&obs).unwrap();
    let (mean, _) = ps.action_distribution(&obs, 0).unwrap();
    let u: Vec<f64> = mean.iter().zip(limit).map(|(v, l)| v.clamp(-l, *l)).collect();
    let mut out = vec![z[0] - z[1]];
    out.extend(step_linear(sys, &input[..n], &u).unwrap());
    out.extend(step_linear(sys, &input[..n], &input[n..]).unwrap());
    out
}

#[test]
fn zero_policy_identity_dynamics() {
    let ps = affine_policy(2, 1, vec![0.0; 3], vec![0.0], 0.0, 1.0);
    let sys = LinearSystem::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[0.0], &[0.0]], 0.05).unwrap();
    let net = compose(&ps, &sys, &[1.0]).unwrap();
    let e = net.evaluate(&[0.3, -0.7, 0.9]).unwrap();
    assert_eq!(e.communicate_next(), &[0.3, -0.7]);
    assert_eq!(e.hold_next(), &[0.3, -0.7]);
}

#[test]
fn hold_branch_substitutes_previous_input() {
    let ps = affine_policy(1, 1, vec![-1.0, 0.0], vec![0.0], 0.0, 3.0);
    let net = compose(&ps, &scalar(0.5, 0.5), &[3.0]).unwrap();
    for x in [-1.0, 0.0, 0.4, 2.0] {
        let e = net.evaluate(&[x, 2.0]).unwrap();
        assert!((e.hold_next()[0] - (0.5 * x + 1.0)).abs() < 1e-15);
        assert!((e.communicate_next()[0] - 0.0).abs() < 1e-15);
    }
}

#[test]
fn saturation_is_exact() {
    let ps = affine_policy(1, 1, vec![10.0, 0.0], vec![0.0], 0.0, 2.0);
    let net = compose(&ps, &scalar(0.0, 1.0), &[2.0]).unwrap();
    for (x, u) in [
        (-1.0, -2.0),
        (-0.2, -2.0),
        (-0.1, -1.0),
        (0.0, 0.0),
        (0.15, 1.5),
        (0.2, 2.0),
        (5.0, 2.0),
    ] {
        let e = net.evaluate(&[x, 0.0]).unwrap();
        assert!((e.communicate_next()[0] - u).abs() < 1e-14, "{x} {:?}", e.outputs);
    }
}

#[test]
fn compose_matches_direct_evaluation() {
    let mut rng = Rng::seed_from_u64(3);
    for (n, m, hidden) in [(2, 1, vec![8, 8]), (3, 2, vec![5]), (2, 1, vec![6, 4, 3])] {
        let limit = vec![1.5; m];
        let ps = relu_policy(n, m, &hidden, 1.5, &mut rng);
        let a: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ar: Vec<&[f64]> = a.iter().map(|r| r.as_slice()).collect();
        let br: Vec<&[f64]> = b.iter().map(|r| r.as_slice()).collect();
        let sys = LinearSystem::from_rows(&ar, &br, 0.05).unwrap();
        let net = compose(&ps, &sys, &limit).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let x: Vec<f64> = (0..n + m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let e = net.evaluate(&x).unwrap();
            let d = direct(&ps, &sys, &x, &limit);
            for (p, q) in e.outputs.iter().zip(&d) {
                worst = worst.max((p - q).abs());
            }
        }
        assert!(worst < 1e-12, "max deviation {worst}");
    }
}

#[test]
fn compose_rejects_tanh_and_three_options() {
    let mut rng = Rng::seed_from_u64(0);
    let sys = scalar(1.0, 1.0);
    let tanh = PolicySet::new(
        1,
        &[1.0],
        &PolicyConfig {
            hidden: vec![4],
            ..PolicyConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    assert!(compose(&tanh, &sys, &[1.0]).is_err());
    let three = PolicySet::new(
        1,
        &[1.0],
        &PolicyConfig {
            hidden: vec![4],
            activation: Activation::Relu,
            option_count: 3,
            ..PolicyConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    assert!(compose(&three, &sys, &[1.0]).is_err());
}

fn unit_interval() -> BoxRegion {
    BoxRegion::new(vec![-1.0], vec![1.0]).unwrap()
}

#[test]
fn deadbeat_policy_is_unsat() {
    let ps = affine_policy(1, 1, vec![-2.0, 0.0], vec![0.0], 0.0, 2.0);
    let net = compose(&ps, &scalar(1.0, 0.5), &[2.0]).unwrap();
    let q = VerificationQuery {
        input: unit_interval().augmented(&[2.0]).unwrap(),
        branch: Branch::Communicate,
        target: unit_interval(),
    };
    let out = solve_query(&net, &q, &VerifierConfig::default()).unwrap();
    assert_eq!(out.status, QueryStatus::Unsat);
    assert!(out.witnesses.is_empty());
}

#[test]
fn expanding_policy_is_sat_near_the_boundary() {
    let ps = affine_policy(1, 1, vec![2.0, 0.0], vec![0.0], 0.0, 2.0);
    let net = compose(&ps, &scalar(0.5, 0.5), &[2.0]).unwrap();
    let q = VerificationQuery {
        input: unit_interval().augmented(&[2.0]).unwrap(),
        branch: Branch::Communicate,
        target: unit_interval(),
    };
    let out = solve_query(&net, &q, &VerifierConfig::default()).unwrap();
    assert_eq!(out.status, QueryStatus::Sat);
    assert_eq!(out.witnesses.len(), 2);
    let w = out.witness().unwrap();
    assert_eq!((w.dim, w.side), (0, Side::Upper));
    assert!(w.input[0] > 2.0 / 3.0);
    assert!((w.next_state[0] - 1.5 * w.input[0]).abs() < 1e-12);
    assert!(w.next_state[0] > 1.0 + VIOLATION_TOL);
    let first_only = solve_query(
        &net,
        &q,
        &VerifierConfig {
            collect_all: false,
            ..VerifierConfig::default()
        },
    )
    .unwrap();
    assert_eq!(first_only.witnesses.len(), 1);
    assert_eq!(first_only.witnesses[0], *w);
}

#[test]
fn always_communicating_contraction_is_certified() {
    let ps = affine_policy(2, 2, vec![0.0; 8], vec![0.0; 2], 0.0, 1.0);
    let sys = LinearSystem::from_rows(&[&[0.9, 0.0], &[0.0, 0.9]], &[&[1.0, 0.0], &[0.0, 1.0]], 0.05).unwrap();
    let region = BoxRegion::symmetric(&[1.0, 1.0]).unwrap();
    let report = check_stability_et(&ps, &sys, &region, &[1.0, 1.0], &VerifierConfig::default()).unwrap();
    assert_eq!(report.status, StabilityStatus::Certified);
    assert!(report.witnesses.is_empty());
    assert_eq!(
        (report.communicate, report.hold),
        (QueryStatus::Unsat, QueryStatus::Unsat)
    );
    // Grid spot check of the contraction argument.
    let net = compose(&ps, &sys, &[1.0, 1.0]).unwrap();
    let s = region.augmented(&[1.0, 1.0]).unwrap();
    for i in 0..=10 {
        for j in 0..=10 {
            let p = s.from_unit(&[i as f64 / 10.0, j as f64 / 10.0, 1.0, 0.0]);
            assert!(!check_point_et(&p, &net, &region).unwrap());
        }
    }
}

#[test]
fn holding_with_large_inputs_is_unstable() {
    let ps = affine_policy(2, 1, vec![0.0; 3], vec![0.0], 5.0, 3.0);
    let sys = LinearSystem::from_rows(&[&[0.5, 0.0], &[0.0, 0.5]], &[&[0.0], &[1.0]], 0.05).unwrap();
    let region = BoxRegion::symmetric(&[1.0, 1.0]).unwrap();
    let report = check_stability_et(&ps, &sys, &region, &[3.0], &VerifierConfig::default()).unwrap();
    assert_eq!(report.status, StabilityStatus::Unstable);
    assert_eq!(report.communicate, QueryStatus::Unsat);
    assert_eq!(report.hold, QueryStatus::Sat);
    // Corner oracle: x = (1, 1), u_prev = 3 gives 0.5 + 3 > 1.
    let net = compose(&ps, &sys, &[3.0]).unwrap();
    let corner = net.evaluate(&[1.0, 1.0, 3.0]).unwrap();
    assert!(corner.hold_next()[1] > 1.0);
    for w in &report.witnesses {
        assert_eq!(w.branch, Branch::Hold);
        assert_eq!(w.dim, 1);
        assert!(w.z > 0.0);
        assert!(check_point_et(&w.input, &net, &region).unwrap());
    }
}

#[test]
fn exhausted_budget_is_unknown_not_unsat() {
    let mut rng = Rng::seed_from_u64(11);
    let ps = relu_policy(2, 1, &[6, 6], 1.0, &mut rng);
    let sys = LinearSystem::from_rows(&[&[0.2, 0.0], &[0.0, 0.2]], &[&[0.1], &[0.1]], 0.05).unwrap();
    let region = BoxRegion::symmetric(&[1.0, 1.0]).unwrap();
    let cfg = VerifierConfig {
        node_budget: 0,
        ..VerifierConfig::default()
    };
    let report = check_stability_et(&ps, &sys, &region, &[1.0], &cfg).unwrap();
    assert_eq!(report.status, StabilityStatus::Unknown);
}

#[test]
fn certified_random_policy_survives_simulation() {
    let mut rng = Rng::seed_from_u64(5);
    let sys = LinearSystem::from_rows(&[&[0.6, 0.1], &[-0.2, 0.5]], &[&[0.1], &[0.2]], 0.05).unwrap();
    let region = BoxRegion::symmetric(&[1.0, 1.0]).unwrap();
    let mut certified = None;
    for _ in 0..20 {
        let ps = relu_policy(2, 1, &[4, 4], 1.0, &mut rng);
        let r = check_stability_et(&ps, &sys, &region, &[1.0], &VerifierConfig::default()).unwrap();
        if r.status == StabilityStatus::Certified {
            certified = Some(ps);
            break;
        }
    }
    let ps = certified.expect("some random policy is certified");
    let net = compose(&ps, &sys, &[1.0]).unwrap();
    let s = region.augmented(&[1.0]).unwrap();
    for _ in 0..1_000_000 {
        let t: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
        assert!(!check_point_et(&s.from_unit(&t), &net, &region).unwrap());
    }
}

#[test]
fn admissible_input_examples() {
    let region = unit_interval();
    let u = find_valid_input_et(&[0.3, 0.0], &scalar(0.5, 1.0), &region, &[1.0]).unwrap();
    assert_eq!(u, Some(vec![0.0]));
    let u = find_valid_input_et(&[1.0, 0.0], &scalar(2.0, 1.0), &region, &[3.0]).unwrap();
    assert_eq!(u, Some(vec![-1.0]));
    let u = find_valid_input_et(&[1.0, 0.0], &scalar(2.0, 1.0), &region, &[0.5]).unwrap();
    assert_eq!(u, None);
    let u = find_valid_input_et(&[1.0, 0.0], &scalar(2.0, -1.0), &region, &[3.0]).unwrap();
    assert_eq!(u, Some(vec![1.0]));
}

#[test]
fn admissible_input_with_two_actuators() {
    let sys = LinearSystem::from_rows(&[&[2.0, 0.0], &[0.0, 0.5]], &[&[1.0, 0.0], &[0.0, 1.0]], 0.05).unwrap();
    let region = BoxRegion::symmetric(&[1.0, 1.0]).unwrap();
    let u = find_valid_input_et(&[1.0, 1.0, 0.0, 0.0], &sys, &region, &[3.0, 3.0])
        .unwrap()
        .unwrap();
    assert!((u[0] + 1.0).abs() < 1e-9 && u[1].abs() < 1e-9, "{u:?}");
    assert!(find_valid_input_et(&[1.0, 1.0, 0.0, 0.0], &sys, &region, &[0.5, 3.0])
        .unwrap()
        .is_none());
}

#[test]
fn point_checks() {
    // u = -x / 2 with A = 1, B = 1: x' = x / 2 when communicating.
    let comm = affine_policy(1, 1, vec![-0.5, 0.0], vec![0.0], 0.0, 2.0);
    let net = compose(&comm, &scalar(1.0, 1.0), &[2.0]).unwrap();
    let region = unit_interval();
    // Hold would land on 1.0 exactly: inside the closed box.
    assert!(comm_saving_possible(&[0.5, 0.5], &net, &region).unwrap());
    assert!(!check_point_et(&[0.5, 0.5], &net, &region).unwrap());
    assert!(!comm_saving_possible(&[0.5, 0.6], &net, &region).unwrap());
    let exact = affine_policy(1, 1, vec![0.0, 0.0], vec![0.0], 0.0, 2.0);
    let net = compose(&exact, &scalar(1.0, 1.0), &[2.0]).unwrap();
    assert!(!check_point_et(&[1.0, 0.0], &net, &region).unwrap());
    assert!(check_point_et(&[1.0 + 1e-12, 0.0], &net, &region).unwrap());
    let hold = affine_policy(1, 1, vec![0.0, 0.0], vec![0.0], 1.0, 2.0);
    let net = compose(&hold, &scalar(0.5, 0.1), &[2.0]).unwrap();
    assert!(!check_point_et(&[0.5, 1.0], &net, &region).unwrap());
    assert!(!comm_saving_possible(&[0.5, 1.0], &net, &region).unwrap());
}

#[test]
fn box_region_validation() {
    assert!(BoxRegion::new(vec![1.0], vec![0.0]).is_err());
    assert!(BoxRegion::new(vec![0.0], vec![f64::INFINITY]).is_err());
    assert!(BoxRegion::new(vec![0.0, 1.0], vec![1.0]).is_err());
    let b = BoxRegion::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
    assert!(b.contains(&[1.0, 0.0]));
    assert!(!b.contains(&[1.0, 2.1]));
    assert_eq!(b.center(), vec![0.0, 1.0]);
    assert_eq!(b.from_unit(&[0.25, 1.0]), vec![-0.5, 2.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shrinking_the_region_never_removes_counterexamples(seed in 0u64..10_000, shrink in 0.3f64..0.95) {
        let mut rng = Rng::seed_from_u64(seed);
        let ps = relu_policy(2, 1, &[3, 3], 1.0, &mut rng);
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-0.7..0.7)).collect();
        let sys = LinearSystem::from_rows(&[&a[..2], &a[2..]], &[&[rng.random_range(-0.5..0.5)], &[rng.random_range(-0.5..0.5)]], 0.05).unwrap();
        let outer = BoxRegion::symmetric(&[1.0, 1.0]).unwrap();
        let inner = BoxRegion::symmetric(&[shrink, shrink]).unwrap();
        let cfg = VerifierConfig::default();
        for branch in [Branch::Communicate, Branch::Hold] {
            let input = BoxRegion::symmetric(&[1.0, 1.0, 1.0]).unwrap();
            let net = compose(&ps, &sys, &[1.0]).unwrap();
            let big = solve_query(&net, &VerificationQuery { input: input.clone(), branch, target: outer.clone() }, &cfg).unwrap();
            let small = solve_query(&net, &VerificationQuery { input, branch, target: inner.clone() }, &cfg).unwrap();
            if big.status == QueryStatus::Sat {
                prop_assert_eq!(small.status, QueryStatus::Sat);
            }
            if small.status == QueryStatus::Unsat {
                prop_assert_eq!(big.status, QueryStatus::Unsat);
            }
        }
    }

    #[test]
    fn witnesses_reverify(seed in 0u64..10_000) {
        let mut rng = Rng::seed_from_u64(seed);
        let ps = relu_policy(2, 1, &[4], 1.0, &mut rng);
        let sys = LinearSystem::from_rows(&[&[0.9, 0.3], &[-0.3, 0.9]], &[&[0.2], &[0.4]], 0.05).unwrap();
        let region = BoxRegion::symmetric(&[0.5, 0.5]).unwrap();
        let cfg = VerifierConfig::default();
        let net = compose(&ps, &sys, &[1.0]).unwrap();
        let s = region.augmented(&[1.0]).unwrap();
        let report = check_stability_composed(&net, &region, &[1.0], &cfg).unwrap();
        for w in &report.witnesses {
            prop_assert!(s.contains(&w.input));
            let e = net.evaluate(&w.input).unwrap();
            let next = match w.branch {
                Branch::Communicate => {
                    prop_assert!(e.z() <= cfg.margin + 1e-9);
                    e.communicate_next()
                }
                Branch::Hold => {
                    prop_assert!(e.z() > 0.0);
                    e.hold_next()
                }
            };
            let v = match w.side {
                Side::Upper => next[w.dim] - region.upper[w.dim],
                Side::Lower => region.lower[w.dim] - next[w.dim],
            };
            prop_assert!(v > VIOLATION_TOL);
            prop_assert_eq!(next, w.next_state.as_slice());
        }
    }
}
