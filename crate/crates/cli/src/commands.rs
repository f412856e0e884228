//! Subcommand bodies. Each writes its resolved configuration to
//! `manifest.toml` in the output directory before doing any work.

use std::fs;
use std::path::Path;

use etclab::baselines::{baseline_sweep, summarize_sweep, LqrController, SweepRow};
use etclab::envsim::{EnvConfig, EtcEnv};
use etclab::policy::PolicySet;
use etclab::retrainer::{refine_policy_et_with, RetrainStatus};
use etclab::seeds::SeedStreams;
use etclab::trainer::{evaluate_policy, evaluate_policy_with, train_with, EvalSummary};
use etclab::verifier::{check_stability_et, StabilityStatus};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn prepare(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io(out))?;
    let path = out.join("manifest.toml");
    fs::write(&path, cfg.to_toml()).map_err(io(&path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_policy(cfg: &RunConfig) -> Result<PolicySet, CliError> {
    let dir = cfg.policy_dir()?;
    PolicySet::load(dir).map_err(|e| CliError::Runtime(format!("cannot load policy from {}: {e}", dir.display())))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    best_epoch: Option<usize>,
    diverged: Option<&'a str>,
    evaluation: &'a EvalSummary,
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.train
        .validate()
        .map_err(|e| CliError::Usage(format!("train: {e}")))?;
    prepare(cfg, out)?;
    let env = cfg.plant.env(&cfg.env)?;
    let path = out.join("metrics.csv");
    let mut w = csv_writer(&path)?;
    let k = cfg.train.policy.option_count;
    let mut header: Vec<String> = ["epoch", "mean_reward", "mean_r_ctrl", "savings"]
        .map(String::from)
        .to_vec();
    header.extend((0..k).map(|i| format!("option{i}_frac")));
    header.extend(["tau", "loss_mu", "loss_pi", "loss_q"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    let mut write_err = None;
    let res = train_with(&env, &cfg.train, cfg.seed, |m| {
        let mut rec = vec![
            m.epoch.to_string(),
            m.mean_reward.to_string(),
            m.mean_r_ctrl.to_string(),
            m.savings.to_string(),
        ];
        rec.extend(m.option_fracs.iter().map(f64::to_string));
        rec.extend([m.tau, m.loss_mu, m.loss_pi, m.loss_q].map(|v| v.to_string()));
        if let Err(e) = w.write_record(&rec) {
            write_err.get_or_insert(e);
        }
        if m.epoch % 10 == 0 {
            eprintln!(
                "epoch {:5}  reward {:9.4}  savings {:.3}",
                m.epoch, m.mean_reward, m.savings
            );
        }
    })?;
    if let Some(e) = write_err {
        return Err(csv_err(e));
    }
    w.flush().map_err(io(&path))?;
    res.best.save(&out.join("policy"))?;
    res.last.save(&out.join("last"))?;
    let summary = evaluate_policy(&env, &res.best, &cfg.eval, &mut SeedStreams::new(cfg.seed).rng("eval"))?;
    write_json(
        &out.join("evaluation.json"),
        &TrainReport {
            best_epoch: res.best_epoch,
            diverged: res.diverged.as_deref(),
            evaluation: &summary,
        },
    )?;
    println!(
        "best epoch {:?}: savings {:.3}, mean |R_ctrl| {:.3}, stable {}",
        res.best_epoch,
        summary.mean_savings,
        summary.mean_r_ctrl.abs(),
        summary.all_stable
    );
    match res.diverged {
        Some(why) => Err(CliError::Runtime(format!("training diverged: {why}"))),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct EpisodeRow {
    episode: usize,
    reward: f64,
    r_ctrl_abs: f64,
    savings: f64,
    communications: usize,
    max_abs_angle: f64,
    stable: bool,
}

#[derive(Serialize)]
struct EvaluateReport {
    episodes: usize,
    deterministic: bool,
    reward_mean: f64,
    reward_std: f64,
    r_ctrl_abs_mean: f64,
    r_ctrl_abs_std: f64,
    savings_mean: f64,
    savings_std: f64,
    all_stable: bool,
}

pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    prepare(cfg, out)?;
    let ps = load_policy(cfg)?;
    let env = cfg.plant.env(&cfg.env)?;
    let traj_path = out.join("trajectories.csv");
    let mut traj = csv_writer(&traj_path)?;
    traj.write_record(["episode", "k", "theta", "theta_dot", "u", "delta", "r_ctrl"])
        .map_err(csv_err)?;
    let mut comms = vec![0usize; cfg.eval.episodes];
    let mut write_err = None;
    let summary = evaluate_policy_with(&env, &ps, &cfg.eval, &mut SeedStreams::new(cfg.seed).rng("eval"), |s| {
        comms[s.episode] += usize::from(s.delta);
        let mut rec = vec![s.episode.to_string(), s.t.to_string()];
        rec.extend(s.state.iter().chain(s.applied).map(f64::to_string));
        rec.push(u8::from(s.delta).to_string());
        rec.push(s.r_ctrl.to_string());
        if let Err(e) = traj.write_record(&rec) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(csv_err(e));
    }
    traj.flush().map_err(io(&traj_path))?;

    let lambda = cfg.train.lambda_comm;
    let rows: Vec<EpisodeRow> = summary
        .episodes
        .iter()
        .zip(&comms)
        .enumerate()
        .map(|(i, (e, &c))| EpisodeRow {
            episode: i,
            reward: e.r_ctrl - lambda * c as f64,
            r_ctrl_abs: e.r_ctrl.abs(),
            savings: e.savings,
            communications: c,
            max_abs_angle: e.max_abs_angle,
            stable: e.stable,
        })
        .collect();
    let path = out.join("episodes.csv");
    let mut w = csv_writer(&path)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io(&path))?;

    let (reward_mean, reward_std) = mean_std(&rows.iter().map(|r| r.reward).collect::<Vec<_>>());
    let (r_ctrl_abs_mean, r_ctrl_abs_std) = mean_std(&rows.iter().map(|r| r.r_ctrl_abs).collect::<Vec<_>>());
    let (savings_mean, savings_std) = mean_std(&rows.iter().map(|r| r.savings).collect::<Vec<_>>());
    let report = EvaluateReport {
        episodes: rows.len(),
        deterministic: cfg.eval.deterministic,
        reward_mean,
        reward_std,
        r_ctrl_abs_mean,
        r_ctrl_abs_std,
        savings_mean,
        savings_std,
        all_stable: summary.all_stable,
    };
    write_json(&out.join("summary.json"), &report)?;
    println!(
        "{} episodes: reward {reward_mean:.4} ± {reward_std:.4}, |R_ctrl| {r_ctrl_abs_mean:.4} ± {r_ctrl_abs_std:.4}, savings {savings_mean:.3} ± {savings_std:.3}, stable {}",
        rows.len(),
        summary.all_stable
    );
    Ok(())
}

pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut jobs = Vec::new();
    for g in &cfg.sweep.grids {
        for xi in g.xi.values()? {
            jobs.push((g.rule, xi));
        }
    }
    if jobs.is_empty() || cfg.sweep.rollouts == 0 {
        return Err(CliError::Usage("sweep grid is empty".into()));
    }
    prepare(cfg, out)?;
    let env = cfg.plant.env(&cfg.env)?;
    let lqr = LqrController::pendulum(&cfg.plant.params)?;
    let chunks: Vec<Vec<SweepRow>> = jobs
        .par_iter()
        .map(|&(rule, xi)| {
            baseline_sweep(
                &env,
                &lqr,
                rule,
                &[xi],
                cfg.sweep.rollouts,
                cfg.seed,
                cfg.sweep.angle_limit,
            )
        })
        .collect::<etclab::Result<_>>()?;
    let rows: Vec<SweepRow> = chunks.into_iter().flatten().collect();
    let path = out.join("sweep.csv");
    let mut w = csv_writer(&path)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io(&path))?;
    let summary = summarize_sweep(&rows);
    let path = out.join("summary.csv");
    let mut w = csv_writer(&path)?;
    for s in &summary {
        w.serialize(s).map_err(csv_err)?;
    }
    w.flush().map_err(io(&path))?;
    println!("{} rows over {} settings", rows.len(), summary.len());
    for s in &summary {
        println!(
            "{:>12} xi {:<10.4} savings {:.3}  |R_ctrl| {:8.3}  stable {}",
            s.rule.name(),
            s.xi,
            s.savings_mean,
            s.r_ctrl_abs_mean,
            s.all_stable
        );
    }
    Ok(())
}

fn verdict(status: StabilityStatus) -> &'static str {
    match status {
        StabilityStatus::Certified => "UNSAT/stable",
        StabilityStatus::Unstable => "SAT/unstable",
        StabilityStatus::Unknown => "UNKNOWN",
    }
}

pub fn verify(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (region, limit) = cfg.region()?;
    prepare(cfg, out)?;
    let ps = load_policy(cfg)?;
    let sys = cfg.plant.linear();
    let report = check_stability_et(&ps, &sys, &region, &limit, &cfg.verifier)?;
    write_json(&out.join("report.json"), &report)?;
    println!(
        "{}: communicate {:?}, hold {:?}, {} witnesses, {} nodes, {} LPs",
        verdict(report.status),
        report.communicate,
        report.hold,
        report.witnesses.len(),
        report.stats.nodes,
        report.stats.lp_calls
    );
    for w in &report.witnesses {
        println!(
            "  {} branch: input {:?} leaves dim {} ({:?}) by {:.3e}",
            w.branch.name(),
            w.input,
            w.dim,
            w.side,
            w.violation
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct RetrainReport<'a> {
    status: &'a RetrainStatus,
    epochs: usize,
    verdict: &'static str,
    final_check: &'a etclab::verifier::StabilityReport,
    /// Rollouts on the configured plant starting inside the region.
    plant_check: &'a EvalSummary,
}

pub fn retrain(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (region, limit) = cfg.region()?;
    cfg.retrain
        .validate()
        .map_err(|e| CliError::Usage(format!("retrain: {e}")))?;
    prepare(cfg, out)?;
    let ps = load_policy(cfg)?;
    let sys = cfg.plant.linear();
    let path = out.join("history.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["epoch", "witnesses", "crit", "comm_saving", "certified", "savings"])
        .map_err(csv_err)?;
    let mut write_err = None;
    let res = refine_policy_et_with(&ps, &sys, &region, &limit, &cfg.retrain, |e| {
        let rec = [
            e.epoch.to_string(),
            e.witnesses.to_string(),
            e.crit.to_string(),
            e.comm_saving.to_string(),
            e.certified.to_string(),
            e.savings.to_string(),
        ];
        if let Err(err) = w.write_record(&rec) {
            write_err.get_or_insert(err);
        }
        eprintln!(
            "epoch {:3}: {} witnesses, {} critical, {} saving points, certified {}, savings {:.3}",
            e.epoch, e.witnesses, e.crit, e.comm_saving, e.certified, e.savings
        );
    })?;
    if let Some(e) = write_err {
        return Err(csv_err(e));
    }
    w.flush().map_err(io(&path))?;
    res.policy.save(&out.join("policy"))?;

    let env_cfg = EnvConfig {
        init_low: region.lower.clone(),
        init_high: region.upper.clone(),
        ..cfg.env.clone()
    };
    let env: EtcEnv = cfg.plant.env(&env_cfg)?;
    let plant_check = evaluate_policy(
        &env,
        &res.policy,
        &cfg.eval,
        &mut SeedStreams::new(cfg.seed).rng("eval"),
    )?;
    write_json(
        &out.join("retrain.json"),
        &RetrainReport {
            status: &res.status,
            epochs: res.epochs,
            verdict: verdict(res.last_report.status),
            final_check: &res.last_report,
            plant_check: &plant_check,
        },
    )?;
    println!(
        "{:?} after {} epochs ({}); plant rollouts: savings {:.3}, stable {}",
        res.status,
        res.epochs,
        verdict(res.last_report.status),
        plant_check.mean_savings,
        plant_check.all_stable
    );
    match res.status {
        RetrainStatus::Certified => Ok(()),
        RetrainStatus::Uncertified => Err(CliError::Runtime(format!(
            "not certified within {} epochs",
            cfg.retrain.max_epochs
        ))),
        RetrainStatus::NotControlInvariant { ref point } => Err(CliError::Runtime(format!(
            "region is not control invariant: no admissible input at {point:?}"
        ))),
    }
}
