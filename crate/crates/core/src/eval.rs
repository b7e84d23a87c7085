//! Stage evaluation and the reflow/distillation property checks.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::datagen::{sample_target_for, ConditionDist, TargetSpec};
use crate::error::{Error, Result};
use crate::metrics::{
    bootstrap_mean_interval, coupling_fidelity, energy_distance, energy_distance_raw, eval_inputs,
    mmd_gaussian, per_pair_costs, stage_endpoints, straightness, Bandwidth, Cost, MetricsRecord,
};
use crate::rng::derive_named;
use crate::stage::{FlowStage, StageRole};

/// Seeds of the held-out evaluation streams, derived from the experiment seed.
#[derive(Clone, Copy, Debug)]
pub struct EvalSeeds {
    pub noise: u64,
    pub target: u64,
    pub traj: u64,
}

impl EvalSeeds {
    pub fn from_master(seed: u64) -> Self {
        Self {
            noise: derive_named(seed, "eval-noise"),
            target: derive_named(seed, "eval-target"),
            traj: derive_named(seed, "eval-traj"),
        }
    }
}

/// Draws `n` samples from a stage at its own guidance and `steps` Euler steps
/// (one step for distilled stages), with the conditions used.
pub fn stage_samples(stage: &FlowStage, n: usize, steps: usize, alpha: f64, conds: &ConditionDist, seed: u64) -> Result<(Vec<f64>, Vec<usize>)> {
    let (z0, c) = eval_inputs(stage.net.state_dim(), n, conds, seed);
    let x = stage_endpoints(stage, &z0, &c, steps, alpha)?;
    Ok((x, c))
}

pub fn role_name(role: StageRole) -> &'static str {
    match role {
        StageRole::Flow => "flow",
        StageRole::OneStep { .. } => "one-step",
    }
}

/// Full metrics row for one stage. `teacher` is required for distilled stages.
pub fn evaluate_stage(cfg: &ExperimentConfig, stage: &FlowStage, teacher: Option<&FlowStage>, seeds: EvalSeeds) -> Result<MetricsRecord> {
    let e = &cfg.eval;
    let spec = &cfg.target;
    let conds = spec.condition_dist();
    let d = spec.dim();
    let (z0, c) = eval_inputs(d, e.n_samples, &conds, seeds.noise);
    let x1 = stage_endpoints(stage, &z0, &c, e.n_steps, stage.alpha)?;
    let target = sample_target_for(spec, &c, seeds.target)?;
    let cost_l2sq = mean(&per_pair_costs(&z0, &x1, d, Cost::L2Sq));
    let cost_l2 = mean(&per_pair_costs(&z0, &x1, d, Cost::L2));
    let ed = energy_distance(&x1, &target, d)?;
    let mmd = mmd_gaussian(&x1, &target, d, Bandwidth::Median)?;
    let (s, se) = if stage.is_one_step() {
        (None, None)
    } else {
        let est = straightness(stage, e.n_traj, e.n_steps, &conds, stage.alpha, seeds.traj)?;
        (Some(est.mean), Some(est.std_err))
    };
    let fidelity = match (stage.role, teacher) {
        (StageRole::OneStep { .. }, Some(t)) => Some(coupling_fidelity(
            t,
            stage,
            &cfg.fidelity_loss(),
            e.n_samples,
            e.n_steps,
            &conds,
            seeds.noise,
        )?),
        (StageRole::OneStep { .. }, None) => {
            return Err(Error::usage(format!("distilled stage '{}' evaluated without its teacher", stage.id)))
        }
        _ => None,
    };
    let record = MetricsRecord {
        stage_id: stage.id.clone(),
        k: stage.k,
        role: role_name(stage.role).into(),
        seed: cfg.seed,
        n_samples: e.n_samples,
        n_traj: if stage.is_one_step() { 0 } else { e.n_traj },
        n_steps: if stage.is_one_step() { 1 } else { e.n_steps },
        alpha: stage.alpha,
        straightness: s,
        straightness_se: se,
        cost_l2sq,
        cost_l2,
        energy_distance: ed,
        mmd,
        coupling_fidelity: fidelity,
        noise_prior: "standard-gaussian".into(),
        condition_weights: conds.weights().to_vec(),
    };
    record.validate()?;
    Ok(record)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewStepRow {
    pub stage_id: String,
    pub n_steps: usize,
    pub energy_distance: f64,
}

/// Energy distance to the target when a flow is sampled with only a few Euler steps.
pub fn few_step_table(cfg: &ExperimentConfig, stages: &[&FlowStage], seeds: EvalSeeds) -> Result<Vec<FewStepRow>> {
    let spec = &cfg.target;
    let conds = spec.condition_dist();
    let d = spec.dim();
    let (z0, c) = eval_inputs(d, cfg.eval.n_samples, &conds, seeds.noise);
    let target = sample_target_for(spec, &c, seeds.target)?;
    let mut rows = Vec::new();
    for stage in stages {
        stage.require_flow("few-step comparison")?;
        for &n in &cfg.eval.few_steps {
            let x = stage_endpoints(stage, &z0, &c, n, stage.alpha)?;
            rows.push(FewStepRow {
                stage_id: stage.id.clone(),
                n_steps: n,
                energy_distance: energy_distance(&x, &target, d)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRow {
    pub stage_id: String,
    pub alpha: f64,
    pub energy_distance: f64,
    /// Fraction of samples whose nearest mode is one selected by their label
    /// (Gaussian-mixture targets only).
    pub adherence: Option<f64>,
}

pub fn guidance_sweep(cfg: &ExperimentConfig, stage: &FlowStage, seeds: EvalSeeds) -> Result<Vec<GuidanceRow>> {
    stage.require_flow("guidance sweep")?;
    let spec = &cfg.target;
    let conds = spec.condition_dist();
    let d = spec.dim();
    let (z0, c) = eval_inputs(d, cfg.eval.n_samples, &conds, seeds.noise);
    let target = sample_target_for(spec, &c, seeds.target)?;
    cfg.eval
        .guidance_sweep
        .iter()
        .map(|&alpha| {
            let x = stage_endpoints(stage, &z0, &c, cfg.eval.n_steps, alpha)?;
            Ok(GuidanceRow {
                stage_id: stage.id.clone(),
                alpha,
                energy_distance: energy_distance(&x, &target, d)?,
                adherence: adherence(spec, &x, &c),
            })
        })
        .collect()
}

pub fn adherence(spec: &TargetSpec, x: &[f64], c: &[usize]) -> Option<f64> {
    let TargetSpec::GaussianMixture { centers, labels, .. } = spec else {
        return None;
    };
    let d = spec.dim();
    let hits = x
        .chunks_exact(d)
        .zip(c)
        .filter(|(p, &ci)| {
            let nearest = centers
                .iter()
                .enumerate()
                .map(|(m, mu)| (m, mu.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(m, _)| m)
                .unwrap();
            labels[ci - 1].contains(&nearest)
        })
        .count();
    Some(hits as f64 / c.len() as f64)
}

/// Energy distance between two stages' endpoints against the same-stage resample floor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalCheck {
    pub from: String,
    pub to: String,
    pub n_samples: usize,
    pub n_steps: usize,
    pub energy_distance: f64,
    /// Mean absolute raw energy distance between independent resamples of `from`.
    pub noise_floor: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub fn marginal_check(cfg: &ExperimentConfig, from: &FlowStage, to: &FlowStage, seed: u64) -> Result<MarginalCheck> {
    let e = &cfg.eval;
    let conds = cfg.target.condition_dist();
    let d = cfg.target.dim();
    let n = e.n_samples;
    let steps = e.marginal_steps;
    let (a, _) = stage_samples(from, n, steps, from.alpha, &conds, derive_named(seed, "marginal-a"))?;
    let (b, _) = stage_samples(to, n, steps, to.alpha, &conds, derive_named(seed, "marginal-b"))?;
    let ed = energy_distance(&a, &b, d)?;
    let mut floor = 0.0;
    for r in 0..e.floor_replicates {
        let (a2, _) = stage_samples(from, n, steps, from.alpha, &conds, derive_named(seed, &format!("marginal-floor-{r}")))?;
        floor += energy_distance_raw(&a, &a2, d)?.abs();
    }
    floor /= e.floor_replicates as f64;
    let threshold = 3.0 * floor;
    Ok(MarginalCheck {
        from: from.id.clone(),
        to: to.id.clone(),
        n_samples: n,
        n_steps: steps,
        energy_distance: ed,
        noise_floor: floor,
        threshold,
        pass: ed <= threshold,
    })
}

/// Paired comparison of transport cost between two stages on shared noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportCheck {
    pub from: String,
    pub to: String,
    pub cost: Cost,
    pub cost_from: f64,
    pub cost_to: f64,
    /// Half-width of the bootstrap 95% upper bound on the mean paired difference.
    pub tolerance: f64,
    pub pass: bool,
}

pub fn transport_checks(cfg: &ExperimentConfig, from: &FlowStage, to: &FlowStage, seed: u64) -> Result<Vec<TransportCheck>> {
    let e = &cfg.eval;
    let conds = cfg.target.condition_dist();
    let d = cfg.target.dim();
    let (z0, c) = eval_inputs(d, e.n_samples, &conds, derive_named(seed, "transport"));
    let xa = stage_endpoints(from, &z0, &c, e.n_steps, from.alpha)?;
    let xb = stage_endpoints(to, &z0, &c, e.n_steps, to.alpha)?;
    [Cost::L2Sq, Cost::L2]
        .into_iter()
        .map(|cost| {
            let ca = per_pair_costs(&z0, &xa, d, cost);
            let cb = per_pair_costs(&z0, &xb, d, cost);
            let diff: Vec<f64> = cb.iter().zip(&ca).map(|(b, a)| b - a).collect();
            let md = mean(&diff);
            let (_, hi) = bootstrap_mean_interval(&diff, e.bootstrap_reps, 0.95, derive_named(seed, "transport-boot"));
            let tolerance = (hi - md).max(0.0);
            Ok(TransportCheck {
                from: from.id.clone(),
                to: to.id.clone(),
                cost,
                cost_from: mean(&ca),
                cost_to: mean(&cb),
                tolerance,
                pass: md <= tolerance,
            })
        })
        .collect()
}

/// One line of the direct-versus-reflow comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub stage_id: String,
    pub role: String,
    pub straightness: Option<f64>,
    pub energy_distance: f64,
    pub mmd: f64,
    pub coupling_fidelity: Option<f64>,
}

pub fn comparison_rows(records: &[MetricsRecord]) -> Vec<ComparisonRow> {
    records
        .iter()
        .map(|r| ComparisonRow {
            stage_id: r.stage_id.clone(),
            role: r.role.clone(),
            straightness: r.straightness,
            energy_distance: r.energy_distance,
            mmd: r.mmd,
            coupling_fidelity: r.coupling_fidelity,
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_comparison_csv<W: Write>(mut w: W, rows: &[ComparisonRow]) -> Result<()> {
    writeln!(w, "stage_id,role,straightness,energy_distance,mmd,coupling_fidelity")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.stage_id,
            r.role,
            opt(r.straightness),
            r.energy_distance,
            r.mmd,
            opt(r.coupling_fidelity)
        )?;
    }
    Ok(())
}

pub fn write_few_step_csv<W: Write>(mut w: W, rows: &[FewStepRow]) -> Result<()> {
    writeln!(w, "stage_id,n_steps,energy_distance")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.stage_id, r.n_steps, r.energy_distance)?;
    }
    Ok(())
}

pub fn write_guidance_csv<W: Write>(mut w: W, rows: &[GuidanceRow]) -> Result<()> {
    writeln!(w, "stage_id,alpha,energy_distance,adherence")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.stage_id, r.alpha, r.energy_distance, opt(r.adherence))?;
    }
    Ok(())
}

/// Everything `eval` computes in one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub records: Vec<MetricsRecord>,
    pub few_step: Vec<FewStepRow>,
    pub guidance: Vec<GuidanceRow>,
    pub marginal: Vec<MarginalCheck>,
    pub transport: Vec<TransportCheck>,
}
