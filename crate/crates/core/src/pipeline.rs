//! Staged experiment runner. Every step writes its artifacts plus a manifest
//! that lets an identical rerun skip it.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::datagen::{sample_target, ConditionDist};
use crate::distill::distill;
use crate::error::{Error, Result};
use crate::eval::{
    comparison_rows, evaluate_stage, few_step_table, guidance_sweep, marginal_check, stage_samples, transport_checks,
    write_comparison_csv, write_few_step_csv, write_guidance_csv, EvalReport, EvalSeeds,
};
use crate::export::{trajectories_svg, write_samples_csv};
use crate::flow::write_trajectories_csv;
use crate::metrics::{eval_inputs, write_metrics_csv, MetricsRecord};
use crate::reflow::{generate_pairs, reflow_step, PairDataset};
use crate::rng::derive_named;
use crate::stage::{sha256_hex, FlowStage};
use crate::train::{train_base, write_loss_csv};

const LOSS_WINDOW: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Record of one completed step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: String,
    pub config_hash: String,
    /// Step-specific arguments that change the outputs.
    pub args: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepStatus {
    Ran,
    Skipped,
}

/// An experiment bound to its output directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    hash: String,
}

fn hash_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(sha256_hex(&fs::read(path)?))
}

impl Run {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.out_dir.clone();
        fs::create_dir_all(&dir)?;
        let hash = cfg.hash();
        Ok(Self { cfg, dir, hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn manifest_path(&self, step: &str) -> PathBuf {
        self.path(&format!("manifest.{step}.json"))
    }

    fn hashes(&self, names: &[String]) -> Result<Vec<FileHash>> {
        names
            .iter()
            .map(|n| {
                Ok(FileHash {
                    path: n.clone(),
                    sha256: hash_file(&self.path(n))?,
                })
            })
            .collect()
    }

    fn up_to_date(&self, step: &str, key: &str, args: &str, inputs: &[FileHash], outputs: &[String]) -> bool {
        let Ok(bytes) = fs::read(self.manifest_path(step)) else {
            return false;
        };
        let Ok(m) = serde_json::from_slice::<Manifest>(&bytes) else {
            return false;
        };
        if m.config_hash != key || m.args != args || m.inputs != inputs {
            return false;
        }
        let names: Vec<&str> = m.outputs.iter().map(|f| f.path.as_str()).collect();
        if names != outputs.iter().map(String::as_str).collect::<Vec<_>>() {
            return false;
        }
        m.outputs
            .iter()
            .all(|f| hash_file(&self.path(&f.path)).is_ok_and(|h| h == f.sha256))
    }

    /// Runs `body` unless a manifest shows the same inputs already produced these outputs.
    fn step<F>(&self, step: &str, key: &str, args: &str, inputs: &[String], outputs: &[String], body: F) -> Result<StepStatus>
    where
        F: FnOnce() -> Result<()>,
    {
        let input_hashes = self.hashes(inputs)?;
        if self.up_to_date(step, key, args, &input_hashes, outputs) {
            info!("{step}: up to date, skipping");
            return Ok(StepStatus::Skipped);
        }
        info!("{step}: running");
        let start = Instant::now();
        body()?;
        let manifest = Manifest {
            step: step.into(),
            config_hash: key.into(),
            args: args.into(),
            inputs: input_hashes,
            outputs: self.hashes(outputs)?,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        fs::write(self.manifest_path(step), serde_json::to_vec_pretty(&manifest)?)?;
        info!("{step}: done in {:.1}s", manifest.wall_time_s);
        Ok(StepStatus::Ran)
    }

    /// Loads a stage from the run directory and checks it belongs to this config.
    pub fn load_stage(&self, id: &str) -> Result<FlowStage> {
        let stage = FlowStage::load(&self.path(&format!("{id}.ckpt")))?;
        if stage.provenance.config_hash != self.hash {
            return Err(Error::Lineage(format!(
                "stage '{id}' was trained under config {} but the current config is {}",
                stage.provenance.config_hash, self.hash
            )));
        }
        Ok(stage)
    }

    pub fn load_pairs(&self, teacher_id: &str) -> Result<PairDataset> {
        let pairs = PairDataset::load(&self.path(&format!("pairs-{teacher_id}.bin")))?;
        if pairs.meta.config_hash != self.hash {
            return Err(Error::Lineage(format!(
                "pairs-{teacher_id}.bin was generated under config {} but the current config is {}",
                pairs.meta.config_hash, self.hash
            )));
        }
        if pairs.meta.stage_id != teacher_id {
            return Err(Error::Lineage(format!(
                "pairs-{teacher_id}.bin claims to come from stage '{}'",
                pairs.meta.stage_id
            )));
        }
        Ok(pairs)
    }

    fn conds(&self) -> ConditionDist {
        self.cfg.target.condition_dist()
    }

    pub fn train_base(&self) -> Result<StepStatus> {
        let outputs = vec!["v1.ckpt".to_string(), "v1.loss.csv".to_string()];
        self.step("train-base", &self.hash, "", &[], &outputs, || {
            let (stage, losses) = train_base(
                &self.cfg.target,
                self.cfg.net_config(),
                &self.cfg.base,
                self.cfg.pairs.alpha,
                self.cfg.seed,
                &self.hash,
            )?;
            stage.save(&self.path("v1.ckpt"))?;
            write_loss_csv(fs::File::create(self.path("v1.loss.csv"))?, &losses, LOSS_WINDOW)
        })
    }

    /// Pairs `(x0, T(x0 | c))` from stage `id`, sampled at that stage's guidance.
    pub fn gen_pairs(&self, id: &str) -> Result<StepStatus> {
        let inputs = vec![format!("{id}.ckpt")];
        let outputs = vec![format!("pairs-{id}.bin")];
        self.step(&format!("gen-pairs-{id}"), &self.hash, "", &inputs, &outputs, || {
            let stage = self.load_stage(id)?;
            let p = &self.cfg.pairs;
            let pairs = generate_pairs(
                &stage,
                &self.conds(),
                p.count,
                p.n_steps,
                stage.alpha,
                derive_named(self.cfg.seed, &format!("pairs-{id}")),
            )?;
            pairs.save(&self.path(&outputs[0]))
        })
    }

    /// Trains `v_{k+1}` from `v_k` and its pair file.
    pub fn reflow(&self, k: u32) -> Result<StepStatus> {
        if k == 0 || k >= self.cfg.k_max {
            return Err(Error::usage(format!(
                "reflow from v{k} is outside the chain v1..v{}",
                self.cfg.k_max
            )));
        }
        let from = format!("v{k}");
        let to = format!("v{}", k + 1);
        let inputs = vec![format!("{from}.ckpt"), format!("pairs-{from}.bin")];
        let outputs = vec![format!("{to}.ckpt"), format!("{to}.loss.csv")];
        self.step(&format!("reflow-{to}"), &self.hash, "", &inputs, &outputs, || {
            let teacher = self.load_stage(&from)?;
            let pairs = self.load_pairs(&from)?;
            let cfg = self.cfg.reflow.for_stage(k + 1);
            let (stage, losses) = reflow_step(&teacher, &pairs, &cfg, derive_named(self.cfg.seed, &format!("reflow-{to}")))
                .map_err(|e| Error::Stage {
                    stage: k + 1,
                    source: Box::new(e),
                })?;
            stage.save(&self.path(&outputs[0]))?;
            write_loss_csv(fs::File::create(self.path(&outputs[1]))?, &losses, LOSS_WINDOW)
        })
    }

    /// One-step student of flow stage `id`, trained on `pairs-{id}.bin`.
    pub fn distill(&self, id: &str) -> Result<StepStatus> {
        let inputs = vec![format!("{id}.ckpt"), format!("pairs-{id}.bin")];
        let outputs = vec![format!("{id}-distill.ckpt"), format!("{id}-distill.loss.csv")];
        self.step(&format!("distill-{id}"), &self.hash, "", &inputs, &outputs, || {
            let teacher = self.load_stage(id)?;
            let pairs = self.load_pairs(id)?;
            let d = &self.cfg.distill;
            let (stage, losses) = distill(
                &teacher,
                &pairs,
                &self.cfg.loss_schedule(),
                &d.train_config(),
                d.student_hidden.as_deref(),
                derive_named(self.cfg.seed, &format!("distill-{id}")),
            )?;
            stage.save(&self.path(&outputs[0]))?;
            write_loss_csv(fs::File::create(self.path(&outputs[1]))?, &losses, LOSS_WINDOW)
        })
    }

    pub fn flow_ids(&self) -> Vec<String> {
        (1..=self.cfg.k_max).map(|k| format!("v{k}")).collect()
    }

    /// The two distillation teachers: the base flow and the last reflowed flow.
    pub fn teacher_ids(&self) -> Vec<String> {
        vec!["v1".into(), format!("v{}", self.cfg.k_max)]
    }

    /// Metrics for every stage, the few-step and guidance tables and the property checks.
    pub fn eval(&self) -> Result<StepStatus> {
        let flows = self.flow_ids();
        let teachers = self.teacher_ids();
        let mut inputs: Vec<String> = flows.iter().map(|id| format!("{id}.ckpt")).collect();
        inputs.extend(teachers.iter().map(|id| format!("{id}-distill.ckpt")));
        let outputs: Vec<String> = [
            "metrics.csv",
            "metrics.json",
            "few_step.csv",
            "guidance_sweep.csv",
            "comparison.csv",
            "checks.json",
        ]
        .map(String::from)
        .to_vec();
        let key = self.cfg.eval_hash();
        self.step("eval", &key, "", &inputs, &outputs, || {
            let report = self.evaluate()?;
            let mut csv = Vec::new();
            write_metrics_csv(&mut csv, &report.records)?;
            fs::write(self.path("metrics.csv"), csv)?;
            fs::write(self.path("metrics.json"), serde_json::to_vec_pretty(&report.records)?)?;
            write_few_step_csv(fs::File::create(self.path("few_step.csv"))?, &report.few_step)?;
            write_guidance_csv(fs::File::create(self.path("guidance_sweep.csv"))?, &report.guidance)?;
            let cmp = comparison_rows(&comparison_records(&report.records, &teachers));
            write_comparison_csv(fs::File::create(self.path("comparison.csv"))?, &cmp)?;
            fs::write(self.path("checks.json"), serde_json::to_vec_pretty(&Checks::from_report(&report, &teachers))?)?;
            Ok(())
        })
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        let seeds = EvalSeeds::from_master(self.cfg.seed);
        let flows: Vec<FlowStage> = self.flow_ids().iter().map(|id| self.load_stage(id)).collect::<Result<_>>()?;
        let mut records = Vec::new();
        for stage in &flows {
            info!("eval: {}", stage.id);
            records.push(evaluate_stage(&self.cfg, stage, None, seeds)?);
        }
        for id in self.teacher_ids() {
            let student = self.load_stage(&format!("{id}-distill"))?;
            let teacher = flows.iter().find(|s| s.id == id).expect("teacher is in the chain");
            info!("eval: {}", student.id);
            records.push(evaluate_stage(&self.cfg, &student, Some(teacher), seeds)?);
        }
        let refs: Vec<&FlowStage> = flows.iter().collect();
        let few_step = few_step_table(&self.cfg, &refs, seeds)?;
        let guidance = guidance_sweep(&self.cfg, &flows[0], seeds)?;
        let mut marginal = Vec::new();
        let mut transport = Vec::new();
        for w in flows.windows(2) {
            let seed = derive_named(self.cfg.seed, &format!("check-{}-{}", w[0].id, w[1].id));
            marginal.push(marginal_check(&self.cfg, &w[0], &w[1], seed)?);
            transport.extend(transport_checks(&self.cfg, &w[0], &w[1], seed)?);
        }
        Ok(EvalReport {
            config_hash: self.hash.clone(),
            records,
            few_step,
            guidance,
            marginal,
            transport,
        })
    }

    /// Samples from stage `id`. Distilled stages always take one step.
    pub fn sample(&self, id: &str, n: usize, steps: usize, alpha: Option<f64>, condition: Option<usize>) -> Result<StepStatus> {
        let inputs = vec![format!("{id}.ckpt")];
        let outputs = vec![format!("samples-{id}.csv")];
        let args = format!("n={n} steps={steps} alpha={alpha:?} condition={condition:?}");
        self.step(&format!("sample-{id}"), &self.hash, &args, &inputs, &outputs, || {
            let stage = self.load_stage(id)?;
            let conds = self.condition_dist(condition)?;
            let alpha = alpha.unwrap_or(stage.alpha);
            let (x, c) = stage_samples(&stage, n, steps, alpha, &conds, derive_named(self.cfg.seed, &format!("sample-{id}")))?;
            write_samples_csv(fs::File::create(self.path(&outputs[0]))?, &x, &c, stage.net.state_dim())
        })
    }

    /// Full Euler paths of `n` trajectories as CSV and SVG.
    pub fn export_traj(&self, id: &str, n: usize, steps: usize, alpha: Option<f64>, condition: Option<usize>) -> Result<StepStatus> {
        let inputs = vec![format!("{id}.ckpt")];
        let outputs = vec![format!("traj-{id}.csv"), format!("traj-{id}.svg")];
        let args = format!("n={n} steps={steps} alpha={alpha:?} condition={condition:?}");
        self.step(&format!("export-traj-{id}"), &self.hash, &args, &inputs, &outputs, || {
            let stage = self.load_stage(id)?;
            stage.require_flow("trajectory export")?;
            let conds = self.condition_dist(condition)?;
            let alpha = alpha.unwrap_or(stage.alpha);
            let d = stage.net.state_dim();
            let (z0, c) = eval_inputs(d, n, &conds, derive_named(self.cfg.seed, &format!("traj-{id}")));
            let trajs = z0
                .chunks_exact(d)
                .zip(&c)
                .map(|(z, &ci)| stage.simulate(z, ci, steps, alpha))
                .collect::<Result<Vec<_>>>()?;
            write_trajectories_csv(fs::File::create(self.path(&outputs[0]))?, &trajs)?;
            fs::write(self.path(&outputs[1]), trajectories_svg(&trajs))?;
            Ok(())
        })
    }

    /// `n` target samples for every condition label.
    pub fn data_preview(&self, n: usize) -> Result<StepStatus> {
        let outputs = vec!["data-preview.csv".to_string()];
        self.step("data-preview", &self.hash, &format!("n={n}"), &[], &outputs, || {
            let spec = &self.cfg.target;
            let mut x = Vec::new();
            let mut c = Vec::new();
            for label in 1..=spec.num_labels() {
                x.extend(sample_target(spec, label, n, derive_named(self.cfg.seed, &format!("preview-{label}")))?);
                c.extend(std::iter::repeat_n(label, n));
            }
            write_samples_csv(fs::File::create(self.path(&outputs[0]))?, &x, &c, spec.dim())
        })
    }

    fn condition_dist(&self, condition: Option<usize>) -> Result<ConditionDist> {
        let labels = self.cfg.target.num_labels();
        match condition {
            None => Ok(self.conds()),
            Some(c) if (1..=labels).contains(&c) => Ok(ConditionDist::single(c, labels)),
            Some(c) => Err(Error::input(format!("condition {c} is not a label in 1..={labels}"))),
        }
    }

    /// Every stage in order; completed steps are skipped.
    pub fn pipeline(&self) -> Result<Vec<(String, StepStatus)>> {
        let mut log = Vec::new();
        log.push(("train-base".into(), self.train_base()?));
        for k in 1..self.cfg.k_max {
            log.push((format!("gen-pairs-v{k}"), self.gen_pairs(&format!("v{k}"))?));
            log.push((format!("reflow-v{}", k + 1), self.reflow(k)?));
        }
        let last = format!("v{}", self.cfg.k_max);
        log.push((format!("gen-pairs-{last}"), self.gen_pairs(&last)?));
        for id in self.teacher_ids() {
            log.push((format!("distill-{id}"), self.distill(&id)?));
        }
        log.push(("eval".into(), self.eval()?));
        Ok(log)
    }
}

/// Rows of the direct-versus-reflow table: the two teachers and their students.
fn comparison_records(records: &[MetricsRecord], teachers: &[String]) -> Vec<MetricsRecord> {
    let mut ids: Vec<String> = teachers.to_vec();
    ids.extend(teachers.iter().map(|t| format!("{t}-distill")));
    ids.iter()
        .filter_map(|id| records.iter().find(|r| &r.stage_id == id).cloned())
        .collect()
}

/// Pass/fail summary of the properties the pipeline is meant to exhibit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checks {
    /// `S(v2) < 0.7 S(v1)` and `S(v_{k+1}) <= 1.05 S(v_k)` for later stages.
    pub straightening: bool,
    pub straightness: Vec<(String, f64)>,
    pub marginal: bool,
    pub transport: bool,
    /// The reflowed teacher's student beats the base teacher's student on fidelity and energy distance.
    pub distill_fidelity: bool,
    pub distill_energy: bool,
    /// The last flow beats `v1` at one and two Euler steps.
    pub few_step: bool,
    pub report: EvalReport,
}

impl Checks {
    pub fn from_report(report: &EvalReport, teachers: &[String]) -> Self {
        let s: Vec<(String, f64)> = report
            .records
            .iter()
            .filter_map(|r| r.straightness.map(|v| (r.stage_id.clone(), v)))
            .collect();
        let straightening = s.windows(2).enumerate().all(|(i, w)| {
            if i == 0 {
                w[1].1 < 0.7 * w[0].1
            } else {
                w[1].1 <= 1.05 * w[0].1
            }
        }) && s.len() >= 2;
        let find = |id: &str| report.records.iter().find(|r| r.stage_id == id);
        let base = find(&format!("{}-distill", teachers[0]));
        let refl = find(&format!("{}-distill", teachers[1]));
        let (distill_fidelity, distill_energy) = match (base, refl) {
            (Some(b), Some(r)) => (
                matches!((r.coupling_fidelity, b.coupling_fidelity), (Some(x), Some(y)) if x < y),
                r.energy_distance < b.energy_distance,
            ),
            _ => (false, false),
        };
        let ed = |id: &str, n: usize| {
            report
                .few_step
                .iter()
                .find(|r| r.stage_id == id && r.n_steps == n)
                .map(|r| r.energy_distance)
        };
        let few_step = [1, 2].iter().all(|&n| match (ed(&teachers[1], n), ed(&teachers[0], n)) {
            (Some(a), Some(b)) => a < b,
            _ => false,
        });
        Self {
            straightening,
            straightness: s,
            marginal: !report.marginal.is_empty() && report.marginal.iter().all(|m| m.pass),
            transport: !report.transport.is_empty() && report.transport.iter().all(|t| t.pass),
            distill_fidelity,
            distill_energy,
            few_step,
            report: report.clone(),
        }
    }
}
