//! Experiment configuration (TOML, single `[experiment]` root).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::TargetSpec;
use crate::distill::{LossPhase, SimilarityLoss};
use crate::error::{Error, Result};
use crate::nn::NetConfig;
use crate::reflow::PairSettings;
use crate::stage::sha256_hex;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSettings {
    pub hidden: Vec<usize>,
    pub cond_dim: usize,
    pub time_freqs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflowSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub ema: f64,
    pub null_dropout: f64,
    /// Learning-rate multiplier applied for each reflow beyond the first.
    pub lr_decay: f64,
}

impl ReflowSettings {
    /// Training settings for the step that produces `v_k` (k >= 2).
    pub fn for_stage(&self, k: u32) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr * self.lr_decay.powi(k as i32 - 2),
            weight_decay: self.weight_decay,
            ema: self.ema,
            null_dropout: self.null_dropout,
        }
    }
}

/// Similarity loss named in the schedule; `perceptual` resolves to the
/// multiscale patch loss on image targets and to plain L2 otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossName {
    L2,
    Perceptual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSettings {
    pub loss: LossName,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSettings {
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub ema: f64,
    pub schedule: Vec<PhaseSettings>,
    /// Hidden widths of the student; defaults to the teacher's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_hidden: Option<Vec<usize>>,
}

impl DistillSettings {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.schedule.iter().map(|p| p.steps).sum(),
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            ema: self.ema,
            null_dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Trajectories used to estimate straightness.
    pub n_traj: usize,
    /// Euler steps for straightness, endpoints and teacher samples.
    pub n_steps: usize,
    /// Samples for two-sample distances.
    pub n_samples: usize,
    /// Euler steps for the marginal-preservation check.
    pub marginal_steps: usize,
    /// Same-stage resample replicates that set the marginal noise floor.
    pub floor_replicates: usize,
    pub few_steps: Vec<usize>,
    pub guidance_sweep: Vec<f64>,
    pub bootstrap_reps: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_traj: 1000,
            n_steps: 25,
            n_samples: 5000,
            marginal_steps: 50,
            floor_replicates: 5,
            few_steps: vec![1, 2, 4],
            guidance_sweep: vec![1.0, 1.5, 2.0, 3.0, 4.0],
            bootstrap_reps: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub k_max: u32,
    pub target: TargetSpec,
    pub network: NetworkSettings,
    pub base: TrainConfig,
    pub pairs: PairSettings,
    pub reflow: ReflowSettings,
    pub distill: DistillSettings,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            k_max: 2,
            target: TargetSpec::default(),
            network: NetworkSettings {
                hidden: vec![64, 64, 64],
                cond_dim: 8,
                time_freqs: 8,
            },
            base: TrainConfig {
                steps: 20_000,
                batch_size: 256,
                lr: 1e-3,
                weight_decay: 0.0,
                ema: 0.999,
                null_dropout: 0.1,
            },
            pairs: PairSettings {
                count: 50_000,
                n_steps: 25,
                alpha: 2.0,
            },
            reflow: ReflowSettings {
                steps: 10_000,
                batch_size: 256,
                lr: 1e-3,
                weight_decay: 0.0,
                ema: 0.999,
                null_dropout: 0.1,
                lr_decay: 0.1,
            },
            distill: DistillSettings {
                batch_size: 256,
                lr: 1e-3,
                weight_decay: 0.0,
                ema: 0.999,
                schedule: vec![
                    PhaseSettings {
                        loss: LossName::L2,
                        steps: 5_000,
                    },
                    PhaseSettings {
                        loss: LossName::Perceptual,
                        steps: 5_000,
                    },
                ],
                student_hidden: None,
            },
            eval: EvalSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        file.experiment.validate()?;
        Ok(file.experiment)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&ConfigFile {
            experiment: self.clone(),
        })
        .expect("config serializes to TOML")
    }

    /// Hash of everything that influences trained artifacts. The output
    /// directory and the evaluation settings are excluded.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = PathBuf::new();
        canon.eval = EvalSettings::default();
        sha256_hex(&serde_json::to_vec(&canon).expect("config serializes to JSON"))
    }

    /// Hash of the trained-artifact hash together with the evaluation settings.
    pub fn eval_hash(&self) -> String {
        let eval = serde_json::to_string(&self.eval).expect("config serializes to JSON");
        sha256_hex(format!("{}|{}", self.hash(), eval).as_bytes())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            state_dim: self.target.dim(),
            hidden: self.network.hidden.clone(),
            vocab: self.target.vocab(),
            cond_dim: self.network.cond_dim,
            time_freqs: self.network.time_freqs,
        }
    }

    pub fn resolve_loss(&self, name: LossName) -> SimilarityLoss {
        match (name, self.target.grid()) {
            (LossName::Perceptual, Some((h, w))) => SimilarityLoss::multiscale_for(h, w),
            _ => SimilarityLoss::L2,
        }
    }

    /// Loss used to report coupling fidelity: the last loss of the schedule.
    pub fn fidelity_loss(&self) -> SimilarityLoss {
        self.distill
            .schedule
            .last()
            .map_or(SimilarityLoss::L2, |p| self.resolve_loss(p.loss))
    }

    pub fn loss_schedule(&self) -> Vec<LossPhase> {
        self.distill
            .schedule
            .iter()
            .map(|p| LossPhase {
                loss: self.resolve_loss(p.loss),
                steps: p.steps,
            })
            .collect()
    }

    pub fn reflow_configs(&self) -> Vec<TrainConfig> {
        (2..=self.k_max).map(|k| self.reflow.for_stage(k)).collect()
    }

    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if let Err(Error::Config(mut t)) = self.target.validate() {
            p.append(&mut t);
        }
        if let Err(Error::Config(mut t)) = self.net_config().validate() {
            p.append(&mut t);
        }
        if self.k_max < 2 {
            p.push("k_max must be >= 2".into());
        }
        p.extend(self.base.problems("base"));
        p.extend(self.reflow.for_stage(2).problems("reflow"));
        if !(self.reflow.lr_decay > 0.0 && self.reflow.lr_decay <= 1.0) {
            p.push("reflow.lr_decay must be in (0, 1]".into());
        }
        p.extend(self.distill.train_config().problems("distill"));
        if self.distill.schedule.is_empty() {
            p.push("distill.schedule must have at least one phase".into());
        }
        if let Some(h) = &self.distill.student_hidden {
            if h.is_empty() || h.contains(&0) {
                p.push("distill.student_hidden widths must be >= 1".into());
            }
        }
        if self.pairs.count == 0 {
            p.push("pairs.count must be >= 1".into());
        }
        if self.pairs.n_steps == 0 {
            p.push("pairs.n_steps must be >= 1".into());
        }
        if !(self.pairs.alpha >= 0.0) || !self.pairs.alpha.is_finite() {
            p.push("pairs.alpha must be finite and >= 0".into());
        }
        let e = &self.eval;
        if e.n_traj == 0 || e.n_samples < 2 {
            p.push("eval.n_traj must be >= 1 and eval.n_samples >= 2".into());
        }
        if e.n_steps < 2 || e.marginal_steps < 1 {
            p.push("eval.n_steps must be >= 2 and eval.marginal_steps >= 1".into());
        }
        if e.floor_replicates == 0 || e.bootstrap_reps == 0 {
            p.push("eval.floor_replicates and eval.bootstrap_reps must be >= 1".into());
        }
        if e.few_steps.contains(&0) {
            p.push("eval.few_steps entries must be >= 1".into());
        }
        if e.guidance_sweep.iter().any(|a| !(*a >= 0.0)) {
            p.push("eval.guidance_sweep entries must be >= 0".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert!(text.starts_with("[experiment]"));
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.eval.n_samples = 100;
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.eval_hash(), b.eval_hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn stage_three_uses_smaller_rate() {
        let cfg = ExperimentConfig::default();
        let r2 = cfg.reflow.for_stage(2).lr;
        let r3 = cfg.reflow.for_stage(3).lr;
        assert!(r3 < r2);
        assert!((r3 - r2 * 0.1).abs() < 1e-15);
    }

    #[test]
    fn validation_reports_every_problem() {
        let mut cfg = ExperimentConfig::default();
        cfg.k_max = 1;
        cfg.base.batch_size = 0;
        cfg.pairs.count = 0;
        cfg.eval.few_steps = vec![0];
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 4, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn perceptual_resolves_by_target() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.resolve_loss(LossName::Perceptual), SimilarityLoss::L2);
        cfg.target = TargetSpec::grid_image_default();
        assert!(matches!(
            cfg.resolve_loss(LossName::Perceptual),
            SimilarityLoss::MultiscalePatchL2 { .. }
        ));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = ExperimentConfig::default().to_toml().replace("k_max = 2", "k_max = 2\nbogus = 1");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }
}
