//! Shared optimization loop and the base-flow trainer.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::{make_training_batch_rng, TargetSpec};
use crate::error::{Error, Result};
use crate::flow::{flow_loss, LossEval};
use crate::nn::{AdamWConfig, MlpVelocityNet, NetConfig, OptimizerState, ParamStore};
use crate::rng::{derive_named, seeded};
use crate::stage::{FlowStage, Provenance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub ema: f64,
    #[serde(default)]
    pub null_dropout: f64,
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn problems(&self, section: &str) -> Vec<String> {
        let mut p = Vec::new();
        if self.batch_size == 0 {
            p.push(format!("{section}.batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            p.push(format!("{section}.lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema) {
            p.push(format!("{section}.ema must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.null_dropout) {
            p.push(format!("{section}.null_dropout must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            p.push(format!("{section}.weight_decay must be >= 0"));
        }
        p
    }
}

/// Runs `steps` AdamW updates on `net.params`, keeping the EMA in `opt`.
/// `loss_fn` receives the step index and current raw parameters.
pub fn optimize<F>(net: &mut MlpVelocityNet, opt: &mut OptimizerState, steps: usize, mut loss_fn: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &MlpVelocityNet, &ParamStore) -> Result<LossEval>,
{
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let eval = loss_fn(step, net, &net.params)?;
        if !eval.loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss is {}", eval.loss),
            });
        }
        let mut params = std::mem::replace(&mut net.params, ParamStore::zeros(Vec::new()));
        let r = opt.adamw_step(&mut params, &eval.grads);
        net.params = params;
        r.map_err(|e| match e {
            Error::NonFiniteGradient { index } => Error::Training {
                step,
                reason: format!("non-finite gradient at parameter {index}"),
            },
            other => other,
        })?;
        opt.ema_update(&net.params);
        losses.push(eval.loss);
    }
    Ok(losses)
}

/// Trains the base flow `v_1` on the independent coupling of prior and target.
pub fn train_base(
    spec: &TargetSpec,
    net_config: NetConfig,
    cfg: &TrainConfig,
    alpha: f64,
    seed: u64,
    config_hash: &str,
) -> Result<(FlowStage, Vec<f64>)> {
    let mut net = MlpVelocityNet::init(net_config, derive_named(seed, "init"))?;
    let mut opt = OptimizerState::new(cfg.adamw(), cfg.ema, &net.params)?;
    let mut rng = seeded(derive_named(seed, "batches"));
    let losses = optimize(&mut net, &mut opt, cfg.steps, |_, net, params| {
        let batch = make_training_batch_rng(spec, cfg.batch_size, cfg.null_dropout, &mut rng)?;
        flow_loss(net, params, &batch, &mut rng)
    })?;
    let ema = opt.into_shadow();
    let provenance = Provenance {
        config_hash: config_hash.to_string(),
        seed,
        train_steps: cfg.steps as u64,
        teacher: None,
        pairs: None,
    };
    let stage = FlowStage::from_parts("v1".into(), 1, crate::stage::StageRole::Flow, alpha, net, ema, provenance)?;
    Ok((stage, losses))
}

/// Loss log as CSV (`step,loss`), each row the mean over a window of steps.
pub fn write_loss_csv<W: Write>(mut w: W, losses: &[f64], window: usize) -> Result<()> {
    writeln!(w, "step,loss")?;
    let window = window.max(1);
    for (i, chunk) in losses.chunks(window).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        writeln!(w, "{},{}", (i * window + chunk.len()), mean)?;
    }
    Ok(())
}

/// Smoke check on a loss curve: the mean of the last quarter must not exceed
/// the mean of the third quarter by more than `tolerance` (relative).
pub fn tail_non_increasing(losses: &[f64], tolerance: f64) -> bool {
    let n = losses.len();
    if n < 4 {
        return true;
    }
    let q = n / 4;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let third = mean(&losses[n - 2 * q..n - q]);
    let last = mean(&losses[n - q..]);
    last <= third * (1.0 + tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_csv_windows() {
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &[1.0, 3.0, 5.0], 2).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss\n2,2\n3,5\n");
    }

    #[test]
    fn tail_check() {
        let decreasing: Vec<f64> = (0..100).map(|i| 1.0 / (1.0 + i as f64)).collect();
        assert!(tail_non_increasing(&decreasing, 0.0));
        let increasing: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert!(!tail_non_increasing(&increasing, 0.05));
    }

    #[test]
    fn config_problems_are_listed() {
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 0,
            lr: -1.0,
            weight_decay: 0.0,
            ema: 1.0,
            null_dropout: 0.0,
        };
        assert_eq!(cfg.problems("base").len(), 3);
    }
}
