//! One-step distillation: fit `x0 + v(x0, 0 | c)` to the teacher's endpoint.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::PairBatch;
use crate::error::{Error, Result};
use crate::flow::LossEval;
use crate::nn::{MlpVelocityNet, NetConfig, NodeId, OptimizerState, ParamStore, Tape};
use crate::reflow::PairDataset;
use crate::rng::{derive_named, seeded};
use crate::stage::{FlowStage, Provenance, StageRole};
use crate::train::{optimize, TrainConfig};

/// Similarity between a generated sample and its target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SimilarityLoss {
    /// Squared Euclidean distance.
    L2,
    /// Weighted sum over patch sizes of the squared distance between
    /// `p` x `p` patch means of `height` x `width` images. A patch size of 1
    /// must be present, which makes the loss zero only for identical inputs.
    MultiscalePatchL2 {
        height: usize,
        width: usize,
        patches: Vec<usize>,
        weights: Vec<f64>,
    },
}

impl SimilarityLoss {
    /// Patch sizes 1, 2 and 4 (those that divide the grid), equal weights.
    pub fn multiscale_for(height: usize, width: usize) -> Self {
        let patches: Vec<usize> = [1, 2, 4]
            .into_iter()
            .filter(|p| height % p == 0 && width % p == 0)
            .collect();
        let weights = vec![1.0; patches.len()];
        SimilarityLoss::MultiscalePatchL2 {
            height,
            width,
            patches,
            weights,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            SimilarityLoss::L2 => Ok(()),
            SimilarityLoss::MultiscalePatchL2 {
                height,
                width,
                patches,
                weights,
            } => {
                if height * width != dim {
                    return Err(Error::input(format!(
                        "patch loss grid {height}x{width} does not match dimension {dim}"
                    )));
                }
                if patches.len() != weights.len() || !patches.contains(&1) {
                    return Err(Error::input("patch loss needs one weight per patch size and patch size 1"));
                }
                if weights.iter().any(|&w| !(w > 0.0)) {
                    return Err(Error::input("patch loss weights must be positive"));
                }
                if patches.iter().any(|&p| p == 0 || height % p != 0 || width % p != 0) {
                    return Err(Error::input("patch sizes must divide the grid"));
                }
                Ok(())
            }
        }
    }

    /// Direct evaluation on one pair of vectors.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        match self {
            SimilarityLoss::L2 => diff.iter().map(|v| v * v).sum(),
            SimilarityLoss::MultiscalePatchL2 {
                height,
                width,
                patches,
                weights,
            } => patches
                .iter()
                .zip(weights)
                .map(|(&p, &w)| {
                    let (ph, pw) = (height / p, width / p);
                    let mut pooled = vec![0.0; ph * pw];
                    for i in 0..*height {
                        for j in 0..*width {
                            pooled[(i / p) * pw + j / p] += diff[i * width + j];
                        }
                    }
                    let inv = 1.0 / (p * p) as f64;
                    w * pooled.iter().map(|s| (s * inv).powi(2)).sum::<f64>()
                })
                .sum(),
        }
    }

    /// Batch-mean loss of the row-wise difference node `diff`.
    fn record(&self, tape: &mut Tape<'_>, diff: NodeId) -> Result<NodeId> {
        match self {
            SimilarityLoss::L2 => tape.mean_row_sq_norm(diff),
            SimilarityLoss::MultiscalePatchL2 {
                height,
                width,
                patches,
                weights,
            } => {
                let mut total: Option<NodeId> = None;
                for (&p, &w) in patches.iter().zip(weights) {
                    let pooled = if p == 1 { diff } else { tape.avg_pool(diff, *height, *width, p)? };
                    let term = tape.mean_row_sq_norm(pooled)?;
                    let term = tape.scale(term, w);
                    total = Some(match total {
                        None => term,
                        Some(acc) => tape.add(acc, term)?,
                    });
                }
                total.ok_or_else(|| Error::input("patch loss without scales"))
            }
        }
    }
}

/// One phase of a distillation schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPhase {
    pub loss: SimilarityLoss,
    pub steps: usize,
}

/// Mean over the batch of `D(x1, x0 + v(x0, 0 | c))` and its gradient.
pub fn distill_loss(student: &MlpVelocityNet, params: &ParamStore, batch: &PairBatch, loss: &SimilarityLoss) -> Result<LossEval> {
    let n = batch.validate()?;
    if batch.dim != student.state_dim() {
        return Err(Error::input(format!(
            "pairs have dim {} but the student expects {}",
            batch.dim,
            student.state_dim()
        )));
    }
    loss.validate(batch.dim)?;
    let t = vec![0.0; n];
    let mut tape = Tape::new(params);
    let v = student.record(&mut tape, &batch.x0, &t, &batch.cond)?;
    // x0 + v - x1 = v - (x1 - x0)
    let disp: Vec<f64> = batch.x1.iter().zip(&batch.x0).map(|(b, a)| b - a).collect();
    let disp = tape.constant(n, batch.dim, disp)?;
    let diff = tape.sub(v, disp)?;
    let l = loss.record(&mut tape, diff)?;
    Ok(LossEval {
        loss: tape.scalar(l),
        grads: tape.backward(l)?,
    })
}

/// Student architecture: the teacher's unless `hidden` overrides the widths.
pub fn student_net(teacher: &FlowStage, hidden: Option<&[usize]>, seed: u64) -> Result<MlpVelocityNet> {
    let Some(hidden) = hidden.filter(|h| *h != teacher.net.config.hidden.as_slice()) else {
        return MlpVelocityNet::from_params(teacher.net.config.clone(), teacher.ema.clone());
    };
    // Wider or deeper student: fresh init, then copy every block whose shape matches.
    let cfg = NetConfig {
        hidden: hidden.to_vec(),
        ..teacher.net.config.clone()
    };
    let mut net = MlpVelocityNet::init(cfg, seed)?;
    for b in 0..net.params.num_blocks() {
        let spec = net.params.layout()[b].clone();
        if let Some(tb) = teacher.ema.block_index(&spec.name) {
            if teacher.ema.layout()[tb] == spec {
                net.params.block_mut(b).copy_from_slice(teacher.ema.block(tb));
            }
        }
    }
    Ok(net)
}

/// Distills `teacher` into a one-step stage using the given loss schedule.
pub fn distill(
    teacher: &FlowStage,
    pairs: &PairDataset,
    schedule: &[LossPhase],
    cfg: &TrainConfig,
    student_hidden: Option<&[usize]>,
    seed: u64,
) -> Result<(FlowStage, Vec<f64>)> {
    teacher.require_flow("distillation teacher")?;
    if pairs.is_empty() {
        return Err(Error::input("distillation needs at least one pair"));
    }
    let teacher_fp = teacher.fingerprint()?;
    if pairs.meta.stage_fingerprint != teacher_fp {
        return Err(Error::Lineage(format!(
            "pairs were generated by stage '{}' but the teacher is '{}'",
            pairs.meta.stage_id, teacher.id
        )));
    }
    for phase in schedule {
        phase.loss.validate(pairs.pairs.dim)?;
    }
    let mut net = student_net(teacher, student_hidden, derive_named(seed, "student-init"))?;
    let mut opt = OptimizerState::new(cfg.adamw(), cfg.ema, &net.params)?;
    let mut rng = seeded(derive_named(seed, "distill-batches"));
    let n = pairs.len();
    let mut losses = Vec::new();
    for phase in schedule {
        let phase_losses = optimize(&mut net, &mut opt, phase.steps, |_, net, params| {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
            distill_loss(net, params, &pairs.gather(&idx), &phase.loss)
        })?;
        losses.extend(phase_losses);
    }
    let provenance = Provenance {
        config_hash: teacher.provenance.config_hash.clone(),
        seed,
        train_steps: schedule.iter().map(|p| p.steps as u64).sum(),
        teacher: Some(teacher_fp),
        pairs: Some(pairs.fingerprint()?),
    };
    let stage = FlowStage::from_parts(
        format!("{}-distill", teacher.id),
        teacher.k,
        StageRole::OneStep { teacher_k: teacher.k },
        1.0,
        net,
        opt.into_shadow(),
        provenance,
    )?;
    Ok((stage, losses))
}

/// `z0 + v(z0, 0 | c)` for every row; no guidance.
pub fn one_step_generate(stage: &FlowStage, z0: &[f64], c: &[usize]) -> Result<Vec<f64>> {
    stage.require_one_step("one-step generation")?;
    let t = vec![0.0; c.len()];
    let v = stage.forward(z0, &t, c)?;
    Ok(z0.iter().zip(&v).map(|(z, v)| z + v).collect())
}
