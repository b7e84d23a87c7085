//! Coupling generation from a trained flow and the reflow step that trains
//! the next flow on those deterministic pairs.
//!
//! Pair file layout, integers little-endian:
//!
//! ```text
//! b"RFPR" | u32 version | u32 meta_len | meta JSON
//!        | count x (f64 x d for x0, f64 x d for x1) | count x u32 condition
//! ```

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{fill_gaussian, ConditionDist, PairBatch};
use crate::error::{Error, Result};
use crate::flow::{euler_endpoints, flow_loss};
use crate::nn::{MlpVelocityNet, OptimizerState, NULL_CONDITION};
use crate::rng::{derive, derive_named, seeded};
use crate::stage::{sha256_hex, FlowStage, Provenance, StageRole};
use crate::train::{optimize, TrainConfig};

pub const PAIRS_MAGIC: &[u8; 4] = b"RFPR";
pub const PAIRS_VERSION: u32 = 1;

/// One training record drawn from a coupling.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingPair {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub condition: usize,
    pub k: u32,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub stage_id: String,
    pub stage_k: u32,
    pub stage_fingerprint: String,
    pub config_hash: String,
    pub n_steps: usize,
    pub alpha: f64,
    pub seed: u64,
    pub count: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub meta: PairMeta,
    pub pairs: PairBatch,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, i: usize) -> CouplingPair {
        CouplingPair {
            x0: self.pairs.x0_row(i).to_vec(),
            x1: self.pairs.x1_row(i).to_vec(),
            condition: self.pairs.cond[i],
            k: self.meta.stage_k,
            alpha: self.meta.alpha,
        }
    }

    /// Rows `idx` gathered into a batch.
    pub fn gather(&self, idx: &[usize]) -> PairBatch {
        let mut b = PairBatch::with_capacity(self.pairs.dim, idx.len());
        for &i in idx {
            b.x0.extend_from_slice(self.pairs.x0_row(i));
            b.x1.extend_from_slice(self.pairs.x1_row(i));
            b.cond.push(self.pairs.cond[i]);
        }
        b
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta)?;
        let d = self.pairs.dim;
        let n = self.len();
        let mut out = Vec::with_capacity(12 + json.len() + n * (16 * d + 4));
        out.extend_from_slice(PAIRS_MAGIC);
        out.extend_from_slice(&PAIRS_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for i in 0..n {
            for v in self.pairs.x0_row(i).iter().chain(self.pairs.x1_row(i)) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &c in &self.pairs.cond {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        if bytes.len() < 12 || &bytes[0..4] != PAIRS_MAGIC {
            return Err(bad("not a pair dataset (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != PAIRS_VERSION {
            return Err(bad(format!("unsupported pair file version {version}")));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta_bytes = bytes.get(12..12 + mlen).ok_or_else(|| bad("truncated metadata".into()))?;
        let meta: PairMeta = serde_json::from_slice(meta_bytes).map_err(|e| bad(format!("metadata: {e}")))?;
        let (n, d) = (meta.count, meta.dim);
        let body = &bytes[12 + mlen..];
        if body.len() != n * (16 * d + 4) {
            return Err(bad(format!("expected {} payload bytes, found {}", n * (16 * d + 4), body.len())));
        }
        let (floats, conds) = body.split_at(n * 16 * d);
        let mut pairs = PairBatch::with_capacity(d, n);
        for rec in floats.chunks_exact(16 * d) {
            let vals = rec.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
            for (j, v) in vals.enumerate() {
                if j < d {
                    pairs.x0.push(v);
                } else {
                    pairs.x1.push(v);
                }
            }
        }
        pairs.cond = conds
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        Ok(Self { meta, pairs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?, &path.display().to_string())
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

/// Noise and labels for pair `index`; depends only on `(seed, index)`.
fn pair_seed_draw(seed: u64, index: usize, conds: &ConditionDist, x0: &mut [f64]) -> usize {
    let mut rng = seeded(derive(seed, index as u64));
    fill_gaussian(&mut rng, x0);
    conds.sample(&mut rng)
}

/// Simulates `count` pairs `(x0, T(x0 | c))` with `n_steps` Euler steps at guidance `alpha`.
pub fn generate_pairs(
    stage: &FlowStage,
    conds: &ConditionDist,
    count: usize,
    n_steps: usize,
    alpha: f64,
    seed: u64,
) -> Result<PairDataset> {
    stage.require_flow("pair generation")?;
    if count == 0 {
        return Err(Error::input("pair count must be >= 1"));
    }
    let d = stage.net.state_dim();
    let mut x0 = vec![0.0; count * d];
    let mut cond = Vec::with_capacity(count);
    for (i, row) in x0.chunks_exact_mut(d).enumerate() {
        cond.push(pair_seed_draw(seed, i, conds, row));
    }
    let x1 = euler_endpoints(stage, &x0, &cond, n_steps, alpha)?;
    let meta = PairMeta {
        stage_id: stage.id.clone(),
        stage_k: stage.k,
        stage_fingerprint: stage.fingerprint()?,
        config_hash: stage.provenance.config_hash.clone(),
        n_steps,
        alpha,
        seed,
        count,
        dim: d,
    };
    Ok(PairDataset {
        meta,
        pairs: PairBatch { dim: d, x0, x1, cond },
    })
}

/// Trains `v_{k+1}` on pairs generated by `teacher`, starting from the teacher's weights.
pub fn reflow_step(teacher: &FlowStage, pairs: &PairDataset, cfg: &TrainConfig, seed: u64) -> Result<(FlowStage, Vec<f64>)> {
    teacher.require_flow("reflow")?;
    if pairs.is_empty() {
        return Err(Error::input("reflow needs at least one pair"));
    }
    let teacher_fp = teacher.fingerprint()?;
    if pairs.meta.stage_fingerprint != teacher_fp {
        return Err(Error::Lineage(format!(
            "pairs were generated by stage '{}' ({}) but the teacher is '{}' ({})",
            pairs.meta.stage_id, pairs.meta.stage_fingerprint, teacher.id, teacher_fp
        )));
    }
    if pairs.pairs.dim != teacher.net.state_dim() {
        return Err(Error::input("pair dimension differs from the teacher"));
    }
    let mut net = MlpVelocityNet::from_params(teacher.net.config.clone(), teacher.ema.clone())?;
    let (losses, ema) = fit_on_pairs(&mut net, pairs, cfg, seed)?;
    let k = teacher.k + 1;
    let provenance = Provenance {
        config_hash: teacher.provenance.config_hash.clone(),
        seed,
        train_steps: cfg.steps as u64,
        teacher: Some(teacher_fp),
        pairs: Some(pairs.fingerprint()?),
    };
    // Guidance is baked into the pairs, so later flows sample at alpha = 1.
    let stage = FlowStage::from_parts(format!("v{k}"), k, StageRole::Flow, 1.0, net, ema, provenance)?;
    Ok((stage, losses))
}

fn fit_on_pairs(
    net: &mut MlpVelocityNet,
    pairs: &PairDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Vec<f64>, crate::nn::ParamStore)> {
    let mut opt = OptimizerState::new(cfg.adamw(), cfg.ema, &net.params)?;
    let mut rng = seeded(derive_named(seed, "reflow-batches"));
    let n = pairs.len();
    let losses = optimize(net, &mut opt, cfg.steps, |_, net, params| {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
        let mut batch = pairs.gather(&idx);
        if cfg.null_dropout > 0.0 {
            for c in &mut batch.cond {
                if rng.random::<f64>() < cfg.null_dropout {
                    *c = NULL_CONDITION;
                }
            }
        }
        flow_loss(net, params, &batch, &mut rng)
    })?;
    Ok((losses, opt.into_shadow()))
}

/// Pair-generation settings shared by every stage of a chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSettings {
    pub count: usize,
    pub n_steps: usize,
    /// Guidance used when the base flow generates pairs. Reflowed stages sample at 1.
    pub alpha: f64,
}

/// Output of one link in the reflow chain.
pub struct ChainLink {
    pub pairs: PairDataset,
    pub stage: FlowStage,
    pub losses: Vec<f64>,
}

/// Runs reflow from `base` up to `v_{k_max}`. `stage_cfgs[i]` trains `v_{i+2}`.
/// When `persist` is set, every pair file and checkpoint is written there.
pub fn run_reflow_chain(
    base: &FlowStage,
    k_max: u32,
    stage_cfgs: &[TrainConfig],
    pair_settings: &PairSettings,
    conds: &ConditionDist,
    seed: u64,
    persist: Option<&Path>,
) -> Result<Vec<ChainLink>> {
    if k_max < 2 {
        return Err(Error::input("k_max must be >= 2"));
    }
    if stage_cfgs.len() != (k_max - 1) as usize {
        return Err(Error::input(format!(
            "{} stage configs given for {} reflow steps",
            stage_cfgs.len(),
            k_max - 1
        )));
    }
    let mut links: Vec<ChainLink> = Vec::new();
    for (i, cfg) in stage_cfgs.iter().enumerate() {
        let k = 2 + i as u32;
        let teacher = links.last().map_or(base, |l| &l.stage);
        let link = (|| {
            let pairs = generate_pairs(
                teacher,
                conds,
                pair_settings.count,
                pair_settings.n_steps,
                teacher.alpha,
                derive_named(seed, &format!("pairs-{}", teacher.id)),
            )?;
            let (stage, losses) = reflow_step(teacher, &pairs, cfg, derive_named(seed, &format!("reflow-v{k}")))?;
            if let Some(dir) = persist {
                pairs.save(&dir.join(format!("pairs-{}.bin", teacher.id)))?;
                stage.save(&dir.join(format!("{}.ckpt", stage.id)))?;
            }
            Ok(ChainLink { pairs, stage, losses })
        })()
        .map_err(|e| Error::Stage {
            stage: k,
            source: Box::new(e),
        })?;
        links.push(link);
    }
    Ok(links)
}
