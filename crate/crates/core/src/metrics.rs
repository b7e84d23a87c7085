//! Evaluation: trajectory straightness, transport costs, two-sample distances
//! and teacher-student coupling fidelity.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{fill_gaussian, ConditionDist};
use crate::distill::{one_step_generate, SimilarityLoss};
use crate::error::{Error, Result};
use crate::flow::{euler_endpoints, euler_rows, SimError, VelocityField};
use crate::reflow::PairDataset;
use crate::rng::{derive, seeded};
use crate::stage::FlowStage;

/// Rows per block in pairwise kernels. Partial sums are combined in block order.
const BLOCK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cost {
    /// `|x1 - x0|^2`
    L2Sq,
    /// `|x1 - x0|`
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Noise and labels for evaluation row `index`; a pure function of `(seed, index)`.
pub fn eval_inputs(dim: usize, n: usize, conds: &ConditionDist, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut z0 = vec![0.0; n * dim];
    let mut c = Vec::with_capacity(n);
    for (i, row) in z0.chunks_exact_mut(dim).enumerate() {
        let mut rng = seeded(derive(seed, i as u64));
        fill_gaussian(&mut rng, row);
        c.push(conds.sample(&mut rng));
    }
    (z0, c)
}

/// Per-trajectory straightness: left-endpoint average over the Euler grid of
/// `|(z_1 - z_0) - v(z_t, t | c)|^2`, using the velocities that drove the simulation.
pub fn straightness_per_trajectory<F: VelocityField + ?Sized>(
    field: &F,
    z0: &[f64],
    c: &[usize],
    steps: usize,
    alpha: f64,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::input("straightness needs at least one step"));
    }
    let d = field.dim();
    if z0.len() != c.len() * d {
        return Err(Error::input("initial states do not match the field dimension"));
    }
    let chunk = crate::flow::SIM_CHUNK;
    let parts: Vec<Result<Vec<f64>>> = z0
        .par_chunks(chunk * d)
        .zip(c.par_chunks(chunk))
        .map(|(zc, cc)| {
            let path = euler_rows(field, zc, cc, steps, alpha, true).map_err(|e| match e {
                SimError::Row(f) => Error::Simulation { step: f.step },
                SimError::Other(e) => e,
            })?;
            let first = &path.states[0];
            let last = &path.states[steps];
            let rows = cc.len();
            let mut out = vec![0.0; rows];
            for v in &path.velocities {
                for r in 0..rows {
                    let mut s = 0.0;
                    for j in 0..d {
                        let k = r * d + j;
                        let dev = (last[k] - first[k]) - v[k];
                        s += dev * dev;
                    }
                    out[r] += s;
                }
            }
            for o in &mut out {
                *o /= steps as f64;
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(c.len());
    for p in parts {
        all.extend(p?);
    }
    Ok(all)
}

pub fn mean_and_se(values: &[f64]) -> Estimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Estimate {
        mean,
        std_err: (var / n).sqrt(),
    }
}

/// Monte-Carlo estimate of the straightness `S(Z)` of a continuous stage,
/// over `n_traj` trajectories from the Gaussian prior.
pub fn straightness(
    stage: &FlowStage,
    n_traj: usize,
    steps: usize,
    conds: &ConditionDist,
    alpha: f64,
    seed: u64,
) -> Result<Estimate> {
    stage.require_flow("straightness")?;
    if steps < 2 {
        return Err(Error::input("straightness needs N >= 2"));
    }
    if n_traj == 0 {
        return Err(Error::input("straightness needs at least one trajectory"));
    }
    let (z0, c) = eval_inputs(stage.net.state_dim(), n_traj, conds, seed);
    let per = straightness_per_trajectory(stage, &z0, &c, steps, alpha)?;
    Ok(mean_and_se(&per))
}

/// Mean of `cost(x1 - x0)` over the dataset.
pub fn transport_cost(pairs: &PairDataset, cost: Cost) -> f64 {
    let costs = per_pair_costs(&pairs.pairs.x0, &pairs.pairs.x1, pairs.pairs.dim, cost);
    costs.iter().sum::<f64>() / costs.len().max(1) as f64
}

pub fn per_pair_costs(x0: &[f64], x1: &[f64], dim: usize, cost: Cost) -> Vec<f64> {
    x0.chunks_exact(dim)
        .zip(x1.chunks_exact(dim))
        .map(|(a, b)| {
            let sq: f64 = a.iter().zip(b).map(|(u, v)| (v - u) * (v - u)).sum();
            match cost {
                Cost::L2Sq => sq,
                Cost::L2 => sq.sqrt(),
            }
        })
        .collect()
}

/// Percentile bootstrap interval for the mean, `(lower, upper)` at level `level`.
pub fn bootstrap_mean_interval(values: &[f64], reps: usize, level: f64, seed: u64) -> (f64, f64) {
    let n = values.len();
    let mut rng = seeded(seed);
    let mut means: Vec<f64> = (0..reps)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let lo = ((1.0 - level) / 2.0 * reps as f64).floor() as usize;
    let hi = (((1.0 + level) / 2.0 * reps as f64).ceil() as usize).min(reps) - 1;
    (means[lo], means[hi])
}

fn check_sets(a: &[f64], b: &[f64], dim: usize) -> Result<(usize, usize)> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::input(format!("sample sets are not multiples of dimension {dim}")));
    }
    let (n, m) = (a.len() / dim, b.len() / dim);
    if n == 0 || m == 0 {
        return Err(Error::input("sample sets must be nonempty"));
    }
    Ok((n, m))
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of `f(|a_i - b_j|^2)` over all pairs, or over `i != j` when `skip_diag`.
/// Computed in row blocks whose partial sums are added in block order.
fn pair_sum<F>(a: &[f64], b: &[f64], dim: usize, skip_diag: bool, f: F) -> f64
where
    F: Fn(f64) -> f64 + Sync,
{
    let m = b.len() / dim;
    let partials: Vec<f64> = a
        .par_chunks(BLOCK * dim)
        .enumerate()
        .map(|(blk, rows)| {
            let mut s = 0.0;
            for (r, ai) in rows.chunks_exact(dim).enumerate() {
                let i = blk * BLOCK + r;
                for j in 0..m {
                    if skip_diag && i == j {
                        continue;
                    }
                    s += f(sq_dist(ai, &b[j * dim..(j + 1) * dim]));
                }
            }
            s
        })
        .collect();
    partials.iter().sum()
}

/// Energy distance `2 E|a - b| - E|a - a'| - E|b - b'|` with U-statistic
/// within-set terms, not clipped. Singleton sets contribute no within term.
pub fn energy_distance_raw(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    let (n, m) = check_sets(a, b, dim)?;
    let cross = pair_sum(a, b, dim, false, f64::sqrt) / (n * m) as f64;
    let within = |s: &[f64], k: usize| {
        if k < 2 {
            0.0
        } else {
            pair_sum(s, s, dim, true, f64::sqrt) / (k * (k - 1)) as f64
        }
    };
    Ok(2.0 * cross - within(a, n) - within(b, m))
}

/// [`energy_distance_raw`] clipped at zero.
pub fn energy_distance(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    Ok(energy_distance_raw(a, b, dim)?.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled sample.
    Median,
}

/// Pooled points used by the median heuristic are capped at this many (the first ones).
pub const MEDIAN_HEURISTIC_CAP: usize = 2000;

/// Median of all pairwise distances among the (capped) pooled sample.
pub fn median_pairwise_distance(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    check_sets(a, b, dim)?;
    let pooled: Vec<&[f64]> = a
        .chunks_exact(dim)
        .chain(b.chunks_exact(dim))
        .take(MEDIAN_HEURISTIC_CAP)
        .collect();
    let mut d = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return Err(Error::input("median heuristic needs at least two points"));
    }
    d.sort_by(f64::total_cmp);
    let k = d.len();
    Ok(if k % 2 == 1 {
        d[k / 2]
    } else {
        0.5 * (d[k / 2 - 1] + d[k / 2])
    })
}

fn resolve_bandwidth(a: &[f64], b: &[f64], dim: usize, bw: Bandwidth) -> Result<f64> {
    let h = match bw {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Median => median_pairwise_distance(a, b, dim)?,
    };
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::input(format!("kernel bandwidth {h} must be positive")));
    }
    Ok(h)
}

/// Unbiased MMD^2 with kernel `exp(-|x - y|^2 / (2 h^2))`. May be slightly negative.
pub fn mmd_gaussian(a: &[f64], b: &[f64], dim: usize, bw: Bandwidth) -> Result<f64> {
    let (n, m) = check_sets(a, b, dim)?;
    if n < 2 || m < 2 {
        return Err(Error::input("unbiased MMD needs at least two samples per set"));
    }
    let h = resolve_bandwidth(a, b, dim, bw)?;
    let g = 1.0 / (2.0 * h * h);
    let k = |d2: f64| (-d2 * g).exp();
    let kaa = pair_sum(a, a, dim, true, k) / (n * (n - 1)) as f64;
    let kbb = pair_sum(b, b, dim, true, k) / (m * (m - 1)) as f64;
    let kab = pair_sum(a, b, dim, false, k) / (n * m) as f64;
    Ok(kaa + kbb - 2.0 * kab)
}

/// Biased (V-statistic) MMD^2; exactly zero up to rounding for identical sets.
pub fn mmd_gaussian_biased(a: &[f64], b: &[f64], dim: usize, bw: Bandwidth) -> Result<f64> {
    let (n, m) = check_sets(a, b, dim)?;
    let h = resolve_bandwidth(a, b, dim, bw)?;
    let g = 1.0 / (2.0 * h * h);
    let k = |d2: f64| (-d2 * g).exp();
    let kaa = pair_sum(a, a, dim, false, k) / (n * n) as f64;
    let kbb = pair_sum(b, b, dim, false, k) / (m * m) as f64;
    let kab = pair_sum(a, b, dim, false, k) / (n * m) as f64;
    Ok(kaa + kbb - 2.0 * kab)
}

/// Endpoints of a stage from shared inputs: Euler for flows, one step for students.
pub fn stage_endpoints(stage: &FlowStage, z0: &[f64], c: &[usize], steps: usize, alpha: f64) -> Result<Vec<f64>> {
    if stage.is_one_step() {
        one_step_generate(stage, z0, c)
    } else {
        euler_endpoints(stage, z0, c, steps, alpha)
    }
}

/// Mean similarity between the teacher's `teacher_steps`-step endpoint and the
/// student's one-step output on shared noise and conditions.
pub fn coupling_fidelity(
    teacher: &FlowStage,
    student: &FlowStage,
    loss: &SimilarityLoss,
    n: usize,
    teacher_steps: usize,
    conds: &ConditionDist,
    seed: u64,
) -> Result<f64> {
    teacher.require_flow("coupling fidelity teacher")?;
    student.require_one_step("coupling fidelity student")?;
    if n == 0 {
        return Err(Error::input("coupling fidelity needs n >= 1"));
    }
    let d = teacher.net.state_dim();
    loss.validate(d)?;
    let (z0, c) = eval_inputs(d, n, conds, seed);
    let t_end = euler_endpoints(teacher, &z0, &c, teacher_steps, teacher.alpha)?;
    let s_end = one_step_generate(student, &z0, &c)?;
    let total: f64 = t_end
        .chunks_exact(d)
        .zip(s_end.chunks_exact(d))
        .map(|(a, b)| loss.eval(a, b))
        .sum();
    Ok(total / n as f64)
}

/// One evaluation row per stage and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage_id: String,
    pub k: u32,
    pub role: String,
    pub seed: u64,
    pub n_samples: usize,
    pub n_traj: usize,
    pub n_steps: usize,
    pub alpha: f64,
    /// Undefined (None) for one-step stages.
    pub straightness: Option<f64>,
    pub straightness_se: Option<f64>,
    pub cost_l2sq: f64,
    pub cost_l2: f64,
    pub energy_distance: f64,
    pub mmd: f64,
    /// Only for distilled stages.
    pub coupling_fidelity: Option<f64>,
    pub noise_prior: String,
    pub condition_weights: Vec<f64>,
}

pub const METRICS_COLUMNS: &[&str] = &[
    "stage_id",
    "k",
    "role",
    "seed",
    "n_samples",
    "n_traj",
    "n_steps",
    "alpha",
    "straightness",
    "straightness_se",
    "cost_l2sq",
    "cost_l2",
    "energy_distance",
    "mmd",
    "coupling_fidelity",
    "noise_prior",
    "condition_weights",
];

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        let values = [
            Some(self.cost_l2sq),
            Some(self.cost_l2),
            Some(self.energy_distance),
            self.straightness,
            self.coupling_fidelity,
        ];
        if values.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) || !self.mmd.is_finite() {
            return Err(Error::input(format!("metrics for '{}' are not finite and non-negative", self.stage_id)));
        }
        Ok(())
    }

    fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let weights: Vec<String> = self.condition_weights.iter().map(|w| w.to_string()).collect();
        [
            self.stage_id.clone(),
            self.k.to_string(),
            self.role.clone(),
            self.seed.to_string(),
            self.n_samples.to_string(),
            self.n_traj.to_string(),
            self.n_steps.to_string(),
            self.alpha.to_string(),
            opt(self.straightness),
            opt(self.straightness_se),
            self.cost_l2sq.to_string(),
            self.cost_l2.to_string(),
            self.energy_distance.to_string(),
            self.mmd.to_string(),
            opt(self.coupling_fidelity),
            self.noise_prior.clone(),
            weights.join(";"),
        ]
        .join(",")
    }
}

pub fn write_metrics_csv<W: Write>(mut w: W, records: &[MetricsRecord]) -> Result<()> {
    writeln!(w, "{}", METRICS_COLUMNS.join(","))?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn read_metrics_json(bytes: &[u8]) -> Result<Vec<MetricsRecord>> {
    Ok(serde_json::from_slice(bytes)?)
}
