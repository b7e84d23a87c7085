//! Synthetic conditional targets, the Gaussian noise prior, and training
//! batches drawn from the independent coupling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NULL_CONDITION;
use crate::rng::seeded;

/// Family of the target distribution and its parameters.
///
/// Labels are numbered from 1; label 0 is the NULL token and has no target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum TargetSpec {
    /// Isotropic Gaussian modes. `labels[i]` lists the modes selected by label `i + 1`.
    GaussianMixture {
        centers: Vec<Vec<f64>>,
        weights: Vec<f64>,
        stds: Vec<f64>,
        labels: Vec<Vec<usize>>,
    },
    /// Label 1 is the upper moon, label 2 the lower one. Points lie within
    /// `noise` of the unit arcs (uniform radial jitter), then are mapped by `2 (p - (0.5, 0.25))`.
    TwoMoons { noise: f64 },
    /// `cells` x `cells` board over `[-half_width, half_width]^2`; dark cells
    /// have even `row + col`. Label 1 keeps dark cells in the left half of the
    /// columns, label 2 the right half.
    Checkerboard { cells: usize, half_width: f64 },
    /// `height` x `width` grayscale images with one Gaussian blob. Label `i`
    /// places the blob near anchor `i - 1` of `classes` anchors spread on a ring.
    GridImage {
        height: usize,
        width: usize,
        classes: usize,
        blob_std: f64,
        jitter: f64,
        noise: f64,
    },
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec::six_mode_circle()
    }
}

impl TargetSpec {
    /// Six modes on a circle of radius 3; three labels, each selecting a pair of opposite modes.
    pub fn six_mode_circle() -> Self {
        let centers = (0..6)
            .map(|i| {
                let a = std::f64::consts::PI * i as f64 / 3.0;
                vec![3.0 * a.cos(), 3.0 * a.sin()]
            })
            .collect();
        TargetSpec::GaussianMixture {
            centers,
            weights: vec![1.0 / 6.0; 6],
            stds: vec![0.3; 6],
            labels: vec![vec![0, 3], vec![1, 4], vec![2, 5]],
        }
    }

    /// One-dimensional standard normal with a single label.
    pub fn standard_normal_1d() -> Self {
        TargetSpec::GaussianMixture {
            centers: vec![vec![0.0]],
            weights: vec![1.0],
            stds: vec![1.0],
            labels: vec![vec![0]],
        }
    }

    pub fn grid_image_default() -> Self {
        TargetSpec::GridImage {
            height: 8,
            width: 8,
            classes: 4,
            blob_std: 1.2,
            jitter: 0.5,
            noise: 0.05,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TargetSpec::GaussianMixture { centers, .. } => centers.first().map_or(0, Vec::len),
            TargetSpec::TwoMoons { .. } | TargetSpec::Checkerboard { .. } => 2,
            TargetSpec::GridImage { height, width, .. } => height * width,
        }
    }

    pub fn num_labels(&self) -> usize {
        match self {
            TargetSpec::GaussianMixture { labels, .. } => labels.len(),
            TargetSpec::TwoMoons { .. } | TargetSpec::Checkerboard { .. } => 2,
            TargetSpec::GridImage { classes, .. } => *classes,
        }
    }

    /// Vocabulary size including NULL.
    pub fn vocab(&self) -> usize {
        self.num_labels() + 1
    }

    /// `(height, width)` when samples are images.
    pub fn grid(&self) -> Option<(usize, usize)> {
        match self {
            TargetSpec::GridImage { height, width, .. } => Some((*height, *width)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match self {
            TargetSpec::GaussianMixture {
                centers,
                weights,
                stds,
                labels,
            } => {
                if centers.is_empty() {
                    problems.push("target.centers must be nonempty".into());
                }
                let d = self.dim();
                if d == 0 || centers.iter().any(|c| c.len() != d) {
                    problems.push("target.centers must share one nonzero dimension".into());
                }
                if weights.len() != centers.len() || stds.len() != centers.len() {
                    problems.push("target.weights/stds must have one entry per center".into());
                }
                if weights.iter().any(|&w| !(w > 0.0)) {
                    problems.push("target.weights must be positive".into());
                }
                if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    problems.push("target.weights must sum to 1".into());
                }
                if stds.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
                    problems.push("target.stds must be finite and >= 0".into());
                }
                if labels.is_empty() {
                    problems.push("target.labels must define at least one label".into());
                }
                for (i, modes) in labels.iter().enumerate() {
                    if modes.is_empty() || modes.iter().any(|&m| m >= centers.len()) {
                        problems.push(format!("target.labels[{i}] must select existing modes"));
                    }
                }
            }
            TargetSpec::TwoMoons { noise } => {
                if !(*noise >= 0.0 && *noise < 1.0) {
                    problems.push("target.noise must be in [0, 1)".into());
                }
            }
            TargetSpec::Checkerboard { cells, half_width } => {
                if *cells < 2 || cells % 2 != 0 {
                    problems.push("target.cells must be even and >= 2".into());
                }
                if !(*half_width > 0.0) {
                    problems.push("target.half_width must be positive".into());
                }
            }
            TargetSpec::GridImage {
                height,
                width,
                classes,
                blob_std,
                jitter,
                noise,
            } => {
                if *height == 0 || *width == 0 {
                    problems.push("target.height/width must be >= 1".into());
                }
                if *classes == 0 {
                    problems.push("target.classes must be >= 1".into());
                }
                if !(*blob_std > 0.0) || !(*jitter >= 0.0) || !(*noise >= 0.0) {
                    problems.push("target.blob_std must be > 0, jitter and noise >= 0".into());
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Probability of each label (index `i` is label `i + 1`) in the unconditional target.
    pub fn label_weights(&self) -> Vec<f64> {
        match self {
            TargetSpec::GaussianMixture { weights, labels, .. } => {
                let raw: Vec<f64> = labels
                    .iter()
                    .map(|modes| modes.iter().map(|&m| weights[m]).sum())
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|w| w / total).collect()
            }
            TargetSpec::Checkerboard { cells, .. } => {
                let half = cells / 2;
                let count = |left: bool| {
                    (0..*cells)
                        .flat_map(|r| (0..*cells).map(move |c| (r, c)))
                        .filter(|&(r, c)| (r + c) % 2 == 0 && (c < half) == left)
                        .count() as f64
                };
                let (l, r) = (count(true), count(false));
                vec![l / (l + r), r / (l + r)]
            }
            _ => vec![1.0 / self.num_labels() as f64; self.num_labels()],
        }
    }

    pub fn condition_dist(&self) -> ConditionDist {
        ConditionDist::new(self.label_weights())
    }

    fn check_label(&self, c: usize) -> Result<()> {
        if c == NULL_CONDITION {
            return Err(Error::usage("the NULL condition has no target distribution"));
        }
        if c > self.num_labels() {
            return Err(Error::input(format!(
                "condition {c} out of range (labels 1..={})",
                self.num_labels()
            )));
        }
        Ok(())
    }

    /// Appends one draw from the target conditioned on label `c` (already validated).
    fn draw(&self, c: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        match self {
            TargetSpec::GaussianMixture {
                centers,
                weights,
                stds,
                labels,
            } => {
                let modes = &labels[c - 1];
                let total: f64 = modes.iter().map(|&m| weights[m]).sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = *modes.last().unwrap();
                for &m in modes {
                    if u < weights[m] {
                        pick = m;
                        break;
                    }
                    u -= weights[m];
                }
                for &mu in &centers[pick] {
                    let z: f64 = StandardNormal.sample(rng);
                    out.push(mu + stds[pick] * z);
                }
            }
            TargetSpec::TwoMoons { noise } => {
                let theta = rng.random::<f64>() * std::f64::consts::PI;
                let r = 1.0 + noise * (2.0 * rng.random::<f64>() - 1.0);
                let (px, py) = if c == 1 {
                    (r * theta.cos(), r * theta.sin())
                } else {
                    (1.0 - r * theta.cos(), 0.5 - r * theta.sin())
                };
                out.push(2.0 * (px - 0.5));
                out.push(2.0 * (py - 0.25));
            }
            TargetSpec::Checkerboard { cells, half_width } => loop {
                let x = (2.0 * rng.random::<f64>() - 1.0) * half_width;
                let y = (2.0 * rng.random::<f64>() - 1.0) * half_width;
                if checkerboard_label(*cells, *half_width, x, y) == Some(c) {
                    out.push(x);
                    out.push(y);
                    break;
                }
            },
            TargetSpec::GridImage {
                height,
                width,
                classes,
                blob_std,
                jitter,
                noise,
            } => {
                let (ay, ax) = grid_anchor(*height, *width, *classes, c - 1);
                let zy: f64 = StandardNormal.sample(rng);
                let zx: f64 = StandardNormal.sample(rng);
                let (cy, cx) = (ay + jitter * zy, ax + jitter * zx);
                let denom = 2.0 * blob_std * blob_std;
                for i in 0..*height {
                    for j in 0..*width {
                        let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                        let z: f64 = StandardNormal.sample(rng);
                        out.push(2.0 * (-d2 / denom).exp() - 1.0 + noise * z);
                    }
                }
            }
        }
    }

    /// Membership predicate for families with bounded support. Always true for
    /// Gaussian mixtures and images.
    pub fn contains(&self, c: usize, x: &[f64]) -> bool {
        match self {
            TargetSpec::TwoMoons { noise } => {
                let (px, py) = (x[0] / 2.0 + 0.5, x[1] / 2.0 + 0.25);
                let (qx, qy) = if c == 1 { (px, py) } else { (1.0 - px, 0.5 - py) };
                qy >= -1e-12 && ((qx * qx + qy * qy).sqrt() - 1.0).abs() <= noise + 1e-12
            }
            TargetSpec::Checkerboard { cells, half_width } => {
                checkerboard_label(*cells, *half_width, x[0], x[1]) == Some(c)
            }
            _ => x.iter().all(|v| v.is_finite()),
        }
    }
}

fn checkerboard_label(cells: usize, half_width: f64, x: f64, y: f64) -> Option<usize> {
    let size = 2.0 * half_width / cells as f64;
    let col = ((x + half_width) / size).floor();
    let row = ((y + half_width) / size).floor();
    if col < 0.0 || row < 0.0 || col >= cells as f64 || row >= cells as f64 {
        return None;
    }
    let (row, col) = (row as usize, col as usize);
    if (row + col) % 2 != 0 {
        return None;
    }
    Some(if col < cells / 2 { 1 } else { 2 })
}

fn grid_anchor(height: usize, width: usize, classes: usize, class: usize) -> (f64, f64) {
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let radius = 0.3 * height.min(width) as f64;
    let a = 2.0 * std::f64::consts::PI * class as f64 / classes as f64 + std::f64::consts::FRAC_PI_4;
    (cy + radius * a.sin(), cx + radius * a.cos())
}

/// Distribution over non-NULL labels; `weights[i]` is the probability of label `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionDist {
    weights: Vec<f64>,
}

impl ConditionDist {
    pub fn new(weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
        }
    }

    /// Always returns `label`.
    pub fn single(label: usize, num_labels: usize) -> Self {
        let mut w = vec![0.0; num_labels];
        w[label - 1] = 1.0;
        Self { weights: w }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let mut u = rng.random::<f64>();
        for (i, &w) in self.weights.iter().enumerate() {
            if u < w {
                return i + 1;
            }
            u -= w;
        }
        // Rounding left u slightly above zero; take the last label with mass.
        self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0) + 1
    }
}

/// `n` i.i.d. standard Gaussian vectors in `R^d`, row-major.
pub fn sample_prior(d: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn fill_gaussian(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

/// `n` i.i.d. draws from the target conditioned on label `c`, row-major.
pub fn sample_target(spec: &TargetSpec, c: usize, n: usize, seed: u64) -> Result<Vec<f64>> {
    spec.check_label(c)?;
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(n * spec.dim());
    for _ in 0..n {
        spec.draw(c, &mut rng, &mut out);
    }
    Ok(out)
}

/// One target draw per entry of `conds`, all from a single seeded stream.
pub fn sample_target_for(spec: &TargetSpec, conds: &[usize], seed: u64) -> Result<Vec<f64>> {
    for &c in conds {
        spec.check_label(c)?;
    }
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(conds.len() * spec.dim());
    for &c in conds {
        spec.draw(c, &mut rng, &mut out);
    }
    Ok(out)
}

/// Pooled draws: label from the label weights, then the conditional target.
pub fn sample_unconditional(spec: &TargetSpec, n: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let dist = spec.condition_dist();
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(n * spec.dim());
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = dist.sample(&mut rng);
        spec.draw(c, &mut rng, &mut out);
        labels.push(c);
    }
    (out, labels)
}

/// A batch of coupling pairs stored column-flat: rows of `x0`, rows of `x1`, and one condition each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairBatch {
    pub dim: usize,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub cond: Vec<usize>,
}

impl PairBatch {
    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Self {
            dim,
            x0: Vec::with_capacity(n * dim),
            x1: Vec::with_capacity(n * dim),
            cond: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }

    pub fn x0_row(&self, i: usize) -> &[f64] {
        &self.x0[i * self.dim..(i + 1) * self.dim]
    }

    pub fn x1_row(&self, i: usize) -> &[f64] {
        &self.x1[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<usize> {
        let n = self.cond.len();
        if n == 0 {
            return Err(Error::input("empty batch"));
        }
        if self.x0.len() != n * self.dim || self.x1.len() != n * self.dim {
            return Err(Error::input("pair rows do not match batch dimension"));
        }
        Ok(n)
    }
}

/// Draws a batch from the independent coupling `prior x target`.
///
/// The condition is drawn from the label weights and the target is drawn
/// from that condition; afterwards the stored label is replaced by NULL with
/// probability `null_dropout`.
pub fn make_training_batch_rng(
    spec: &TargetSpec,
    batch: usize,
    null_dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    if !(0.0..1.0).contains(&null_dropout) {
        return Err(Error::input(format!("null dropout {null_dropout} outside [0, 1)")));
    }
    let d = spec.dim();
    let dist = spec.condition_dist();
    let mut out = PairBatch::with_capacity(d, batch);
    out.x0.resize(batch * d, 0.0);
    fill_gaussian(rng, &mut out.x0);
    for _ in 0..batch {
        let c = dist.sample(rng);
        spec.draw(c, rng, &mut out.x1);
        let stored = if null_dropout > 0.0 && rng.random::<f64>() < null_dropout {
            NULL_CONDITION
        } else {
            c
        };
        out.cond.push(stored);
    }
    Ok(out)
}

pub fn make_training_batch(spec: &TargetSpec, batch: usize, null_dropout: f64, seed: u64) -> Result<PairBatch> {
    make_training_batch_rng(spec, batch, null_dropout, &mut seeded(seed))
}
