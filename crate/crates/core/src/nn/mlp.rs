//! Conditional MLP velocity network `v(x, t | c)`.
//!
//! Input row is `[x ; sin/cos time features ; condition embedding]`, followed by
//! SiLU hidden layers and a linear output of the same dimension as `x`.
//! Condition index 0 is the NULL (unconditional) token.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{ParamBlock, ParamStore};
use crate::nn::tape::{NodeId, Tape};
use crate::rng::seeded;

pub const NULL_CONDITION: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Dimension of the state `x` (and of the output).
    pub state_dim: usize,
    pub hidden: Vec<usize>,
    /// Number of condition labels, including the NULL token at index 0.
    pub vocab: usize,
    pub cond_dim: usize,
    /// Number of sinusoidal frequencies; the time embedding has twice as many features.
    pub time_freqs: usize,
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        self.state_dim + 2 * self.time_freqs + self.cond_dim
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.state_dim == 0 {
            problems.push("network.state_dim must be >= 1".to_string());
        }
        if self.vocab < 1 {
            problems.push("network.vocab must include the NULL token".to_string());
        }
        if self.hidden.iter().any(|&h| h == 0) {
            problems.push("network.hidden widths must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn layout(&self) -> Vec<ParamBlock> {
        let mut layout = vec![ParamBlock::new("cond_embed", self.vocab, self.cond_dim)];
        let mut fan_in = self.input_dim();
        let widths = self.hidden.iter().copied().chain(std::iter::once(self.state_dim));
        for (l, width) in widths.enumerate() {
            layout.push(ParamBlock::new(format!("w{l}"), fan_in, width));
            layout.push(ParamBlock::new(format!("b{l}"), 1, width));
            fan_in = width;
        }
        layout
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// Angular frequency of the `k`-th time feature.
fn time_frequency(k: usize) -> f64 {
    std::f64::consts::PI * (k + 1) as f64
}

pub fn time_features(t: f64, freqs: usize, out: &mut Vec<f64>) {
    for k in 0..freqs {
        let (s, c) = (time_frequency(k) * t).sin_cos();
        out.push(s);
        out.push(c);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpVelocityNet {
    pub config: NetConfig,
    pub params: ParamStore,
}

impl MlpVelocityNet {
    /// Random hidden layers (variance `1/fan_in`), zero output layer.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::zeros(config.layout());
        let mut rng: ChaCha8Rng = seeded(seed);
        let last_w = params.num_blocks() - 2;
        for block in 0..params.num_blocks() {
            let spec = params.layout()[block].clone();
            let scale = if spec.name == "cond_embed" {
                1.0
            } else if spec.name.starts_with('w') && block != last_w {
                (1.0 / spec.rows as f64).sqrt()
            } else {
                0.0
            };
            if scale > 0.0 {
                for v in params.block_mut(block) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = scale * z;
                }
            }
        }
        Ok(Self { config, params })
    }

    /// Like [`init`](Self::init) but the output layer is random too. Used by
    /// gradient checks, where a zero last layer would hide most of the graph.
    pub fn init_dense(config: NetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::init(config, seed)?;
        let mut rng: ChaCha8Rng = seeded(seed ^ 0x5eed);
        for v in net.params.data_mut() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
        Ok(net)
    }

    pub fn from_params(config: NetConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        if params.layout() != config.layout().as_slice() {
            return Err(Error::input("parameter layout does not match network config"));
        }
        Ok(Self { config, params })
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    pub fn check_inputs(&self, x: &[f64], t: &[f64], c: &[usize]) -> Result<usize> {
        let d = self.config.state_dim;
        let n = t.len();
        if x.len() != n * d || c.len() != n {
            return Err(Error::input(format!(
                "batch shape mismatch: {} states of dim {d}, {} times, {} conditions",
                x.len() as f64 / d as f64,
                n,
                c.len()
            )));
        }
        if let Some(&bad) = c.iter().find(|&&ci| ci >= self.config.vocab) {
            return Err(Error::input(format!(
                "condition index {bad} out of range for vocabulary of {}",
                self.config.vocab
            )));
        }
        Ok(n)
    }

    /// Records the network on `tape` for a batch of rows using the tape's parameters.
    /// `x` is row-major `(n, state_dim)`.
    pub fn record(&self, tape: &mut Tape<'_>, x: &[f64], t: &[f64], c: &[usize]) -> Result<NodeId> {
        let n = self.check_inputs(x, t, c)?;
        let cfg = &self.config;
        let xs = tape.constant(n, cfg.state_dim, x.to_vec())?;
        let mut feats = Vec::with_capacity(n * 2 * cfg.time_freqs);
        for &ti in t {
            time_features(ti, cfg.time_freqs, &mut feats);
        }
        let ts = tape.constant(n, 2 * cfg.time_freqs, feats)?;
        let table = tape.param(0);
        let emb = tape.gather(table, c)?;
        let mut h = tape.concat(&[xs, ts, emb])?;
        let layers = cfg.num_layers();
        for l in 0..layers {
            let w = tape.param(1 + 2 * l);
            let b = tape.param(2 + 2 * l);
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            if l + 1 < layers {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }

    /// Batched evaluation with an explicit parameter set (e.g. EMA weights).
    pub fn forward_with(&self, params: &ParamStore, x: &[f64], t: &[f64], c: &[usize]) -> Result<Vec<f64>> {
        if !params.same_layout(&self.params) {
            return Err(Error::input("parameter layout does not match network"));
        }
        let mut tape = Tape::new(params);
        let out = self.record(&mut tape, x, t, c)?;
        Ok(tape.value(out).data.to_vec())
    }

    pub fn forward(&self, x: &[f64], t: &[f64], c: &[usize]) -> Result<Vec<f64>> {
        self.forward_with(&self.params, x, t, c)
    }
}
