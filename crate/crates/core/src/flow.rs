//! Rectified-flow mathematics: straight interpolation, the mean-square
//! objective, forward Euler simulation and classifier-free guidance.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::PairBatch;
use crate::error::{Error, Result};
use crate::nn::{MlpVelocityNet, ParamStore, Tape, NULL_CONDITION};

/// Rows per work item when simulations fan out across threads. Rows never
/// interact, so the split only affects scheduling, not results.
pub const SIM_CHUNK: usize = 256;

/// A conditional velocity field evaluated on batches of rows.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    /// `x` is row-major `(n, dim)`; `t` and `c` have one entry per row.
    fn velocity(&self, x: &[f64], t: &[f64], c: &[usize]) -> Result<Vec<f64>>;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn velocity(&self, x: &[f64], t: &[f64], c: &[usize]) -> Result<Vec<f64>> {
        (**self).velocity(x, t, c)
    }
}

/// A network evaluated with a chosen parameter set.
pub struct NetField<'a> {
    pub net: &'a MlpVelocityNet,
    pub params: &'a ParamStore,
}

impl VelocityField for NetField<'_> {
    fn dim(&self) -> usize {
        self.net.state_dim()
    }

    fn velocity(&self, x: &[f64], t: &[f64], c: &[usize]) -> Result<Vec<f64>> {
        self.net.forward_with(self.params, x, t, c)
    }
}

/// Closure-backed field: `f(x_row, t, c, out_row)`.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64, usize, &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], f64, usize, &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: &[f64], c: &[usize]) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut out = vec![0.0; x.len()];
        for (i, (row, o)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
            (self.f)(row, t[i], c[i], o);
        }
        Ok(out)
    }
}

/// Returns `(x_t, dx_t/dt)` for `x_t = (1 - t) x0 + t x1`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if x0.len() != x1.len() {
        return Err(Error::input(format!(
            "interpolation endpoints have dims {} and {}",
            x0.len(),
            x1.len()
        )));
    }
    let xt = x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    let dx = x0.iter().zip(x1).map(|(a, b)| b - a).collect();
    Ok((xt, dx))
}

/// `alpha * v(x, t | c) + (1 - alpha) * v(x, t | NULL)`; exactly `v(x, t | c)` when `alpha == 1`.
pub fn guided_velocity<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: &[f64],
    c: &[usize],
    alpha: f64,
) -> Result<Vec<f64>> {
    let cond = field.velocity(x, t, c)?;
    if alpha == 1.0 {
        return Ok(cond);
    }
    let nulls = vec![NULL_CONDITION; c.len()];
    let uncond = field.velocity(x, t, &nulls)?;
    Ok(cond
        .iter()
        .zip(&uncond)
        .map(|(vc, vn)| alpha * vc + (1.0 - alpha) * vn)
        .collect())
}

/// Result of the mean-square objective on one batch.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub grads: Vec<f64>,
}

/// Mean over the batch of `|(x1 - x0) - v(x_t, t | c)|^2` at the given times,
/// with its gradient with respect to `params`.
pub fn flow_loss_at(net: &MlpVelocityNet, params: &ParamStore, batch: &PairBatch, t: &[f64]) -> Result<LossEval> {
    let n = batch.validate()?;
    if t.len() != n {
        return Err(Error::input("one time per pair required"));
    }
    if batch.dim != net.state_dim() {
        return Err(Error::input(format!(
            "pairs have dim {} but the network expects {}",
            batch.dim,
            net.state_dim()
        )));
    }
    let d = batch.dim;
    let mut xt = Vec::with_capacity(n * d);
    let mut target = Vec::with_capacity(n * d);
    for i in 0..n {
        let ti = t[i];
        for (a, b) in batch.x0_row(i).iter().zip(batch.x1_row(i)) {
            xt.push((1.0 - ti) * a + ti * b);
            target.push(b - a);
        }
    }
    let mut tape = Tape::new(params);
    let v = net.record(&mut tape, &xt, t, &batch.cond)?;
    let target = tape.constant(n, d, target)?;
    let resid = tape.sub(target, v)?;
    let loss = tape.mean_row_sq_norm(resid)?;
    Ok(LossEval {
        loss: tape.scalar(loss),
        grads: tape.backward(loss)?,
    })
}

/// [`flow_loss_at`] with one uniform time per pair drawn from `rng`.
pub fn flow_loss(net: &MlpVelocityNet, params: &ParamStore, batch: &PairBatch, rng: &mut ChaCha8Rng) -> Result<LossEval> {
    let t: Vec<f64> = (0..batch.len()).map(|_| rng.random::<f64>()).collect();
    flow_loss_at(net, params, batch, &t)
}

/// Discrete Euler path of one simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub condition: usize,
    pub alpha: f64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn start(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn end(&self) -> &[f64] {
        self.states.last().unwrap()
    }
}

/// Failure inside a batched simulation: which row and which step.
#[derive(Clone, Copy, Debug)]
pub(crate) struct RowFailure {
    pub row: usize,
    pub step: usize,
}

pub(crate) enum SimError {
    Row(RowFailure),
    Other(Error),
}

impl From<Error> for SimError {
    fn from(e: Error) -> Self {
        SimError::Other(e)
    }
}

/// States and velocities along a batch of Euler paths.
pub(crate) struct BatchPath {
    /// `states[i]` holds all rows at time `i / N`.
    pub states: Vec<Vec<f64>>,
    /// `velocities[i]` is the guided velocity used for step `i`.
    pub velocities: Vec<Vec<f64>>,
}

pub(crate) fn euler_rows<F: VelocityField + ?Sized>(
    field: &F,
    z0: &[f64],
    c: &[usize],
    steps: usize,
    alpha: f64,
    keep_path: bool,
) -> std::result::Result<BatchPath, SimError> {
    let d = field.dim();
    let n = c.len();
    let h = 1.0 / steps as f64;
    let mut z = z0.to_vec();
    let mut path = BatchPath {
        states: Vec::new(),
        velocities: Vec::new(),
    };
    if keep_path {
        path.states.push(z.clone());
    }
    let mut t = vec![0.0; n];
    for i in 0..steps {
        t.fill(i as f64 / steps as f64);
        let v = guided_velocity(field, &z, &t, c, alpha)?;
        for (zi, vi) in z.iter_mut().zip(&v) {
            *zi += h * vi;
        }
        if let Some(bad) = z.iter().position(|v| !v.is_finite()) {
            return Err(SimError::Row(RowFailure { row: bad / d, step: i + 1 }));
        }
        if keep_path {
            path.velocities.push(v);
            path.states.push(z.clone());
        }
    }
    if !keep_path {
        path.states.push(z);
    }
    Ok(path)
}

fn check_sim_args<F: VelocityField + ?Sized>(field: &F, z0: &[f64], n: usize, steps: usize, alpha: f64) -> Result<()> {
    if steps == 0 {
        return Err(Error::input("Euler simulation needs at least one step"));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::input(format!("guidance scale {alpha} must be finite and >= 0")));
    }
    if z0.len() != n * field.dim() {
        return Err(Error::input(format!(
            "initial states do not match dimension {} for {n} rows",
            field.dim()
        )));
    }
    Ok(())
}

/// Simulates one trajectory of `N = steps` Euler steps.
pub fn euler_simulate<F: VelocityField + ?Sized>(
    field: &F,
    z0: &[f64],
    c: usize,
    steps: usize,
    alpha: f64,
) -> Result<Trajectory> {
    check_sim_args(field, z0, 1, steps, alpha)?;
    let path = euler_rows(field, z0, &[c], steps, alpha, true).map_err(|e| match e {
        SimError::Row(f) => Error::Simulation { step: f.step },
        SimError::Other(e) => e,
    })?;
    Ok(Trajectory {
        times: (0..=steps).map(|i| i as f64 / steps as f64).collect(),
        states: path.states,
        condition: c,
        alpha,
    })
}

/// Final Euler states for many rows, fanned out over the current rayon pool.
/// A failing row is reported as [`Error::Pair`] with its row index.
pub fn euler_endpoints<F: VelocityField + ?Sized>(
    field: &F,
    z0: &[f64],
    c: &[usize],
    steps: usize,
    alpha: f64,
) -> Result<Vec<f64>> {
    check_sim_args(field, z0, c.len(), steps, alpha)?;
    let d = field.dim();
    let chunks: Vec<_> = z0
        .par_chunks(SIM_CHUNK * d)
        .zip(c.par_chunks(SIM_CHUNK))
        .enumerate()
        .map(|(k, (zc, cc))| {
            euler_rows(field, zc, cc, steps, alpha, false)
                .map(|mut p| p.states.pop().unwrap())
                .map_err(|e| match e {
                    SimError::Row(f) => Error::Pair {
                        index: k * SIM_CHUNK + f.row,
                        source: Box::new(Error::Simulation { step: f.step }),
                    },
                    SimError::Other(e) => e,
                })
        })
        .collect();
    let mut out = Vec::with_capacity(z0.len());
    for chunk in chunks {
        out.extend(chunk?);
    }
    Ok(out)
}

/// Writes trajectories as CSV: `traj_id,step,t,x_0..x_{d-1},condition,alpha`.
pub fn write_trajectories_csv<W: Write>(mut w: W, trajs: &[Trajectory]) -> Result<()> {
    let d = trajs.first().map_or(0, |t| t.states[0].len());
    write!(w, "traj_id,step,t")?;
    for k in 0..d {
        write!(w, ",x_{k}")?;
    }
    writeln!(w, ",condition,alpha")?;
    for (id, traj) in trajs.iter().enumerate() {
        for (step, (t, s)) in traj.times.iter().zip(&traj.states).enumerate() {
            write!(w, "{id},{step},{t}")?;
            for v in s {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{},{}", traj.condition, traj.alpha)?;
        }
    }
    Ok(())
}
