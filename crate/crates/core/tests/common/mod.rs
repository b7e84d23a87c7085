//! Reference computations shared by the integration tests. Nothing here uses
//! the tape; the network is evaluated with plain loops.
#![allow(dead_code)]

use rectflow::datagen::PairBatch;
use rectflow::nn::{MlpVelocityNet, NetConfig};

fn block<'a>(net: &MlpVelocityNet, theta: &'a [f64], name: &str) -> &'a [f64] {
    let mut off = 0;
    for b in net.params.layout() {
        if b.name == name {
            return &theta[off..off + b.rows * b.cols];
        }
        off += b.rows * b.cols;
    }
    panic!("no block {name}");
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// v(x, t | c) for one row with parameters `theta` in the network's layout.
pub fn reference_velocity(net: &MlpVelocityNet, theta: &[f64], x: &[f64], t: f64, c: usize) -> Vec<f64> {
    let cfg = &net.config;
    let mut h: Vec<f64> = x.to_vec();
    for k in 0..cfg.time_freqs {
        let w = std::f64::consts::PI * (k + 1) as f64 * t;
        h.push(w.sin());
        h.push(w.cos());
    }
    let emb = block(net, theta, "cond_embed");
    h.extend_from_slice(&emb[c * cfg.cond_dim..(c + 1) * cfg.cond_dim]);
    let layers = cfg.hidden.len() + 1;
    for l in 0..layers {
        let w = block(net, theta, &format!("w{l}"));
        let b = block(net, theta, &format!("b{l}"));
        let out = b.len();
        let mut z = b.to_vec();
        for (i, hi) in h.iter().enumerate() {
            for j in 0..out {
                z[j] += hi * w[i * out + j];
            }
        }
        h = if l + 1 < layers { z.into_iter().map(silu).collect() } else { z };
    }
    h
}

/// Mean over rows of |(x1 - x0) - v(x_t, t | c)|^2.
pub fn reference_flow_loss(net: &MlpVelocityNet, theta: &[f64], batch: &PairBatch, t: &[f64]) -> f64 {
    let n = batch.len();
    let mut total = 0.0;
    for i in 0..n {
        let (a, b) = (batch.x0_row(i), batch.x1_row(i));
        let xt: Vec<f64> = a.iter().zip(b).map(|(p, q)| (1.0 - t[i]) * p + t[i] * q).collect();
        let v = reference_velocity(net, theta, &xt, t[i], batch.cond[i]);
        total += a.iter().zip(b).zip(&v).map(|((p, q), vv)| (q - p - vv).powi(2)).sum::<f64>();
    }
    total / n as f64
}

/// Central finite differences of `f` at `theta`.
pub fn central_diff<F: Fn(&[f64]) -> f64>(f: F, theta: &[f64], h: f64) -> Vec<f64> {
    let mut th = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = th[i];
            th[i] = orig + h;
            let up = f(&th);
            th[i] = orig - h;
            let down = f(&th);
            th[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error; entries where both values are below `floor` are compared absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Small random network configurations, all under 200 parameters.
pub fn small_configs() -> Vec<NetConfig> {
    vec![
        NetConfig { state_dim: 2, hidden: vec![6], vocab: 3, cond_dim: 2, time_freqs: 1 },
        NetConfig { state_dim: 1, hidden: vec![5, 4], vocab: 2, cond_dim: 1, time_freqs: 2 },
        NetConfig { state_dim: 3, hidden: vec![7], vocab: 4, cond_dim: 2, time_freqs: 1 },
        NetConfig { state_dim: 2, hidden: vec![4, 4, 4], vocab: 3, cond_dim: 2, time_freqs: 1 },
        NetConfig { state_dim: 4, hidden: vec![5], vocab: 2, cond_dim: 3, time_freqs: 2 },
    ]
}

/// Conditional mean velocity for the independent coupling of two 1-D standard
/// normals: Cov(X1 - X0, X_t) = 2t - 1 and Var(X_t) = (1 - t)^2 + t^2.
pub fn gaussian_velocity(x: f64, t: f64) -> f64 {
    x * (2.0 * t - 1.0) / ((1.0 - t).powi(2) + t * t)
}

/// Energy distance with U-statistic within-set terms, by direct double loops.
pub fn reference_energy_distance(a: &[f64], b: &[f64], d: usize) -> f64 {
    let dist = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let ra: Vec<&[f64]> = a.chunks_exact(d).collect();
    let rb: Vec<&[f64]> = b.chunks_exact(d).collect();
    let mut cross = 0.0;
    for p in &ra {
        for q in &rb {
            cross += dist(p, q);
        }
    }
    let within = |r: &[&[f64]]| {
        let mut s = 0.0;
        for i in 0..r.len() {
            for j in 0..r.len() {
                if i != j {
                    s += dist(r[i], r[j]);
                }
            }
        }
        s / (r.len() * (r.len() - 1)) as f64
    };
    2.0 * cross / (ra.len() * rb.len()) as f64 - within(&ra) - within(&rb)
}
