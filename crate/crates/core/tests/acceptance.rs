//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `ACCEPTANCE_ONLY=1,3,9` restricts the run.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::*;
use rand::Rng;
use rectflow::config::ExperimentConfig;
use rectflow::datagen::{sample_prior, PairBatch, TargetSpec};
use rectflow::eval::{EvalReport, EvalSeeds};
use rectflow::flow::{euler_endpoints, flow_loss_at, guided_velocity, NetField};
use rectflow::metrics::{straightness, straightness_per_trajectory, MetricsRecord};
use rectflow::nn::{MlpVelocityNet, NetConfig, NULL_CONDITION};
use rectflow::pipeline::Run;
use rectflow::reflow::{reflow_step, PairDataset};
use rectflow::rng::{derive_named, seeded};
use rectflow::stage::{FlowStage, Provenance};
use rectflow::train::train_base;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// 1. Analytic gradients against central differences of an independent forward pass.
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut sizes = Vec::new();
    for (i, cfg) in small_configs().into_iter().enumerate() {
        let net = MlpVelocityNet::init_dense(cfg.clone(), 1000 + i as u64).unwrap();
        sizes.push(net.params.len());
        let d = cfg.state_dim;
        let n = 8;
        let mut rng = seeded(77 + i as u64);
        let batch = PairBatch {
            dim: d,
            x0: sample_prior(d, n, i as u64),
            x1: (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            cond: (0..n).map(|_| rng.random_range(0..cfg.vocab)).collect(),
        };
        let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let analytic = flow_loss_at(&net, &net.params, &batch, &t).unwrap().grads;
        let fd = central_diff(|th| reference_flow_loss(&net, th, &batch, &t), net.params.data(), 1e-5);
        worst = worst.max(max_rel_err(&analytic, &fd, 1e-6));
    }
    let secs = start.elapsed().as_secs_f64();
    let small = sizes.iter().all(|&s| s <= 200);
    outcome(
        worst < 1e-4 && secs < 10.0 && small,
        format!("max rel err {worst:.2e} (< 1e-4), params {sizes:?} (<= 200), {secs:.2}s (< 10s)"),
    )
}

// 2. Learned velocity of N(0,1) -> N(0,1) against the conditional-expectation oracle.
fn velocity_recovery() -> Outcome {
    let spec = TargetSpec::standard_normal_1d();
    let net = NetConfig {
        state_dim: 1,
        hidden: vec![64, 64],
        vocab: spec.vocab(),
        cond_dim: 4,
        time_freqs: 8,
    };
    let cfg = rectflow::train::TrainConfig {
        steps: 8000,
        batch_size: 256,
        lr: 1e-3,
        weight_decay: 0.0,
        ema: 0.999,
        null_dropout: 0.1,
    };
    let (stage, _) = train_base(&spec, net, &cfg, 1.0, 11, "gaussian").unwrap();
    let mut x = Vec::new();
    let mut t = Vec::new();
    for ti in 1..=9 {
        for xi in 0..=40 {
            x.push(-2.0 + 0.1 * xi as f64);
            t.push(ti as f64 / 10.0);
        }
    }
    let c = vec![1; x.len()];
    let v = stage.forward(&x, &t, &c).unwrap();
    let mae = x
        .iter()
        .zip(&t)
        .zip(&v)
        .map(|((&xi, &ti), vi)| (vi - gaussian_velocity(xi, ti)).abs())
        .sum::<f64>()
        / x.len() as f64;
    outcome(mae < 0.05, format!("MAE {mae:.4} (< 0.05) over {} grid points", x.len()))
}

fn constant_stage(u: &[f64]) -> FlowStage {
    let cfg = NetConfig {
        state_dim: u.len(),
        hidden: vec![8, 8],
        vocab: 3,
        cond_dim: 2,
        time_freqs: 2,
    };
    let mut net = MlpVelocityNet::init(cfg, 5).unwrap();
    let last = net.params.num_blocks() - 1;
    net.params.block_mut(last).copy_from_slice(u);
    FlowStage::new_flow("const", 1, 1.5, net, Provenance::default()).unwrap()
}

// 3. A constant field is simulated exactly by one step, and has zero straightness.
fn straight_flow_exactness() -> Outcome {
    let stage = constant_stage(&[0.7, -1.3]);
    let z0 = sample_prior(2, 200, 3);
    let c: Vec<usize> = (0..200).map(|i| 1 + i % 2).collect();
    let one = euler_endpoints(&stage, &z0, &c, 1, 1.5).unwrap();
    let hundred = euler_endpoints(&stage, &z0, &c, 100, 1.5).unwrap();
    let gap = one.iter().zip(&hundred).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let s = straightness_per_trajectory(&stage, &z0, &c, 100, 1.5)
        .unwrap()
        .into_iter()
        .fold(0.0, f64::max);
    outcome(
        gap <= 1e-12 && s <= 1e-12,
        format!("max |N=1 - N=100| {gap:.1e} (<= 1e-12), max S {s:.1e} (<= 1e-12)"),
    )
}

// 9. Classifier-free guidance is exact at alpha = 1 and affine in alpha.
fn cfg_contract() -> Outcome {
    let cfg = NetConfig {
        state_dim: 2,
        hidden: vec![16, 16],
        vocab: 4,
        cond_dim: 3,
        time_freqs: 3,
    };
    let net = MlpVelocityNet::init_dense(cfg, 21).unwrap();
    let field = NetField {
        net: &net,
        params: &net.params,
    };
    let n = 64;
    let x = sample_prior(2, n, 9);
    let mut rng = seeded(4);
    let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let c: Vec<usize> = (0..n).map(|i| 1 + i % 3).collect();
    let cond = net.forward(&x, &t, &c).unwrap();
    let uncond = net.forward(&x, &t, &vec![NULL_CONDITION; n]).unwrap();
    let exact = guided_velocity(&field, &x, &t, &c, 1.0).unwrap() == cond;
    let mut worst = 0.0f64;
    for alpha in [0.0, 1.0, 1.5, 4.0] {
        let g = guided_velocity(&field, &x, &t, &c, alpha).unwrap();
        for k in 0..g.len() {
            let want = alpha * cond[k] + (1.0 - alpha) * uncond[k];
            worst = worst.max((g[k] - want).abs() / (1.0 + want.abs()));
        }
    }
    outcome(
        exact && worst <= 1e-12,
        format!("alpha=1 bit-exact: {exact}; max affine deviation {worst:.1e} (<= 1e-12) at alpha in {{0, 1, 1.5, 4}}"),
    )
}

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rectflow"));
    c.env("RECTFLOW_LOG", "warn");
    c
}

fn pipeline(config: Option<&Path>, seed: Option<u64>, out: &Path) -> (f64, String) {
    let mut cmd = cli();
    cmd.arg("pipeline").arg("--threads").arg("1").arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    if let Some(s) = seed {
        cmd.arg("--seed").arg(s.to_string());
    }
    let start = Instant::now();
    let o = cmd.output().expect("run pipeline");
    let secs = start.elapsed().as_secs_f64();
    if !o.status.success() {
        panic!("pipeline failed: {}", String::from_utf8_lossy(&o.stderr));
    }
    (secs, String::from_utf8_lossy(&o.stdout).into_owned())
}

fn records(dir: &Path) -> BTreeMap<String, MetricsRecord> {
    let bytes = fs::read(dir.join("metrics.json")).unwrap();
    rectflow::metrics::read_metrics_json(&bytes)
        .unwrap()
        .into_iter()
        .map(|r| (r.stage_id.clone(), r))
        .collect()
}

fn report(dir: &Path) -> EvalReport {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("checks.json")).unwrap()).unwrap();
    serde_json::from_value(v["report"].clone()).unwrap()
}

// 4. Reflow straightens; a third stage does not undo it.
fn straightening(dir: &Path) -> Outcome {
    let r = records(dir);
    let s1 = r["v1"].straightness.unwrap();
    let s2 = r["v2"].straightness.unwrap();
    let first = s2 < 0.7 * s1;
    // Third stage trained from the stored v2 and its pairs under the same config.
    let cfg = ExperimentConfig {
        out_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    let run = Run::new(cfg.clone()).unwrap();
    let v2 = run.load_stage("v2").unwrap();
    let pairs: PairDataset = run.load_pairs("v2").unwrap();
    let (v3, _) = reflow_step(&v2, &pairs, &cfg.reflow.for_stage(3), derive_named(cfg.seed, "reflow-v3")).unwrap();
    let seeds = EvalSeeds::from_master(cfg.seed);
    let conds = cfg.target.condition_dist();
    let e = &cfg.eval;
    let s2b = straightness(&v2, e.n_traj, e.n_steps, &conds, v2.alpha, seeds.traj).unwrap().mean;
    let s3 = straightness(&v3, e.n_traj, e.n_steps, &conds, v3.alpha, seeds.traj).unwrap().mean;
    let third = s3 <= 1.05 * s2b;
    outcome(
        first && third,
        format!(
            "S(v1) {s1:.4}, S(v2) {s2:.4} (< 0.7 S(v1) = {:.4}); k_max=3: S(v3) {s3:.4} (<= 1.05 S(v2) = {:.4})",
            0.7 * s1,
            1.05 * s2b
        ),
    )
}

// 5. v1 and v2 push the prior to the same distribution.
fn marginal_preservation(dir: &Path) -> Outcome {
    let rep = report(dir);
    let m = &rep.marginal[0];
    let pass = m.n_samples == 5000 && m.n_steps == 50 && m.energy_distance <= 3.0 * m.noise_floor;
    outcome(
        pass,
        format!(
            "ED(v1, v2) {:.2e} <= 3 x floor {:.2e} = {:.2e} (n={}, N={})",
            m.energy_distance,
            m.noise_floor,
            3.0 * m.noise_floor,
            m.n_samples,
            m.n_steps
        ),
    )
}

// 6. Reflow does not raise convex transport costs.
fn transport_reduction(dir: &Path) -> Outcome {
    let rep = report(dir);
    let parts: Vec<String> = rep
        .transport
        .iter()
        .map(|t| {
            format!(
                "{:?}: v1 {:.4} -> v2 {:.4} (diff {:+.4} <= bootstrap bound {:.4})",
                t.cost,
                t.cost_from,
                t.cost_to,
                t.cost_to - t.cost_from,
                t.tolerance
            )
        })
        .collect();
    let pass = rep.transport.len() == 2 && rep.transport.iter().all(|t| t.cost_to - t.cost_from <= t.tolerance);
    outcome(pass, parts.join("; "))
}

// 7. Students of the reflowed teacher beat students of the base teacher.
fn distill_superiority(dirs: &[(u64, PathBuf)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, dir) in dirs {
        let r = records(dir);
        let (b, s) = (&r["v1-distill"], &r["v2-distill"]);
        let (fb, fs) = (b.coupling_fidelity.unwrap(), s.coupling_fidelity.unwrap());
        let ok = fs < fb && s.energy_distance < b.energy_distance;
        pass &= ok;
        parts.push(format!(
            "seed {seed}: fidelity {fs:.4} < {fb:.4}, ED {:.5} < {:.5} [{}]",
            s.energy_distance,
            b.energy_distance,
            if ok { "ok" } else { "x" }
        ));
    }
    outcome(pass && dirs.len() == 3, parts.join("; "))
}

// 8. v2 beats v1 with very few Euler steps.
fn few_step_advantage(dir: &Path) -> Outcome {
    let rep = report(dir);
    let ed = |id: &str, n: usize| {
        rep.few_step
            .iter()
            .find(|r| r.stage_id == id && r.n_steps == n)
            .unwrap()
            .energy_distance
    };
    let parts: Vec<String> = [1, 2, 4]
        .iter()
        .map(|&n| format!("N={n}: v2 {:.4} vs v1 {:.4}", ed("v2", n), ed("v1", n)))
        .collect();
    let pass = ed("v2", 1) < ed("v1", 1) && ed("v2", 2) < ed("v1", 2);
    outcome(pass, parts.join("; "))
}

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.network.hidden = vec![24, 24];
    cfg.base.steps = 400;
    cfg.pairs.count = 2000;
    cfg.pairs.n_steps = 10;
    cfg.reflow.steps = 200;
    cfg.distill.schedule[0].steps = 100;
    cfg.distill.schedule[1].steps = 100;
    cfg.eval.n_traj = 100;
    cfg.eval.n_steps = 10;
    cfg.eval.n_samples = 400;
    cfg.eval.marginal_steps = 10;
    cfg.eval.floor_replicates = 2;
    cfg.eval.bootstrap_reps = 200;
    let path = dir.join("small.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.file_name().unwrap().to_string_lossy().starts_with("manifest."))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

// 10. Reruns reproduce every artifact; completed steps are skipped on resume.
fn determinism(tmp: &Path) -> Outcome {
    let config = small_config(tmp);
    let (a, b) = (tmp.join("a"), tmp.join("b"));
    pipeline(Some(&config), None, &a);
    pipeline(Some(&config), None, &b);
    let (fa, fb) = (artifacts(&a), artifacts(&b));
    let identical = fa == fb && fa.len() >= 14;
    let (_, rerun) = pipeline(Some(&config), None, &a);
    let noop = rerun.lines().all(|l| l.ends_with("up to date"));
    // Interrupted after reflow: distillation and evaluation outputs are gone.
    for f in ["v1-distill.ckpt", "v2-distill.ckpt", "metrics.csv"] {
        fs::remove_file(a.join(f)).unwrap();
    }
    let (_, resumed) = pipeline(Some(&config), None, &a);
    let status: BTreeMap<&str, &str> = resumed.lines().filter_map(|l| l.split_once(": ")).collect();
    let resumed_ok = ["train-base", "gen-pairs-v1", "reflow-v2", "gen-pairs-v2"]
        .iter()
        .all(|s| status.get(s) == Some(&"up to date"))
        && ["distill-v1", "distill-v2", "eval"].iter().all(|s| status.get(s) == Some(&"done"));
    let after = artifacts(&a) == fb;
    outcome(
        identical && noop && resumed_ok && after,
        format!(
            "{} artifacts byte-identical across runs: {identical}; rerun is a no-op: {noop}; \
             resume skips train/pairs/reflow and redoes distill/eval: {resumed_ok}; resumed artifacts identical: {after}",
            fa.len()
        ),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |k: u32| only.as_ref().is_none_or(|o| o.contains(&k));
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |k: u32, name: &'static str, o: Outcome| {
        println!("{} [{k:>2}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((k, name, o));
    };

    if want(1) {
        record(1, "gradient correctness", gradient_correctness());
    }
    if want(2) {
        record(2, "analytic velocity recovery", velocity_recovery());
    }
    if want(3) {
        record(3, "straight-flow exactness", straight_flow_exactness());
    }
    if want(9) {
        record(9, "classifier-free guidance contract", cfg_contract());
    }
    if want(10) {
        record(10, "determinism and idempotence", determinism(tmp.path()));
    }
    let pipeline_criteria = [4, 5, 6, 7, 8, 11];
    if pipeline_criteria.iter().any(|&k| want(k)) {
        let main_dir = tmp.path().join("default-seed1");
        let (secs, _) = pipeline(None, None, &main_dir);
        if want(11) {
            record(
                11,
                "runtime budget",
                outcome(secs < 600.0, format!("default pipeline with evaluation took {secs:.1}s (< 600s)")),
            );
        }
        if want(4) {
            record(4, "straightening", straightening(&main_dir));
        }
        if want(5) {
            record(5, "marginal preservation", marginal_preservation(&main_dir));
        }
        if want(6) {
            record(6, "transport-cost reduction", transport_reduction(&main_dir));
        }
        if want(8) {
            record(8, "few-step advantage", few_step_advantage(&main_dir));
        }
        if want(7) {
            let mut dirs = vec![(1, main_dir.clone())];
            for seed in [2, 3] {
                let d = tmp.path().join(format!("default-seed{seed}"));
                pipeline(None, Some(seed), &d);
                dirs.push((seed, d));
            }
            record(7, "distillation after reflow", distill_superiority(&dirs));
        }
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
