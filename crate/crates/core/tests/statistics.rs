mod common;

use common::reference_energy_distance;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rectflow::datagen::{sample_prior, sample_target, sample_unconditional, TargetSpec};
use rectflow::metrics::{energy_distance_raw, mmd_gaussian, mmd_gaussian_biased, median_pairwise_distance, Bandwidth};
use rectflow::rng::seeded;

fn cov2(x: &[f64]) -> [f64; 3] {
    let n = (x.len() / 2) as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for p in x.chunks_exact(2) {
        mx += p[0];
        my += p[1];
    }
    mx /= n;
    my /= n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in x.chunks_exact(2) {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    [sxx / n, sxy / n, syy / n]
}

fn eig2([a, b, d]: [f64; 3]) -> (f64, f64) {
    let mid = 0.5 * (a + d);
    let r = (0.25 * (a - d).powi(2) + b * b).sqrt();
    (mid + r, mid - r)
}

fn within(a: f64, want: f64, rel: f64) -> bool {
    (a - want).abs() <= rel * want.abs()
}

#[test]
fn six_mode_covariance_eigenvalues() {
    let spec = TargetSpec::six_mode_circle();
    let (r, s) = (3.0f64, 0.3f64);
    // Each label holds two antipodal modes: variance r^2 + s^2 along their axis, s^2 across.
    for c in 1..=3 {
        let x = sample_target(&spec, c, 100_000, 10 + c as u64).unwrap();
        let (hi, lo) = eig2(cov2(&x));
        assert!(within(hi, r * r + s * s, 0.1), "label {c}: {hi}");
        assert!(within(lo, s * s, 0.1), "label {c}: {lo}");
    }
    // Six equally spaced modes: isotropic with variance r^2 / 2 + s^2.
    let (x, _) = sample_unconditional(&spec, 100_000, 5);
    let (hi, lo) = eig2(cov2(&x));
    for e in [hi, lo] {
        assert!(within(e, r * r / 2.0 + s * s, 0.1), "{e}");
    }
}

#[test]
fn prior_is_standard_normal() {
    let z = sample_prior(2, 100_000, 3);
    let (hi, lo) = eig2(cov2(&z));
    assert!(within(hi, 1.0, 0.1) && within(lo, 1.0, 0.1));
}

fn permutation_p_value(a: &[f64], b: &[f64], d: usize, reps: usize, seed: u64) -> f64 {
    let observed = energy_distance_raw(a, b, d).unwrap();
    let mut pooled: Vec<Vec<f64>> = a.chunks_exact(d).chain(b.chunks_exact(d)).map(|r| r.to_vec()).collect();
    let n = a.len() / d;
    let mut rng = seeded(seed);
    let mut hits = 0;
    for _ in 0..reps {
        pooled.shuffle(&mut rng);
        let pa: Vec<f64> = pooled[..n].concat();
        let pb: Vec<f64> = pooled[n..].concat();
        if energy_distance_raw(&pa, &pb, d).unwrap() >= observed {
            hits += 1;
        }
    }
    (hits + 1) as f64 / (reps + 1) as f64
}

/// Direct draws from six equally weighted modes on a circle, written independently of the library.
fn direct_six_modes(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let m = rng.random_range(0..6) as f64;
        let ang = m * std::f64::consts::PI / 3.0;
        let zx: f64 = StandardNormal.sample(&mut rng);
        let zy: f64 = StandardNormal.sample(&mut rng);
        out.push(3.0 * ang.cos() + 0.3 * zx);
        out.push(3.0 * ang.sin() + 0.3 * zy);
    }
    out
}

#[test]
fn pooled_conditionals_match_direct_mixture() {
    let (x, _) = sample_unconditional(&TargetSpec::six_mode_circle(), 300, 21);
    let y = direct_six_modes(300, 22);
    let p = permutation_p_value(&x, &y, 2, 200, 1);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn permutation_test_detects_a_shift() {
    let x = direct_six_modes(300, 1);
    let y: Vec<f64> = direct_six_modes(300, 2).iter().map(|v| v + 1.0).collect();
    let p = permutation_p_value(&x, &y, 2, 200, 2);
    assert!(p < 0.01, "p = {p}");
}

#[test]
fn energy_distance_matches_direct_loops() {
    let a = sample_prior(3, 70, 1);
    let b: Vec<f64> = sample_prior(3, 45, 2).iter().map(|v| 0.5 * v + 0.3).collect();
    let got = energy_distance_raw(&a, &b, 3).unwrap();
    let want = reference_energy_distance(&a, &b, 3);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn mmd_matches_direct_loops() {
    let a = sample_prior(2, 40, 3);
    let b: Vec<f64> = sample_prior(2, 30, 4).iter().map(|v| v + 1.0).collect();
    let h = 0.8;
    let k = |p: &[f64], q: &[f64]| (-(p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>()) / (2.0 * h * h)).exp();
    let ra: Vec<&[f64]> = a.chunks_exact(2).collect();
    let rb: Vec<&[f64]> = b.chunks_exact(2).collect();
    let mean = |u: &[&[f64]], v: &[&[f64]], skip: bool| {
        let mut s = 0.0;
        let mut c = 0;
        for (i, p) in u.iter().enumerate() {
            for (j, q) in v.iter().enumerate() {
                if skip && i == j {
                    continue;
                }
                s += k(p, q);
                c += 1;
            }
        }
        s / c as f64
    };
    let unbiased = mean(&ra, &ra, true) + mean(&rb, &rb, true) - 2.0 * mean(&ra, &rb, false);
    let biased = mean(&ra, &ra, false) + mean(&rb, &rb, false) - 2.0 * mean(&ra, &rb, false);
    assert!((mmd_gaussian(&a, &b, 2, Bandwidth::Fixed(h)).unwrap() - unbiased).abs() < 1e-12);
    assert!((mmd_gaussian_biased(&a, &b, 2, Bandwidth::Fixed(h)).unwrap() - biased).abs() < 1e-12);
}

#[test]
fn median_heuristic_on_a_line() {
    // Distances among {0, 1, 3, 7}: 1, 3, 7, 2, 6, 4 -> median (3 + 4) / 2.
    let h = median_pairwise_distance(&[0.0, 1.0], &[3.0, 7.0], 1).unwrap();
    assert_eq!(h, 3.5);
}

#[test]
fn grid_images_have_expected_shape() {
    let spec = TargetSpec::grid_image_default();
    let (h, w) = spec.grid().unwrap();
    let x = sample_target(&spec, 1, 10, 1).unwrap();
    assert_eq!(x.len(), 10 * h * w);
    assert!(x.iter().all(|v| v.is_finite()));
}
