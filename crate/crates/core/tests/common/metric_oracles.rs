//! Independent oracles for the evaluation metrics. Every check returns a
//! description of the first mismatch.
#![allow(dead_code)]

use ncp_core::metrics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Check {
    ensure((a - b).abs() <= tol, || format!("{what}: {a} vs {b} (tol {tol:e})"))
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn mse_examples() -> Check {
    close(mse(&[0.1, -0.2, 0.3], &[0.1, -0.2, 0.3]).unwrap(), 0.0, 0.0, "perfect prediction")?;
    close(mse(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0, 0.0, "unit error")?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (p, y) = (uniform(&mut rng, 257, -1.0, 1.0), uniform(&mut rng, 257, -1.0, 1.0));
    let mut sum = 0.0;
    for i in (0..p.len()).rev() {
        sum += (p[i] - y[i]) * (p[i] - y[i]);
    }
    close(mse(&p, &y).unwrap(), sum / 257.0, 1e-14, "random mse")?;
    ensure(mse(&p, &y[..10]).is_err(), || "length mismatch accepted".into())
}

pub fn weighted_mse_examples() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = uniform(&mut rng, 50, -1.0, 1.0);
    let y: Vec<f64> = (0..50).map(|i| if i % 2 == 0 { 0.3 } else { -0.3 }).collect();
    close(weighted_mse(&p, &y).unwrap(), mse(&p, &y).unwrap(), 1e-14, "constant |y|")?;

    let y: Vec<f64> = (0..50).map(|i| if i % 5 == 0 { 0.0 } else { 0.2 }).collect();
    let p: Vec<f64> = y.iter().map(|&v| if v == 0.0 { 1.0 } else { v }).collect();
    let w = weighted_mse(&p, &y).unwrap();
    ensure(w < 1e-4 * mse(&p, &y).unwrap(), || {
        format!("errors on straight road not suppressed: {w}")
    })?;

    let y = uniform(&mut rng, 100, -0.1, 0.1);
    let p = uniform(&mut rng, 100, -0.1, 0.1);
    let weights: Vec<f64> = y.iter().map(|v| v.abs() + WEIGHT_EPS).collect();
    let num: f64 = (0..100).map(|i| weights[i] * (p[i] - y[i]).powi(2)).sum();
    let den: f64 = weights.iter().sum();
    close(weighted_mse(&p, &y).unwrap(), num / den, 1e-14, "explicit sum")
}

/// `weighted_mse <= mse * max(w) / mean(w)` on random data.
pub fn weighting_bound() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..200 {
        let n = rng.random_range(1..60);
        let y = uniform(&mut rng, n, -0.2, 0.2);
        let p = uniform(&mut rng, n, -0.2, 0.2);
        let w: Vec<f64> = y.iter().map(|v| v.abs() + WEIGHT_EPS).collect();
        let max = w.iter().cloned().fold(0.0, f64::max);
        let mean = w.iter().sum::<f64>() / n as f64;
        let (wm, m) = (weighted_mse(&p, &y).unwrap(), mse(&p, &y).unwrap());
        ensure(wm <= m * max / mean * (1.0 + 1e-12), || {
            format!("trial {trial}: {wm} > {m} * {max} / {mean}")
        })?;
    }
    Ok(())
}

pub fn lipschitz_examples() -> Check {
    close(lipschitz(&[0.4; 7], 1.0 / 30.0).unwrap(), 0.0, 0.0, "constant")?;
    let ramp: Vec<f64> = (0..20).map(|t| 0.01 * t as f64).collect();
    close(lipschitz(&ramp, 0.5).unwrap(), 0.02, 1e-15, "ramp")?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y = uniform(&mut rng, 300, -1.0, 1.0);
    let mut best = 0.0_f64;
    for t in 1..y.len() {
        best = best.max((y[t] - y[t - 1]).abs());
    }
    close(lipschitz(&y, 0.1).unwrap(), best / 0.1, 0.0, "scan")?;
    ensure(lipschitz(&[1.0], 0.1).is_err(), || "single output accepted".into())
}

/// Window-by-window SSIM with two-pass statistics.
pub fn ssim_oracle(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = 7;
    let mut scores = Vec::new();
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let pa: Vec<f64> = (0..k * k).map(|i| a[(y0 + i / k) * w + x0 + i % k]).collect();
            let pb: Vec<f64> = (0..k * k).map(|i| b[(y0 + i / k) * w + x0 + i % k]).collect();
            let n = (k * k) as f64;
            let ma = pa.iter().sum::<f64>() / n;
            let mb = pb.iter().sum::<f64>() / n;
            let va = pa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
            let vb = pb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
            let cov = pa.iter().zip(&pb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
            let luminance = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let structure = (2.0 * cov + c2) / (va + vb + c2);
            scores.push(luminance * structure);
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn fixtures() -> Vec<(Vec<f64>, Vec<f64>)> {
    let checker: Vec<f64> = (0..64).map(|i| ((i / 8 + i % 8) % 2) as f64).collect();
    let ramp: Vec<f64> = (0..64).map(|i| (i % 8) as f64 / 7.0).collect();
    let blob: Vec<f64> = (0..64)
        .map(|i| {
            let (x, y) = ((i % 8) as f64 - 3.5, (i / 8) as f64 - 3.5);
            (-(x * x + y * y) / 6.0).exp()
        })
        .collect();
    let mut out = vec![(checker.clone(), ramp.clone()), (ramp, blob.clone()), (checker, blob)];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        out.push((uniform(&mut rng, 64, 0.0, 1.0), uniform(&mut rng, 64, 0.0, 1.0)));
    }
    out
}

pub fn ssim_matches_window_oracle() -> Check {
    for (i, (a, b)) in fixtures().iter().enumerate() {
        close(ssim(a, b, 8, 8).unwrap(), ssim_oracle(a, b, 8, 8), 1e-10, &format!("fixture {i}"))?;
    }
    Ok(())
}

pub fn ssim_basic_properties() -> Check {
    for (i, (a, b)) in fixtures().iter().enumerate() {
        close(ssim(a, a, 8, 8).unwrap(), 1.0, 1e-12, &format!("identity {i}"))?;
        let (ab, ba) = (ssim(a, b, 8, 8).unwrap(), ssim(b, a, 8, 8).unwrap());
        close(ab, ba, 1e-15, &format!("symmetry {i}"))?;
        ensure((-1.0..=1.0).contains(&ab), || format!("fixture {i} out of range: {ab}"))?;
    }
    ensure(ssim(&[0.0; 64], &[0.0; 63], 8, 8).is_err(), || "size mismatch accepted".into())
}

/// Mean SSIM against a noisy copy falls as the noise variance grows.
pub fn ssim_decreases_with_noise() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (w, h) = (16, 16);
    let base: Vec<f64> = (0..w * h)
        .map(|i| 0.5 + 0.4 * ((i % w) as f64 * 0.5).sin() * ((i / w) as f64 * 0.3).cos())
        .collect();
    let mut previous = f64::INFINITY;
    for variance in [0.001, 0.01, 0.05, 0.1, 0.2] {
        let normal = Normal::new(0.0, f64::sqrt(variance)).unwrap();
        let mut total = 0.0;
        for _ in 0..100 {
            let noisy: Vec<f64> = base.iter().map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0)).collect();
            total += ssim(&base, &noisy, w, h).unwrap();
        }
        let mean = total / 100.0;
        ensure(mean < previous, || format!("variance {variance}: mean ssim {mean} >= {previous}"))?;
        previous = mean;
    }
    Ok(())
}

pub fn crash_examples() -> Check {
    close(crash_likelihood(&[false; 25]).unwrap(), 0.0, 0.0, "no crashes")?;
    close(crash_likelihood(&[true; 5]).unwrap(), 1.0, 0.0, "all crash")?;
    let two = [true, false, false, false, false, true, false, false];
    close(crash_likelihood(&two).unwrap(), 0.25, 0.0, "2 of 8")
}

pub fn activity_examples() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let curv = uniform(&mut rng, 50, -0.1, 0.1);
    close(activity_correlation(&vec![curv.clone(); 4], &curv).unwrap(), 1.0, 1e-12, "copies")?;
    close(
        activity_correlation(&[vec![0.3; 50], vec![-1.0; 50]], &curv).unwrap(),
        0.0,
        0.0,
        "constant",
    )?;
    ensure(activity_correlation(&[vec![0.0, 1.0]], &[0.0, 1.0]).is_err(), || {
        "T < 3 accepted".into()
    })?;

    let t = 10_000;
    let curv = uniform(&mut rng, t, -1.0, 1.0);
    let traces: Vec<Vec<f64>> = (0..8).map(|_| uniform(&mut rng, t, -1.0, 1.0)).collect();
    let c = activity_correlation(&traces, &curv).unwrap();
    ensure(c < 0.05, || format!("independent traces correlate at {c}"))?;

    let traces: Vec<Vec<f64>> = (0..5)
        .map(|i| curv.iter().map(|v| v + 0.5 * i as f64 * rng.random::<f64>()).collect())
        .collect();
    let scaled: Vec<Vec<f64>> = traces
        .iter()
        .enumerate()
        .map(|(i, tr)| tr.iter().map(|v| (1.0 + i as f64) * 3.0 * v - 0.7).collect())
        .collect();
    close(
        activity_correlation(&traces, &curv).unwrap(),
        activity_correlation(&scaled, &curv).unwrap(),
        1e-12,
        "affine rescaling",
    )
}

fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let (saa, sbb): (f64, f64) = (a.iter().map(|x| x * x).sum(), b.iter().map(|y| y * y).sum());
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

pub fn trajectory_examples() -> Check {
    let wobble: Vec<f64> = (0..400).map(|t| 0.3 * (t as f64 * 0.05).sin()).collect();
    close(trajectory_similarity(&wobble, &wobble).unwrap(), 1.0, 1e-12, "identical")?;
    close(
        trajectory_similarity(&[0.0; 400], &wobble).unwrap(),
        0.0,
        0.0,
        "straight vs oscillating",
    )?;
    close(trajectory_similarity(&[0.1; 10], &[0.1; 30]).unwrap(), 1.0, 0.0, "equal constants")?;
    let drift: Vec<f64> = (0..300).map(|t| 1e-3 * t as f64 + 0.02 * (t as f64 * 0.3).cos()).collect();
    close(
        trajectory_similarity(&drift, &wobble).unwrap(),
        pearson_oracle(&drift, &wobble[..300]),
        1e-12,
        "truncated pair",
    )
}

pub const ALL: [(&str, fn() -> Check); 11] = [
    ("mse", mse_examples),
    ("weighted mse", weighted_mse_examples),
    ("weighting bound", weighting_bound),
    ("lipschitz", lipschitz_examples),
    ("ssim window oracle", ssim_matches_window_oracle),
    ("ssim identity/symmetry/range", ssim_basic_properties),
    ("ssim monotone in noise", ssim_decreases_with_noise),
    ("crash likelihood", crash_examples),
    ("activity correlation", activity_examples),
    ("trajectory similarity", trajectory_examples),
    ("summary statistics", summary_examples),
];

pub fn summary_examples() -> Check {
    let s = summarize(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    close(s.mean, 5.0, 0.0, "mean")?;
    close(s.std, 2.0, 1e-15, "population std")
}
