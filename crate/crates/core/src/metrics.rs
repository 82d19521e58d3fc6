//! Evaluation metrics over predictions, saliency maps, episodes and neuron
//! activity.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Offset keeping curvature weights positive on straight road.
pub const WEIGHT_EPS: f64 = 1e-6;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(pred: &[f64], label: &[f64]) -> Result<()> {
    check_len("predictions vs labels", label.len(), pred.len())?;
    if pred.is_empty() {
        return Err(Error::Structural("empty series".into()));
    }
    Ok(())
}

pub fn mse(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label)?;
    Ok(pred.iter().zip(label).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Squared errors weighted by `|y| + WEIGHT_EPS`, so that steep curves
/// count more than straight road.
pub fn weighted_mse(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (p, y) in pred.iter().zip(label) {
        let w = y.abs() + WEIGHT_EPS;
        num += w * (p - y).powi(2);
        den += w;
    }
    Ok(num / den)
}

/// Largest per-frame change of the output divided by the frame period.
pub fn lipschitz(outputs: &[f64], frame_dt: f64) -> Result<f64> {
    if outputs.len() < 2 {
        return Err(Error::Structural("lipschitz needs at least two outputs".into()));
    }
    Ok(outputs.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max) / frame_dt)
}

/// Mean local SSIM over all fully contained `7x7` windows, with population
/// statistics and unit dynamic range. Images smaller than a window are
/// treated as one window.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    check_len("ssim image a", width * height, a.len())?;
    check_len("ssim image b", width * height, b.len())?;
    if a.is_empty() {
        return Err(Error::Structural("empty image".into()));
    }
    let (wx, wy) = (SSIM_WINDOW.min(width), SSIM_WINDOW.min(height));
    let n = (wx * wy) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - wy {
        for x0 in 0..=width - wx {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + wy {
                for x in x0..x0 + wx {
                    let (p, q) = (a[y * width + x], b[y * width + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn crash_likelihood(crashed: &[bool]) -> Result<f64> {
    if crashed.is_empty() {
        return Err(Error::Structural("no episodes".into()));
    }
    Ok(crashed.iter().filter(|&&c| c).count() as f64 / crashed.len() as f64)
}

fn is_constant(s: &[f64]) -> bool {
    s.iter().all(|v| *v == s[0])
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n == 0 {
        return None;
    }
    let (a, b) = (&a[..n], &b[..n]);
    if is_constant(a) || is_constant(b) {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean over neurons of `|corr(activity_i, curvature)|` at zero lag;
/// `activities[i]` is neuron `i`'s trace. Constant traces contribute 0.
pub fn activity_correlation(activities: &[Vec<f64>], curvature: &[f64]) -> Result<f64> {
    activity_correlation_lagged(activities, curvature, 0)
}

/// Like [`activity_correlation`], but each neuron contributes its largest
/// `|corr|` over activity lags `0..=max_lag` frames behind the curvature.
pub fn activity_correlation_lagged(activities: &[Vec<f64>], curvature: &[f64], max_lag: usize) -> Result<f64> {
    let t = curvature.len();
    if t < 3 {
        return Err(Error::Structural("activity correlation needs at least 3 frames".into()));
    }
    if activities.is_empty() {
        return Err(Error::Structural("no neuron traces".into()));
    }
    if max_lag + 3 > t {
        return Err(Error::Structural("lag leaves fewer than 3 frames".into()));
    }
    let mut total = 0.0;
    for trace in activities {
        check_len("activity trace", t, trace.len())?;
        let best = (0..=max_lag)
            .map(|lag| pearson(&trace[lag..], &curvature[..t - lag]).map_or(0.0, f64::abs))
            .fold(0.0, f64::max);
        total += best;
    }
    Ok(total / activities.len() as f64)
}

/// Pearson correlation of two lateral-offset series over their common
/// prefix. Two constant series score 1 if equal and 0 otherwise.
pub fn trajectory_similarity(clean: &[f64], noisy: &[f64]) -> Result<f64> {
    let n = clean.len().min(noisy.len());
    if n == 0 {
        return Err(Error::Structural("empty trajectory".into()));
    }
    let (a, b) = (&clean[..n], &noisy[..n]);
    Ok(match pearson(a, b) {
        Some(r) => r,
        None => {
            if is_constant(a) && is_constant(b) && a[0] == b[0] {
                1.0
            } else {
                0.0
            }
        }
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation; NaN for an empty set.
pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Summary { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: Summary,
    pub weighted_mse: Summary,
    pub crash_likelihood: Summary,
    pub lipschitz: Summary,
    pub mean_ssim: Summary,
    pub activity_correlation: Summary,
    pub trajectory_similarity: Summary,
}

impl MetricReport {
    pub const FIELDS: [&'static str; 7] = [
        "mse",
        "weighted_mse",
        "crash_likelihood",
        "lipschitz",
        "mean_ssim",
        "activity_correlation",
        "trajectory_similarity",
    ];

    pub fn summaries(&self) -> [Summary; 7] {
        [
            self.mse,
            self.weighted_mse,
            self.crash_likelihood,
            self.lipschitz,
            self.mean_ssim,
            self.activity_correlation,
            self.trajectory_similarity,
        ]
    }

    /// Header fragment `mse_mean,mse_std,...`.
    pub fn csv_header() -> String {
        Self::FIELDS
            .iter()
            .map(|f| format!("{f}_mean,{f}_std"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn write_csv_fields<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let cells: Vec<String> = self
            .summaries()
            .iter()
            .map(|s| format!("{},{}", fmt_num(s.mean), fmt_num(s.std)))
            .collect();
        write!(w, "{}", cells.join(","))
    }
}

/// Shortest round-tripping decimal, with `nan` for missing values.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.5, 1.5], &[0.0, 1.0]).unwrap(), 0.25);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn weighted_mse_examples() {
        let label = [0.2, -0.2, 0.2];
        let pred = [0.1, 0.0, 0.5];
        assert!((weighted_mse(&pred, &label).unwrap() - mse(&pred, &label).unwrap()).abs() < 1e-15);
        let w = weighted_mse(&[1.0, 0.1], &[0.0, 0.1]).unwrap();
        assert!(w < 1e-4);
    }

    #[test]
    fn lipschitz_examples() {
        assert_eq!(lipschitz(&[0.3; 5], 0.1).unwrap(), 0.0);
        let ramp: Vec<f64> = (0..10).map(|t| -0.5 * t as f64).collect();
        assert!((lipschitz(&ramp, 0.25).unwrap() - 2.0).abs() < 1e-12);
        assert!(lipschitz(&[1.0], 0.1).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let b: Vec<f64> = (0..64).map(|i| ((i * 13) % 7) as f64 / 6.0).collect();
        assert!((ssim(&a, &a, 8, 8).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b, 8, 8).unwrap(), ssim(&b, &a, 8, 8).unwrap());
        assert!(ssim(&a, &b[..63], 8, 8).is_err());
    }

    #[test]
    fn crash_examples() {
        assert_eq!(crash_likelihood(&[false; 4]).unwrap(), 0.0);
        assert_eq!(crash_likelihood(&[true; 3]).unwrap(), 1.0);
        let mut v = [false; 8];
        v[1] = true;
        v[6] = true;
        assert_eq!(crash_likelihood(&v).unwrap(), 0.25);
    }

    #[test]
    fn activity_examples() {
        let curv: Vec<f64> = (0..20).map(|t| (t as f64 * 0.3).sin()).collect();
        assert!((activity_correlation(&[curv.clone(), curv.clone()], &curv).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(activity_correlation(&[vec![0.2; 20]], &curv).unwrap(), 0.0);
        assert!(activity_correlation(&[vec![0.0; 2]], &[0.0, 1.0]).is_err());
        let lagged: Vec<f64> = (0..20).map(|t| ((t as f64 - 2.0) * 0.3).sin()).collect();
        assert!(activity_correlation_lagged(&[lagged.clone()], &curv, 3).unwrap() > 1.0 - 1e-12);
        assert!(activity_correlation(&[lagged], &curv).unwrap() < 0.99);
    }

    #[test]
    fn trajectory_examples() {
        let a = [0.1, 0.3, -0.2, 0.0];
        assert!((trajectory_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(trajectory_similarity(&[0.0; 4], &[0.0; 3]).unwrap(), 1.0);
        assert_eq!(trajectory_similarity(&[0.0; 4], &[0.1; 4]).unwrap(), 0.0);
        assert_eq!(trajectory_similarity(&[0.0; 4], &a).unwrap(), 0.0);
    }

    #[test]
    fn summary_population_std() {
        let s = summarize(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(summarize(&[0.7]).std, 0.0);
    }
}
