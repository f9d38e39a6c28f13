//! Saliency evaluation: AUC-Judd, NSS, CC, SIM and KLD.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::saliency::{kl_divergence, SaliencyError, SaliencyMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("{0} map has zero variance")]
    ZeroVariance(&'static str),
    #[error("{0} map sums to zero")]
    ZeroSum(&'static str),
    #[error("fixation set is empty")]
    NoFixations,
    #[error("every pixel is fixated; no negatives for AUC")]
    NoNegatives,
    #[error("fixation ({0}, {1}) lies outside the map")]
    FixationOutOfBounds(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
}

impl From<SaliencyError> for MetricError {
    fn from(e: SaliencyError) -> Self {
        match e {
            SaliencyError::DimensionMismatch(a, b, c, d) => MetricError::DimensionMismatch(a, b, c, d),
            SaliencyError::ZeroSum(which) => MetricError::ZeroSum(which),
            other => unreachable!("kl_divergence cannot fail with {other}"),
        }
    }
}

/// Fixated pixel coordinates `(x, y)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FixationSet {
    pub points: Vec<(usize, usize)>,
}

impl FixationSet {
    pub fn new(points: Vec<(usize, usize)>) -> Self {
        Self { points }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn check_bounds(&self, map: &SaliencyMap) -> Result<(), MetricError> {
        match self
            .points
            .iter()
            .find(|&&(x, y)| x >= map.width() || y >= map.height())
        {
            Some(&(x, y)) => Err(MetricError::FixationOutOfBounds(x, y)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub auc_judd: f64,
    pub nss: f64,
    pub cc: f64,
    pub sim: f64,
    pub kld: f64,
}

impl MetricReport {
    /// Unweighted mean of per-image reports.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport, MetricError> {
        if reports.is_empty() {
            return Err(MetricError::EmptyBatch);
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            auc_judd: avg(|r| r.auc_judd),
            nss: avg(|r| r.nss),
            cc: avg(|r| r.cc),
            sim: avg(|r| r.sim),
            kld: avg(|r| r.kld),
        })
    }
}

fn check_dims(a: &SaliencyMap, b: &SaliencyMap) -> Result<(), MetricError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(MetricError::DimensionMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    Ok(())
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pearson correlation between the two pixel populations.
pub fn cc(pred: &SaliencyMap, truth: &SaliencyMap) -> Result<f64, MetricError> {
    check_dims(pred, truth)?;
    let (mp, sp) = mean_and_std(pred.values());
    let (mt, st) = mean_and_std(truth.values());
    if sp == 0.0 {
        return Err(MetricError::ZeroVariance("prediction"));
    }
    if st == 0.0 {
        return Err(MetricError::ZeroVariance("truth"));
    }
    let n = pred.values().len() as f64;
    let cov = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(p, t)| (p - mp) * (t - mt))
        .sum::<f64>()
        / n;
    Ok((cov / (sp * st)).clamp(-1.0, 1.0))
}

/// Histogram intersection of the sum-normalized maps.
pub fn sim(pred: &SaliencyMap, truth: &SaliencyMap) -> Result<f64, MetricError> {
    check_dims(pred, truth)?;
    let sp: f64 = pred.values().iter().sum();
    let st: f64 = truth.values().iter().sum();
    if sp <= 0.0 {
        return Err(MetricError::ZeroSum("prediction"));
    }
    if st <= 0.0 {
        return Err(MetricError::ZeroSum("truth"));
    }
    let s = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(p, t)| (p / sp).min(t / st))
        .sum::<f64>();
    Ok(s.min(1.0))
}

/// KL(truth ‖ pred); same kernel as the training loss.
pub fn kld(pred: &SaliencyMap, truth: &SaliencyMap, epsilon: f64) -> Result<f64, MetricError> {
    Ok(kl_divergence(pred, truth, epsilon)?)
}

/// Mean z-scored prediction at the fixations (population standard deviation).
pub fn nss(pred: &SaliencyMap, fix: &FixationSet) -> Result<f64, MetricError> {
    if fix.is_empty() {
        return Err(MetricError::NoFixations);
    }
    fix.check_bounds(pred)?;
    let (mean, std) = mean_and_std(pred.values());
    if std == 0.0 {
        return Err(MetricError::ZeroVariance("prediction"));
    }
    let total: f64 = fix
        .points
        .iter()
        .map(|&(x, y)| (pred.get(x, y) - mean) / std)
        .sum();
    Ok(total / fix.points.len() as f64)
}

/// ROC area with fixated pixels as positives and all other pixels as
/// negatives.
///
/// The curve is swept over every distinct saliency value and integrated with
/// trapezoids, which makes ties between a positive and a negative worth half
/// credit. Counts stay integral until the final division, so the result is
/// identical to the Mann-Whitney `U / (n₊·n₋)`.
pub fn auc_judd(pred: &SaliencyMap, fix: &FixationSet) -> Result<f64, MetricError> {
    if fix.is_empty() {
        return Err(MetricError::NoFixations);
    }
    fix.check_bounds(pred)?;
    let w = pred.width();
    let positives: BTreeSet<usize> = fix.points.iter().map(|&(x, y)| y * w + x).collect();
    let n_pos = positives.len() as u64;
    let n_neg = pred.values().len() as u64 - n_pos;
    if n_neg == 0 {
        return Err(MetricError::NoNegatives);
    }
    let mut scored: Vec<(f64, bool)> = pred
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, positives.contains(&i)))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    // twice the area, in units of one (positive, negative) pair
    let mut doubled_area: u64 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < scored.len() {
        let level = scored[i].0;
        let (prev_tp, prev_fp) = (tp, fp);
        while i < scored.len() && scored[i].0 == level {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        doubled_area += (fp - prev_fp) * (tp + prev_tp);
    }
    Ok(doubled_area as f64 / (2 * n_pos * n_neg) as f64)
}

/// All five metrics for one image.
pub fn evaluate_all(
    pred: &SaliencyMap,
    truth: &SaliencyMap,
    fix: &FixationSet,
    epsilon: f64,
) -> Result<MetricReport, MetricError> {
    Ok(MetricReport {
        auc_judd: auc_judd(pred, fix)?,
        nss: nss(pred, fix)?,
        cc: cc(pred, truth)?,
        sim: sim(pred, truth)?,
        kld: kld(pred, truth, epsilon)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, h: usize, v: &[f64]) -> SaliencyMap {
        SaliencyMap::new(w, h, v.to_vec()).unwrap()
    }

    #[test]
    fn cc_examples() {
        let m = map(3, 1, &[0.1, 0.5, 0.3]);
        assert!((cc(&m, &m).unwrap() - 1.0).abs() < 1e-12);
        let a = map(2, 1, &[0.0, 1.0]);
        let b = map(2, 1, &[1.0, 0.0]);
        assert!((cc(&a, &b).unwrap() + 1.0).abs() < 1e-12);
        let flat = map(2, 1, &[0.4, 0.4]);
        assert_eq!(cc(&flat, &a), Err(MetricError::ZeroVariance("prediction")));
    }

    #[test]
    fn sim_examples() {
        let m = map(2, 2, &[0.1, 0.5, 0.3, 0.2]);
        assert!((sim(&m, &m).unwrap() - 1.0).abs() < 1e-12);
        let a = map(2, 1, &[0.0, 1.0]);
        let b = map(2, 1, &[1.0, 0.0]);
        assert_eq!(sim(&a, &b).unwrap(), 0.0);
        let uniform = map(2, 2, &[0.25; 4]);
        let delta = map(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!((sim(&uniform, &delta).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(sim(&SaliencyMap::zeros(2, 2), &delta), Err(MetricError::ZeroSum("prediction")));
    }

    #[test]
    fn nss_examples() {
        let n = 9usize;
        let mut v = vec![0.0; n];
        v[4] = 1.0;
        let m = map(3, 3, &v);
        let mean = 1.0 / n as f64;
        let sigma = ((1.0 - mean).powi(2) / n as f64 + (n - 1) as f64 * mean * mean / n as f64).sqrt();
        let got = nss(&m, &FixationSet::new(vec![(1, 1)])).unwrap();
        assert!((got - (1.0 - mean) / sigma).abs() < 1e-12);
        assert!(got > 0.0);

        let everywhere = FixationSet::new((0..3).flat_map(|y| (0..3).map(move |x| (x, y))).collect());
        let random = map(3, 3, &[0.1, 0.7, 0.2, 0.9, 0.4, 0.3, 0.8, 0.05, 0.6]);
        assert!(nss(&random, &everywhere).unwrap().abs() < 1e-12);

        assert_eq!(
            nss(&map(2, 1, &[0.3, 0.3]), &FixationSet::new(vec![(0, 0)])),
            Err(MetricError::ZeroVariance("prediction"))
        );
        assert_eq!(nss(&m, &FixationSet::default()), Err(MetricError::NoFixations));
    }

    #[test]
    fn auc_examples() {
        let m = map(3, 1, &[0.9, 0.1, 0.2]);
        assert_eq!(auc_judd(&m, &FixationSet::new(vec![(0, 0)])).unwrap(), 1.0);
        let flat = map(3, 1, &[0.4; 3]);
        assert_eq!(auc_judd(&flat, &FixationSet::new(vec![(1, 0)])).unwrap(), 0.5);
        assert_eq!(
            auc_judd(&map(1, 1, &[0.5]), &FixationSet::new(vec![(0, 0)])),
            Err(MetricError::NoNegatives)
        );
        assert_eq!(
            auc_judd(&m, &FixationSet::new(vec![(3, 0)])),
            Err(MetricError::FixationOutOfBounds(3, 0))
        );
    }

    #[test]
    fn self_evaluation_bundle() {
        let truth = map(3, 2, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let fix = FixationSet::new(vec![(1, 0), (2, 1)]);
        let r = evaluate_all(&truth, &truth, &fix, 1e-7).unwrap();
        assert!((r.cc - 1.0).abs() < 1e-12);
        assert!((r.sim - 1.0).abs() < 1e-12);
        assert!(r.kld.abs() < 1e-6);
        assert_eq!(r.auc_judd, 1.0);
    }

    #[test]
    fn batch_mean() {
        let a = MetricReport { auc_judd: 1.0, nss: 2.0, cc: 0.5, sim: 0.2, kld: 1.0 };
        let b = MetricReport { auc_judd: 0.5, nss: 0.0, cc: 0.1, sim: 0.4, kld: 3.0 };
        let m = MetricReport::mean(&[a, b]).unwrap();
        assert_eq!(m, MetricReport { auc_judd: 0.75, nss: 1.0, cc: 0.3, sim: 0.30000000000000004, kld: 2.0 });
        assert_eq!(MetricReport::mean(&[]), Err(MetricError::EmptyBatch));
    }
}
