//! Depth evaluation metrics: absolute relative error, RMS, log RMS, and
//! inlier ratios at thresholds 1.25^i, all over the valid mask.
//!
//! Aggregation across images is pixel-weighted: the per-image error moments
//! are combined as valid-count-weighted means and the root metrics recombined
//! from mean squares, so the result equals a single evaluation over the
//! concatenated pixels.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::loss::GroundTruth;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub rel: f64,
    pub rms: f64,
    pub rmslog: f64,
    pub n_valid: usize,
}

impl MetricReport {
    /// Row in the conventional column order `a1 a2 a3 REL RMS RMSlog`.
    pub fn table_row(&self) -> String {
        format!(
            "{:.4} {:.4} {:.4} {:.4} {:.4} {:.4}",
            self.a1, self.a2, self.a3, self.rel, self.rms, self.rmslog
        )
    }
}

/// Compare one metric-depth prediction against masked ground truth.
pub fn evaluate(pred: &Array2<f64>, gt: &GroundTruth) -> Result<MetricReport> {
    if pred.dim() != gt.depth.dim() {
        return Err(Error::data("prediction/ground-truth shape mismatch"));
    }
    let mut n = 0usize;
    let (mut rel, mut sq, mut sqlog) = (0.0f64, 0.0f64, 0.0f64);
    let (mut c1, mut c2, mut c3) = (0usize, 0usize, 0usize);
    let (t1, t2, t3) = (1.25, 1.25f64.powi(2), 1.25f64.powi(3));
    for ((&d, &g), &v) in pred.iter().zip(gt.depth.iter()).zip(gt.valid.iter()) {
        if !v {
            continue;
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::numeric(format!(
                "nonpositive or non-finite predicted depth {d}"
            )));
        }
        n += 1;
        rel += (d - g).abs() / g;
        sq += (d - g).powi(2);
        sqlog += (d.ln() - g.ln()).powi(2);
        let ratio = (d / g).max(g / d);
        if ratio < t1 {
            c1 += 1;
        }
        if ratio < t2 {
            c2 += 1;
        }
        if ratio < t3 {
            c3 += 1;
        }
    }
    if n == 0 {
        return Err(Error::data("empty evaluation mask"));
    }
    let nf = n as f64;
    Ok(MetricReport {
        a1: c1 as f64 / nf,
        a2: c2 as f64 / nf,
        a3: c3 as f64 / nf,
        rel: rel / nf,
        rms: (sq / nf).sqrt(),
        rmslog: (sqlog / nf).sqrt(),
        n_valid: n,
    })
}

/// Pixel-weighted combination of per-image reports.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::data("no reports to aggregate"));
    }
    let total: usize = reports.iter().map(|r| r.n_valid).sum();
    if total == 0 {
        return Err(Error::data("no valid pixels across reports"));
    }
    let tf = total as f64;
    let wmean = |f: &dyn Fn(&MetricReport) -> f64| -> f64 {
        reports.iter().map(|r| f(r) * r.n_valid as f64).sum::<f64>() / tf
    };
    Ok(MetricReport {
        a1: wmean(&|r| r.a1),
        a2: wmean(&|r| r.a2),
        a3: wmean(&|r| r.a3),
        rel: wmean(&|r| r.rel),
        rms: wmean(&|r| r.rms * r.rms).sqrt(),
        rmslog: wmean(&|r| r.rmslog * r.rmslog).sqrt(),
        n_valid: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn dense(vals: &Array2<f64>) -> GroundTruth {
        GroundTruth::dense(vals.clone()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = dense(&arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let r = evaluate(&gt.depth.clone(), &gt).unwrap();
        assert_eq!((r.a1, r.a2, r.a3), (1.0, 1.0, 1.0));
        assert_eq!((r.rel, r.rms, r.rmslog), (0.0, 0.0, 0.0));
        assert_eq!(r.n_valid, 4);
    }

    #[test]
    fn double_is_outside_all_thresholds() {
        let gt = dense(&arr2(&[[1.0]]));
        let r = evaluate(&arr2(&[[2.0]]), &gt).unwrap();
        assert_eq!((r.a1, r.a2, r.a3), (0.0, 0.0, 0.0));
        assert_eq!(r.rel, 1.0);
        assert_eq!(r.rms, 1.0);
        assert!((r.rmslog - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn twenty_percent_inside_first_threshold() {
        let gt = dense(&arr2(&[[1.0]]));
        let r = evaluate(&arr2(&[[1.2]]), &gt).unwrap();
        assert_eq!((r.a1, r.a2, r.a3), (1.0, 1.0, 1.0));
        assert!((r.rel - 0.2).abs() < 1e-12);
    }

    #[test]
    fn threshold_is_strict() {
        let gt = dense(&arr2(&[[1.0]]));
        let r = evaluate(&arr2(&[[1.25]]), &gt).unwrap();
        assert_eq!(r.a1, 0.0);
        assert_eq!(r.a2, 1.0);
    }

    #[test]
    fn ratio_is_symmetric() {
        let gt_a = dense(&arr2(&[[1.0, 3.0]]));
        let r_a = evaluate(&arr2(&[[1.3, 2.0]]), &gt_a).unwrap();
        let gt_b = dense(&arr2(&[[1.3, 2.0]]));
        let r_b = evaluate(&arr2(&[[1.0, 3.0]]), &gt_b).unwrap();
        assert_eq!((r_a.a1, r_a.a2, r_a.a3), (r_b.a1, r_b.a2, r_b.a3));
    }

    #[test]
    fn mask_excludes_pixels() {
        let depth = arr2(&[[1.0, 1.0]]);
        let mut valid = Array2::from_elem((1, 2), true);
        valid[[0, 1]] = false;
        let gt = GroundTruth::new(depth, valid).unwrap();
        let r = evaluate(&arr2(&[[1.0, 50.0]]), &gt).unwrap();
        assert_eq!(r.n_valid, 1);
        assert_eq!(r.rel, 0.0);
    }

    #[test]
    fn empty_mask_is_error() {
        let gt = GroundTruth::new(arr2(&[[1.0]]), Array2::from_elem((1, 1), false)).unwrap();
        assert!(evaluate(&arr2(&[[1.0]]), &gt).is_err());
    }

    #[test]
    fn aggregate_identity_and_rms_recombination() {
        let gt = dense(&arr2(&[[1.0]]));
        let r0 = evaluate(&arr2(&[[1.0]]), &gt).unwrap();
        let r2 = evaluate(&arr2(&[[3.0]]), &gt).unwrap();
        let single = aggregate(&[r0]).unwrap();
        assert_eq!(single, r0);
        let both = aggregate(&[r0, r2]).unwrap();
        assert!((both.rms - 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(both.n_valid, 2);
        let same = aggregate(&[r2, r2]).unwrap();
        assert_eq!((same.rms, same.rel), (r2.rms, r2.rel));
    }

    #[test]
    fn thresholds_nest() {
        let gt = dense(&arr2(&[[1.0, 1.0, 1.0, 1.0]]));
        let r = evaluate(&arr2(&[[1.1, 1.4, 1.8, 2.5]]), &gt).unwrap();
        assert!(r.a1 <= r.a2 && r.a2 <= r.a3);
        assert_eq!((r.a1, r.a2, r.a3), (0.25, 0.5, 0.75));
    }
}
