//! Depth normalization and the multi-stage scale-invariant log loss.
//!
//! Networks predict a normalized map `d_hat in [0,1]`; metric depth is
//! recovered as `d = d_max * exp((d_max/d_min) * (d_hat - 1))`, so `d_hat = 1`
//! lands exactly on `d_max` and the representable range spans
//! `[d_max * exp(-d_max/d_min), d_max]`. Supervision compares log metric
//! depth on valid pixels only, with later stages weighted geometrically
//! heavier.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Scene depth range the normalization is anchored to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthPriors {
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthPriors {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        if !(d_min > 0.0 && d_max > d_min) {
            return Err(Error::data(format!(
                "depth priors need 0 < d_min < d_max, got d_min={d_min}, d_max={d_max}"
            )));
        }
        Ok(DepthPriors { d_min, d_max })
    }

    /// Exponent scale `d_max / d_min`.
    pub fn k(&self) -> f64 {
        self.d_max / self.d_min
    }
}

impl Default for DepthPriors {
    fn default() -> Self {
        DepthPriors {
            d_min: 2.0,
            d_max: 80.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub stages: usize,
}

impl LossConfig {
    pub fn new(stages: usize) -> Self {
        LossConfig {
            alpha: 10.0,
            lambda: 0.15,
            gamma: 0.8,
            stages,
        }
    }
}

/// Ground-truth depth with a validity mask (sparse supervision).
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub depth: Array2<f64>,
    pub valid: Array2<bool>,
}

impl GroundTruth {
    pub fn new(depth: Array2<f64>, valid: Array2<bool>) -> Result<Self> {
        if depth.dim() != valid.dim() {
            return Err(Error::data("ground truth depth/mask shape mismatch"));
        }
        for (d, &v) in depth.iter().zip(valid.iter()) {
            if v && !(*d > 0.0 && d.is_finite()) {
                return Err(Error::data(format!(
                    "valid ground-truth pixel with nonpositive depth {d}"
                )));
            }
        }
        Ok(GroundTruth { depth, valid })
    }

    /// Mark every pixel valid.
    pub fn dense(depth: Array2<f64>) -> Result<Self> {
        let valid = Array2::from_elem(depth.dim(), true);
        GroundTruth::new(depth, valid)
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Map normalized `[0,1]` values to metric depth (array form).
pub fn denormalize_map(d_hat: &Array2<f64>, priors: &DepthPriors) -> Array2<f64> {
    let k = priors.k();
    d_hat.mapv(|v| priors.d_max * (k * (v - 1.0)).exp())
}

/// Inverse of [`denormalize_map`], clamped to `[0,1]`.
pub fn normalize_map(d: &Array2<f64>, priors: &DepthPriors) -> Result<Array2<f64>> {
    if d.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::data("cannot normalize nonpositive depth"));
    }
    let k = priors.k();
    Ok(d.mapv(|v| (1.0 + (v / priors.d_max).ln() / k).clamp(0.0, 1.0)))
}

/// Tape form of [`denormalize_map`] for loss graphs.
pub fn denormalize(t: &mut Tape, d_hat: Var, priors: &DepthPriors) -> Var {
    let shifted = t.add_scalar(d_hat, -1.0);
    let scaled = t.scale(shifted, priors.k());
    let e = t.exp(scaled);
    t.scale(e, priors.d_max)
}

/// Scale-invariant log loss of one metric-depth prediction against masked
/// ground truth: `alpha * sqrt(V(delta) + lambda * E(delta)^2)` with
/// `delta = log d - log d_gt` over valid pixels. Predictions must be
/// strictly positive everywhere (the normalization guarantees this).
pub fn silog(t: &mut Tape, d_pred: Var, gt: &GroundTruth, cfg: &LossConfig) -> Result<Var> {
    let n = gt.n_valid();
    if n == 0 {
        return Err(Error::data("empty supervision"));
    }
    let shape = t.shape(d_pred).to_vec();
    assert_eq!(shape.as_slice(), &[gt.depth.dim().0, gt.depth.dim().1]);

    let mut safe_gt = gt.depth.clone();
    let mut mask = Array2::<f64>::zeros(gt.depth.dim());
    for ((g, m), &v) in safe_gt.iter_mut().zip(mask.iter_mut()).zip(gt.valid.iter()) {
        if v {
            *m = 1.0;
        } else {
            *g = 1.0;
        }
    }
    let log_gt = t.constant(safe_gt.mapv(f64::ln).into_dyn());
    let mask_c = t.constant(mask.into_dyn());

    let log_pred = t.ln(d_pred);
    let raw = t.sub(log_pred, log_gt);
    let delta = t.mul(raw, mask_c);

    let inv_n = 1.0 / n as f64;
    let sum = t.sum_all(delta);
    let mean = t.scale(sum, inv_n);
    let mean_b = t.reshape(mean, &[1, 1]);
    let spread = t.mul(mean_b, mask_c);
    let centered = t.sub(delta, spread);
    let sq = t.square(centered);
    let var_sum = t.sum_all(sq);
    let var = t.scale(var_sum, inv_n);

    let mean_sq = t.square(mean);
    let weighted = t.scale(mean_sq, cfg.lambda);
    let inside = t.add(var, weighted);
    let root = t.sqrt(inside);
    Ok(t.scale(root, cfg.alpha))
}

/// Convenience: evaluate [`silog`] on plain arrays.
pub fn silog_value(d_pred: &Array2<f64>, gt: &GroundTruth, cfg: &LossConfig) -> Result<f64> {
    let mut t = Tape::inference();
    let p = t.constant(d_pred.clone().into_dyn());
    let l = silog(&mut t, p, gt, cfg)?;
    Ok(t.value_scalar(l))
}

/// Per-stage geometric supervision weights `gamma^(stages-j)`, final stage 1.
pub fn stage_weights(stages: usize, gamma: f64) -> Vec<f64> {
    (1..=stages)
        .map(|j| gamma.powi((stages - j) as i32))
        .collect()
}

/// Loss graph of one sample: per-stage losses plus their weighted total.
pub struct StageLoss {
    pub total: Var,
    pub stages: Vec<Var>,
    pub weights: Vec<f64>,
}

/// Weighted sum of [`silog`] over per-stage normalized predictions.
/// `stage_maps` are full-resolution `[0,1]` maps, earliest stage first.
pub fn multi_stage_loss(
    t: &mut Tape,
    stage_maps: &[Var],
    gt: &GroundTruth,
    priors: &DepthPriors,
    cfg: &LossConfig,
) -> Result<StageLoss> {
    if stage_maps.len() != cfg.stages {
        return Err(Error::data(format!(
            "expected {} prediction stages, got {}",
            cfg.stages,
            stage_maps.len()
        )));
    }
    let weights = stage_weights(cfg.stages, cfg.gamma);
    let mut stages = Vec::with_capacity(stage_maps.len());
    let mut total: Option<Var> = None;
    for (&m, &w) in stage_maps.iter().zip(weights.iter()) {
        let metric = denormalize(t, m, priors);
        let l = silog(t, metric, gt, cfg)?;
        stages.push(l);
        let wl = t.scale(l, w);
        total = Some(match total {
            None => wl,
            Some(acc) => t.add(acc, wl),
        });
    }
    Ok(StageLoss {
        total: total.unwrap(),
        stages,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn priors() -> DepthPriors {
        DepthPriors::new(2.0, 80.0).unwrap()
    }

    #[test]
    fn priors_validate() {
        assert!(DepthPriors::new(0.0, 80.0).is_err());
        assert!(DepthPriors::new(5.0, 5.0).is_err());
        assert!(DepthPriors::new(-1.0, 2.0).is_err());
    }

    #[test]
    fn denormalize_top_of_range_is_exact() {
        let d = denormalize_map(&arr2(&[[1.0]]), &priors());
        assert_eq!(d[[0, 0]], 80.0);
    }

    #[test]
    fn denormalize_hand_value() {
        let d = denormalize_map(&arr2(&[[0.975]]), &priors());
        assert!((d[[0, 0]] - 80.0 / std::f64::consts::E).abs() < 1e-9);
        assert!((d[[0, 0]] - 29.430).abs() < 1e-3);
    }

    #[test]
    fn denormalize_is_monotone() {
        let d = denormalize_map(&arr2(&[[0.1, 0.5, 0.9, 1.0]]), &priors());
        for i in 1..4 {
            assert!(d[[0, i]] > d[[0, i - 1]]);
        }
    }

    #[test]
    fn normalize_roundtrip() {
        let p = priors();
        let floor = p.d_max * (-p.k()).exp();
        let ds = arr2(&[[floor * 1.01, 1.0, 10.0, 40.0, 80.0]]);
        let n = normalize_map(&ds, &p).unwrap();
        let back = denormalize_map(&n, &p);
        for (a, b) in back.iter().zip(ds.iter()) {
            assert!((a - b).abs() / b < 1e-6, "{a} vs {b}");
        }
        assert_eq!(normalize_map(&arr2(&[[80.0]]), &p).unwrap()[[0, 0]], 1.0);
        assert_eq!(normalize_map(&arr2(&[[120.0]]), &p).unwrap()[[0, 0]], 1.0);
        assert!(normalize_map(&arr2(&[[0.0]]), &p).is_err());
    }

    fn dense_gt(vals: &Array2<f64>) -> GroundTruth {
        GroundTruth::dense(vals.clone()).unwrap()
    }

    #[test]
    fn silog_zero_when_exact() {
        let gt = dense_gt(&arr2(&[[1.0, 4.0], [9.0, 16.0]]));
        let cfg = LossConfig::new(1);
        let v = silog_value(&gt.depth.clone(), &gt, &cfg).unwrap();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn silog_hand_value() {
        let gt = dense_gt(&arr2(&[[1.0, 1.0]]));
        let e = std::f64::consts::E;
        let cfg = LossConfig::new(1);
        let v = silog_value(&arr2(&[[e, e]]), &gt, &cfg).unwrap();
        assert!((v - 10.0 * 0.15f64.sqrt()).abs() < 1e-9, "{v}");
        assert!((v - 3.8730).abs() < 1e-4);
    }

    #[test]
    fn silog_scale_shift_moves_only_mean_term() {
        let gt = dense_gt(&arr2(&[[2.0, 3.0], [5.0, 7.0]]));
        let pred: Array2<f64> = arr2(&[[2.5, 2.9], [4.0, 8.0]]);
        let cfg = LossConfig::new(1);
        let c = 1.7f64;

        let delta: Vec<f64> = pred
            .iter()
            .zip(gt.depth.iter())
            .map(|(p, g)| p.ln() - g.ln())
            .collect();
        let mean = delta.iter().sum::<f64>() / 4.0;
        let var = delta.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 4.0;
        let expect = 10.0 * (var + 0.15 * (mean + c.ln()).powi(2)).sqrt();

        let got = silog_value(&pred.mapv(|v| v * c), &gt, &cfg).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn silog_ignores_invalid_pixels_bitwise() {
        let depth = arr2(&[[2.0, 3.0], [5.0, 7.0]]);
        let mut valid = Array2::from_elem((2, 2), true);
        valid[[0, 1]] = false;
        let gt = GroundTruth::new(depth, valid).unwrap();
        let cfg = LossConfig::new(1);
        let a = silog_value(&arr2(&[[2.1, 3.0], [5.2, 6.5]]), &gt, &cfg).unwrap();
        let b = silog_value(&arr2(&[[2.1, 999.0], [5.2, 6.5]]), &gt, &cfg).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn silog_empty_mask_is_error() {
        let depth = arr2(&[[2.0]]);
        let valid = Array2::from_elem((1, 1), false);
        let gt = GroundTruth::new(depth, valid).unwrap();
        let cfg = LossConfig::new(1);
        let err = silog_value(&arr2(&[[2.0]]), &gt, &cfg).unwrap_err();
        assert!(err.to_string().contains("empty supervision"));
    }

    #[test]
    fn stage_weights_for_four_stages() {
        let w = stage_weights(4, 0.8);
        let expect = [0.512, 0.64, 0.8, 1.0];
        for (a, b) in w.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(w[3], 1.0);
    }

    #[test]
    fn multi_stage_identical_stages_sum_weights() {
        let gt = dense_gt(&arr2(&[[4.0, 5.0], [6.0, 7.0]]));
        let p = priors();
        let cfg = LossConfig::new(4);
        let d_hat = normalize_map(&arr2(&[[4.4, 5.0], [6.3, 6.6]]), &p).unwrap();

        let mut t = Tape::inference();
        let maps: Vec<Var> = (0..4).map(|_| t.constant(d_hat.clone().into_dyn())).collect();
        let loss = multi_stage_loss(&mut t, &maps, &gt, &p, &cfg).unwrap();
        let total = t.value_scalar(loss.total);
        let single = t.value_scalar(loss.stages[0]);
        assert!((total - single * 2.952).abs() < 1e-9 * single.max(1.0));
    }

    #[test]
    fn multi_stage_single_stage_is_plain_silog() {
        let gt = dense_gt(&arr2(&[[4.0, 5.0]]));
        let p = priors();
        let cfg = LossConfig::new(1);
        let d_hat = normalize_map(&arr2(&[[4.5, 5.5]]), &p).unwrap();
        let mut t = Tape::inference();
        let m = t.constant(d_hat.clone().into_dyn());
        let loss = multi_stage_loss(&mut t, &[m], &gt, &p, &cfg).unwrap();
        let metric = denormalize_map(&d_hat, &p);
        let direct = silog_value(&metric, &gt, &cfg).unwrap();
        assert!((t.value_scalar(loss.total) - direct).abs() < 1e-12);
    }

    #[test]
    fn multi_stage_count_mismatch_is_error() {
        let gt = dense_gt(&arr2(&[[4.0]]));
        let p = priors();
        let cfg = LossConfig::new(3);
        let mut t = Tape::inference();
        let m = t.constant(arr2(&[[0.5]]).into_dyn());
        assert!(multi_stage_loss(&mut t, &[m], &gt, &p, &cfg).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let gt = dense_gt(&arr2(&[[4.0, 5.0, 6.0], [7.0, 8.0, 9.0], [10.0, 11.0, 12.0]]));
        let p = priors();
        let cfg = LossConfig::new(2);
        let base: Vec<Array2<f64>> = (0..2)
            .map(|s| {
                Array2::from_shape_fn((3, 3), |(y, x)| 0.3 + 0.05 * (s + y + 2 * x) as f64 % 0.6)
            })
            .collect();

        let eval = |maps: &[Array2<f64>]| -> f64 {
            let mut t = Tape::inference();
            let vars: Vec<Var> = maps.iter().map(|m| t.constant(m.clone().into_dyn())).collect();
            let l = multi_stage_loss(&mut t, &vars, &gt, &p, &cfg).unwrap();
            t.value_scalar(l.total)
        };

        let mut t = Tape::new();
        let vars: Vec<Var> = base.iter().map(|m| t.leaf(m.clone().into_dyn())).collect();
        let loss = multi_stage_loss(&mut t, &vars, &gt, &p, &cfg).unwrap();
        let grads = t.backward(loss.total);

        let eps = 1e-6;
        for (s, var) in vars.iter().enumerate() {
            let g = grads.get(*var).unwrap();
            for y in 0..3 {
                for x in 0..3 {
                    let mut plus = base.clone();
                    plus[s][[y, x]] += eps;
                    let mut minus = base.clone();
                    minus[s][[y, x]] -= eps;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                    let ad = g[[y, x]];
                    let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
                    assert!(rel < 1e-4, "stage {s} pixel ({y},{x}): fd={fd} ad={ad}");
                }
            }
        }
    }
}
