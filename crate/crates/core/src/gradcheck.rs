//! End-to-end finite-difference verification: perturb individual parameters,
//! re-evaluate the full multi-stage objective, and compare against the tape's
//! analytic gradients. Parameters stay in f64 while perturbed, so the check
//! runs at full double precision.

use crate::autodiff::Tape;
use crate::error::Result;
use crate::events::VoxelGrid;
use crate::loss::{multi_stage_loss, DepthPriors, GroundTruth, LossConfig};
use crate::model::{DepthModel, ModelConfig};
use crate::synth::{generate_sample, SceneSpec};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    /// Coordinates sampled per parameter tensor (tensors smaller than this
    /// are checked exhaustively).
    pub coords_per_tensor: usize,
    pub eps: f64,
    pub seed: u64,
    /// Relative-error denominator floor. Some coordinates have exactly zero
    /// gradient (a key bias shifts every attention logit equally and cancels
    /// in the softmax); there the difference quotient measures pure roundoff,
    /// about |loss| * 2^-52 / eps in absolute terms, and the floor keeps that
    /// noise from registering as error.
    pub rel_floor: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            // eps trades truncation error (shrinks as eps^2; the untrained
            // model has third derivatives around 1e9 on stem biases) against
            // difference-quotient roundoff (grows as 1/eps). 2e-6 puts both
            // near 1e-5 on the micro scenario.
            coords_per_tensor: 4,
            eps: 2e-6,
            seed: 0,
            rel_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_checked: usize,
    /// Parameter name, flat index, finite difference, analytic value at the
    /// worst coordinate.
    pub worst: (String, usize, f64, f64),
}

struct Case<'a> {
    image: &'a Array3<f64>,
    grid: &'a VoxelGrid,
    gt: &'a GroundTruth,
    priors: &'a DepthPriors,
    lcfg: &'a LossConfig,
}

fn loss_value(model: &DepthModel, case: &Case) -> Result<f64> {
    let mut t = Tape::inference();
    let p = model.params.bind(&mut t);
    let out = model.forward(&mut t, &p, case.image, case.grid)?;
    let loss = multi_stage_loss(&mut t, &out.stages, case.gt, case.priors, case.lcfg)?;
    Ok(t.value_scalar(loss.total))
}

/// Checks every parameter tensor of `model` on the given sample.
pub fn check_model(
    model: &mut DepthModel,
    image: &Array3<f64>,
    grid: &VoxelGrid,
    gt: &GroundTruth,
    priors: &DepthPriors,
    lcfg: &LossConfig,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    let case = Case {
        image,
        grid,
        gt,
        priors,
        lcfg,
    };
    let ids: Vec<_> = model.params.ids().collect();
    let analytic: Vec<ndarray::ArrayD<f64>> = {
        let mut t = Tape::new();
        let p = model.params.bind(&mut t);
        let out = model.forward(&mut t, &p, case.image, case.grid)?;
        let loss = multi_stage_loss(&mut t, &out.stages, case.gt, case.priors, case.lcfg)?;
        let grads = t.backward(loss.total);
        ids.iter()
            .enumerate()
            .map(|(i, &id)| {
                grads
                    .get(p.vars()[i])
                    .cloned()
                    .unwrap_or_else(|| ndarray::ArrayD::zeros(model.params.value(id).raw_dim()))
            })
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        n_checked: 0,
        worst: (String::new(), 0, 0.0, 0.0),
    };
    for (pi, &id) in ids.iter().enumerate() {
        let n = model.params.value(id).len();
        let coords: Vec<usize> = if n <= settings.coords_per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, settings.coords_per_tensor).into_vec()
        };
        for ci in coords {
            let orig = model.params.value(id).as_slice().unwrap()[ci];
            let eval_at = |v: f64, model: &mut DepthModel| -> Result<f64> {
                model.params.value_mut(id).as_slice_mut().unwrap()[ci] = v;
                loss_value(model, &case)
            };
            let plus = eval_at(orig + settings.eps, model)?;
            let minus = eval_at(orig - settings.eps, model)?;
            model.params.value_mut(id).as_slice_mut().unwrap()[ci] = orig;
            let fd = (plus - minus) / (2.0 * settings.eps);
            let ad = analytic[pi].as_slice().unwrap()[ci];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(settings.rel_floor);
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (model.params.name(id).to_string(), ci, fd, ad);
            }
        }
    }
    Ok(report)
}

/// The standard micro scenario: 16x16 synthetic sample, micro model, every
/// tensor sampled. This is what the `grad-check` command runs.
pub fn micro_grad_check(settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let cfg = ModelConfig::micro();
    let mut model = DepthModel::new(cfg, 40);
    let spec = SceneSpec {
        height: 16,
        width: 16,
        n_objects: 2,
        window_us: 20_000,
        ..SceneSpec::default()
    };
    let sample = generate_sample(&spec, 0)?;
    let grid = sample.events.voxelize(cfg.bins)?;
    let priors = DepthPriors::default();
    let lcfg = LossConfig::new(cfg.g2);
    check_model(
        &mut model,
        &sample.image,
        &grid,
        &sample.gt,
        &priors,
        &lcfg,
        settings,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_model_passes_spot_check() {
        let settings = GradCheckSettings {
            coords_per_tensor: 1,
            ..GradCheckSettings::default()
        };
        let report = micro_grad_check(&settings).unwrap();
        assert!(report.n_checked > 50);
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
