//! AdamW with decoupled weight decay and a one-cycle learning-rate schedule.
//! After every step all parameters and moments are rounded through f32, so a
//! checkpoint (which stores f32) reloads without perturbing training at all.

use crate::autodiff::Arr;
use crate::nn::ParamSet;

pub fn quantize_f32(a: &mut Arr) {
    a.mapv_inplace(|v| v as f32 as f64);
}

/// One-cycle shape: cosine warmup from `peak/div` to `peak` over the first
/// 30% of training, cosine anneal to `peak/1e4` over the rest.
pub fn one_cycle_lr(peak: f64, step: usize, total: usize) -> f64 {
    let total = total.max(1);
    let warm = ((total as f64) * 0.3).round() as usize;
    let warm = warm.clamp(1, total);
    let cospart = |frac: f64| (1.0 - (std::f64::consts::PI * frac).cos()) / 2.0;
    if step < warm {
        let lo = peak / 25.0;
        lo + (peak - lo) * cospart(step as f64 / warm as f64)
    } else if step >= total {
        peak / 1e4
    } else {
        let lo = peak / 1e4;
        let frac = (step - warm) as f64 / (total - warm).max(1) as f64;
        peak - (peak - lo) * cospart(frac)
    }
}

pub struct AdamW {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: usize,
    step: usize,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl AdamW {
    pub fn new(params: &ParamSet, peak_lr: f64, weight_decay: f64, total_steps: usize) -> Self {
        let zeros = |_: &str, value: &Arr| Arr::zeros(value.raw_dim());
        AdamW {
            peak_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
            step: 0,
            m: params.iter().map(|(n, v)| zeros(n, v)).collect(),
            v: params.iter().map(|(n, v)| zeros(n, v)).collect(),
        }
    }

    /// Steps completed so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Learning rate the *next* call to [`step`](Self::step) will use.
    pub fn current_lr(&self) -> f64 {
        one_cycle_lr(self.peak_lr, self.step, self.total_steps)
    }

    /// Applies one update. `grads` must be index-aligned with `params` (a
    /// missing gradient is a zero gradient).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Arr>]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        let lr = self.current_lr();
        self.step += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, id) in params.ids().enumerate().collect::<Vec<_>>() {
            let Some(g) = grads[i].as_ref() else { continue };
            let p = params.value_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::azip!((p in p, m in m, v in v, &g in g) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * ((*m / bc1) / ((*v / bc2).sqrt() + eps) + wd * *p);
            });
        }
        for (i, id) in params.ids().enumerate().collect::<Vec<_>>() {
            quantize_f32(params.value_mut(id));
            quantize_f32(&mut self.m[i]);
            quantize_f32(&mut self.v[i]);
        }
    }

    /// Moment vectors plus step counter, for checkpointing.
    pub fn state(&self) -> (&[Arr], &[Arr], usize) {
        (&self.m, &self.v, self.step)
    }

    /// Restores moments and step counter saved by [`state`](Self::state).
    pub fn restore(&mut self, m: Vec<Arr>, v: Vec<Arr>, step: usize) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "moment count mismatch");
        self.m = m;
        self.v = v;
        self.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn schedule_warms_up_peaks_and_decays() {
        let total = 100;
        let peak = 1e-3;
        let warm = 30;
        let lr0 = one_cycle_lr(peak, 0, total);
        assert!((lr0 - peak / 25.0).abs() < 1e-12);
        let at_peak = one_cycle_lr(peak, warm, total);
        assert!((at_peak - peak).abs() < 1e-12);
        for s in 1..=warm {
            assert!(one_cycle_lr(peak, s, total) >= one_cycle_lr(peak, s - 1, total));
        }
        for s in warm + 1..total {
            assert!(one_cycle_lr(peak, s, total) <= one_cycle_lr(peak, s - 1, total));
        }
        assert!(one_cycle_lr(peak, total, total) <= peak / 1e3);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut params = ParamSet::new();
        let id = params.add("w", Arr::from_elem(IxDyn(&[4]), 5.0));
        let mut opt = AdamW::new(&params, 0.1, 0.0, 200);
        for _ in 0..200 {
            let g = params.value(id).mapv(|w| 2.0 * w);
            opt.step(&mut params, &[Some(g)]);
        }
        for &w in params.value(id).iter() {
            assert!(w.abs() < 0.3, "did not approach minimum: {w}");
        }
    }

    #[test]
    fn decay_shrinks_without_gradient_signal() {
        let mut params = ParamSet::new();
        let id = params.add("w", Arr::from_elem(IxDyn(&[2]), 1.0));
        let mut opt = AdamW::new(&params, 1e-2, 0.5, 10);
        for _ in 0..10 {
            let g = Arr::zeros(IxDyn(&[2]));
            opt.step(&mut params, &[Some(g)]);
        }
        for &w in params.value(id).iter() {
            assert!(w < 1.0 && w > 0.9, "decay should shrink slightly: {w}");
        }
    }

    #[test]
    fn values_stay_on_f32_grid() {
        let mut params = ParamSet::new();
        let id = params.add("w", Arr::from_elem(IxDyn(&[3]), 0.1));
        let mut opt = AdamW::new(&params, 1e-3, 0.01, 50);
        let g = Arr::from_elem(IxDyn(&[3]), 0.77);
        opt.step(&mut params, &[Some(g)]);
        for &w in params.value(id).iter() {
            assert_eq!(w, w as f32 as f64);
        }
        let (m, v, step) = opt.state();
        assert_eq!(step, 1);
        for arr in m.iter().chain(v) {
            for &x in arr.iter() {
                assert_eq!(x, x as f32 as f64);
            }
        }
    }
}
