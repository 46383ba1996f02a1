use evidepth::config::RunConfig;
use evidepth::metrics::{aggregate, evaluate};
use evidepth::pipeline::{infer, predict_depth};
use evidepth::synth::{generate_sample, Sample, SceneSpec};
use evidepth::train::Trainer;
use std::time::Instant;

fn si_value(pred: &ndarray::Array2<f64>, gt: &evidepth::loss::GroundTruth, lambda: f64) -> f64 {
    let mut deltas = Vec::new();
    for ((&p, &g), &v) in pred.iter().zip(gt.depth.iter()).zip(gt.valid.iter()) {
        if v {
            deltas.push(p.ln() - g.ln());
        }
    }
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    (var + lambda * mean * mean).sqrt()
}

fn main() -> evidepth::Result<()> {
    let t0 = Instant::now();
    let mut samples: Vec<Sample> = Vec::new();
    for (i, night) in (0..8).map(|i| (i, i >= 4)) {
        let spec = SceneSpec {
            seed: 100,
            night,
            ..SceneSpec::default()
        };
        samples.push(generate_sample(&spec, i as u64)?);
    }

    let mut cfg = RunConfig::default();
    cfg.widths = [24, 32, 48];
    cfg.cf = 32;
    cfg.c = 48;
    cfg.n_tokens = 16;
    cfg.ch = 48;
    cfg.g1 = 2;
    cfg.g2 = 2;
    cfg.d_min = 3.5;
    cfg.d_max = 14.0;
    cfg.lr = 1.5e-3;
    cfg.steps = 2000;
    cfg.batch = 2;
    cfg.train_manifest = String::from("unused");
    let steps = cfg.steps;

    let mut trainer = Trainer::with_samples(cfg.clone(), samples)?;
    for step in 1..=steps {
        let stats = trainer.step()?;
        if step % 100 == 0 {
            println!(
                "step {step:4}  lr {:.2e}  loss {:.4}  [{:.1}s]",
                stats.lr,
                stats.total,
                t0.elapsed().as_secs_f64()
            );
        }
    }

    let priors = trainer.cfg.priors()?;
    let model = &trainer.model;
    let mut reports = Vec::new();
    let mut worst_si = 0.0f64;
    let (mut day_s, mut night_s) = (0.0, 0.0);
    for (i, s) in trainer.data.iter().enumerate() {
        let pred = predict_depth(model, &priors, &s.image, &s.grid)?;
        let si = si_value(&pred, &s.gt, 0.15);
        worst_si = worst_si.max(si);
        reports.push(evaluate(&pred, &s.gt)?);
        let art = infer(model, &priors, &s.image, &s.grid)?;
        let mean: f64 = art.mean_s_evt.iter().sum::<f64>() / art.mean_s_evt.len() as f64;
        if i < 4 {
            day_s += mean / 4.0;
        } else {
            night_s += mean / 4.0;
        }
        println!("sample {i}: si {si:.4}  a1 {:.4}", reports.last().unwrap().a1);
    }
    let agg = aggregate(&reports)?;
    println!("aggregate a1 {:.4}  worst si {worst_si:.4}", agg.a1);
    println!("mean s_evt day {day_s:.4}  night {night_s:.4}");
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
