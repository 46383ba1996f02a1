//! Overfit a small model on a handful of synthetic samples.
//!
//! Uses a reduced width stack so a few hundred steps run in minutes on
//! one core. The per-stage losses land in `train_log.csv`; the printout
//! tracks the total every 25 steps.

use evidepth::config::RunConfig;
use evidepth::synth::{build_split, SceneSpec};
use evidepth::train::Trainer;

fn main() -> evidepth::Result<()> {
    let dir = std::env::temp_dir().join("evidepth-example-train");
    let spec = SceneSpec {
        seed: 3,
        n_objects: 3,
        ..SceneSpec::default()
    };
    let manifest = build_split(&spec, 4, &dir)?;

    let mut cfg = RunConfig::default();
    cfg.widths = [8, 12, 16];
    cfg.cf = 8;
    cfg.c = 16;
    cfg.n_tokens = 8;
    cfg.ch = 16;
    cfg.g1 = 2;
    cfg.g2 = 2;
    cfg.d_min = 3.5;
    cfg.d_max = 14.0;
    cfg.steps = 200;
    cfg.lr = 1e-3;
    cfg.train_manifest = manifest.to_string_lossy().into_owned();
    cfg.out_dir = dir.join("run").to_string_lossy().into_owned();

    let mut trainer = Trainer::new(cfg.clone())?;
    for step in 1..=cfg.steps {
        let stats = trainer.step()?;
        if step % 25 == 0 || step == 1 {
            println!("step {step:4}  lr {:.2e}  loss {:.4}", stats.lr, stats.total);
        }
    }
    Ok(())
}
