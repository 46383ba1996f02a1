//! Train briefly, checkpoint, reload, and evaluate on the training split.
//!
//! The numbers are poor at this budget; the point is the round trip:
//! config -> training -> checkpoint on disk -> reload -> metric table.

use evidepth::config::RunConfig;
use evidepth::pipeline::run_eval;
use evidepth::synth::{build_split, SceneSpec};
use evidepth::{checkpoint, train};

fn main() -> evidepth::Result<()> {
    let dir = std::env::temp_dir().join("evidepth-example-eval");
    let spec = SceneSpec {
        seed: 5,
        ..SceneSpec::default()
    };
    let manifest = build_split(&spec, 3, &dir)?;

    let mut cfg = RunConfig::default();
    cfg.widths = [8, 12, 16];
    cfg.cf = 8;
    cfg.c = 16;
    cfg.n_tokens = 8;
    cfg.ch = 16;
    cfg.g1 = 2;
    cfg.g2 = 2;
    cfg.steps = 30;
    cfg.checkpoint_every = 1000;
    cfg.train_manifest = manifest.to_string_lossy().into_owned();
    cfg.out_dir = dir.join("run").to_string_lossy().into_owned();
    let report = train::train(&cfg)?;
    println!("trained {} steps, final loss {:.4}", report.steps_run, report.final_total);

    let ck = checkpoint::load(&report.checkpoint_path)?;
    for (label, row) in run_eval(&ck, &[manifest])? {
        println!("{label}: {} over {} valid pixels", row.table_row(), row.n_valid);
    }
    Ok(())
}
