//! Inspect what the token layer attends to and how the fusion scores
//! split between modalities.
//!
//! Runs the same scene twice, once as a clean daylight frame and once
//! in night mode (washed-out frame, events untouched), and prints the
//! mean event-branch score for each. Attention maps land next to the
//! depth output as PGM images, one per token.

use evidepth::loss::DepthPriors;
use evidepth::model::{DepthModel, ModelConfig};
use evidepth::pipeline::infer;
use evidepth::raster::write_pgm_scaled;
use evidepth::synth::{generate_sample, SceneSpec};

fn main() -> evidepth::Result<()> {
    let dir = std::env::temp_dir().join("evidepth-example-attn");
    std::fs::create_dir_all(&dir)?;

    let cfg = ModelConfig {
        widths: [8, 12, 16],
        cf: 8,
        c: 16,
        n_tokens: 8,
        ch: 16,
        ..ModelConfig::default()
    };
    let model = DepthModel::new(cfg, 1);
    let priors = DepthPriors::default();

    for night in [false, true] {
        let spec = SceneSpec {
            seed: 9,
            night,
            ..SceneSpec::default()
        };
        let sample = generate_sample(&spec, 0)?;
        let grid = sample.events.voxelize(cfg.bins)?;
        let art = infer(&model, &priors, &sample.image, &grid)?;
        let label = if night { "night" } else { "day" };
        let scores: Vec<String> = art.mean_s_evt.iter().map(|v| format!("{v:.4}")).collect();
        println!("{label:5}: mean event score per iteration [{}]", scores.join(", "));
        if !night {
            for (k, map) in art.attention.iter().enumerate() {
                write_pgm_scaled(map, &dir.join(format!("token{k:03}.pgm")))?;
            }
            println!("       wrote {} attention maps to {}", art.attention.len(), dir.display());
        }
    }
    println!("(untrained weights; training on mixed data is what pushes night toward events)");
    Ok(())
}
