//! Glue between checkpoints, datasets, and the user-facing commands:
//! voxelize, evaluate, infer. Everything here runs on an inference tape and
//! is deterministic per checkpoint.

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::events::{read_events, VoxelGrid};
use crate::loss::{denormalize_map, DepthPriors};
use crate::metrics::{aggregate, evaluate, MetricReport};
use crate::model::DepthModel;
use crate::raster::{write_depth, write_pgm_scaled, write_voxel_planes};
use crate::synth::{load_sample, read_manifest, Sample};
use ndarray::Array2;
use std::path::{Path, PathBuf};

/// Rebuilds the model a checkpoint was trained with and loads its weights.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(DepthModel, DepthPriors)> {
    let mut model = DepthModel::new(ck.config.model_config(), 0);
    ck.apply(&mut model.params)?;
    Ok((model, ck.config.priors()?))
}

/// One forward pass to a metric depth map (final stage, denormalized).
pub fn predict_depth(
    model: &DepthModel,
    priors: &DepthPriors,
    image: &ndarray::Array3<f64>,
    grid: &VoxelGrid,
) -> Result<Array2<f64>> {
    let mut t = Tape::inference();
    let p = model.params.bind(&mut t);
    let out = model.forward(&mut t, &p, image, grid)?;
    let last = *out.stages.last().expect("model emits at least one stage");
    let (h, w) = grid.sensor_size();
    let flat = t.value(last);
    let map = Array2::from_shape_vec((h, w), flat.iter().copied().collect())
        .expect("stage map matches sensor size");
    Ok(denormalize_map(&map, priors))
}

/// Everything `infer` can produce in one pass.
pub struct InferArtifacts {
    pub depth: Array2<f64>,
    /// Per-token attention over working-scale pixels, row-major `[h, w]`.
    pub attention: Vec<Array2<f64>>,
    /// Per-stage denormalized depth, earliest first.
    pub stages: Vec<Array2<f64>>,
    /// Mean event-branch score per discretization iteration.
    pub mean_s_evt: Vec<f64>,
}

pub fn infer(
    model: &DepthModel,
    priors: &DepthPriors,
    image: &ndarray::Array3<f64>,
    grid: &VoxelGrid,
) -> Result<InferArtifacts> {
    let mut t = Tape::inference();
    let p = model.params.bind(&mut t);
    let out = model.forward(&mut t, &p, image, grid)?;
    let (h, w) = grid.sensor_size();
    let stages: Vec<Array2<f64>> = out
        .stages
        .iter()
        .map(|&s| {
            let flat = t.value(s);
            let map = Array2::from_shape_vec((h, w), flat.iter().copied().collect())
                .expect("stage map matches sensor size");
            denormalize_map(&map, priors)
        })
        .collect();
    let factor = model.cfg.scale.factor();
    let (wh, ww) = (h / factor, w / factor);
    let attn = t.value(out.token_attn);
    let n_tokens = attn.shape()[1];
    let attention = (0..n_tokens)
        .map(|k| Array2::from_shape_fn((wh, ww), |(y, x)| attn[[y * ww + x, k]]))
        .collect();
    let mean_s_evt = out
        .scores
        .iter()
        .map(|pair| {
            let v = t.value(pair.s_evt);
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    Ok(InferArtifacts {
        depth: stages.last().cloned().expect("at least one stage"),
        attention,
        stages,
        mean_s_evt,
    })
}

/// Metrics over a manifest with any prediction source. Missing files are all
/// reported at once before any sample is evaluated.
pub fn evaluate_manifest(
    manifest: &Path,
    mut predict: impl FnMut(&Sample) -> Result<Array2<f64>>,
) -> Result<MetricReport> {
    let rows = read_manifest(manifest)?;
    if rows.is_empty() {
        return Err(Error::data(format!(
            "manifest {} lists no samples",
            manifest.display()
        )));
    }
    let missing: Vec<String> = rows
        .iter()
        .flat_map(|r| [&r.image, &r.events, &r.depth])
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::data(format!("missing files: {}", missing.join(", "))));
    }
    let mut reports = Vec::with_capacity(rows.len());
    for row in &rows {
        let sample = load_sample(row)?;
        let pred = predict(&sample)?;
        reports.push(evaluate(&pred, &sample.gt)?);
    }
    aggregate(&reports)
}

/// Checkpoint-driven evaluation of one or more manifests; returns one labeled
/// row per manifest.
pub fn run_eval(ck: &Checkpoint, manifests: &[PathBuf]) -> Result<Vec<(String, MetricReport)>> {
    let (model, priors) = model_from_checkpoint(ck)?;
    let bins = ck.config.bins;
    let mut rows = Vec::new();
    for path in manifests {
        let label = path
            .parent()
            .and_then(|d| d.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let report = evaluate_manifest(path, |sample| {
            let grid = sample.events.voxelize(bins)?;
            predict_depth(&model, &priors, &sample.image, &grid)
        })?;
        rows.push((label, report));
    }
    Ok(rows)
}

/// `infer` command: read inputs, run the model, write the depth raster and
/// any requested dumps.
pub struct InferRequest<'a> {
    pub image: &'a Path,
    pub events: &'a Path,
    pub out: &'a Path,
    pub dump_attn: Option<&'a Path>,
    pub dump_stages: Option<&'a Path>,
}

pub fn run_infer(ck: &Checkpoint, req: &InferRequest) -> Result<InferArtifacts> {
    let (model, priors) = model_from_checkpoint(ck)?;
    let image = crate::raster::read_ppm(req.image)?;
    let events = read_events(req.events)?;
    let grid = events.voxelize(ck.config.bins)?;
    let art = infer(&model, &priors, &image, &grid)?;
    write_depth(&art.depth, req.out)?;
    if let Some(dir) = req.dump_attn {
        std::fs::create_dir_all(dir)?;
        for (k, map) in art.attention.iter().enumerate() {
            write_pgm_scaled(map, &dir.join(format!("token{k:03}.pgm")))?;
        }
    }
    if let Some(dir) = req.dump_stages {
        std::fs::create_dir_all(dir)?;
        for (j, map) in art.stages.iter().enumerate() {
            write_depth(map, &dir.join(format!("stage{j}.dpt")))?;
        }
    }
    Ok(art)
}

/// `voxelize` command: optional trailing window of length `window_us` ending
/// at the last event, then bilinear time binning, written as stacked planes.
pub fn run_voxelize(
    events_path: &Path,
    bins: usize,
    window_us: Option<u64>,
    out: &Path,
) -> Result<VoxelGrid> {
    let stream = read_events(events_path)?;
    let grid = match window_us {
        None => stream.voxelize(bins)?,
        Some(t) => {
            let last = stream
                .events()
                .last()
                .ok_or_else(|| Error::data("event stream is empty"))?
                .t;
            stream.voxelize_window(bins, last.saturating_sub(t), last)?
        }
    };
    write_voxel_planes(&grid.data, out)?;
    Ok(grid)
}
