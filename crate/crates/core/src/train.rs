//! Training loop: manifest in, checkpoints and a CSV loss log out. Single
//! threaded on purpose; with a fixed seed two runs produce identical curves.

use crate::autodiff::{Arr, Tape};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::events::{write_events, EventStream, VoxelGrid};
use crate::loss::{multi_stage_loss, GroundTruth};
use crate::model::DepthModel;
use crate::optim::AdamW;
use crate::raster::{write_depth, write_ppm};
use crate::synth::{load_sample, read_manifest, Sample};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

/// One sample with its events already voxelized.
pub struct PreparedSample {
    pub image: Array3<f64>,
    pub events: EventStream,
    pub grid: VoxelGrid,
    pub gt: GroundTruth,
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    /// Unweighted per-stage losses, earliest stage first, batch mean.
    pub stage_losses: Vec<f64>,
    /// Weighted multi-stage objective, batch mean.
    pub total: f64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: DepthModel,
    pub opt: AdamW,
    pub data: Vec<PreparedSample>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    last_batch: Vec<usize>,
}

fn prepare(samples: Vec<Sample>, bins: usize) -> Result<Vec<PreparedSample>> {
    samples
        .into_iter()
        .map(|s| {
            let grid = s.events.voxelize(bins)?;
            Ok(PreparedSample {
                image: s.image,
                events: s.events,
                grid,
                gt: s.gt,
            })
        })
        .collect()
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        if cfg.train_manifest.is_empty() {
            return Err(Error::usage("config sets no train_manifest"));
        }
        let rows = read_manifest(Path::new(&cfg.train_manifest))?;
        let samples = rows.iter().map(load_sample).collect::<Result<Vec<_>>>()?;
        Trainer::with_samples(cfg, samples)
    }

    /// Builds a trainer over in-memory samples (tests, fixtures).
    pub fn with_samples(cfg: RunConfig, samples: Vec<Sample>) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::data("training set is empty"));
        }
        if cfg.batch > samples.len() {
            return Err(Error::usage(format!(
                "batch {} exceeds dataset size {}",
                cfg.batch,
                samples.len()
            )));
        }
        let data = prepare(samples, cfg.bins)?;
        let model = DepthModel::new(cfg.model_config(), cfg.seed);
        let opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay, cfg.steps);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            cfg,
            model,
            opt,
            data,
            rng,
            order: vec![],
            cursor: 0,
            last_batch: vec![],
        })
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let b = self.cfg.batch;
        if self.cursor + b > self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        batch
    }

    /// Indices used by the most recent step (for diagnostics).
    pub fn last_batch(&self) -> &[usize] {
        &self.last_batch
    }

    /// Runs one optimization step and returns its losses.
    pub fn step(&mut self) -> Result<StepStats> {
        let batch = self.next_batch();
        self.last_batch = batch.clone();
        let step_no = self.opt.steps_done() + 1;
        let lr = self.opt.current_lr();
        let priors = self.cfg.priors()?;
        let lcfg = self.cfg.loss_config();

        let mut t = Tape::new();
        let p = self.model.params.bind(&mut t);
        let mut total = None;
        let mut stage_losses = vec![0.0; self.cfg.g2];
        for &i in &batch {
            let sample = &self.data[i];
            let out = self.model.forward(&mut t, &p, &sample.image, &sample.grid)?;
            let loss = multi_stage_loss(&mut t, &out.stages, &sample.gt, &priors, &lcfg)?;
            for (slot, &stage) in stage_losses.iter_mut().zip(&loss.stages) {
                *slot += t.value_scalar(stage) / batch.len() as f64;
            }
            total = Some(match total {
                None => loss.total,
                Some(acc) => t.add(acc, loss.total),
            });
        }
        let total = t.scale(total.unwrap(), 1.0 / batch.len() as f64);
        let total_value = t.value_scalar(total);
        if !total_value.is_finite() {
            return Err(Error::numeric(format!(
                "loss became {total_value} at step {step_no} (batch {batch:?})"
            )));
        }

        let grads = t.backward(total);
        let grad_vec: Vec<Option<Arr>> = p.vars().iter().map(|&v| grads.get(v).cloned()).collect();
        self.opt.step(&mut self.model.params, &grad_vec);
        for (name, value) in self.model.params.iter() {
            if value.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "parameter {name} became non-finite at step {step_no} (batch {batch:?})"
                )));
            }
        }
        Ok(StepStats {
            step: step_no,
            lr,
            stage_losses,
            total: total_value,
        })
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_total: f64,
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn dump_batch(trainer: &Trainer, out_dir: &Path, why: &str) -> Result<PathBuf> {
    let dir = out_dir.join("nan_dump");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("note.txt"), format!("{why}\n"))?;
    for &i in trainer.last_batch() {
        let s = &trainer.data[i];
        write_ppm(&s.image, &dir.join(format!("sample{i:04}.ppm")))?;
        write_events(&s.events, &dir.join(format!("sample{i:04}.evt")))?;
        write_depth(&s.gt.depth, &dir.join(format!("sample{i:04}.dpt")))?;
    }
    Ok(dir)
}

/// Full training run as configured: loss log, periodic checkpoints, final
/// checkpoint. A non-finite loss aborts after dumping the offending batch.
pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let mut trainer = Trainer::new(cfg.clone())?;

    let log_path = out_dir.join("train_log.csv");
    let mut log = std::fs::File::create(&log_path)?;
    let stage_cols: Vec<String> = (0..cfg.g2).map(|j| format!("stage{j}")).collect();
    writeln!(log, "step,lr,{},total", stage_cols.join(","))?;

    let mut last_total = f64::NAN;
    for _ in 0..cfg.steps {
        let stats = match trainer.step() {
            Ok(s) => s,
            Err(e @ Error::Numeric(_)) => {
                let dir = dump_batch(&trainer, &out_dir, &e.to_string())?;
                return Err(Error::numeric(format!(
                    "{e}; offending batch dumped to {}",
                    dir.display()
                )));
            }
            Err(e) => return Err(e),
        };
        last_total = stats.total;
        if stats.step % cfg.log_every == 0 || stats.step == cfg.steps {
            let stages: Vec<String> = stats.stage_losses.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(
                log,
                "{},{:.8},{},{:.6}",
                stats.step,
                stats.lr,
                stages.join(","),
                stats.total
            )?;
        }
        if stats.step % cfg.checkpoint_every == 0 && stats.step != cfg.steps {
            let path = out_dir.join(format!("ck_{:06}.bin", stats.step));
            checkpoint::save(&path, cfg, &trainer.model.params, Some(&trainer.opt))?;
        }
    }
    let checkpoint_path = out_dir.join("ck_final.bin");
    checkpoint::save(&checkpoint_path, cfg, &trainer.model.params, Some(&trainer.opt))?;
    Ok(TrainReport {
        steps_run: cfg.steps,
        final_total: last_total,
        log_path,
        checkpoint_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_split, SceneSpec};

    fn tiny_cfg(manifest: &Path, out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.bins = 2;
        cfg.widths = [4, 6, 8];
        cfg.cf = 6;
        cfg.c = 8;
        cfg.n_tokens = 4;
        cfg.ch = 8;
        cfg.g1 = 1;
        cfg.g2 = 2;
        cfg.d_min = 3.5;
        cfg.d_max = 14.0;
        cfg.steps = 2;
        cfg.batch = 2;
        cfg.log_every = 1;
        cfg.checkpoint_every = 1000;
        cfg.train_manifest = manifest.to_string_lossy().into_owned();
        cfg.out_dir = out.to_string_lossy().into_owned();
        cfg
    }

    fn tiny_split(dir: &Path) -> PathBuf {
        let spec = SceneSpec {
            height: 32,
            width: 32,
            window_us: 10_000,
            ..SceneSpec::default()
        };
        build_split(&spec, 3, dir).unwrap()
    }

    #[test]
    fn short_run_logs_and_checkpoints() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let manifest = tiny_split(data.path());
        let cfg = tiny_cfg(&manifest, out.path());
        let report = train(&cfg).unwrap();
        assert_eq!(report.steps_run, 2);
        assert!(report.final_total.is_finite());
        let log = std::fs::read_to_string(&report.log_path).unwrap();
        assert!(log.starts_with("step,lr,stage0,stage1,total\n"));
        assert_eq!(log.lines().count(), 3);
        let ck = checkpoint::load(&report.checkpoint_path).unwrap();
        assert_eq!(ck.step, 2);
        assert!(ck.has_optimizer_state());
    }

    #[test]
    fn fixed_seed_reproduces_the_loss_curve() {
        let data = tempfile::tempdir().unwrap();
        let manifest = tiny_split(data.path());
        let run = || {
            let out = tempfile::tempdir().unwrap();
            let cfg = tiny_cfg(&manifest, out.path());
            let mut trainer = Trainer::new(cfg).unwrap();
            (0..3).map(|_| trainer.step().unwrap().total).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_parameter_aborts_with_dump() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let manifest = tiny_split(data.path());
        let cfg = tiny_cfg(&manifest, out.path());
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let id = trainer.model.params.ids().next().unwrap();
        *trainer.model.params.value_mut(id).iter_mut().next().unwrap() = f64::NAN;
        let err = trainer.step().unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let dir = dump_batch(&trainer, Path::new(&cfg.out_dir), &err.to_string()).unwrap();
        assert!(dir.join("note.txt").exists());
        let dumped: Vec<_> = std::fs::read_dir(&dir).unwrap().collect();
        assert!(dumped.len() >= 4, "expected note plus sample triplets");
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let manifest = tiny_split(data.path());
        let mut cfg = tiny_cfg(&manifest, out.path());
        cfg.batch = 10;
        assert!(matches!(Trainer::new(cfg), Err(Error::Usage(_))));
    }
}
