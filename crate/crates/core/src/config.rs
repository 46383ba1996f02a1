//! Run configuration: one flat `key = value` file holding every
//! hyperparameter, optimizer setting, and path a run needs. `#` starts a
//! comment; unknown or repeated keys are errors so typos surface instead of
//! silently training the wrong model.

use crate::error::{Error, Result};
use crate::estimator::PredScale;
use crate::loss::{DepthPriors, LossConfig};
use crate::model::ModelConfig;
use crate::tokens::ScoreGranularity;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub bins: usize,
    pub widths: [usize; 3],
    pub cf: usize,
    pub c: usize,
    pub n_tokens: usize,
    pub ch: usize,
    pub g1: usize,
    pub g2: usize,
    pub pred_scale: PredScale,
    pub score_granularity: ScoreGranularity,
    pub token_seed: u64,
    // objective
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub d_min: f64,
    pub d_max: f64,
    // optimization
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    // io
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub train_manifest: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        RunConfig {
            bins: m.bins,
            widths: m.widths,
            cf: m.cf,
            c: m.c,
            n_tokens: m.n_tokens,
            ch: m.ch,
            g1: m.g1,
            g2: m.g2,
            pred_scale: m.scale,
            score_granularity: m.granularity,
            token_seed: m.token_seed,
            alpha: 10.0,
            lambda: 0.15,
            gamma: 0.8,
            d_min: 2.0,
            d_max: 80.0,
            lr: 2e-4,
            weight_decay: 1e-2,
            steps: 2_000,
            batch: 1,
            seed: 0,
            checkpoint_every: 500,
            log_every: 10,
            train_manifest: String::new(),
            out_dir: String::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bins", self.bins),
            ("cf", self.cf),
            ("c", self.c),
            ("n_tokens", self.n_tokens),
            ("ch", self.ch),
            ("g1", self.g1),
            ("g2", self.g2),
            ("steps", self.steps),
            ("batch", self.batch),
            ("checkpoint_every", self.checkpoint_every),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return Err(Error::usage(format!("{name} must be positive")));
            }
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::usage("widths must be positive"));
        }
        DepthPriors::new(self.d_min, self.d_max)?;
        if !(self.alpha > 0.0) {
            return Err(Error::usage("alpha must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::usage("lambda must be nonnegative"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::usage("gamma must be in (0, 1]"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::usage("lr must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::usage("weight_decay must be nonnegative"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            bins: self.bins,
            widths: self.widths,
            cf: self.cf,
            c: self.c,
            n_tokens: self.n_tokens,
            ch: self.ch,
            g1: self.g1,
            g2: self.g2,
            scale: self.pred_scale,
            granularity: self.score_granularity,
            token_seed: self.token_seed,
        }
    }

    pub fn priors(&self) -> Result<DepthPriors> {
        DepthPriors::new(self.d_min, self.d_max)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            lambda: self.lambda,
            gamma: self.gamma,
            stages: self.g2,
        }
    }

    /// Stable, diffable text form; [`parse`] of the result reproduces `self`
    /// exactly (floats print in shortest round-trip form).
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("bins", self.bins.to_string());
        kv(
            "widths",
            format!("{},{},{}", self.widths[0], self.widths[1], self.widths[2]),
        );
        kv("cf", self.cf.to_string());
        kv("c", self.c.to_string());
        kv("n_tokens", self.n_tokens.to_string());
        kv("ch", self.ch.to_string());
        kv("g1", self.g1.to_string());
        kv("g2", self.g2.to_string());
        kv("pred_scale", self.pred_scale.label().to_string());
        kv("score_granularity", self.score_granularity.label().to_string());
        kv("token_seed", self.token_seed.to_string());
        kv("alpha", self.alpha.to_string());
        kv("lambda", self.lambda.to_string());
        kv("gamma", self.gamma.to_string());
        kv("d_min", self.d_min.to_string());
        kv("d_max", self.d_max.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("steps", self.steps.to_string());
        kv("batch", self.batch.to_string());
        kv("seed", self.seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("log_every", self.log_every.to_string());
        kv("train_manifest", self.train_manifest.clone());
        kv("out_dir", self.out_dir.clone());
        s
    }

    /// Parses the `key = value` format, starting from defaults so files may
    /// list only what they change.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::usage(format!("config line {}: expected 'key = value'", ln + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::usage(format!(
                    "config line {}: duplicate key '{key}'",
                    ln + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| Error::usage(format!("config line {}: {e}", ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Applies one `key=value` assignment (also the CLI override hook).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::usage(format!("bad value '{value}' for {key}")))
        }
        match key {
            "bins" => self.bins = num(key, value)?,
            "widths" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::usage(format!(
                        "widths needs 3 comma-separated values, got '{value}'"
                    )));
                }
                for (slot, part) in self.widths.iter_mut().zip(&parts) {
                    *slot = num("widths", part)?;
                }
            }
            "cf" => self.cf = num(key, value)?,
            "c" => self.c = num(key, value)?,
            "n_tokens" => self.n_tokens = num(key, value)?,
            "ch" => self.ch = num(key, value)?,
            "g1" => self.g1 = num(key, value)?,
            "g2" => self.g2 = num(key, value)?,
            "pred_scale" => self.pred_scale = PredScale::parse(value)?,
            "score_granularity" => self.score_granularity = ScoreGranularity::parse(value)?,
            "token_seed" => self.token_seed = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "d_min" => self.d_min = num(key, value)?,
            "d_max" => self.d_max = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "train_manifest" => self.train_manifest = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            _ => return Err(Error::usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialize_parse_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.widths = [16, 24, 40];
        cfg.lr = 3.7e-4;
        cfg.gamma = 0.85;
        cfg.pred_scale = PredScale::Sixteenth;
        cfg.score_granularity = ScoreGranularity::Token;
        cfg.train_manifest = "data/day/manifest.csv".into();
        cfg.seed = 99;
        assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::parse("lr = 0.001\n# comment\n\nn_tokens = 8\n").unwrap();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.n_tokens, 8);
        assert_eq!(cfg.bins, RunConfig::default().bins);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(RunConfig::parse("mystery = 1\n").is_err());
        assert!(RunConfig::parse("lr\n").is_err());
        assert!(RunConfig::parse("lr = fast\n").is_err());
        assert!(RunConfig::parse("lr = 0.1\nlr = 0.2\n").is_err());
        assert!(RunConfig::parse("pred_scale = 5\n").is_err());
        assert!(RunConfig::parse("gamma = 0\n").is_err());
        assert!(RunConfig::parse("d_min = 9\nd_max = 3\n").is_err());
    }

    #[test]
    fn model_config_matches_fields() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model_config(), ModelConfig::default());
        assert_eq!(cfg.loss_config().stages, cfg.g2);
    }
}
