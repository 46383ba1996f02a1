//! The full depth network: dual extractors, decoder, token learning, and the
//! iterative estimator, owned together with their parameter set.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{Decoder, Extractor};
use crate::error::{Error, Result};
use crate::estimator::{Estimator, EstimatorOut, PredScale};
use crate::events::VoxelGrid;
use crate::nn::{Bound, Build, ParamSet};
use crate::tokens::{init_tokens, Cvrl, ScoreGranularity, ScorePair};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Voxel-grid time bins (event input channels).
    pub bins: usize,
    /// Extractor stage widths at 1/4, 1/8, 1/16.
    pub widths: [usize; 3],
    /// Common pyramid feature width.
    pub cf: usize,
    /// Token and pixel-embedding width.
    pub c: usize,
    /// Token count.
    pub n_tokens: usize,
    /// GRU hidden width.
    pub ch: usize,
    /// Discretization iterations.
    pub g1: usize,
    /// Estimator refinement stages.
    pub g2: usize,
    pub scale: PredScale,
    pub granularity: ScoreGranularity,
    /// Seed for the fixed initial token draw.
    pub token_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            bins: 3,
            widths: [32, 64, 96],
            cf: 64,
            c: 128,
            n_tokens: 32,
            ch: 128,
            g1: 4,
            g2: 4,
            scale: PredScale::Eighth,
            granularity: ScoreGranularity::Element,
            token_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small enough to finite-difference end to end.
    pub fn micro() -> Self {
        ModelConfig {
            bins: 2,
            widths: [4, 6, 8],
            cf: 6,
            c: 8,
            n_tokens: 4,
            ch: 8,
            g1: 2,
            g2: 2,
            scale: PredScale::Eighth,
            granularity: ScoreGranularity::Element,
            token_seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct ModelOutput {
    /// Per-stage full-resolution normalized depth, earliest first.
    pub stages: Vec<Var>,
    pub coarse_stages: Vec<Var>,
    /// Modality score pairs, one per discretization iteration.
    pub scores: Vec<ScorePair>,
    /// Final-stage `[M,N]` pixel-over-token attention from the estimator.
    pub token_attn: Var,
    /// Final fused token set.
    pub tokens: Var,
}

pub struct DepthModel {
    pub params: ParamSet,
    pub cfg: ModelConfig,
    ext_img: Extractor,
    ext_evt: Extractor,
    decoder: Decoder,
    cvrl: Cvrl,
    estimator: Estimator,
    init: Array2<f64>,
}

impl DepthModel {
    pub fn new(cfg: ModelConfig, init_seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut b = Build::new(&mut params, &mut rng);
        let ext_img = Extractor::build(&mut b.scope("img"), 3, cfg.widths, cfg.cf);
        let ext_evt = Extractor::build(&mut b.scope("evt"), cfg.bins, cfg.widths, cfg.cf);
        let decoder = Decoder::build(&mut b.scope("dec"), cfg.cf, cfg.c);
        let cvrl = Cvrl::build(&mut b.scope("cvrl"), cfg.c, cfg.cf, cfg.g1, cfg.granularity);
        let estimator = Estimator::build(&mut b.scope("est"), cfg.c, cfg.ch, cfg.scale, cfg.g2);
        let init = init_tokens(cfg.n_tokens, cfg.c, cfg.token_seed);
        // Parameters live on the f32 grid from birth; f32 checkpoints are
        // then lossless at any point in training.
        for id in params.ids().collect::<Vec<_>>() {
            crate::optim::quantize_f32(params.value_mut(id));
        }
        DepthModel {
            params,
            cfg,
            ext_img,
            ext_evt,
            decoder,
            cvrl,
            estimator,
            init,
        }
    }

    /// Forward one sample. `image` is `[H,W,3]` in `[0,1]`; the voxel grid
    /// must cover the same sensor.
    pub fn forward(
        &self,
        t: &mut Tape,
        p: &Bound,
        image: &Array3<f64>,
        grid: &VoxelGrid,
    ) -> Result<ModelOutput> {
        let (h, w, chans) = image.dim();
        if chans != 3 {
            return Err(Error::data(format!("image must have 3 channels, got {chans}")));
        }
        if grid.sensor_size() != (h, w) {
            return Err(Error::data(format!(
                "sensor-size mismatch between image ({h}x{w}) and events ({}x{})",
                grid.sensor_size().0,
                grid.sensor_size().1
            )));
        }
        if grid.bins() != self.cfg.bins {
            return Err(Error::data(format!(
                "voxel grid has {} bins, model wants {}",
                grid.bins(),
                self.cfg.bins
            )));
        }
        let chw = Array3::from_shape_fn((3, h, w), |(c, y, x)| image[[y, x, c]]);
        let img_in = t.constant(chw.into_dyn());
        let evt_in = t.constant(grid.data.clone().into_dyn());

        let f_img = self.ext_img.forward(t, p, img_in)?;
        let f_evt = self.ext_evt.forward(t, p, evt_in)?;
        let emb = self.decoder.forward(t, p, &f_img, &f_evt)?;
        let init = t.constant(self.init.clone().into_dyn());
        let cv = self.cvrl.forward(t, p, &f_img, &f_evt, init)?;
        let est: EstimatorOut = self.estimator.forward(t, p, &emb, cv.tokens);
        Ok(ModelOutput {
            stages: est.stages,
            coarse_stages: est.coarse_stages,
            scores: cv.scores,
            token_attn: est.attn,
            tokens: cv.tokens,
        })
    }
}
