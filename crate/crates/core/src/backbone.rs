//! Dual convolutional feature extractors (one per modality) and the shared
//! top-down decoder that turns both pyramids into pixel embeddings.
//!
//! Each extractor downsamples to 1/4 with a two-conv stem, then twice more
//! by stride 2, with one pre-activation residual block per level, and
//! projects every level to a common feature width. The decoder concatenates
//! the two modalities per level, projects, and runs an upsample-add pathway
//! emitting embedding tensors at 1/4, 1/8, and 1/16 scale.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Build, Conv2d, GroupNorm};

/// Three `[C, H/4, W/4]`-and-down tensors on the active tape, finest first.
#[derive(Debug)]
pub struct Pyramid {
    pub levels: [Var; 3],
}

impl Pyramid {
    pub fn shapes(&self, t: &Tape) -> [Vec<usize>; 3] {
        [
            t.shape(self.levels[0]).to_vec(),
            t.shape(self.levels[1]).to_vec(),
            t.shape(self.levels[2]).to_vec(),
        ]
    }
}

/// Largest group count out of 8/4/2/1 dividing the channel width while
/// keeping at least two channels per group; a single-channel group has zero
/// variance on a 1x1 map, which freezes the normalized output at the bias.
fn norm_groups(c: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| c % g == 0 && c / g >= 2)
        .unwrap_or(1)
}

struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    n2: GroupNorm,
    c2: Conv2d,
}

impl ResBlock {
    fn build(b: &mut Build, c: usize) -> Self {
        ResBlock {
            n1: b.group_norm("n1", c, norm_groups(c)),
            c1: b.conv("c1", c, c, 3, 1, 1),
            n2: b.group_norm("n2", c, norm_groups(c)),
            c2: b.conv("c2", c, c, 3, 1, 1),
        }
    }

    fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = self.n1.forward(t, p, x);
        let h = t.silu(h);
        let h = self.c1.forward(t, p, h);
        let h = self.n2.forward(t, p, h);
        let h = t.silu(h);
        let h = self.c2.forward(t, p, h);
        t.add(x, h)
    }
}

struct Down {
    conv: Conv2d,
    norm: GroupNorm,
}

impl Down {
    fn build(b: &mut Build, cin: usize, cout: usize) -> Self {
        Down {
            conv: b.conv("conv", cin, cout, 3, 2, 1),
            norm: b.group_norm("norm", cout, norm_groups(cout)),
        }
    }

    fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = self.conv.forward(t, p, x);
        let h = self.norm.forward(t, p, h);
        t.silu(h)
    }
}

/// One modality's feature extractor: `[Cin,H,W]` to a 3-level pyramid of
/// `cf`-channel maps at 1/4, 1/8, 1/16 scale.
pub struct Extractor {
    stem_a: Down,
    stem_b: Down,
    blocks: [ResBlock; 3],
    downs: [Down; 2],
    projs: [Conv2d; 3],
}

impl Extractor {
    pub fn build(b: &mut Build, cin: usize, widths: [usize; 3], cf: usize) -> Self {
        Extractor {
            stem_a: Down::build(&mut b.scope("stem_a"), cin, widths[0]),
            stem_b: Down::build(&mut b.scope("stem_b"), widths[0], widths[0]),
            blocks: [
                ResBlock::build(&mut b.scope("res4"), widths[0]),
                ResBlock::build(&mut b.scope("res8"), widths[1]),
                ResBlock::build(&mut b.scope("res16"), widths[2]),
            ],
            downs: [
                Down::build(&mut b.scope("down8"), widths[0], widths[1]),
                Down::build(&mut b.scope("down16"), widths[1], widths[2]),
            ],
            projs: [
                b.conv("proj4", widths[0], cf, 1, 1, 0),
                b.conv("proj8", widths[1], cf, 1, 1, 0),
                b.conv("proj16", widths[2], cf, 1, 1, 0),
            ],
        }
    }

    /// `x` is `[Cin, H, W]` with H and W divisible by 16.
    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Pyramid> {
        let shape = t.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "extractor wants [C,H,W]");
        let (h, w) = (shape[1], shape[2]);
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::data(format!(
                "input {h}x{w} not divisible by 16: pad input to multiple of 16"
            )));
        }
        let s = self.stem_a.forward(t, p, x);
        let s = self.stem_b.forward(t, p, s);
        let f4 = self.blocks[0].forward(t, p, s);
        let d8 = self.downs[0].forward(t, p, f4);
        let f8 = self.blocks[1].forward(t, p, d8);
        let d16 = self.downs[1].forward(t, p, f8);
        let f16 = self.blocks[2].forward(t, p, d16);
        Ok(Pyramid {
            levels: [
                self.projs[0].forward(t, p, f4),
                self.projs[1].forward(t, p, f8),
                self.projs[2].forward(t, p, f16),
            ],
        })
    }
}

/// Fuses the two modality pyramids per level and decodes top-down into
/// `c`-channel pixel embeddings at the same three scales.
pub struct Decoder {
    fuse: [Conv2d; 3],
    fuse_norm: [GroupNorm; 3],
    lateral: [Conv2d; 3],
    smooth: [Conv2d; 3],
}

impl Decoder {
    pub fn build(b: &mut Build, cf: usize, c: usize) -> Self {
        let mk_fuse = |b: &mut Build, n: &str| b.conv(n, 2 * cf, cf, 1, 1, 0);
        Decoder {
            fuse: [
                mk_fuse(b, "fuse4"),
                mk_fuse(b, "fuse8"),
                mk_fuse(b, "fuse16"),
            ],
            fuse_norm: [
                b.group_norm("fnorm4", cf, norm_groups(cf)),
                b.group_norm("fnorm8", cf, norm_groups(cf)),
                b.group_norm("fnorm16", cf, norm_groups(cf)),
            ],
            lateral: [
                b.conv("lat4", cf, c, 1, 1, 0),
                b.conv("lat8", cf, c, 1, 1, 0),
                b.conv("lat16", cf, c, 1, 1, 0),
            ],
            smooth: [
                b.conv("smooth4", c, c, 3, 1, 1),
                b.conv("smooth8", c, c, 3, 1, 1),
                b.conv("smooth16", c, c, 3, 1, 1),
            ],
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        p: &Bound,
        img: &Pyramid,
        evt: &Pyramid,
    ) -> Result<Pyramid> {
        for i in 0..3 {
            if t.shape(img.levels[i]) != t.shape(evt.levels[i]) {
                return Err(Error::data(format!(
                    "pyramid level {i} misaligned: {:?} vs {:?}",
                    t.shape(img.levels[i]),
                    t.shape(evt.levels[i])
                )));
            }
        }
        let mut fused = Vec::with_capacity(3);
        for i in 0..3 {
            let cat = t.concat(&[img.levels[i], evt.levels[i]], 0);
            let f = self.fuse[i].forward(t, p, cat);
            let f = self.fuse_norm[i].forward(t, p, f);
            fused.push(t.silu(f));
        }
        let l16 = self.lateral[2].forward(t, p, fused[2]);
        let l8 = self.lateral[1].forward(t, p, fused[1]);
        let l4 = self.lateral[0].forward(t, p, fused[0]);
        let t16 = l16;
        let up16 = t.upsample_bilinear_x2(t16);
        let t8 = t.add(l8, up16);
        let up8 = t.upsample_bilinear_x2(t8);
        let t4 = t.add(l4, up8);
        Ok(Pyramid {
            levels: [
                self.smooth[0].forward(t, p, t4),
                self.smooth[1].forward(t, p, t8),
                self.smooth[2].forward(t, p, t16),
            ],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Arr;
    use crate::nn::ParamSet;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn setup(cin: usize) -> (ParamSet, Extractor) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = Build::new(&mut ps, &mut rng);
        let ext = Extractor::build(&mut b.scope("ext"), cin, [8, 12, 16], 8);
        (ps, ext)
    }

    fn rand_input(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arr::from_shape_simple_fn(IxDyn(shape), || rng.random_range(0.0..1.0))
    }

    #[test]
    fn pyramid_shapes_for_64px_input() {
        let (ps, ext) = setup(3);
        let mut t = Tape::inference();
        let p = ps.bind(&mut t);
        let x = t.constant(rand_input(&[3, 64, 64], 1));
        let pyr = ext.forward(&mut t, &p, x).unwrap();
        let shapes = pyr.shapes(&t);
        assert_eq!(shapes[0], vec![8, 16, 16]);
        assert_eq!(shapes[1], vec![8, 8, 8]);
        assert_eq!(shapes[2], vec![8, 4, 4]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let (ps, ext) = setup(3);
        let mut t = Tape::inference();
        let p = ps.bind(&mut t);
        let x = t.constant(Arr::zeros(IxDyn(&[3, 40, 64])));
        let err = ext.forward(&mut t, &p, x).unwrap_err();
        assert!(err.to_string().contains("pad input to multiple of 16"));
    }

    #[test]
    fn zero_input_stays_finite() {
        let (ps, ext) = setup(2);
        let mut t = Tape::inference();
        let p = ps.bind(&mut t);
        let x = t.constant(Arr::zeros(IxDyn(&[2, 32, 32])));
        let pyr = ext.forward(&mut t, &p, x).unwrap();
        for lvl in pyr.levels {
            assert!(t.value(lvl).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (ps, ext) = setup(3);
        let run = || {
            let mut t = Tape::inference();
            let p = ps.bind(&mut t);
            let x = t.constant(rand_input(&[3, 32, 32], 5));
            let pyr = ext.forward(&mut t, &p, x).unwrap();
            pyr.levels.map(|l| t.value(l).clone())
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn decoder_emits_c_channels_and_is_order_sensitive() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut b = Build::new(&mut ps, &mut rng);
        let ext_i = Extractor::build(&mut b.scope("img"), 3, [8, 12, 16], 8);
        let ext_e = Extractor::build(&mut b.scope("evt"), 2, [8, 12, 16], 8);
        let dec = Decoder::build(&mut b.scope("dec"), 8, 12);

        let mut t = Tape::inference();
        let p = ps.bind(&mut t);
        let xi = t.constant(rand_input(&[3, 32, 32], 2));
        let xe = t.constant(rand_input(&[2, 32, 32], 3));
        let pi = ext_i.forward(&mut t, &p, xi).unwrap();
        let pe = ext_e.forward(&mut t, &p, xe).unwrap();

        let pi_cast = Pyramid { levels: pi.levels };
        let out = dec.forward(&mut t, &p, &pi_cast, &pe).unwrap();
        let shapes = out.shapes(&t);
        assert_eq!(shapes[0], vec![12, 8, 8]);
        assert_eq!(shapes[1], vec![12, 4, 4]);
        assert_eq!(shapes[2], vec![12, 2, 2]);

        let swapped = dec
            .forward(&mut t, &p, &pe, &Pyramid { levels: pi_cast.levels })
            .unwrap();
        assert_ne!(t.value(out.levels[0]), t.value(swapped.levels[0]));
    }

    #[test]
    fn decoder_rejects_misaligned_pyramids() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut b = Build::new(&mut ps, &mut rng);
        let dec = Decoder::build(&mut b.scope("dec"), 4, 6);
        let mut t = Tape::inference();
        let p = ps.bind(&mut t);
        let mk = |t: &mut Tape, s: usize| Pyramid {
            levels: [
                t.constant(Arr::zeros(IxDyn(&[4, s, s]))),
                t.constant(Arr::zeros(IxDyn(&[4, s / 2, s / 2]))),
                t.constant(Arr::zeros(IxDyn(&[4, s / 4, s / 4]))),
            ],
        };
        let a = mk(&mut t, 8);
        let b2 = mk(&mut t, 16);
        assert!(dec.forward(&mut t, &p, &a, &b2).is_err());
    }
}
