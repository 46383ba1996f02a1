//! Token-space scene representation: each modality's feature pyramid is
//! distilled into a small set of visual tokens by iterated multi-scale
//! transposed attention, and the two modality token sets are merged by
//! learned per-element scores.
//!
//! Transposed attention normalizes the other way around from standard
//! attention: the softmax runs over the token axis (tokens compete for each
//! pixel), and the resulting map is then renormalized per token over pixels
//! so every token reads a convex combination of pixel values.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::backbone::Pyramid;
use crate::error::{Error, Result};
use crate::nn::{Bound, Build, Linear, Mlp};

/// Draw an `n x c` token matrix of i.i.d. standard normal entries.
pub fn init_tokens(n: usize, c: usize, seed: u64) -> Array2<f64> {
    assert!(n > 0 && c > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, c), || StandardNormal.sample(&mut rng))
}

/// Dual-normalized attention core: `q [N,C]`, `k [M,C]`, `v [M,C]`.
/// Returns the `[N,C]` token update and the `[N,M]` pixel weights, whose
/// rows each sum to 1.
pub fn transposed_attention(t: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let qs = t.shape(q).to_vec();
    let ks = t.shape(k).to_vec();
    if ks[0] == 0 {
        return Err(Error::data("transposed attention over zero pixels"));
    }
    assert_eq!(qs[1], ks[1], "query/key dim mismatch");
    let kt = t.transpose2(k);
    let logits = t.matmul(q, kt);
    let scaled = t.scale(logits, 1.0 / (qs[1] as f64).sqrt());
    let over_tokens = t.softmax(scaled, 0);
    let row_sums = t.sum_axis_op(over_tokens, 1, true);
    let w = t.div(over_tokens, row_sums);
    let out = t.matmul(w, v);
    Ok((out, w))
}

/// Standard single-head attention: softmax over keys, `q [N,C]`, `k/v [M,C]`.
pub fn attention(t: &mut Tape, q: Var, k: Var, v: Var) -> Var {
    let d = t.shape(q)[1];
    let kt = t.transpose2(k);
    let logits = t.matmul(q, kt);
    let scaled = t.scale(logits, 1.0 / (d as f64).sqrt());
    let w = t.softmax(scaled, 1);
    t.matmul(w, v)
}

/// Projections for one scale of transposed attention over `[C_f,H,W]`
/// features: queries from tokens, keys and values from pixels.
pub struct TransAttnLayer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
}

impl TransAttnLayer {
    pub fn build(b: &mut Build, c: usize, cf: usize) -> Self {
        TransAttnLayer {
            wq: b.linear("wq", c, c),
            wk: b.linear("wk", cf, c),
            wv: b.linear("wv", cf, c),
        }
    }

    /// Returns the `[N,C]` update and the `[N,M]` pixel weights.
    pub fn forward(&self, t: &mut Tape, p: &Bound, tokens: Var, feat: Var) -> Result<(Var, Var)> {
        let fs = t.shape(feat).to_vec();
        assert_eq!(fs.len(), 3, "features must be [C_f,H,W]");
        let m = fs[1] * fs[2];
        let flat = t.reshape(feat, &[fs[0], m]);
        let pix = t.transpose2(flat);
        let q = self.wq.forward(t, p, tokens);
        let k = self.wk.forward(t, p, pix);
        let v = self.wv.forward(t, p, pix);
        transposed_attention(t, q, k, v)
    }
}

/// One modality's token refiner: per-scale transposed attention averaged
/// over the 3 pyramid levels as a residual update, then a residual MLP.
/// The same parameters serve every refinement iteration.
pub struct Discretizer {
    scales: [TransAttnLayer; 3],
    mlp: Mlp,
}

impl Discretizer {
    pub fn build(b: &mut Build, c: usize, cf: usize) -> Self {
        Discretizer {
            scales: [
                TransAttnLayer::build(&mut b.scope("scale4"), c, cf),
                TransAttnLayer::build(&mut b.scope("scale8"), c, cf),
                TransAttnLayer::build(&mut b.scope("scale16"), c, cf),
            ],
            mlp: b.mlp("mlp", c, c, c),
        }
    }

    /// One refinement iteration. Returns updated tokens plus the per-scale
    /// pixel-weight maps.
    pub fn step(
        &self,
        t: &mut Tape,
        p: &Bound,
        tokens: Var,
        pyr: &Pyramid,
    ) -> Result<(Var, [Var; 3])> {
        let ts = t.shape(tokens).to_vec();
        if ts.len() != 2 {
            return Err(Error::data("tokens must be [N,C]"));
        }
        let mut updates = Vec::with_capacity(3);
        let mut weights = Vec::with_capacity(3);
        for (i, layer) in self.scales.iter().enumerate() {
            let fs = t.shape(pyr.levels[i]).to_vec();
            if fs.len() != 3 {
                return Err(Error::data(format!("pyramid level {i} must be [C_f,H,W]")));
            }
            let (u, w) = layer.forward(t, p, tokens, pyr.levels[i])?;
            updates.push(u);
            weights.push(w);
        }
        let s01 = t.add(updates[0], updates[1]);
        let s = t.add(s01, updates[2]);
        let avg = t.scale(s, 1.0 / 3.0);
        let refined = t.add(tokens, avg);
        let m = self.mlp.forward(t, p, refined);
        let out = t.add(refined, m);
        Ok((out, [weights[0], weights[1], weights[2]]))
    }
}

/// Whether modality scores are one scalar per token or one per element.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ScoreGranularity {
    Token,
    Element,
}

impl ScoreGranularity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(ScoreGranularity::Token),
            "element" => Ok(ScoreGranularity::Element),
            _ => Err(Error::usage(format!(
                "score granularity must be 'token' or 'element', got {s}"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ScoreGranularity::Token => "token",
            ScoreGranularity::Element => "element",
        }
    }
}

/// The two modality score maps; `s_img + s_evt = 1` elementwise by
/// construction (two-way softmax).
#[derive(Debug)]
pub struct ScorePair {
    pub s_img: Var,
    pub s_evt: Var,
}

/// Cross-enhancement of the two token sets followed by learned score-based
/// blending into one fused set.
pub struct ScoreFusion {
    img_from_evt: [Linear; 3],
    evt_from_img: [Linear; 3],
    head_img: Mlp,
    head_evt: Mlp,
    granularity: ScoreGranularity,
}

impl ScoreFusion {
    pub fn build(b: &mut Build, c: usize, granularity: ScoreGranularity) -> Self {
        let triple = |b: &mut Build, name: &str| {
            let mut s = b.scope(name);
            [s.linear("wq", c, c), s.linear("wk", c, c), s.linear("wv", c, c)]
        };
        ScoreFusion {
            img_from_evt: triple(b, "img_from_evt"),
            evt_from_img: triple(b, "evt_from_img"),
            head_img: b.mlp("head_img", c, c, c),
            head_evt: b.mlp("head_evt", c, c, c),
            granularity,
        }
    }

    fn enhance(t: &mut Tape, p: &Bound, proj: &[Linear; 3], a: Var, b: Var) -> Var {
        let q = proj[0].forward(t, p, a);
        let k = proj[1].forward(t, p, b);
        let v = proj[2].forward(t, p, b);
        let att = attention(t, q, k, v);
        t.add(a, att)
    }

    /// Returns the fused token set, the score pair that produced it, and the
    /// two enhanced sets (for inspection).
    pub fn forward(
        &self,
        t: &mut Tape,
        p: &Bound,
        vr_img: Var,
        vr_evt: Var,
    ) -> Result<(Var, ScorePair, [Var; 2])> {
        if t.shape(vr_img) != t.shape(vr_evt) {
            return Err(Error::data(format!(
                "token set shapes differ: {:?} vs {:?}",
                t.shape(vr_img),
                t.shape(vr_evt)
            )));
        }
        let e_img = Self::enhance(t, p, &self.img_from_evt, vr_img, vr_evt);
        let e_evt = Self::enhance(t, p, &self.evt_from_img, vr_evt, vr_img);

        let u = t.add(e_img, e_evt);
        let l_img = self.head_img.forward(t, p, u);
        let l_evt = self.head_evt.forward(t, p, u);
        let mut diff = t.sub(l_img, l_evt);
        if self.granularity == ScoreGranularity::Token {
            diff = t.mean_axis_op(diff, 1, true);
        }
        let s_img = t.sigmoid(diff);
        let neg = t.neg(s_img);
        let s_evt = t.add_scalar(neg, 1.0);

        let wi = t.mul(s_img, e_img);
        let we = t.mul(s_evt, e_evt);
        let fused = t.add(wi, we);
        Ok((fused, ScorePair { s_img, s_evt }, [e_img, e_evt]))
    }
}

/// Output of the full representation-learning loop.
pub struct CvrlOut {
    /// Final fused token set `[N,C]`.
    pub tokens: Var,
    /// Score pair per iteration, last one produced the final tokens.
    pub scores: Vec<ScorePair>,
    /// Per-scale pixel weights of the final image-branch iteration.
    pub img_weights: [Var; 3],
}

/// The two discretizers plus fusion, iterated `g1` times from a shared
/// initial token set; each iteration refines the previous fused set.
pub struct Cvrl {
    pub img: Discretizer,
    pub evt: Discretizer,
    pub fusion: ScoreFusion,
    pub g1: usize,
}

impl Cvrl {
    pub fn build(
        b: &mut Build,
        c: usize,
        cf: usize,
        g1: usize,
        granularity: ScoreGranularity,
    ) -> Self {
        assert!(g1 >= 1);
        Cvrl {
            img: Discretizer::build(&mut b.scope("img"), c, cf),
            evt: Discretizer::build(&mut b.scope("evt"), c, cf),
            fusion: ScoreFusion::build(&mut b.scope("fusion"), c, granularity),
            g1,
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        p: &Bound,
        pyr_img: &Pyramid,
        pyr_evt: &Pyramid,
        init: Var,
    ) -> Result<CvrlOut> {
        let mut tokens = init;
        let mut scores = Vec::with_capacity(self.g1);
        let mut img_weights = None;
        for _ in 0..self.g1 {
            let (vr_i, wi) = self.img.step(t, p, tokens, pyr_img)?;
            let (vr_e, _we) = self.evt.step(t, p, tokens, pyr_evt)?;
            let (fused, pair, _) = self.fusion.forward(t, p, vr_i, vr_e)?;
            tokens = fused;
            scores.push(pair);
            img_weights = Some(wi);
        }
        Ok(CvrlOut {
            tokens,
            scores,
            img_weights: img_weights.unwrap(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Arr;
    use crate::nn::ParamSet;
    use ndarray::{arr2, Array3, IxDyn};

    #[test]
    fn token_init_reproducible_and_centered() {
        let a = init_tokens(32, 128, 9);
        let b = init_tokens(32, 128, 9);
        let c = init_tokens(32, 128, 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.dim(), (32, 128));
        let mean = a.sum() / (32.0 * 128.0);
        assert!(mean.abs() < 5.0 / (32.0f64 * 128.0).sqrt(), "mean {mean}");
    }

    #[test]
    fn single_token_single_pixel_copies_value() {
        let mut t = Tape::inference();
        let q = t.constant(arr2(&[[0.3, -0.7]]).into_dyn());
        let k = t.constant(arr2(&[[1.0, 2.0]]).into_dyn());
        let v = t.constant(arr2(&[[5.0, -3.0]]).into_dyn());
        let (out, w) = transposed_attention(&mut t, q, k, v).unwrap();
        assert_eq!(t.value(out).as_slice().unwrap(), &[5.0, -3.0]);
        assert_eq!(t.value(w)[[0, 0]], 1.0);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut t = Tape::inference();
        let q = t.constant(arr2(&[[0.5, 1.0], [-1.0, 0.2]]).into_dyn());
        let k = t.constant(arr2(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).into_dyn());
        let v = t.constant(arr2(&[[0.0, 3.0], [3.0, 0.0], [6.0, 6.0]]).into_dyn());
        let (out, w) = transposed_attention(&mut t, q, k, v).unwrap();
        let wv = t.value(w);
        for n in 0..2 {
            for m in 0..3 {
                assert!((wv[[n, m]] - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        let ov = t.value(out);
        for n in 0..2 {
            assert!((ov[[n, 0]] - 3.0).abs() < 1e-12);
            assert!((ov[[n, 1]] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_normalization_matches_dense_oracle() {
        let q = arr2(&[[0.4, -0.2, 0.9], [-1.1, 0.3, 0.5]]);
        let k = arr2(&[[0.2, 0.1, -0.4], [1.0, -0.3, 0.6], [-0.5, 0.8, 0.2]]);
        let v = arr2(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0], [4.0, -2.0, 1.5]]);

        let scale = 1.0 / 3.0f64.sqrt();
        let mut logits = [[0.0f64; 3]; 2];
        for n in 0..2 {
            for m in 0..3 {
                logits[n][m] = (0..3).map(|d| q[[n, d]] * k[[m, d]]).sum::<f64>() * scale;
            }
        }
        let mut a = [[0.0f64; 3]; 2];
        for m in 0..3 {
            let denom: f64 = (0..2).map(|n| logits[n][m].exp()).sum();
            for n in 0..2 {
                a[n][m] = logits[n][m].exp() / denom;
            }
        }
        let mut expect = [[0.0f64; 3]; 2];
        for n in 0..2 {
            let rowsum: f64 = a[n].iter().sum();
            for d in 0..3 {
                expect[n][d] = (0..3).map(|m| a[n][m] / rowsum * v[[m, d]]).sum();
            }
        }

        let mut t = Tape::inference();
        let (qv, kv, vv) = (
            t.constant(q.into_dyn()),
            t.constant(k.into_dyn()),
            t.constant(v.into_dyn()),
        );
        let (out, w) = transposed_attention(&mut t, qv, kv, vv).unwrap();
        let ov = t.value(out);
        for n in 0..2 {
            for d in 0..3 {
                assert!((ov[[n, d]] - expect[n][d]).abs() < 1e-12);
            }
        }
        let wv = t.value(w);
        for n in 0..2 {
            let s: f64 = (0..3).map(|m| wv[[n, m]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_pixels_rejected() {
        let mut t = Tape::inference();
        let q = t.constant(arr2(&[[1.0]]).into_dyn());
        let k = t.constant(Arr::zeros(IxDyn(&[0, 1])));
        let v = t.constant(Arr::zeros(IxDyn(&[0, 1])));
        assert!(transposed_attention(&mut t, q, k, v).is_err());
    }

    fn toy_pyramid(t: &mut Tape, cf: usize, fill: f64) -> Pyramid {
        Pyramid {
            levels: [
                t.constant(Arr::from_elem(IxDyn(&[cf, 4, 4]), fill)),
                t.constant(Arr::from_elem(IxDyn(&[cf, 2, 2]), fill)),
                t.constant(Arr::from_elem(IxDyn(&[cf, 1, 1]), fill)),
            ],
        }
    }

    fn zero_params_matching(ps: &mut ParamSet, pat: &str) {
        let names: Vec<String> = ps
            .iter()
            .filter(|(n, _)| n.contains(pat))
            .map(|(n, _)| n.to_string())
            .collect();
        for n in names {
            let id = ps.lookup(&n).unwrap();
            ps.value_mut(id).fill(0.0);
        }
    }

    #[test]
    fn zero_value_and_mlp_leave_tokens_unchanged() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut b = Build::new(&mut ps, &mut rng);
        let disc = Discretizer::build(&mut b.scope("d"), 4, 3);
        zero_params_matching(&mut ps, ".wv.");
        zero_params_matching(&mut ps, ".mlp.");

        let mut t = Tape::inference();
        let p = ps.bind(&mut t);
        let tokens = t.constant(init_tokens(2, 4, 1).into_dyn());
        let pyr = toy_pyramid(&mut t, 3, 0.7);
        let (out, _) = disc.step(&mut t, &p, tokens, &pyr).unwrap();
        assert_eq!(t.value(out), t.value(tokens));
    }

    #[test]
    fn equal_scale_updates_cancel_the_third() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut b = Build::new(&mut ps, &mut rng);
        let disc = Discretizer::build(&mut b.scope("d"), 4, 3);
        zero_params_matching(&mut ps, ".mlp.");
        for suffix in ["wq.w", "wq.b", "wk.w", "wk.b", "wv.w", "wv.b"] {
            let src = ps.lookup(&format!("d.scale4.{suffix}")).unwrap();
            let val = ps.value(src).clone();
            for scale in ["scale8", "scale16"] {
                let dst = ps.lookup(&format!("d.{scale}.{suffix}")).unwrap();
                *ps.value_mut(dst) = val.clone();
            }
        }

        let mut t = Tape::inference();
        let p = ps.bind(&mut t);
        let tokens = t.constant(init_tokens(2, 4, 2).into_dyn());
        let pyr = toy_pyramid(&mut t, 3, 0.45);
        let (out, weights) = disc.step(&mut t, &p, tokens, &pyr).unwrap();

        let layer = &disc.scales[0];
        let (u, _) = layer.forward(&mut t, &p, tokens, pyr.levels[0]).unwrap();
        let expect = t.add(tokens, u);
        let (ov, ev) = (t.value(out), t.value(expect));
        for (a, b) in ov.iter().zip(ev.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for w in weights {
            let wv = t.value(w);
            for n in 0..2 {
                let mut s = 0.0;
                for m in 0..wv.shape()[1] {
                    s += wv[[n, m]];
                }
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn discretizer_step_matches_straight_line_script() {
        let c = 3usize;
        let cf = 2usize;
        let n = 2usize;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut b = Build::new(&mut ps, &mut rng);
        let disc = Discretizer::build(&mut b.scope("d"), c, cf);

        let tokens = init_tokens(n, c, 5);
        let feats: Vec<Array3<f64>> = (0..3)
            .map(|i| {
                let side = 4 >> i;
                Array3::from_shape_fn((cf, side, side), |(a, y, x)| {
                    ((a + 1) as f64 * 0.3 - y as f64 * 0.2 + x as f64 * 0.1) * (i + 1) as f64 * 0.5
                })
            })
            .collect();

        let get = |name: &str| ps.value(ps.lookup(name).unwrap()).clone();
        let lin = |x: &Array2<f64>, w: &Arr, bias: &Arr| -> Array2<f64> {
            let (rows, cin) = x.dim();
            let cout = w.shape()[0];
            let mut out = Array2::zeros((rows, cout));
            for r in 0..rows {
                for o in 0..cout {
                    let mut acc = bias[[o]];
                    for i in 0..cin {
                        acc += x[[r, i]] * w[[o, i]];
                    }
                    out[[r, o]] = acc;
                }
            }
            out
        };

        let mut updates = Vec::new();
        for (i, scale) in ["scale4", "scale8", "scale16"].iter().enumerate() {
            let side = 4 >> i;
            let m = side * side;
            let mut pix = Array2::zeros((m, cf));
            for a in 0..cf {
                for y in 0..side {
                    for x in 0..side {
                        pix[[y * side + x, a]] = feats[i][[a, y, x]];
                    }
                }
            }
            let q = lin(&tokens, &get(&format!("d.{scale}.wq.w")), &get(&format!("d.{scale}.wq.b")));
            let k = lin(&pix, &get(&format!("d.{scale}.wk.w")), &get(&format!("d.{scale}.wk.b")));
            let v = lin(&pix, &get(&format!("d.{scale}.wv.w")), &get(&format!("d.{scale}.wv.b")));
            let mut logits = Array2::zeros((n, m));
            for r in 0..n {
                for mm in 0..m {
                    let mut acc = 0.0;
                    for d in 0..c {
                        acc += q[[r, d]] * k[[mm, d]];
                    }
                    logits[[r, mm]] = acc / (c as f64).sqrt();
                }
            }
            let mut a_mat = Array2::zeros((n, m));
            for mm in 0..m {
                let mx = (0..n).map(|r| logits[[r, mm]]).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = (0..n).map(|r| (logits[[r, mm]] - mx).exp()).sum();
                for r in 0..n {
                    a_mat[[r, mm]] = (logits[[r, mm]] - mx).exp() / denom;
                }
            }
            let mut u = Array2::<f64>::zeros((n, c));
            for r in 0..n {
                let rowsum: f64 = (0..m).map(|mm| a_mat[[r, mm]]).sum();
                for d in 0..c {
                    u[[r, d]] = (0..m).map(|mm| a_mat[[r, mm]] / rowsum * v[[mm, d]]).sum::<f64>();
                }
            }
            updates.push(u);
        }
        let mut refined = tokens.clone();
        for r in 0..n {
            for d in 0..c {
                refined[[r, d]] += (updates[0][[r, d]] + updates[1][[r, d]] + updates[2][[r, d]]) / 3.0;
            }
        }
        let h = lin(&refined, &get("d.mlp.fc1.w"), &get("d.mlp.fc1.b"));
        let h = h.mapv(|x| x / (1.0 + (-x).exp()));
        let m_out = lin(&h, &get("d.mlp.fc2.w"), &get("d.mlp.fc2.b"));
        let expect = &refined + &m_out;

        let mut t = Tape::inference();
        let p = ps.bind(&mut t);
        let tok = t.constant(tokens.into_dyn());
        let pyr = Pyramid {
            levels: [
                t.constant(feats[0].clone().into_dyn()),
                t.constant(feats[1].clone().into_dyn()),
                t.constant(feats[2].clone().into_dyn()),
            ],
        };
        let (out, _) = disc.step(&mut t, &p, tok, &pyr).unwrap();
        let ov = t.value(out);
        for r in 0..n {
            for d in 0..c {
                assert!(
                    (ov[[r, d]] - expect[[r, d]]).abs() < 1e-10,
                    "token {r} dim {d}: {} vs {}",
                    ov[[r, d]],
                    expect[[r, d]]
                );
            }
        }
    }

    fn fusion_setup(seed: u64, granularity: ScoreGranularity) -> (ParamSet, ScoreFusion) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Build::new(&mut ps, &mut rng);
        let f = ScoreFusion::build(&mut b.scope("f"), 4, granularity);
        (ps, f)
    }

    #[test]
    fn zero_heads_give_half_half_blend() {
        let (mut ps, fusion) = fusion_setup(30, ScoreGranularity::Element);
        zero_params_matching(&mut ps, ".head_img.");
        zero_params_matching(&mut ps, ".head_evt.");
        let mut t = Tape::inference();
        let p = ps.bind(&mut t);
        let a = t.constant(init_tokens(3, 4, 1).into_dyn());
        let bvar = t.constant(init_tokens(3, 4, 2).into_dyn());
        let (fused, pair, enhanced) = fusion.forward(&mut t, &p, a, bvar).unwrap();
        for &s in t.value(pair.s_img).iter() {
            assert_eq!(s, 0.5);
        }
        let fv = t.value(fused).clone();
        let ei = t.value(enhanced[0]).clone();
        let ee = t.value(enhanced[1]).clone();
        for ((f, i), e) in fv.iter().zip(ei.iter()).zip(ee.iter()) {
            assert!((f - 0.5 * (i + e)).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_sum_to_one_and_fused_is_between() {
        for granularity in [ScoreGranularity::Element, ScoreGranularity::Token] {
            let (ps, fusion) = fusion_setup(31, granularity);
            let mut t = Tape::inference();
            let p = ps.bind(&mut t);
            let a = t.constant(init_tokens(5, 4, 3).into_dyn());
            let b = t.constant(init_tokens(5, 4, 4).into_dyn());
            let (fused, pair, enhanced) = fusion.forward(&mut t, &p, a, b).unwrap();
            let si = t.value(pair.s_img).clone();
            let se = t.value(pair.s_evt).clone();
            for (x, y) in si.iter().zip(se.iter()) {
                assert!((x + y - 1.0).abs() < 1e-6);
            }
            match granularity {
                ScoreGranularity::Element => assert_eq!(si.shape(), &[5, 4]),
                ScoreGranularity::Token => assert_eq!(si.shape(), &[5, 1]),
            }
            let fv = t.value(fused).clone();
            let ei = t.value(enhanced[0]).clone();
            let ee = t.value(enhanced[1]).clone();
            for ((f, i), e) in fv.iter().zip(ei.iter()).zip(ee.iter()) {
                let (lo, hi) = (i.min(*e), i.max(*e));
                assert!(*f >= lo - 1e-12 && *f <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn saturated_image_head_selects_image_tokens() {
        let (mut ps, fusion) = fusion_setup(32, ScoreGranularity::Element);
        let bias = ps.lookup("f.head_img.fc2.b").unwrap();
        ps.value_mut(bias).fill(50.0);
        let mut t = Tape::inference();
        let p = ps.bind(&mut t);
        let a = t.constant(init_tokens(3, 4, 5).into_dyn());
        let b = t.constant(init_tokens(3, 4, 6).into_dyn());
        let (fused, _, enhanced) = fusion.forward(&mut t, &p, a, b).unwrap();
        let fv = t.value(fused).clone();
        let ei = t.value(enhanced[0]).clone();
        let gap = fv
            .iter()
            .zip(ei.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(gap < 1e-4, "sup-norm gap {gap}");
    }

    #[test]
    fn fusion_is_token_permutation_equivariant() {
        let (ps, fusion) = fusion_setup(33, ScoreGranularity::Element);
        let a = init_tokens(4, 4, 7);
        let b = init_tokens(4, 4, 8);
        let perm = [2usize, 0, 3, 1];
        let permute = |m: &Array2<f64>| {
            let mut out = m.clone();
            for (dst, &src) in perm.iter().enumerate() {
                out.row_mut(dst).assign(&m.row(src));
            }
            out
        };

        let run = |x: &Array2<f64>, y: &Array2<f64>| {
            let mut t = Tape::inference();
            let p = ps.bind(&mut t);
            let xv = t.constant(x.clone().into_dyn());
            let yv = t.constant(y.clone().into_dyn());
            let (fused, _, _) = fusion.forward(&mut t, &p, xv, yv).unwrap();
            t.value(fused).clone()
        };

        let base = run(&a, &b);
        let permuted = run(&permute(&a), &permute(&b));
        for (dst, &src) in perm.iter().enumerate() {
            for d in 0..4 {
                assert!((permuted[[dst, d]] - base[[src, d]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn both_modalities_receive_gradient() {
        let (ps, fusion) = fusion_setup(34, ScoreGranularity::Element);
        let mut t = Tape::new();
        let p = ps.bind(&mut t);
        let a = t.leaf(init_tokens(3, 4, 9).into_dyn());
        let b = t.leaf(init_tokens(3, 4, 10).into_dyn());
        let (fused, _, _) = fusion.forward(&mut t, &p, a, b).unwrap();
        let sq = t.square(fused);
        let loss = t.sum_all(sq);
        let grads = t.backward(loss);
        let ga = grads.get(a).unwrap();
        let gb = grads.get(b).unwrap();
        assert!(ga.iter().any(|&v| v.abs() > 1e-12));
        assert!(gb.iter().any(|&v| v.abs() > 1e-12));
    }

    #[test]
    fn mismatched_token_shapes_rejected() {
        let (ps, fusion) = fusion_setup(35, ScoreGranularity::Element);
        let mut t = Tape::inference();
        let p = ps.bind(&mut t);
        let a = t.constant(init_tokens(3, 4, 1).into_dyn());
        let b = t.constant(init_tokens(2, 4, 1).into_dyn());
        assert!(fusion.forward(&mut t, &p, a, b).is_err());
    }
}
