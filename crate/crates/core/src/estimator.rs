//! Iterative depth head: pixel embeddings collapse to one working scale,
//! tokens are projected back onto pixels by cross-attention, a two-cell
//! convolutional GRU refines a hidden state, and each stage's normalized
//! depth is convex-upsampled to full resolution.

use crate::autodiff::{Tape, Var};
use crate::backbone::Pyramid;
use crate::error::{Error, Result};
use crate::nn::{Bound, Build, Conv2d, Linear};

/// Working scale of the refinement loop relative to the input.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PredScale {
    Quarter,
    Eighth,
    Sixteenth,
}

impl PredScale {
    /// Upsampling factor back to full resolution.
    pub fn factor(self) -> usize {
        match self {
            PredScale::Quarter => 4,
            PredScale::Eighth => 8,
            PredScale::Sixteenth => 16,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "4" => Ok(PredScale::Quarter),
            "8" => Ok(PredScale::Eighth),
            "16" => Ok(PredScale::Sixteenth),
            _ => Err(Error::usage(format!(
                "prediction scale must be 4, 8, or 16, got {s}"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PredScale::Quarter => "4",
            PredScale::Eighth => "8",
            PredScale::Sixteenth => "16",
        }
    }
}

/// Channel multiplier each pyramid level (at scales 4, 8, 16) picks up when
/// brought to the working scale.
fn level_mult(level_scale: usize, target: usize) -> usize {
    if level_scale < target {
        let r = target / level_scale;
        r * r
    } else {
        1
    }
}

/// Bring one `[C,h,w]` level to the working scale.
fn rescale_level(t: &mut Tape, x: Var, level_scale: usize, target: usize) -> Var {
    use std::cmp::Ordering;
    match level_scale.cmp(&target) {
        Ordering::Less => t.pixel_unshuffle(x, target / level_scale),
        Ordering::Equal => x,
        Ordering::Greater => {
            let mut cur = x;
            let mut s = level_scale;
            while s > target {
                cur = t.upsample_bilinear_x2(cur);
                s /= 2;
            }
            cur
        }
    }
}

/// Two-cell convolutional GRU; both cells read the same projected input.
pub struct ConvGru {
    wz: Conv2d,
    wr: Conv2d,
    wh: Conv2d,
}

impl ConvGru {
    pub fn build(b: &mut Build, ch: usize, cin: usize) -> Self {
        ConvGru {
            wz: b.conv("wz", ch + cin, ch, 3, 1, 1),
            wr: b.conv("wr", ch + cin, ch, 3, 1, 1),
            wh: b.conv("wh", ch + cin, ch, 3, 1, 1),
        }
    }

    pub fn step(&self, t: &mut Tape, p: &Bound, h: Var, x: Var) -> Var {
        let hx = t.concat(&[h, x], 0);
        let z_pre = self.wz.forward(t, p, hx);
        let z = t.sigmoid(z_pre);
        let r_pre = self.wr.forward(t, p, hx);
        let r = t.sigmoid(r_pre);
        let rh = t.mul(r, h);
        let rhx = t.concat(&[rh, x], 0);
        let c_pre = self.wh.forward(t, p, rhx);
        let cand = t.tanh(c_pre);
        let keep = t.neg(z);
        let keep = t.add_scalar(keep, 1.0);
        let a = t.mul(keep, h);
        let b = t.mul(z, cand);
        t.add(a, b)
    }
}

/// Convex upsampling by integer factor `r`: every fine pixel is a softmax
/// blend of its coarse pixel's 3x3 neighborhood (edges replicated), so the
/// output stays inside the coarse map's range. `weights` carries
/// `9*r*r` logit channels laid out neighbor-major.
pub fn convex_upsample(t: &mut Tape, coarse: Var, weights: Var, r: usize) -> Var {
    let cs = t.shape(coarse).to_vec();
    assert_eq!(cs.len(), 2, "coarse map must be [H,W]");
    let (h, w) = (cs[0], cs[1]);
    let ws = t.shape(weights).to_vec();
    assert_eq!(ws.as_slice(), &[9 * r * r, h, w], "weight logits must be [9*r*r,H,W]");

    let unfold = t.unfold3x3_replicate(coarse);
    let unfold4 = t.reshape(unfold, &[9, 1, h, w]);
    let logits = t.reshape(weights, &[9, r * r, h, w]);
    let soft = t.softmax(logits, 0);
    let blend = t.mul(soft, unfold4);
    let summed = t.sum_axis_op(blend, 0, false);
    let fine = t.pixel_shuffle(summed, r);
    t.reshape(fine, &[h * r, w * r])
}

/// The full refinement head.
pub struct Estimator {
    collapse: Conv2d,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    gru: [ConvGru; 2],
    depth_a: Conv2d,
    depth_b: Conv2d,
    mask_a: Conv2d,
    mask_b: Conv2d,
    pub scale: PredScale,
    pub g2: usize,
}

impl Estimator {
    /// `c` is the embedding/token width, `ch` the hidden width.
    pub fn build(b: &mut Build, c: usize, ch: usize, scale: PredScale, g2: usize) -> Self {
        assert!(g2 >= 1);
        let target = scale.factor();
        let cin: usize = [4, 8, 16].iter().map(|&s| c * level_mult(s, target)).sum();
        let r2 = target * target;
        Estimator {
            collapse: b.conv("collapse", cin, ch, 1, 1, 0),
            wq: b.linear("wq", ch, c),
            wk: b.linear("wk", c, c),
            wv: b.linear("wv", c, ch),
            gru: [
                ConvGru::build(&mut b.scope("gru1"), ch, ch),
                ConvGru::build(&mut b.scope("gru2"), ch, ch),
            ],
            depth_a: b.conv("depth_a", ch, ch, 3, 1, 1),
            depth_b: b.conv("depth_b", ch, 1, 3, 1, 1),
            mask_a: b.conv("mask_a", ch, ch, 3, 1, 1),
            mask_b: b.conv("mask_b", ch, 9 * r2, 1, 1, 0),
            scale,
            g2,
        }
    }

    /// Merge the three embedding levels into the working-scale state P_0.
    pub fn collapse_embeddings(&self, t: &mut Tape, p: &Bound, emb: &Pyramid) -> Var {
        let target = self.scale.factor();
        let lv = [
            rescale_level(t, emb.levels[0], 4, target),
            rescale_level(t, emb.levels[1], 8, target),
            rescale_level(t, emb.levels[2], 16, target),
        ];
        let cat = t.concat(&lv, 0);
        self.collapse.forward(t, p, cat)
    }

    /// Cross-attend the hidden state onto the token set: every working-scale
    /// pixel queries the `N` tokens. Returns the `[C_h,h,w]` projection and
    /// the `[M,N]` per-pixel token weights (rows sum to 1).
    pub fn project_tokens(&self, t: &mut Tape, p: &Bound, h: Var, vr: Var) -> (Var, Var) {
        let hs = t.shape(h).to_vec();
        let (ch, hh, ww) = (hs[0], hs[1], hs[2]);
        let m = hh * ww;
        let flat = t.reshape(h, &[ch, m]);
        let pix = t.transpose2(flat);
        let q = self.wq.forward(t, p, pix);
        let k = self.wk.forward(t, p, vr);
        let v = self.wv.forward(t, p, vr);
        let c = t.shape(q)[1];
        let kt = t.transpose2(k);
        let logits = t.matmul(q, kt);
        let scaled = t.scale(logits, 1.0 / (c as f64).sqrt());
        let w = t.softmax(scaled, 1);
        let out = t.matmul(w, v);
        let back = t.transpose2(out);
        (t.reshape(back, &[ch, hh, ww]), w)
    }

    /// Depth and upsample-weight heads for one stage. Returns the coarse
    /// `[h,w]` map in `[0,1]` and the `[9*r*r,h,w]` weight logits.
    pub fn predict_stage(&self, t: &mut Tape, p: &Bound, h: Var) -> (Var, Var) {
        let d = self.depth_a.forward(t, p, h);
        let d = t.silu(d);
        let d = self.depth_b.forward(t, p, d);
        let d = t.sigmoid(d);
        let ds = t.shape(d).to_vec();
        let coarse = t.reshape(d, &[ds[1], ds[2]]);
        let m = self.mask_a.forward(t, p, h);
        let m = t.silu(m);
        let logits = self.mask_b.forward(t, p, m);
        (coarse, logits)
    }

    /// Run the full loop: collapse, then `g2` rounds of project + GRU +
    /// predict + upsample.
    pub fn forward(&self, t: &mut Tape, p: &Bound, emb: &Pyramid, vr: Var) -> EstimatorOut {
        let p0 = self.collapse_embeddings(t, p, emb);
        let mut h = t.tanh(p0);
        let r = self.scale.factor();
        let mut stages = Vec::with_capacity(self.g2);
        let mut coarse_stages = Vec::with_capacity(self.g2);
        let mut attn = None;
        for _ in 0..self.g2 {
            let (pj, w) = self.project_tokens(t, p, h, vr);
            h = self.gru[0].step(t, p, h, pj);
            h = self.gru[1].step(t, p, h, pj);
            let (coarse, logits) = self.predict_stage(t, p, h);
            stages.push(convex_upsample(t, coarse, logits, r));
            coarse_stages.push(coarse);
            attn = Some(w);
        }
        EstimatorOut {
            stages,
            coarse_stages,
            attn: attn.unwrap(),
            hidden: h,
        }
    }
}

pub struct EstimatorOut {
    /// Full-resolution `[H,W]` normalized maps in `[0,1]`, earliest first.
    pub stages: Vec<Var>,
    /// Working-scale maps the stages were upsampled from.
    pub coarse_stages: Vec<Var>,
    /// Final-stage `[M,N]` pixel-over-token attention weights.
    pub attn: Var,
    pub hidden: Var,
}
