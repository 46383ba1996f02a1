//! Spatial tape ops: 2-D convolution (im2col + GEMM), bilinear upsampling,
//! pixel shuffle/unshuffle, and 3x3 neighborhood unfolding.

use super::{as2, as3, Arr, Tape, Var};
use ndarray::{Array2, ArrayView2, ArrayView3, Axis, IxDyn};

/// col matrix layout: rows = cin*kh*kw, cols = oh*ow.
fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let xs = x.as_slice().expect("im2col: non-contiguous input");
    let mut col = Array2::<f64>::zeros((cin * kh * kw, oh * ow));
    let cs = col.as_slice_mut().unwrap();
    for c in 0..cin {
        let xc = &xs[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    let obase = base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cs[obase + ox] = xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// `dot` may allocate column-major output when both operands have unit row
/// stride (happens for 1x1 spatial maps); reshape and col2im need C order.
fn c_order(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn col2im(
    dcol: &ArrayView2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Arr {
    let mut dx = Arr::zeros(IxDyn(&[cin, h, w]));
    let ds = dx.as_slice_mut().unwrap();
    let cs = dcol.as_slice().expect("col2im: non-contiguous gradient");
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dbase = c * h * w + iy as usize * w;
                    let obase = base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            ds[dbase + ix as usize] += cs[obase + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Tape {
    /// 2-D convolution: `x [Cin,H,W]`, `w [Cout,Cin,kh,kw]`, `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = as3(self.value(x));
        let (cin, h, wd) = xv.dim();
        let wsh: Vec<usize> = self.shape(w).to_vec();
        assert_eq!(wsh.len(), 4, "conv2d: weight must be [Cout,Cin,kh,kw]");
        let (cout, wcin, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
        assert_eq!(cin, wcin, "conv2d: channel mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let col = im2col(&xv, kh, kw, stride, pad, oh, ow);
        let w2 = self
            .value(w)
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        let mut out2 = w2.dot(&col);
        let bv = self.value(b);
        let bs = bv.as_slice().unwrap();
        for (mut row, &bias) in out2.axis_iter_mut(Axis(0)).zip(bs.iter()) {
            row += bias;
        }
        let out = out2.into_shape_with_order((cout, oh, ow)).unwrap().into_dyn();

        self.push_op(out, move |g, t| {
            let g2 = g.view().into_shape_with_order((cout, oh * ow)).unwrap();
            let dw = c_order(g2.dot(&col.t()));
            let dw = dw.into_shape_with_order(IxDyn(&[cout, cin, kh, kw])).unwrap();
            let db = g2.sum_axis(Axis(1)).into_dyn();
            let w2 = t
                .value(w)
                .view()
                .into_shape_with_order((cout, cin * kh * kw))
                .unwrap();
            let dcol = c_order(w2.t().dot(&g2));
            let dx = col2im(&dcol.view(), cin, h, wd, kh, kw, stride, pad, oh, ow);
            vec![(x, dx), (w, dw), (b, db)]
        })
    }

    /// Bilinear x2 upsampling of `[C,H,W]` (half-pixel centers, edges
    /// replicated), so a constant map stays constant.
    pub fn upsample_bilinear_x2(&mut self, x: Var) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        let ytab = lerp_table(h);
        let xtab = lerp_table(w);
        let xs = xv.as_slice().unwrap();
        let mut out = Arr::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        {
            let os = out.as_slice_mut().unwrap();
            for ch in 0..c {
                let xc = &xs[ch * h * w..(ch + 1) * h * w];
                for oy in 0..2 * h {
                    let (y0, y1, wy) = ytab[oy];
                    let obase = ch * 4 * h * w + oy * 2 * w;
                    for ox in 0..2 * w {
                        let (x0, x1, wx) = xtab[ox];
                        os[obase + ox] = (1.0 - wy) * ((1.0 - wx) * xc[y0 * w + x0] + wx * xc[y0 * w + x1])
                            + wy * ((1.0 - wx) * xc[y1 * w + x0] + wx * xc[y1 * w + x1]);
                    }
                }
            }
        }
        self.push_op(out, move |g, _| {
            let gs = g.as_slice().unwrap();
            let mut dx = Arr::zeros(IxDyn(&[c, h, w]));
            {
                let ds = dx.as_slice_mut().unwrap();
                for ch in 0..c {
                    let dbase = ch * h * w;
                    for oy in 0..2 * h {
                        let (y0, y1, wy) = ytab[oy];
                        let obase = ch * 4 * h * w + oy * 2 * w;
                        for ox in 0..2 * w {
                            let (x0, x1, wx) = xtab[ox];
                            let gv = gs[obase + ox];
                            ds[dbase + y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * gv;
                            ds[dbase + y0 * w + x1] += (1.0 - wy) * wx * gv;
                            ds[dbase + y1 * w + x0] += wy * (1.0 - wx) * gv;
                            ds[dbase + y1 * w + x1] += wy * wx * gv;
                        }
                    }
                }
            }
            vec![(x, dx)]
        })
    }

    /// Space-to-depth: `[C,H,W] -> [C*r^2, H/r, W/r]` with output channel
    /// index `c*r*r + dy*r + dx`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        assert!(h % r == 0 && w % r == 0, "pixel_unshuffle: dims not divisible by {r}");
        let (oh, ow) = (h / r, w / r);
        let xs = xv.as_slice().unwrap();
        let mut out = Arr::zeros(IxDyn(&[c * r * r, oh, ow]));
        {
            let os = out.as_slice_mut().unwrap();
            for ch in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        let oc = (ch * r + dy) * r + dx;
                        for y in 0..oh {
                            for xq in 0..ow {
                                os[(oc * oh + y) * ow + xq] = xs[(ch * h + y * r + dy) * w + xq * r + dx];
                            }
                        }
                    }
                }
            }
        }
        self.push_op(out, move |g, _| {
            let gs = g.as_slice().unwrap();
            let mut dx_arr = Arr::zeros(IxDyn(&[c, h, w]));
            {
                let ds = dx_arr.as_slice_mut().unwrap();
                for ch in 0..c {
                    for dy in 0..r {
                        for dx in 0..r {
                            let oc = (ch * r + dy) * r + dx;
                            for y in 0..oh {
                                for xq in 0..ow {
                                    ds[(ch * h + y * r + dy) * w + xq * r + dx] =
                                        gs[(oc * oh + y) * ow + xq];
                                }
                            }
                        }
                    }
                }
            }
            vec![(x, dx_arr)]
        })
    }

    /// Depth-to-space inverse of [`Tape::pixel_unshuffle`]:
    /// `[C*r^2, h, w] -> [C, h*r, w*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let xv = as3(self.value(x));
        let (crr, h, w) = xv.dim();
        assert!(crr % (r * r) == 0, "pixel_shuffle: channels not divisible by {}", r * r);
        let c = crr / (r * r);
        let xs = xv.as_slice().unwrap();
        let mut out = Arr::zeros(IxDyn(&[c, h * r, w * r]));
        {
            let os = out.as_slice_mut().unwrap();
            for ch in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        let ic = (ch * r + dy) * r + dx;
                        for y in 0..h {
                            for xq in 0..w {
                                os[(ch * h * r + y * r + dy) * w * r + xq * r + dx] =
                                    xs[(ic * h + y) * w + xq];
                            }
                        }
                    }
                }
            }
        }
        self.push_op(out, move |g, _| {
            let gs = g.as_slice().unwrap();
            let mut dx_arr = Arr::zeros(IxDyn(&[crr, h, w]));
            {
                let ds = dx_arr.as_slice_mut().unwrap();
                for ch in 0..c {
                    for dy in 0..r {
                        for dx in 0..r {
                            let ic = (ch * r + dy) * r + dx;
                            for y in 0..h {
                                for xq in 0..w {
                                    ds[(ic * h + y) * w + xq] =
                                        gs[(ch * h * r + y * r + dy) * w * r + xq * r + dx];
                                }
                            }
                        }
                    }
                }
            }
            vec![(x, dx_arr)]
        })
    }

    /// Unfold the 3x3 neighborhood of every pixel of a `[H,W]` map into
    /// `[9,H,W]`, replicating edges, with neighbor index `k = (dy+1)*3+dx+1`.
    pub fn unfold3x3_replicate(&mut self, x: Var) -> Var {
        let xv = as2(self.value(x));
        let (h, w) = xv.dim();
        let xs = xv.as_slice().unwrap();
        let mut out = Arr::zeros(IxDyn(&[9, h, w]));
        {
            let os = out.as_slice_mut().unwrap();
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let k = ((dy + 1) * 3 + dx + 1) as usize;
                    for y in 0..h {
                        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        for xq in 0..w {
                            let sx = (xq as i64 + dx).clamp(0, w as i64 - 1) as usize;
                            os[(k * h + y) * w + xq] = xs[sy * w + sx];
                        }
                    }
                }
            }
        }
        self.push_op(out, move |g, _| {
            let gs = g.as_slice().unwrap();
            let mut dx_arr = Arr::zeros(IxDyn(&[h, w]));
            {
                let ds = dx_arr.as_slice_mut().unwrap();
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let k = ((dy + 1) * 3 + dx + 1) as usize;
                        for y in 0..h {
                            let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                            for xq in 0..w {
                                let sx = (xq as i64 + dx).clamp(0, w as i64 - 1) as usize;
                                ds[sy * w + sx] += gs[(k * h + y) * w + xq];
                            }
                        }
                    }
                }
            }
            vec![(x, dx_arr)]
        })
    }
}

/// Per-output-index source pair and weight for half-pixel x2 interpolation.
fn lerp_table(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let f = src.floor();
            let t = src - f;
            let i0 = (f.max(0.0) as usize).min(n - 1);
            let i1 = ((f + 1.0).max(0.0) as usize).min(n - 1);
            (i0, i1, t)
        })
        .collect()
}
