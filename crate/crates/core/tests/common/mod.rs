//! Independent reference implementations shared by the integration tests.
//!
//! Everything here runs in `f64` with plain nested loops and reads only the
//! public layer parameters, so it shares no code path with the library
//! kernels it checks.
#![allow(dead_code)]

use protofaith::proto::{ModelBundle, SimilarityFunction, Target};
use protofaith::tensor::{Backbone, Conv2d, LayerSpec, MaxPool2d};
use protofaith::Tensor;

/// `[C, H, W]` activations in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Act {
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Act {
            c: s[0],
            h: s[1],
            w: s[2],
            v: t.data().iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn at(&self, c: usize, r: usize, col: usize) -> f64 {
        self.v[(c * self.h + r) * self.w + col]
    }
}

/// Piecewise-linear state of a forward pass: ReLU signs and pool winners.
pub type Pattern = Vec<Vec<usize>>;

pub fn ref_conv(x: &Act, conv: &Conv2d) -> Act {
    let (kh, kw) = conv.kernel();
    let (s, p) = (conv.stride(), conv.padding() as isize);
    let cout = conv.out_channels();
    let oh = (x.h + 2 * conv.padding() - kh) / s + 1;
    let ow = (x.w + 2 * conv.padding() - kw) / s + 1;
    let wt = conv.weight();
    let mut v = vec![0f64; cout * oh * ow];
    for o in 0..cout {
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = conv.bias().data()[o] as f64;
                for i in 0..x.c {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let ir = (r * s) as isize + ki as isize - p;
                            let ic = (c * s) as isize + kj as isize - p;
                            if ir < 0 || ic < 0 || ir >= x.h as isize || ic >= x.w as isize {
                                continue;
                            }
                            acc += wt.get(&[o, i, ki, kj]) as f64
                                * x.at(i, ir as usize, ic as usize);
                        }
                    }
                }
                v[(o * oh + r) * ow + c] = acc;
            }
        }
    }
    Act { c: cout, h: oh, w: ow, v }
}

pub fn ref_relu(x: &Act) -> (Act, Vec<usize>) {
    let signs = x.v.iter().map(|&a| usize::from(a > 0.0)).collect();
    let v = x.v.iter().map(|&a| a.max(0.0)).collect();
    (Act { v, ..*x }, signs)
}

pub fn ref_maxpool(x: &Act, pool: MaxPool2d) -> (Act, Vec<usize>) {
    let oh = (x.h - pool.window) / pool.stride + 1;
    let ow = (x.w - pool.window) / pool.stride + 1;
    let mut v = Vec::new();
    let mut winners = Vec::new();
    for c in 0..x.c {
        for r in 0..oh {
            for col in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0);
                for i in 0..pool.window {
                    for j in 0..pool.window {
                        let a = x.at(c, r * pool.stride + i, col * pool.stride + j);
                        if a > best.0 {
                            best = (a, i * pool.window + j);
                        }
                    }
                }
                v.push(best.0);
                winners.push(best.1);
            }
        }
    }
    (Act { c: x.c, h: oh, w: ow, v }, winners)
}

pub fn ref_forward(net: &Backbone, x: &Act) -> (Act, Pattern) {
    let mut a = x.clone();
    let mut pattern = Vec::new();
    for layer in net.layers() {
        a = match layer {
            LayerSpec::Conv2d(c) => ref_conv(&a, c),
            LayerSpec::Relu => {
                let (out, signs) = ref_relu(&a);
                pattern.push(signs);
                out
            }
            LayerSpec::MaxPool2d(p) => {
                let (out, winners) = ref_maxpool(&a, *p);
                pattern.push(winners);
                out
            }
        };
    }
    (a, pattern)
}

pub fn ref_score(simfn: SimilarityFunction, f: &Act, h: usize, w: usize, r: &[f32]) -> f64 {
    let d2: f64 = (0..f.c)
        .map(|k| {
            let d = f.at(k, h, w) - r[k] as f64;
            d * d
        })
        .sum();
    match simfn {
        SimilarityFunction::LogRatio { epsilon } => ((d2 + 1.0) / (d2 + epsilon)).ln(),
        SimilarityFunction::NegExp => (-d2).exp(),
    }
}

/// Similarity of `target`'s prototype at its cell, all in `f64`.
pub fn ref_similarity(model: &ModelBundle, x: &Act, target: &Target) -> f64 {
    let (f, _) = ref_forward(model.backbone(), x);
    ref_score(
        model.simfn(),
        &f,
        target.h,
        target.w,
        model.prototypes().vector(target.prototype),
    )
}

/// Central difference of `f` along coordinate `i`, plus whether the
/// activation pattern is the same at `x`, `x + h e_i` and `x − h e_i`.
pub fn central_difference(
    x: &Act,
    i: usize,
    step: f64,
    f: impl Fn(&Act) -> (f64, Pattern),
) -> (f64, bool) {
    let (_, base) = f(x);
    let mut plus = x.clone();
    plus.v[i] += step;
    let mut minus = x.clone();
    minus.v[i] -= step;
    let (fp, pp) = f(&plus);
    let (fm, pm) = f(&minus);
    ((fp - fm) / (2.0 * step), pp == base && pm == base)
}

/// `|a − n|` over `max(|a|, |n|, floor)`; `floor` keeps entries that are
/// tiny next to the largest one from dominating.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Direct bicubic interpolation from the kernel definition.
pub fn ref_bicubic(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let keys = |t: f64| {
        let a = -0.5;
        let t = t.abs();
        if t <= 1.0 {
            (a + 2.0) * t.powi(3) - (a + 3.0) * t * t + 1.0
        } else if t < 2.0 {
            a * t.powi(3) - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
        } else {
            0.0
        }
    };
    let mut out = vec![0f64; out_h * out_w];
    for y in 0..out_h {
        let sy = (y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
        for x in 0..out_w {
            let sx = (x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
            let mut acc = 0.0;
            for i in (sy.floor() as isize - 1)..=(sy.floor() as isize + 2) {
                for j in (sx.floor() as isize - 1)..=(sx.floor() as isize + 2) {
                    let ci = i.clamp(0, h as isize - 1) as usize;
                    let cj = j.clamp(0, w as isize - 1) as usize;
                    acc += keys(sy - i as f64) * keys(sx - j as f64) * map[ci * w + cj];
                }
            }
            out[y * out_w + x] = acc;
        }
    }
    out
}

/// Direct 5x5 Gaussian (σ = 1, normalized) with mirror padding.
pub fn ref_blur(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mirror = |i: isize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let mut i = i;
        while i < 0 || i >= n as isize {
            if i < 0 {
                i = -i;
            }
            if i >= n as isize {
                i = 2 * (n as isize - 1) - i;
            }
        }
        i as usize
    };
    let mut k = [[0f64; 5]; 5];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 2.0, j as f64 - 2.0);
            *v = (-(di * di + dj * dj) / 2.0).exp();
            total += *v;
        }
    }
    let mut out = vec![0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, row) in k.iter().enumerate() {
                for (j, kv) in row.iter().enumerate() {
                    let rr = mirror(r as isize + i as isize - 2, h);
                    let cc = mirror(c as isize + j as isize - 2, w);
                    acc += kv / total * map[rr * w + cc];
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Deterministic pseudo-random values in `[lo, hi)` from a small LCG.
pub fn lcg_values(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            lo + (hi - lo) * ((s >> 11) as f64 / (1u64 << 53) as f64)
        })
        .collect()
}

pub fn tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.iter().map(|&x| x as f32).collect()).unwrap()
}
