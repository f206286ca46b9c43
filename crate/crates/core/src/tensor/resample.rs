//! Resampling and smoothing filters on 2-D maps.
//!
//! Coordinates use the half-pixel-center convention: output pixel `y` maps to
//! source coordinate `(y + 0.5) * in / out - 0.5`. Taps that fall outside the
//! source replicate the nearest edge pixel.

use super::Tensor;
use crate::error::{Error, Result};

/// Free parameter of the cubic convolution kernel.
pub const BICUBIC_A: f64 = -0.5;

/// Standard deviation of the 5x5 smoothing filter, in pixels.
pub const GAUSSIAN_SIGMA: f64 = 1.0;

/// Cubic convolution kernel with parameter `a`, support `[-2, 2]`.
pub fn cubic_weight(t: f64, a: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps `(index, weight)` for every output coordinate along one axis.
fn cubic_taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 4]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|y| {
            let src = (y as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as isize;
            let mut taps = [(0usize, 0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let offset = k as isize - 1;
                let idx = (base + offset).clamp(0, n_in as isize - 1) as usize;
                *tap = (idx, cubic_weight(t - offset as f64, BICUBIC_A));
            }
            taps
        })
        .collect()
}

/// Separable bicubic interpolation of a `[H, W]` map to `[out_h, out_w]`.
pub fn bicubic_upsample(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::argument("bicubic resampling needs non-empty maps"));
    }
    let rows = cubic_taps(h, out_h);
    let cols = cubic_taps(w, out_w);
    let src = map.data();
    // Horizontal pass into an [h, out_w] buffer, then vertical.
    let mut tmp = vec![0f64; h * out_w];
    for r in 0..h {
        for (c, taps) in cols.iter().enumerate() {
            tmp[r * out_w + c] = taps
                .iter()
                .map(|&(j, wt)| wt * src[r * w + j] as f64)
                .sum();
        }
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for taps in &rows {
        for c in 0..out_w {
            let v: f64 = taps.iter().map(|&(i, wt)| wt * tmp[i * out_w + c]).sum();
            out.push(v as f32);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Bilinear resize of a `[C, H, W]` tensor, half-pixel centers, edge clamp.
pub fn bilinear_resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::argument("bilinear resize needs non-empty images"));
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|y| {
                let src = ((y as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = axis(h, out_h);
    let cols = axis(w, out_w);
    let x = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for &(r0, r1, fy) in &rows {
            for &(c0, c1, fx) in &cols {
                let top = plane[r0 * w + c0] as f64 * (1.0 - fx) + plane[r0 * w + c1] as f64 * fx;
                let bot = plane[r1 * w + c0] as f64 * (1.0 - fx) + plane[r1 * w + c1] as f64 * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Nearest-neighbour resize of a row-major boolean grid.
pub fn nearest_resize_mask(
    mask: &[bool],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<bool> {
    let pick = |y: usize, n_in: usize, n_out: usize| {
        (((y as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let sr = pick(r, h, out_h);
        for c in 0..out_w {
            out.push(mask[sr * w + pick(c, w, out_w)]);
        }
    }
    out
}

fn gaussian_taps() -> [f64; 5] {
    let mut g = [0f64; 5];
    for (k, v) in g.iter_mut().enumerate() {
        let d = k as f64 - 2.0;
        *v = (-d * d / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA)).exp();
    }
    let total: f64 = g.iter().sum();
    g.map(|v| v / total)
}

/// The normalized 5x5 Gaussian kernel, row-major.
pub fn gaussian_kernel5() -> [[f64; 5]; 5] {
    let g = gaussian_taps();
    let mut k = [[0f64; 5]; 5];
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = g[i] * g[j];
        }
    }
    k
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// 5x5 Gaussian smoothing with reflect padding.
pub fn gaussian_blur5(map: &Tensor) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    if h == 0 || w == 0 {
        return Err(Error::argument("cannot blur an empty map"));
    }
    let g = gaussian_taps();
    let src = map.data();
    let mut tmp = vec![0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = (0..5)
                .map(|k| g[k] * src[r * w + reflect(c as isize + k as isize - 2, w)] as f64)
                .sum();
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let v: f64 = (0..5)
                .map(|k| g[k] * tmp[reflect(r as isize + k as isize - 2, h) * w + c])
                .sum();
            out.push(v as f32);
        }
    }
    Tensor::new(vec![h, w], out)
}
