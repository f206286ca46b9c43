use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Boolean pixel selection over an `h x w` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    count: usize,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::argument(format!(
                "mask of {} bits for a {height}x{width} grid",
                bits.len()
            )));
        }
        let count = bits.iter().filter(|&&b| b).count();
        Ok(PixelMask {
            height,
            width,
            bits,
            count,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        PixelMask {
            height,
            width,
            bits: vec![false; height * width],
            count: 0,
        }
    }

    /// The first `count` pixels of a ranking.
    pub fn from_ranking(height: usize, width: usize, ranking: &[usize], count: usize) -> Self {
        let mut bits = vec![false; height * width];
        for &idx in ranking.iter().take(count) {
            bits[idx] = true;
        }
        PixelMask {
            height,
            width,
            bits,
            count: count.min(ranking.len()),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Selected share of the grid.
    pub fn fraction(&self) -> f64 {
        self.count as f64 / (self.height * self.width) as f64
    }

    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn is_subset_of(&self, other: &PixelMask) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn intersection_count(&self, other: &[bool]) -> usize {
        self.bits
            .iter()
            .zip(other)
            .filter(|(&a, &b)| a && b)
            .count()
    }
}

/// Pixel indices sorted by decreasing saliency, row-major order on ties.
pub fn saliency_ranking(values: &Tensor) -> Vec<usize> {
    let data = values.data();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data[b].total_cmp(&data[a]).then(a.cmp(&b)));
    order
}

/// `round(a · n)` pixels, at least one when `a > 0`.
pub fn pixel_count(a: f64, n: usize) -> usize {
    if a <= 0.0 {
        return 0;
    }
    ((a * n as f64).round() as usize).clamp(1, n)
}

/// The `round(a · H · W)` most salient pixels.
pub fn top_fraction_mask(values: &Tensor, a: f64) -> Result<PixelMask> {
    let (h, w) = values.dims2()?;
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::argument(format!(
            "mask fraction must be in (0, 1], got {a}"
        )));
    }
    let ranking = saliency_ranking(values);
    Ok(PixelMask::from_ranking(h, w, &ranking, pixel_count(a, h * w)))
}

/// Pixels at or above the `q`-th percentile, where the threshold is the
/// `ceil((100 − q)% · N)`-th largest value.
pub fn percentile_mask(values: &Tensor, q: u32) -> Result<PixelMask> {
    let (h, w) = values.dims2()?;
    if q >= 100 {
        return Err(Error::argument(format!("percentile must be below 100, got {q}")));
    }
    let n = h * w;
    let k = ((n * (100 - q as usize)).div_ceil(100)).max(1);
    let ranking = saliency_ranking(values);
    let threshold = values.data()[ranking[k - 1]];
    let bits = values.data().iter().map(|&v| v >= threshold).collect();
    PixelMask::new(h, w, bits)
}

/// Rectangular crop around a mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartPatch {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
    pub image_id: String,
    #[serde(skip)]
    pub mask: PixelMask,
}

impl PartPatch {
    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }

    /// True when the patch spans the whole image.
    pub fn is_full_image(&self) -> bool {
        self.top == 0
            && self.left == 0
            && self.bottom == self.mask.height
            && self.right == self.mask.width
    }

    /// Pixels of `image` (`[C, H, W]`) inside the box.
    pub fn crop(&self, image: &Tensor) -> Result<Tensor> {
        let (c, h, w) = image.dims3()?;
        if (h, w) != (self.mask.height, self.mask.width) {
            return Err(Error::argument("image and mask sizes differ"));
        }
        Ok(Tensor::from_fn(&[c, self.height(), self.width()], |i| {
            image.get(&[i[0], i[1] + self.top, i[2] + self.left])
        }))
    }
}

/// Tight bounding box of a non-empty mask.
pub fn crop_patch(image_id: &str, mask: &PixelMask) -> Result<PartPatch> {
    if mask.count() == 0 {
        return Err(Error::argument("cannot crop around an empty mask"));
    }
    let (mut top, mut left) = (usize::MAX, usize::MAX);
    let (mut bottom, mut right) = (0, 0);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.is_set(r, c) {
                top = top.min(r);
                left = left.min(c);
                bottom = bottom.max(r + 1);
                right = right.max(c + 1);
            }
        }
    }
    Ok(PartPatch {
        top,
        left,
        bottom,
        right,
        image_id: image_id.to_string(),
        mask: mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ordered(h: usize, w: usize) -> Tensor {
        // Strictly ordered, descending along a scrambled index.
        Tensor::from_fn(&[h, w], |i| ((i[0] * w + i[1]) * 7919 % (h * w)) as f32)
    }

    #[test]
    fn full_fraction_selects_everything() {
        let m = top_fraction_mask(&ordered(5, 4), 1.0).unwrap();
        assert_eq!(m.count(), 20);
        assert!(m.bits().iter().all(|&b| b));
    }

    #[test]
    fn two_percent_of_224_squared() {
        let m = top_fraction_mask(&ordered(224, 224), 0.02).unwrap();
        assert_eq!(m.count(), 1004);
        assert_eq!(m.bits().iter().filter(|&&b| b).count(), 1004);
    }

    #[test]
    fn constant_saliency_takes_row_major_prefix() {
        let m = top_fraction_mask(&Tensor::full(&[4, 5], 0.3), 0.25).unwrap();
        assert_eq!(m.count(), 5);
        assert!(m.bits()[..5].iter().all(|&b| b));
        assert!(m.bits()[5..].iter().all(|&b| !b));
    }

    #[test]
    fn fraction_domain() {
        let t = ordered(3, 3);
        assert!(top_fraction_mask(&t, 0.0).is_err());
        assert!(top_fraction_mask(&t, 1.5).is_err());
        assert!(top_fraction_mask(&t, f64::NAN).is_err());
        assert_eq!(top_fraction_mask(&t, 1e-6).unwrap().count(), 1);
    }

    #[test]
    fn percentile_on_strict_order_keeps_ceil_five_percent() {
        for (h, w) in [(10, 10), (7, 9), (80, 80), (224, 224)] {
            let m = percentile_mask(&ordered(h, w), 95).unwrap();
            assert_eq!(m.count(), (h * w * 5).div_ceil(100), "{h}x{w}");
        }
    }

    #[test]
    fn percentile_on_constant_selects_all() {
        let m = percentile_mask(&Tensor::full(&[6, 6], 1.0), 95).unwrap();
        assert_eq!(m.count(), 36);
    }

    #[test]
    fn crop_cases() {
        let mut bits = vec![false; 30];
        bits[2 * 6 + 4] = true;
        let single = PixelMask::new(5, 6, bits).unwrap();
        let p = crop_patch("img", &single).unwrap();
        assert_eq!((p.top, p.left, p.bottom, p.right), (2, 4, 3, 5));

        let full = PixelMask::new(5, 6, vec![true; 30]).unwrap();
        assert!(crop_patch("img", &full).unwrap().is_full_image());

        // L shape: column 1 rows 1..=3 plus row 3 columns 1..=4
        let mut bits = vec![false; 30];
        for r in 1..=3 {
            bits[r * 6 + 1] = true;
        }
        for c in 1..=4 {
            bits[3 * 6 + c] = true;
        }
        let l = crop_patch("img", &PixelMask::new(5, 6, bits).unwrap()).unwrap();
        assert_eq!((l.top, l.left, l.bottom, l.right), (1, 1, 4, 5));

        assert!(crop_patch("img", &PixelMask::empty(5, 6)).is_err());
    }

    #[test]
    fn crop_extracts_rectangle() {
        let img = Tensor::from_fn(&[2, 4, 4], |i| (i[0] * 16 + i[1] * 4 + i[2]) as f32);
        let mut bits = vec![false; 16];
        bits[5] = true;
        bits[10] = true;
        let p = crop_patch("x", &PixelMask::new(4, 4, bits).unwrap()).unwrap();
        let c = p.crop(&img).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0, 21.0, 22.0, 25.0, 26.0]);
    }
}
