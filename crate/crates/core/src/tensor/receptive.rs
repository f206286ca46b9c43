use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::error::{Error, Result};

/// Input-pixel box, rows `top..bottom`, columns `left..right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReceptiveFieldBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl ReceptiveFieldBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom).contains(&row) && (self.left..self.right).contains(&col)
    }
}

/// Unclipped input span `(top, bottom, left, right)`, inclusive on all sides,
/// that can influence latent cell `(h, w)`. May extend past the image.
pub fn receptive_span(backbone: &Backbone, h: usize, w: usize) -> (isize, isize, isize, isize) {
    let (mut top, mut bottom) = (h as isize, h as isize);
    let (mut left, mut right) = (w as isize, w as isize);
    for layer in backbone.layers().iter().rev() {
        let (kh, sh, ph) = layer.geometry();
        let (kw, sw, pw) = layer.geometry_w();
        top = top * sh as isize - ph as isize;
        bottom = bottom * sh as isize - ph as isize + kh as isize - 1;
        left = left * sw as isize - pw as isize;
        right = right * sw as isize - pw as isize + kw as isize - 1;
    }
    (top, bottom, left, right)
}

/// Theoretical receptive field of latent cell `(h, w)` for an
/// `image_h x image_w` input, clipped to the image.
pub fn receptive_field(
    backbone: &Backbone,
    image_h: usize,
    image_w: usize,
    h: usize,
    w: usize,
) -> Result<ReceptiveFieldBox> {
    let (fh, fw) = backbone.output_dims(image_h, image_w)?;
    if h >= fh || w >= fw {
        return Err(Error::argument(format!(
            "latent cell ({h}, {w}) outside {fh}x{fw} feature map"
        )));
    }
    let (top, bottom, left, right) = receptive_span(backbone, h, w);
    let clip = |v: isize, n: usize| v.clamp(0, n as isize) as usize;
    let b = ReceptiveFieldBox {
        top: clip(top, image_h),
        bottom: clip(bottom + 1, image_h),
        left: clip(left, image_w),
        right: clip(right + 1, image_w),
    };
    if b.top >= b.bottom || b.left >= b.right {
        return Err(Error::internal(format!(
            "receptive field of ({h}, {w}) misses the image"
        )));
    }
    Ok(b)
}
