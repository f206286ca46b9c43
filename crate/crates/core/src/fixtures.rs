//! Synthetic models and images with known ground truth.
//!
//! * [`gen_planted`] builds a linear backbone whose similarity at one latent
//!   cell reads only a chosen square region `R` of the input.
//! * [`gen_random`] draws small sequential backbones, prototypes and images.
//! * [`gen_flat`] builds a model whose features ignore the input entirely.
//! * [`occlusion_oracle`] is the brute-force single-pixel importance map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evalio::netpbm::{byte_to_unit, unit_to_byte};
use crate::proto::{
    cell_similarity, extract_features, ModelBundle, Provenance, PrototypeSet,
    SimilarityFunction, Target, TargetPolicy,
};
use crate::saliency::PixelMask;
use crate::tensor::{
    bicubic_upsample, Backbone, Conv2d, LayerSpec, MaxPool2d, ReceptiveFieldBox, Tensor,
};

/// Pixel stride of the planted backbone's second feature map.
pub const PLANTED_LATTICE: usize = 8;

/// Latent channels of the planted backbone.
pub const PLANTED_DIM: usize = 8;

/// Squared latent distance produced by masking all of `R`.
pub const PLANTED_FULL_DISTANCE: f64 = 2.6;

/// `|f(x) − r|²` below which two cells count as the same match.
const UNIQUE_MARGIN: f64 = 1e-3;

/// Planted model, its default image and the closed-form effect of `R`.
#[derive(Debug, Clone)]
pub struct PlantedFixture {
    pub model: ModelBundle,
    pub image: Tensor,
    pub image_id: String,
    pub region: ReceptiveFieldBox,
    /// Designated latent cell and its score on `image`.
    pub target: Target,
    /// Per-channel dataset mean of the fixture, the default fill.
    pub fill: Vec<f32>,
    /// Similarity ratio after replacing all of `R` by `fill`, evaluated in
    /// `f64` from the weights.
    pub tau_region: f64,
}

impl PlantedFixture {
    /// Pixel count of `R` over the image area.
    pub fn region_fraction(&self) -> f64 {
        let (h, w) = self.model.input_size();
        (self.region.height() * self.region.width()) as f64 / (h * w) as f64
    }

    pub fn region_mask(&self) -> PixelMask {
        let (h, w) = self.model.input_size();
        let bits = (0..h * w)
            .map(|i| self.region.contains(i / w, i % w))
            .collect();
        PixelMask::new(h, w, bits).expect("sized from the model")
    }

    /// Pixels where the one-hot upsampling of the designated cell is nonzero.
    pub fn target_footprint(&self) -> PixelMask {
        let (fh, fw) = self.model.latent_size();
        let (h, w) = self.model.input_size();
        bicubic_footprint(fh, fw, self.target.h, self.target.w, h, w)
    }

    /// A synthetic object: `R` grown by `margin` pixels, minus the designated
    /// cell's upsampling footprint.
    pub fn object_segmentation(&self, margin: usize) -> PixelMask {
        let (h, w) = self.model.input_size();
        let footprint = self.target_footprint();
        let r = &self.region;
        let bits = (0..h * w)
            .map(|i| {
                let (row, col) = (i / w, i % w);
                row + margin >= r.top
                    && row < r.bottom + margin
                    && col + margin >= r.left
                    && col < r.right + margin
                    && !footprint.bits()[i]
            })
            .collect();
        PixelMask::new(h, w, bits).expect("sized from the model")
    }

    /// True when `R` and the designated cell's footprint share no pixel.
    pub fn region_off_footprint(&self) -> bool {
        self.target_footprint()
            .intersection_count(self.region_mask().bits())
            == 0
    }
}

/// Nonzero support of a one-hot `fh x fw` map upsampled to `h x w`.
pub fn bicubic_footprint(fh: usize, fw: usize, hc: usize, wc: usize, h: usize, w: usize) -> PixelMask {
    let one_hot = Tensor::from_fn(&[fh, fw], |i| if i[0] == hc && i[1] == wc { 1.0 } else { 0.0 });
    let up = bicubic_upsample(&one_hot, h, w).expect("non-empty maps");
    PixelMask::new(h, w, up.data().iter().map(|&v| v != 0.0).collect()).expect("same size")
}

/// Nearest value an 8-bit file can hold, so images survive a PPM round trip.
fn quantize(v: f32) -> f32 {
    byte_to_unit(unit_to_byte(v))
}

fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.random::<f32>()
}

/// Square region `R` given by its top-left corner and side, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantedRegion {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl PlantedRegion {
    /// A lattice-aligned square of `size` placed by `seed` inside a
    /// `side x side` image.
    pub fn random(seed: u64, side: usize, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_2e61);
        let slots = (side.saturating_sub(size)) / PLANTED_LATTICE + 1;
        PlantedRegion {
            top: rng.random_range(0..slots) * PLANTED_LATTICE,
            left: rng.random_range(0..slots) * PLANTED_LATTICE,
            size,
        }
    }
}

/// Linear backbone `conv 4/4 → ReLU → conv 2/2 → ReLU → conv K` on a
/// `side x side` image, with positive weights, no bias and a last kernel
/// whose only nonzero taps, seen from the designated cell, sit on the
/// lattice blocks of `R`.
///
/// The designated cell is the latent cell farthest from `R` (row-major first
/// on ties); the prototype is the latent vector there, so the cell scores
/// `1` under the negative-exponential similarity. The last layer is scaled
/// so that masking all of `R` moves the latent vector by a squared distance
/// of [`PLANTED_FULL_DISTANCE`].
pub fn gen_planted(seed: u64, region: PlantedRegion, side: usize) -> Result<PlantedFixture> {
    let lat = PLANTED_LATTICE;
    if side < 2 * lat || !side.is_multiple_of(lat) {
        return Err(Error::argument(format!(
            "planted images need a side that is a multiple of {lat} and at least {}, got {side}",
            2 * lat
        )));
    }
    let PlantedRegion { top, left, size } = region;
    if size < lat || size % lat != 0 || top % lat != 0 || left % lat != 0 {
        return Err(Error::argument(format!(
            "region {size}x{size} at ({top}, {left}) does not fit the {lat}-pixel stride lattice"
        )));
    }
    if top + size > side || left + size > side {
        return Err(Error::argument(format!(
            "region {size}x{size} at ({top}, {left}) leaves the {side}x{side} image"
        )));
    }
    let grid = side / lat;
    let (b_top, b_left, b_size) = (top / lat, left / lat, size / lat);
    let blocks: Vec<(usize, usize)> = (b_top..b_top + b_size)
        .flat_map(|r| (b_left..b_left + b_size).map(move |c| (r, c)))
        .collect();
    let dist = |h: usize, w: usize| {
        blocks
            .iter()
            .map(|&(r, c)| r.abs_diff(h).max(c.abs_diff(w)))
            .min()
            .unwrap_or(0)
    };
    let (hc, wc) = (0..grid * grid)
        .map(|i| (i / grid, i % grid))
        .reduce(|best, cur| if dist(cur.0, cur.1) > dist(best.0, best.1) { cur } else { best })
        .expect("grid is non-empty");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = Tensor::from_fn(&[4, 3, 4, 4], |_| uniform(&mut rng, 0.02, 0.06));
    let w2 = Tensor::from_fn(&[8, 4, 2, 2], |_| uniform(&mut rng, 0.1, 0.3));
    let k = 2 * grid - 1;
    let pad = grid - 1;
    let mut w3 = vec![0f32; PLANTED_DIM * 8 * k * k];
    for &(br, bc) in &blocks {
        let (ki, kj) = (br + pad - hc, bc + pad - wc);
        for o in 0..PLANTED_DIM {
            for i in 0..8 {
                w3[((o * 8 + i) * k + ki) * k + kj] = uniform(&mut rng, 0.5, 1.0);
            }
        }
    }
    let image = planted_image(&mut rng, side, &region);
    let fill: Vec<f32> = (0..3)
        .map(|c| (image.channel(c).expect("3 channels").sum() / (side * side) as f64) as f32)
        .collect();

    // Latent displacement caused by filling R, before scaling the last layer.
    let delta = planted_delta(&w1, &w2, &w3, k, pad, (hc, wc), &blocks, &image, &fill);
    let norm2: f64 = delta.iter().map(|d| d * d).sum();
    if norm2 <= 0.0 {
        return Err(Error::internal("planted region has no effect"));
    }
    let alpha = (PLANTED_FULL_DISTANCE / norm2).sqrt() as f32;
    let w3: Vec<f32> = w3.iter().map(|&v| v * alpha).collect();
    let delta = planted_delta(&w1, &w2, &w3, k, pad, (hc, wc), &blocks, &image, &fill);
    let tau_region = (-delta.iter().map(|d| d * d).sum::<f64>()).exp();

    let backbone = Backbone::new(vec![
        LayerSpec::Conv2d(Conv2d::without_bias(w1, 4, 0)?),
        LayerSpec::Relu,
        LayerSpec::Conv2d(Conv2d::without_bias(w2, 2, 0)?),
        LayerSpec::Relu,
        LayerSpec::Conv2d(Conv2d::without_bias(
            Tensor::new(vec![PLANTED_DIM, 8, k, k], w3)?,
            1,
            pad,
        )?),
    ])?;
    let image_id = format!("planted-{seed}");
    let placeholder = PrototypeSet::new(vec![vec![0.0; PLANTED_DIM]])?;
    let model = ModelBundle::new(
        backbone,
        placeholder,
        SimilarityFunction::NegExp,
        None,
        TargetPolicy::PrototreeThreshold { theta: 0.5 },
        (side, side),
    )?;
    let features = extract_features(&model, &image)?;
    let prototype = PrototypeSet::with_provenance(
        vec![features.vector(hc, wc)],
        vec![Some(Provenance {
            image_id: image_id.clone(),
            h: hc,
            w: wc,
        })],
    )?;
    let model = model.with_prototypes(prototype)?;
    let r = model.prototypes().vector(0);
    for h in 0..grid {
        for w in 0..grid {
            if (h, w) != (hc, wc) && features.squared_distance(h, w, r) < UNIQUE_MARGIN {
                return Err(Error::internal(format!(
                    "planted cell ({hc}, {wc}) is matched again at ({h}, {w})"
                )));
            }
        }
    }
    let score = cell_similarity(&features, hc, wc, r, model.simfn());
    Ok(PlantedFixture {
        model,
        image,
        image_id,
        region: ReceptiveFieldBox {
            top,
            left,
            bottom: top + size,
            right: left + size,
        },
        target: Target {
            prototype: 0,
            h: hc,
            w: wc,
            score,
        },
        fill,
        tau_region,
    })
}

/// Dim textured background with a bright blob filling `R`.
fn planted_image(rng: &mut ChaCha8Rng, side: usize, region: &PlantedRegion) -> Tensor {
    let cy = region.top as f32 + region.size as f32 / 2.0;
    let cx = region.left as f32 + region.size as f32 / 2.0;
    let spread = region.size as f32 / 2.0;
    Tensor::from_fn(&[3, side, side], |i| {
        let (c, r, col) = (i[0], i[1], i[2]);
        let checker = if (r / 4 + col / 4) % 2 == 0 { 0.04 } else { 0.0 };
        let base = 0.12 + 0.08 * r as f32 / side as f32 + 0.03 * c as f32 + checker;
        let noise = 0.03 * rng.random::<f32>();
        let inside = (region.top..region.top + region.size).contains(&r)
            && (region.left..region.left + region.size).contains(&col);
        let blob = if inside {
            let d2 = ((r as f32 + 0.5 - cy).powi(2) + (col as f32 + 0.5 - cx).powi(2))
                / (spread * spread);
            0.45 + 0.2 * (-d2).exp()
        } else {
            0.0
        };
        quantize(base + noise + blob)
    })
}

/// Change of the designated latent vector when `R` is replaced by `fill`,
/// by direct summation over the linear network in `f64`.
#[allow(clippy::too_many_arguments)]
fn planted_delta(
    w1: &Tensor,
    w2: &Tensor,
    w3: &[f32],
    k: usize,
    pad: usize,
    (hc, wc): (usize, usize),
    blocks: &[(usize, usize)],
    image: &Tensor,
    fill: &[f32],
) -> Vec<f64> {
    let mut delta = vec![0f64; PLANTED_DIM];
    for &(br, bc) in blocks {
        // Second-layer response of this block to the pixel change.
        let mut z2 = [0f64; 8];
        for (o2, z) in z2.iter_mut().enumerate() {
            for i2 in 0..4 {
                for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let w = w2.get(&[o2, i2, a, b]) as f64;
                    let (r1, c1) = (2 * br + a, 2 * bc + b);
                    let mut z1 = 0f64;
                    for ch in 0..3 {
                        for u in 0..4 {
                            for v in 0..4 {
                                let x = image.get(&[ch, 4 * r1 + u, 4 * c1 + v]) as f64;
                                z1 += w1.get(&[i2, ch, u, v]) as f64 * (x - fill[ch] as f64);
                            }
                        }
                    }
                    *z += w * z1;
                }
            }
        }
        let (ki, kj) = (br + pad - hc, bc + pad - wc);
        for (o, d) in delta.iter_mut().enumerate() {
            for (i, z) in z2.iter().enumerate() {
                *d += w3[((o * 8 + i) * k + ki) * k + kj] as f64 * z;
            }
        }
    }
    delta
}

/// Exhaustive single-pixel occlusion: importance of pixel `p` is
/// `s_m − s(x with p replaced by fill)` at the target's cell.
pub fn occlusion_oracle(
    model: &ModelBundle,
    x: &Tensor,
    target: &Target,
    fill: &[f32],
) -> Result<Tensor> {
    let features = extract_features(model, x)?;
    let (fh, fw) = (features.height(), features.width());
    if target.prototype >= model.prototypes().len() || target.h >= fh || target.w >= fw {
        return Err(Error::argument("target outside the model's latent grid"));
    }
    let r = model.prototypes().vector(target.prototype);
    let s_m = cell_similarity(&features, target.h, target.w, r, model.simfn()) as f64;
    let (c, h, w) = x.dims3()?;
    if fill.len() != c {
        return Err(Error::argument(format!("{} fill values for {c} channels", fill.len())));
    }
    let plane = h * w;
    let values: Result<Vec<f32>> = (0..plane)
        .into_par_iter()
        .map(|p| {
            if (0..c).all(|k| x.data()[k * plane + p] == fill[k]) {
                return Ok(0.0);
            }
            let mut data = x.data().to_vec();
            for (k, &v) in fill.iter().enumerate() {
                data[k * plane + p] = v;
            }
            let f = extract_features(model, &Tensor::new(x.shape().to_vec(), data)?)?;
            let s = cell_similarity(&f, target.h, target.w, r, model.simfn()) as f64;
            Ok((s_m - s) as f32)
        })
        .collect();
    Tensor::new(vec![h, w], values?)
}

/// Shape options for [`gen_random`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomSpec {
    /// Inclusive range of backbone depth (conv, ReLU and pooling layers).
    pub min_layers: usize,
    pub max_layers: usize,
    /// Largest image side; images are square.
    pub max_side: usize,
    pub prototypes: usize,
    pub images: usize,
    /// Nonnegative weights, no bias and images in `[0, 1]`.
    pub positive: bool,
}

impl Default for RandomSpec {
    fn default() -> Self {
        RandomSpec {
            min_layers: 2,
            max_layers: 4,
            max_side: 32,
            prototypes: 4,
            images: 3,
            positive: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomFixture {
    pub model: ModelBundle,
    pub images: Vec<(String, Tensor)>,
}

/// Seeded random sequential backbone, prototypes and images.
pub fn gen_random(seed: u64, spec: &RandomSpec) -> Result<RandomFixture> {
    if spec.min_layers < 1 || spec.min_layers > spec.max_layers {
        return Err(Error::argument("random fixtures need 1 <= min_layers <= max_layers"));
    }
    if spec.max_side < 4 || spec.prototypes < 1 || spec.images < 1 {
        return Err(Error::argument(
            "random fixtures need max_side >= 4, prototypes >= 1 and images >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = rng.random_range(spec.max_side.min(8)..=spec.max_side);
    let depth = rng.random_range(spec.min_layers..=spec.max_layers);
    let mut layers = Vec::with_capacity(depth);
    let (mut channels, mut size) = (3usize, side);
    for idx in 0..depth {
        let kind = if idx == 0 { 0 } else { rng.random_range(0..3) };
        let layer = match kind {
            1 if !matches!(layers.last(), Some(LayerSpec::Relu)) => LayerSpec::Relu,
            2 if size >= 4 => {
                let window = rng.random_range(2..=3usize.min(size));
                let stride = rng.random_range(1..=window);
                LayerSpec::MaxPool2d(MaxPool2d::new(window, stride)?)
            }
            _ => {
                let out = rng.random_range(2..=5);
                let kernel = rng.random_range(1..=3usize.min(size));
                let stride = if size >= 8 { rng.random_range(1..=2) } else { 1 };
                let padding = rng.random_range(0..=kernel / 2);
                let fan_in = (channels * kernel * kernel) as f32;
                let scale = (3.0 / fan_in).sqrt();
                let positive = spec.positive;
                let weight = Tensor::from_fn(&[out, channels, kernel, kernel], |_| {
                    if positive {
                        uniform(&mut rng, 0.0, 2.0 * scale)
                    } else {
                        uniform(&mut rng, -scale, scale) * 1.7
                    }
                });
                let bias = Tensor::from_fn(&[out], |_| {
                    if positive {
                        0.0
                    } else {
                        uniform(&mut rng, -0.1, 0.1)
                    }
                });
                channels = out;
                LayerSpec::Conv2d(Conv2d::new(weight, bias, stride, padding)?)
            }
        };
        size = match &layer {
            LayerSpec::Conv2d(c) => c.output_dims(size, size)?.0,
            LayerSpec::MaxPool2d(p) => p.output_dims(size, size)?.0,
            LayerSpec::Relu => size,
        };
        layers.push(layer);
    }
    let backbone = Backbone::new(layers)?;
    let images: Vec<(String, Tensor)> = (0..spec.images)
        .map(|n| {
            let img = Tensor::from_fn(&[3, side, side], |_| {
                if spec.positive {
                    rng.random::<f32>()
                } else {
                    uniform(&mut rng, -1.0, 1.0)
                }
            });
            (format!("random-{seed}-{n}"), img)
        })
        .collect();

    let neg_exp = rng.random::<bool>();
    let (simfn, policy, head) = if neg_exp {
        (
            SimilarityFunction::NegExp,
            TargetPolicy::PrototreeThreshold { theta: 0.5 },
            None,
        )
    } else {
        let p = spec.prototypes;
        let head = Tensor::from_fn(&[2, p], |i| if i[1] % 2 == i[0] { 1.0 } else { -0.5 });
        (SimilarityFunction::default(), TargetPolicy::ProtopnetTop10, Some(head))
    };
    let placeholder = PrototypeSet::new(vec![vec![0.0; channels]; spec.prototypes])?;
    let model = ModelBundle::new(backbone, placeholder, simfn, head, policy, (side, side))?;

    // Prototypes near realised latent vectors keep similarities away from 0.
    let features: Vec<_> = images
        .iter()
        .map(|(_, x)| extract_features(&model, x))
        .collect::<Result<_>>()?;
    let (fh, fw) = model.latent_size();
    let jitter = Normal::new(0.0, 0.1).map_err(|e| Error::internal(e.to_string()))?;
    let mut vectors = Vec::with_capacity(spec.prototypes);
    let mut provenance = Vec::with_capacity(spec.prototypes);
    for _ in 0..spec.prototypes {
        let n = rng.random_range(0..features.len());
        let (h, w) = (rng.random_range(0..fh), rng.random_range(0..fw));
        let v = features[n].vector(h, w);
        vectors.push(
            v.iter()
                .map(|&a| a + jitter.sample(&mut rng) as f32)
                .collect(),
        );
        provenance.push(Some(Provenance {
            image_id: images[n].0.clone(),
            h,
            w,
        }));
    }
    let model = model.with_prototypes(PrototypeSet::with_provenance(vectors, provenance)?)?;
    Ok(RandomFixture { model, images })
}

/// A model whose latent map is a constant bias: every similarity ratio is 1
/// whatever is deleted.
pub fn gen_flat(seed: u64, side: usize) -> Result<RandomFixture> {
    if side < 4 || !side.is_multiple_of(4) {
        return Err(Error::argument("flat fixtures need a side that is a multiple of 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = Conv2d::new(
        Tensor::zeros(&[4, 3, 4, 4]),
        Tensor::from_fn(&[4], |_| uniform(&mut rng, 0.2, 0.8)),
        4,
        0,
    )?;
    let backbone = Backbone::new(vec![LayerSpec::Conv2d(conv), LayerSpec::Relu])?;
    let images: Vec<(String, Tensor)> = (0..2)
        .map(|n| {
            let img = Tensor::from_fn(&[3, side, side], |_| quantize(rng.random::<f32>()));
            (format!("flat-{seed}-{n}"), img)
        })
        .collect();
    let placeholder = PrototypeSet::new(vec![vec![0.0; 4]; 2])?;
    let head = Tensor::from_fn(&[2, 2], |i| if i[0] == i[1] { 1.0 } else { -0.5 });
    let model = ModelBundle::new(
        backbone,
        placeholder,
        SimilarityFunction::default(),
        Some(head),
        TargetPolicy::ProtopnetTop10,
        (side, side),
    )?;
    let f = extract_features(&model, &images[0].1)?;
    let v = f.vector(0, 0);
    let prototypes = PrototypeSet::with_provenance(
        vec![v.clone(), v.iter().map(|a| a + 0.5).collect()],
        vec![
            Some(Provenance {
                image_id: images[0].0.clone(),
                h: 0,
                w: 0,
            }),
            None,
        ],
    )?;
    let model = model.with_prototypes(prototypes)?;
    Ok(RandomFixture { model, images })
}
