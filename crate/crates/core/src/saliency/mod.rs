//! Part-visualisation methods.
//!
//! Each method turns a target (prototype, best-matching latent cell) on an
//! image into a nonnegative per-pixel [`SaliencyMap`] at input resolution:
//!
//! * upsampling of the coarse similarity map (whole map, or only the best
//!   cell),
//! * Smoothgrads gradient ⊙ input through the backbone,
//! * PRP-style relevance propagation through the backbone,
//! * exhaustive occlusion and seeded uniform noise, used as references.

mod mask;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use mask::{
    crop_patch, percentile_mask, pixel_count, saliency_ranking, top_fraction_mask, PartPatch,
    PixelMask,
};

use crate::error::{Error, Result};
use crate::proto::{
    cell_similarity, extract_features, max_similarity, similarity_cotangent, similarity_values,
    ModelBundle, Target, TargetPolicy,
};
use crate::tensor::{backward_input, bicubic_upsample, gaussian_blur5, lrp_backward, RuleConfig, Tensor};

/// Percentile used to crop upsampled similarity maps.
pub const UPSAMPLE_PERCENTILE: u32 = 95;

/// Share of pixels kept for gradient and relevance patches.
pub const PATCH_FRACTION: f64 = 0.02;

/// Stabilizer of the latent relevance initialisation.
pub const PRP_STABILIZER: f64 = 1e-9;

/// User-facing choice of visualisation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Upsampled similarity map; variant follows the model's target policy.
    Upsample,
    Smoothgrads,
    Prp,
    /// Exhaustive single-pixel occlusion.
    Occlusion,
    /// Seeded uniform noise.
    Random,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Upsample,
        Method::Smoothgrads,
        Method::Prp,
        Method::Occlusion,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Upsample => "upsample",
            Method::Smoothgrads => "smoothgrads",
            Method::Prp => "prp",
            Method::Occlusion => "occlusion",
            Method::Random => "random",
        }
    }

    /// Concrete saliency kind for a model.
    pub fn resolve(self, model: &ModelBundle) -> SaliencyKind {
        match self {
            Method::Upsample => match model.policy() {
                TargetPolicy::ProtopnetTop10 => SaliencyKind::UpsampleProtopnet,
                TargetPolicy::PrototreeThreshold { .. } => SaliencyKind::UpsampleProtoTree,
            },
            Method::Smoothgrads => SaliencyKind::Smoothgrads,
            Method::Prp => SaliencyKind::PrpStyle,
            Method::Occlusion => SaliencyKind::Occlusion,
            Method::Random => SaliencyKind::Random,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::argument(format!("unknown method '{s}'")))
    }
}

/// Tag carried by every saliency map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SaliencyKind {
    #[serde(rename = "upsample-protopnet")]
    UpsampleProtopnet,
    #[serde(rename = "upsample-prototree")]
    UpsampleProtoTree,
    #[serde(rename = "smoothgrads")]
    Smoothgrads,
    #[serde(rename = "prp-style")]
    PrpStyle,
    #[serde(rename = "occlusion")]
    Occlusion,
    #[serde(rename = "random")]
    Random,
}

impl SaliencyKind {
    pub fn label(self) -> &'static str {
        match self {
            SaliencyKind::UpsampleProtopnet => "upsample-protopnet",
            SaliencyKind::UpsampleProtoTree => "upsample-prototree",
            SaliencyKind::Smoothgrads => "smoothgrads",
            SaliencyKind::PrpStyle => "prp-style",
            SaliencyKind::Occlusion => "occlusion",
            SaliencyKind::Random => "random",
        }
    }

    pub fn is_upsampling(self) -> bool {
        matches!(
            self,
            SaliencyKind::UpsampleProtopnet | SaliencyKind::UpsampleProtoTree
        )
    }
}

impl fmt::Display for SaliencyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Nonnegative per-pixel importance at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Tensor,
    pub kind: SaliencyKind,
    pub target: Target,
    pub image_id: String,
}

impl SaliencyMap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Upsampled saliency plus its percentile crop mask.
#[derive(Debug, Clone)]
pub struct UpsampleResult {
    pub saliency: SaliencyMap,
    pub crop_mask: PixelMask,
    /// The crop mask covers the whole image (e.g. a constant map).
    pub degenerate: bool,
}

/// Percentile crop. When more than 5% of the map sits at its minimum the
/// threshold lands on that floor, so floor pixels are left out unless the
/// whole map is constant.
fn percentile_result(saliency: SaliencyMap) -> Result<UpsampleResult> {
    let crop_mask = upsample_crop(&saliency.values)?;
    let degenerate = crop_mask.count() == crop_mask.height() * crop_mask.width();
    Ok(UpsampleResult {
        saliency,
        crop_mask,
        degenerate,
    })
}

fn upsample_crop(values: &Tensor) -> Result<PixelMask> {
    let mask = percentile_mask(values, UPSAMPLE_PERCENTILE)?;
    let floor = values.min();
    if mask.count() < values.len() || values.max() == floor {
        return Ok(mask);
    }
    let bits = values.data().iter().map(|&v| v > floor).collect();
    PixelMask::new(mask.height(), mask.width(), bits)
}

/// Whole similarity map upsampled to `(hin, win)`, shifted so its minimum is 0.
pub fn upsample_protopnet(
    similarity: &Tensor,
    target: Target,
    image_id: &str,
    hin: usize,
    win: usize,
) -> Result<UpsampleResult> {
    let up = bicubic_upsample(similarity, hin, win)?;
    let floor = up.min();
    let values = up.map(|v| v - floor);
    percentile_result(SaliencyMap {
        values,
        kind: SaliencyKind::UpsampleProtopnet,
        target,
        image_id: image_id.to_string(),
    })
}

/// Only the best cell kept (others set to 0), upsampled, negative lobes
/// clamped to 0.
pub fn upsample_prototree(
    similarity: &Tensor,
    target: Target,
    image_id: &str,
    hin: usize,
    win: usize,
) -> Result<UpsampleResult> {
    let (_, w) = similarity.dims2()?;
    let best = max_similarity(similarity)?;
    let keep = best.h * w + best.w;
    let sparse = Tensor::new(
        similarity.shape().to_vec(),
        similarity
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if i == keep { v } else { 0.0 })
            .collect(),
    )?;
    let values = bicubic_upsample(&sparse, hin, win)?.map(|v| v.max(0.0));
    percentile_result(SaliencyMap {
        values,
        kind: SaliencyKind::UpsampleProtoTree,
        target,
        image_id: image_id.to_string(),
    })
}

/// Upsampling variant matching the model's policy.
pub fn upsample(model: &ModelBundle, x: &Tensor, target: Target, image_id: &str) -> Result<UpsampleResult> {
    let features = extract_features(model, x)?;
    let sim = similarity_values(
        &features,
        model.prototypes().vector(target.prototype),
        model.simfn(),
    )?;
    let (hin, win) = model.input_size();
    match Method::Upsample.resolve(model) {
        SaliencyKind::UpsampleProtopnet => upsample_protopnet(&sim, target, image_id, hin, win),
        _ => upsample_prototree(&sim, target, image_id, hin, win),
    }
}

/// Channel mean, absolute value, 5x5 Gaussian.
pub fn postprocess_saliency(raw: &Tensor) -> Result<Tensor> {
    let mean = channel_mean(raw)?;
    gaussian_blur5(&mean.map(f32::abs))
}

/// Channel mean, negatives clamped to 0, 5x5 Gaussian.
pub fn postprocess_relevance(raw: &Tensor) -> Result<Tensor> {
    let mean = channel_mean(raw)?;
    gaussian_blur5(&mean.map(|v| v.max(0.0)))
}

fn channel_mean(raw: &Tensor) -> Result<Tensor> {
    let (c, h, w) = raw.dims3()?;
    if c == 0 {
        return Err(Error::argument("saliency needs at least one channel"));
    }
    let plane = h * w;
    let data = raw.data();
    Tensor::new(
        vec![h, w],
        (0..plane)
            .map(|p| ((0..c).map(|k| data[k * plane + p] as f64).sum::<f64>() / c as f64) as f32)
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothgradsParams {
    pub samples: usize,
    pub noise_ratio: f64,
    pub seed: u64,
}

impl Default for SmoothgradsParams {
    fn default() -> Self {
        SmoothgradsParams {
            samples: 10,
            noise_ratio: 0.2,
            seed: 0,
        }
    }
}

fn check_target(model: &ModelBundle, target: &Target) -> Result<()> {
    let (fh, fw) = model.latent_size();
    if target.prototype >= model.prototypes().len() || target.h >= fh || target.w >= fw {
        return Err(Error::argument(format!(
            "target (prototype {}, cell {}, {}) outside model ({} prototypes, {fh}x{fw} latent)",
            target.prototype,
            target.h,
            target.w,
            model.prototypes().len()
        )));
    }
    Ok(())
}

/// `∂ s_i^{h,w}(x) / ∂x` for one image.
pub fn similarity_gradient(model: &ModelBundle, x: &Tensor, target: &Target) -> Result<Tensor> {
    check_target(model, target)?;
    let features = extract_features(model, x)?;
    let cot = similarity_cotangent(
        &features,
        target.h,
        target.w,
        model.prototypes().vector(target.prototype),
        model.simfn(),
    );
    backward_input(model.backbone(), features.trace(), &cot)
}

/// Averaged gradient over noisy copies of `x`, before multiplication by `x`.
pub fn smoothgrads(
    model: &ModelBundle,
    x: &Tensor,
    target: &Target,
    params: &SmoothgradsParams,
) -> Result<Tensor> {
    if params.samples < 1 {
        return Err(Error::argument("smoothgrads needs at least one sample"));
    }
    if !(params.noise_ratio >= 0.0 && params.noise_ratio.is_finite()) {
        return Err(Error::argument("noise ratio must be a nonnegative number"));
    }
    check_target(model, target)?;
    let sigma = params.noise_ratio * (x.max() as f64 - x.min() as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).map_err(|e| Error::argument(e.to_string()))?)
    } else {
        None
    };
    let mut acc = vec![0f64; x.len()];
    for _ in 0..params.samples {
        let g = match &normal {
            Some(normal) => {
                let data = x
                    .data()
                    .iter()
                    .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
                    .collect();
                let noisy = Tensor::new(x.shape().to_vec(), data)?;
                similarity_gradient(model, &noisy, target)?
            }
            None => similarity_gradient(model, x, target)?,
        };
        for (a, &v) in acc.iter_mut().zip(g.data()) {
            *a += v as f64;
        }
    }
    let n = params.samples as f64;
    Tensor::new(
        x.shape().to_vec(),
        acc.into_iter().map(|v| (v / n) as f32).collect(),
    )
}

/// Smoothgrads gradient ⊙ input, post-processed.
pub fn smoothgrads_x_input(
    model: &ModelBundle,
    x: &Tensor,
    target: Target,
    params: &SmoothgradsParams,
    image_id: &str,
) -> Result<SaliencyMap> {
    let g = smoothgrads(model, x, &target, params)?;
    let raw = g.zip_map(x, |g, x| g * x)?;
    Ok(SaliencyMap {
        values: postprocess_saliency(&raw)?,
        kind: SaliencyKind::Smoothgrads,
        target,
        image_id: image_id.to_string(),
    })
}

/// Raw input relevance of a PRP-style pass plus what was injected.
#[derive(Debug, Clone)]
pub struct PrpRelevance {
    /// `[C, H, W]` relevance at input pixels.
    pub input: Tensor,
    /// Total relevance placed on the latent cell.
    pub injected: f64,
}

/// Latent relevance for a target: the cell's score split over channels in
/// proportion to `(f_k − r_k)² + ε/D`, so it sums to the score and falls back
/// to a uniform split at zero distance.
pub fn prp_initial_relevance(
    features: &crate::proto::Features,
    target: &Target,
    r: &[f32],
    score: f64,
) -> Tensor {
    let (d, hh, ww) = (features.dim(), features.height(), features.width());
    let f = features.vector(target.h, target.w);
    let d2 = features.squared_distance(target.h, target.w, r);
    let floor = PRP_STABILIZER / d as f64;
    let mut rel = vec![0f32; d * hh * ww];
    for k in 0..d {
        let diff = f[k] as f64 - r[k] as f64;
        rel[(k * hh + target.h) * ww + target.w] =
            (score * (diff * diff + floor) / (d2 + PRP_STABILIZER)) as f32;
    }
    Tensor::new(vec![d, hh, ww], rel).expect("shape built from features")
}

pub fn prp_relevance(
    model: &ModelBundle,
    x: &Tensor,
    target: &Target,
    rules: &RuleConfig,
) -> Result<PrpRelevance> {
    check_target(model, target)?;
    let features = extract_features(model, x)?;
    let r = model.prototypes().vector(target.prototype);
    let score = cell_similarity(&features, target.h, target.w, r, model.simfn()) as f64;
    let init = prp_initial_relevance(&features, target, r, score);
    let injected = init.sum();
    let input = lrp_backward(model.backbone(), features.trace(), &init, rules)?;
    Ok(PrpRelevance { input, injected })
}

/// PRP-style relevance map: channel mean, negatives clamped, 5x5 Gaussian.
pub fn prp(
    model: &ModelBundle,
    x: &Tensor,
    target: Target,
    rules: &RuleConfig,
    image_id: &str,
) -> Result<SaliencyMap> {
    let rel = prp_relevance(model, x, &target, rules)?;
    Ok(SaliencyMap {
        values: postprocess_relevance(&rel.input)?,
        kind: SaliencyKind::PrpStyle,
        target,
        image_id: image_id.to_string(),
    })
}

/// Uniform noise in `[0, 1)`, a chance-level reference.
pub fn random_saliency(h: usize, w: usize, seed: u64, target: Target, image_id: &str) -> SaliencyMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SaliencyMap {
        values: Tensor::from_fn(&[h, w], |_| rng.random::<f32>()),
        kind: SaliencyKind::Random,
        target,
        image_id: image_id.to_string(),
    }
}

/// Everything that parameterises a saliency computation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SaliencyConfig {
    pub smoothgrads: SmoothgradsParams,
    pub rules: RuleConfig,
}

/// Saliency of `target` on `x` by `method`.
///
/// `fill` is the replacement value per channel used by the occlusion
/// reference.
pub fn compute_saliency(
    model: &ModelBundle,
    x: &Tensor,
    target: Target,
    method: Method,
    config: &SaliencyConfig,
    fill: &[f32],
    image_id: &str,
) -> Result<SaliencyMap> {
    match method {
        Method::Upsample => Ok(upsample(model, x, target, image_id)?.saliency),
        Method::Smoothgrads => smoothgrads_x_input(model, x, target, &config.smoothgrads, image_id),
        Method::Prp => prp(model, x, target, &config.rules, image_id),
        Method::Occlusion => {
            let values = crate::fixtures::occlusion_oracle(model, x, &target, fill)?;
            Ok(SaliencyMap {
                values: values.map(|v| v.max(0.0)),
                kind: SaliencyKind::Occlusion,
                target,
                image_id: image_id.to_string(),
            })
        }
        Method::Random => {
            let (h, w) = model.input_size();
            Ok(random_saliency(h, w, config.smoothgrads.seed, target, image_id))
        }
    }
}

/// Patch mask for a saliency map: the percentile crop for upsampling, the
/// top [`PATCH_FRACTION`] of pixels otherwise.
pub fn patch_mask(saliency: &SaliencyMap) -> Result<PixelMask> {
    if saliency.kind.is_upsampling() {
        upsample_crop(&saliency.values)
    } else {
        top_fraction_mask(&saliency.values, PATCH_FRACTION)
    }
}
