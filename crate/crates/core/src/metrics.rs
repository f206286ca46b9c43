//! Deletion curves, segmentation relevance and receptive-field estimates.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proto::{cell_similarity, extract_features, ModelBundle, Target};
use crate::saliency::{
    compute_saliency, pixel_count, saliency_ranking, top_fraction_mask, Method, PixelMask,
    SaliencyConfig, SaliencyMap,
};
use crate::tensor::Tensor;

/// AUDC is reported in units of 1/10,000 of the area axis.
pub const AUDC_SCALE: f64 = 10_000.0;

/// Name of the integration rule, echoed into reports.
pub const INTEGRATION_RULE: &str = "trapezoid";

pub const DEFAULT_DELETION_MAX: f64 = 0.02;
pub const DEFAULT_DELETION_STEP: f64 = 0.001;
pub const DEFAULT_RELEVANCE_AREA: f64 = 0.02;
pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 0.05;
pub const DEFAULT_ERF_MAX: f64 = 0.10;
pub const DEFAULT_ERF_STEP: f64 = 0.005;
pub const DEFAULT_ERF_THRESHOLD: f64 = 0.1;

/// Replacement for deleted pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum FillPolicy {
    /// Per-channel dataset mean.
    #[default]
    #[serde(rename = "mean")]
    DatasetMean,
    #[serde(rename = "zero")]
    Zero,
    /// 0.5 in every channel.
    #[serde(rename = "gray")]
    MidGray,
}

impl FillPolicy {
    pub fn name(self) -> &'static str {
        match self {
            FillPolicy::DatasetMean => "mean",
            FillPolicy::Zero => "zero",
            FillPolicy::MidGray => "gray",
        }
    }

    /// Per-channel fill values.
    pub fn values(self, dataset_mean: &[f32]) -> Vec<f32> {
        match self {
            FillPolicy::DatasetMean => dataset_mean.to_vec(),
            FillPolicy::Zero => vec![0.0; dataset_mean.len()],
            FillPolicy::MidGray => vec![0.5; dataset_mean.len()],
        }
    }
}

impl fmt::Display for FillPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FillPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(FillPolicy::DatasetMean),
            "zero" => Ok(FillPolicy::Zero),
            "gray" | "mid-gray" => Ok(FillPolicy::MidGray),
            other => Err(Error::argument(format!(
                "unknown fill policy '{other}' (expected mean, zero or gray)"
            ))),
        }
    }
}

/// Copy of `x` with masked pixels set to `fill[c]` in every channel `c`.
pub fn perturb(x: &Tensor, mask: &PixelMask, fill: &[f32]) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::argument(format!(
            "{}x{} mask for a {h}x{w} image",
            mask.height(),
            mask.width()
        )));
    }
    if fill.len() != c {
        return Err(Error::argument(format!(
            "{} fill values for {c} channels",
            fill.len()
        )));
    }
    let bits = mask.bits();
    let plane = h * w;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if bits[i % plane] { fill[i / plane] } else { v })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Similarity of `x_tilde` at the target's cell, fixed in advance, divided
/// by the unperturbed score `target.score`.
pub fn similarity_ratio(model: &ModelBundle, x_tilde: &Tensor, target: &Target) -> Result<f64> {
    let s_m = target.score as f64;
    if !(s_m > 0.0 && s_m.is_finite()) {
        return Err(Error::DegenerateTarget(format!(
            "prototype {} at ({}, {}) has score {s_m}",
            target.prototype, target.h, target.w
        )));
    }
    let features = extract_features(model, x_tilde)?;
    let r = model.prototypes().vector(target.prototype);
    let s = cell_similarity(&features, target.h, target.w, r, model.simfn()) as f64;
    Ok(s / s_m)
}

/// Re-scores `target` on `x` so that `τ(0) = 1` holds exactly.
pub fn rescore(model: &ModelBundle, x: &Tensor, target: &Target) -> Result<Target> {
    let features = extract_features(model, x)?;
    let (fh, fw) = (features.height(), features.width());
    if target.prototype >= model.prototypes().len() || target.h >= fh || target.w >= fw {
        return Err(Error::argument("target outside the model's latent grid"));
    }
    let r = model.prototypes().vector(target.prototype);
    Ok(Target {
        score: cell_similarity(&features, target.h, target.w, r, model.simfn()),
        ..*target
    })
}

/// Inclusive grid `0, step, ..., a_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeletionGrid {
    pub a_max: f64,
    pub step: f64,
}

impl Default for DeletionGrid {
    fn default() -> Self {
        DeletionGrid {
            a_max: DEFAULT_DELETION_MAX,
            step: DEFAULT_DELETION_STEP,
        }
    }
}

impl DeletionGrid {
    pub fn new(a_max: f64, step: f64) -> Result<Self> {
        let grid = DeletionGrid { a_max, step };
        grid.intervals()?;
        Ok(grid)
    }

    pub fn erf() -> Self {
        DeletionGrid {
            a_max: DEFAULT_ERF_MAX,
            step: DEFAULT_ERF_STEP,
        }
    }

    fn intervals(&self) -> Result<usize> {
        if !(self.step > 0.0 && self.a_max > 0.0 && self.a_max <= 1.0) {
            return Err(Error::argument(format!(
                "grid needs 0 < step and 0 < a_max <= 1, got step {} and a_max {}",
                self.step, self.a_max
            )));
        }
        let ratio = self.a_max / self.step;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-6 * n {
            return Err(Error::argument(format!(
                "a_max {} is not a whole number of steps of {}",
                self.a_max, self.step
            )));
        }
        Ok(n as usize)
    }

    pub fn areas(&self) -> Result<Vec<f64>> {
        let n = self.intervals()?;
        Ok((0..=n).map(|k| self.a_max * k as f64 / n as f64).collect())
    }

    /// Compact identifier such as `0-0.02@0.001`.
    pub fn id(&self) -> String {
        format!("0-{}@{}", self.a_max, self.step)
    }
}

/// Provenance of one curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMetadata {
    pub method: String,
    pub prototype: usize,
    pub image_id: String,
    pub fill: FillPolicy,
    pub seed: u64,
    pub grid: String,
    pub integration: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionCurve {
    pub areas: Vec<f64>,
    pub ratios: Vec<f64>,
    pub audc: f64,
    pub metadata: CurveMetadata,
}

/// Trapezoidal area under `(areas, ratios)`, times [`AUDC_SCALE`].
pub fn audc(areas: &[f64], ratios: &[f64]) -> f64 {
    let area: f64 = areas
        .windows(2)
        .zip(ratios.windows(2))
        .map(|(a, t)| (a[1] - a[0]) * (t[0] + t[1]) / 2.0)
        .sum();
    area * AUDC_SCALE
}

/// Deletion curve of a precomputed saliency map.
///
/// Masks are nested prefixes of one ranking; every perturbed image starts
/// from the original `x`.
pub fn deletion_curve_for(
    model: &ModelBundle,
    x: &Tensor,
    saliency: &SaliencyMap,
    grid: &DeletionGrid,
    fill: FillPolicy,
    fill_values: &[f32],
    seed: u64,
) -> Result<DeletionCurve> {
    let target = rescore(model, x, &saliency.target)?;
    let (h, w) = saliency.values.dims2()?;
    let areas = grid.areas()?;
    let ranking = saliency_ranking(&saliency.values);
    let mut ratios = Vec::with_capacity(areas.len());
    for &a in &areas {
        let mask = PixelMask::from_ranking(h, w, &ranking, pixel_count(a, h * w));
        let x_tilde = perturb(x, &mask, fill_values)?;
        ratios.push(similarity_ratio(model, &x_tilde, &target)?);
    }
    if !ratios.iter().all(|t| t.is_finite()) {
        return Err(Error::internal("non-finite similarity ratio"));
    }
    Ok(DeletionCurve {
        audc: audc(&areas, &ratios),
        areas,
        ratios,
        metadata: CurveMetadata {
            method: saliency.kind.label().to_string(),
            prototype: target.prototype,
            image_id: saliency.image_id.clone(),
            fill,
            seed,
            grid: grid.id(),
            integration: INTEGRATION_RULE.to_string(),
        },
    })
}

/// Everything a deletion run needs besides the model, image and target.
#[derive(Debug, Clone)]
pub struct DeletionSetup {
    pub method: Method,
    pub saliency: SaliencyConfig,
    pub grid: DeletionGrid,
    pub fill: FillPolicy,
    /// Per-channel values for `fill`.
    pub fill_values: Vec<f32>,
}

/// Saliency of `target` by the setup's method, then its deletion curve.
pub fn deletion_curve(
    model: &ModelBundle,
    x: &Tensor,
    target: Target,
    setup: &DeletionSetup,
    image_id: &str,
) -> Result<DeletionCurve> {
    let saliency = compute_saliency(
        model,
        x,
        target,
        setup.method,
        &setup.saliency,
        &setup.fill_values,
        image_id,
    )?;
    deletion_curve_for(
        model,
        x,
        &saliency,
        &setup.grid,
        setup.fill,
        &setup.fill_values,
        setup.saliency.smoothgrads.seed,
    )
}

/// Intersection of a top-fraction saliency mask with an object segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceResult {
    pub fraction: f64,
    pub irrelevant: bool,
    pub mask_count: usize,
    pub intersection_count: usize,
    pub threshold: f64,
}

pub fn relevance(
    saliency: &Tensor,
    segmentation: &PixelMask,
    a: f64,
    threshold: f64,
) -> Result<RelevanceResult> {
    let (h, w) = saliency.dims2()?;
    if (segmentation.height(), segmentation.width()) != (h, w) {
        return Err(Error::argument(format!(
            "{}x{} segmentation for a {h}x{w} saliency map",
            segmentation.height(),
            segmentation.width()
        )));
    }
    let mask = top_fraction_mask(saliency, a)?;
    let inter = mask.intersection_count(segmentation.bits());
    let fraction = inter as f64 / mask.count() as f64;
    Ok(RelevanceResult {
        fraction,
        irrelevant: fraction < threshold,
        mask_count: mask.count(),
        intersection_count: inter,
        threshold,
    })
}

/// First grid area at which the similarity ratio falls below a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErfEstimate {
    pub area: Option<f64>,
    pub threshold: f64,
    pub curve: DeletionCurve,
}

pub fn erf_estimate(curve: DeletionCurve, threshold: f64) -> ErfEstimate {
    let area = curve
        .areas
        .iter()
        .zip(&curve.ratios)
        .find(|(_, &t)| t < threshold)
        .map(|(&a, _)| a);
    ErfEstimate {
        area,
        threshold,
        curve,
    }
}

/// Whether a case explains a prototype on its own projection image or a
/// test image patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "prototype")]
    Prototype,
    #[serde(rename = "test-patch")]
    TestPatch,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Prototype => "prototype",
            Role::TestPatch => "test-patch",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Outcome of one (image, prototype, method) case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub model: String,
    pub image_id: String,
    pub prototype: usize,
    pub role: Role,
    pub method: String,
    pub audc: Option<f64>,
    pub relevance: Option<RelevanceResult>,
    pub grid: String,
    pub fill: FillPolicy,
    pub seed: u64,
    pub elapsed_ms: Option<f64>,
}

/// Means and percentages for one (model, method, role) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub method: String,
    pub role: Role,
    pub cases: usize,
    pub audc_count: usize,
    pub mean_audc: Option<f64>,
    pub relevance_count: usize,
    pub irrelevant_count: usize,
    pub percent_irrelevant: Option<f64>,
}

/// Groups cases by (model, method, role) in sorted key order and reduces
/// each group in input order.
pub fn aggregate_report(cases: &[CaseResult]) -> Result<Vec<SummaryRow>> {
    if cases.is_empty() {
        return Err(Error::argument("no cases to aggregate"));
    }
    let mut groups: BTreeMap<(&str, &str, Role), Vec<&CaseResult>> = BTreeMap::new();
    for c in cases {
        groups
            .entry((c.model.as_str(), c.method.as_str(), c.role))
            .or_default()
            .push(c);
    }
    Ok(groups
        .into_iter()
        .map(|((model, method, role), group)| {
            let audcs: Vec<f64> = group.iter().filter_map(|c| c.audc).collect();
            let rels: Vec<&RelevanceResult> =
                group.iter().filter_map(|c| c.relevance.as_ref()).collect();
            let irrelevant = rels.iter().filter(|r| r.irrelevant).count();
            SummaryRow {
                model: model.to_string(),
                method: method.to_string(),
                role,
                cases: group.len(),
                audc_count: audcs.len(),
                mean_audc: (!audcs.is_empty())
                    .then(|| audcs.iter().sum::<f64>() / audcs.len() as f64),
                relevance_count: rels.len(),
                irrelevant_count: irrelevant,
                percent_irrelevant: (!rels.is_empty())
                    .then(|| 100.0 * irrelevant as f64 / rels.len() as f64),
            }
        })
        .collect())
}
