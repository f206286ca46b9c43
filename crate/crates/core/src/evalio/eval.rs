//! Case enumeration and evaluation over a dataset.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::manifest::{DatasetManifest, Split};
use super::netpbm::{load_image, load_segmentation};
use super::report::RoleCurve;
use crate::error::{Error, Result};
use crate::metrics::{
    deletion_curve_for, erf_estimate, relevance, rescore, CaseResult, DeletionGrid, ErfEstimate,
    FillPolicy, Role, DEFAULT_ERF_THRESHOLD, DEFAULT_RELEVANCE_AREA, DEFAULT_RELEVANCE_THRESHOLD,
    INTEGRATION_RULE,
};
use crate::proto::{best_matches, extract_features, select_targets_from, ModelBundle, Target};
use crate::saliency::{
    compute_saliency, Method, SaliencyConfig, PATCH_FRACTION, PRP_STABILIZER, UPSAMPLE_PERCENTILE,
};
use crate::saliency::PixelMask;
use crate::tensor::{Tensor, BICUBIC_A, GAUSSIAN_SIGMA};

/// One manifest image at model resolution.
#[derive(Debug, Clone)]
pub struct DatasetImage {
    pub id: String,
    pub split: Split,
    pub tensor: Tensor,
    pub segmentation: Option<PixelMask>,
}

pub fn load_dataset(manifest: &DatasetManifest, model: &ModelBundle) -> Result<Vec<DatasetImage>> {
    let size = model.input_size();
    manifest
        .entries
        .iter()
        .map(|e| {
            let img = load_image(&manifest.resolve(&e.image), &manifest.normalization, size)?;
            let segmentation = e
                .segmentation
                .as_ref()
                .map(|p| load_segmentation(&manifest.resolve(p), img.source_size, size))
                .transpose()?;
            Ok(DatasetImage {
                id: e.id.clone(),
                split: e.split,
                tensor: img.tensor,
                segmentation,
            })
        })
        .collect()
}

/// Which roles to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoleFilter {
    All,
    Prototype,
    TestPatch,
}

impl RoleFilter {
    pub fn includes(self, role: Role) -> bool {
        match self {
            RoleFilter::All => true,
            RoleFilter::Prototype => role == Role::Prototype,
            RoleFilter::TestPatch => role == Role::TestPatch,
        }
    }
}

/// A target on one dataset image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseSpec {
    pub image: usize,
    pub role: Role,
    pub target: Target,
}

/// Prototype cases (each prototype's best match on its projection image)
/// followed by test-patch cases (policy-selected targets on test images).
pub fn enumerate_cases(
    model: &ModelBundle,
    images: &[DatasetImage],
    roles: RoleFilter,
) -> Result<Vec<CaseSpec>> {
    let mut cases = Vec::new();
    if roles.includes(Role::Prototype) {
        for i in 0..model.prototypes().len() {
            let Some(prov) = model.prototypes().provenance(i) else {
                continue;
            };
            let Some(idx) = images.iter().position(|d| d.id == prov.image_id) else {
                continue;
            };
            let features = extract_features(model, &images[idx].tensor)?;
            let target = best_matches(model, &features)?[i];
            cases.push(CaseSpec {
                image: idx,
                role: Role::Prototype,
                target,
            });
        }
    }
    if roles.includes(Role::TestPatch) {
        for (idx, img) in images.iter().enumerate() {
            if img.split != Split::Test {
                continue;
            }
            let features = extract_features(model, &img.tensor)?;
            for target in select_targets_from(model, &features)? {
                cases.push(CaseSpec {
                    image: idx,
                    role: Role::TestPatch,
                    target,
                });
            }
        }
    }
    if cases.is_empty() {
        return Err(Error::argument(
            "no cases: no prototype provenance matches the manifest and no test target was selected",
        ));
    }
    Ok(cases)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RuleEcho {
    pub input: &'static str,
    pub hidden: &'static str,
    pub stabilizer: f64,
}

/// Every parameter that shapes a run, echoed into `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolParameters {
    pub command: String,
    pub model: String,
    pub methods: Vec<String>,
    pub roles: RoleFilter,
    pub deletion_max: f64,
    pub deletion_step: f64,
    pub grid_points: usize,
    pub integration: &'static str,
    pub audc_scale: f64,
    pub fill: FillPolicy,
    pub fill_values: Vec<f32>,
    pub seed: u64,
    pub patch_fraction: f64,
    pub upsample_percentile: u32,
    pub relevance_area: f64,
    pub relevance_threshold: f64,
    pub erf_max: f64,
    pub erf_step: f64,
    pub erf_threshold: f64,
    pub smoothgrads_samples: usize,
    pub noise_ratio: f64,
    pub gradient_input_order: &'static str,
    pub prp_rules: RuleEcho,
    pub prp_init_stabilizer: f64,
    pub bicubic_a: f64,
    pub gaussian_sigma: f64,
    pub label: &'static str,
}

/// Settings of one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub methods: Vec<Method>,
    pub roles: RoleFilter,
    pub saliency: SaliencyConfig,
    pub grid: DeletionGrid,
    pub fill: FillPolicy,
    pub fill_values: Vec<f32>,
    pub relevance_area: f64,
    pub relevance_threshold: f64,
    pub erf_grid: DeletionGrid,
    pub erf_threshold: f64,
    pub timings: bool,
}

impl EvalSettings {
    pub fn new(fill_values: Vec<f32>) -> Self {
        EvalSettings {
            methods: vec![Method::Upsample, Method::Smoothgrads, Method::Prp],
            roles: RoleFilter::All,
            saliency: SaliencyConfig::default(),
            grid: DeletionGrid::default(),
            fill: FillPolicy::DatasetMean,
            fill_values,
            relevance_area: DEFAULT_RELEVANCE_AREA,
            relevance_threshold: DEFAULT_RELEVANCE_THRESHOLD,
            erf_grid: DeletionGrid::erf(),
            erf_threshold: DEFAULT_ERF_THRESHOLD,
            timings: false,
        }
    }

    pub fn parameters(&self, command: &str, model: &str) -> ProtocolParameters {
        ProtocolParameters {
            command: command.to_string(),
            model: model.to_string(),
            methods: self.methods.iter().map(|m| m.name().to_string()).collect(),
            roles: self.roles,
            deletion_max: self.grid.a_max,
            deletion_step: self.grid.step,
            grid_points: self.grid.areas().map_or(0, |a| a.len()),
            integration: INTEGRATION_RULE,
            audc_scale: crate::metrics::AUDC_SCALE,
            fill: self.fill,
            fill_values: self.fill_values.clone(),
            seed: self.saliency.smoothgrads.seed,
            patch_fraction: PATCH_FRACTION,
            upsample_percentile: UPSAMPLE_PERCENTILE,
            relevance_area: self.relevance_area,
            relevance_threshold: self.relevance_threshold,
            erf_max: self.erf_grid.a_max,
            erf_step: self.erf_grid.step,
            erf_threshold: self.erf_threshold,
            smoothgrads_samples: self.saliency.smoothgrads.samples,
            noise_ratio: self.saliency.smoothgrads.noise_ratio,
            gradient_input_order: "multiply-then-channel-mean",
            prp_rules: RuleEcho {
                input: self.saliency.rules.input_rule.name(),
                hidden: self.saliency.rules.hidden_rule.name(),
                stabilizer: self.saliency.rules.stabilizer,
            },
            prp_init_stabilizer: PRP_STABILIZER,
            bicubic_a: BICUBIC_A,
            gaussian_sigma: GAUSSIAN_SIGMA,
            label: "prp-style",
        }
    }
}

/// What to compute per case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Deletion,
    Relevance,
    Erf,
}

/// Per-case rows plus curves (deletion) or estimates (ERF).
#[derive(Debug, Default)]
pub struct EvalOutput {
    pub cases: Vec<CaseResult>,
    pub curves: Vec<RoleCurve>,
    pub erf: Vec<(Role, ErfEstimate)>,
}

/// Evaluates every (case, method) pair in parallel; results keep case order.
pub fn evaluate(
    model: &ModelBundle,
    model_name: &str,
    images: &[DatasetImage],
    cases: &[CaseSpec],
    settings: &EvalSettings,
    measure: Measure,
) -> Result<EvalOutput> {
    let jobs: Vec<(&CaseSpec, Method)> = cases
        .iter()
        .flat_map(|c| settings.methods.iter().map(move |&m| (c, m)))
        .collect();
    let results: Vec<Result<CaseOutput>> = jobs
        .par_iter()
        .map(|&(case, method)| run_case(model, model_name, images, case, method, settings, measure))
        .collect();
    let mut out = EvalOutput::default();
    for r in results {
        if let Some((row, curve, erf)) = r? {
            if let Some(e) = erf {
                out.erf.push((row.role, e));
            }
            out.cases.push(row);
            out.curves.extend(curve);
        }
    }
    if out.cases.is_empty() {
        return Err(Error::argument(
            "no case could be evaluated (relevance needs segmentations)",
        ));
    }
    Ok(out)
}

type CaseOutput = Option<(CaseResult, Option<RoleCurve>, Option<ErfEstimate>)>;

fn run_case(
    model: &ModelBundle,
    model_name: &str,
    images: &[DatasetImage],
    case: &CaseSpec,
    method: Method,
    settings: &EvalSettings,
    measure: Measure,
) -> Result<CaseOutput> {
    let img = &images[case.image];
    if measure == Measure::Relevance && img.segmentation.is_none() {
        return Ok(None);
    }
    let start = Instant::now();
    let target = rescore(model, &img.tensor, &case.target)?;
    let saliency = compute_saliency(
        model,
        &img.tensor,
        target,
        method,
        &settings.saliency,
        &settings.fill_values,
        &img.id,
    )?;
    let seed = settings.saliency.smoothgrads.seed;
    let mut row = CaseResult {
        model: model_name.to_string(),
        image_id: img.id.clone(),
        prototype: target.prototype,
        role: case.role,
        method: saliency.kind.label().to_string(),
        audc: None,
        relevance: None,
        grid: String::new(),
        fill: settings.fill,
        seed,
        elapsed_ms: None,
    };
    let (mut curve, mut erf) = (None, None);
    match measure {
        Measure::Deletion | Measure::Erf => {
            let grid = if measure == Measure::Deletion {
                settings.grid
            } else {
                settings.erf_grid
            };
            let c = deletion_curve_for(
                model,
                &img.tensor,
                &saliency,
                &grid,
                settings.fill,
                &settings.fill_values,
                seed,
            )?;
            row.grid = grid.id();
            row.audc = Some(c.audc);
            if measure == Measure::Deletion {
                curve = Some(RoleCurve {
                    model: model_name.to_string(),
                    role: case.role,
                    curve: c,
                });
            } else {
                erf = Some(erf_estimate(c, settings.erf_threshold));
            }
        }
        Measure::Relevance => {
            let seg = img.segmentation.as_ref().expect("checked above");
            row.relevance = Some(relevance(
                &saliency.values,
                seg,
                settings.relevance_area,
                settings.relevance_threshold,
            )?);
            row.grid = format!("top-{}", settings.relevance_area);
        }
    }
    if settings.timings {
        row.elapsed_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Some((row, curve, erf)))
}
