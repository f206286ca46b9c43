//! The prototype classifier surface.
//!
//! A [`ModelBundle`] couples a backbone with a set of latent prototypes and a
//! similarity function. Latent maps are addressed as `(row, column)` cells of
//! an `H x W` grid of `D`-dimensional vectors, whatever the internal storage.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Backbone, ForwardTrace, Tensor};

/// Default stabilizer of the log-ratio similarity.
pub const DEFAULT_LOG_EPSILON: f64 = 1e-4;

/// Default similarity threshold of the threshold target policy.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Number of test patches explained per image under the top-k policy.
pub const TOP_K_PATCHES: usize = 10;

/// Maps a squared latent distance to a similarity score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimilarityFunction {
    /// `log((d² + 1) / (d² + ε))`
    LogRatio { epsilon: f64 },
    /// `exp(-d²)`
    NegExp,
}

impl SimilarityFunction {
    pub fn log_ratio(epsilon: f64) -> Result<Self> {
        let f = SimilarityFunction::LogRatio { epsilon };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SimilarityFunction::LogRatio { epsilon } if !(epsilon > 0.0 && epsilon.is_finite()) => {
                Err(Error::config(format!(
                    "log-ratio epsilon must be positive, got {epsilon}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn score(&self, d2: f64) -> f64 {
        match *self {
            SimilarityFunction::LogRatio { epsilon } => ((d2 + 1.0) / (d2 + epsilon)).ln(),
            SimilarityFunction::NegExp => (-d2).exp(),
        }
    }

    /// Derivative of [`score`](Self::score) with respect to `d²`.
    pub fn score_slope(&self, d2: f64) -> f64 {
        match *self {
            SimilarityFunction::LogRatio { epsilon } => 1.0 / (d2 + 1.0) - 1.0 / (d2 + epsilon),
            SimilarityFunction::NegExp => -(-d2).exp(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SimilarityFunction::LogRatio { .. } => "log_ratio",
            SimilarityFunction::NegExp => "neg_exp",
        }
    }
}

impl Default for SimilarityFunction {
    fn default() -> Self {
        SimilarityFunction::LogRatio {
            epsilon: DEFAULT_LOG_EPSILON,
        }
    }
}

/// Where a projected prototype came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: String,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    dim: usize,
    vectors: Vec<Vec<f32>>,
    provenance: Vec<Option<Provenance>>,
}

impl PrototypeSet {
    pub fn new(vectors: Vec<Vec<f32>>) -> Result<Self> {
        let n = vectors.len();
        Self::with_provenance(vectors, vec![None; n])
    }

    pub fn with_provenance(
        vectors: Vec<Vec<f32>>,
        provenance: Vec<Option<Provenance>>,
    ) -> Result<Self> {
        let dim = vectors
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::config("a prototype set needs at least one prototype"))?;
        if dim == 0 {
            return Err(Error::config("prototype dimension must be >= 1"));
        }
        if let Some(i) = vectors.iter().position(|v| v.len() != dim) {
            return Err(Error::config(format!(
                "prototype {i} has length {}, expected {dim}",
                vectors[i].len()
            )));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("prototype vectors must be finite"));
        }
        if provenance.len() != vectors.len() {
            return Err(Error::config("one provenance slot per prototype"));
        }
        Ok(PrototypeSet {
            dim,
            vectors,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i]
    }

    pub fn vectors(&self) -> &[Vec<f32>] {
        &self.vectors
    }

    pub fn provenance(&self, i: usize) -> Option<&Provenance> {
        self.provenance[i].as_ref()
    }
}

/// How explanation targets are picked on a test image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetPolicy {
    /// The ten best-matching prototypes of the inferred class.
    ProtopnetTop10,
    /// Every prototype whose best score exceeds `theta`.
    PrototreeThreshold { theta: f64 },
}

impl TargetPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            TargetPolicy::ProtopnetTop10 => "protopnet_top10",
            TargetPolicy::PrototreeThreshold { .. } => "prototree_threshold",
        }
    }
}

impl fmt::Display for TargetPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetPolicy::ProtopnetTop10 => f.write_str(self.name()),
            TargetPolicy::PrototreeThreshold { theta } => write!(f, "{}({theta})", self.name()),
        }
    }
}

/// A backbone plus prototypes, ready for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    backbone: Backbone,
    prototypes: PrototypeSet,
    simfn: SimilarityFunction,
    /// `[classes, prototypes]` linear layer over max similarities.
    head: Option<Tensor>,
    policy: TargetPolicy,
    input_h: usize,
    input_w: usize,
}

impl ModelBundle {
    pub fn new(
        backbone: Backbone,
        prototypes: PrototypeSet,
        simfn: SimilarityFunction,
        head: Option<Tensor>,
        policy: TargetPolicy,
        input_size: (usize, usize),
    ) -> Result<Self> {
        simfn.validate()?;
        if backbone.out_channels() != prototypes.dim() {
            return Err(Error::config(format!(
                "backbone produces {} channels but prototypes have dimension {}",
                backbone.out_channels(),
                prototypes.dim()
            )));
        }
        if let Some(head) = &head {
            match head.shape() {
                [classes, p] if *classes >= 1 && *p == prototypes.len() => {}
                other => {
                    return Err(Error::config(format!(
                        "head must be [classes, {}], got {other:?}",
                        prototypes.len()
                    )))
                }
            }
            if !head.all_finite() {
                return Err(Error::config("head weights must be finite"));
            }
        }
        if let TargetPolicy::PrototreeThreshold { theta } = policy {
            if !theta.is_finite() {
                return Err(Error::config("threshold must be finite"));
            }
        }
        let (input_h, input_w) = input_size;
        let (fh, fw) = backbone.output_dims(input_h, input_w)?;
        if fh == 0 || fw == 0 {
            return Err(Error::config("backbone yields an empty feature map"));
        }
        Ok(ModelBundle {
            backbone,
            prototypes,
            simfn,
            head,
            policy,
            input_h,
            input_w,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn prototypes(&self) -> &PrototypeSet {
        &self.prototypes
    }

    pub fn simfn(&self) -> SimilarityFunction {
        self.simfn
    }

    pub fn head(&self) -> Option<&Tensor> {
        self.head.as_ref()
    }

    pub fn policy(&self) -> TargetPolicy {
        self.policy
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.input_h, self.input_w)
    }

    pub fn latent_size(&self) -> (usize, usize) {
        self.backbone
            .output_dims(self.input_h, self.input_w)
            .expect("validated in ModelBundle::new")
    }

    pub fn with_prototypes(&self, prototypes: PrototypeSet) -> Result<Self> {
        ModelBundle::new(
            self.backbone.clone(),
            prototypes,
            self.simfn,
            self.head.clone(),
            self.policy,
            self.input_size(),
        )
    }

    pub fn with_policy(&self, policy: TargetPolicy) -> Result<Self> {
        ModelBundle::new(
            self.backbone.clone(),
            self.prototypes.clone(),
            self.simfn,
            self.head.clone(),
            policy,
            self.input_size(),
        )
    }

    /// Checks that `x` is a `[C, H, W]` image this model accepts.
    pub fn check_image(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = x.dims3()?;
        if c != self.backbone.in_channels() || (h, w) != self.input_size() {
            return Err(Error::argument(format!(
                "image is {c}x{h}x{w}, model expects {}x{}x{}",
                self.backbone.in_channels(),
                self.input_h,
                self.input_w
            )));
        }
        Ok(())
    }
}

/// Latent representation of one image plus the trace that produced it.
#[derive(Debug, Clone)]
pub struct Features {
    trace: ForwardTrace,
}

impl Features {
    pub fn trace(&self) -> &ForwardTrace {
        &self.trace
    }

    /// Channel-major `[D, H, W]` storage.
    pub fn chw(&self) -> &Tensor {
        self.trace.output()
    }

    pub fn dim(&self) -> usize {
        self.chw().shape()[0]
    }

    pub fn height(&self) -> usize {
        self.chw().shape()[1]
    }

    pub fn width(&self) -> usize {
        self.chw().shape()[2]
    }

    /// The `D`-vector at cell `(h, w)`.
    pub fn vector(&self, h: usize, w: usize) -> Vec<f32> {
        let (d, hh, ww) = (self.dim(), self.height(), self.width());
        let data = self.chw().data();
        (0..d).map(|k| data[(k * hh + h) * ww + w]).collect()
    }

    /// `[H, W, D]` copy of the latent map.
    pub fn to_hwd(&self) -> Tensor {
        let (d, hh, ww) = (self.dim(), self.height(), self.width());
        let data = self.chw().data();
        Tensor::from_fn(&[hh, ww, d], |i| data[(i[2] * hh + i[0]) * ww + i[1]])
    }

    /// Squared L2 distance between cell `(h, w)` and `r`, accumulated in `f64`.
    pub fn squared_distance(&self, h: usize, w: usize, r: &[f32]) -> f64 {
        let (hh, ww) = (self.height(), self.width());
        let data = self.chw().data();
        r.iter()
            .enumerate()
            .map(|(k, &rk)| {
                let diff = data[(k * hh + h) * ww + w] as f64 - rk as f64;
                diff * diff
            })
            .sum()
    }
}

pub fn extract_features(model: &ModelBundle, x: &Tensor) -> Result<Features> {
    model.check_image(x)?;
    Ok(Features {
        trace: model.backbone.forward_trace(x)?,
    })
}

/// Per-cell similarity between an image's latent map and one prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub values: Tensor,
    pub prototype: usize,
    pub image_id: String,
}

/// Similarity score of one cell, the single definition shared by maps and
/// perturbed re-evaluations.
pub fn cell_similarity(
    features: &Features,
    h: usize,
    w: usize,
    r: &[f32],
    simfn: SimilarityFunction,
) -> f32 {
    simfn.score(features.squared_distance(h, w, r)) as f32
}

/// `[H, W]` similarity values of `features` against vector `r`.
pub fn similarity_values(
    features: &Features,
    r: &[f32],
    simfn: SimilarityFunction,
) -> Result<Tensor> {
    simfn.validate()?;
    if r.len() != features.dim() {
        return Err(Error::argument(format!(
            "prototype has dimension {}, features have {}",
            r.len(),
            features.dim()
        )));
    }
    let (hh, ww) = (features.height(), features.width());
    Ok(Tensor::from_fn(&[hh, ww], |i| {
        cell_similarity(features, i[0], i[1], r, simfn)
    }))
}

pub fn similarity_map(
    model: &ModelBundle,
    features: &Features,
    prototype: usize,
    image_id: &str,
) -> Result<SimilarityMap> {
    if prototype >= model.prototypes.len() {
        return Err(Error::argument(format!(
            "prototype {prototype} of {}",
            model.prototypes.len()
        )));
    }
    Ok(SimilarityMap {
        values: similarity_values(features, model.prototypes.vector(prototype), model.simfn)?,
        prototype,
        image_id: image_id.to_string(),
    })
}

/// Location and value of the best match, row-major first on ties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxSimilarity {
    pub h: usize,
    pub w: usize,
    pub score: f32,
}

pub fn max_similarity(values: &Tensor) -> Result<MaxSimilarity> {
    let (_, w) = values.dims2()?;
    let (idx, &score) = values
        .data()
        .iter()
        .enumerate()
        .reduce(|best, cur| if cur.1 > best.1 { cur } else { best })
        .ok_or_else(|| Error::argument("empty similarity map"))?;
    Ok(MaxSimilarity {
        h: idx / w,
        w: idx % w,
        score,
    })
}

/// Prototype index plus its best-matching cell on an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub prototype: usize,
    pub h: usize,
    pub w: usize,
    pub score: f32,
}

/// Best-matching cell of every prototype on `features`.
pub fn best_matches(model: &ModelBundle, features: &Features) -> Result<Vec<Target>> {
    (0..model.prototypes.len())
        .map(|i| {
            let values = similarity_values(features, model.prototypes.vector(i), model.simfn)?;
            let m = max_similarity(&values)?;
            Ok(Target {
                prototype: i,
                h: m.h,
                w: m.w,
                score: m.score,
            })
        })
        .collect()
}

/// Replaces every prototype by its nearest latent vector over the
/// projection set. Ties go to the earlier image, then the earlier cell.
pub fn project_prototypes(
    model: &ModelBundle,
    projection_set: &[(String, Tensor)],
) -> Result<PrototypeSet> {
    if projection_set.is_empty() {
        return Err(Error::argument("projection set is empty"));
    }
    let p = model.prototypes.len();
    let mut best: Vec<Option<(f64, usize, usize, usize)>> = vec![None; p];
    let mut features = Vec::with_capacity(projection_set.len());
    for (img_idx, (_, x)) in projection_set.iter().enumerate() {
        let f = extract_features(model, x)?;
        for (i, slot) in best.iter_mut().enumerate() {
            let r = model.prototypes.vector(i);
            for h in 0..f.height() {
                for w in 0..f.width() {
                    let d2 = f.squared_distance(h, w, r);
                    if slot.is_none_or(|(b, ..)| d2 < b) {
                        *slot = Some((d2, img_idx, h, w));
                    }
                }
            }
        }
        features.push(f);
    }
    let mut vectors = Vec::with_capacity(p);
    let mut provenance = Vec::with_capacity(p);
    for slot in best {
        let (_, img_idx, h, w) =
            slot.ok_or_else(|| Error::internal("projection found no candidate"))?;
        vectors.push(features[img_idx].vector(h, w));
        provenance.push(Some(Provenance {
            image_id: projection_set[img_idx].0.clone(),
            h,
            w,
        }));
    }
    PrototypeSet::with_provenance(vectors, provenance)
}

/// Class membership of each prototype: the class with the largest head
/// weight in its column, lowest class index on ties.
pub fn prototype_classes(head: &Tensor) -> Result<Vec<usize>> {
    let (classes, p) = head.dims2()?;
    Ok((0..p)
        .map(|j| {
            (0..classes)
                .reduce(|best, c| if head.get(&[c, j]) > head.get(&[best, j]) { c } else { best })
                .unwrap_or(0)
        })
        .collect())
}

/// Class scores `head · s(x)` and the inferred class (lowest index on ties).
pub fn infer_class(head: &Tensor, scores: &[f32]) -> Result<(usize, Vec<f64>)> {
    let (classes, p) = head.dims2()?;
    if scores.len() != p {
        return Err(Error::internal("score vector does not match head"));
    }
    let logits: Vec<f64> = (0..classes)
        .map(|c| {
            (0..p)
                .map(|j| head.get(&[c, j]) as f64 * scores[j] as f64)
                .sum()
        })
        .collect();
    let class = (0..classes)
        .reduce(|best, c| if logits[c] > logits[best] { c } else { best })
        .unwrap_or(0);
    Ok((class, logits))
}

/// Explanation targets for image `x` under the model's policy.
pub fn select_targets(model: &ModelBundle, x: &Tensor) -> Result<Vec<Target>> {
    let features = extract_features(model, x)?;
    select_targets_from(model, &features)
}

pub fn select_targets_from(model: &ModelBundle, features: &Features) -> Result<Vec<Target>> {
    let matches = best_matches(model, features)?;
    match model.policy {
        TargetPolicy::PrototreeThreshold { theta } => Ok(matches
            .into_iter()
            .filter(|t| t.score as f64 > theta)
            .collect()),
        TargetPolicy::ProtopnetTop10 => {
            let head = model
                .head
                .as_ref()
                .ok_or_else(|| Error::config("top-k target policy needs a classification head"))?;
            let scores: Vec<f32> = matches.iter().map(|t| t.score).collect();
            let (class, _) = infer_class(head, &scores)?;
            let owners = prototype_classes(head)?;
            let mut mine: Vec<Target> = matches
                .into_iter()
                .filter(|t| owners[t.prototype] == class)
                .collect();
            mine.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then(a.prototype.cmp(&b.prototype))
            });
            mine.truncate(TOP_K_PATCHES);
            Ok(mine)
        }
    }
}

/// Cotangent at the latent map of `∂ s_i^{h,w} / ∂ f`: nonzero only at cell
/// `(h, w)`, where it equals `s'(d²) · 2 (f − r)`.
pub fn similarity_cotangent(
    features: &Features,
    h: usize,
    w: usize,
    r: &[f32],
    simfn: SimilarityFunction,
) -> Tensor {
    let (d, hh, ww) = (features.dim(), features.height(), features.width());
    let d2 = features.squared_distance(h, w, r);
    let slope = simfn.score_slope(d2);
    let f = features.vector(h, w);
    let mut g = Tensor::zeros(&[d, hh, ww]).into_data();
    for k in 0..d {
        g[(k * hh + h) * ww + w] = (slope * 2.0 * (f[k] as f64 - r[k] as f64)) as f32;
    }
    Tensor::new(vec![d, hh, ww], g).expect("shape built from features")
}
