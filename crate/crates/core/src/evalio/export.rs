//! Writes synthetic fixtures as bundle, manifest and images.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::bundle::save_bundle;
use super::manifest::{save_manifest, DatasetManifest, ManifestEntry, Split};
use super::netpbm::{image_raster, mask_raster, write_raster, Normalization};
use crate::error::{Error, Result};
use crate::fixtures::{gen_flat, gen_planted, gen_random, PlantedRegion, RandomSpec};
use crate::proto::{ModelBundle, Target};
use crate::saliency::PixelMask;
use crate::tensor::{ReceptiveFieldBox, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    Planted,
    Random,
    Flat,
}

impl std::str::FromStr for FixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planted" => Ok(FixtureKind::Planted),
            "random" => Ok(FixtureKind::Random),
            "flat" => Ok(FixtureKind::Flat),
            other => Err(Error::argument(format!(
                "unknown fixture kind '{other}' (expected planted, random or flat)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct PlantedInfo {
    kind: &'static str,
    seed: u64,
    side: usize,
    region: ReceptiveFieldBox,
    region_fraction: f64,
    target: Target,
    tau_region: f64,
}

/// Paths of an exported fixture.
#[derive(Debug, Clone)]
pub struct ExportedFixture {
    pub bundle: PathBuf,
    pub manifest: PathBuf,
}

struct Item<'a> {
    id: String,
    image: &'a Tensor,
    segmentation: Option<PixelMask>,
    split: Split,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_dataset(
    out: &Path,
    model: &ModelBundle,
    norm: Normalization,
    fill: Vec<f32>,
    items: &[Item],
) -> Result<ExportedFixture> {
    create_dir(&out.join("images"))?;
    let mut entries = Vec::with_capacity(items.len());
    for item in items {
        let image = PathBuf::from("images").join(format!("{}.ppm", item.id));
        write_raster(&out.join(&image), &image_raster(item.image, &norm)?)?;
        let segmentation = match &item.segmentation {
            Some(mask) => {
                create_dir(&out.join("segmentations"))?;
                let p = PathBuf::from("segmentations").join(format!("{}.pgm", item.id));
                write_raster(&out.join(&p), &mask_raster(mask))?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: item.id.clone(),
            image,
            segmentation,
            label: None,
            split: item.split,
        });
    }
    let manifest = DatasetManifest {
        normalization: norm,
        fill,
        entries,
        root: out.to_path_buf(),
    };
    let bundle = out.join("model.pxeb");
    let manifest_path = out.join("manifest.json");
    save_bundle(model, &bundle)?;
    save_manifest(&manifest, &manifest_path)?;
    Ok(ExportedFixture {
        bundle,
        manifest: manifest_path,
    })
}

/// Centered rectangle covering half of each side, as a stand-in object.
fn center_object(h: usize, w: usize) -> PixelMask {
    let bits = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            (h / 4..h - h / 4).contains(&r) && (w / 4..w - w / 4).contains(&c)
        })
        .collect();
    PixelMask::new(h, w, bits).expect("sized above")
}

/// Per-channel mean of images after a write/read round trip through bytes.
fn byte_mean(images: &[&Tensor], norm: &Normalization) -> Result<Vec<f32>> {
    let mut sums = [0f64; 3];
    let mut count = 0usize;
    for x in images {
        let raster = image_raster(x, norm)?;
        for (i, &b) in raster.data.iter().enumerate() {
            sums[i % 3] += norm.apply(i % 3, super::netpbm::byte_to_unit(b)) as f64;
        }
        count += raster.width * raster.height;
    }
    Ok(sums.iter().map(|s| (s / count as f64) as f32).collect())
}

/// Generates a fixture of `kind` and writes it under `out`.
///
/// `side` and `region_size` apply to planted fixtures only.
pub fn export_fixture(
    kind: FixtureKind,
    seed: u64,
    out: &Path,
    side: usize,
    region_size: usize,
) -> Result<ExportedFixture> {
    create_dir(out)?;
    match kind {
        FixtureKind::Planted => {
            let fx = gen_planted(seed, PlantedRegion::random(seed, side, region_size), side)?;
            let seg = fx.object_segmentation(4);
            let info = PlantedInfo {
                kind: "planted",
                seed,
                side,
                region: fx.region,
                region_fraction: fx.region_fraction(),
                target: fx.target,
                tau_region: fx.tau_region,
            };
            let text = serde_json::to_string_pretty(&info)
                .map_err(|e| Error::internal(e.to_string()))?;
            let info_path = out.join("fixture.json");
            fs::write(&info_path, text + "\n").map_err(|e| Error::io(&info_path, e))?;
            let items = [
                Item {
                    id: fx.image_id.clone(),
                    image: &fx.image,
                    segmentation: Some(seg.clone()),
                    split: Split::Train,
                },
                Item {
                    id: format!("{}-test", fx.image_id),
                    image: &fx.image,
                    segmentation: Some(seg),
                    split: Split::Test,
                },
            ];
            write_dataset(out, &fx.model, Normalization::identity(), fx.fill.clone(), &items)
        }
        FixtureKind::Random | FixtureKind::Flat => {
            let (fx, norm) = if kind == FixtureKind::Random {
                let norm = Normalization {
                    mean: vec![0.5; 3],
                    std: vec![0.5; 3],
                };
                (gen_random(seed, &RandomSpec::default())?, norm)
            } else {
                (gen_flat(seed, 32)?, Normalization::identity())
            };
            let (h, w) = fx.model.input_size();
            let tensors: Vec<&Tensor> = fx.images.iter().map(|(_, x)| x).collect();
            let fill = byte_mean(&tensors, &norm)?;
            let items: Vec<Item> = fx
                .images
                .iter()
                .enumerate()
                .map(|(n, (id, x))| Item {
                    id: id.clone(),
                    image: x,
                    segmentation: Some(center_object(h, w)),
                    split: if n == 0 { Split::Train } else { Split::Test },
                })
                .collect();
            write_dataset(out, &fx.model, norm, fill, &items)
        }
    }
}
