//! The `protofaith` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use super::bundle::{load_bundle, save_bundle};
use super::eval::{enumerate_cases, evaluate, load_dataset, EvalSettings, Measure, RoleFilter};
use super::export::{export_fixture, FixtureKind};
use super::manifest::{load_manifest, Split};
use super::netpbm::{load_image, saliency_raster, write_raster, Normalization};
use super::report::{summary_json, write_erf_csv, write_reports, write_text};
use crate::error::{Error, Result};
use crate::metrics::{
    DeletionGrid, FillPolicy, DEFAULT_DELETION_MAX, DEFAULT_DELETION_STEP, DEFAULT_ERF_MAX,
    DEFAULT_ERF_STEP, DEFAULT_ERF_THRESHOLD, DEFAULT_RELEVANCE_AREA, DEFAULT_RELEVANCE_THRESHOLD,
};
use crate::proto::{project_prototypes, select_targets, TargetPolicy, DEFAULT_THRESHOLD};
use crate::saliency::{
    compute_saliency, crop_patch, patch_mask, Method, SaliencyConfig, SmoothgradsParams,
};
use crate::tensor::{ReceptiveFieldBox, RuleConfig};

/// Environment variable holding the worker count.
pub const THREADS_ENV: &str = "PROTOFAITH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "protofaith", version, about = "Part-prototype explanation and faithfulness evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Replace every prototype by its nearest latent vector on the train split.
    Project {
        bundle: PathBuf,
        manifest: PathBuf,
        /// Output bundle; defaults to overwriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Patches and saliency maps for one image.
    Explain {
        bundle: PathBuf,
        image: PathBuf,
        #[arg(long, default_value = "upsample", value_parser = parse_method)]
        method: Method,
        /// Target selection; defaults to the bundle's policy.
        #[arg(long)]
        policy: Option<PolicyArg>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        theta: f64,
        /// Manifest supplying normalization and fill values.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "explain")]
        out: PathBuf,
        #[command(flatten)]
        saliency: SaliencyArgs,
    },
    /// Deletion curves and AUDC.
    EvalDeletion {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long, default_value_t = DEFAULT_DELETION_MAX)]
        amax: f64,
        #[arg(long, default_value_t = DEFAULT_DELETION_STEP)]
        step: f64,
    },
    /// Intersection of top saliency pixels with object segmentations.
    EvalRelevance {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long = "a", default_value_t = DEFAULT_RELEVANCE_AREA)]
        area: f64,
        #[arg(long, default_value_t = DEFAULT_RELEVANCE_THRESHOLD)]
        threshold: f64,
    },
    /// Effective receptive field from extended deletion curves.
    Erf {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long, default_value_t = DEFAULT_ERF_MAX)]
        amax: f64,
        #[arg(long, default_value_t = DEFAULT_ERF_STEP)]
        step: f64,
        #[arg(long, default_value_t = DEFAULT_ERF_THRESHOLD)]
        tau: f64,
    },
    /// Write a synthetic model, manifest and images.
    GenFixture {
        #[arg(long, value_parser = parse_kind)]
        kind: FixtureKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "fixture")]
        out: PathBuf,
        /// Image side of planted fixtures.
        #[arg(long, default_value_t = 80)]
        side: usize,
        /// Side of the planted region.
        #[arg(long, default_value_t = 16)]
        region_size: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Protopnet,
    Prototree,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RoleArg {
    All,
    Prototype,
    TestPatch,
}

#[derive(Debug, Args)]
struct SaliencyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noisy samples per image for Smoothgrads.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 0.2)]
    noise_ratio: f64,
    /// Relevance rule at the first convolution.
    #[arg(long, default_value = "zB")]
    input_rule: String,
    /// Relevance rule at later convolutions.
    #[arg(long, default_value = "zplus")]
    hidden_rule: String,
}

impl SaliencyArgs {
    fn config(&self) -> Result<SaliencyConfig> {
        Ok(SaliencyConfig {
            smoothgrads: SmoothgradsParams {
                samples: self.samples,
                noise_ratio: self.noise_ratio,
                seed: self.seed,
            },
            rules: RuleConfig::from_names(&self.input_rule, &self.hidden_rule)?,
        })
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    bundle: PathBuf,
    manifest: PathBuf,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "upsample,smoothgrads,prp", value_parser = parse_method)]
    method: Vec<Method>,
    #[arg(long, value_enum, default_value = "all")]
    role: RoleArg,
    #[arg(long, default_value = "mean", value_parser = parse_fill)]
    fill: FillPolicy,
    #[arg(long, default_value = "report")]
    out: PathBuf,
    /// Record per-case wall time in the CSV (makes outputs run-dependent).
    #[arg(long)]
    timings: bool,
    #[command(flatten)]
    saliency: SaliencyArgs,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_fill(s: &str) -> std::result::Result<FillPolicy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<FixtureKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Runs the CLI on `argv` (program name first) and returns the exit code:
/// 0 on success, 1 on input errors, 2 on internal invariant violations.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = thread_pool().and_then(|pool| match pool {
        Some(pool) => pool.install(|| dispatch(cli.command)),
        None => dispatch(cli.command),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_internal() {
                2
            } else {
                1
            }
        }
    }
}

fn thread_pool() -> Result<Option<rayon::ThreadPool>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::argument(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map(Some)
        .map_err(|e| Error::internal(e.to_string()))
}

fn model_name(bundle: &Path) -> String {
    bundle
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Project {
            bundle,
            manifest,
            out,
        } => project(&bundle, &manifest, out.as_deref().unwrap_or(&bundle)),
        Command::Explain {
            bundle,
            image,
            method,
            policy,
            theta,
            manifest,
            out,
            saliency,
        } => explain(&bundle, &image, method, policy, theta, manifest.as_deref(), &out, &saliency),
        Command::EvalDeletion { common, amax, step } => {
            run_eval(&common, "eval-deletion", Measure::Deletion, |s| {
                s.grid = DeletionGrid::new(amax, step)?;
                Ok(())
            })
        }
        Command::EvalRelevance {
            common,
            area,
            threshold,
        } => run_eval(&common, "eval-relevance", Measure::Relevance, |s| {
            if !(area > 0.0 && area <= 1.0) {
                return Err(Error::argument(format!("--a must be in (0, 1], got {area}")));
            }
            s.relevance_area = area;
            s.relevance_threshold = threshold;
            Ok(())
        }),
        Command::Erf {
            common,
            amax,
            step,
            tau,
        } => run_eval(&common, "erf", Measure::Erf, |s| {
            s.erf_grid = DeletionGrid::new(amax, step)?;
            s.erf_threshold = tau;
            Ok(())
        }),
        Command::GenFixture {
            kind,
            seed,
            out,
            side,
            region_size,
        } => {
            let f = export_fixture(kind, seed, &out, side, region_size)?;
            println!("bundle   {}", f.bundle.display());
            println!("manifest {}", f.manifest.display());
            Ok(())
        }
    }
}

fn project(bundle: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let model = load_bundle(bundle)?;
    let manifest = load_manifest(manifest)?;
    let images = load_dataset(&manifest, &model)?;
    let mut set: Vec<(String, crate::tensor::Tensor)> = images
        .iter()
        .filter(|d| d.split == Split::Train)
        .map(|d| (d.id.clone(), d.tensor.clone()))
        .collect();
    if set.is_empty() {
        set = images.into_iter().map(|d| (d.id, d.tensor)).collect();
    }
    let prototypes = project_prototypes(&model, &set)?;
    for i in 0..prototypes.len() {
        if let Some(p) = prototypes.provenance(i) {
            println!("prototype {i}: {} ({}, {})", p.image_id, p.h, p.w);
        }
    }
    save_bundle(&model.with_prototypes(prototypes)?, out)
}

#[derive(Serialize)]
struct PatchRecord {
    prototype: usize,
    h: usize,
    w: usize,
    score: f32,
    method: String,
    #[serde(rename = "box")]
    bbox: ReceptiveFieldBox,
    pixels: usize,
    degenerate: bool,
    saliency: String,
}

#[allow(clippy::too_many_arguments)]
fn explain(
    bundle: &Path,
    image: &Path,
    method: Method,
    policy: Option<PolicyArg>,
    theta: f64,
    manifest: Option<&Path>,
    out: &Path,
    args: &SaliencyArgs,
) -> Result<()> {
    let mut model = load_bundle(bundle)?;
    if let Some(p) = policy {
        model = model.with_policy(match p {
            PolicyArg::Protopnet => TargetPolicy::ProtopnetTop10,
            PolicyArg::Prototree => TargetPolicy::PrototreeThreshold { theta },
        })?;
    }
    let (norm, fill) = match manifest {
        Some(m) => {
            let m = load_manifest(m)?;
            (m.normalization, m.fill)
        }
        None => (Normalization::identity(), vec![0.5; 3]),
    };
    let x = load_image(image, &norm, model.input_size())?.tensor;
    let image_id = model_name(image);
    let config = args.config()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut records = Vec::new();
    for target in select_targets(&model, &x)? {
        let sal = compute_saliency(&model, &x, target, method, &config, &fill, &image_id)?;
        let mask = patch_mask(&sal)?;
        let patch = crop_patch(&image_id, &mask)?;
        let name = format!("saliency-p{}.pgm", target.prototype);
        write_raster(&out.join(&name), &saliency_raster(&sal.values)?)?;
        let degenerate = mask.count() == mask.height() * mask.width();
        println!(
            "prototype {} at ({}, {}) score {:.4}: box rows {}..{} cols {}..{}{}",
            target.prototype,
            target.h,
            target.w,
            target.score,
            patch.top,
            patch.bottom,
            patch.left,
            patch.right,
            if degenerate { " (degenerate: full image)" } else { "" }
        );
        records.push(PatchRecord {
            prototype: target.prototype,
            h: target.h,
            w: target.w,
            score: target.score,
            method: sal.kind.label().to_string(),
            bbox: ReceptiveFieldBox {
                top: patch.top,
                left: patch.left,
                bottom: patch.bottom,
                right: patch.right,
            },
            pixels: mask.count(),
            degenerate,
            saliency: name,
        });
    }
    if records.is_empty() {
        println!("no prototype selected for this image");
    }
    let text = serde_json::to_string_pretty(&records).map_err(|e| Error::internal(e.to_string()))?;
    write_text(&out.join("patches.json"), &(text + "\n"))
}

fn run_eval(
    args: &EvalArgs,
    command: &str,
    measure: Measure,
    configure: impl FnOnce(&mut EvalSettings) -> Result<()>,
) -> Result<()> {
    let model = load_bundle(&args.bundle)?;
    let manifest = load_manifest(&args.manifest)?;
    let name = model_name(&args.bundle);
    let mut settings = EvalSettings::new(args.fill.values(&manifest.fill));
    settings.methods = args.method.clone();
    settings.roles = match args.role {
        RoleArg::All => RoleFilter::All,
        RoleArg::Prototype => RoleFilter::Prototype,
        RoleArg::TestPatch => RoleFilter::TestPatch,
    };
    settings.saliency = args.saliency.config()?;
    settings.fill = args.fill;
    settings.timings = args.timings;
    configure(&mut settings)?;
    let images = load_dataset(&manifest, &model)?;
    let cases = enumerate_cases(&model, &images, settings.roles)?;
    let output = evaluate(&model, &name, &images, &cases, &settings, measure)?;
    let params = settings.parameters(command, &name);
    write_reports(&args.out, &params, &output.cases, &output.curves)?;
    if measure == Measure::Erf {
        write_erf_csv(&args.out.join("erf.csv"), &name, &output.erf)?;
    }
    let summary: serde_json::Value = serde_json::from_str(&summary_json(&params, &output.cases)?)
        .map_err(|e| Error::internal(e.to_string()))?;
    for row in summary["rows"].as_array().into_iter().flatten() {
        let label = format!("{} {} {}", row["model"], row["method"], row["role"]).replace('"', "");
        match measure {
            Measure::Relevance => println!(
                "{label}: {} of {} irrelevant ({:.1}%)",
                row["irrelevant_count"],
                row["relevance_count"],
                row["percent_irrelevant"].as_f64().unwrap_or(0.0)
            ),
            _ => println!(
                "{label}: mean AUDC {:.1} over {} cases",
                row["mean_audc"].as_f64().unwrap_or(f64::NAN),
                row["audc_count"]
            ),
        }
    }
    if measure == Measure::Erf {
        let reached = output.erf.iter().filter(|(_, e)| e.area.is_some()).count();
        println!("ERF reached in {reached} of {} curves", output.erf.len());
    }
    Ok(())
}
