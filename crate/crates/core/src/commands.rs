//! End-to-end runs behind the `explain`, `evaluate`, `compare` and `fixture`
//! subcommands. Each run echoes its effective configuration into
//! `run_config.json` in the output directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Serialize, Serializer};

use crate::attribution::{explain, AttributionMap, ExplainOptions, IgConfig, Method, SmoothConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    reports_csv, run_benchmark_with_skips, BenchmarkConfig, EvaluationReport, PerturbationSchedule, Protocol, Sample,
    ScoreKind,
};
use crate::image::{ImageTensor, Normalization};
use crate::io::{load_dataset, load_png, load_weights, write_bytes, write_json, LoadedModel};
use crate::model::{forward, predicted_class, ModelConfig};
use crate::viz::{generate_vis, montage, output_name, render_curves, write_gray_png, write_rgb_png, Curve, Heatmap};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
/// Width in pixels of the white separators in comparison montages.
pub const MONTAGE_GUTTER: usize = 4;

/// Which class to explain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClassChoice {
    #[default]
    Predicted,
    Index(usize),
}

impl ClassChoice {
    pub fn resolve(self, logits: &crate::tensor::Tensor<f32>) -> Result<usize> {
        match self {
            ClassChoice::Predicted => Ok(predicted_class(logits)),
            ClassChoice::Index(c) if c < logits.len() => Ok(c),
            ClassChoice::Index(c) => Err(Error::Usage(format!(
                "class {c} out of range for {} classes",
                logits.len()
            ))),
        }
    }
}

impl FromStr for ClassChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("predicted") {
            return Ok(ClassChoice::Predicted);
        }
        s.parse()
            .map(ClassChoice::Index)
            .map_err(|_| Error::Usage(format!("class must be an index or 'predicted', got '{s}'")))
    }
}

impl fmt::Display for ClassChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassChoice::Predicted => f.write_str("predicted"),
            ClassChoice::Index(c) => write!(f, "{c}"),
        }
    }
}

impl Serialize for ClassChoice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ClassChoice::Predicted => s.serialize_str("predicted"),
            ClassChoice::Index(c) => s.serialize_u64(*c as u64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExplainArgs {
    pub image: PathBuf,
    pub weights: PathBuf,
    pub method: Method,
    pub class: ClassChoice,
    pub smooth: SmoothConfig,
    pub ig_steps: usize,
    /// Also write the normalized mask as a grayscale PNG.
    pub save_mask: bool,
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluateArgs {
    pub dataset: PathBuf,
    pub weights: PathBuf,
    pub methods: Vec<Method>,
    pub protocols: Vec<Protocol>,
    pub fractions: Vec<f64>,
    pub score: ScoreKind,
    pub seed: u64,
    pub smooth: SmoothConfig,
    pub ig_steps: usize,
    /// Worker count; `None` uses every core. Does not affect results.
    #[serde(skip)]
    pub threads: Option<usize>,
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareArgs {
    pub image: PathBuf,
    pub weights: PathBuf,
    pub class: ClassChoice,
    pub smooth: SmoothConfig,
    pub ig_steps: usize,
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct RunConfig<'a, A> {
    command: &'a str,
    version: &'a str,
    model: &'a ModelConfig,
    normalization: &'a Normalization,
    args: &'a A,
}

fn write_run_config<A: Serialize>(out: &Path, command: &str, model: &LoadedModel<f32>, args: &A) -> Result<()> {
    let rc = RunConfig {
        command,
        version: env!("CARGO_PKG_VERSION"),
        model: &model.config,
        normalization: &model.normalization,
        args,
    };
    write_json(&out.join(RUN_CONFIG_FILE), &rc)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn explain_options(smooth: &SmoothConfig, ig_steps: usize) -> Result<ExplainOptions<f32>> {
    smooth.validate()?;
    if ig_steps == 0 {
        return Err(Error::Parameter("integrated gradients needs at least one step".into()));
    }
    Ok(ExplainOptions {
        smooth: smooth.clone(),
        ig: IgConfig {
            steps: ig_steps,
            ..Default::default()
        },
        random_seed: smooth.seed,
    })
}

/// CSV with header `patch_index,row,col,value`.
pub fn attribution_csv(map: &AttributionMap<f32>) -> String {
    let (_, gw) = map.grid;
    let mut out = String::from("patch_index,row,col,value\n");
    for (i, v) in map.values.iter().enumerate() {
        out.push_str(&format!("{i},{},{},{v}\n", i / gw, i % gw));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainOutput {
    pub class: usize,
    pub map: AttributionMap<f32>,
    pub heatmap: Heatmap,
    pub png: PathBuf,
    pub csv: PathBuf,
}

fn load_image(path: &Path, model: &LoadedModel<f32>) -> Result<ImageTensor<f32>> {
    load_png(path, &model.config, &model.normalization)
}

/// Explains one image with one method and writes the overlay PNG and the
/// per-patch CSV.
pub fn cmd_explain(args: &ExplainArgs) -> Result<ExplainOutput> {
    let options = explain_options(&args.smooth, args.ig_steps)?;
    let model = load_weights(&args.weights)?;
    let img = load_image(&args.image, &model)?;
    let record = forward(&img, &model.weights, &model.config)?;
    let class = args.class.resolve(&record.logits)?;
    let map = explain(args.method, &img, &record, &model.weights, class, &options)?;
    let heatmap = generate_vis(&img, model.config.patch_size, &map)?;

    let name = output_name(&stem(&args.image), args.method, class);
    let png = args.out.join(&name);
    let csv = png.with_extension("csv");
    write_rgb_png(&png, heatmap.width, heatmap.height, &heatmap.overlay)?;
    write_bytes(&csv, attribution_csv(&map).as_bytes())?;
    if args.save_mask {
        write_gray_png(&png.with_extension("mask.png"), heatmap.width, heatmap.height, &heatmap.mask_bytes())?;
    }
    write_run_config(&args.out, "explain", &model, args)?;
    log::info!("{}: class {class}, wrote {}", args.method, png.display());
    Ok(ExplainOutput {
        class,
        map,
        heatmap,
        png,
        csv,
    })
}

pub const EVALUATION_CSV: &str = "evaluation.csv";
pub const EVALUATION_JSON: &str = "evaluation.json";
pub const CURVES_PNG: &str = "perturbation_curves.png";

/// Runs the perturbation benchmark over a dataset manifest and writes the
/// CSV, JSON summary and curve plot.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Vec<EvaluationReport>> {
    let schedule = PerturbationSchedule::new(args.fractions.clone())?;
    let explain = explain_options(&args.smooth, args.ig_steps)?;
    let model = load_weights(&args.weights)?;
    let dataset = load_dataset(&args.dataset)?;
    dataset.validate(model.config.num_classes)?;
    if dataset.entries.is_empty() {
        return Err(Error::Usage(format!("dataset {} is empty", args.dataset.display())));
    }
    let mut samples = Vec::with_capacity(dataset.entries.len());
    let mut skipped = 0;
    for entry in &dataset.entries {
        match load_image(&dataset.image_path(entry), &model) {
            Ok(image) => samples.push(Sample {
                image,
                label: entry.label.clone(),
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.image.display());
                skipped += 1;
            }
        }
    }
    let bench = BenchmarkConfig {
        methods: args.methods.clone(),
        protocols: args.protocols.clone(),
        schedule,
        score_kind: args.score,
        explain,
        seed: args.seed,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Parameter(format!("worker pool: {e}")))?;
    log::info!("evaluating {} samples ({skipped} unreadable)", samples.len());
    let reports = pool.install(|| run_benchmark_with_skips(&samples, skipped, &model.weights, &model.config, &bench))?;

    write_bytes(&args.out.join(EVALUATION_CSV), reports_csv(&reports).as_bytes())?;
    write_json(&args.out.join(EVALUATION_JSON), &reports)?;
    let curves: Vec<Curve> = reports
        .iter()
        .map(|r| Curve {
            label: format!("{}/{}", r.method, r.protocol),
            fractions: r.fractions.clone(),
            scores: r.mean_scores.clone(),
        })
        .collect();
    let (w, h, rgb) = render_curves(&curves, 480, 320);
    write_rgb_png(&args.out.join(CURVES_PNG), w, h, &rgb)?;
    write_run_config(&args.out, "evaluate", &model, args)?;
    for r in &reports {
        log::info!("{} {}: AUPC {:.6}, LogOdd {:.6}", r.method, r.protocol, r.aupc, r.logodd);
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareOutput {
    pub class: usize,
    pub panels: Vec<Heatmap>,
    pub width: usize,
    pub height: usize,
    pub montage: Vec<u8>,
    pub png: PathBuf,
}

/// Renders all six compared methods for one image into a single montage,
/// left to right in [`Method::COMPARED`] order.
pub fn cmd_compare(args: &CompareArgs) -> Result<CompareOutput> {
    let options = explain_options(&args.smooth, args.ig_steps)?;
    let model = load_weights(&args.weights)?;
    let img = load_image(&args.image, &model)?;
    let record = forward(&img, &model.weights, &model.config)?;
    let class = args.class.resolve(&record.logits)?;
    let panels = Method::COMPARED
        .iter()
        .map(|&m| {
            let map = explain(m, &img, &record, &model.weights, class, &options)?;
            generate_vis(&img, model.config.patch_size, &map)
        })
        .collect::<Result<Vec<_>>>()?;
    let (width, height) = (img.width(), img.height());
    let views: Vec<&[u8]> = panels.iter().map(|p| p.overlay.as_slice()).collect();
    let (total, bytes) = montage(&views, width, height, MONTAGE_GUTTER)?;
    let png = args.out.join(format!("{}.compare.{class}.png", stem(&args.image)));
    write_rgb_png(&png, total, height, &bytes)?;
    write_run_config(&args.out, "compare", &model, args)?;
    log::info!("compare: class {class}, wrote {}", png.display());
    Ok(CompareOutput {
        class,
        panels,
        width: total,
        height,
        montage: bytes,
        png,
    })
}
