//! Pipeline driver: scene synthesis, expansion, guidance, kernel training and
//! the density sweep as one binary, each subcommand deterministic given its
//! resolved configuration.
//!
//! Settings resolve in three layers: built-in defaults, then the `--config`
//! key=value file, then explicit flags (flags win). Unknown config keys are
//! rejected, the resolved configuration is written beside the outputs, and the
//! resolved seed is always printed. Exit codes: 0 success, 2 config or usage
//! error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};

use depthguide::camera::{depth_to_disparity, disparity_to_depth, CameraIntrinsics};
use depthguide::expansion::{
    expand, train_kernel, AdhocConfig, ExpansionModel, KernelParams, LossWeights, TrainScene,
    TrainingConfig, DEFAULT_PATCH_HALF_SIZE,
};
use depthguide::field::{DenseField, Representation, SparsePoint, SparseSignalMap};
use depthguide::gdc::{
    build_graph, correct, correct_with_confidence, problem_from_fields, solution_to_field,
    DEFAULT_GRAPH_EPSILON,
};
use depthguide::guidance::{
    confidence_modulate, fuse_output, gsm_modulate, norm_modulate, regress_disparity,
    GaussianGuideConfig, NormParams,
};
use depthguide::io::{
    read_field_pfm, read_image_pfm, read_kv, read_sparse_points, write_csv, write_field_pfm,
    write_image_pfm, write_kv, write_sparse_points,
};
use depthguide::metrics::{evaluate, text_table, EvalReport};
use depthguide::synth::{
    build_cost_volume, corrupt, generate_scene, sample_beams, sample_radar, sample_uniform,
    CorruptionSpec, SceneSpec,
};
use depthguide::{Error, Result};

#[derive(Parser)]
#[command(name = "depthguide", version, about = "Sparse-signal guidance for depth estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene; optionally corrupt it and sample sparse points.
    Synth(SynthArgs),
    /// Expand sparse points into a dense suggestion plus confidence.
    Expand(ExpandArgs),
    /// Inject a suggestion at one guidance stage and report the error.
    Guide(GuideArgs),
    /// Fit the confidence kernel on a directory of scenes.
    Train(TrainArgs),
    /// Sweep sampling density and compare guided against unguided error.
    SweepDensity(SweepArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Expand(args) => cmd_expand(args),
        Command::Guide(args) => cmd_guide(args),
        Command::Train(args) => cmd_train(args),
        Command::SweepDensity(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // One machine-parsable line, whatever the source error looked like.
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            match e {
                Error::Numerical(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Config-file overrides

/// key=value settings loaded from `--config`; every key must be consumed.
struct FileConfig {
    path: String,
    pairs: Vec<(String, String)>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig { path: String::new(), pairs: Vec::new() });
        };
        require_file(path, "config file")?;
        Ok(FileConfig {
            path: path.display().to_string(),
            pairs: read_kv(path)?,
        })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        let at = self.pairs.iter().position(|(k, _)| k == key)?;
        Some(self.pairs.remove(at).1)
    }

    /// Parsed value for `key`, or None when the file does not set it.
    fn parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("{}: cannot parse {key}={v:?}", self.path))
            }),
        }
    }

    /// Rejects whatever keys no flag claimed.
    fn finish(self) -> Result<()> {
        if let Some((k, _)) = self.pairs.first() {
            return Err(Error::Config(format!("{}: unknown key {k:?}", self.path)));
        }
        Ok(())
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found: {}", path.display())))
    }
}

fn prepare_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn kv(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn write_intrinsics(path: &Path, intr: &CameraIntrinsics) -> Result<()> {
    write_kv(
        path,
        &kv(&[
            ("focal", intr.focal.to_string()),
            ("cu", intr.cu.to_string()),
            ("cv", intr.cv.to_string()),
            ("baseline", intr.baseline.to_string()),
        ]),
    )
}

fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    require_file(path, "intrinsics file")?;
    let mut focal = None;
    let mut cu = None;
    let mut cv = None;
    let mut baseline = None;
    for (k, v) in read_kv(path)? {
        let slot = match k.as_str() {
            "focal" => &mut focal,
            "cu" => &mut cu,
            "cv" => &mut cv,
            "baseline" => &mut baseline,
            other => {
                return Err(Error::Config(format!(
                    "{}: unknown intrinsics key {other:?}",
                    path.display()
                )))
            }
        };
        *slot = Some(v.parse::<f64>().map_err(|_| {
            Error::Config(format!("{}: cannot parse {k}={v:?}", path.display()))
        })?);
    }
    match (focal, cu, cv, baseline) {
        (Some(f), Some(u), Some(v), Some(b)) => CameraIntrinsics::new(f, u, v, b),
        _ => Err(Error::Config(format!(
            "{}: intrinsics need focal, cu, cv and baseline",
            path.display()
        ))),
    }
}

/// Two-row error report (baseline first) as CSV plus a text table.
fn write_report(out: &Path, baseline: &EvalReport, guided: &EvalReport) -> Result<()> {
    let header = format!("case,{}", EvalReport::csv_header());
    let cols: Vec<&str> = header.split(',').collect();
    write_csv(
        &out.join("report.csv"),
        &cols,
        &[
            vec!["baseline".to_string(), baseline.csv_row()],
            vec!["guided".to_string(), guided.csv_row()],
        ],
    )?;
    let table = text_table(&[("baseline", baseline), ("guided", guided)]);
    std::fs::write(out.join("report.txt"), table)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

#[derive(clap::Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Scene description file; omitted means the built-in desk scene.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides every seed in the run (scene, corruption, sampling).
    #[arg(long)]
    seed: Option<u64>,
    /// Corruption description file; produces prediction.pfm.
    #[arg(long)]
    corrupt: Option<PathBuf>,
    /// Sampling pattern; produces points.txt.
    #[arg(long, value_enum)]
    sample: Option<SampleMode>,
    /// Fraction of pixels kept by uniform sampling.
    #[arg(long)]
    rate: Option<f64>,
    /// Number of scanning beams.
    #[arg(long)]
    beams: Option<usize>,
    /// Elevation step between beam bands, degrees.
    #[arg(long)]
    step: Option<f64>,
    /// First row of the radar band.
    #[arg(long)]
    row_start: Option<usize>,
    /// One past the last row of the radar band; 0 means the image height.
    #[arg(long)]
    row_end: Option<usize>,
    /// Number of radar returns.
    #[arg(long)]
    count: Option<usize>,
    /// key=value settings; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Debug)]
enum SampleMode {
    Uniform,
    Beams,
    Radar,
}

impl SampleMode {
    fn name(self) -> &'static str {
        match self {
            SampleMode::Uniform => "uniform",
            SampleMode::Beams => "beams",
            SampleMode::Radar => "radar",
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut file = FileConfig::load(args.config.as_deref())?;
    let spec_path = args.spec.or(file.take("spec").map(PathBuf::from));
    let corrupt_path = args.corrupt.or(file.take("corrupt").map(PathBuf::from));
    let seed = match args.seed {
        Some(s) => Some(s),
        None => file.parse::<u64>("seed")?,
    };
    let sample = match args.sample {
        Some(m) => Some(m),
        None => match file.take("sample") {
            None => None,
            Some(v) => Some(
                SampleMode::from_str(&v, true)
                    .map_err(|_| Error::Config(format!("unknown sampling pattern {v:?}")))?,
            ),
        },
    };
    let rate = args.rate.or(file.parse("rate")?).unwrap_or(0.15);
    let beams = args.beams.or(file.parse("beams")?).unwrap_or(4);
    let step = args.step.or(file.parse("step")?).unwrap_or(0.4);
    let row_start = args.row_start.or(file.parse("row-start")?).unwrap_or(0);
    let row_end = args.row_end.or(file.parse("row-end")?).unwrap_or(0);
    let count = args.count.or(file.parse("count")?).unwrap_or(16);
    file.finish()?;

    let mut spec = match &spec_path {
        Some(p) => {
            require_file(p, "scene spec")?;
            SceneSpec::load(p)?
        }
        None => SceneSpec::desk_default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let resolved_seed = spec.seed;
    println!("seed: {resolved_seed}");

    prepare_out_dir(&args.out)?;
    let (image, gt, intrinsics) = generate_scene(&spec)?;
    write_image_pfm(&image, &args.out.join("image.pfm"))?;
    write_field_pfm(&gt, &args.out.join("gt.pfm"))?;
    write_intrinsics(&args.out.join("intrinsics.txt"), &intrinsics)?;
    spec.save(&args.out.join("scene.cfg"))?;

    if let Some(p) = &corrupt_path {
        require_file(p, "corruption spec")?;
        let mut corruption = CorruptionSpec::load(p)?;
        if let Some(s) = seed {
            corruption.seed = s;
        }
        let prediction = corrupt(&gt, &corruption)?;
        write_field_pfm(&prediction, &args.out.join("prediction.pfm"))?;
        corruption.save(&args.out.join("corruption.cfg"))?;
    }

    if let Some(mode) = sample {
        let points = match mode {
            SampleMode::Uniform => sample_uniform(&gt, rate, resolved_seed)?,
            SampleMode::Beams => sample_beams(&gt, &intrinsics, beams, step, resolved_seed)?,
            SampleMode::Radar => {
                let end = if row_end == 0 { gt.height() } else { row_end };
                sample_radar(&gt, row_start, end, count, resolved_seed)?
            }
        };
        write_sparse_points(&points, &args.out.join("points.txt"))?;
    }

    let mut resolved = vec![
        ("command", "synth".to_string()),
        ("seed", resolved_seed.to_string()),
    ];
    if let Some(mode) = sample {
        resolved.push(("sample", mode.name().to_string()));
        match mode {
            SampleMode::Uniform => resolved.push(("rate", rate.to_string())),
            SampleMode::Beams => {
                resolved.push(("beams", beams.to_string()));
                resolved.push(("step", step.to_string()));
            }
            SampleMode::Radar => {
                resolved.push(("row-start", row_start.to_string()));
                resolved.push(("row-end", row_end.to_string()));
                resolved.push(("count", count.to_string()));
            }
        }
    }
    write_kv(&args.out.join("run.cfg"), &kv(&resolved))
}

// ---------------------------------------------------------------------------
// expand

#[derive(clap::Args)]
struct ExpandArgs {
    /// Intensity image, PFM.
    #[arg(long)]
    image: PathBuf,
    /// Sparse points file.
    #[arg(long)]
    points: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Expansion model.
    #[arg(long, value_enum)]
    model: Option<Model>,
    /// Patch half-size L; patches span 2L+1.
    #[arg(short = 'L', long)]
    half_size: Option<usize>,
    /// Intensity threshold for the region-growing model.
    #[arg(long)]
    tau: Option<f64>,
    /// Kernel parameter file; omitted means the untrained defaults.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Fraction of sources expanded; the rest pass through as bare pixels.
    #[arg(long)]
    sample_rate: Option<f64>,
    /// Seed for the source subsample.
    #[arg(long)]
    seed: Option<u64>,
    /// key=value settings; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Debug)]
enum Model {
    Adhoc,
    Kernel,
}

fn cmd_expand(args: ExpandArgs) -> Result<()> {
    let mut file = FileConfig::load(args.config.as_deref())?;
    let model = match args.model {
        Some(m) => Some(m),
        None => match file.take("model") {
            None => None,
            Some(v) => Some(
                Model::from_str(&v, true)
                    .map_err(|_| Error::Config(format!("unknown expansion model {v:?}")))?,
            ),
        },
    }
    .unwrap_or(Model::Adhoc);
    let half_size = args
        .half_size
        .or(file.parse("half-size")?)
        .unwrap_or(DEFAULT_PATCH_HALF_SIZE);
    let tau = args.tau.or(file.parse("tau")?).unwrap_or(0.1);
    let params_path = args.params.or(file.take("params").map(PathBuf::from));
    let sample_rate = args.sample_rate.or(file.parse("sample-rate")?).unwrap_or(1.0);
    let seed = args.seed.or(file.parse("seed")?).unwrap_or(0);
    file.finish()?;

    require_file(&args.image, "image")?;
    require_file(&args.points, "points file")?;
    let image = read_image_pfm(&args.image)?;
    let points = read_sparse_points(&args.points)?;
    let (model_cfg, params) = match model {
        Model::Adhoc => (ExpansionModel::Adhoc(AdhocConfig::new(half_size, tau)?), None),
        Model::Kernel => {
            let params = match &params_path {
                Some(p) => {
                    require_file(p, "kernel parameter file")?;
                    KernelParams::load(p)?
                }
                None => KernelParams::default_init(),
            };
            (ExpansionModel::Kernel { params, half_size }, Some(params))
        }
    };
    println!("seed: {seed}");

    prepare_out_dir(&args.out)?;
    let (expanded, confidence) = expand(&image, &points, &model_cfg, sample_rate, seed)?;
    write_field_pfm(&expanded, &args.out.join("expanded.pfm"))?;
    write_field_pfm(&confidence, &args.out.join("confidence.pfm"))?;

    let mut resolved = vec![
        ("command", "expand".to_string()),
        ("model", match model {
            Model::Adhoc => "adhoc".to_string(),
            Model::Kernel => "kernel".to_string(),
        }),
        ("half-size", half_size.to_string()),
        ("sample-rate", sample_rate.to_string()),
        ("seed", seed.to_string()),
    ];
    match model {
        Model::Adhoc => resolved.push(("tau", tau.to_string())),
        Model::Kernel => {
            let p = params.expect("kernel model resolved above");
            resolved.push(("alpha", p.alpha.to_string()));
            resolved.push(("beta", p.beta.to_string()));
            resolved.push(("bias", p.bias.to_string()));
            resolved.push(("path-accum", if p.path_accum { "1" } else { "0" }.to_string()));
        }
    }
    write_kv(&args.out.join("run.cfg"), &kv(&resolved))
}

// ---------------------------------------------------------------------------
// guide

#[derive(clap::Args)]
struct GuideArgs {
    /// Which stage receives the suggestion.
    #[arg(long, value_enum)]
    stage: Stage,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Dense prediction to guide, PFM.
    #[arg(long)]
    prediction: Option<PathBuf>,
    /// Clean reference for the report, PFM.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Expanded suggestion, PFM.
    #[arg(long)]
    expanded: Option<PathBuf>,
    /// Confidence for the suggestion, PFM.
    #[arg(long)]
    confidence: Option<PathBuf>,
    /// Sparse points file.
    #[arg(long)]
    points: Option<PathBuf>,
    /// Camera intrinsics file.
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Neighbors per node in the correction graph.
    #[arg(long)]
    k: Option<usize>,
    /// Tikhonov strength for the neighbor-weight fits.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Disparity planes in the synthetic cost volume.
    #[arg(long)]
    d_max: Option<usize>,
    /// Feature channels in the synthetic cost volume.
    #[arg(long)]
    features: Option<usize>,
    /// Evidence peak sharpness of the synthetic cost volume.
    #[arg(long)]
    sharpness: Option<f64>,
    /// Evidence noise amplitude of the synthetic cost volume.
    #[arg(long)]
    noise: Option<f64>,
    /// Seed for the cost-volume noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Peak multiplier of the guidance bump.
    #[arg(long)]
    gauss_height: Option<f64>,
    /// Width of the guidance bump, disparity units.
    #[arg(long)]
    gauss_width: Option<f64>,
    /// Multiplier floor where confidence vanishes.
    #[arg(long)]
    gauss_shift: Option<f64>,
    /// Disparity plane evaluated by the normalization stage.
    #[arg(long)]
    d: Option<usize>,
    /// Conditional gain is gain-scale * value + gain-shift.
    #[arg(long)]
    gain_scale: Option<f64>,
    #[arg(long)]
    gain_shift: Option<f64>,
    /// Conditional offset is offset-scale * value + offset-shift.
    #[arg(long)]
    offset_scale: Option<f64>,
    #[arg(long)]
    offset_shift: Option<f64>,
    /// key=value settings; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Debug)]
enum Stage {
    Output,
    Costvolume,
    Gdc,
    Norm,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Output => "output",
            Stage::Costvolume => "costvolume",
            Stage::Gdc => "gdc",
            Stage::Norm => "norm",
        }
    }
}

/// Inputs shared by several stages, resolved once.
struct GuideInputs {
    prediction: Option<DenseField>,
    gt: Option<DenseField>,
    expansion: Option<(DenseField, DenseField)>,
    points: Option<SparseSignalMap>,
    intrinsics: Option<CameraIntrinsics>,
}

fn cmd_guide(args: GuideArgs) -> Result<()> {
    let mut file = FileConfig::load(args.config.as_deref())?;
    let prediction_path = args.prediction.or(file.take("prediction").map(PathBuf::from));
    let gt_path = args.gt.or(file.take("gt").map(PathBuf::from));
    let expanded_path = args.expanded.or(file.take("expanded").map(PathBuf::from));
    let confidence_path = args.confidence.or(file.take("confidence").map(PathBuf::from));
    let points_path = args.points.or(file.take("points").map(PathBuf::from));
    let intrinsics_path = args.intrinsics.or(file.take("intrinsics").map(PathBuf::from));
    let k = args.k.or(file.parse("k")?).unwrap_or(10);
    let epsilon = args.epsilon.or(file.parse("epsilon")?).unwrap_or(DEFAULT_GRAPH_EPSILON);
    let d_max = args.d_max.or(file.parse("d-max")?).unwrap_or(64);
    let features = args.features.or(file.parse("features")?).unwrap_or(2);
    let sharpness = args.sharpness.or(file.parse("sharpness")?).unwrap_or(2.0);
    let noise = args.noise.or(file.parse("noise")?).unwrap_or(0.1);
    let seed = args.seed.or(file.parse("seed")?).unwrap_or(0);
    let gauss_height = args.gauss_height.or(file.parse("gauss-height")?).unwrap_or(10.0);
    let gauss_width = args.gauss_width.or(file.parse("gauss-width")?).unwrap_or(1.0);
    let gauss_shift = args.gauss_shift.or(file.parse("gauss-shift")?).unwrap_or(1.0);
    let d = args.d.or(file.parse("d")?).unwrap_or(0);
    let gain_scale = args.gain_scale.or(file.parse("gain-scale")?).unwrap_or(1.0);
    let gain_shift = args.gain_shift.or(file.parse("gain-shift")?).unwrap_or(0.0);
    let offset_scale = args.offset_scale.or(file.parse("offset-scale")?).unwrap_or(1.0);
    let offset_shift = args.offset_shift.or(file.parse("offset-shift")?).unwrap_or(0.0);
    file.finish()?;

    let load_field = |path: &Option<PathBuf>, what: &str, repr: Representation| -> Result<Option<DenseField>> {
        match path {
            None => Ok(None),
            Some(p) => {
                require_file(p, what)?;
                read_field_pfm(p, repr).map(Some)
            }
        }
    };
    let expansion = match (&expanded_path, &confidence_path) {
        (None, None) => None,
        (Some(e), Some(c)) => {
            require_file(e, "expanded suggestion")?;
            require_file(c, "confidence")?;
            Some((
                read_field_pfm(e, Representation::DepthMeters)?,
                read_field_pfm(c, Representation::Unitless)?,
            ))
        }
        _ => {
            return Err(Error::Config(
                "expanded and confidence must be given together".to_string(),
            ))
        }
    };
    let inputs = GuideInputs {
        prediction: load_field(&prediction_path, "prediction", Representation::DepthMeters)?,
        gt: load_field(&gt_path, "reference", Representation::DepthMeters)?,
        expansion,
        points: match &points_path {
            None => None,
            Some(p) => {
                require_file(p, "points file")?;
                Some(read_sparse_points(p)?)
            }
        },
        intrinsics: match &intrinsics_path {
            None => None,
            Some(p) => Some(read_intrinsics(p)?),
        },
    };
    println!("seed: {seed}");
    prepare_out_dir(&args.out)?;

    let mut resolved = vec![
        ("command", "guide".to_string()),
        ("stage", args.stage.name().to_string()),
        ("seed", seed.to_string()),
    ];
    match args.stage {
        Stage::Output => stage_output(&args.out, &inputs)?,
        Stage::Costvolume => {
            let cfg = GaussianGuideConfig::new(gauss_height, gauss_width, gauss_shift)?;
            stage_costvolume(&args.out, &inputs, d_max, features, sharpness, noise, seed, &cfg)?;
            resolved.extend([
                ("d-max", d_max.to_string()),
                ("features", features.to_string()),
                ("sharpness", sharpness.to_string()),
                ("noise", noise.to_string()),
                ("gauss-height", gauss_height.to_string()),
                ("gauss-width", gauss_width.to_string()),
                ("gauss-shift", gauss_shift.to_string()),
            ]);
        }
        Stage::Gdc => {
            stage_gdc(&args.out, &inputs, k, epsilon)?;
            resolved.extend([("k", k.to_string()), ("epsilon", epsilon.to_string())]);
        }
        Stage::Norm => {
            stage_norm(
                &args.out, &inputs, d, d_max, gain_scale, gain_shift, offset_scale, offset_shift,
            )?;
            resolved.extend([
                ("d", d.to_string()),
                ("d-max", d_max.to_string()),
                ("gain-scale", gain_scale.to_string()),
                ("gain-shift", gain_shift.to_string()),
                ("offset-scale", offset_scale.to_string()),
                ("offset-shift", offset_shift.to_string()),
            ]);
        }
    }
    write_kv(&args.out.join("run.cfg"), &kv(&resolved))
}

fn need<'a, T>(slot: &'a Option<T>, what: &str, stage: &str) -> Result<&'a T> {
    slot.as_ref()
        .ok_or_else(|| Error::Config(format!("stage {stage} needs --{what}")))
}

fn stage_output(out: &Path, inputs: &GuideInputs) -> Result<()> {
    let prediction = need(&inputs.prediction, "prediction", "output")?;
    let (expanded, confidence) = need(&inputs.expansion, "expanded/--confidence", "output")?;
    let guided = fuse_output(expanded, confidence, prediction)?;
    write_field_pfm(&guided, &out.join("guided.pfm"))?;
    if let Some(gt) = &inputs.gt {
        write_report(out, &evaluate(prediction, gt)?, &evaluate(&guided, gt)?)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn stage_costvolume(
    out: &Path,
    inputs: &GuideInputs,
    d_max: usize,
    features: usize,
    sharpness: f64,
    noise: f64,
    seed: u64,
    cfg: &GaussianGuideConfig,
) -> Result<()> {
    let gt = need(&inputs.gt, "gt", "costvolume")?;
    let intrinsics = need(&inputs.intrinsics, "intrinsics", "costvolume")?;
    let gt_disp = depth_to_disparity(gt, intrinsics)?;
    let volume = build_cost_volume(&gt_disp, d_max, features, sharpness, noise, seed)?;

    let modulated = match &inputs.expansion {
        Some((expanded, confidence)) => {
            let expanded_disp = depth_to_disparity(expanded, intrinsics)?;
            confidence_modulate(&volume, &expanded_disp, confidence, cfg)?
        }
        None => {
            let points = need(&inputs.points, "points", "costvolume")?;
            let hints = hints_to_disparity(points, intrinsics)?;
            gsm_modulate(&volume, &hints, cfg)?
        }
    };
    let baseline_depth = disparity_to_depth(&regress_disparity(&volume), intrinsics)?;
    let guided_depth = disparity_to_depth(&regress_disparity(&modulated), intrinsics)?;
    write_field_pfm(&guided_depth, &out.join("guided.pfm"))?;
    write_report(out, &evaluate(&baseline_depth, gt)?, &evaluate(&guided_depth, gt)?)
}

fn hints_to_disparity(map: &SparseSignalMap, intr: &CameraIntrinsics) -> Result<SparseSignalMap> {
    if map.representation() == Representation::DisparityPixels {
        return Ok(map.clone());
    }
    let points = map
        .points()
        .iter()
        .map(|p| {
            Ok(SparsePoint {
                row: p.row,
                col: p.col,
                value: intr.depth_to_disparity_value(p.value)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SparseSignalMap::new(map.height(), map.width(), Representation::DisparityPixels, points)
}

fn stage_gdc(out: &Path, inputs: &GuideInputs, k: usize, epsilon: f64) -> Result<()> {
    let prediction = need(&inputs.prediction, "prediction", "gdc")?;
    let points = need(&inputs.points, "points", "gdc")?;
    let intrinsics = need(&inputs.intrinsics, "intrinsics", "gdc")?;
    let expansion = inputs.expansion.as_ref().map(|(e, c)| (e, c));
    let problem = problem_from_fields(prediction, points, expansion, intrinsics)?;
    let graph = build_graph(&problem.cloud(), k, epsilon)?;
    let solution = if inputs.expansion.is_some() {
        correct_with_confidence(&problem, &graph)?
    } else {
        correct(&problem, &graph)?
    };
    let guided = solution_to_field(&problem, &solution, prediction.height(), prediction.width())?;
    write_field_pfm(&guided, &out.join("guided.pfm"))?;
    if let Some(gt) = &inputs.gt {
        write_report(out, &evaluate(prediction, gt)?, &evaluate(&guided, gt)?)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn stage_norm(
    out: &Path,
    inputs: &GuideInputs,
    d: usize,
    d_max: usize,
    gain_scale: f64,
    gain_shift: f64,
    offset_scale: f64,
    offset_shift: f64,
) -> Result<()> {
    let (expanded, confidence) = need(&inputs.expansion, "expanded/--confidence", "norm")?;
    // Identity unconditional tables: pixels without a suggestion keep
    // gain 1, offset 0, so the table reads as pure hint influence.
    let params = NormParams::new(
        1,
        d_max,
        vec![1.0; d_max],
        vec![0.0; d_max],
        gain_scale,
        gain_shift,
        offset_scale,
        offset_shift,
        vec![1.0; d_max],
        vec![0.0; d_max],
        vec![1.0; d_max],
        vec![0.0; d_max],
    )?;
    let mut rows = Vec::with_capacity(expanded.height() * expanded.width());
    for i in 0..expanded.height() {
        for j in 0..expanded.width() {
            let pairs = norm_modulate(&params, expanded, confidence, (i, j), d)?;
            rows.push(vec![
                i.to_string(),
                j.to_string(),
                pairs[0].0.to_string(),
                pairs[0].1.to_string(),
            ]);
        }
    }
    write_csv(&out.join("norm.csv"), &["row", "col", "gain", "offset"], &rows)
}

// ---------------------------------------------------------------------------
// train

#[derive(clap::Args)]
struct TrainArgs {
    /// Directory of scene subdirectories (image.pfm, points.txt, gt.pfm each).
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Patch half-size L.
    #[arg(short = 'L', long)]
    half_size: Option<usize>,
    /// Initial spatial scale.
    #[arg(long)]
    alpha: Option<f64>,
    /// Initial intensity scale.
    #[arg(long)]
    beta: Option<f64>,
    /// Initial logit bias.
    #[arg(long)]
    bias: Option<f64>,
    /// Accumulate intensity distance along paths instead of direct differences.
    #[arg(long)]
    path_accum: Option<bool>,
    /// Gradient-descent step size.
    #[arg(long)]
    lr: Option<f64>,
    /// Gradient-descent iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Fraction of sources expanded per scene and iteration.
    #[arg(long)]
    sample_rate: Option<f64>,
    /// Weight of the value-fit term.
    #[arg(long)]
    fit_weight: Option<f64>,
    /// Weight of the confidence penalty.
    #[arg(long)]
    conf_weight: Option<f64>,
    /// Seed for the per-iteration source subsample.
    #[arg(long)]
    seed: Option<u64>,
    /// key=value settings; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut file = FileConfig::load(args.config.as_deref())?;
    let half_size = args.half_size.or(file.parse("half-size")?).unwrap_or(3);
    let defaults = KernelParams::default_init();
    let alpha = args.alpha.or(file.parse("alpha")?).unwrap_or(defaults.alpha);
    let beta = args.beta.or(file.parse("beta")?).unwrap_or(defaults.beta);
    let bias = args.bias.or(file.parse("bias")?).unwrap_or(defaults.bias);
    let path_accum = args.path_accum.or(file.parse("path-accum")?).unwrap_or(false);
    let lr = args.lr.or(file.parse("lr")?).unwrap_or(0.5);
    let iterations = args.iterations.or(file.parse("iterations")?).unwrap_or(100);
    let sample_rate = args.sample_rate.or(file.parse("sample-rate")?).unwrap_or(1.0);
    let fit_weight = args.fit_weight.or(file.parse("fit-weight")?).unwrap_or(1.0);
    let conf_weight = args.conf_weight.or(file.parse("conf-weight")?).unwrap_or(0.01);
    let seed = args.seed.or(file.parse("seed")?).unwrap_or(0);
    file.finish()?;

    let dataset = load_dataset(&args.data)?;
    let init = KernelParams::new(alpha, beta, bias, path_accum)?;
    let cfg = TrainingConfig {
        weights: LossWeights::new(fit_weight, conf_weight)?,
        learning_rate: lr,
        iterations,
        sample_rate,
        seed,
    };
    println!("seed: {seed}");

    let (params, curve) = train_kernel(&dataset, &init, half_size, &cfg)?;
    prepare_out_dir(&args.out)?;
    params.save(&args.out.join("params.cfg"))?;
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|(iter, loss)| vec![iter.to_string(), loss.to_string()])
        .collect();
    write_csv(&args.out.join("curve.csv"), &["iteration", "loss"], &rows)?;
    write_kv(
        &args.out.join("run.cfg"),
        &kv(&[
            ("command", "train".to_string()),
            ("half-size", half_size.to_string()),
            ("alpha", alpha.to_string()),
            ("beta", beta.to_string()),
            ("bias", bias.to_string()),
            ("path-accum", if path_accum { "1" } else { "0" }.to_string()),
            ("lr", lr.to_string()),
            ("iterations", iterations.to_string()),
            ("sample-rate", sample_rate.to_string()),
            ("fit-weight", fit_weight.to_string()),
            ("conf-weight", conf_weight.to_string()),
            ("seed", seed.to_string()),
        ]),
    )
}

/// Scene subdirectories in name order; each must hold the full triple.
fn load_dataset(dir: &Path) -> Result<Vec<TrainScene>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("dataset directory not found: {}", dir.display())));
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut dataset = Vec::new();
    for sub in &subdirs {
        for name in ["image.pfm", "points.txt", "gt.pfm"] {
            let p = sub.join(name);
            if !p.is_file() {
                return Err(Error::Config(format!("training scene misses {}", p.display())));
            }
        }
        dataset.push(TrainScene {
            image: read_image_pfm(&sub.join("image.pfm"))?,
            sparse: read_sparse_points(&sub.join("points.txt"))?,
            target: read_field_pfm(&sub.join("gt.pfm"), Representation::DepthMeters)?,
        });
    }
    if dataset.is_empty() {
        return Err(Error::Config(format!("no training scenes under {}", dir.display())));
    }
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// sweep-density

#[derive(clap::Args)]
struct SweepArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Densities as percentages, comma separated.
    #[arg(long)]
    densities: Option<String>,
    /// Number of seeds aggregated per density (median).
    #[arg(long)]
    seeds: Option<usize>,
    /// Base seed; run s uses base + s.
    #[arg(long)]
    seed: Option<u64>,
    /// Scene description file; omitted means the built-in desk scene.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Constant depth offset applied to large flat regions.
    #[arg(long)]
    bias: Option<f64>,
    /// Gaussian noise level of the corrupted prediction.
    #[arg(long)]
    noise: Option<f64>,
    /// Patch half-size of the region-growing expansion.
    #[arg(short = 'L', long)]
    half_size: Option<usize>,
    /// Intensity threshold of the region-growing expansion.
    #[arg(long)]
    tau: Option<f64>,
    /// key=value settings; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut file = FileConfig::load(args.config.as_deref())?;
    let densities_text = args
        .densities
        .or(file.take("densities"))
        .unwrap_or_else(|| "15,5,1,0.25".to_string());
    let seeds = args.seeds.or(file.parse("seeds")?).unwrap_or(20);
    let base_seed = args.seed.or(file.parse("seed")?).unwrap_or(0);
    let spec_path = args.spec.or(file.take("spec").map(PathBuf::from));
    let bias = args.bias.or(file.parse("bias")?).unwrap_or(2.0);
    let noise = args.noise.or(file.parse("noise")?).unwrap_or(0.05);
    let half_size = args.half_size.or(file.parse("half-size")?).unwrap_or(3);
    let tau = args.tau.or(file.parse("tau")?).unwrap_or(0.08);
    file.finish()?;

    let densities = parse_densities(&densities_text)?;
    if seeds == 0 {
        return Err(Error::Config("seed count must be >= 1".to_string()));
    }
    let base_spec = match &spec_path {
        Some(p) => {
            require_file(p, "scene spec")?;
            SceneSpec::load(p)?
        }
        None => SceneSpec::desk_default(),
    };
    let model = ExpansionModel::Adhoc(AdhocConfig::new(half_size, tau)?);
    println!("seed: {base_seed}");

    // Guided and unguided error per (density, seed); the scene and its
    // corruption are shared across densities within one seed.
    let mut guided_avg = vec![Vec::with_capacity(seeds); densities.len()];
    let mut guided_gt2 = vec![Vec::with_capacity(seeds); densities.len()];
    let mut unguided_avg = Vec::with_capacity(seeds);
    let mut unguided_gt2 = Vec::with_capacity(seeds);
    for s in 0..seeds {
        let run_seed = base_seed + s as u64;
        let mut spec = base_spec.clone();
        spec.seed = run_seed;
        let (image, gt, _) = generate_scene(&spec)?;
        let corruption = CorruptionSpec {
            bias,
            noise_sigma: noise,
            ..CorruptionSpec::none(run_seed)
        };
        let prediction = corrupt(&gt, &corruption)?;
        let raw = evaluate(&prediction, &gt)?;
        unguided_avg.push(raw.avg);
        unguided_gt2.push(raw.outlier_pct[1]);
        for (at, density) in densities.iter().enumerate() {
            let points = sample_uniform(&gt, density / 100.0, run_seed)?;
            let (expanded, confidence) = expand(&image, &points, &model, 1.0, run_seed)?;
            let fused = fuse_output(&expanded, &confidence, &prediction)?;
            let report = evaluate(&fused, &gt)?;
            guided_avg[at].push(report.avg);
            guided_gt2[at].push(report.outlier_pct[1]);
        }
    }

    let unguided = (median(&mut unguided_avg), median(&mut unguided_gt2));
    let rows: Vec<Vec<String>> = densities
        .iter()
        .enumerate()
        .map(|(at, density)| {
            vec![
                density.to_string(),
                median(&mut guided_avg[at]).to_string(),
                unguided.0.to_string(),
                median(&mut guided_gt2[at]).to_string(),
                unguided.1.to_string(),
            ]
        })
        .collect();
    prepare_out_dir(&args.out)?;
    write_csv(
        &args.out.join("sweep.csv"),
        &["density", "guided_avg", "unguided_avg", "guided_gt2", "unguided_gt2"],
        &rows,
    )?;
    write_kv(
        &args.out.join("run.cfg"),
        &kv(&[
            ("command", "sweep-density".to_string()),
            ("densities", densities.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")),
            ("seeds", seeds.to_string()),
            ("seed", base_seed.to_string()),
            ("bias", bias.to_string()),
            ("noise", noise.to_string()),
            ("half-size", half_size.to_string()),
            ("tau", tau.to_string()),
        ]),
    )
}

/// Comma-separated percentages in (0, 100], returned sorted descending.
fn parse_densities(text: &str) -> Result<Vec<f64>> {
    let mut densities = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        let v: f64 = part
            .parse()
            .map_err(|_| Error::Config(format!("cannot parse density {part:?}")))?;
        if !(v > 0.0 && v <= 100.0) {
            return Err(Error::Config(format!("density must be in (0, 100] percent, got {v}")));
        }
        densities.push(v);
    }
    if densities.is_empty() {
        return Err(Error::Config("density list is empty".to_string()));
    }
    densities.sort_by(|a, b| b.partial_cmp(a).expect("densities are finite"));
    Ok(densities)
}

/// Median with the even case averaged; sorts in place.
fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("metrics are finite"));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}
