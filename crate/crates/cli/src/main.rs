//! `conformal-od`: split, calibrate, apply, evaluate and simulate.
//!
//! Exit codes: 0 success, 2 input error, 3 infeasible guarantee, 4 artifact
//! parameters disagree with the requested ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use conformal_od::artifact::{calibrate, matching_fingerprint};
use conformal_od::boxwise::collect_pairs;
use conformal_od::dataio::{
    build_records, fingerprint_records, load_detections, load_ground_truth, load_versioned,
    save_json, sha256_file, split_dataset, DatasetManifest, DetectionFile, InputFormat, Provenance,
    Split, SCHEMA_VERSION,
};
use conformal_od::metrics::evaluate;
use conformal_od::synthetic::{
    run_trials, DetectorNoiseModel, NoiseDistribution, SceneParams, TrialConfig,
};
use conformal_od::{
    CalibrationArtifact, CalibrationConfig, Error, ImageRecord, MarginMode, Margins,
    MatchingStrategy, Method,
};

const EXIT_INPUT: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser)]
#[command(
    name = "conformal-od",
    version,
    about = "Conformal bounding boxes for object detectors"
)]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Shuffle a manifest's images into calibration and test ids.
    Split(SplitArgs),
    /// Calibrate margins and write an artifact.
    Calibrate(CalibrateArgs),
    /// Inflate detections with a calibrated artifact.
    Apply(ApplyArgs),
    /// Coverage, risk and stretch of an artifact on test images.
    Evaluate(EvaluateArgs),
    /// Monte Carlo trials on synthetic data.
    Simulate(SimulateArgs),
}

#[derive(Args, Serialize)]
struct DataArgs {
    /// Ground-truth manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// native | coco
    #[arg(long, default_value = "native")]
    format: InputFormat,
}

#[derive(Args, Serialize)]
struct SplitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[arg(long)]
    n_cal: usize,
    #[arg(long)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

/// Matching parameters; unset values fall back to the defaults when
/// calibrating and to the artifact's values otherwise.
#[derive(Args, Serialize, Clone)]
struct MatchArgs {
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    objectness_threshold: Option<f64>,
    /// greedy | hungarian
    #[arg(long)]
    matching: Option<MatchingStrategy>,
    #[arg(long)]
    class_id: Option<u32>,
}

#[derive(Args, Serialize, Clone)]
struct MethodArgs {
    /// additive | multiplicative | max-additive | max-multiplicative |
    /// hausdorff | crc-box-recall | crc-pixel-recall
    #[arg(long, default_value = "max-additive")]
    method: Method,
    #[arg(long, default_value_t = conformal_od::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = conformal_od::DEFAULT_BETA)]
    beta: f64,
    /// Margin mode of image-wise methods: additive | multiplicative.
    #[arg(long, default_value = "additive")]
    mode: MarginMode,
    #[arg(long)]
    clip_nonnegative: bool,
    /// Absolute search tolerance of image-wise margins.
    #[arg(long, default_value_t = conformal_od::imagewise::DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[command(flatten)]
    #[serde(flatten)]
    matching: MatchArgs,
}

impl MethodArgs {
    fn config(&self) -> CalibrationConfig {
        let d = CalibrationConfig::default();
        let m = &self.matching;
        CalibrationConfig {
            method: self.method,
            mode: self.mode,
            alpha: self.alpha,
            iou_threshold: m.iou_threshold.unwrap_or(d.iou_threshold),
            objectness_threshold: m.objectness_threshold.unwrap_or(d.objectness_threshold),
            matching: m.matching.unwrap_or(d.matching),
            beta: self.beta,
            class_id: m.class_id,
            clip_nonnegative: self.clip_nonnegative,
            tolerance: self.tolerance,
        }
    }
}

#[derive(Args, Serialize)]
struct CalibrateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[arg(long)]
    detections: PathBuf,
    /// Use the calibration ids of this split; all images otherwise.
    #[arg(long)]
    split: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    method: MethodArgs,
    /// Recorded in the artifact when no split is given.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ApplyArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[arg(long)]
    detections: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    matching: MatchArgs,
    /// Proceed even if the matching parameters disagree with the artifact.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[arg(long)]
    detections: PathBuf,
    /// Use the test ids of this split; all images otherwise.
    #[arg(long)]
    split: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    matching: MatchArgs,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Also write the report as a one-row CSV.
    #[arg(long)]
    #[serde(skip)]
    csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    method: MethodArgs,
    #[arg(long, default_value_t = 200)]
    n_trials: usize,
    /// Matched boxes (box-wise) or images (image-wise) per calibration set.
    #[arg(long, default_value_t = 1000)]
    n_cal: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    sigma_rel: Option<f64>,
    #[arg(long)]
    scale_sigma: Option<f64>,
    /// gaussian | uniform
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    p_fn: Option<f64>,
    #[arg(long)]
    p_fp: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Also write per-trial rows as CSV.
    #[arg(long)]
    #[serde(skip)]
    csv: Option<PathBuf>,
}

#[derive(Debug)]
struct Mismatch(String);

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "artifact provenance mismatch: {}", self.0)
    }
}

impl std::error::Error for Mismatch {}

/// Calibration or application failed for lack of a finite guarantee.
#[derive(Debug)]
struct InfeasibleExit(String);

impl std::fmt::Display for InfeasibleExit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InfeasibleExit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Mismatch>().is_some() {
        return EXIT_MISMATCH;
    }
    if err.downcast_ref::<InfeasibleExit>().is_some() {
        return EXIT_INFEASIBLE;
    }
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_infeasible() || matches!(e, Error::InfeasibleArtifact) => EXIT_INFEASIBLE,
        _ => EXIT_INPUT,
    }
}

fn provenance<C: Serialize>(config: &C, inputs: &[(&str, &Path)]) -> anyhow::Result<Provenance> {
    let mut hashes = BTreeMap::new();
    for (role, path) in inputs {
        hashes.insert(role.to_string(), sha256_file(path)?);
    }
    Ok(Provenance {
        config: serde_json::to_value(config)?,
        inputs: hashes,
    })
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_inputs(
    data: &DataArgs,
    detections: &Path,
) -> anyhow::Result<(DatasetManifest, String, conformal_od::dataio::DetectionSet)> {
    let manifest = load_ground_truth(&data.manifest, data.format)?;
    let (detector, dets) = load_detections(detections, data.format, &manifest)?;
    Ok((manifest, detector, dets))
}

/// Compares requested matching parameters with the artifact's.
fn check_matching(
    artifact: &CalibrationArtifact,
    m: &MatchArgs,
    force: bool,
) -> anyhow::Result<()> {
    let mut problems = Vec::new();
    let recomputed = matching_fingerprint(
        artifact.iou_threshold,
        artifact.objectness_threshold,
        artifact.matching_strategy,
        artifact.class_id,
    );
    if recomputed != artifact.matching_fingerprint {
        problems.push(format!(
            "matching fingerprint {} does not match the recorded parameters ({recomputed})",
            artifact.matching_fingerprint
        ));
    }
    if let Some(v) = m.iou_threshold.filter(|v| *v != artifact.iou_threshold) {
        problems.push(format!("iou threshold {v} != {}", artifact.iou_threshold));
    }
    if let Some(v) = m
        .objectness_threshold
        .filter(|v| *v != artifact.objectness_threshold)
    {
        problems.push(format!(
            "objectness threshold {v} != {}",
            artifact.objectness_threshold
        ));
    }
    if let Some(v) = m.matching.filter(|v| *v != artifact.matching_strategy) {
        problems.push(format!(
            "matching {} != {}",
            v.as_str(),
            artifact.matching_strategy.as_str()
        ));
    }
    if m.class_id.is_some() && m.class_id != artifact.class_id {
        problems.push(format!(
            "class id {:?} != {:?}",
            m.class_id, artifact.class_id
        ));
    }
    if problems.is_empty() {
        return Ok(());
    }
    let msg = problems.join("; ");
    if force {
        log::warn!("ignoring artifact mismatch (--force): {msg}");
        Ok(())
    } else {
        Err(Mismatch(msg).into())
    }
}

fn cmd_split(args: &SplitArgs) -> anyhow::Result<()> {
    let manifest = load_ground_truth(&args.data.manifest, args.data.format)?;
    let mut split = split_dataset(&manifest, args.n_cal, args.n_test, args.seed)?;
    split.provenance = Some(provenance(args, &[("manifest", &args.data.manifest)])?);
    save_json(&args.out, &split)?;
    eprintln!(
        "split {} images: {} calibration, {} test -> {}",
        manifest.images.len(),
        split.calibration.len(),
        split.test.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_calibrate(args: &CalibrateArgs) -> anyhow::Result<()> {
    let config = args.method.config();
    config.validate()?;
    let (manifest, _, dets) = load_inputs(&args.data, &args.detections)?;
    let mut inputs = vec![
        ("manifest", args.data.manifest.as_path()),
        ("detections", args.detections.as_path()),
    ];
    let (ids, seed) = match &args.split {
        Some(p) => {
            let split: Split = load_versioned(p)?;
            inputs.push(("split", p.as_path()));
            (Some(split.calibration), Some(split.seed))
        }
        None => (None, args.seed),
    };
    let images = build_records(&manifest, &dets, ids.as_deref(), config.class_id)?;
    let prov = provenance(args, &inputs)?;
    let (mut artifact, infeasible) = match calibrate(&images, &config) {
        Ok(a) => (a, None),
        Err(Error::Infeasible(why)) => (marker_artifact(&images, &config), Some(why.to_string())),
        Err(e) => return Err(e.into()),
    };
    artifact.seed = seed;
    artifact.provenance = Some(prov);
    save_json(&args.out, &artifact)?;
    if let Some(why) = infeasible {
        return Err(InfeasibleExit(format!(
            "{} is infeasible on {} calibration units: {why}; wrote marker artifact {}",
            config.method,
            artifact.n_cal,
            args.out.display()
        ))
        .into());
    }
    eprintln!(
        "{} on {} units: margins {:?} -> {}",
        artifact.method,
        artifact.n_cal,
        artifact.margins.values(),
        args.out.display()
    );
    Ok(())
}

fn marker_artifact(images: &[ImageRecord], config: &CalibrationConfig) -> CalibrationArtifact {
    let n_cal = if config.method.is_boxwise() {
        collect_pairs(images, config).len()
    } else {
        images.len()
    };
    CalibrationArtifact::new(
        config,
        Margins::infeasible_for(config.method),
        n_cal,
        fingerprint_records(images),
    )
}

fn cmd_apply(args: &ApplyArgs) -> anyhow::Result<()> {
    let artifact: CalibrationArtifact = load_versioned(&args.artifact)?;
    check_matching(&artifact, &args.matching, args.force)?;
    let (_, detector, dets) = load_inputs(&args.data, &args.detections)?;
    let mut out = BTreeMap::new();
    for (id, list) in &dets {
        out.insert(id.clone(), artifact.apply(list)?);
    }
    let file = DetectionFile {
        schema_version: SCHEMA_VERSION,
        detector: format!("{detector}+{}", artifact.method),
        detections: out,
        provenance: Some(provenance(
            args,
            &[
                ("artifact", &args.artifact),
                ("manifest", &args.data.manifest),
                ("detections", &args.detections),
            ],
        )?),
    };
    save_json(&args.out, &file)?;
    eprintln!(
        "inflated detections of {} images -> {}",
        file.detections.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let artifact: CalibrationArtifact = load_versioned(&args.artifact)?;
    check_matching(&artifact, &args.matching, args.force)?;
    let (manifest, _, dets) = load_inputs(&args.data, &args.detections)?;
    let mut inputs = vec![
        ("artifact", args.artifact.as_path()),
        ("manifest", args.data.manifest.as_path()),
        ("detections", args.detections.as_path()),
    ];
    let ids = match &args.split {
        Some(p) => {
            let split: Split = load_versioned(p)?;
            inputs.push(("split", p.as_path()));
            Some(split.test)
        }
        None => None,
    };
    let images = build_records(&manifest, &dets, ids.as_deref(), artifact.class_id)?;
    let mut report = evaluate(&images, &artifact)?;
    report.provenance = Some(provenance(args, &inputs)?);
    save_json(&args.out, &report)?;
    if let Some(csv) = &args.csv {
        write_text(
            csv,
            &format!(
                "{}\n{}\n",
                conformal_od::EvalReport::csv_header(),
                report.csv_row()
            ),
        )?;
    }
    if report.infeasible {
        return Err(InfeasibleExit(format!(
            "artifact {} is infeasible; wrote report {}",
            args.artifact.display(),
            args.out.display()
        ))
        .into());
    }
    eprintln!(
        "{}: coverage {:?}, risk {:?}, stretch {:.4} -> {}",
        report.method,
        report.empirical_coverage,
        report.empirical_risk,
        report.mean_stretch,
        args.out.display()
    );
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let mut noise = DetectorNoiseModel::default();
    if let Some(v) = args.sigma {
        noise.sigma = v;
    }
    if let Some(v) = args.sigma_rel {
        noise.sigma_rel = v;
    }
    if let Some(v) = args.scale_sigma {
        noise.scale_sigma = v;
    }
    if let Some(v) = args.p_fn {
        noise.p_fn = v;
    }
    if let Some(v) = args.p_fp {
        noise.p_fp = v;
    }
    if let Some(v) = &args.noise {
        noise.distribution = match v.as_str() {
            "gaussian" => NoiseDistribution::Gaussian,
            "uniform" => NoiseDistribution::Uniform,
            other => return Err(anyhow!("unknown noise distribution {other:?}")),
        };
    }
    let tc = TrialConfig {
        n_trials: args.n_trials,
        scene: SceneParams::default(),
        noise,
        calibration: args.method.config(),
        n_cal: args.n_cal,
        n_test: args.n_test,
        base_seed: args.seed,
    };
    let mut summary = run_trials(&tc)?;
    summary.provenance = Some(Provenance {
        config: serde_json::to_value(&tc)?,
        inputs: BTreeMap::new(),
    });
    save_json(&args.out, &summary)?;
    if let Some(csv) = &args.csv {
        write_text(csv, &summary.to_csv())?;
    }
    eprintln!(
        "{} trials of {}: mean {} {:?} (se {:?}), band [{:.4}, {:.4}], {} infeasible, {} -> {}",
        summary.n_trials,
        summary.method,
        summary.statistic,
        summary.mean,
        summary.std_error,
        summary.band[0],
        summary.band[1],
        summary.n_infeasible,
        if summary.pass { "pass" } else { "fail" },
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Split(a) => cmd_split(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Apply(a) => cmd_apply(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
