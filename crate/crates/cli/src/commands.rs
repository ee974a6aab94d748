use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::Serialize;
use visfit_core::body_model::{make_mini_model, BodyModel};
use visfit_core::evaluation::{EvalExample, MetricsReport};
use visfit_core::fitter::{fit as run_fit, FitConfig, FitProblem, FitResult};
use visfit_core::io::{read_json, write_json, BodyParams, PseudoGtFile};
use visfit_core::objectives::{GMMPrior, GmmPriorFile, Observations};
use visfit_core::projection::VisibilityTriplet;
use visfit_core::synth::{self, pseudo_ground_truth, GroundTruth, PseudoGroundTruth};
use visfit_core::visibility::{load_iuv, write_iuv, VisibilityLabels};

use crate::config::{pick_path, require_file, ConfigFile, ResolvedConfig};
use crate::{CliError, Common};

/// Seed of the shape blendshapes of the built-in model.
const MINI_MODEL_SEED: u64 = 42;

#[derive(Args)]
pub struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    /// GMM pose prior; the prior term is dropped without one.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Observation file; repeat to fit several problems.
    #[arg(long, required = true)]
    obs: Vec<PathBuf>,
    /// Pseudo ground truth whose labels replace the visibility scores of
    /// the matching `--obs`.
    #[arg(long)]
    labels: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Weight every element uniformly.
    #[arg(long)]
    no_visibility: bool,
    #[arg(long)]
    freeze_translation: bool,
}

#[derive(Args)]
pub struct PseudoGtArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    iuv: PathBuf,
    /// Observation file supplying camera, crop box and grid.
    #[arg(long)]
    obs: PathBuf,
    /// Posed body: a fit result or a ground-truth file.
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Body model; the built-in mini model when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of problems, seeded `seed, seed + 1, ...`.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    occluded_fraction: Option<f64>,
    #[arg(long)]
    obs_noise: Option<f64>,
    #[arg(long)]
    iuv_size: Option<usize>,
    #[arg(long)]
    full_visibility: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Fit result; repeat in the same order as `--gt`.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    #[arg(long, required = true)]
    gt: Vec<PathBuf>,
    /// Pseudo ground truth to score against the true labels.
    #[arg(long)]
    labels: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a per-example CSV.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
pub struct ExportObjArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    params: PathBuf,
    /// Output OBJ file.
    #[arg(long)]
    out: PathBuf,
}

fn jobs(common: &Common, cfg: &ConfigFile) -> Result<usize, CliError> {
    let n = common.jobs.or(cfg.jobs).unwrap_or(1);
    if n == 0 {
        return Err(CliError::invalid("--jobs must be at least 1"));
    }
    Ok(n)
}

fn pool(n: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::new("thread_pool", 2, e.to_string()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::new("io", 2, format!("cannot create `{}`: {e}", path.display())))
}

fn write<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_json(path, value)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn require_all<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<(), CliError> {
    paths.into_iter().try_for_each(|p| require_file(p))
}

fn load_model(path: &Path) -> Result<BodyModel, CliError> {
    Ok(BodyModel::load(path)?)
}

fn load_labels(path: &Path) -> Result<PseudoGroundTruth, CliError> {
    let file: PseudoGtFile = read_json(path)?;
    Ok(PseudoGroundTruth::try_from(file)?)
}

fn scores(labels: &[[u8; 3]]) -> Vec<VisibilityTriplet> {
    labels.iter().map(|l| VisibilityTriplet::new(l[0] as f64, l[1] as f64, l[2] as f64)).collect()
}

fn apply_labels(obs: &mut Observations, labels: &VisibilityLabels, path: &Path) -> Result<(), CliError> {
    if labels.joints.len() != obs.joints.coords.len() || labels.vertices.len() != obs.vertices.coords.len() {
        return Err(CliError::new(
            "dimension_mismatch",
            2,
            format!("labels in `{}` do not match the observation sizes", path.display()),
        ));
    }
    obs.joints.visibility = scores(&labels.joints);
    obs.vertices.visibility = scores(&labels.vertices);
    Ok(())
}

fn fit_paths(out: &Path, index: usize, total: usize) -> PathBuf {
    if total == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("fit_{index:03}"))
    }
}

pub fn fit(args: FitArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(args.common.config.as_deref())?;
    let model_path = pick_path(args.model, &cfg.model, "model")?;
    let prior_path = args.prior.or(cfg.prior.clone());
    let out = pick_path(args.out, &cfg.out, "out")?;
    if !args.labels.is_empty() && args.labels.len() != args.obs.len() {
        return Err(CliError::invalid(format!(
            "{} --labels given for {} --obs",
            args.labels.len(),
            args.obs.len()
        )));
    }
    require_all(std::iter::once(&model_path).chain(&prior_path).chain(&args.obs).chain(&args.labels))?;

    let mut config: FitConfig = cfg.fit_config()?;
    if let Some(s) = args.common.seed.or(cfg.seed) {
        config.seed = s;
    }
    if let Some(n) = args.max_iters {
        config.max_iters = n;
    }
    if args.no_visibility {
        config.use_visibility = false;
    }
    if args.freeze_translation {
        config.freeze_translation = true;
    }
    config.validate()?;
    let jobs = jobs(&args.common, &cfg)?;

    let model = load_model(&model_path)?;
    let prior = prior_path.as_deref().map(GMMPrior::load).transpose()?;
    let mut problems: Vec<Observations> = Vec::with_capacity(args.obs.len());
    for (i, path) in args.obs.iter().enumerate() {
        let mut obs: Observations = read_json(path)?;
        if let Some(lp) = args.labels.get(i) {
            apply_labels(&mut obs, &load_labels(lp)?.labels, lp)?;
        }
        obs.validate(&model)?;
        problems.push(obs);
    }

    info!("fitting {} problem(s) on {jobs} thread(s)", problems.len());
    let results: Vec<Result<FitResult, CliError>> = pool(jobs)?.install(|| {
        problems
            .par_iter()
            .map(|obs| {
                let problem = FitProblem {
                    model: &model,
                    prior: prior.as_ref(),
                    observations: obs,
                };
                run_fit(&problem, &config).map_err(CliError::from)
            })
            .collect()
    });

    create_dir(&out)?;
    let total = results.len();
    for (i, r) in results.into_iter().enumerate() {
        let r = r.map_err(|e| CliError::new(e.code, e.exit, format!("{}: {}", args.obs[i].display(), e.message)))?;
        info!(
            "{}: objective {:.6} after {} iterations ({:?})",
            args.obs[i].display(),
            r.final_objective,
            r.iterations,
            r.stop_reason
        );
        let dir = fit_paths(&out, i, total);
        create_dir(&dir)?;
        write(&dir.join("fit_result.json"), &r)?;
        let params = BodyParams {
            theta: r.theta.clone(),
            beta: r.beta.clone(),
            translation: r.translation,
        };
        let (_, vertices) = params.pose_model(&model)?;
        visfit_core::obj::export_obj(dir.join("fitted.obj"), &vertices, &model.faces)?;
    }

    let mut inputs = BTreeMap::new();
    inputs.insert("model", vec![model_path]);
    inputs.insert("obs", args.obs.clone());
    if let Some(p) = prior_path {
        inputs.insert("prior", vec![p]);
    }
    if !args.labels.is_empty() {
        inputs.insert("labels", args.labels.clone());
    }
    write(
        &out.join("resolved_config.json"),
        &ResolvedConfig {
            command: "fit",
            inputs,
            out: out.clone(),
            seed: Some(config.seed),
            jobs,
            count: None,
            fit: Some(config),
            synth: None,
        },
    )
}

pub fn pseudo_gt(args: PseudoGtArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(args.common.config.as_deref())?;
    let model_path = pick_path(args.model, &cfg.model, "model")?;
    let out = pick_path(args.out, &cfg.out, "out")?;
    require_all([&model_path, &args.iuv, &args.obs, &args.params])?;

    let model = load_model(&model_path)?;
    let iuv = load_iuv(&args.iuv)?;
    let obs: Observations = read_json(&args.obs)?;
    let params: BodyParams = read_json(&args.params)?;
    let (_, vertices) = params.pose_model(&model)?;
    let pgt = pseudo_ground_truth(
        &model,
        &iuv,
        &vertices,
        &obs.camera,
        &obs.crop_box,
        &obs.grid,
        obs.root_depth.unwrap_or(params.translation[2]),
    )?;
    let visible = pgt.labels.vertices.iter().filter(|l| l[2] == 1).count();
    info!("{visible} of {} vertices visible", model.num_vertices());

    create_dir(&out)?;
    write(&out.join("pseudo_gt.json"), &PseudoGtFile::from(&pgt))?;
    let mut inputs = BTreeMap::new();
    inputs.insert("model", vec![model_path]);
    inputs.insert("iuv", vec![args.iuv]);
    inputs.insert("obs", vec![args.obs]);
    inputs.insert("params", vec![args.params]);
    write(
        &out.join("resolved_config.json"),
        &ResolvedConfig {
            command: "pseudo-gt",
            inputs,
            out: out.clone(),
            seed: None,
            jobs: 1,
            count: None,
            fit: None,
            synth: None,
        },
    )
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(args.common.config.as_deref())?;
    let model_path = args.model.or(cfg.model.clone());
    let out = pick_path(args.out, &cfg.out, "out")?;
    if let Some(p) = &model_path {
        require_file(p)?;
    }
    let seed = args
        .common
        .seed
        .or(cfg.seed)
        .ok_or_else(|| CliError::new("missing_seed", 2, "synth needs --seed (flag or config file)"))?;
    let count = args.count.or(cfg.count).unwrap_or(1);
    if count == 0 {
        return Err(CliError::invalid("--count must be at least 1"));
    }
    let mut spec = cfg.synth_spec()?;
    spec.seed = seed;
    if let Some(f) = args.occluded_fraction {
        spec.occluded_fraction = f;
    }
    if let Some(n) = args.obs_noise {
        spec.obs_noise = n;
    }
    if let Some(s) = args.iuv_size {
        spec.iuv_size = s;
    }
    if args.full_visibility {
        spec.full_visibility = true;
    }
    spec.validate()?;
    let jobs = jobs(&args.common, &cfg)?;

    let model = match &model_path {
        Some(p) => load_model(p)?,
        None => make_mini_model(0, MINI_MODEL_SEED),
    };
    let seeds: Vec<u64> = (0..count as u64).map(|i| seed.wrapping_add(i)).collect();
    let problems: Vec<_> = pool(jobs)?.install(|| {
        seeds
            .par_iter()
            .map(|&s| synth::generate(&model, &synth::SyntheticProblemSpec { seed: s, ..spec }))
            .collect()
    });

    create_dir(&out)?;
    model.save(out.join("model.json"))?;
    write(&out.join("prior.json"), &GmmPriorFile::from(synth::mini_prior(&model)))?;
    for (i, p) in problems.into_iter().enumerate() {
        let p = p?;
        let dir = if count == 1 { out.clone() } else { out.join(format!("problem_{i:03}")) };
        create_dir(&dir)?;
        write(&dir.join("observations.json"), &p.observations)?;
        write(&dir.join("ground_truth.json"), &p.ground_truth)?;
        write_iuv(dir.join("iuv.png"), &p.iuv)?;
        write(&dir.join("spec.json"), &synth::SyntheticProblemSpec { seed: seeds[i], ..spec })?;
    }
    let mut inputs = BTreeMap::new();
    if let Some(p) = model_path {
        inputs.insert("model", vec![p]);
    }
    write(
        &out.join("resolved_config.json"),
        &ResolvedConfig {
            command: "synth",
            inputs,
            out: out.clone(),
            seed: Some(seed),
            jobs,
            count: Some(count),
            fit: None,
            synth: Some(spec),
        },
    )
}

fn millimeters(points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    points.iter().map(|p| p * 1000.0).collect()
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(args.common.config.as_deref())?;
    let model_path = pick_path(args.model, &cfg.model, "model")?;
    let out = pick_path(args.out, &cfg.out, "out")?;
    if args.pred.len() != args.gt.len() {
        return Err(CliError::invalid(format!("{} --pred given for {} --gt", args.pred.len(), args.gt.len())));
    }
    if !args.labels.is_empty() && args.labels.len() != args.gt.len() {
        return Err(CliError::invalid(format!("{} --labels given for {} --gt", args.labels.len(), args.gt.len())));
    }
    require_all(std::iter::once(&model_path).chain(&args.pred).chain(&args.gt).chain(&args.labels))?;
    let jobs = jobs(&args.common, &cfg)?;
    let model = load_model(&model_path)?;

    let indices: Vec<usize> = (0..args.gt.len()).collect();
    let examples: Vec<Result<_, CliError>> = pool(jobs)?.install(|| {
        indices
            .par_iter()
            .map(|&i| {
                let pred: BodyParams = read_json(&args.pred[i])?;
                let gt: GroundTruth = read_json(&args.gt[i])?;
                let (pj, pv) = pred.pose_model(&model)?;
                let (pj, pv) = (millimeters(&pj), millimeters(&pv));
                let (gj, gv) = (millimeters(&gt.joint_points()), millimeters(&gt.vertex_points()));
                let labels = args.labels.get(i).map(|p| load_labels(p)).transpose()?;
                let example = EvalExample {
                    name: args.pred[i].display().to_string(),
                    pred_joints: &pj,
                    gt_joints: &gj,
                    pred_vertices: &pv,
                    gt_vertices: &gv,
                    root: model.root_joint,
                    labels: labels.as_ref().map(|l| (l.labels.vertices.as_slice(), gt.labels.vertices.as_slice())),
                };
                Ok(example.evaluate()?)
            })
            .collect()
    });
    let examples = examples.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = MetricsReport::from_examples(examples)?;
    info!(
        "MPJPE {:.2} mm, PA-MPJPE {:.2} mm, MPVE {:.2} mm",
        report.mpjpe_mm, report.pa_mpjpe_mm, report.mpve_mm
    );

    create_dir(&out)?;
    write(&out.join("metrics.json"), &report)?;
    if args.csv {
        let path = out.join("metrics.csv");
        fs::write(&path, report.to_csv()).map_err(|e| CliError::new("io", 2, format!("cannot write `{}`: {e}", path.display())))?;
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("model", vec![model_path]);
    inputs.insert("pred", args.pred.clone());
    inputs.insert("gt", args.gt.clone());
    if !args.labels.is_empty() {
        inputs.insert("labels", args.labels.clone());
    }
    write(
        &out.join("resolved_config.json"),
        &ResolvedConfig {
            command: "eval",
            inputs,
            out: out.clone(),
            seed: None,
            jobs,
            count: None,
            fit: None,
            synth: None,
        },
    )
}

pub fn export_obj(args: ExportObjArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(args.common.config.as_deref())?;
    let model_path = pick_path(args.model, &cfg.model, "model")?;
    require_all([&model_path, &args.params])?;
    let model = load_model(&model_path)?;
    let params: BodyParams = read_json(&args.params)?;
    let (_, vertices) = params.pose_model(&model)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    visfit_core::obj::export_obj(&args.out, &vertices, &model.faces)?;
    info!("wrote {}", args.out.display());
    Ok(())
}
