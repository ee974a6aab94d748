//! Test-time fitting of pose, shape and root translation with Adam.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::body_model::rotation::log_map;
use crate::body_model::{BodyModel, PoseParams, ShapeParams};
use crate::error::{Error, Result};
use crate::evaluation::procrustes_align;
use crate::objectives::{total_fit_objective, FitTerms, GMMPrior, LossWeights, ObjectiveOptions, Observations};
use crate::projection::{from_grid, Coord3, VisibilityTriplet};

/// Scores at or above this count as visible when picking joints for the
/// initialization.
pub const INIT_VISIBILITY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iters: usize,
    pub learning_rate: f64,
    /// Per-step multiplier of the learning rate; 1 keeps it constant.
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stop once the best objective improved by less than this fraction
    /// over the last `patience` iterations.
    pub tolerance: f64,
    pub patience: usize,
    pub beta_clamp: f64,
    /// Meters per optimizer unit of the root translation, so one Adam step
    /// moves it by about `learning_rate * translation_scale`.
    pub translation_scale: f64,
    pub weights: LossWeights,
    pub use_visibility: bool,
    pub edge_regularizer: bool,
    /// Keep the initial translation fixed. Only allowed when the
    /// observations carry a root depth.
    pub freeze_translation: bool,
    /// Recorded with the result; the optimizer draws no random numbers.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            learning_rate: 0.03,
            lr_decay: 0.98,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            tolerance: 1e-6,
            patience: 5,
            beta_clamp: 5.0,
            translation_scale: 0.2,
            weights: LossWeights::default(),
            use_visibility: true,
            edge_regularizer: false,
            freeze_translation: false,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be at least 1".into()));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("beta_clamp", self.beta_clamp),
            ("translation_scale", self.translation_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidInput(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::InvalidInput("tolerance must be non-negative".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidInput("patience must be at least 1".into()));
        }
        self.weights.validate()
    }

    fn objective_options(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            use_visibility: self.use_visibility,
            edge_regularizer: self.edge_regularizer,
        }
    }
}

/// Everything a fit needs besides the configuration.
#[derive(Debug, Clone, Copy)]
pub struct FitProblem<'a> {
    pub model: &'a BodyModel,
    pub prior: Option<&'a GMMPrior>,
    pub observations: &'a Observations,
}

impl FitProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        self.observations.validate(self.model)?;
        if let Some(p) = self.prior {
            let dim = 3 * (self.model.num_kin() - 1);
            if p.dim() != dim {
                return Err(Error::dims("prior dimension", dim, p.dim()));
            }
        }
        Ok(())
    }
}

/// Starting point of the optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct InitParams {
    pub pose: PoseParams,
    pub shape: ShapeParams,
    pub translation: Vector3<f64>,
    /// Fewer than 3 usable joints: rotation left at zero.
    pub low_confidence: bool,
}

fn is_visible(s: &VisibilityTriplet) -> bool {
    s.sx >= INIT_VISIBILITY_THRESHOLD && s.sy >= INIT_VISIBILITY_THRESHOLD && s.sz >= INIT_VISIBILITY_THRESHOLD
}

fn back_project(obs: &Observations, c: &Coord3, root_depth: f64) -> Vector3<f64> {
    from_grid(&obs.camera, &obs.grid, &obs.crop_box, c, root_depth)
}

fn rms_radius(points: &[Vector3<f64>]) -> f64 {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector3<f64>>() / n;
    (points.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / n).sqrt()
}

/// Root depth at which the back-projected joints have the spread of the
/// model joints. The spread grows with depth, so bisection applies.
fn estimate_root_depth(obs: &Observations, coords: &[Coord3], target_radius: f64) -> f64 {
    let radius = |z: f64| {
        let pts: Vec<_> = coords.iter().map(|c| back_project(obs, c, z)).collect();
        rms_radius(&pts)
    };
    let (mut lo, mut hi) = (0.05, 1000.0);
    if radius(lo) >= target_radius {
        return lo;
    }
    if radius(hi) <= target_radius {
        return hi;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if radius(mid) < target_radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Deterministic initialization.
///
/// The body pose starts at the heaviest prior mode (zeros without a prior)
/// and the shape at zero. The root depth comes from the observations when
/// present, otherwise from matching joint spreads. The global rotation is
/// the rigid alignment of the model joints onto the visible back-projected
/// joints, and the translation the per-axis median of their offsets.
pub fn init_params(problem: &FitProblem) -> Result<InitParams> {
    let model = problem.model;
    let obs = problem.observations;
    let k = model.num_kin();
    let mut pose = PoseParams::zeros(k);
    if let Some(prior) = problem.prior {
        for (j, c) in prior.dominant_mean().chunks(3).enumerate() {
            pose.theta[j + 1] = [c[0], c[1], c[2]];
        }
    }
    let shape = ShapeParams::zeros(model.num_betas);
    let body = model.forward(&pose, &shape)?;

    let visible: Vec<usize> = (0..model.num_joints).filter(|&j| is_visible(&obs.joints.visibility[j])).collect();
    let low_confidence = visible.len() < 3;
    let used: Vec<usize> = if visible.is_empty() { (0..model.num_joints).collect() } else { visible.clone() };
    let coords: Vec<Coord3> = used.iter().map(|&j| obs.joints.coords[j]).collect();
    let model_joints: Vec<Vector3<f64>> = used.iter().map(|&j| body.joints_out[j]).collect();

    let root_depth = match obs.root_depth {
        Some(z) => z,
        None if used.len() >= 2 => estimate_root_depth(obs, &coords, rms_radius(&model_joints)),
        None => 5.0,
    };
    let observed: Vec<Vector3<f64>> = coords.iter().map(|c| back_project(obs, c, root_depth)).collect();

    let mut rotated = model_joints.clone();
    if !low_confidence {
        if let Ok(sim) = procrustes_align(&model_joints, &observed) {
            let r = log_map(&sim.rotation);
            pose.theta[0] = [r.x, r.y, r.z];
            rotated = model_joints.iter().map(|p| sim.rotation * p).collect();
        }
    }
    let offsets: Vec<Vector3<f64>> = observed.iter().zip(&rotated).map(|(o, m)| o - m).collect();
    let mut translation = Vector3::new(
        median(offsets.iter().map(|d| d.x).collect()),
        median(offsets.iter().map(|d| d.y).collect()),
        median(offsets.iter().map(|d| d.z).collect()),
    );
    if let Some(z) = obs.root_depth {
        translation.z = z;
    }
    Ok(InitParams {
        pose,
        shape,
        translation,
        low_confidence,
    })
}

/// Something Adam can minimize.
pub trait Objective {
    fn dim(&self) -> usize;
    /// Objective value and gradient at `x`.
    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// One bias-corrected update of `x` in place.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            x[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Layout of the flat parameter vector: pose, shape, then translation in
/// units of `translation_scale` meters unless it is frozen.
struct FitObjective<'a> {
    problem: &'a FitProblem<'a>,
    config: &'a FitConfig,
    frozen_translation: Option<Vector3<f64>>,
}

impl FitObjective<'_> {
    fn num_pose(&self) -> usize {
        3 * self.problem.model.num_kin()
    }

    fn unpack(&self, x: &[f64]) -> (PoseParams, ShapeParams, Vector3<f64>) {
        let np = self.num_pose();
        let nb = self.problem.model.num_betas;
        let pose = PoseParams {
            theta: x[..np].chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        };
        let shape = ShapeParams {
            beta: x[np..np + nb].to_vec(),
        };
        let t = self
            .frozen_translation
            .unwrap_or_else(|| Vector3::new(x[np + nb], x[np + nb + 1], x[np + nb + 2]) * self.config.translation_scale);
        (pose, shape, t)
    }

    fn pack(&self, pose: &PoseParams, shape: &ShapeParams, t: &Vector3<f64>) -> Vec<f64> {
        let mut x = pose.flat();
        x.extend(&shape.beta);
        if self.frozen_translation.is_none() {
            x.extend((t / self.config.translation_scale).iter());
        }
        x
    }

    fn evaluate(&self, x: &[f64]) -> Result<(FitTerms, Vec<f64>)> {
        let (pose, shape, t) = self.unpack(x);
        let e = total_fit_objective(
            self.problem.model,
            &pose,
            &shape,
            &t,
            self.problem.observations,
            &self.config.weights,
            self.problem.prior,
            &self.config.objective_options(),
        )?;
        let mut g: Vec<f64> = e.grad.theta.iter().flatten().copied().collect();
        g.extend(&e.grad.beta);
        if self.frozen_translation.is_none() {
            g.extend((e.grad_translation * self.config.translation_scale).iter());
        }
        Ok((e.terms, g))
    }
}

impl Objective for FitObjective<'_> {
    fn dim(&self) -> usize {
        self.num_pose() + self.problem.model.num_betas + if self.frozen_translation.is_some() { 0 } else { 3 }
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evaluate(x).map(|(t, g)| (t.total, g))
    }
}

/// Objective breakdown after `iteration` Adam steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub terms: FitTerms,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    Converged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
    /// Camera-space position of the root joint, meters.
    pub translation: [f64; 3],
    pub final_objective: f64,
    /// Entry 0 is the initialization, entry `i` follows the `i`-th step.
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub low_confidence_init: bool,
    pub config: FitConfig,
}

impl FitResult {
    pub fn pose(&self) -> PoseParams {
        PoseParams::new(self.theta.clone())
    }

    pub fn shape(&self) -> ShapeParams {
        ShapeParams { beta: self.beta.clone() }
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }
}

fn norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_finite(terms: &FitTerms, grad: &[f64]) -> Result<()> {
    if let Some(term) = terms.non_finite() {
        return Err(Error::NonFinite { term: term.into() });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { term: "gradient".into() });
    }
    Ok(())
}

/// True when the objective moved by less than `tolerance` (relative) over
/// the last `patience` steps, in either direction.
fn has_converged(trace: &[TraceEntry], patience: usize, tolerance: f64) -> bool {
    if trace.len() <= patience {
        return false;
    }
    let now = trace[trace.len() - 1].terms.total;
    let then = trace[trace.len() - 1 - patience].terms.total;
    (then - now).abs() < tolerance * then.abs()
}

/// Fits from [`init_params`].
pub fn fit(problem: &FitProblem, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    problem.validate()?;
    let init = init_params(problem)?;
    fit_from(problem, config, &init)
}

/// Fits from a given starting point.
pub fn fit_from(problem: &FitProblem, config: &FitConfig, init: &InitParams) -> Result<FitResult> {
    config.validate()?;
    problem.validate()?;
    if config.freeze_translation && problem.observations.root_depth.is_none() {
        return Err(Error::InvalidInput("freeze_translation needs a root_depth in the observations".into()));
    }
    let objective = FitObjective {
        problem,
        config,
        frozen_translation: config.freeze_translation.then_some(init.translation),
    };
    let np = objective.num_pose();
    let nb = problem.model.num_betas;
    let mut x = objective.pack(&init.pose, &init.shape, &init.translation);
    for b in &mut x[np..np + nb] {
        *b = b.clamp(-config.beta_clamp, config.beta_clamp);
    }

    let (mut terms, mut grad) = objective.evaluate(&x)?;
    check_finite(&terms, &grad)?;
    let mut trace = vec![TraceEntry {
        iteration: 0,
        terms,
        grad_norm: norm(&grad),
    }];
    let mut adam = Adam::new(x.len(), config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut stop_reason = StopReason::MaxIters;
    for it in 1..=config.max_iters {
        adam.lr = config.learning_rate * config.lr_decay.powi(it as i32 - 1);
        adam.step(&mut x, &grad);
        for b in &mut x[np..np + nb] {
            *b = b.clamp(-config.beta_clamp, config.beta_clamp);
        }
        (terms, grad) = objective.evaluate(&x)?;
        check_finite(&terms, &grad)?;
        trace.push(TraceEntry {
            iteration: it,
            terms,
            grad_norm: norm(&grad),
        });
        log::debug!("iter {it}: total {:.6e}", terms.total);
        if has_converged(&trace, config.patience, config.tolerance) {
            stop_reason = StopReason::Converged;
            break;
        }
    }

    let (pose, shape, t) = objective.unpack(&x);
    let pose = PoseParams::new(pose.theta);
    Ok(FitResult {
        theta: pose.theta,
        beta: shape.beta,
        translation: [t.x, t.y, t.z],
        final_objective: terms.total,
        iterations: trace.len() - 1,
        converged: stop_reason == StopReason::Converged,
        stop_reason,
        trace,
        low_confidence_init: init.low_confidence,
        config: *config,
    })
}

/// Minimizes a generic objective with Adam for exactly `iters` steps.
pub fn adam_minimize(objective: &dyn Objective, x0: &[f64], iters: usize, adam: &mut Adam) -> Result<Vec<f64>> {
    if x0.len() != objective.dim() {
        return Err(Error::dims("initial parameters", objective.dim(), x0.len()));
    }
    let mut x = x0.to_vec();
    for _ in 0..iters {
        let (_, g) = objective.value_and_gradient(&x)?;
        adam.step(&mut x, &g);
    }
    Ok(x)
}
