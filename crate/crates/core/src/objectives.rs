//! Loss terms with analytic gradients.
//!
//! Coordinate losses are means over elements; mesh losses (normal, edge,
//! depth ordering) are sums over faces or pixels.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::body_model::{regress_joints, BodyModel, ParamGradient, PoseParams, ShapeParams};
use crate::error::{Error, Result};
use crate::projection::{Coord3, CropBox, HeatmapGrid, PerspectiveCamera, VisibilityTriplet};
use crate::visibility::Correspondence;

/// Denominator floor for weighted means.
pub const WEIGHT_EPS: f64 = 1e-8;
/// Probability clamp for the cross entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Edges shorter than this are skipped by the normal loss.
pub const MIN_EDGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub joint: f64,
    pub vert: f64,
    pub r_joint: f64,
    pub norm: f64,
    pub edge: f64,
    pub vis: f64,
    pub depth: f64,
    pub uv: f64,
    pub smpl: f64,
    pub smpl_vert: f64,
    pub smpl_joint: f64,
    pub prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            joint: 1.0,
            vert: 1.0,
            r_joint: 1.0,
            norm: 0.1,
            edge: 0.1,
            vis: 1.0,
            depth: 0.1,
            uv: 1.0,
            smpl: 1.0,
            smpl_vert: 1.0,
            smpl_joint: 1.0,
            prior: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("joint", self.joint),
            ("vert", self.vert),
            ("r_joint", self.r_joint),
            ("norm", self.norm),
            ("edge", self.edge),
            ("vis", self.vis),
            ("depth", self.depth),
            ("uv", self.uv),
            ("smpl", self.smpl),
            ("smpl_vert", self.smpl_vert),
            ("smpl_joint", self.smpl_joint),
            ("prior", self.prior),
        ];
        for (name, w) in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidInput(format!("loss weight `{name}` must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// A loss value with its gradient. `flagged` marks the degenerate cases
/// documented on each function.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss<G> {
    pub value: f64,
    pub grad: G,
    pub flagged: bool,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_len(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::dims(what, expected.to_string(), actual.to_string()));
    }
    Ok(())
}

/// L1 distance between coordinate sets: mean over all `3N` elements, or
/// `sum w |d| / max(sum w, eps)` with weights. All-zero weights give 0 and
/// set `flagged`.
pub fn l1_coord_loss(pred: &[Vector3<f64>], target: &[Vector3<f64>], weights: Option<&[[f64; 3]]>) -> Result<Loss<Vec<Vector3<f64>>>> {
    check_len("target", pred.len(), target.len())?;
    if let Some(w) = weights {
        check_len("weights", pred.len(), w.len())?;
        if w.iter().flatten().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidInput("loss weights must lie in [0, 1]".into()));
        }
    }
    let weight = |i: usize, a: usize| weights.map_or(1.0, |w| w[i][a]);
    let total: f64 = (0..pred.len()).map(|i| (0..3).map(|a| weight(i, a)).sum::<f64>()).sum();
    let mut grad = vec![Vector3::zeros(); pred.len()];
    if total == 0.0 {
        return Ok(Loss {
            value: 0.0,
            grad,
            flagged: weights.is_some(),
        });
    }
    let denom = total.max(WEIGHT_EPS);
    let mut sum = 0.0;
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        for a in 0..3 {
            let d = p[a] - t[a];
            let w = weight(i, a);
            sum += w * d.abs();
            grad[i][a] = w * sign(d) / denom;
        }
    }
    Ok(Loss {
        value: sum / denom,
        grad,
        flagged: false,
    })
}

/// `l1(W V, J*)`; the gradient is with respect to `V`.
pub fn regressed_joint_loss(
    vertices: &[Vector3<f64>],
    regressor: &[f64],
    target: &[Vector3<f64>],
    weights: Option<&[[f64; 3]]>,
) -> Result<Loss<Vec<Vector3<f64>>>> {
    let joints = regress_joints(vertices, regressor, target.len())?;
    let inner = l1_coord_loss(&joints, target, weights)?;
    Ok(Loss {
        value: inner.value,
        grad: regressor_transpose(regressor, vertices.len(), &inner.grad),
        flagged: inner.flagged,
    })
}

/// `W^T G` for a row-major regressor.
pub fn regressor_transpose(regressor: &[f64], num_vertices: usize, grad_joints: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = vec![Vector3::zeros(); num_vertices];
    for (row, g) in regressor.chunks(num_vertices).zip(grad_joints) {
        if g.iter().all(|x| *x == 0.0) {
            continue;
        }
        for (o, w) in out.iter_mut().zip(row) {
            if *w != 0.0 {
                *o += g * *w;
            }
        }
    }
    out
}

const FACE_EDGES: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];

fn check_faces(faces: &[[usize; 3]], n: usize) -> Result<()> {
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
        return Err(Error::InvalidInput(format!("face {f:?} references a vertex beyond {n}")));
    }
    Ok(())
}

/// `sum_f sum_edges |<e / |e|, n_f*>|`. Edges shorter than [`MIN_EDGE`]
/// contribute nothing and set `flagged`.
pub fn normal_loss(vertices: &[Vector3<f64>], faces: &[[usize; 3]], target_normals: &[Vector3<f64>]) -> Result<Loss<Vec<Vector3<f64>>>> {
    check_len("target_normals", faces.len(), target_normals.len())?;
    check_faces(faces, vertices.len())?;
    if let Some(k) = target_normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-6) {
        return Err(Error::InvalidInput(format!("target normal {k} is not unit length")));
    }
    let mut grad = vec![Vector3::zeros(); vertices.len()];
    let mut value = 0.0;
    let mut flagged = false;
    for (f, n) in faces.iter().zip(target_normals) {
        for (a, b) in FACE_EDGES {
            let (i, j) = (f[a], f[b]);
            let e = vertices[i] - vertices[j];
            let len = e.norm();
            if len < MIN_EDGE {
                flagged = true;
                continue;
            }
            let unit = e / len;
            let c = unit.dot(n);
            value += c.abs();
            // d|<e/|e|, n>| / de = sign(c) (n - unit c) / |e|
            let g = (n - unit * c) * (sign(c) / len);
            grad[i] += g;
            grad[j] -= g;
        }
    }
    Ok(Loss { value, grad, flagged })
}

/// Per-face unit normals (right-hand winding).
pub fn face_normals(vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> Vec<Vector3<f64>> {
    faces
        .iter()
        .map(|f| {
            let n = (vertices[f[1]] - vertices[f[0]]).cross(&(vertices[f[2]] - vertices[f[0]]));
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                Vector3::z()
            }
        })
        .collect()
}

/// Edge-length loss with gradients for both meshes.
pub struct EdgeLoss {
    pub value: f64,
    pub grad: Vec<Vector3<f64>>,
    pub grad_target: Vec<Vector3<f64>>,
}

/// `sum_f sum_edges | |v_i - v_j| - |v*_i - v*_j| |`.
pub fn edge_loss(vertices: &[Vector3<f64>], target: &[Vector3<f64>], faces: &[[usize; 3]]) -> Result<EdgeLoss> {
    check_len("target vertices", vertices.len(), target.len())?;
    check_faces(faces, vertices.len())?;
    let mut out = EdgeLoss {
        value: 0.0,
        grad: vec![Vector3::zeros(); vertices.len()],
        grad_target: vec![Vector3::zeros(); vertices.len()],
    };
    for f in faces {
        for (a, b) in FACE_EDGES {
            let (i, j) = (f[a], f[b]);
            let e = vertices[i] - vertices[j];
            let et = target[i] - target[j];
            let (len, len_t) = (e.norm(), et.norm());
            let d = len - len_t;
            out.value += d.abs();
            let s = sign(d);
            if len > 0.0 {
                let g = e * (s / len);
                out.grad[i] += g;
                out.grad[j] -= g;
            }
            if len_t > 0.0 {
                let g = et * (s / len_t);
                out.grad_target[i] -= g;
                out.grad_target[j] += g;
            }
        }
    }
    Ok(out)
}

/// Mean binary cross entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn visibility_bce(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<Loss<Vec<[f64; 3]>>> {
    check_len("visibility targets", pred.len(), target.len())?;
    let n = (3 * pred.len()).max(1) as f64;
    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; pred.len()];
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        for a in 0..3 {
            let q = p[a].clamp(BCE_EPS, 1.0 - BCE_EPS);
            value -= t[a] * q.ln() + (1.0 - t[a]) * (1.0 - q).ln();
            if p[a] == q {
                grad[i][a] = (q - t[a]) / (q * (1.0 - q)) / n;
            }
        }
    }
    Ok(Loss {
        value: value / n,
        grad,
        flagged: false,
    })
}

/// Depth-ordering loss on grid coordinates.
///
/// Vertices are bucketed by the in-frame grid cell they fall in. In every
/// cell holding vertices of at least two parts, the part of the vertex with
/// the highest z-visibility score is taken as the front part `Q`, and
/// `relu(max_Q z - min_{not Q} z)` is added. Cells are visited row-major.
/// The gradient is with respect to z only (x and y enter through a
/// piecewise-constant bucketing).
pub fn depth_ordering_loss(coords: &[Vector3<f64>], sz: &[f64], parts: &[u8], bins: usize) -> Result<Loss<Vec<Vector3<f64>>>> {
    check_len("z-visibility scores", coords.len(), sz.len())?;
    check_len("part labels", coords.len(), parts.len())?;
    let d = bins as f64;
    let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, c) in coords.iter().enumerate() {
        if (0.0..d).contains(&c.x) && (0.0..d).contains(&c.y) {
            cells.entry((c.y.floor() as i64, c.x.floor() as i64)).or_default().push(i);
        }
    }
    let mut grad = vec![Vector3::zeros(); coords.len()];
    let mut value = 0.0;
    for members in cells.values() {
        if members.len() < 2 {
            continue;
        }
        let front = members.iter().copied().fold(members[0], |best, i| if sz[i] > sz[best] { i } else { best });
        let front_part = parts[front];
        let mut deepest: Option<usize> = None;
        let mut nearest: Option<usize> = None;
        for &i in members {
            if parts[i] == front_part {
                if deepest.is_none_or(|b| coords[i].z > coords[b].z) {
                    deepest = Some(i);
                }
            } else if nearest.is_none_or(|b| coords[i].z < coords[b].z) {
                nearest = Some(i);
            }
        }
        let (Some(q), Some(r)) = (deepest, nearest) else {
            continue;
        };
        let arg = coords[q].z - coords[r].z;
        if arg > 0.0 {
            value += arg;
            grad[q].z += 1.0;
            grad[r].z -= 1.0;
        }
    }
    Ok(Loss {
        value,
        grad,
        flagged: false,
    })
}

/// UV correspondence loss value and gradients.
pub struct UvLoss {
    pub value: f64,
    pub grad: Vec<Vector3<f64>>,
    pub grad_sz: Vec<f64>,
}

/// Center of pixel `(x, y)` of a `width x height` map in grid units.
pub fn map_pixel_to_grid(p: [f64; 2], width: usize, height: usize, bins: usize) -> [f64; 2] {
    let d = bins as f64;
    [(p[0] + 0.5) / width as f64 * d, (p[1] + 0.5) / height as f64 * d]
}

/// `sum_v sz(v) |v_xy - centroid(M_V(v))|_1` over vertices with at least one
/// mapped pixel. Pixel positions are converted to grid units through the
/// map size.
pub fn uv_correspondence_loss(
    coords: &[Vector3<f64>],
    sz: &[f64],
    corr: &Correspondence,
    map_size: (usize, usize),
    bins: usize,
) -> Result<UvLoss> {
    check_len("z-visibility scores", coords.len(), sz.len())?;
    check_len("correspondence vertices", coords.len(), corr.vertex_to_pixel.len())?;
    let mut out = UvLoss {
        value: 0.0,
        grad: vec![Vector3::zeros(); coords.len()],
        grad_sz: vec![0.0; coords.len()],
    };
    for (v, c) in coords.iter().enumerate() {
        let Some(centroid) = corr.centroid(v) else {
            continue;
        };
        let g = map_pixel_to_grid(centroid, map_size.0, map_size.1, bins);
        let (dx, dy) = (c.x - g[0], c.y - g[1]);
        let dist = dx.abs() + dy.abs();
        out.value += sz[v] * dist;
        out.grad_sz[v] = dist;
        out.grad[v].x = sz[v] * sign(dx);
        out.grad[v].y = sz[v] * sign(dy);
    }
    Ok(out)
}

/// `|theta - theta*|_1 + |beta - beta*|_1`.
pub fn smpl_param_loss(theta: &[[f64; 3]], beta: &[f64], theta_target: &[[f64; 3]], beta_target: &[f64]) -> Result<Loss<ParamGradient>> {
    check_len("target pose joints", theta.len(), theta_target.len())?;
    check_len("target betas", beta.len(), beta_target.len())?;
    let mut value = 0.0;
    let mut grad = ParamGradient {
        theta: vec![[0.0; 3]; theta.len()],
        beta: vec![0.0; beta.len()],
    };
    for (j, (a, b)) in theta.iter().zip(theta_target).enumerate() {
        for k in 0..3 {
            value += (a[k] - b[k]).abs();
            grad.theta[j][k] = sign(a[k] - b[k]);
        }
    }
    for (i, (a, b)) in beta.iter().zip(beta_target).enumerate() {
        value += (a - b).abs();
        grad.beta[i] = sign(a - b);
    }
    Ok(Loss {
        value,
        grad,
        flagged: false,
    })
}

/// On-disk form of a Gaussian mixture prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPriorFile {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

/// Gaussian mixture over the body pose (all joints but the root, flattened).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmPriorFile", into = "GmmPriorFile")]
pub struct GMMPrior {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    precisions: Vec<DMatrix<f64>>,
    log_norms: Vec<f64>,
}

impl TryFrom<GmmPriorFile> for GMMPrior {
    type Error = Error;

    fn try_from(file: GmmPriorFile) -> Result<Self> {
        let k = file.weights.len();
        if k == 0 {
            return Err(Error::InvalidInput("prior has no components".into()));
        }
        check_len("prior means", k, file.means.len())?;
        check_len("prior covariances", k, file.covariances.len())?;
        if file.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("prior weights must be finite and non-negative".into()));
        }
        let total: f64 = file.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("prior weights sum to {total}, expected 1")));
        }
        let dim = file.means[0].len();
        let mut prior = GMMPrior {
            weights: file.weights.clone(),
            means: Vec::with_capacity(k),
            covariances: Vec::with_capacity(k),
            precisions: Vec::with_capacity(k),
            log_norms: Vec::with_capacity(k),
        };
        for c in 0..k {
            check_len(&format!("prior mean {c}"), dim, file.means[c].len())?;
            check_len(&format!("prior covariance {c} rows"), dim, file.covariances[c].len())?;
            for row in &file.covariances[c] {
                check_len(&format!("prior covariance {c} columns"), dim, row.len())?;
            }
            let cov = DMatrix::from_fn(dim, dim, |i, j| file.covariances[c][i][j]);
            let scale = cov.amax().max(1.0);
            if (&cov - cov.transpose()).amax() > 1e-9 * scale {
                return Err(Error::InvalidInput(format!("prior covariance {c} is not symmetric")));
            }
            let chol = cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::InvalidInput(format!("prior covariance {c} is not positive definite")))?;
            let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
            prior.log_norms.push(
                file.weights[c].ln() - 0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln() - log_det_half,
            );
            prior.precisions.push(chol.inverse());
            prior.means.push(DVector::from_vec(file.means[c].clone()));
            prior.covariances.push(cov);
        }
        Ok(prior)
    }
}

impl From<GMMPrior> for GmmPriorFile {
    fn from(p: GMMPrior) -> Self {
        GmmPriorFile {
            weights: p.weights,
            means: p.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: p
                .covariances
                .iter()
                .map(|c| (0..c.nrows()).map(|i| c.row(i).iter().copied().collect()).collect())
                .collect(),
        }
    }
}

impl GMMPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        GmmPriorFile {
            weights,
            means,
            covariances,
        }
        .try_into()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file: GmmPriorFile = crate::io::read_json(path)?;
        file.try_into().map_err(|e: Error| match e {
            Error::InvalidInput(m) | Error::DimensionMismatch { what: m, .. } => Error::InvalidModel {
                path: path.display().to_string(),
                message: m,
            },
            other => other,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.means[k].as_slice()
    }

    /// Mean of the heaviest component (lowest index on ties).
    pub fn dominant_mean(&self) -> &[f64] {
        let k = (0..self.weights.len()).fold(0, |b, k| if self.weights[k] > self.weights[b] { k } else { b });
        self.mean(k)
    }
}

/// `-log sum_k w_k N(theta; mu_k, Sigma_k)` via log-sum-exp, with its gradient.
pub fn gmm_nll(theta_body: &[f64], prior: &GMMPrior) -> Result<Loss<Vec<f64>>> {
    check_len("pose for prior", prior.dim(), theta_body.len())?;
    let x = DVector::from_column_slice(theta_body);
    let mut logs = Vec::with_capacity(prior.num_components());
    let mut pulls = Vec::with_capacity(prior.num_components());
    for k in 0..prior.num_components() {
        let r = &x - &prior.means[k];
        let pr = &prior.precisions[k] * &r;
        logs.push(prior.log_norms[k] - 0.5 * r.dot(&pr));
        pulls.push(pr);
    }
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs.iter().map(|l| (l - m).exp()).sum();
    let lse = m + sum.ln();
    let mut grad = DVector::zeros(x.len());
    for (l, pr) in logs.iter().zip(&pulls) {
        grad += pr * ((l - lse).exp());
    }
    Ok(Loss {
        value: -lse,
        grad: grad.iter().copied().collect(),
        flagged: false,
    })
}

/// Observed coordinates and visibility scores for one element set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ElementObservations {
    pub coords: Vec<Coord3>,
    pub visibility: Vec<VisibilityTriplet>,
}

impl ElementObservations {
    pub fn validate(&self, what: &str, expected: usize) -> Result<()> {
        check_len(&format!("{what}.coords"), expected, self.coords.len())?;
        check_len(&format!("{what}.visibility"), expected, self.visibility.len())?;
        if self.coords.iter().any(|c| !(c.x.is_finite() && c.y.is_finite() && c.z.is_finite())) {
            return Err(Error::InvalidInput(format!("{what}.coords contain non-finite values")));
        }
        if !self.visibility.iter().all(VisibilityTriplet::is_valid) {
            return Err(Error::InvalidInput(format!("{what}.visibility must lie in [0, 1]")));
        }
        Ok(())
    }
}

/// Grid-space observations of one person, as predicted by the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub grid: HeatmapGrid,
    pub camera: PerspectiveCamera,
    pub crop_box: CropBox,
    /// Trusted root depth in meters, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_depth: Option<f64>,
    pub joints: ElementObservations,
    pub vertices: ElementObservations,
}

impl Observations {
    pub fn validate(&self, model: &BodyModel) -> Result<()> {
        self.grid.validate()?;
        self.camera.validate()?;
        self.crop_box.validate()?;
        if let Some(z) = self.root_depth {
            if !(z.is_finite() && z > 0.0) {
                return Err(Error::InvalidInput(format!("root_depth must be positive, got {z}")));
            }
        }
        self.joints.validate("joints", model.num_joints)?;
        self.vertices.validate("vertices", model.num_vertices())
    }
}

/// Per-element weights from visibility scores. A depth-occluded element is
/// gated on every axis; truncation additionally gates its own axis.
pub fn visibility_weights(vis: &[VisibilityTriplet], use_visibility: bool) -> Vec<[f64; 3]> {
    vis.iter()
        .map(|s| {
            if use_visibility {
                [s.sx * s.sz, s.sy * s.sz, s.sz]
            } else {
                [1.0; 3]
            }
        })
        .collect()
}

/// Maps root-relative model points plus a camera-space root translation
/// into grid units.
#[derive(Debug, Clone, Copy)]
pub struct GridMapping {
    pub camera: PerspectiveCamera,
    pub crop: CropBox,
    pub grid: HeatmapGrid,
}

impl GridMapping {
    pub fn from_observations(obs: &Observations) -> Self {
        Self {
            camera: obs.camera,
            crop: obs.crop_box,
            grid: obs.grid,
        }
    }

    /// Grid coordinate of `v + t`, with depth taken relative to `t.z`.
    pub fn map(&self, v: &Vector3<f64>, t: &Vector3<f64>) -> Result<Vector3<f64>> {
        Ok(self.map_with_jacobian(v, t)?.0)
    }

    /// Grid coordinate plus the Jacobians with respect to `v` and `t`.
    pub fn map_with_jacobian(&self, v: &Vector3<f64>, t: &Vector3<f64>) -> Result<(Vector3<f64>, Matrix3<f64>, Matrix3<f64>)> {
        let p = v + t;
        if !(p.z > 1e-6) {
            return Err(Error::BehindCamera(p.z));
        }
        let d = self.grid.size();
        let sx = self.camera.focal[0] / self.crop.width * d;
        let sy = self.camera.focal[1] / self.crop.height * d;
        let ox = (self.camera.principal[0] - self.crop.x0) / self.crop.width * d;
        let oy = (self.camera.principal[1] - self.crop.y0) / self.crop.height * d;
        let dz = self.grid.depth_scale();
        let g = Vector3::new(sx * p.x / p.z + ox, sy * p.y / p.z + oy, v.z * dz + 0.5 * d);
        let inv = 1.0 / p.z;
        let jp = Matrix3::new(
            sx * inv,
            0.0,
            -sx * p.x * inv * inv,
            0.0,
            sy * inv,
            -sy * p.y * inv * inv,
            0.0,
            0.0,
            0.0,
        );
        let mut jv = jp;
        jv[(2, 2)] = dz;
        Ok((g, jv, jp))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOptions {
    pub use_visibility: bool,
    pub edge_regularizer: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            use_visibility: true,
            edge_regularizer: false,
        }
    }
}

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitTerms {
    pub smpl_vert: f64,
    pub smpl_joint: f64,
    pub prior: f64,
    pub edge: f64,
    pub total: f64,
}

impl FitTerms {
    /// Name of the first non-finite entry.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("smpl_vert", self.smpl_vert),
            ("smpl_joint", self.smpl_joint),
            ("prior", self.prior),
            ("edge", self.edge),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitEvaluation {
    pub terms: FitTerms,
    pub grad: ParamGradient,
    pub grad_translation: Vector3<f64>,
}

/// Weighted fitting objective over pose, shape and root translation:
/// visibility-weighted L1 between the model's grid-space vertices/joints and
/// the observations, the pose prior, and an optional edge regularizer
/// against the shaped template.
#[allow(clippy::too_many_arguments)]
pub fn total_fit_objective(
    model: &BodyModel,
    pose: &PoseParams,
    shape: &ShapeParams,
    translation: &Vector3<f64>,
    obs: &Observations,
    weights: &LossWeights,
    prior: Option<&GMMPrior>,
    options: &ObjectiveOptions,
) -> Result<FitEvaluation> {
    let nv = model.num_vertices();
    let (body, cache) = model.forward_with_cache(pose, shape)?;
    let mapping = GridMapping::from_observations(obs);

    let mut vgrid = Vec::with_capacity(nv);
    let mut vjac = Vec::with_capacity(nv);
    for v in &body.vertices {
        let (g, jv, jt) = mapping.map_with_jacobian(v, translation)?;
        vgrid.push(g);
        vjac.push((jv, jt));
    }
    let mut jgrid = Vec::with_capacity(body.joints_out.len());
    let mut jjac = Vec::with_capacity(body.joints_out.len());
    for j in &body.joints_out {
        let (g, jv, jt) = mapping.map_with_jacobian(j, translation)?;
        jgrid.push(g);
        jjac.push((jv, jt));
    }

    let v_target: Vec<Vector3<f64>> = obs.vertices.coords.iter().map(|c| c.to_vector()).collect();
    let j_target: Vec<Vector3<f64>> = obs.joints.coords.iter().map(|c| c.to_vector()).collect();
    let vw = visibility_weights(&obs.vertices.visibility, options.use_visibility);
    let jw = visibility_weights(&obs.joints.visibility, options.use_visibility);
    let lv = l1_coord_loss(&vgrid, &v_target, Some(&vw))?;
    let lj = l1_coord_loss(&jgrid, &j_target, Some(&jw))?;

    let mut grad_vertices = vec![Vector3::zeros(); nv];
    let mut grad_t = Vector3::zeros();
    for (i, g) in lv.grad.iter().enumerate() {
        let g = g * weights.smpl_vert;
        grad_vertices[i] += vjac[i].0.transpose() * g;
        grad_t += vjac[i].1.transpose() * g;
    }
    let mut grad_joints = vec![Vector3::zeros(); jgrid.len()];
    for (i, g) in lj.grad.iter().enumerate() {
        let g = g * weights.smpl_joint;
        grad_joints[i] = jjac[i].0.transpose() * g;
        grad_t += jjac[i].1.transpose() * g;
    }
    for (gv, gj) in grad_vertices.iter_mut().zip(regressor_transpose(&model.joint_regressor, nv, &grad_joints)) {
        *gv += gj;
    }

    let mut edge_value = 0.0;
    let mut beta_from_target = vec![0.0; model.num_betas];
    if options.edge_regularizer {
        let shaped = model.shaped_template(shape)?;
        let e = edge_loss(&body.vertices, &shaped, &model.faces)?;
        edge_value = e.value;
        for (gv, g) in grad_vertices.iter_mut().zip(&e.grad) {
            *gv += g * weights.edge;
        }
        // shaped = T + S beta
        let nb = model.num_betas;
        for (i, g) in e.grad_target.iter().enumerate() {
            for a in 0..3 {
                if g[a] == 0.0 {
                    continue;
                }
                let row = &model.shape_dirs[(i * 3 + a) * nb..(i * 3 + a + 1) * nb];
                for (b, s) in beta_from_target.iter_mut().zip(row) {
                    *b += weights.edge * g[a] * s;
                }
            }
        }
    }

    let mut grad = model.backward(&cache, &grad_vertices);
    for (g, extra) in grad.beta.iter_mut().zip(&beta_from_target) {
        *g += extra;
    }

    let mut prior_value = 0.0;
    if let Some(prior) = prior {
        let body_pose: Vec<f64> = pose.theta.iter().skip(1).flatten().copied().collect();
        let p = gmm_nll(&body_pose, prior)?;
        prior_value = p.value;
        for (j, chunk) in p.grad.chunks(3).enumerate() {
            for a in 0..3 {
                grad.theta[j + 1][a] += weights.prior * chunk[a];
            }
        }
    }

    let total = weights.smpl_vert * lv.value
        + weights.smpl_joint * lj.value
        + weights.prior * prior_value
        + if options.edge_regularizer { weights.edge * edge_value } else { 0.0 };
    Ok(FitEvaluation {
        terms: FitTerms {
            smpl_vert: lv.value,
            smpl_joint: lj.value,
            prior: prior_value,
            edge: edge_value,
            total,
        },
        grad,
        grad_translation: grad_t,
    })
}
