//! Parametric articulated body model.
//!
//! A [`BodyModel`] maps pose (per-joint axis-angle rotations) and shape
//! (blendshape coefficients) to a skinned mesh. Outputs are root-relative:
//! the root kinematic joint sits at the origin after skinning.

mod io;
mod mini;
pub mod rotation;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::BodyModelFile;
pub use mini::make_mini_model;
pub use rotation::{canonicalize, rodrigues};

/// Sentinel parent index of the root kinematic joint.
pub const ROOT_PARENT: i64 = -1;

/// Immutable body model asset.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    pub template_vertices: Vec<Vector3<f64>>,
    /// Row-major `N_V x 3 x N_beta`.
    pub shape_dirs: Vec<f64>,
    pub num_betas: usize,
    /// Optional pose-corrective blendshapes, row-major `N_V x 3 x 9(N_K - 1)`.
    /// Empty when absent.
    pub pose_dirs: Vec<f64>,
    pub faces: Vec<[usize; 3]>,
    pub kin_parents: Vec<Option<usize>>,
    /// Row-major `N_K x N_V`.
    pub kin_regressor: Vec<f64>,
    /// Row-major `N_V x N_K`.
    pub skin_weights: Vec<f64>,
    /// Row-major `N_J x N_V`.
    pub joint_regressor: Vec<f64>,
    pub num_joints: usize,
    /// Body-part id per vertex, in `1..=num_parts`.
    pub part_labels: Vec<u8>,
    pub vertex_uv: Vec<[f64; 2]>,
    /// Output joint used for root alignment in evaluation.
    pub root_joint: usize,
}

/// Per-joint axis-angle pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub theta: Vec<[f64; 3]>,
}

impl PoseParams {
    pub fn zeros(num_kin: usize) -> Self {
        Self {
            theta: vec![[0.0; 3]; num_kin],
        }
    }

    /// Builds a pose from axis-angle triples, wrapping every norm into `[0, 2pi)`.
    pub fn new(theta: Vec<[f64; 3]>) -> Self {
        let theta = theta
            .into_iter()
            .map(|t| {
                let c = canonicalize(&Vector3::from(t));
                [c.x, c.y, c.z]
            })
            .collect();
        Self { theta }
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self::new(flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.theta.iter().flatten().copied().collect()
    }

    pub fn joint(&self, j: usize) -> Vector3<f64> {
        Vector3::from(self.theta[j])
    }
}

/// Shape blendshape coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub beta: Vec<f64>,
}

impl ShapeParams {
    pub fn zeros(num_betas: usize) -> Self {
        Self {
            beta: vec![0.0; num_betas],
        }
    }
}

/// Output of [`BodyModel::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct PosedBody {
    pub vertices: Vec<Vector3<f64>>,
    pub joints_kin: Vec<Vector3<f64>>,
    pub joints_out: Vec<Vector3<f64>>,
}

/// Intermediate quantities of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    shaped: Vec<Vector3<f64>>,
    rest_joints: Vec<Vector3<f64>>,
    local_jac: Vec<[Matrix3<f64>; 3]>,
    local_rot: Vec<Matrix3<f64>>,
    global_rot: Vec<Matrix3<f64>>,
}

/// Gradient of a scalar with respect to pose and shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
}

/// `W * V` for a row-major `rows x V.len()` matrix.
pub fn regress_joints(vertices: &[Vector3<f64>], regressor: &[f64], rows: usize) -> Result<Vec<Vector3<f64>>> {
    let n = vertices.len();
    if regressor.len() != rows * n {
        return Err(Error::dims(
            "regressor",
            format!("{rows}x{n}"),
            format!("{} entries", regressor.len()),
        ));
    }
    Ok(regressor
        .chunks(n)
        .map(|row| {
            row.iter()
                .zip(vertices)
                .fold(Vector3::zeros(), |acc, (w, v)| acc + v * *w)
        })
        .collect())
}

impl BodyModel {
    pub fn num_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn num_kin(&self) -> usize {
        self.kin_parents.len()
    }

    pub fn num_parts(&self) -> usize {
        self.part_labels.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn has_pose_dirs(&self) -> bool {
        !self.pose_dirs.is_empty()
    }

    fn pose_feature_len(&self) -> usize {
        9 * self.num_kin().saturating_sub(1)
    }

    pub fn skin_weight(&self, vertex: usize, joint: usize) -> f64 {
        self.skin_weights[vertex * self.num_kin() + joint]
    }

    /// Kinematic joint with the largest skinning weight for each vertex
    /// (lowest index on ties).
    pub fn dominant_joint(&self) -> Vec<usize> {
        let k = self.num_kin();
        self.skin_weights
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (j, w) in row.iter().enumerate() {
                    if *w > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Kinematic joints ordered so every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let k = self.num_kin();
        let mut order = Vec::with_capacity(k);
        let mut placed = vec![false; k];
        while order.len() < k {
            let before = order.len();
            for j in 0..k {
                if placed[j] {
                    continue;
                }
                let ready = match self.kin_parents[j] {
                    None => true,
                    Some(p) => placed[p],
                };
                if ready {
                    placed[j] = true;
                    order.push(j);
                }
            }
            if order.len() == before {
                // cyclic; validate() rejects these models
                break;
            }
        }
        order
    }

    /// Template plus shape blendshapes.
    pub fn shaped_template(&self, shape: &ShapeParams) -> Result<Vec<Vector3<f64>>> {
        if shape.beta.len() != self.num_betas {
            return Err(Error::dims("shape.beta", self.num_betas, shape.beta.len()));
        }
        let nb = self.num_betas;
        Ok(self
            .template_vertices
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut v = *t;
                for a in 0..3 {
                    let base = (i * 3 + a) * nb;
                    v[a] += self.shape_dirs[base..base + nb]
                        .iter()
                        .zip(&shape.beta)
                        .map(|(d, b)| d * b)
                        .sum::<f64>();
                }
                v
            })
            .collect())
    }

    pub fn forward(&self, pose: &PoseParams, shape: &ShapeParams) -> Result<PosedBody> {
        self.forward_with_cache(pose, shape).map(|(body, _)| body)
    }

    /// Forward pass that also returns what [`BodyModel::backward`] needs.
    pub fn forward_with_cache(&self, pose: &PoseParams, shape: &ShapeParams) -> Result<(PosedBody, ForwardCache)> {
        let k = self.num_kin();
        if pose.theta.len() != k {
            return Err(Error::dims("pose.theta", format!("{k}x3"), format!("{}x3", pose.theta.len())));
        }
        if pose.theta.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("pose contains non-finite values".into()));
        }
        let shaped = self.shaped_template(shape)?;
        let rest_joints = regress_joints(&shaped, &self.kin_regressor, k)?;

        let mut local_rot = Vec::with_capacity(k);
        let mut local_jac = Vec::with_capacity(k);
        for j in 0..k {
            let (r, d) = rotation::rodrigues_with_jacobian(&pose.joint(j));
            local_rot.push(r);
            local_jac.push(d);
        }

        let mut global_rot = vec![Matrix3::identity(); k];
        let mut global_t = vec![Vector3::zeros(); k];
        for j in self.topological_order() {
            match self.kin_parents[j] {
                None => {
                    global_rot[j] = local_rot[j];
                    global_t[j] = rest_joints[j];
                }
                Some(p) => {
                    global_rot[j] = global_rot[p] * local_rot[j];
                    global_t[j] = global_rot[p] * (rest_joints[j] - rest_joints[p]) + global_t[p];
                }
            }
        }

        let posed_input = self.apply_pose_dirs(&shaped, &local_rot);
        let root = self.root_kin();
        let origin = global_t[root];
        let vertices: Vec<Vector3<f64>> = posed_input
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut v = Vector3::zeros();
                for j in 0..k {
                    let w = self.skin_weights[i * k + j];
                    if w != 0.0 {
                        v += (global_rot[j] * (x - rest_joints[j]) + global_t[j]) * w;
                    }
                }
                v - origin
            })
            .collect();
        let joints_kin = global_t.iter().map(|t| t - origin).collect();
        let joints_out = regress_joints(&vertices, &self.joint_regressor, self.num_joints)?;

        let cache = ForwardCache {
            shaped,
            rest_joints,
            local_jac,
            local_rot,
            global_rot,
        };
        Ok((
            PosedBody {
                vertices,
                joints_kin,
                joints_out,
            },
            cache,
        ))
    }

    fn root_kin(&self) -> usize {
        self.kin_parents.iter().position(|p| p.is_none()).unwrap_or(0)
    }

    fn apply_pose_dirs(&self, shaped: &[Vector3<f64>], local_rot: &[Matrix3<f64>]) -> Vec<Vector3<f64>> {
        if !self.has_pose_dirs() {
            return shaped.to_vec();
        }
        let feat = self.pose_feature(local_rot);
        let p = feat.len();
        shaped
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut v = *s;
                for a in 0..3 {
                    let base = (i * 3 + a) * p;
                    v[a] += self.pose_dirs[base..base + p]
                        .iter()
                        .zip(&feat)
                        .map(|(d, f)| d * f)
                        .sum::<f64>();
                }
                v
            })
            .collect()
    }

    /// Flattened `R_j - I` for every non-root joint.
    fn pose_feature(&self, local_rot: &[Matrix3<f64>]) -> Vec<f64> {
        let root = self.root_kin();
        let mut feat = Vec::with_capacity(self.pose_feature_len());
        for (j, r) in local_rot.iter().enumerate() {
            if j == root {
                continue;
            }
            let d = r - Matrix3::identity();
            for a in 0..3 {
                for b in 0..3 {
                    feat.push(d[(a, b)]);
                }
            }
        }
        feat
    }

    /// Reverse-mode pass: given the gradient of a scalar with respect to the
    /// posed (root-relative) vertices, returns the gradient with respect to
    /// pose and shape.
    pub fn backward(&self, cache: &ForwardCache, grad_vertices: &[Vector3<f64>]) -> ParamGradient {
        let k = self.num_kin();
        let nv = self.num_vertices();
        let root = self.root_kin();
        let posed_input = self.apply_pose_dirs(&cache.shaped, &cache.local_rot);

        let mut d_grot = vec![Matrix3::zeros(); k];
        let mut d_gt = vec![Vector3::zeros(); k];
        let mut d_joint = vec![Vector3::zeros(); k];
        let mut d_input = vec![Vector3::zeros(); nv];

        // v_i = sum_j w_ij (G_j (x_i - J_j) + t_j) - t_root
        let mut g_sum = Vector3::zeros();
        for (i, g) in grad_vertices.iter().enumerate() {
            g_sum += g;
            let x = posed_input[i];
            for j in 0..k {
                let w = self.skin_weights[i * k + j];
                if w == 0.0 {
                    continue;
                }
                let wg = g * w;
                let rel = x - cache.rest_joints[j];
                d_grot[j] += wg * rel.transpose();
                let back = cache.global_rot[j].transpose() * wg;
                d_input[i] += back;
                d_joint[j] -= back;
                d_gt[j] += wg;
            }
        }
        d_gt[root] -= g_sum;

        let mut d_local = vec![Matrix3::zeros(); k];
        for &j in self.topological_order().iter().rev() {
            match self.kin_parents[j] {
                None => {
                    d_local[j] += d_grot[j];
                    d_joint[j] += d_gt[j];
                }
                Some(p) => {
                    let gp = cache.global_rot[p];
                    let offset = cache.rest_joints[j] - cache.rest_joints[p];
                    let dt = d_gt[j];
                    d_grot[p] += dt * offset.transpose();
                    let back = gp.transpose() * dt;
                    d_joint[j] += back;
                    d_joint[p] -= back;
                    d_gt[p] += dt;
                    let dg = d_grot[j];
                    d_grot[p] += dg * cache.local_rot[j].transpose();
                    d_local[j] += gp.transpose() * dg;
                }
            }
        }

        if self.has_pose_dirs() {
            let p = self.pose_feature_len();
            let mut d_feat = vec![0.0; p];
            for (i, g) in d_input.iter().enumerate() {
                for a in 0..3 {
                    let base = (i * 3 + a) * p;
                    for (df, d) in d_feat.iter_mut().zip(&self.pose_dirs[base..base + p]) {
                        *df += g[a] * d;
                    }
                }
            }
            let mut slot = 0;
            for (j, dl) in d_local.iter_mut().enumerate() {
                if j == root {
                    continue;
                }
                for a in 0..3 {
                    for b in 0..3 {
                        dl[(a, b)] += d_feat[slot * 9 + a * 3 + b];
                    }
                }
                slot += 1;
            }
        }

        // rest joints come from the shaped template through the kinematic regressor
        let mut d_shaped = d_input;
        for (j, dj) in d_joint.iter().enumerate() {
            let row = &self.kin_regressor[j * nv..(j + 1) * nv];
            for (ds, w) in d_shaped.iter_mut().zip(row) {
                if *w != 0.0 {
                    *ds += dj * *w;
                }
            }
        }

        let nb = self.num_betas;
        let mut beta = vec![0.0; nb];
        for (i, ds) in d_shaped.iter().enumerate() {
            for a in 0..3 {
                let base = (i * 3 + a) * nb;
                for (b, d) in beta.iter_mut().zip(&self.shape_dirs[base..base + nb]) {
                    *b += ds[a] * d;
                }
            }
        }

        let theta = d_local
            .iter()
            .zip(&cache.local_jac)
            .map(|(dl, jac)| {
                let mut out = [0.0; 3];
                for (o, dr) in out.iter_mut().zip(jac) {
                    *o = dl.component_mul(dr).sum();
                }
                out
            })
            .collect();

        ParamGradient { theta, beta }
    }

    /// Checks every structural invariant; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let nv = self.num_vertices();
        let k = self.num_kin();
        if nv == 0 {
            return Err(Error::model("template_vertices", "model has no vertices"));
        }
        if k == 0 {
            return Err(Error::model("kin_parents", "model has no kinematic joints"));
        }
        if self.template_vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::model("template_vertices", "non-finite coordinate"));
        }
        if self.shape_dirs.len() != nv * 3 * self.num_betas {
            return Err(Error::model(
                "shape_dirs",
                format!("expected {}x3x{} entries, got {}", nv, self.num_betas, self.shape_dirs.len()),
            ));
        }
        if !self.pose_dirs.is_empty() && self.pose_dirs.len() != nv * 3 * self.pose_feature_len() {
            return Err(Error::model(
                "pose_dirs",
                format!("expected {}x3x{} entries, got {}", nv, self.pose_feature_len(), self.pose_dirs.len()),
            ));
        }
        for (f, face) in self.faces.iter().enumerate() {
            for (c, &idx) in face.iter().enumerate() {
                if idx >= nv {
                    return Err(Error::model(
                        format!("faces[{f}][{c}]"),
                        format!("vertex index {idx} out of range (N_V = {nv})"),
                    ));
                }
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(Error::model(format!("faces[{f}]"), "repeated vertex index"));
            }
        }
        self.validate_tree()?;
        if self.kin_regressor.len() != k * nv {
            return Err(Error::model("kin_regressor", format!("expected {k}x{nv} entries")));
        }
        if self.skin_weights.len() != nv * k {
            return Err(Error::model("skin_weights", format!("expected {nv}x{k} entries")));
        }
        for (i, row) in self.skin_weights.chunks(k).enumerate() {
            if row.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                return Err(Error::model(format!("skin_weights[{i}]"), "negative or non-finite weight"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::model(format!("skin_weights[{i}]"), format!("row sums to {s}, expected 1")));
            }
        }
        if self.num_joints == 0 || self.joint_regressor.len() != self.num_joints * nv {
            return Err(Error::model(
                "joint_regressor_W",
                format!("expected {}x{nv} entries", self.num_joints),
            ));
        }
        for (j, row) in self.joint_regressor.chunks(nv).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::model(format!("joint_regressor_W[{j}]"), format!("row sums to {s}, expected 1")));
            }
        }
        if self.root_joint >= self.num_joints {
            return Err(Error::model("root_joint", "index out of range"));
        }
        if self.part_labels.len() != nv {
            return Err(Error::model("part_labels", format!("expected {nv} labels")));
        }
        if let Some(i) = self.part_labels.iter().position(|p| *p == 0) {
            return Err(Error::model(format!("part_labels[{i}]"), "part ids start at 1"));
        }
        if self.vertex_uv.len() != nv {
            return Err(Error::model("vertex_uv", format!("expected {nv} entries")));
        }
        for (i, uv) in self.vertex_uv.iter().enumerate() {
            if !uv.iter().all(|x| (0.0..=1.0).contains(x)) {
                return Err(Error::model(format!("vertex_uv[{i}]"), "coordinates must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    fn validate_tree(&self) -> Result<()> {
        let k = self.num_kin();
        let roots: Vec<usize> = (0..k).filter(|&j| self.kin_parents[j].is_none()).collect();
        if roots != [0] {
            return Err(Error::model(
                "kin_parents",
                format!("expected a single root at joint 0, found roots {roots:?}"),
            ));
        }
        for (j, p) in self.kin_parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= k {
                    return Err(Error::model(format!("kin_parents[{j}]"), format!("parent {p} out of range")));
                }
            }
        }
        if self.topological_order().len() != k {
            return Err(Error::model("kin_parents", "cycle in kinematic tree"));
        }
        Ok(())
    }

    /// Edge-manifold check: no undirected edge is shared by more than two faces.
    pub fn is_edge_manifold(&self) -> bool {
        let mut counts = std::collections::HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        counts.values().all(|&c| c <= 2)
    }

    /// Vertical extent of the rest template in meters.
    pub fn body_height(&self) -> f64 {
        let (lo, hi) = self
            .template_vertices
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.y), hi.max(v.y)));
        hi - lo
    }
}
