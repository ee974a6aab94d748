use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{BodyModel, ROOT_PARENT};
use crate::error::{Error, Result};

/// On-disk JSON layout of a body model: row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BodyModelFile {
    pub template_vertices: Vec<[f64; 3]>,
    /// `N_V x 3 x N_beta`
    pub shape_dirs: Vec<Vec<Vec<f64>>>,
    pub faces: Vec<[usize; 3]>,
    pub kin_parents: Vec<i64>,
    pub kin_regressor: Vec<Vec<f64>>,
    pub skin_weights: Vec<Vec<f64>>,
    #[serde(rename = "joint_regressor_W")]
    pub joint_regressor_w: Vec<Vec<f64>>,
    pub part_labels: Vec<u8>,
    pub vertex_uv: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pose_dirs: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub root_joint: usize,
}

fn flatten_rows(rows: &[Vec<f64>], cols: usize, path: &str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len() * cols);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::model(format!("{path}[{i}]"), format!("expected {cols} columns, got {}", r.len())));
        }
        out.extend_from_slice(r);
    }
    Ok(out)
}

fn flatten_cube(cube: &[Vec<Vec<f64>>], depth: usize, path: &str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(cube.len() * 3 * depth);
    for (i, m) in cube.iter().enumerate() {
        if m.len() != 3 {
            return Err(Error::model(format!("{path}[{i}]"), format!("expected 3 rows, got {}", m.len())));
        }
        for (a, r) in m.iter().enumerate() {
            if r.len() != depth {
                return Err(Error::model(
                    format!("{path}[{i}][{a}]"),
                    format!("expected {depth} entries, got {}", r.len()),
                ));
            }
            out.extend_from_slice(r);
        }
    }
    Ok(out)
}

impl TryFrom<BodyModelFile> for BodyModel {
    type Error = Error;

    fn try_from(f: BodyModelFile) -> Result<BodyModel> {
        let nv = f.template_vertices.len();
        let k = f.kin_parents.len();
        if f.shape_dirs.len() != nv {
            return Err(Error::model("shape_dirs", format!("expected {nv} rows, got {}", f.shape_dirs.len())));
        }
        let num_betas = f.shape_dirs.first().and_then(|m| m.first()).map_or(0, Vec::len);
        let shape_dirs = flatten_cube(&f.shape_dirs, num_betas, "shape_dirs")?;
        let pose_dirs = if f.pose_dirs.is_empty() {
            Vec::new()
        } else {
            if f.pose_dirs.len() != nv {
                return Err(Error::model("pose_dirs", format!("expected {nv} rows, got {}", f.pose_dirs.len())));
            }
            flatten_cube(&f.pose_dirs, 9 * k.saturating_sub(1), "pose_dirs")?
        };
        let mut kin_parents = Vec::with_capacity(k);
        for (j, &p) in f.kin_parents.iter().enumerate() {
            kin_parents.push(match p {
                ROOT_PARENT => None,
                p if p >= 0 && (p as usize) < k => Some(p as usize),
                p => return Err(Error::model(format!("kin_parents[{j}]"), format!("invalid parent {p}"))),
            });
        }
        if f.kin_regressor.len() != k {
            return Err(Error::model("kin_regressor", format!("expected {k} rows, got {}", f.kin_regressor.len())));
        }
        if f.skin_weights.len() != nv {
            return Err(Error::model("skin_weights", format!("expected {nv} rows, got {}", f.skin_weights.len())));
        }
        let model = BodyModel {
            template_vertices: f.template_vertices.iter().map(|v| Vector3::from(*v)).collect(),
            shape_dirs,
            num_betas,
            pose_dirs,
            faces: f.faces,
            kin_parents,
            kin_regressor: flatten_rows(&f.kin_regressor, nv, "kin_regressor")?,
            skin_weights: flatten_rows(&f.skin_weights, k, "skin_weights")?,
            num_joints: f.joint_regressor_w.len(),
            joint_regressor: flatten_rows(&f.joint_regressor_w, nv, "joint_regressor_W")?,
            part_labels: f.part_labels,
            vertex_uv: f.vertex_uv,
            root_joint: f.root_joint,
        };
        model.validate()?;
        Ok(model)
    }
}

impl From<&BodyModel> for BodyModelFile {
    fn from(m: &BodyModel) -> Self {
        let nv = m.num_vertices();
        let k = m.num_kin();
        let cube = |flat: &[f64], depth: usize| -> Vec<Vec<Vec<f64>>> {
            if depth == 0 {
                return vec![vec![Vec::new(); 3]; nv];
            }
            flat.chunks(3 * depth)
                .map(|m| m.chunks(depth).map(<[f64]>::to_vec).collect())
                .collect()
        };
        BodyModelFile {
            template_vertices: m.template_vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            shape_dirs: cube(&m.shape_dirs, m.num_betas),
            faces: m.faces.clone(),
            kin_parents: m
                .kin_parents
                .iter()
                .map(|p| p.map_or(ROOT_PARENT, |p| p as i64))
                .collect(),
            kin_regressor: m.kin_regressor.chunks(nv).map(<[f64]>::to_vec).collect(),
            skin_weights: m.skin_weights.chunks(k).map(<[f64]>::to_vec).collect(),
            joint_regressor_w: m.joint_regressor.chunks(nv).map(<[f64]>::to_vec).collect(),
            part_labels: m.part_labels.clone(),
            vertex_uv: m.vertex_uv.clone(),
            pose_dirs: if m.has_pose_dirs() {
                cube(&m.pose_dirs, m.pose_feature_len())
            } else {
                Vec::new()
            },
            root_joint: m.root_joint,
        }
    }
}

impl BodyModel {
    /// Loads and validates a JSON body model.
    pub fn load(path: impl AsRef<Path>) -> Result<BodyModel> {
        let file: BodyModelFile = crate::io::read_json(path)?;
        BodyModel::try_from(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, &BodyModelFile::from(self))
    }
}
