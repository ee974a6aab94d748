//! JSON helpers and shared file formats.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, PoseParams, ShapeParams};
use crate::error::{Error, Result};
use crate::synth::PseudoGroundTruth;
use crate::visibility::{Correspondence, VisibilityLabels};

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Pixel correspondences and labels as written to disk. Pixels are listed
/// as `[x, y, vertex]` rows in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoGtFile {
    pub num_vertices: usize,
    pub pixels: Vec<[u32; 3]>,
    pub labels: VisibilityLabels,
}

impl From<&PseudoGroundTruth> for PseudoGtFile {
    fn from(p: &PseudoGroundTruth) -> Self {
        let mut pixels: Vec<[u32; 3]> = p
            .correspondence
            .pixel_to_vertex
            .iter()
            .map(|(&(x, y), &v)| [x, y, v as u32])
            .collect();
        pixels.sort_by_key(|r| (r[1], r[0]));
        Self {
            num_vertices: p.correspondence.vertex_to_pixel.len(),
            pixels,
            labels: p.labels.clone(),
        }
    }
}

impl TryFrom<PseudoGtFile> for PseudoGroundTruth {
    type Error = Error;

    fn try_from(f: PseudoGtFile) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in &f.pixels {
            if r[2] as usize >= f.num_vertices {
                return Err(Error::InvalidInput(format!("pixel ({}, {}) maps to vertex {} of {}", r[0], r[1], r[2], f.num_vertices)));
            }
            if map.insert((r[0], r[1]), r[2] as usize).is_some() {
                return Err(Error::InvalidInput(format!("pixel ({}, {}) listed twice", r[0], r[1])));
            }
        }
        if f.labels.vertices.len() != f.num_vertices {
            return Err(Error::dims("vertex labels", f.num_vertices, f.labels.vertices.len()));
        }
        Ok(Self {
            correspondence: Correspondence::from_pixel_map(map, f.num_vertices),
            labels: f.labels,
        })
    }
}

/// Pose, shape and camera-space root of a posed body. Fit results and
/// ground-truth files both deserialize into this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
    pub translation: [f64; 3],
}

impl BodyParams {
    /// Camera-space output joints and vertices.
    pub fn pose_model(&self, model: &BodyModel) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
        let body = model.forward(&PoseParams::new(self.theta.clone()), &ShapeParams { beta: self.beta.clone() })?;
        let t = Vector3::from(self.translation);
        Ok((
            body.joints_out.iter().map(|j| j + t).collect(),
            body.vertices.iter().map(|v| v + t).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::make_mini_model;
    use crate::synth::{generate, SyntheticProblemSpec};

    #[test]
    fn pseudo_gt_file_round_trip() {
        let model = make_mini_model(0, 42);
        let p = generate(&model, &SyntheticProblemSpec { seed: 2, iuv_size: 64, ..Default::default() }).unwrap();
        let gt = &p.ground_truth;
        let vs = gt.vertex_points();
        let pgt = crate::synth::pseudo_ground_truth(
            &model,
            &p.iuv,
            &vs,
            &p.observations.camera,
            &p.observations.crop_box,
            &p.observations.grid,
            gt.translation[2],
        )
        .unwrap();
        let file = PseudoGtFile::from(&pgt);
        let text = serde_json::to_string(&file).unwrap();
        let back = PseudoGroundTruth::try_from(serde_json::from_str::<PseudoGtFile>(&text).unwrap()).unwrap();
        assert_eq!(back, pgt);
    }

    #[test]
    fn pseudo_gt_file_rejects_bad_vertices() {
        let f = PseudoGtFile {
            num_vertices: 2,
            pixels: vec![[0, 0, 5]],
            labels: VisibilityLabels {
                joints: vec![],
                vertices: vec![[1, 1, 1]; 2],
            },
        };
        assert!(PseudoGroundTruth::try_from(f).is_err());
    }

    #[test]
    fn ground_truth_reads_as_body_params() {
        let model = make_mini_model(0, 42);
        let p = generate(&model, &SyntheticProblemSpec { seed: 3, iuv_size: 32, ..Default::default() }).unwrap();
        let text = serde_json::to_string(&p.ground_truth).unwrap();
        let params: BodyParams = serde_json::from_str(&text).unwrap();
        let (joints, vertices) = params.pose_model(&model).unwrap();
        assert_eq!(joints, p.ground_truth.joint_points());
        assert_eq!(vertices, p.ground_truth.vertex_points());
    }
}
