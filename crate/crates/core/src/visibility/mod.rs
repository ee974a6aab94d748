//! Ground-truth and pseudo-ground-truth visibility.
//!
//! Truncation comes from grid coordinates, occlusion either from a z-buffer
//! of the posed mesh or from pixel-to-vertex correspondences computed on a
//! dense UV map.

mod iuv_io;
mod raster;
mod uv;

use serde::{Deserialize, Serialize};

use crate::body_model::BodyModel;
use crate::projection::Coord3;

pub use iuv_io::{load_iuv, read_iuv_png, sidecar_path, write_iuv, write_iuv_png, IuvSidecar};
pub use raster::{occlusion_labels_from_raster, rasterize_zbuffer, Raster, RasterView};
pub use uv::{iuv_from_raster, occlusion_labels_from_uv, pixel_to_vertex, synth_iuv, Correspondence, DenseUVMap};

/// Share of a joint's dominated vertices that must be visible for the joint
/// to count as depth-visible.
pub const JOINT_VISIBLE_FRACTION: f64 = 0.2;

/// `(sx, sy)` per element: inside the frame on x / y.
pub fn truncation_labels(coords: &[Coord3], bins: usize) -> Vec<[bool; 2]> {
    let d = bins as f64;
    coords
        .iter()
        .map(|c| [(0.0..d).contains(&c.x), (0.0..d).contains(&c.y)])
        .collect()
}

/// Binary visibility triplets for joints and vertices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VisibilityLabels {
    pub joints: Vec<[u8; 3]>,
    pub vertices: Vec<[u8; 3]>,
}

impl VisibilityLabels {
    pub fn from_parts(trunc: &[[bool; 2]], occlusion: &[bool]) -> Vec<[u8; 3]> {
        trunc
            .iter()
            .zip(occlusion)
            .map(|(t, z)| [t[0] as u8, t[1] as u8, *z as u8])
            .collect()
    }
}

/// Joint depth-visibility from vertex depth-visibility.
///
/// Each output joint is associated with the kinematic joint that dominates
/// its regressor support (largest regressor-weighted skinning weight). The
/// joint is visible iff at least [`JOINT_VISIBLE_FRACTION`] of the vertices
/// whose largest skinning weight belongs to that kinematic joint are visible.
pub fn joint_occlusion_from_vertices(model: &BodyModel, vertex_visible: &[bool]) -> Vec<bool> {
    let nv = model.num_vertices();
    let k = model.num_kin();
    let dominant = model.dominant_joint();
    let mut total = vec![0usize; k];
    let mut seen = vec![0usize; k];
    for (v, &j) in dominant.iter().enumerate() {
        total[j] += 1;
        if vertex_visible[v] {
            seen[j] += 1;
        }
    }
    model
        .joint_regressor
        .chunks(nv)
        .map(|row| {
            let mut score = vec![0.0; k];
            for (v, w) in row.iter().enumerate() {
                if *w != 0.0 {
                    for (j, s) in score.iter_mut().enumerate() {
                        *s += w * model.skin_weights[v * k + j];
                    }
                }
            }
            let kin = (0..k).fold(0, |best, j| if score[j] > score[best] { j } else { best });
            if total[kin] == 0 {
                return row.iter().zip(vertex_visible).any(|(w, vis)| *w != 0.0 && *vis);
            }
            seen[kin] as f64 >= JOINT_VISIBLE_FRACTION * total[kin] as f64
        })
        .collect()
}

#[cfg(test)]
mod tests;
