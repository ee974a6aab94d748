//! Synthetic fitting problems with known ground truth.
//!
//! A pose and shape are sampled, the mini model is posed in front of a
//! fixed camera, a dense UV map is rendered and its visibility labels
//! derived, and the observations are the grid coordinates of the posed mesh
//! with optional noise. A straight-edged occluder can hide part of the body:
//! the hidden pixels are removed from the UV map and the hidden observations
//! are shifted by a shared offset plus noise.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, PoseParams, ShapeParams};
use crate::error::{Error, Result};
use crate::objectives::{ElementObservations, GMMPrior, Observations};
use crate::projection::{project, to_grid, Coord3, CropBox, HeatmapGrid, PerspectiveCamera, VisibilityTriplet};
use crate::visibility::{
    joint_occlusion_from_vertices, occlusion_labels_from_uv, pixel_to_vertex, synth_iuv, truncation_labels, Correspondence,
    DenseUVMap, RasterView, VisibilityLabels,
};

/// Mean camera distance of the root, meters.
pub const CAMERA_DISTANCE: f64 = 5.0;
/// Crop side relative to the projected body extent.
pub const CROP_MARGIN: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticProblemSpec {
    pub seed: u64,
    /// Per-axis bound of body joint rotations, radians.
    pub pose_noise: f64,
    /// Per-coefficient bound of the shape.
    pub shape_noise: f64,
    /// Share of vertices hidden by the occluder.
    pub occluded_fraction: f64,
    /// Crop-center shift as a fraction of the crop side.
    pub crop_shift: f64,
    /// Gaussian noise on visible observations, grid units.
    pub obs_noise: f64,
    /// Displace hidden observations by a shared offset plus noise.
    pub corrupt_occluded: bool,
    /// Length of the shared offset, grid units. Per-element noise is half this.
    pub corruption_scale: f64,
    /// Give every element full visibility scores instead of the labels.
    pub full_visibility: bool,
    /// Side of the rendered UV map in pixels.
    pub iuv_size: usize,
    pub grid: HeatmapGrid,
}

impl Default for SyntheticProblemSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            pose_noise: 0.25,
            shape_noise: 1.0,
            occluded_fraction: 0.0,
            crop_shift: 0.0,
            obs_noise: 0.0,
            corrupt_occluded: true,
            corruption_scale: 16.0,
            full_visibility: false,
            iuv_size: 256,
            grid: HeatmapGrid::default(),
        }
    }
}

impl SyntheticProblemSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("occluded_fraction", self.occluded_fraction),
            ("crop_shift", self.crop_shift),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("pose_noise", self.pose_noise),
            ("shape_noise", self.shape_noise),
            ("obs_noise", self.obs_noise),
            ("corruption_scale", self.corruption_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.iuv_size < 8 {
            return Err(Error::InvalidInput(format!("iuv_size must be at least 8, got {}", self.iuv_size)));
        }
        self.grid.validate()
    }
}

/// The camera every synthetic problem uses.
pub fn synth_camera() -> PerspectiveCamera {
    PerspectiveCamera {
        focal: [1000.0, 1000.0],
        principal: [256.0, 256.0],
        image_size: [512, 512],
    }
}

/// Two-mode pose prior matched to [`sample_pose`].
pub fn mini_prior(model: &BodyModel) -> GMMPrior {
    let dim = 3 * (model.num_kin() - 1);
    let var = 0.15 * 0.15;
    let cov: Vec<Vec<f64>> = (0..dim).map(|i| (0..dim).map(|j| if i == j { var } else { 0.0 }).collect()).collect();
    // second mode: every joint bent slightly about its x axis
    let bent: Vec<f64> = (0..dim).map(|i| if i % 3 == 0 { 0.1 } else { 0.0 }).collect();
    GMMPrior::new(vec![0.6, 0.4], vec![vec![0.0; dim], bent], vec![cov.clone(), cov]).expect("valid built-in prior")
}

/// Near-frontal pose: body joints from a Gaussian with standard deviation
/// `0.6 * bound` clipped to `bound`; the root yaws and pitches by up to
/// 0.3 rad and rolls by up to 0.2 rad.
pub fn sample_pose(rng: &mut impl Rng, num_kin: usize, bound: f64) -> PoseParams {
    let mut theta = Vec::with_capacity(num_kin);
    theta.push([rng.random_range(-0.3..=0.3), rng.random_range(-0.3..=0.3), rng.random_range(-0.2..=0.2)]);
    if bound > 0.0 {
        let normal = Normal::new(0.0, 0.6 * bound).expect("positive deviation");
        for _ in 1..num_kin {
            theta.push([0, 1, 2].map(|_| normal.sample(rng).clamp(-bound, bound)));
        }
    } else {
        theta.resize(num_kin, [0.0; 3]);
    }
    PoseParams::new(theta)
}

/// Square crop around the projected points, scaled by [`CROP_MARGIN`].
pub fn crop_around(camera: &PerspectiveCamera, points: &[Vector3<f64>]) -> Result<CropBox> {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        let px = project(camera, p)?;
        for a in 0..2 {
            lo[a] = lo[a].min(px[a]);
            hi[a] = hi[a].max(px[a]);
        }
    }
    let side = (hi[0] - lo[0]).max(hi[1] - lo[1]) * CROP_MARGIN;
    Ok(CropBox {
        x0: 0.5 * (lo[0] + hi[0]) - 0.5 * side,
        y0: 0.5 * (lo[1] + hi[1]) - 0.5 * side,
        width: side,
        height: side,
    })
}

/// Hidden answer of a synthetic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
    pub translation: [f64; 3],
    /// Camera-space output joints, meters.
    pub joints: Vec<[f64; 3]>,
    /// Camera-space vertices, meters.
    pub vertices: Vec<[f64; 3]>,
    pub labels: VisibilityLabels,
    /// Vertices hidden by the occluder.
    pub occluded: Vec<usize>,
}

impl GroundTruth {
    pub fn joint_points(&self) -> Vec<Vector3<f64>> {
        self.joints.iter().map(|p| Vector3::from(*p)).collect()
    }

    pub fn vertex_points(&self) -> Vec<Vector3<f64>> {
        self.vertices.iter().map(|p| Vector3::from(*p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProblem {
    pub observations: Observations,
    pub ground_truth: GroundTruth,
    pub iuv: DenseUVMap,
}

/// Labels and correspondences for a posed mesh and a UV map.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoGroundTruth {
    pub correspondence: Correspondence,
    pub labels: VisibilityLabels,
}

/// Truncation from the projection of the camera-space mesh, occlusion from
/// the pixel-to-vertex correspondence of `iuv`. Joints inherit occlusion
/// from the vertices their kinematic joint dominates.
pub fn pseudo_ground_truth(
    model: &BodyModel,
    iuv: &DenseUVMap,
    camera_vertices: &[Vector3<f64>],
    camera: &PerspectiveCamera,
    crop: &CropBox,
    grid: &HeatmapGrid,
    root_depth: f64,
) -> Result<PseudoGroundTruth> {
    if camera_vertices.len() != model.num_vertices() {
        return Err(Error::dims("posed vertices", model.num_vertices(), camera_vertices.len()));
    }
    let correspondence = pixel_to_vertex(iuv, model)?;
    let vertex_visible = occlusion_labels_from_uv(&correspondence, model.num_vertices());
    let joint_visible = joint_occlusion_from_vertices(model, &vertex_visible);
    let joints = crate::body_model::regress_joints(camera_vertices, &model.joint_regressor, model.num_joints)?;
    let to = |p: &Vector3<f64>| to_grid(camera, grid, crop, p, root_depth);
    let vg: Vec<Coord3> = camera_vertices.iter().map(to).collect::<Result<_>>()?;
    let jg: Vec<Coord3> = joints.iter().map(to).collect::<Result<_>>()?;
    Ok(PseudoGroundTruth {
        correspondence,
        labels: VisibilityLabels {
            joints: VisibilityLabels::from_parts(&truncation_labels(&jg, grid.bins), &joint_visible),
            vertices: VisibilityLabels::from_parts(&truncation_labels(&vg, grid.bins), &vertex_visible),
        },
    })
}

fn scores(labels: &[[u8; 3]], full: bool) -> Vec<VisibilityTriplet> {
    labels
        .iter()
        .map(|l| {
            if full {
                VisibilityTriplet::new(1.0, 1.0, 1.0)
            } else {
                VisibilityTriplet::new(l[0] as f64, l[1] as f64, l[2] as f64)
            }
        })
        .collect()
}

/// Builds one synthetic problem. Identical specs give identical problems.
pub fn generate(model: &BodyModel, spec: &SyntheticProblemSpec) -> Result<SyntheticProblem> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pose = sample_pose(&mut rng, model.num_kin(), spec.pose_noise);
    let shape = ShapeParams {
        beta: (0..model.num_betas)
            .map(|_| if spec.shape_noise > 0.0 { rng.random_range(-spec.shape_noise..=spec.shape_noise) } else { 0.0 })
            .collect(),
    };
    let t = Vector3::new(
        rng.random_range(-0.1..=0.1),
        rng.random_range(-0.1..=0.1),
        CAMERA_DISTANCE + rng.random_range(-0.3..=0.3),
    );
    let body = model.forward(&pose, &shape)?;
    let cam_vertices: Vec<Vector3<f64>> = body.vertices.iter().map(|v| v + t).collect();
    let cam_joints: Vec<Vector3<f64>> = body.joints_out.iter().map(|j| j + t).collect();
    let camera = synth_camera();

    let tight = crop_around(&camera, &cam_vertices)?;
    let shift = [0, 1].map(|_| {
        if spec.crop_shift > 0.0 {
            rng.random_range(-spec.crop_shift..=spec.crop_shift) * tight.width
        } else {
            0.0
        }
    });
    let crop = CropBox {
        x0: tight.x0 + shift[0],
        y0: tight.y0 + shift[1],
        ..tight
    };

    let view = RasterView::new(camera, crop, spec.iuv_size, spec.iuv_size);
    let mut iuv = synth_iuv(&cam_vertices, model, &view)?;
    let n_occ = (spec.occluded_fraction * model.num_vertices() as f64).round() as usize;
    // a straight-edged occluder entering the image from a random side
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let dir = [angle.cos(), angle.sin()];
    let mut along: Vec<(f64, usize)> = cam_vertices
        .iter()
        .enumerate()
        .map(|(i, p)| project(&camera, p).map(|px| (px[0] * dir[0] + px[1] * dir[1], i)))
        .collect::<Result<_>>()?;
    along.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut occluded: Vec<usize> = along[..n_occ].iter().map(|&(_, i)| i).collect();
    occluded.sort_unstable();
    let open_joint_labels = if occluded.is_empty() {
        None
    } else {
        let open = pseudo_ground_truth(model, &iuv, &cam_vertices, &camera, &crop, &spec.grid, t.z)?;
        let full = pixel_to_vertex(&iuv, model)?;
        let mut hidden = vec![false; model.num_vertices()];
        for &v in &occluded {
            hidden[v] = true;
        }
        let drop: std::collections::BTreeSet<(u32, u32)> =
            full.pixel_to_vertex.iter().filter(|(_, v)| hidden[**v]).map(|(p, _)| *p).collect();
        iuv.mask_out(|x, y| drop.contains(&(x as u32, y as u32)));
        Some(open.labels.joints)
    };

    let pgt = pseudo_ground_truth(model, &iuv, &cam_vertices, &camera, &crop, &spec.grid, t.z)?;
    let to = |p: &Vector3<f64>| to_grid(&camera, &spec.grid, &crop, p, t.z);
    let mut vcoords: Vec<Coord3> = cam_vertices.iter().map(to).collect::<Result<_>>()?;
    let mut jcoords: Vec<Coord3> = cam_joints.iter().map(to).collect::<Result<_>>()?;
    if spec.obs_noise > 0.0 {
        let normal = Normal::new(0.0, spec.obs_noise).expect("positive deviation");
        for c in vcoords.iter_mut().chain(jcoords.iter_mut()) {
            c.x += normal.sample(&mut rng);
            c.y += normal.sample(&mut rng);
            c.z += normal.sample(&mut rng);
        }
    }
    if spec.corrupt_occluded && spec.corruption_scale > 0.0 && !occluded.is_empty() {
        // the detector hallucinates a displaced limb behind the occluder
        let s = spec.corruption_scale;
        let bias: Vector3<f64> = loop {
            let d = Vector3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
            let n = d.norm();
            if n > 1e-3 && n <= 1.0 {
                break d * (s / n);
            }
        };
        let hidden_joints: Vec<usize> = match &open_joint_labels {
            Some(open) => (0..jcoords.len()).filter(|&j| open[j][2] == 1 && pgt.labels.joints[j][2] == 0).collect(),
            None => Vec::new(),
        };
        let picks = occluded.iter().map(|&v| (true, v)).chain(hidden_joints.iter().map(|&j| (false, j)));
        for (is_vertex, i) in picks {
            let e = if is_vertex { &mut vcoords[i] } else { &mut jcoords[i] };
            e.x += bias.x + rng.random_range(-s / 2.0..=s / 2.0);
            e.y += bias.y + rng.random_range(-s / 2.0..=s / 2.0);
            e.z += bias.z + rng.random_range(-s / 2.0..=s / 2.0);
        }
    }

    let observations = Observations {
        grid: spec.grid,
        camera,
        crop_box: crop,
        root_depth: None,
        joints: ElementObservations {
            coords: jcoords,
            visibility: scores(&pgt.labels.joints, spec.full_visibility),
        },
        vertices: ElementObservations {
            coords: vcoords,
            visibility: scores(&pgt.labels.vertices, spec.full_visibility),
        },
    };
    let pose = PoseParams::new(pose.theta);
    Ok(SyntheticProblem {
        observations,
        ground_truth: GroundTruth {
            theta: pose.theta,
            beta: shape.beta,
            translation: [t.x, t.y, t.z],
            joints: cam_joints.iter().map(|p| [p.x, p.y, p.z]).collect(),
            vertices: cam_vertices.iter().map(|p| [p.x, p.y, p.z]).collect(),
            labels: pgt.labels,
            occluded,
        },
        iuv,
    })
}
