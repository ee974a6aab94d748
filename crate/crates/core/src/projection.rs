//! Camera model, heatmap grid, and the 1D heatmap codec.
//!
//! Grid coordinates put image x/y of the crop on `[0, D)` and root-relative
//! depth on `[0, D)` (root at `D/2`). Bin `d` has its center at `d + 0.5`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveCamera {
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    pub image_size: [u32; 2],
}

impl PerspectiveCamera {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal[0] > 0.0 && self.focal[1] > 0.0) {
            return Err(Error::InvalidInput(format!("camera focal must be positive, got {:?}", self.focal)));
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(Error::InvalidInput("camera image_size must be positive".into()));
        }
        Ok(())
    }
}

/// Human bounding box in image pixels; it is resampled to the square crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl CropBox {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) || !self.x0.is_finite() || !self.y0.is_finite() {
            return Err(Error::DegenerateCrop {
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 2] {
        [self.x0 + 0.5 * self.width, self.y0 + 0.5 * self.height]
    }

    /// Box with the same center scaled by `factor` on both axes.
    pub fn scaled(&self, factor: f64) -> CropBox {
        let [cx, cy] = self.center();
        let (w, h) = (self.width * factor, self.height * factor);
        CropBox {
            x0: cx - 0.5 * w,
            y0: cy - 0.5 * h,
            width: w,
            height: h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    /// Bins per axis (`D`).
    pub bins: usize,
    /// Root-relative depth in meters mapped to each half of the z axis.
    pub depth_half_range: f64,
}

impl Default for HeatmapGrid {
    fn default() -> Self {
        Self {
            bins: 64,
            depth_half_range: 1.0,
        }
    }
}

impl HeatmapGrid {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::InvalidInput(format!("grid needs at least 2 bins, got {}", self.bins)));
        }
        if !(self.depth_half_range > 0.0) {
            return Err(Error::InvalidInput("depth_half_range must be positive".into()));
        }
        Ok(())
    }

    pub fn size(&self) -> f64 {
        self.bins as f64
    }

    /// Grid units per meter of root-relative depth.
    pub fn depth_scale(&self) -> f64 {
        self.size() / (2.0 * self.depth_half_range)
    }
}

/// Continuous grid coordinate of a joint or vertex.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Coord3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Coord3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn get(&self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

impl From<[f64; 3]> for Coord3 {
    fn from(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl From<Coord3> for [f64; 3] {
    fn from(c: Coord3) -> Self {
        [c.x, c.y, c.z]
    }
}

impl From<Vector3<f64>> for Coord3 {
    fn from(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// Pinhole projection of a camera-space point (meters) to pixels.
pub fn project(camera: &PerspectiveCamera, point: &Vector3<f64>) -> Result<[f64; 2]> {
    if !(point.z > 1e-6) {
        return Err(Error::BehindCamera(point.z));
    }
    Ok([
        camera.focal[0] * point.x / point.z + camera.principal[0],
        camera.focal[1] * point.y / point.z + camera.principal[1],
    ])
}

/// Image pixel to grid x/y (not clamped).
pub fn pixel_to_grid(grid: &HeatmapGrid, crop: &CropBox, px: [f64; 2]) -> [f64; 2] {
    [
        (px[0] - crop.x0) / crop.width * grid.size(),
        (px[1] - crop.y0) / crop.height * grid.size(),
    ]
}

pub fn grid_to_pixel(grid: &HeatmapGrid, crop: &CropBox, g: [f64; 2]) -> [f64; 2] {
    [
        g[0] / grid.size() * crop.width + crop.x0,
        g[1] / grid.size() * crop.height + crop.y0,
    ]
}

/// Camera-space point to grid coordinates. Depth is taken relative to
/// `root_depth` (meters). Out-of-window values extrapolate linearly.
pub fn to_grid(
    camera: &PerspectiveCamera,
    grid: &HeatmapGrid,
    crop: &CropBox,
    point: &Vector3<f64>,
    root_depth: f64,
) -> Result<Coord3> {
    crop.validate()?;
    let px = project(camera, point)?;
    let [x, y] = pixel_to_grid(grid, crop, px);
    let z = (point.z - root_depth) * grid.depth_scale() + 0.5 * grid.size();
    Ok(Coord3::new(x, y, z))
}

/// Inverse of [`to_grid`] given the root depth.
pub fn from_grid(
    camera: &PerspectiveCamera,
    grid: &HeatmapGrid,
    crop: &CropBox,
    coord: &Coord3,
    root_depth: f64,
) -> Vector3<f64> {
    let z = (coord.z - 0.5 * grid.size()) / grid.depth_scale() + root_depth;
    let [px, py] = grid_to_pixel(grid, crop, [coord.x, coord.y]);
    Vector3::new(
        (px - camera.principal[0]) / camera.focal[0] * z,
        (py - camera.principal[1]) / camera.focal[1] * z,
        z,
    )
}

/// Three per-axis 1D heatmaps of one element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisHeatmaps {
    pub hx: Vec<f64>,
    pub hy: Vec<f64>,
    pub hz: Vec<f64>,
}

impl AxisHeatmaps {
    pub fn axis(&self, a: usize) -> &[f64] {
        match a {
            0 => &self.hx,
            1 => &self.hy,
            _ => &self.hz,
        }
    }
}

fn bin_center(d: usize) -> f64 {
    d as f64 + 0.5
}

/// Normalized discrete Gaussian over bin centers around `mu`.
fn gaussian_bins(mu: f64, sigma: f64, bins: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..bins)
        .map(|d| {
            let t = (bin_center(d) - mu) / sigma;
            -0.5 * t * t
        })
        .collect();
    softmax(&logits, 1.0)
}

fn mean_of(h: &[f64]) -> f64 {
    h.iter().enumerate().map(|(d, p)| p * bin_center(d)).sum()
}

/// One axis of [`encode_target`].
///
/// The Gaussian center is solved by bisection so the heatmap's expected bin
/// center equals `coord`; near the borders this compensates for the mass the
/// window cuts off. Coordinates outside the reachable range `(0.5, D - 0.5)`
/// saturate into a heatmap massed on the nearest border bin.
pub fn encode_axis(coord: f64, sigma: f64, bins: usize) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let span = bins as f64;
    let (mut lo, mut hi) = (-4.0 * span - 10.0 * sigma, 5.0 * span + 10.0 * sigma);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_of(&gaussian_bins(mid, sigma, bins)) < coord {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * span.max(1.0) {
            break;
        }
    }
    gaussian_bins(0.5 * (lo + hi), sigma, bins)
}

/// Gaussian supervision heatmaps for a grid coordinate (`sigma` in bins).
pub fn encode_target(coord: &Coord3, sigma: f64, bins: usize) -> AxisHeatmaps {
    AxisHeatmaps {
        hx: encode_axis(coord.x, sigma, bins),
        hy: encode_axis(coord.y, sigma, bins),
        hz: encode_axis(coord.z, sigma, bins),
    }
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![1.0 / logits.len() as f64; logits.len()];
    }
    let e: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Expected bin center under `softmax(logits / temperature)`.
pub fn soft_argmax_logits(logits: &[f64], temperature: f64) -> f64 {
    mean_of(&softmax(logits, temperature))
}

/// Soft-argmax of a non-negative heatmap.
///
/// The heatmap is treated as unnormalized mass: bin weights are
/// `softmax(ln h / temperature)`, i.e. `h^(1/T)` renormalized, so at
/// `temperature = 1` this is the expectation of the normalized heatmap. Zero
/// bins carry no mass; an all-zero or all-equal heatmap decodes to `D/2`.
pub fn soft_argmax(heatmap: &[f64], temperature: f64) -> Result<f64> {
    if heatmap.is_empty() {
        return Err(Error::InvalidInput("empty heatmap".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")));
    }
    if let Some(bad) = heatmap.iter().find(|h| !h.is_finite() || **h < 0.0) {
        return Err(Error::InvalidInput(format!("heatmap entries must be finite and non-negative, got {bad}")));
    }
    let logits: Vec<f64> = heatmap.iter().map(|h| h.ln()).collect();
    Ok(soft_argmax_logits(&logits, temperature))
}

/// Decodes all three axes of an element.
pub fn decode_heatmaps(h: &AxisHeatmaps, temperature: f64) -> Result<Coord3> {
    Ok(Coord3::new(
        soft_argmax(&h.hx, temperature)?,
        soft_argmax(&h.hy, temperature)?,
        soft_argmax(&h.hz, temperature)?,
    ))
}

/// Post-sigmoid visibility scores of one element.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct VisibilityTriplet {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl VisibilityTriplet {
    pub fn new(sx: f64, sy: f64, sz: f64) -> Self {
        Self { sx, sy, sz }
    }

    pub fn get(&self, axis: usize) -> f64 {
        match axis {
            0 => self.sx,
            1 => self.sy,
            _ => self.sz,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.sx, self.sy, self.sz].iter().all(|s| (0.0..=1.0).contains(s))
    }
}

impl From<[f64; 3]> for VisibilityTriplet {
    fn from(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl From<VisibilityTriplet> for [f64; 3] {
    fn from(t: VisibilityTriplet) -> Self {
        [t.sx, t.sy, t.sz]
    }
}

/// Per-axis `score >= threshold`.
pub fn decode_visibility(scores: &VisibilityTriplet, threshold: f64) -> [bool; 3] {
    [scores.sx >= threshold, scores.sy >= threshold, scores.sz >= threshold]
}

pub fn decode_visibility_batch(scores: &[VisibilityTriplet], threshold: f64) -> Vec<[bool; 3]> {
    scores.iter().map(|s| decode_visibility(s, threshold)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3x4, Vector4};
    use proptest::prelude::*;

    fn camera() -> PerspectiveCamera {
        PerspectiveCamera {
            focal: [1000.0, 1100.0],
            principal: [256.0, 240.0],
            image_size: [512, 480],
        }
    }

    fn crop() -> CropBox {
        CropBox {
            x0: 100.0,
            y0: 80.0,
            width: 300.0,
            height: 300.0,
        }
    }

    #[test]
    fn project_axis_and_diagonal() {
        let cam = camera();
        assert_eq!(project(&cam, &Vector3::new(0.0, 0.0, 3.0)).unwrap(), [256.0, 240.0]);
        let p = project(&cam, &Vector3::new(2.0, 0.0, 2.0)).unwrap();
        assert!((p[0] - 1256.0).abs() < 1e-12 && (p[1] - 240.0).abs() < 1e-12);
        assert!(matches!(project(&cam, &Vector3::new(0.0, 0.0, -1.0)), Err(Error::BehindCamera(_))));
    }

    #[test]
    fn project_matches_homogeneous_matrix() {
        let cam = camera();
        let k = Matrix3x4::new(
            cam.focal[0], 0.0, cam.principal[0], 0.0,
            0.0, cam.focal[1], cam.principal[1], 0.0,
            0.0, 0.0, 1.0, 0.0,
        );
        for p in [Vector3::new(0.3, -0.2, 4.0), Vector3::new(-1.5, 0.7, 2.2), Vector3::new(0.01, 0.02, 9.0)] {
            let h = k * Vector4::new(p.x, p.y, p.z, 1.0);
            let got = project(&cam, &p).unwrap();
            assert!((got[0] - h.x / h.z).abs() < 1e-9 && (got[1] - h.y / h.z).abs() < 1e-9);
        }
    }

    #[test]
    fn to_grid_center_and_extrapolation() {
        let cam = camera();
        let grid = HeatmapGrid::default();
        let c = crop();
        let depth = 5.0;
        let [cx, cy] = c.center();
        let center = Vector3::new((cx - 256.0) / 1000.0 * depth, (cy - 240.0) / 1100.0 * depth, depth);
        let g = to_grid(&cam, &grid, &c, &center, depth).unwrap();
        assert!((g.x - 32.0).abs() < 1e-9 && (g.y - 32.0).abs() < 1e-9 && (g.z - 32.0).abs() < 1e-9);

        let left = Vector3::new((c.x0 - c.width - 256.0) / 1000.0 * depth, center.y, depth);
        let g = to_grid(&cam, &grid, &c, &left, depth).unwrap();
        assert!((g.x + 64.0).abs() < 1e-9);

        let flat = CropBox { height: 0.0, ..c };
        assert!(matches!(to_grid(&cam, &grid, &flat, &center, depth), Err(Error::DegenerateCrop { .. })));
    }

    #[test]
    fn to_grid_matches_composed_affine() {
        let cam = camera();
        let grid = HeatmapGrid { bins: 48, depth_half_range: 0.8 };
        let c = crop();
        for (p, root) in [(Vector3::new(0.2, -0.4, 4.3), 4.0), (Vector3::new(-0.9, 0.3, 6.1), 6.5)] {
            let g = to_grid(&cam, &grid, &c, &p, root).unwrap();
            let px = cam.focal[0] * p.x / p.z + cam.principal[0];
            let py = cam.focal[1] * p.y / p.z + cam.principal[1];
            let ex = 48.0 * (px - c.x0) / c.width;
            let ey = 48.0 * (py - c.y0) / c.height;
            let ez = 48.0 * ((p.z - root) + 0.8) / 1.6;
            assert!((g.x - ex).abs() < 1e-9 && (g.y - ey).abs() < 1e-9 && (g.z - ez).abs() < 1e-9);
            let back = from_grid(&cam, &grid, &c, &g, root);
            assert!((back - p).norm() < 1e-9);
        }
    }

    #[test]
    fn encode_narrow_peaks_at_bin() {
        for k in [0usize, 5, 31, 63] {
            let h = encode_axis(k as f64 + 0.5, 0.25, 64);
            let argmax = h.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax, k);
        }
    }

    #[test]
    fn encode_center_is_symmetric() {
        let h = encode_axis(32.0, 2.0, 64);
        for j in 1..20 {
            assert!((h[32 - j] - h[31 + j]).abs() < 1e-12);
        }
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encode_outside_frame_masses_at_border() {
        let h = encode_axis(-5.0, 2.0, 64);
        assert!(h[0] > 0.99);
        let h = encode_axis(80.0, 2.0, 64);
        assert!(h[63] > 0.99);
    }

    #[test]
    fn soft_argmax_reference_cases() {
        let mut one_hot = vec![0.0; 64];
        one_hot[17] = 1.0;
        assert!((soft_argmax(&one_hot, 0.1).unwrap() - 17.5).abs() < 1e-3);
        assert!((soft_argmax(&[0.3; 64], 1.0).unwrap() - 32.0).abs() < 1e-12);
        assert!((soft_argmax(&[0.0; 64], 1.0).unwrap() - 32.0).abs() < 1e-12);
        assert!(soft_argmax(&[0.5, -0.1], 1.0).is_err());
    }

    #[test]
    fn soft_argmax_matches_direct_summation() {
        let h: Vec<f64> = (0..64).map(|d| ((d * 37 % 11) as f64 + 0.5) / 7.0).collect();
        for t in [0.5, 1.0, 2.0] {
            let w: Vec<f64> = h.iter().map(|x| x.powf(1.0 / t)).collect();
            let s: f64 = w.iter().sum();
            let expected: f64 = w.iter().enumerate().map(|(d, x)| x / s * (d as f64 + 0.5)).sum();
            assert!((soft_argmax(&h, t).unwrap() - expected).abs() < 1e-9);
        }
        let logits: Vec<f64> = (0..64).map(|d| ((d * 13 % 7) as f64) - 3.0).collect();
        let e: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        let s: f64 = e.iter().sum();
        let expected: f64 = e.iter().enumerate().map(|(d, x)| x / s * (d as f64 + 0.5)).sum();
        assert!((soft_argmax_logits(&logits, 1.0) - expected).abs() < 1e-9);
    }

    #[test]
    fn visibility_threshold_is_inclusive() {
        assert_eq!(decode_visibility(&VisibilityTriplet::new(1.0, 1.0, 1.0), 0.5), [true; 3]);
        assert_eq!(
            decode_visibility(&VisibilityTriplet::new(0.49, 0.5, 0.51), 0.5),
            [false, true, true]
        );
        let batch = vec![VisibilityTriplet::new(0.1, 0.9, 0.5), VisibilityTriplet::new(0.7, 0.2, 0.3)];
        let out = decode_visibility_batch(&batch, 0.4);
        for (s, o) in batch.iter().zip(&out) {
            assert_eq!(*o, decode_visibility(s, 0.4));
        }
    }

    proptest! {
        #[test]
        fn round_trip_interior(c in 1.0f64..63.0) {
            let h = encode_axis(c, 2.0, 64);
            let back = soft_argmax(&h, 1.0).unwrap();
            prop_assert!((back - c).abs() < 0.1);
        }

        #[test]
        fn soft_argmax_stays_inside(h in proptest::collection::vec(0.0f64..10.0, 2..80), t in 0.05f64..5.0) {
            let d = h.len() as f64;
            let x = soft_argmax(&h, t).unwrap();
            prop_assert!(x > 0.0 && x < d);
        }

        #[test]
        fn shift_moves_by_at_most_one_bin(center in 10.0f64..50.0, sigma in 0.5f64..3.0, t in 0.5f64..2.0) {
            let h = encode_axis(center, sigma, 64);
            let mut shifted = vec![0.0; 64];
            shifted[1..].copy_from_slice(&h[..63]);
            let delta = soft_argmax(&shifted, t).unwrap() - soft_argmax(&h, t).unwrap();
            prop_assert!(delta >= 0.0 && delta <= 1.0 + 1e-6);
        }

        #[test]
        fn to_grid_is_affine_in_image_plane(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, bx in -1.0f64..1.0, by in -1.0f64..1.0,
            depth in 2.0f64..8.0, alpha in 0.0f64..1.0,
        ) {
            let (cam, grid, c) = (camera(), HeatmapGrid::default(), crop());
            let p = Vector3::new(ax, ay, depth);
            let q = Vector3::new(bx, by, depth);
            let m = p * alpha + q * (1.0 - alpha);
            let gp = to_grid(&cam, &grid, &c, &p, depth).unwrap();
            let gq = to_grid(&cam, &grid, &c, &q, depth).unwrap();
            let gm = to_grid(&cam, &grid, &c, &m, depth).unwrap();
            prop_assert!((gm.x - (alpha * gp.x + (1.0 - alpha) * gq.x)).abs() < 1e-9);
            prop_assert!((gm.y - (alpha * gp.y + (1.0 - alpha) * gq.y)).abs() < 1e-9);
        }

        #[test]
        fn to_grid_depth_is_affine(z1 in 2.0f64..8.0, z2 in 2.0f64..8.0, alpha in 0.0f64..1.0) {
            let (cam, grid, c) = (camera(), HeatmapGrid::default(), crop());
            let g = |z: f64| to_grid(&cam, &grid, &c, &Vector3::new(0.0, 0.0, z), 5.0).unwrap().z;
            let zm = alpha * z1 + (1.0 - alpha) * z2;
            prop_assert!((g(zm) - (alpha * g(z1) + (1.0 - alpha) * g(z2))).abs() < 1e-9);
        }
    }
}
