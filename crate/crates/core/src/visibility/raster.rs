//! Z-buffer triangle rasterization over the crop.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::projection::{project, CropBox, PerspectiveCamera};

/// Raster geometry: the crop box resampled to `width x height` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterView {
    pub camera: PerspectiveCamera,
    pub crop: CropBox,
    pub width: usize,
    pub height: usize,
}

impl RasterView {
    pub fn new(camera: PerspectiveCamera, crop: CropBox, width: usize, height: usize) -> Self {
        Self {
            camera,
            crop,
            width,
            height,
        }
    }

    /// Camera-space point to continuous raster coordinates (pixel `i` spans `[i, i+1)`).
    pub fn to_screen(&self, p: &Vector3<f64>) -> Result<[f64; 2]> {
        let [px, py] = project(&self.camera, p)?;
        Ok([
            (px - self.crop.x0) / self.crop.width * self.width as f64,
            (py - self.crop.y0) / self.crop.height * self.height as f64,
        ])
    }

    pub fn pixel_of(&self, screen: [f64; 2]) -> Option<(usize, usize)> {
        let (x, y) = (screen[0].floor(), screen[1].floor());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            None
        } else {
            Some((x as usize, y as usize))
        }
    }
}

/// Depth image and winning face per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Camera-space depth in meters; `f64::INFINITY` for background.
    pub depth: Vec<f64>,
    pub face: Vec<Option<usize>>,
}

impl Raster {
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn covered_pixels(&self) -> usize {
        self.face.iter().filter(|f| f.is_some()).count()
    }
}

/// Screen-space barycentrics of `p` in triangle `(a, b, c)`; `None` when degenerate.
pub(crate) fn barycentric(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<[f64; 3]> {
    let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    if area.abs() < 1e-12 {
        return None;
    }
    let w0 = ((b[0] - p[0]) * (c[1] - p[1]) - (b[1] - p[1]) * (c[0] - p[0])) / area;
    let w1 = ((c[0] - p[0]) * (a[1] - p[1]) - (c[1] - p[1]) * (a[0] - p[0])) / area;
    Some([w0, w1, 1.0 - w0 - w1])
}

/// Perspective-correct weights from screen barycentrics and vertex depths.
pub(crate) fn perspective_weights(bary: [f64; 3], depths: [f64; 3]) -> ([f64; 3], f64) {
    let inv = [bary[0] / depths[0], bary[1] / depths[1], bary[2] / depths[2]];
    let s = inv[0] + inv[1] + inv[2];
    ([inv[0] / s, inv[1] / s, inv[2] / s], 1.0 / s)
}

/// Rasterizes camera-space triangles at pixel centers.
///
/// Depth is interpolated perspective-correctly, so a covered pixel holds the
/// exact depth of the triangle's plane along the pixel ray. A later face only
/// wins a pixel when it is nearer by more than `1e-9`, so ties go to the
/// lower face id. Faces with zero screen area are skipped.
pub fn rasterize_zbuffer(vertices: &[Vector3<f64>], faces: &[[usize; 3]], view: &RasterView) -> Result<Raster> {
    view.crop.validate()?;
    if let Some(v) = vertices.iter().find(|v| !(v.z > 1e-6)) {
        return Err(Error::BehindCamera(v.z));
    }
    let screen: Vec<[f64; 2]> = vertices.iter().map(|v| view.to_screen(v)).collect::<Result<_>>()?;
    let (w, h) = (view.width, view.height);
    let mut raster = Raster {
        width: w,
        height: h,
        depth: vec![f64::INFINITY; w * h],
        face: vec![None; w * h],
    };
    for (fi, f) in faces.iter().enumerate() {
        let (a, b, c) = (screen[f[0]], screen[f[1]], screen[f[2]]);
        if barycentric(a, a, b, c).is_none() {
            continue;
        }
        let depths = [vertices[f[0]].z, vertices[f[1]].z, vertices[f[2]].z];
        let min_x = a[0].min(b[0]).min(c[0]);
        let max_x = a[0].max(b[0]).max(c[0]);
        let min_y = a[1].min(b[1]).min(c[1]);
        let max_y = a[1].max(b[1]).max(c[1]);
        // pixel centers i + 0.5 inside [min, max]
        let x0 = (min_x - 0.5).ceil().max(0.0);
        let x1 = (max_x - 0.5).floor().min(w as f64 - 1.0);
        let y0 = (min_y - 0.5).ceil().max(0.0);
        let y1 = (max_y - 0.5).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let Some(bary) = barycentric(p, a, b, c) else {
                    continue;
                };
                if bary.iter().any(|&t| t < 0.0) {
                    continue;
                }
                let (_, z) = perspective_weights(bary, depths);
                let idx = y * w + x;
                if z < raster.depth[idx] - 1e-9 {
                    raster.depth[idx] = z;
                    raster.face[idx] = Some(fi);
                }
            }
        }
    }
    Ok(raster)
}

/// Depth-visibility of each vertex from a raster of the same mesh.
///
/// A vertex is visible when at least one pixel is won by a face incident to
/// it and, at the vertex's own pixel, the winning face's plane along the
/// vertex ray is not nearer than the vertex by more than `eps_z`
/// (`1e-4` of the mesh depth range). Vertices projecting outside the raster
/// are not visible.
pub fn occlusion_labels_from_raster(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    raster: &Raster,
    view: &RasterView,
) -> Result<Vec<bool>> {
    let (lo, hi) = vertices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.z), hi.max(v.z)));
    let eps_z = 1e-4 * (hi - lo);

    let mut face_won = vec![false; faces.len()];
    for f in raster.face.iter().flatten() {
        face_won[*f] = true;
    }
    let mut touched = vec![false; vertices.len()];
    for (f, won) in faces.iter().zip(&face_won) {
        if *won {
            for &v in f {
                touched[v] = true;
            }
        }
    }

    let screen: Vec<[f64; 2]> = vertices.iter().map(|v| view.to_screen(v)).collect::<Result<_>>()?;
    Ok(vertices
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if !touched[i] {
                return false;
            }
            let Some((x, y)) = view.pixel_of(screen[i]) else {
                return false;
            };
            let Some(f) = raster.face[raster.index(x, y)] else {
                return true;
            };
            let tri = faces[f];
            let Some(bary) = barycentric(screen[i], screen[tri[0]], screen[tri[1]], screen[tri[2]]) else {
                return true;
            };
            let depths = [vertices[tri[0]].z, vertices[tri[1]].z, vertices[tri[2]].z];
            let (_, plane_z) = perspective_weights(bary, depths);
            v.z <= plane_z + eps_z
        })
        .collect())
}
