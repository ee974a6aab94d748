//! Dense UV maps and pixel/vertex correspondences.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::raster::{barycentric, perspective_weights, rasterize_zbuffer, Raster, RasterView};
use crate::body_model::BodyModel;
use crate::error::{Error, Result};

/// Per-pixel `(part, u, v)`, row-major. Part 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseUVMap {
    pub width: usize,
    pub height: usize,
    pub part: Vec<u8>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl DenseUVMap {
    pub fn background(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            part: vec![0; n],
            u: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn set(&mut self, x: usize, y: usize, part: u8, u: f64, v: f64) {
        let i = self.index(x, y);
        self.part[i] = part;
        self.u[i] = u;
        self.v[i] = v;
    }

    pub fn human_pixels(&self) -> usize {
        self.part.iter().filter(|p| **p != 0).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.part.len() != n || self.u.len() != n || self.v.len() != n {
            return Err(Error::InvalidInput(format!(
                "IUV map buffers do not match {}x{}",
                self.width, self.height
            )));
        }
        for i in 0..n {
            if self.part[i] == 0 && (self.u[i] != 0.0 || self.v[i] != 0.0) {
                return Err(Error::InvalidInput(format!("background pixel {i} carries a UV value")));
            }
            if !(0.0..=1.0).contains(&self.u[i]) || !(0.0..=1.0).contains(&self.v[i]) {
                return Err(Error::InvalidInput(format!("pixel {i} has UV outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Clears every pixel for which `mask(x, y)` is true.
    pub fn mask_out(&mut self, mask: impl Fn(usize, usize) -> bool) {
        for y in 0..self.height {
            for x in 0..self.width {
                if mask(x, y) {
                    self.set(x, y, 0, 0.0, 0.0);
                }
            }
        }
    }
}

/// Pixel-to-vertex map and its inverse.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Correspondence {
    /// `(x, y) -> vertex`, ordered row-major.
    pub pixel_to_vertex: BTreeMap<(u32, u32), usize>,
    /// Pixels assigned to each vertex, row-major order.
    pub vertex_to_pixel: Vec<Vec<(u32, u32)>>,
}

impl Correspondence {
    /// Builds `M_V` by inverting `M_P`.
    pub fn from_pixel_map(pixel_to_vertex: BTreeMap<(u32, u32), usize>, num_vertices: usize) -> Self {
        let mut vertex_to_pixel = vec![Vec::new(); num_vertices];
        // BTreeMap order is (x, y); emit lists in row-major order instead
        let mut entries: Vec<_> = pixel_to_vertex.iter().map(|(&p, &v)| (p, v)).collect();
        entries.sort_by_key(|&((x, y), _)| (y, x));
        for (p, v) in entries {
            vertex_to_pixel[v].push(p);
        }
        Self {
            pixel_to_vertex,
            vertex_to_pixel,
        }
    }

    /// `M_V(v) = { p : M_P(p) = v }` for every vertex.
    pub fn is_consistent(&self) -> bool {
        let mut count = 0;
        for (v, pixels) in self.vertex_to_pixel.iter().enumerate() {
            for p in pixels {
                if self.pixel_to_vertex.get(p) != Some(&v) {
                    return false;
                }
                count += 1;
            }
        }
        count == self.pixel_to_vertex.len()
    }

    /// Mean pixel position of `M_V(v)`, if non-empty.
    pub fn centroid(&self, v: usize) -> Option<[f64; 2]> {
        let pixels = &self.vertex_to_pixel[v];
        if pixels.is_empty() {
            return None;
        }
        let n = pixels.len() as f64;
        let (sx, sy) = pixels
            .iter()
            .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x as f64, sy + y as f64));
        Some([sx / n, sy / n])
    }
}

/// Bucket grid over one part's UV chart.
struct ChartIndex {
    cells: usize,
    buckets: Vec<Vec<usize>>,
}

impl ChartIndex {
    fn new(vertices: &[usize], uv: &[[f64; 2]]) -> Self {
        let cells = ((vertices.len() as f64).sqrt().ceil() as usize).clamp(1, 64);
        let mut buckets = vec![Vec::new(); cells * cells];
        for &v in vertices {
            let (cx, cy) = Self::cell_of(uv[v], cells);
            buckets[cy * cells + cx].push(v);
        }
        Self { cells, buckets }
    }

    fn cell_of(uv: [f64; 2], cells: usize) -> (usize, usize) {
        let c = |t: f64| ((t * cells as f64).floor().max(0.0) as usize).min(cells - 1);
        (c(uv[0]), c(uv[1]))
    }

    /// Nearest vertex by squared UV distance, ties to the lowest id.
    fn nearest(&self, query: [f64; 2], uv: &[[f64; 2]]) -> Option<usize> {
        let n = self.cells as i64;
        let (cx, cy) = Self::cell_of(query, self.cells);
        let (cx, cy) = (cx as i64, cy as i64);
        let size = 1.0 / self.cells as f64;
        let mut best: Option<(f64, usize)> = None;
        for r in 0..n {
            for y in (cy - r).max(0)..=(cy + r).min(n - 1) {
                for x in (cx - r).max(0)..=(cx + r).min(n - 1) {
                    if (x - cx).abs().max((y - cy).abs()) != r {
                        continue;
                    }
                    for &v in &self.buckets[(y * n + x) as usize] {
                        let du = uv[v][0] - query[0];
                        let dv = uv[v][1] - query[1];
                        let d = du * du + dv * dv;
                        let better = match best {
                            None => true,
                            Some((bd, bv)) => d < bd || (d == bd && v < bv),
                        };
                        if better {
                            best = Some((d, v));
                        }
                    }
                }
            }
            // every vertex beyond ring r is at least r cell widths away
            if let Some((bd, _)) = best {
                let reach = r as f64 * size;
                if bd < reach * reach {
                    break;
                }
            }
        }
        best.map(|(_, v)| v)
    }
}

/// Assigns each human pixel the vertex of the same body part whose UV is
/// nearest in Euclidean distance (ties to the lowest vertex id).
pub fn pixel_to_vertex(iuv: &DenseUVMap, model: &BodyModel) -> Result<Correspondence> {
    iuv.validate()?;
    let mut by_part: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (v, &p) in model.part_labels.iter().enumerate() {
        by_part.entry(p).or_default().push(v);
    }
    let mut missing: Vec<u8> = iuv
        .part
        .iter()
        .copied()
        .filter(|p| *p != 0 && !by_part.contains_key(p))
        .collect();
    missing.sort_unstable();
    missing.dedup();
    if let Some(&part) = missing.first() {
        return Err(Error::UnknownPart { part });
    }
    let charts: BTreeMap<u8, ChartIndex> = by_part
        .iter()
        .map(|(&p, verts)| (p, ChartIndex::new(verts, &model.vertex_uv)))
        .collect();

    let mut map = BTreeMap::new();
    for y in 0..iuv.height {
        for x in 0..iuv.width {
            let i = iuv.index(x, y);
            let part = iuv.part[i];
            if part == 0 {
                continue;
            }
            if let Some(v) = charts[&part].nearest([iuv.u[i], iuv.v[i]], &model.vertex_uv) {
                map.insert((x as u32, y as u32), v);
            }
        }
    }
    Ok(Correspondence::from_pixel_map(map, model.num_vertices()))
}

/// A vertex is depth-visible iff at least one pixel maps to it.
pub fn occlusion_labels_from_uv(corr: &Correspondence, num_vertices: usize) -> Vec<bool> {
    (0..num_vertices)
        .map(|v| corr.vertex_to_pixel.get(v).is_some_and(|p| !p.is_empty()))
        .collect()
}

/// IUV map of a rasterized mesh: part id of the winning face and its
/// perspective-correct UV at each pixel center.
pub fn iuv_from_raster(vertices: &[Vector3<f64>], model: &BodyModel, raster: &Raster, view: &RasterView) -> Result<DenseUVMap> {
    let screen: Vec<[f64; 2]> = vertices.iter().map(|v| view.to_screen(v)).collect::<Result<_>>()?;
    let mut map = DenseUVMap::background(raster.width, raster.height);
    for y in 0..raster.height {
        for x in 0..raster.width {
            let Some(f) = raster.face[raster.index(x, y)] else {
                continue;
            };
            let tri = model.faces[f];
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let Some(bary) = barycentric(p, screen[tri[0]], screen[tri[1]], screen[tri[2]]) else {
                continue;
            };
            let depths = [vertices[tri[0]].z, vertices[tri[1]].z, vertices[tri[2]].z];
            let (w, _) = perspective_weights(bary, depths);
            let mut uv = [0.0; 2];
            for (k, &vi) in tri.iter().enumerate() {
                uv[0] += w[k] * model.vertex_uv[vi][0];
                uv[1] += w[k] * model.vertex_uv[vi][1];
            }
            let dominant = (0..3).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap_or(0);
            let part = model.part_labels[tri[dominant]];
            map.set(x, y, part, uv[0].clamp(0.0, 1.0), uv[1].clamp(0.0, 1.0));
        }
    }
    Ok(map)
}

/// Renders the dense UV map a perfect dense-UV estimator would produce for
/// a posed mesh given in camera space.
pub fn synth_iuv(vertices: &[Vector3<f64>], model: &BodyModel, view: &RasterView) -> Result<DenseUVMap> {
    let raster = rasterize_zbuffer(vertices, &model.faces, view)?;
    iuv_from_raster(vertices, model, &raster, view)
}
