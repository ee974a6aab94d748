use std::collections::{BTreeMap, HashSet};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::body_model::{make_mini_model, PoseParams, ShapeParams};
use crate::projection::{CropBox, PerspectiveCamera};

fn camera() -> PerspectiveCamera {
    PerspectiveCamera {
        focal: [1000.0, 1000.0],
        principal: [256.0, 256.0],
        image_size: [512, 512],
    }
}

fn posed_scene(seed: u64, res: usize) -> (crate::body_model::BodyModel, Vec<Vector3<f64>>, RasterView) {
    let model = make_mini_model(0, 42);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta: Vec<[f64; 3]> = (0..model.num_kin())
        .map(|_| [rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)])
        .collect();
    theta[0] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2)];
    let body = model
        .forward(&PoseParams::new(theta), &ShapeParams::zeros(model.num_betas))
        .unwrap();
    let t = Vector3::new(0.05, -0.02, 5.0);
    let cam: Vec<Vector3<f64>> = body.vertices.iter().map(|v| v + t).collect();
    let c = camera();
    let px: Vec<[f64; 2]> = cam.iter().map(|p| crate::projection::project(&c, p).unwrap()).collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &px {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let side = (hi[0] - lo[0]).max(hi[1] - lo[1]) * 1.2;
    let crop = CropBox {
        x0: 0.5 * (lo[0] + hi[0]) - 0.5 * side,
        y0: 0.5 * (lo[1] + hi[1]) - 0.5 * side,
        width: side,
        height: side,
    };
    (model, cam, RasterView::new(c, crop, res, res))
}

/// Exhaustive nearest-UV scan over every model vertex.
fn brute_force_pixel_to_vertex(iuv: &DenseUVMap, model: &crate::body_model::BodyModel) -> BTreeMap<(u32, u32), usize> {
    let mut out = BTreeMap::new();
    for y in 0..iuv.height {
        for x in 0..iuv.width {
            let i = iuv.index(x, y);
            if iuv.part[i] == 0 {
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            for v in 0..model.num_vertices() {
                if model.part_labels[v] != iuv.part[i] {
                    continue;
                }
                let du = model.vertex_uv[v][0] - iuv.u[i];
                let dv = model.vertex_uv[v][1] - iuv.v[i];
                let d = du * du + dv * dv;
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, v));
                }
            }
            out.insert((x as u32, y as u32), best.unwrap().1);
        }
    }
    out
}

#[test]
fn truncation_boundaries() {
    let d = 64;
    let labels = truncation_labels(
        &[Coord3::new(32.0, 32.0, 5.0), Coord3::new(-0.1, 32.0, 0.0), Coord3::new(63.99, 64.0, 0.0)],
        d,
    );
    assert_eq!(labels, vec![[true, true], [false, true], [true, false]]);
}

#[test]
fn truncation_matches_loop_and_ignores_depth() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let coords: Vec<Coord3> = (0..500)
        .map(|_| Coord3::new(rng.random_range(-10.0..74.0), rng.random_range(-10.0..74.0), rng.random_range(-50.0..50.0)))
        .collect();
    let labels = truncation_labels(&coords, 64);
    for (c, l) in coords.iter().zip(&labels) {
        assert_eq!(l[0], c.x >= 0.0 && c.x < 64.0);
        assert_eq!(l[1], c.y >= 0.0 && c.y < 64.0);
    }
    let shifted: Vec<Coord3> = coords.iter().map(|c| Coord3::new(c.x, c.y, c.z + 123.0)).collect();
    assert_eq!(truncation_labels(&shifted, 64), labels);
}

#[test]
fn shrinking_crop_never_untruncates() {
    let (model, cam, view) = posed_scene(3, 64);
    let grid = crate::projection::HeatmapGrid::default();
    let _ = model;
    let mut previous: Option<Vec<[bool; 2]>> = None;
    for factor in [1.4, 1.1, 0.9, 0.7, 0.5] {
        let crop = view.crop.scaled(factor);
        let coords: Vec<Coord3> = cam
            .iter()
            .map(|p| crate::projection::to_grid(&view.camera, &grid, &crop, p, 5.0).unwrap())
            .collect();
        let labels = truncation_labels(&coords, grid.bins);
        if let Some(prev) = &previous {
            for (a, b) in prev.iter().zip(&labels) {
                assert!(a[0] || !b[0]);
                assert!(a[1] || !b[1]);
            }
        }
        previous = Some(labels);
    }
}

#[test]
fn single_pixel_exact_uv_maps_to_vertex() {
    let model = make_mini_model(0, 42);
    let k = 37;
    let mut iuv = DenseUVMap::background(4, 4);
    iuv.set(1, 2, model.part_labels[k], model.vertex_uv[k][0], model.vertex_uv[k][1]);
    let corr = pixel_to_vertex(&iuv, &model).unwrap();
    assert_eq!(corr.pixel_to_vertex.get(&(1, 2)), Some(&k));
    assert_eq!(corr.vertex_to_pixel[k], vec![(1, 2)]);
    assert!(corr.is_consistent());
}

#[test]
fn empty_map_gives_empty_correspondence() {
    let model = make_mini_model(0, 42);
    let corr = pixel_to_vertex(&DenseUVMap::background(16, 16), &model).unwrap();
    assert!(corr.pixel_to_vertex.is_empty());
    assert!(corr.vertex_to_pixel.iter().all(Vec::is_empty));
    assert!(occlusion_labels_from_uv(&corr, model.num_vertices()).iter().all(|v| !v));
}

#[test]
fn unknown_part_is_reported() {
    let model = make_mini_model(0, 42);
    let mut iuv = DenseUVMap::background(4, 4);
    iuv.set(0, 0, 9, 0.5, 0.5);
    match pixel_to_vertex(&iuv, &model) {
        Err(crate::Error::UnknownPart { part }) => assert_eq!(part, 9),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn random_maps_match_brute_force() {
    let model = make_mini_model(0, 42);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..10 {
        let mut iuv = DenseUVMap::background(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                if rng.random_bool(0.7) {
                    iuv.set(x, y, rng.random_range(1..=6), rng.random(), rng.random());
                }
            }
        }
        let corr = pixel_to_vertex(&iuv, &model).unwrap();
        assert_eq!(corr.pixel_to_vertex, brute_force_pixel_to_vertex(&iuv, &model));
        assert!(corr.is_consistent());
    }
}

#[test]
fn tie_breaks_to_lowest_vertex_id() {
    let mut model = make_mini_model(0, 42);
    // two vertices of part 1 equidistant from the query
    let part1: Vec<usize> = (0..model.num_vertices()).filter(|&v| model.part_labels[v] == 1).collect();
    let (a, b) = (part1[3], part1[9]);
    model.vertex_uv[a] = [0.40, 0.5];
    model.vertex_uv[b] = [0.60, 0.5];
    for &v in &part1 {
        if v != a && v != b {
            model.vertex_uv[v] = [0.0, 0.0];
        }
    }
    let mut iuv = DenseUVMap::background(1, 1);
    iuv.set(0, 0, 1, 0.5, 0.5);
    let corr = pixel_to_vertex(&iuv, &model).unwrap();
    assert_eq!(corr.pixel_to_vertex[&(0, 0)], a.min(b));
}

#[test]
fn uv_labels_count_bound() {
    let (model, cam, view) = posed_scene(5, 96);
    let iuv = synth_iuv(&cam, &model, &view).unwrap();
    let corr = pixel_to_vertex(&iuv, &model).unwrap();
    let labels = occlusion_labels_from_uv(&corr, model.num_vertices());
    assert!(labels.iter().filter(|l| **l).count() <= iuv.human_pixels());
    let mut counts = vec![0; model.num_vertices()];
    for v in corr.pixel_to_vertex.values() {
        counts[*v] += 1;
    }
    for (c, l) in counts.iter().zip(&labels) {
        assert_eq!(*c >= 1, *l);
    }
}

#[test]
fn synth_iuv_single_triangle() {
    let mut model = make_mini_model(0, 42);
    model.faces = vec![[0, 1, 2]];
    for p in model.part_labels.iter_mut().take(3) {
        *p = 4;
    }
    let cam = vec![Vector3::new(-0.5, -0.5, 2.0), Vector3::new(0.5, -0.5, 2.0), Vector3::new(0.0, 0.5, 2.0)];
    let view = RasterView::new(
        PerspectiveCamera {
            focal: [100.0, 100.0],
            principal: [0.0, 0.0],
            image_size: [100, 100],
        },
        CropBox {
            x0: -50.0,
            y0: -50.0,
            width: 100.0,
            height: 100.0,
        },
        32,
        32,
    );
    let iuv = synth_iuv(&cam, &model, &view).unwrap();
    assert!(iuv.human_pixels() > 0);
    assert!(iuv.part.iter().all(|p| *p == 0 || *p == 4));

    // a vertex projecting exactly on a pixel center gets its own UV there
    let mut cam = cam;
    let screen = view.to_screen(&cam[0]).unwrap();
    let target = [screen[0].floor() + 0.5 + 1.0, screen[1].floor() + 0.5 + 1.0];
    let px = [target[0] / 32.0 * 100.0 - 50.0, target[1] / 32.0 * 100.0 - 50.0];
    cam[0] = Vector3::new(px[0] / 100.0 * 2.0, px[1] / 100.0 * 2.0, 2.0);
    let iuv = synth_iuv(&cam, &model, &view).unwrap();
    let i = iuv.index(target[0] as usize, target[1] as usize);
    assert_eq!(iuv.part[i], 4);
    assert!((iuv.u[i] - model.vertex_uv[0][0]).abs() < 1e-6);
    assert!((iuv.v[i] - model.vertex_uv[0][1]).abs() < 1e-6);
}

#[test]
fn raster_depth_is_front_most_covering_triangle() {
    let (model, cam, view) = posed_scene(8, 48);
    let raster = rasterize_zbuffer(&cam, &model.faces, &view).unwrap();
    let screen: Vec<[f64; 2]> = cam.iter().map(|p| view.to_screen(p).unwrap()).collect();
    for y in 0..48 {
        for x in 0..48 {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let idx = raster.index(x, y);
            let mut covered = false;
            for f in &model.faces {
                let (a, b, c) = (screen[f[0]], screen[f[1]], screen[f[2]]);
                let Some(w) = raster::barycentric(p, a, b, c) else { continue };
                if w.iter().any(|t| *t < 0.0) {
                    continue;
                }
                covered = true;
                let inv = w[0] / cam[f[0]].z + w[1] / cam[f[1]].z + w[2] / cam[f[2]].z;
                assert!(raster.depth[idx] <= 1.0 / inv + 1e-9);
            }
            assert_eq!(covered, raster.face[idx].is_some());
        }
    }
}

#[test]
fn synth_pipeline_maps_to_face_ring() {
    let (model, cam, view) = posed_scene(13, 128);
    let raster = rasterize_zbuffer(&cam, &model.faces, &view).unwrap();
    let iuv = iuv_from_raster(&cam, &model, &raster, &view).unwrap();
    let corr = pixel_to_vertex(&iuv, &model).unwrap();
    let mut neighbors = vec![HashSet::new(); model.num_vertices()];
    for f in &model.faces {
        for &a in f {
            for &b in f {
                neighbors[a].insert(b);
            }
        }
    }
    let mut hits = 0;
    for (&(x, y), &v) in &corr.pixel_to_vertex {
        let f = model.faces[raster.face[raster.index(x as usize, y as usize)].unwrap()];
        if f.iter().any(|&a| a == v || neighbors[a].contains(&v)) {
            hits += 1;
        }
    }
    let frac = hits as f64 / corr.pixel_to_vertex.len() as f64;
    assert!(frac >= 0.9, "ring membership {frac}");
}

#[test]
fn uv_and_raster_labels_agree() {
    let (mut agree, mut total) = (0, 0);
    for seed in 0..20 {
        let (model, cam, view) = posed_scene(seed, 128);
        let raster = rasterize_zbuffer(&cam, &model.faces, &view).unwrap();
        let by_raster = occlusion_labels_from_raster(&cam, &model.faces, &raster, &view).unwrap();
        let iuv = iuv_from_raster(&cam, &model, &raster, &view).unwrap();
        let corr = pixel_to_vertex(&iuv, &model).unwrap();
        let by_uv = occlusion_labels_from_uv(&corr, model.num_vertices());
        agree += by_raster.iter().zip(&by_uv).filter(|(a, b)| a == b).count();
        total += model.num_vertices();
    }
    let frac = agree as f64 / total as f64;
    assert!(frac >= 0.95, "agreement {frac}");
}

#[test]
fn joint_labels_follow_dominated_vertices() {
    let model = make_mini_model(0, 42);
    let all = joint_occlusion_from_vertices(&model, &vec![true; model.num_vertices()]);
    assert!(all.iter().all(|v| *v));
    let none = joint_occlusion_from_vertices(&model, &vec![false; model.num_vertices()]);
    assert!(none.iter().all(|v| !*v));
    // hide everything the left forearm dominates
    let dominant = model.dominant_joint();
    let vis: Vec<bool> = dominant.iter().map(|&j| j != 5).collect();
    let joints = joint_occlusion_from_vertices(&model, &vis);
    assert!(!joints[5]);
    assert!(joints[4] && joints[6]);
}

#[test]
fn iuv_png_round_trip_with_sidecar() {
    let (model, cam, view) = posed_scene(2, 40);
    let iuv = synth_iuv(&cam, &model, &view).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("iuv.png");
    write_iuv_png(&path, &iuv).unwrap();
    let quantized = load_iuv(&path).unwrap();
    assert_eq!(quantized.part, iuv.part);
    for i in 0..iuv.u.len() {
        assert!((quantized.u[i] - iuv.u[i]).abs() <= 0.5 / 255.0 + 1e-12);
    }
    write_iuv(&path, &iuv).unwrap();
    assert_eq!(load_iuv(&path).unwrap(), iuv);
}
