//! Deterministic "capsule person" used in place of a licensed body asset.
//!
//! Sixteen kinematic joints, grouped into six body parts. Each part is one
//! tube running along its chain of joints, with a ring of vertices at every
//! joint and halfway between joints, and a pole vertex closing each free
//! end. Every part owns one UV chart: u runs around the tube, v along it.
//! Ring seams are split so UV coordinates never wrap, and rings shared by
//! two parts are duplicated, one copy per chart.

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::BodyModel;

/// Vertices around a ring: torso and head, then limbs.
const TRUNK_SEGMENTS: usize = 6;
const LIMB_SEGMENTS: usize = 4;
const NUM_BETAS: usize = 10;
/// Pole offset beyond the last ring, in ring radii.
const CAP_DEPTH: f64 = 0.5;

const PARENTS: [Option<usize>; 16] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(1),
    Some(4),
    Some(5),
    Some(1),
    Some(7),
    Some(8),
    Some(0),
    Some(10),
    Some(11),
    Some(0),
    Some(13),
    Some(14),
];

const RADII: [f64; 16] = [
    0.13, 0.14, 0.05, 0.10, 0.05, 0.04, 0.035, 0.05, 0.04, 0.035, 0.075, 0.055, 0.04, 0.075, 0.055, 0.04,
];

fn joint_positions() -> Vec<Vector3<f64>> {
    // image-aligned axes: x right, y down, z away from the camera
    vec![
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(0.0, -0.25, 0.0),
        Vector3::new(0.0, -0.52, 0.0),
        Vector3::new(0.0, -0.62, 0.0),
        Vector3::new(0.17, -0.47, 0.0),
        Vector3::new(0.45, -0.47, 0.0),
        Vector3::new(0.70, -0.47, 0.0),
        Vector3::new(-0.17, -0.47, 0.0),
        Vector3::new(-0.45, -0.47, 0.0),
        Vector3::new(-0.70, -0.47, 0.0),
        Vector3::new(0.10, 0.06, 0.0),
        Vector3::new(0.10, 0.50, 0.0),
        Vector3::new(0.10, 0.90, 0.0),
        Vector3::new(-0.10, 0.06, 0.0),
        Vector3::new(-0.10, 0.50, 0.0),
        Vector3::new(-0.10, 0.90, 0.0),
    ]
}

struct Chain {
    part: u8,
    joints: &'static [usize],
    /// Where the tube ends; a joint id when another part continues from there.
    end: End,
    root_pole: bool,
}

enum End {
    Joint(usize),
    Free([f64; 3], f64),
}

fn chains() -> Vec<Chain> {
    let free = |p: [f64; 3], r: f64| End::Free(p, r);
    vec![
        Chain { part: 1, joints: &[0, 1], end: End::Joint(2), root_pole: true },
        Chain { part: 2, joints: &[2, 3], end: free([0.0, -0.84, 0.0], 0.08), root_pole: false },
        Chain { part: 3, joints: &[4, 5, 6], end: free([0.82, -0.47, 0.0], 0.028), root_pole: true },
        Chain { part: 4, joints: &[7, 8, 9], end: free([-0.82, -0.47, 0.0], 0.028), root_pole: true },
        Chain { part: 5, joints: &[10, 11, 12], end: free([0.10, 0.94, -0.14], 0.032), root_pole: true },
        Chain { part: 6, joints: &[13, 14, 15], end: free([-0.10, 0.94, -0.14], 0.032), root_pole: true },
    ]
}

/// Skinning weights of the ring sitting on joint `k`.
fn joint_ring_weights(k: usize, n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    match PARENTS[k] {
        Some(p) => {
            w[k] = 0.6;
            w[p] = 0.4;
        }
        None => w[k] = 1.0,
    }
    w
}

/// Per-vertex attributes that are interpolated linearly under subdivision.
#[derive(Clone)]
struct Attr {
    pos: Vector3<f64>,
    uv: [f64; 2],
    weights: Vec<f64>,
    shape: Vec<f64>,
    part: u8,
}

impl Attr {
    fn midpoint(a: &Attr, b: &Attr) -> Attr {
        Attr {
            pos: (a.pos + b.pos) * 0.5,
            uv: [(a.uv[0] + b.uv[0]) * 0.5, (a.uv[1] + b.uv[1]) * 0.5],
            weights: a.weights.iter().zip(&b.weights).map(|(x, y)| (x + y) * 0.5).collect(),
            shape: a.shape.iter().zip(&b.shape).map(|(x, y)| (x + y) * 0.5).collect(),
            part: a.part,
        }
    }
}

struct Ring {
    center: Vector3<f64>,
    axis: Vector3<f64>,
    radius: f64,
    weights: Vec<f64>,
    owner: usize,
    joint: Option<usize>,
}

/// Builds the mini body model. `n_subdiv` midpoint subdivisions each split
/// every triangle into four; `seed` drives the shape blendshapes.
pub fn make_mini_model(n_subdiv: u32, seed: u64) -> BodyModel {
    let joints = joint_positions();
    let k = joints.len();

    let mut attrs: Vec<Attr> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut radial: Vec<Vector3<f64>> = Vec::new();
    let mut owner: Vec<usize> = Vec::new();
    let mut joint_rings: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut end_poles: HashMap<usize, Vec<usize>> = HashMap::new();

    for chain in chains() {
        let (end_pos, end_radius, end_joint) = match chain.end {
            End::Joint(j) => (joints[j], RADII[j], Some(j)),
            End::Free(p, r) => (Vector3::new(p[0], p[1], p[2]), r, None),
        };
        let last = *chain.joints.last().unwrap();
        let segments = if chain.part <= 2 { TRUNK_SEGMENTS } else { LIMB_SEGMENTS };
        let mut rings = Vec::new();
        for (i, &j) in chain.joints.iter().enumerate() {
            let next = chain.joints.get(i + 1).map_or(end_pos, |&n| joints[n]);
            let axis = (next - joints[j]).normalize();
            rings.push(Ring {
                center: joints[j],
                axis,
                radius: RADII[j],
                weights: joint_ring_weights(j, k),
                owner: j,
                joint: Some(j),
            });
            let mut w = vec![0.0; k];
            w[j] = 1.0;
            rings.push(Ring {
                center: (joints[j] + next) * 0.5,
                axis,
                radius: RADII[j],
                weights: w,
                owner: j,
                joint: None,
            });
        }
        let last_axis = rings.last().unwrap().axis;
        let mut end_w = vec![0.0; k];
        end_w[last] = 1.0;
        rings.push(Ring {
            center: end_pos,
            axis: last_axis,
            radius: end_radius,
            weights: end_joint.map_or(end_w, |j| joint_ring_weights(j, k)),
            owner: last,
            joint: None,
        });

        let nr = rings.len();
        let mut push = |pos: Vector3<f64>, uv: [f64; 2], weights: &[f64], dir: Vector3<f64>, cap: usize| {
            attrs.push(Attr {
                pos,
                uv,
                weights: weights.to_vec(),
                shape: Vec::new(),
                part: chain.part,
            });
            radial.push(dir);
            owner.push(cap);
            attrs.len() - 1
        };

        // roughly length-preserving chart: u spans the widest circumference,
        // v the arc length from pole to pole, one common scale
        let cap_len = |r: f64| r * (1.0 + CAP_DEPTH * CAP_DEPTH).sqrt();
        let mut arc = vec![if chain.root_pole { cap_len(rings[0].radius) } else { 0.0 }];
        for i in 1..nr {
            arc.push(arc[i - 1] + (rings[i].center - rings[i - 1].center).norm());
        }
        let total = arc[nr - 1] + if end_joint.is_none() { cap_len(rings[nr - 1].radius) } else { 0.0 };
        let circ = 2.0 * std::f64::consts::PI * rings.iter().map(|r| r.radius).fold(0.0, f64::max);
        let scale = 0.96 / circ.max(total);
        let chart_u = |t: f64| 0.02 + scale * circ * t;
        let mut ring_ids: Vec<Vec<usize>> = Vec::new();
        for (i, ring) in rings.iter().enumerate() {
            let reference = if ring.axis.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
            let e1 = ring.axis.cross(&reference).normalize();
            let e2 = ring.axis.cross(&e1);
            let v = 0.02 + scale * arc[i];
            let ids: Vec<usize> = (0..=segments)
                .map(|s| {
                    let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
                    let dir = e1 * phi.cos() + e2 * phi.sin();
                    push(ring.center + dir * ring.radius, [chart_u(s as f64 / segments as f64), v], &ring.weights, dir, ring.owner)
                })
                .collect();
            if let Some(j) = ring.joint {
                joint_rings[j] = ids[..segments].to_vec();
            }
            ring_ids.push(ids);
        }

        let mut chain_faces: Vec<([usize; 3], Vector3<f64>)> = Vec::new();
        for i in 0..nr - 1 {
            let inner = (rings[i].center + rings[i + 1].center) * 0.5;
            let (a, b) = (&ring_ids[i], &ring_ids[i + 1]);
            for s in 0..segments {
                chain_faces.push(([a[s], a[s + 1], b[s + 1]], inner));
                chain_faces.push(([a[s], b[s + 1], b[s]], inner));
            }
        }
        let mut fan = |ring: &Ring, ids: &[usize], tip: Vector3<f64>, v: f64| {
            let pole = push(tip, [chart_u(0.5), v], &ring.weights, Vector3::zeros(), ring.owner);
            for s in 0..segments {
                chain_faces.push(([pole, ids[s], ids[s + 1]], ring.center));
            }
            vec![pole]
        };
        if chain.root_pole {
            let r = &rings[0];
            fan(r, &ring_ids[0], r.center - r.axis * (CAP_DEPTH * r.radius), 0.02);
        }
        if end_joint.is_none() {
            let r = &rings[nr - 1];
            let poles = fan(r, &ring_ids[nr - 1], r.center + r.axis * (CAP_DEPTH * r.radius), 0.02 + scale * total);
            end_poles.insert(last, poles);
        }
        for (mut f, inner) in chain_faces {
            let (p0, p1, p2) = (attrs[f[0]].pos, attrs[f[1]].pos, attrs[f[2]].pos);
            let n = (p1 - p0).cross(&(p2 - p0));
            let centroid = (p0 + p1 + p2) / 3.0;
            if n.dot(&(centroid - inner)) < 0.0 {
                f.swap(1, 2);
            }
            faces.push(f);
        }
    }

    // shape blendshapes
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let fields: Vec<[[f64; 3]; 3]> = (3..NUM_BETAS)
        .map(|_| {
            let mut m = [[0.0; 3]; 3];
            for row in m.iter_mut() {
                for x in row.iter_mut() {
                    *x = 0.03 * normal.sample(&mut rng);
                }
            }
            m
        })
        .collect();
    let girth: Vec<Vec<f64>> = (3..NUM_BETAS)
        .map(|_| (0..k).map(|_| 0.01 * normal.sample(&mut rng)).collect())
        .collect();
    for (i, attr) in attrs.iter_mut().enumerate() {
        let x = attr.pos;
        let mut dirs: Vec<Vector3<f64>> = vec![x * 0.08, Vector3::new(0.0, 0.06 * x.y, 0.0), radial[i] * 0.02];
        for (f, g) in fields.iter().zip(&girth) {
            let lin = Vector3::new(
                f[0][0] * x.x + f[0][1] * x.y + f[0][2] * x.z,
                f[1][0] * x.x + f[1][1] * x.y + f[1][2] * x.z,
                f[2][0] * x.x + f[2][1] * x.y + f[2][2] * x.z,
            );
            dirs.push(lin + radial[i] * g[owner[i]]);
        }
        // row-major [axis][beta]
        attr.shape = (0..3).flat_map(|a| dirs.iter().map(move |d| d[a])).collect();
    }

    for _ in 0..n_subdiv {
        subdivide(&mut attrs, &mut faces);
    }

    let nv = attrs.len();
    let ring_row = |members: &[usize]| {
        let mut row = vec![0.0; nv];
        for &m in members {
            row[m] += 1.0 / members.len() as f64;
        }
        row
    };
    let mut kin_regressor = Vec::with_capacity(k * nv);
    for ring in joint_rings.iter() {
        kin_regressor.extend(ring_row(ring));
    }
    let mut joint_regressor = kin_regressor.clone();
    for tip in [3, 12, 15] {
        joint_regressor.extend(ring_row(&end_poles[&tip]));
    }
    let shoulders: Vec<usize> = joint_rings[4].iter().chain(&joint_rings[7]).copied().collect();
    joint_regressor.extend(ring_row(&shoulders));

    BodyModel {
        template_vertices: attrs.iter().map(|a| a.pos).collect(),
        shape_dirs: attrs.iter().flat_map(|a| a.shape.iter().copied()).collect(),
        num_betas: NUM_BETAS,
        pose_dirs: Vec::new(),
        faces,
        kin_parents: PARENTS.to_vec(),
        kin_regressor,
        skin_weights: attrs.iter().flat_map(|a| a.weights.iter().copied()).collect(),
        joint_regressor,
        num_joints: k + 4,
        part_labels: attrs.iter().map(|a| a.part).collect(),
        vertex_uv: attrs.iter().map(|a| a.uv).collect(),
        root_joint: 0,
    }
}

/// Midpoint subdivision. Original vertices keep their indices; one new
/// vertex is appended per undirected edge.
fn subdivide(attrs: &mut Vec<Attr>, faces: &mut Vec<[usize; 3]>) {
    let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
    let mut out = Vec::with_capacity(faces.len() * 4);
    for f in faces.iter() {
        let mut m = [0usize; 3];
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            let key = (a.min(b), a.max(b));
            m[e] = *midpoints.entry(key).or_insert_with(|| {
                let mid = Attr::midpoint(&attrs[a], &attrs[b]);
                attrs.push(mid);
                attrs.len() - 1
            });
        }
        out.push([f[0], m[0], m[2]]);
        out.push([m[0], f[1], m[1]]);
        out.push([m[2], m[1], f[2]]);
        out.push([m[0], m[1], m[2]]);
    }
    *faces = out;
}
