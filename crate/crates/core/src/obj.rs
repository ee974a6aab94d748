//! Wavefront OBJ export of triangle meshes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// `v` lines with six decimals, then 1-indexed `f` lines.
pub fn obj_string(vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> Result<String> {
    if vertices.is_empty() || faces.is_empty() {
        return Err(Error::InvalidInput("cannot export an empty mesh".into()));
    }
    let mut out = String::with_capacity(40 * vertices.len() + 20 * faces.len());
    for v in vertices {
        if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
            return Err(Error::NonFinite { term: "mesh vertex".into() });
        }
        writeln!(out, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z).unwrap();
    }
    for f in faces {
        if let Some(&i) = f.iter().find(|&&i| i >= vertices.len()) {
            return Err(Error::InvalidInput(format!("face references vertex {i} of {}", vertices.len())));
        }
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    Ok(out)
}

/// Writes the mesh. Nothing is written when the mesh is rejected.
pub fn export_obj(path: impl AsRef<Path>, vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> Result<()> {
    let path = path.as_ref();
    let text = obj_string(vertices, faces)?;
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::make_mini_model;

    // minimal independent reader: v/f records only, 1-indexed, ignores the rest
    fn read_obj(text: &str) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
        let mut vs = Vec::new();
        let mut fs = Vec::new();
        for line in text.lines() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it.map(|s| s.parse().unwrap()).collect();
                    vs.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let c: Vec<usize> = it.map(|s| s.split('/').next().unwrap().parse::<usize>().unwrap() - 1).collect();
                    fs.push([c[0], c[1], c[2]]);
                }
                _ => {}
            }
        }
        (vs, fs)
    }

    #[test]
    fn single_triangle() {
        let v = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, -0.5)];
        let text = obj_string(&v, &[[0, 1, 2]]).unwrap();
        assert_eq!(
            text,
            "v 0.000000 0.000000 0.000000\nv 1.000000 0.000000 0.000000\nv 0.000000 1.000000 -0.500000\nf 1 2 3\n"
        );
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 1);
        assert!(!text.contains('\r'));
    }

    #[test]
    fn round_trip_through_reader() {
        let model = make_mini_model(0, 42);
        let body = model
            .forward(&crate::body_model::PoseParams::zeros(model.num_kin()), &crate::body_model::ShapeParams::zeros(model.num_betas))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.obj");
        export_obj(&path, &body.vertices, &model.faces).unwrap();
        let (vs, faces) = read_obj(&fs::read_to_string(&path).unwrap());
        assert_eq!(vs.len(), body.vertices.len());
        assert_eq!(faces, model.faces);
        for (a, b) in vs.iter().zip(&body.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 5e-7 + 1e-12);
            }
        }
    }

    #[test]
    fn empty_mesh_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.obj");
        assert!(export_obj(&path, &[], &[]).is_err());
        assert!(!path.exists());
        let v = [Vector3::zeros(); 3];
        assert!(export_obj(&path, &v, &[[0, 1, 3]]).is_err());
        assert!(!path.exists());
    }
}
