//! Pose and mesh error metrics.
//!
//! Inputs are in whatever unit the caller uses; the CLI converts meters to
//! millimeters before calling in.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

fn check_pair(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::dims("prediction points", gt.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("no points to evaluate".into()));
    }
    Ok(())
}

fn mean_distance(pred: impl Iterator<Item = Vector3<f64>>, gt: &[Vector3<f64>]) -> f64 {
    pred.zip(gt).map(|(p, g)| (p - g).norm()).sum::<f64>() / gt.len() as f64
}

/// Mean distance after translating both sets so their roots coincide.
pub fn root_aligned_error(pred: &[Vector3<f64>], gt: &[Vector3<f64>], pred_root: &Vector3<f64>, gt_root: &Vector3<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let shift = gt_root - pred_root;
    Ok(mean_distance(pred.iter().map(|p| p + shift), gt))
}

/// Mean per-joint position error with root alignment on joint `root`.
pub fn mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>], root: usize) -> Result<f64> {
    check_pair(pred, gt)?;
    if root >= pred.len() {
        return Err(Error::InvalidInput(format!("root joint {root} out of range for {} joints", pred.len())));
    }
    root_aligned_error(pred, gt, &pred[root], &gt[root])
}

/// Mean per-vertex error; vertices are aligned through the root joints.
pub fn mpve(pred: &[Vector3<f64>], gt: &[Vector3<f64>], pred_root: &Vector3<f64>, gt_root: &Vector3<f64>) -> Result<f64> {
    root_aligned_error(pred, gt, pred_root, gt_root)
}

/// Least-squares similarity transform taking `pred` onto `gt`.
pub fn procrustes_align(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Similarity> {
    check_pair(pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::Degenerate(format!("need at least 3 points, got {}", pred.len())));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<Vector3<f64>>() / n;
    let mg = gt.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut spread_pred = Matrix3::zeros();
    let mut var = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = (p - mp, g - mg);
        cov += b * a.transpose();
        spread_pred += a * a.transpose();
        var += a.norm_squared();
    }
    // collinear or coincident prediction points leave the rotation undetermined
    let sv = spread_pred.symmetric_eigenvalues();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(f64::total_cmp);
    if !(sorted[2] > 0.0) || sorted[1] <= 1e-12 * sorted[2] {
        return Err(Error::Degenerate("prediction points are collinear".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var;
    Ok(Similarity {
        scale,
        rotation,
        translation: mg - rotation * mp * scale,
    })
}

/// Mean per-joint error after similarity alignment.
pub fn pa_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    let s = procrustes_align(pred, gt)?;
    Ok(mean_distance(pred.iter().map(|p| s.apply(p)), gt))
}

/// Fraction of matching labels per axis (x truncation, y truncation, z occlusion).
pub fn visibility_accuracy(pred: &[[u8; 3]], gt: &[[u8; 3]]) -> Result<[f64; 3]> {
    if pred.len() != gt.len() {
        return Err(Error::dims("predicted labels", gt.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("no labels to evaluate".into()));
    }
    let mut hits = [0usize; 3];
    for (p, g) in pred.iter().zip(gt) {
        for a in 0..3 {
            hits[a] += (p[a] == g[a]) as usize;
        }
    }
    Ok(hits.map(|h| h as f64 / pred.len() as f64))
}

/// Metrics of one evaluated example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub name: String,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub mpve_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility_accuracy: Option<[f64; 3]>,
}

/// Points of one example in millimeters.
pub struct EvalExample<'a> {
    pub name: String,
    pub pred_joints: &'a [Vector3<f64>],
    pub gt_joints: &'a [Vector3<f64>],
    pub pred_vertices: &'a [Vector3<f64>],
    pub gt_vertices: &'a [Vector3<f64>],
    pub root: usize,
    pub labels: Option<(&'a [[u8; 3]], &'a [[u8; 3]])>,
}

impl EvalExample<'_> {
    pub fn evaluate(&self) -> Result<ExampleMetrics> {
        let mpjpe_mm = mpjpe(self.pred_joints, self.gt_joints, self.root)?;
        let pa_mpjpe_mm = pa_mpjpe(self.pred_joints, self.gt_joints)?;
        let mpve_mm = mpve(
            self.pred_vertices,
            self.gt_vertices,
            &self.pred_joints[self.root],
            &self.gt_joints[self.root],
        )?;
        let visibility_accuracy = self.labels.map(|(p, g)| visibility_accuracy(p, g)).transpose()?;
        Ok(ExampleMetrics {
            name: self.name.clone(),
            mpjpe_mm,
            pa_mpjpe_mm,
            mpve_mm,
            visibility_accuracy,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub mpve_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility_accuracy: Option<[f64; 3]>,
    pub examples: Vec<ExampleMetrics>,
}

impl MetricsReport {
    /// Means over examples, in input order.
    pub fn from_examples(examples: Vec<ExampleMetrics>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidInput("no examples to report".into()));
        }
        let n = examples.len() as f64;
        let mean = |f: fn(&ExampleMetrics) -> f64| examples.iter().map(f).sum::<f64>() / n;
        let with_vis: Vec<[f64; 3]> = examples.iter().filter_map(|e| e.visibility_accuracy).collect();
        let visibility_accuracy = (!with_vis.is_empty()).then(|| {
            let m = with_vis.len() as f64;
            [0, 1, 2].map(|a| with_vis.iter().map(|v| v[a]).sum::<f64>() / m)
        });
        Ok(Self {
            mpjpe_mm: mean(|e| e.mpjpe_mm),
            pa_mpjpe_mm: mean(|e| e.pa_mpjpe_mm),
            mpve_mm: mean(|e| e.mpve_mm),
            visibility_accuracy,
            examples,
        })
    }

    /// One line per example: `name,mpjpe_mm,pa_mpjpe_mm,mpve_mm`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,mpjpe_mm,pa_mpjpe_mm,mpve_mm\n");
        for e in &self.examples {
            out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", e.name, e.mpjpe_mm, e.pa_mpjpe_mm, e.mpve_mm));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::rotation::rodrigues;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(r: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(r.random_range(-500.0..500.0), r.random_range(-500.0..500.0), r.random_range(-500.0..500.0)))
            .collect()
    }

    fn random_similarity(r: &mut ChaCha8Rng) -> Similarity {
        Similarity {
            scale: r.random_range(0.2..5.0),
            rotation: rodrigues(&Vector3::new(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(-3.0..3.0))),
            translation: Vector3::new(r.random_range(-1e3..1e3), r.random_range(-1e3..1e3), r.random_range(-1e3..1e3)),
        }
    }

    fn sq_residual(s: &Similarity, pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
        pred.iter().zip(gt).map(|(p, g)| (s.apply(p) - g).norm_squared()).sum()
    }

    #[test]
    fn mpjpe_cases() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let gt = cloud(&mut r, 20);
        assert_eq!(mpjpe(&gt, &gt, 0).unwrap(), 0.0);
        let shifted: Vec<_> = gt.iter().enumerate().map(|(i, g)| if i == 0 { *g } else { g + Vector3::new(10.0, 0.0, 0.0) }).collect();
        // the root itself contributes 0, the other 19 joints 10 each
        assert!((mpjpe(&shifted, &gt, 0).unwrap() - 10.0 * 19.0 / 20.0).abs() < 1e-9);

        let pred = cloud(&mut r, 20);
        let root = 3;
        let mut expected = 0.0;
        for i in 0..20 {
            let d = (pred[i] - pred[root]) - (gt[i] - gt[root]);
            expected += (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
        }
        assert!((mpjpe(&pred, &gt, root).unwrap() - expected / 20.0).abs() < 1e-9);
        assert!(mpjpe(&pred, &gt[..5], 0).is_err());
        assert!(mpjpe(&pred, &gt, 20).is_err());
    }

    #[test]
    fn mpve_mirrors_mpjpe() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let gt = cloud(&mut r, 30);
        let root = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(mpve(&gt, &gt, &root, &root).unwrap(), 0.0);
        let moved: Vec<_> = gt.iter().map(|g| g + Vector3::new(10.0, 0.0, 0.0)).collect();
        assert!((mpve(&moved, &gt, &root, &root).unwrap() - 10.0).abs() < 1e-9);
        let pred = cloud(&mut r, 30);
        let pr = Vector3::new(-4.0, 0.5, 9.0);
        let expected: f64 = pred.iter().zip(&gt).map(|(p, g)| ((p - pr) - (g - root)).norm()).sum::<f64>() / 30.0;
        assert!((mpve(&pred, &gt, &pr, &root).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn procrustes_exact_recovery() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pred = cloud(&mut r, 15);
            let s = random_similarity(&mut r);
            let gt: Vec<_> = pred.iter().map(|p| s.apply(p)).collect();
            let got = procrustes_align(&pred, &gt).unwrap();
            assert!((got.scale - s.scale).abs() < 1e-9 * s.scale);
            assert!(pa_mpjpe(&pred, &gt).unwrap() < 1e-9);
        }
        let pred = cloud(&mut r, 10);
        let id = procrustes_align(&pred, &pred).unwrap();
        assert!((id.scale - 1.0).abs() < 1e-12);
        assert!((id.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(id.translation.norm() < 1e-9);
    }

    #[test]
    fn procrustes_beats_random_search() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let pred = cloud(&mut r, 12);
        let gt = cloud(&mut r, 12);
        let best = sq_residual(&procrustes_align(&pred, &gt).unwrap(), &pred, &gt);
        for _ in 0..1000 {
            let s = random_similarity(&mut r);
            assert!(best <= sq_residual(&s, &pred, &gt) + 1e-9);
        }
        assert!(best <= sq_residual(&Similarity::identity(), &pred, &gt));
    }

    #[test]
    fn procrustes_rejects_degenerate() {
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(procrustes_align(&line, &line), Err(Error::Degenerate(_))));
        let two = vec![Vector3::zeros(), Vector3::x()];
        assert!(procrustes_align(&two, &two).is_err());
    }

    #[test]
    fn procrustes_never_reflects() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let pred = cloud(&mut r, 10);
        let mirrored: Vec<_> = pred.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let s = procrustes_align(&pred, &mirrored).unwrap();
        assert!((s.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn least_squares_alignment_can_raise_mean_distance() {
        // exact skeleton except one joint far off: root alignment leaves a
        // single error, the least-squares fit spreads it over every joint
        let gt: Vec<Vector3<f64>> = (0..10).map(|i| Vector3::new(i as f64 * 100.0, (i % 3) as f64 * 50.0, (i % 2) as f64 * 70.0)).collect();
        let mut pred = gt.clone();
        pred[9] += Vector3::new(0.0, 400.0, 0.0);
        let root_aligned = mpjpe(&pred, &gt, 0).unwrap();
        let pa = pa_mpjpe(&pred, &gt).unwrap();
        assert!((root_aligned - 40.0).abs() < 1e-9);
        assert!(pa > root_aligned, "{pa} vs {root_aligned}");
        let s = procrustes_align(&pred, &gt).unwrap();
        assert!(sq_residual(&s, &pred, &gt) < 400.0 * 400.0);
    }

    #[test]
    fn visibility_accuracy_cases() {
        let a = vec![[1, 0, 1], [0, 0, 1], [1, 1, 0]];
        assert_eq!(visibility_accuracy(&a, &a).unwrap(), [1.0; 3]);
        let c: Vec<[u8; 3]> = a.iter().map(|l| l.map(|x| 1 - x)).collect();
        assert_eq!(visibility_accuracy(&c, &a).unwrap(), [0.0; 3]);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let p: Vec<[u8; 3]> = (0..100).map(|_| [0, 1, 2].map(|_| r.random_range(0..2))).collect();
        let g: Vec<[u8; 3]> = (0..100).map(|_| [0, 1, 2].map(|_| r.random_range(0..2))).collect();
        let got = visibility_accuracy(&p, &g).unwrap();
        for a in 0..3 {
            let n = (0..100).filter(|&i| p[i][a] == g[i][a]).count();
            assert_eq!(got[a], n as f64 / 100.0);
        }
    }

    #[test]
    fn report_means_and_csv() {
        let ex = |name: &str, v: f64| ExampleMetrics {
            name: name.into(),
            mpjpe_mm: v,
            pa_mpjpe_mm: v / 2.0,
            mpve_mm: v * 2.0,
            visibility_accuracy: None,
        };
        let rep = MetricsReport::from_examples(vec![ex("a", 10.0), ex("b", 20.0)]).unwrap();
        assert_eq!(rep.mpjpe_mm, 15.0);
        assert_eq!(rep.pa_mpjpe_mm, 7.5);
        assert_eq!(rep.to_csv().lines().count(), 3);
        assert!(MetricsReport::from_examples(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn pa_is_similarity_invariant(seed in 0u64..10_000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let pred = cloud(&mut r, 20);
            let gt = cloud(&mut r, 20);
            let s = random_similarity(&mut r);
            let moved: Vec<_> = pred.iter().map(|p| s.apply(p)).collect();
            let a = pa_mpjpe(&pred, &gt).unwrap();
            let b = pa_mpjpe(&moved, &gt).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }

        #[test]
        fn procrustes_residual_never_exceeds_root_alignment(seed in 0u64..10_000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let gt = cloud(&mut r, 20);
            let pred: Vec<_> = gt.iter().map(|g| g + Vector3::new(r.random_range(-80.0..80.0), r.random_range(-80.0..80.0), r.random_range(-80.0..80.0))).collect();
            let s = procrustes_align(&pred, &gt).unwrap();
            let offset = Similarity {
                translation: gt[0] - pred[0],
                ..Similarity::identity()
            };
            let aligned = sq_residual(&s, &pred, &gt);
            prop_assert!(aligned <= sq_residual(&offset, &pred, &gt) * (1.0 + 1e-12));
            prop_assert!(aligned <= sq_residual(&Similarity::identity(), &pred, &gt) * (1.0 + 1e-12));
        }

        #[test]
        fn mpjpe_ignores_constant_offset(seed in 0u64..10_000, dx in -1e3f64..1e3, dy in -1e3f64..1e3, dz in -1e3f64..1e3) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let gt = cloud(&mut r, 20);
            let pred = cloud(&mut r, 20);
            let moved: Vec<_> = pred.iter().map(|p| p + Vector3::new(dx, dy, dz)).collect();
            prop_assert!((mpjpe(&pred, &gt, 0).unwrap() - mpjpe(&moved, &gt, 0).unwrap()).abs() < 1e-9);
        }
    }
}
