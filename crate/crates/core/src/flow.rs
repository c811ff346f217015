//! Point clouds, flow fields and the rigid + non-rigid motion model.

use crate::data::{GroundTruth, ScenePair};
use crate::error::{Error, Result};
use crate::geometry::{Mat3, RigidTransform, Vec3};

/// An unordered set of camera-frame points (meters).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinitePoint(i));
        }
        Ok(Self { points })
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::DimensionMismatch {
                expected: flat.len() / 3 * 3,
                found: flat.len(),
            });
        }
        Self::new(
            flat.chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec3> {
        self.points.iter()
    }

    /// Row-major `N×3` copy.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.points)
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
        }
    }

    /// Points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }
}

/// Which component of the motion model a flow field represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowKind {
    Total,
    NonRigid,
    EgoMotion,
}

/// Per-point displacement, tagged with its kind.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    vectors: Vec<Vec3>,
    kind: FlowKind,
}

impl FlowField {
    pub fn new(vectors: Vec<Vec3>, kind: FlowKind) -> Result<Self> {
        if let Some(i) = vectors.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinitePoint(i));
        }
        Ok(Self { vectors, kind })
    }

    pub fn zeros(n: usize, kind: FlowKind) -> Self {
        Self {
            vectors: vec![Vec3::zeros(); n],
            kind,
        }
    }

    pub fn from_flat(flat: &[f64], kind: FlowKind) -> Result<Self> {
        Self::new(
            flat.chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
            kind,
        )
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn kind(&self) -> FlowKind {
        self.kind
    }

    pub fn vectors(&self) -> &[Vec3] {
        &self.vectors
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.vectors)
    }

    /// Same vectors under a different tag.
    pub fn retagged(self, kind: FlowKind) -> Self {
        Self { kind, ..self }
    }

    pub fn select(&self, indices: &[usize]) -> FlowField {
        FlowField {
            vectors: indices.iter().map(|&i| self.vectors[i]).collect(),
            kind: self.kind,
        }
    }

    pub fn rotated(&self, r: &Mat3) -> FlowField {
        FlowField {
            vectors: self.vectors.iter().map(|v| r * v).collect(),
            kind: self.kind,
        }
    }

    pub fn expect_kind(&self, kind: FlowKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::FlowKindMismatch {
                expected: kind,
                found: self.kind,
            });
        }
        Ok(())
    }
}

pub(crate) fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Apparent motion induced purely by the camera: `(R − I)·x + t`.
pub fn ego_motion_flow(p: &PointCloud, t_rel: &RigidTransform) -> FlowField {
    let r_minus_i = t_rel.rotation - Mat3::identity();
    FlowField {
        vectors: p
            .iter()
            .map(|x| r_minus_i * x + t_rel.translation)
            .collect(),
        kind: FlowKind::EgoMotion,
    }
}

/// Total flow from a non-rigid estimate and a rigid pose estimate.
pub fn compose_total_flow(
    d_nr: &FlowField,
    p: &PointCloud,
    rotation: &Mat3,
    translation: &Vec3,
) -> Result<FlowField> {
    d_nr.expect_kind(FlowKind::NonRigid)?;
    check_len(p.len(), d_nr.len())?;
    let em = ego_motion_flow(p, &RigidTransform::new(*rotation, *translation));
    Ok(FlowField {
        vectors: d_nr
            .vectors
            .iter()
            .zip(&em.vectors)
            .map(|(a, b)| a + b)
            .collect(),
        kind: FlowKind::Total,
    })
}

/// `x + d` for every point.
pub fn warp(p: &PointCloud, d: &FlowField) -> Result<PointCloud> {
    check_len(p.len(), d.len())?;
    PointCloud::new(p.iter().zip(&d.vectors).map(|(x, v)| x + v).collect())
}

/// Applies a rigid augmentation `G` consistently to both clouds, the flows
/// and the relative pose. Non-rigid transforms (such as scaling) are never
/// applied here since they would break the metric units of the ego-motion
/// model.
pub fn augment_pair(sample: &ScenePair, g: &RigidTransform) -> ScenePair {
    let truth = sample.truth_untracked().map(|t| GroundTruth {
        total: t.total.rotated(&g.rotation),
        nonrigid: t.nonrigid.rotated(&g.rotation),
        relative: g.compose(&t.relative).compose(&g.inverse()),
    });
    ScenePair::from_parts(
        sample.scene_id.clone(),
        sample.p1.transformed(g),
        sample.p2.transformed(g),
        truth,
        sample.intrinsics,
        sample.time_delta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneGenConfig};
    use crate::geometry::{rot_z, EulerPose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(1.0..10.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        EulerPose::new(
            Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
            Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ),
        )
        .to_transform()
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::EmptyCloud)));
        assert!(matches!(
            PointCloud::new(vec![Vec3::zeros(), Vec3::new(f64::NAN, 0.0, 0.0)]),
            Err(Error::NonFinitePoint(1))
        ));
    }

    #[test]
    fn ego_motion_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_cloud(&mut rng, 100);
        let zero = ego_motion_flow(&p, &RigidTransform::identity());
        assert!(zero.vectors().iter().all(|v| *v == Vec3::zeros()));

        let single = PointCloud::new(vec![Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        let d = ego_motion_flow(
            &single,
            &RigidTransform::new(rot_z(std::f64::consts::FRAC_PI_2), Vec3::zeros()),
        );
        assert!((d.vectors()[0] - Vec3::new(-1.0, 1.0, 0.0)).amax() < 1e-15);

        for _ in 0..10 {
            let t = random_transform(&mut rng);
            let d = ego_motion_flow(&p, &t);
            for (x, v) in p.iter().zip(d.vectors()) {
                assert!((v - (t.apply(x) - x)).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn ego_motion_zero_only_at_identity() {
        let p = PointCloud::new(vec![
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 0.0, 1.0),
            Vec3::new(0.0, 1.0, 2.0),
        ])
        .unwrap();
        let tiny = RigidTransform::from_euler(&Vec3::new(0.0, 0.0, 1e-6), Vec3::zeros());
        assert!(ego_motion_flow(&p, &tiny)
            .vectors()
            .iter()
            .any(|v| v.norm() > 0.0));
    }

    #[test]
    fn compose_total_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_cloud(&mut rng, 50);
        let zero_nr = FlowField::zeros(50, FlowKind::NonRigid);
        let id = RigidTransform::identity();
        let total = compose_total_flow(&zero_nr, &p, &id.rotation, &id.translation).unwrap();
        assert!(total.vectors().iter().all(|v| *v == Vec3::zeros()));

        let t = random_transform(&mut rng);
        let total = compose_total_flow(&zero_nr, &p, &t.rotation, &t.translation).unwrap();
        assert_eq!(total.vectors(), ego_motion_flow(&p, &t).vectors());

        let nr = FlowField::new(
            (0..50)
                .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect(),
            FlowKind::NonRigid,
        )
        .unwrap();
        let total = compose_total_flow(&nr, &p, &t.rotation, &t.translation).unwrap();
        for ((x, a), b) in p.iter().zip(nr.vectors()).zip(total.vectors()) {
            let oracle = a + t.rotation * x + t.translation - x;
            assert!((b - oracle).amax() < 1e-12);
        }
        assert_eq!(total.kind(), FlowKind::Total);
    }

    #[test]
    fn compose_rejects_wrong_kind_and_length() {
        let p = PointCloud::new(vec![Vec3::zeros(); 3]).unwrap();
        let r = Mat3::identity();
        let t = Vec3::zeros();
        let total = FlowField::zeros(3, FlowKind::Total);
        assert!(matches!(
            compose_total_flow(&total, &p, &r, &t),
            Err(Error::FlowKindMismatch { .. })
        ));
        let short = FlowField::zeros(2, FlowKind::NonRigid);
        assert!(matches!(
            compose_total_flow(&short, &p, &r, &t),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn warp_cases() {
        let p = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0)]).unwrap();
        let z = FlowField::zeros(1, FlowKind::Total);
        assert_eq!(warp(&p, &z).unwrap(), p);
        let d = FlowField::new(vec![Vec3::new(0.1, 0.0, 0.0)], FlowKind::Total).unwrap();
        assert_eq!(warp(&p, &d).unwrap().points()[0], Vec3::new(1.1, 2.0, 3.0));
        assert!(warp(&p, &FlowField::zeros(2, FlowKind::Total)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_cloud(&mut rng, 100);
        let t = random_transform(&mut rng);
        let warped = warp(&p, &ego_motion_flow(&p, &t)).unwrap();
        let moved = p.transformed(&t);
        for (a, b) in warped.iter().zip(moved.iter()) {
            assert!((a - b).amax() < 1e-12);
        }
    }

    fn sample() -> ScenePair {
        let cfg = SceneGenConfig {
            n: 64,
            m: 64,
            seed: 9,
            ..SceneGenConfig::default()
        };
        generate_scene(&cfg).unwrap()
    }

    #[test]
    fn augment_identity_and_translation() {
        let s = sample();
        let same = augment_pair(&s, &RigidTransform::identity());
        assert_eq!(same.p1, s.p1);
        assert_eq!(same.p2, s.p2);
        assert_eq!(same.truth_untracked(), s.truth_untracked());

        let g = RigidTransform::from_translation(Vec3::new(0.5, -1.0, 2.0));
        let moved = augment_pair(&s, &g);
        let (a, b) = (moved.truth_untracked().unwrap(), s.truth_untracked().unwrap());
        assert_eq!(a.relative.rotation, b.relative.rotation);
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn augment_keeps_warp_consistency_and_decomposition() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let g = random_transform(&mut rng);
            let a = augment_pair(&s, &g);
            let ta = a.truth_untracked().unwrap();
            let ts = s.truth_untracked().unwrap();
            let lhs = warp(&a.p1, &ta.total).unwrap();
            let rhs = warp(&s.p1, &ts.total).unwrap().transformed(&g);
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                assert!((x - y).amax() < 1e-9);
            }
            let em = ego_motion_flow(&a.p1, &ta.relative);
            for ((d, nr), e) in ta.total.vectors().iter().zip(ta.nonrigid.vectors()).zip(em.vectors()) {
                assert!((d - nr - e).amax() < 1e-9);
            }
        }
    }
}
