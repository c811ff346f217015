//! Training objectives.
//!
//! Every term exists twice: as a plain evaluator over flow fields and as a
//! graph builder used for training. The two agree to rounding.

use crate::autodiff::{Graph, Var};
use crate::data::GroundTruth;
use crate::error::{Error, Result};
use crate::flow::{warp, FlowField, FlowKind, PointCloud};
use crate::geometry::{EulerPose, Vec3};
use crate::net::{pipeline_graph, FlowNetwork, Matcher, PipelineOptions, PipelineVars, Predictions};
use crate::nn::NeighborIndex;

/// Weights of the combined objective
/// `w_epe3d·L_epe3d + w_nr·L_nr + w_r·L_r + w_fb·L_fb + w_nn·L_nn`.
/// `w_rot` scales the rotation part inside `L_r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub epe3d: f64,
    pub nonrigid: f64,
    pub rigid: f64,
    pub rot: f64,
    pub fb: f64,
    pub nn: f64,
}

impl LossWeights {
    /// Supervised terms only.
    pub fn full() -> Self {
        Self {
            epe3d: 1.0,
            nonrigid: 1.0,
            rigid: 1.0,
            rot: 10.0,
            fb: 0.0,
            nn: 0.0,
        }
    }

    /// Supervised plus self-supervised terms.
    pub fn hybrid() -> Self {
        Self {
            fb: 1.0,
            nn: 1.0,
            ..Self::full()
        }
    }

    /// Only the cycle and nearest-neighbour terms.
    pub fn self_supervised() -> Self {
        Self {
            epe3d: 0.0,
            nonrigid: 0.0,
            rigid: 0.0,
            ..Self::hybrid()
        }
    }

    pub fn zero() -> Self {
        Self {
            epe3d: 0.0,
            nonrigid: 0.0,
            rigid: 0.0,
            rot: 10.0,
            fb: 0.0,
            nn: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.epe3d, self.nonrigid, self.rigid, self.rot, self.fb, self.nn];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// True when any term needs labels.
    pub fn needs_truth(&self) -> bool {
        self.epe3d > 0.0 || self.nonrigid > 0.0 || self.rigid > 0.0
    }

    pub fn needs_cycle(&self) -> bool {
        self.fb > 0.0
    }
}

/// Values of the individual terms and their weighted sum. Terms whose weight
/// is zero are not evaluated and reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub epe3d: f64,
    pub nonrigid: f64,
    pub rigid: f64,
    pub fb: f64,
    pub nn: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.epe3d, self.nonrigid, self.rigid, self.fb, self.nn]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn mean_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64)
}

/// Mean end-point error between two total flows.
pub fn epe3d_loss(d_hat: &FlowField, d_gt: &FlowField) -> Result<f64> {
    d_hat.expect_kind(FlowKind::Total)?;
    d_gt.expect_kind(FlowKind::Total)?;
    mean_distance(d_hat.vectors(), d_gt.vectors())
}

/// Mean end-point error between two non-rigid flows.
pub fn nonrigid_loss(d_hat: &FlowField, d_gt: &FlowField) -> Result<f64> {
    d_hat.expect_kind(FlowKind::NonRigid)?;
    d_gt.expect_kind(FlowKind::NonRigid)?;
    mean_distance(d_hat.vectors(), d_gt.vectors())
}

/// `w_rot·‖r − r̂‖ + ‖t − t̂‖` on Euler angles and translations.
pub fn rigid_loss(r_hat: &Vec3, t_hat: &Vec3, r_gt: &Vec3, t_gt: &Vec3, w_rot: f64) -> f64 {
    w_rot * (r_gt - r_hat).norm() + (t_gt - t_hat).norm()
}

/// Intermediate clouds of the forward-backward cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleArtifacts {
    /// `x̃₂ = x₁ + d̂`
    pub forward_warp: PointCloud,
    /// Nearest neighbour of each `x̃₂` in the second cloud.
    pub nn_match: PointCloud,
    /// `x₂* = (x̃₂ + x_nn) / 2`
    pub anchor: PointCloud,
    /// Flow predicted from the anchors back towards the first cloud.
    pub reverse_flow: FlowField,
    /// `x̃₁ = x₂* + d̃`
    pub cycle_end: PointCloud,
}

/// Builds the cycle: warp forward, snap halfway to the nearest neighbour,
/// then predict the reverse flow `(anchor, p1) → d̃` with `reverse`.
pub fn cycle_artifacts<F>(
    p1: &PointCloud,
    p2_index: &NeighborIndex,
    d_hat: &FlowField,
    reverse: F,
) -> Result<CycleArtifacts>
where
    F: FnOnce(&PointCloud, &PointCloud) -> Result<FlowField>,
{
    let forward_warp = warp(p1, d_hat)?;
    let nn: Vec<Vec3> = forward_warp
        .iter()
        .map(|x| p2_index.nearest(x).point)
        .collect();
    let anchor: Vec<Vec3> = forward_warp
        .iter()
        .zip(&nn)
        .map(|(w, m)| (w + m) * 0.5)
        .collect();
    let anchor = PointCloud::new(anchor)?;
    let reverse_flow = reverse(&anchor, p1)?;
    if reverse_flow.len() != anchor.len() {
        return Err(Error::DimensionMismatch {
            expected: anchor.len(),
            found: reverse_flow.len(),
        });
    }
    let cycle_end = warp(&anchor, &reverse_flow)?;
    Ok(CycleArtifacts {
        forward_warp,
        nn_match: PointCloud::new(nn)?,
        anchor,
        reverse_flow,
        cycle_end,
    })
}

/// Mean distance between each first-frame point and its cycle end.
pub fn fb_loss(p1: &PointCloud, artifacts: &CycleArtifacts) -> Result<f64> {
    mean_distance(p1.points(), artifacts.cycle_end.points())
}

/// Mean distance from each warped point to its nearest second-frame point.
pub fn nn_loss(p1: &PointCloud, d_hat: &FlowField, p2_index: &NeighborIndex) -> Result<f64> {
    let warped = warp(p1, d_hat)?;
    Ok(warped.iter().map(|x| p2_index.nearest(x).distance).sum::<f64>() / warped.len() as f64)
}

/// Weighted objective of one prediction. Labels are read from `truth` only
/// when a supervised weight is positive; `artifacts` is required when
/// `w_fb > 0`.
pub fn total_loss(
    scene_id: &str,
    p1: &PointCloud,
    p2_index: &NeighborIndex,
    truth: Option<&GroundTruth>,
    pred: &Predictions,
    artifacts: Option<&CycleArtifacts>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    let mut out = LossBreakdown::default();
    if w.needs_truth() {
        let gt = truth.ok_or_else(|| Error::MissingGroundTruth {
            scene_id: scene_id.to_string(),
        })?;
        if w.epe3d > 0.0 {
            out.epe3d = epe3d_loss(&pred.total, &gt.total)?;
        }
        if w.nonrigid > 0.0 || w.rigid > 0.0 {
            if !pred.ego_motion {
                return Err(Error::InvalidConfig(
                    "non-rigid and rigid losses need the ego-motion branch".into(),
                ));
            }
        }
        if w.nonrigid > 0.0 {
            out.nonrigid = nonrigid_loss(&pred.nonrigid, &gt.nonrigid)?;
        }
        if w.rigid > 0.0 {
            let g = EulerPose::from_transform(&gt.relative)?;
            out.rigid = rigid_loss(
                &pred.pose.angles,
                &pred.pose.translation,
                &g.angles,
                &g.translation,
                w.rot,
            );
        }
    }
    if w.fb > 0.0 {
        let a = artifacts.ok_or_else(|| Error::InvalidConfig("cycle loss needs cycle artifacts".into()))?;
        out.fb = fb_loss(p1, a)?;
    }
    if w.nn > 0.0 {
        out.nn = nn_loss(p1, &pred.total, p2_index)?;
    }
    out.total = w.epe3d * out.epe3d
        + w.nonrigid * out.nonrigid
        + w.rigid * out.rigid
        + w.fb * out.fb
        + w.nn * out.nn;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Graph versions.

/// Mean row distance between an `N×3` node and a constant field.
pub fn epe_node(g: &mut Graph, pred: Var, target: &FlowField) -> Result<Var> {
    let t = g.leaf(target.len(), 3, target.to_flat())?;
    let d = g.sub(pred, t)?;
    let n = g.row_norm(d);
    Ok(g.mean(n))
}

/// Rigid loss of `1×3` angle and translation nodes against a constant pose.
pub fn rigid_node(g: &mut Graph, angles: Var, translation: Var, gt: &EulerPose, w_rot: f64) -> Result<Var> {
    let ra = g.leaf(1, 3, gt.angles.as_slice().to_vec())?;
    let rt = g.leaf(1, 3, gt.translation.as_slice().to_vec())?;
    let da = g.sub(angles, ra)?;
    let da = g.row_norm(da);
    let da = g.scale(da, w_rot);
    let dt = g.sub(translation, rt)?;
    let dt = g.row_norm(dt);
    g.add(da, dt)
}

/// Per-term graph nodes; `None` for terms that were not built.
#[derive(Clone, Debug, Default)]
pub struct TermVars {
    pub epe3d: Option<Var>,
    pub nonrigid: Option<Var>,
    pub rigid: Option<Var>,
    pub fb: Option<Var>,
    pub nn: Option<Var>,
}

/// A built objective.
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: Var,
    pub terms: TermVars,
    pub forward: PipelineVars,
    pub reverse: Option<PipelineVars>,
}

impl Objective {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar(x));
        LossBreakdown {
            total: g.scalar(self.loss),
            epe3d: v(self.terms.epe3d),
            nonrigid: v(self.terms.nonrigid),
            rigid: v(self.terms.rigid),
            fb: v(self.terms.fb),
            nn: v(self.terms.nn),
        }
    }
}

/// Everything the objective needs about one sample.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveInput<'a> {
    pub scene_id: &'a str,
    pub p1: &'a PointCloud,
    pub p2: &'a PointCloud,
    pub p1_index: &'a NeighborIndex,
    pub p2_index: &'a NeighborIndex,
    pub truth: Option<&'a GroundTruth>,
}

/// Builds the forward pipeline and the weighted loss on `g`. The reverse
/// flow of the cycle comes from the same pipeline run on `(anchor, p1)`.
/// Nearest-neighbour matches enter as constants.
pub fn objective_graph<N: FlowNetwork + ?Sized>(
    g: &mut Graph,
    net: &N,
    input: &ObjectiveInput<'_>,
    w: &LossWeights,
    opts: PipelineOptions,
    matcher: &mut Matcher,
) -> Result<Objective> {
    w.validate()?;
    let source = g.leaf(input.p1.len(), 3, input.p1.to_flat())?;
    let target = g.leaf(input.p2.len(), 3, input.p2.to_flat())?;
    let forward = pipeline_graph(g, net, source, target, input.p2_index, matcher, opts)?;
    let mut terms = TermVars::default();

    if w.needs_truth() {
        let gt = input.truth.ok_or_else(|| Error::MissingGroundTruth {
            scene_id: input.scene_id.to_string(),
        })?;
        if w.epe3d > 0.0 {
            terms.epe3d = Some(epe_node(g, forward.total, &gt.total)?);
        }
        if w.nonrigid > 0.0 || w.rigid > 0.0 {
            let (Some(angles), Some(refine)) = (forward.angles, &forward.refine) else {
                return Err(Error::InvalidConfig(
                    "non-rigid and rigid losses need the ego-motion branch".into(),
                ));
            };
            if w.nonrigid > 0.0 {
                terms.nonrigid = Some(epe_node(g, forward.nonrigid, &gt.nonrigid)?);
            }
            if w.rigid > 0.0 {
                let pose = EulerPose::from_transform(&gt.relative)?;
                terms.rigid = Some(rigid_node(g, angles, refine.translation, &pose, w.rot)?);
            }
        }
    }

    let mut reverse = None;
    if w.fb > 0.0 || w.nn > 0.0 {
        let warped = g.add(source, forward.total)?;
        let matches = matcher.nearest(input.p2_index, g.value(warped))?;
        let x_nn = g.gather_rows(target, matches)?;
        if w.nn > 0.0 {
            let d = g.sub(warped, x_nn)?;
            let d = g.row_norm(d);
            terms.nn = Some(g.mean(d));
        }
        if w.fb > 0.0 {
            let mid = g.add(warped, x_nn)?;
            let anchor = g.scale(mid, 0.5);
            let back = pipeline_graph(g, net, anchor, source, input.p1_index, matcher, opts)?;
            let end = g.add(anchor, back.total)?;
            let d = g.sub(source, end)?;
            let d = g.row_norm(d);
            terms.fb = Some(g.mean(d));
            reverse = Some(back);
        }
    }

    let weighted = [
        (terms.epe3d, w.epe3d),
        (terms.nonrigid, w.nonrigid),
        (terms.rigid, w.rigid),
        (terms.fb, w.fb),
        (terms.nn, w.nn),
    ];
    let mut loss: Option<Var> = None;
    for (term, weight) in weighted {
        if let Some(t) = term {
            let s = g.scale(t, weight);
            loss = Some(match loss {
                None => s,
                Some(l) => g.add(l, s)?,
            });
        }
    }
    let loss = loss.unwrap_or_else(|| g.scalar_leaf(0.0));
    Ok(Objective {
        loss,
        terms,
        forward,
        reverse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneGenConfig};
    use crate::flow::ego_motion_flow;
    use crate::geometry::RigidTransform;
    use crate::net::{pipeline_forward_with, NetConfig, NetworkParams};
    use crate::nn::brute_force_nearest;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(v: Vec<Vec3>, kind: FlowKind) -> FlowField {
        FlowField::new(v, kind).unwrap()
    }

    fn cloud(v: Vec<Vec3>) -> PointCloud {
        PointCloud::new(v).unwrap()
    }

    fn rand_vecs(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
            .collect()
    }

    #[test]
    fn epe_cases() {
        let a = field(vec![Vec3::zeros(), Vec3::zeros()], FlowKind::Total);
        assert_eq!(epe3d_loss(&a, &a).unwrap(), 0.0);
        let b = field(vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 3.0)], FlowKind::Total);
        assert_eq!(epe3d_loss(&a, &b).unwrap(), 2.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_vecs(&mut rng, 100);
        let y = rand_vecs(&mut rng, 100);
        let oracle: f64 = x
            .iter()
            .zip(&y)
            .map(|(a, b)| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt())
            .sum::<f64>()
            / 100.0;
        let e = epe3d_loss(&field(x.clone(), FlowKind::Total), &field(y.clone(), FlowKind::Total)).unwrap();
        assert!((e - oracle).abs() < 1e-12);
        let nr = nonrigid_loss(&field(x, FlowKind::NonRigid), &field(y, FlowKind::NonRigid)).unwrap();
        assert_eq!(nr, e);

        let short = field(vec![Vec3::zeros()], FlowKind::Total);
        assert!(matches!(epe3d_loss(&a, &short), Err(Error::DimensionMismatch { .. })));
        assert!(nonrigid_loss(&a, &a).is_err());
    }

    #[test]
    fn rigid_cases() {
        let r = Vec3::new(0.1, -0.2, 0.3);
        let t = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(rigid_loss(&r, &t, &r, &t, 10.0), 0.0);
        let r_hat = r + Vec3::new(0.1, 0.0, 0.0);
        assert!((rigid_loss(&r_hat, &t, &r, &t, 10.0) - 1.0).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let v = rand_vecs(&mut rng, 4);
            let w: f64 = rng.gen_range(0.0..20.0);
            let oracle = w * (v[0] - v[2]).dot(&(v[0] - v[2])).sqrt() + (v[1] - v[3]).dot(&(v[1] - v[3])).sqrt();
            assert!((rigid_loss(&v[0], &v[1], &v[2], &v[3], w) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn cycle_anchor_cases() {
        // A forward flow landing exactly on second-frame points.
        let p1 = cloud(vec![Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)]);
        let p2 = cloud(vec![Vec3::new(5.0, 0.0, 0.0), Vec3::new(1.0, 2.0, 1.0)]);
        let d = field(vec![Vec3::new(5.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)], FlowKind::Total);
        let idx = NeighborIndex::build(&p2).unwrap();
        let a = cycle_artifacts(&p1, &idx, &d, |anchor, _| Ok(FlowField::zeros(anchor.len(), FlowKind::Total))).unwrap();
        assert_eq!(a.nn_match, a.forward_warp);
        assert_eq!(a.anchor, a.forward_warp);

        let p1 = cloud(vec![Vec3::zeros()]);
        let p2 = cloud(vec![Vec3::new(3.0, 0.0, 0.0)]);
        let d = field(vec![Vec3::new(1.0, 0.0, 0.0)], FlowKind::Total);
        let idx = NeighborIndex::build(&p2).unwrap();
        let a = cycle_artifacts(&p1, &idx, &d, |anchor, _| Ok(FlowField::zeros(anchor.len(), FlowKind::Total))).unwrap();
        assert_eq!(a.anchor.points()[0], Vec3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn cycle_invariants_on_random_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p1 = cloud(rand_vecs(&mut rng, 60));
        let p2 = cloud(rand_vecs(&mut rng, 70));
        let d = field(rand_vecs(&mut rng, 60), FlowKind::Total);
        let back = rand_vecs(&mut rng, 60);
        let idx = NeighborIndex::build(&p2).unwrap();
        let a = cycle_artifacts(&p1, &idx, &d, |_, _| FlowField::new(back.clone(), FlowKind::Total)).unwrap();
        for i in 0..60 {
            let w = p1.points()[i] + d.vectors()[i];
            let nn = brute_force_nearest(p2.points(), &w).point;
            assert_eq!(a.forward_warp.points()[i], w);
            assert_eq!(a.nn_match.points()[i], nn);
            assert_eq!(a.anchor.points()[i], (w + nn) / 2.0);
            assert_eq!(a.cycle_end.points()[i], a.anchor.points()[i] + back[i]);
        }
        let oracle = (0..60)
            .map(|i| (p1.points()[i] - a.cycle_end.points()[i]).norm())
            .sum::<f64>()
            / 60.0;
        assert!((fb_loss(&p1, &a).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn fb_cases() {
        // Exact forward flow and its exact inverse close the cycle.
        let p1 = cloud(vec![Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 2.0)]);
        let shift = Vec3::new(1.0, 0.5, 0.0);
        let p2 = cloud(p1.iter().map(|x| x + shift).collect());
        let idx = NeighborIndex::build(&p2).unwrap();
        let d = field(vec![shift; 3], FlowKind::Total);
        let a = cycle_artifacts(&p1, &idx, &d, |anchor, _| {
            FlowField::new(vec![-shift; anchor.len()], FlowKind::Total)
        })
        .unwrap();
        assert_eq!(fb_loss(&p1, &a).unwrap(), 0.0);

        // Zero flows with the second cloud 10 m away along x: each anchor is
        // the midpoint to the nearest second-frame point.
        let p2 = cloud(vec![
            Vec3::new(10.0, 0.0, 0.0),
            Vec3::new(10.0, 1.0, 0.0),
            Vec3::new(10.0, 0.0, 2.0),
        ]);
        let idx = NeighborIndex::build(&p2).unwrap();
        let zero = FlowField::zeros(3, FlowKind::Total);
        let a = cycle_artifacts(&p1, &idx, &zero, |anchor, _| Ok(FlowField::zeros(anchor.len(), FlowKind::Total))).unwrap();
        assert_eq!(fb_loss(&p1, &a).unwrap(), 5.0);
    }

    #[test]
    fn nn_cases() {
        let p1 = cloud(vec![Vec3::zeros()]);
        let p2 = cloud(vec![Vec3::new(3.0, 0.0, 0.0)]);
        let idx = NeighborIndex::build(&p2).unwrap();
        let d = field(vec![Vec3::new(1.0, 0.0, 0.0)], FlowKind::Total);
        assert_eq!(nn_loss(&p1, &d, &idx).unwrap(), 2.0);
        let d = field(vec![Vec3::new(3.0, 0.0, 0.0)], FlowKind::Total);
        assert_eq!(nn_loss(&p1, &d, &idx).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p1 = cloud(rand_vecs(&mut rng, 50));
        let p2 = cloud(rand_vecs(&mut rng, 40));
        let d = field(rand_vecs(&mut rng, 50), FlowKind::Total);
        let idx = NeighborIndex::build(&p2).unwrap();
        let oracle = p1
            .iter()
            .zip(d.vectors())
            .map(|(x, v)| p2.iter().map(|y| (x + v - y).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / 50.0;
        assert!((nn_loss(&p1, &d, &idx).unwrap() - oracle).abs() < 1e-12);
    }

    struct Fixture {
        scene: crate::data::ScenePair,
        params: NetworkParams,
        i1: NeighborIndex,
        i2: NeighborIndex,
    }

    fn fixture(n: usize) -> Fixture {
        let cfg = SceneGenConfig {
            n,
            m: n,
            seed: 9,
            ..SceneGenConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        let mut params = NetworkParams::init(NetConfig::default(), 1).unwrap();
        params.randomize(2, 0.3);
        let i1 = NeighborIndex::build(&scene.p1).unwrap();
        let i2 = NeighborIndex::build(&scene.p2).unwrap();
        Fixture { scene, params, i1, i2 }
    }

    fn plain_breakdown(f: &Fixture, w: &LossWeights, opts: PipelineOptions) -> LossBreakdown {
        let mut g = Graph::new();
        let net = f.params.bind(&mut g).unwrap();
        let pred = pipeline_forward_with(&net, &mut g, &f.scene.p1, &f.scene.p2, &f.i2, opts).unwrap();
        let arts = cycle_artifacts(&f.scene.p1, &f.i2, &pred.total, |a, p1| {
            let mut g = Graph::new();
            let net = f.params.bind(&mut g)?;
            Ok(pipeline_forward_with(&net, &mut g, a, p1, &f.i1, opts)?.total)
        })
        .unwrap();
        total_loss(
            &f.scene.scene_id,
            &f.scene.p1,
            &f.i2,
            f.scene.truth(),
            &pred,
            Some(&arts),
            w,
        )
        .unwrap()
    }

    fn graph_breakdown(f: &Fixture, w: &LossWeights, opts: PipelineOptions) -> LossBreakdown {
        let mut g = Graph::new();
        let net = f.params.bind(&mut g).unwrap();
        let input = ObjectiveInput {
            scene_id: &f.scene.scene_id,
            p1: &f.scene.p1,
            p2: &f.scene.p2,
            p1_index: &f.i1,
            p2_index: &f.i2,
            truth: f.scene.truth(),
        };
        objective_graph(&mut g, &net, &input, w, opts, &mut Matcher::live())
            .unwrap()
            .breakdown(&g)
    }

    #[test]
    fn graph_and_plain_evaluators_agree() {
        let f = fixture(40);
        let opts = PipelineOptions::new(2);
        let w = LossWeights::hybrid();
        let a = plain_breakdown(&f, &w, opts);
        let b = graph_breakdown(&f, &w, opts);
        for (x, y) in [
            (a.total, b.total),
            (a.epe3d, b.epe3d),
            (a.nonrigid, b.nonrigid),
            (a.rigid, b.rigid),
            (a.fb, b.fb),
            (a.nn, b.nn),
        ] {
            assert!(x > 0.0);
            assert!((x - y).abs() < 1e-9 * x.max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn weighted_sum_and_presets() {
        let f = fixture(30);
        let opts = PipelineOptions::new(1);
        assert_eq!(graph_breakdown(&f, &LossWeights::zero(), opts).total, 0.0);

        let ss = graph_breakdown(&f, &LossWeights::self_supervised(), opts);
        assert_eq!(ss.total, ss.fb + ss.nn);
        assert_eq!((ss.epe3d, ss.nonrigid, ss.rigid), (0.0, 0.0, 0.0));

        let h = graph_breakdown(&f, &LossWeights::hybrid(), opts);
        let oracle = h.epe3d + h.nonrigid + h.rigid + h.fb + h.nn;
        assert!((h.total - oracle).abs() < 1e-12);

        // Linear in each weight with the terms held fixed.
        let w = LossWeights {
            epe3d: 2.0,
            nonrigid: 0.5,
            rigid: 3.0,
            fb: 0.25,
            nn: 4.0,
            ..LossWeights::hybrid()
        };
        let s = graph_breakdown(&f, &w, opts);
        let oracle = 2.0 * h.epe3d + 0.5 * h.nonrigid + 3.0 * h.rigid + 0.25 * h.fb + 4.0 * h.nn;
        assert!((s.total - oracle).abs() < 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn hybrid_on_hand_built_sample() {
        // Three points, known pose and flows, evaluated term by term.
        let p1 = cloud(vec![Vec3::new(0.0, 0.0, 5.0), Vec3::new(1.0, 0.0, 6.0), Vec3::new(0.0, 1.0, 7.0)]);
        let rel = RigidTransform::from_euler(&Vec3::new(0.0, 0.0, 0.1), Vec3::new(0.2, 0.0, 0.0));
        let nr = field(vec![Vec3::new(0.1, 0.0, 0.0), Vec3::zeros(), Vec3::zeros()], FlowKind::NonRigid);
        let em = ego_motion_flow(&p1, &rel);
        let total: Vec<Vec3> = nr.vectors().iter().zip(em.vectors()).map(|(a, b)| a + b).collect();
        let gt = GroundTruth {
            total: field(total.clone(), FlowKind::Total),
            nonrigid: nr.clone(),
            relative: rel,
        };
        let p2 = warp(&p1, &gt.total).unwrap();
        let idx2 = NeighborIndex::build(&p2).unwrap();
        // Prediction: identity pose, zero non-rigid flow.
        let pred = Predictions {
            pose: EulerPose::new(Vec3::zeros(), Vec3::zeros()),
            transform: RigidTransform::identity(),
            steps: vec![RigidTransform::identity()],
            nonrigid: FlowField::zeros(3, FlowKind::NonRigid),
            ego: FlowField::zeros(3, FlowKind::EgoMotion),
            total: FlowField::zeros(3, FlowKind::Total),
            ego_motion: true,
        };
        let arts = cycle_artifacts(&p1, &idx2, &pred.total, |a, _| Ok(FlowField::zeros(a.len(), FlowKind::Total))).unwrap();
        let b = total_loss("s", &p1, &idx2, Some(&gt), &pred, Some(&arts), &LossWeights::hybrid()).unwrap();

        let epe = total.iter().map(|v| v.norm()).sum::<f64>() / 3.0;
        let nr_l = 0.1 / 3.0;
        let r_l = 10.0 * 0.1 + 0.2;
        let nn_l = p1
            .iter()
            .map(|x| p2.iter().map(|y| (x - y).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / 3.0;
        let fb_l = nn_l / 2.0;
        assert!((b.epe3d - epe).abs() < 1e-12);
        assert!((b.nonrigid - nr_l).abs() < 1e-12);
        assert!((b.rigid - r_l).abs() < 1e-12);
        assert!((b.nn - nn_l).abs() < 1e-12);
        assert!((b.fb - fb_l).abs() < 1e-12);
        assert!((b.total - (epe + nr_l + r_l + nn_l + fb_l)).abs() < 1e-12);
    }

    #[test]
    fn missing_labels_are_reported() {
        let f = fixture(20);
        let stripped = f.scene.without_truth();
        let mut g = Graph::new();
        let net = f.params.bind(&mut g).unwrap();
        let input = ObjectiveInput {
            scene_id: &stripped.scene_id,
            p1: &stripped.p1,
            p2: &stripped.p2,
            p1_index: &f.i1,
            p2_index: &f.i2,
            truth: stripped.truth(),
        };
        let opts = PipelineOptions::new(1);
        let r = objective_graph(&mut g, &net, &input, &LossWeights::hybrid(), opts, &mut Matcher::live());
        assert!(matches!(r, Err(Error::MissingGroundTruth { .. })));
        let r = objective_graph(&mut g, &net, &input, &LossWeights::self_supervised(), opts, &mut Matcher::live());
        assert!(r.is_ok());
    }

    #[test]
    fn losses_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p1 = rand_vecs(&mut rng, 30);
        let d = rand_vecs(&mut rng, 30);
        let gt = rand_vecs(&mut rng, 30);
        let p2 = cloud(rand_vecs(&mut rng, 30));
        let idx = NeighborIndex::build(&p2).unwrap();
        let mut perm: Vec<usize> = (0..30).collect();
        perm.reverse();
        perm.swap(3, 17);
        let pick = |v: &[Vec3]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let e0 = epe3d_loss(&field(d.clone(), FlowKind::Total), &field(gt.clone(), FlowKind::Total)).unwrap();
        let e1 = epe3d_loss(&field(pick(&d), FlowKind::Total), &field(pick(&gt), FlowKind::Total)).unwrap();
        assert!((e0 - e1).abs() < 1e-12);
        let n0 = nn_loss(&cloud(p1.clone()), &field(d.clone(), FlowKind::Total), &idx).unwrap();
        let n1 = nn_loss(&cloud(pick(&p1)), &field(pick(&d), FlowKind::Total), &idx).unwrap();
        assert!((n0 - n1).abs() < 1e-12);
    }
}
