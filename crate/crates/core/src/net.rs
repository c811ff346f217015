//! The decomposed scene-flow network.
//!
//! A Siamese relative-pose regressor, unrolled over `k` refinement steps,
//! estimates the camera motion. Besides the pooled features of both clouds,
//! each step sees pooled statistics of the nearest-neighbour offsets from the
//! current moved cloud, and both networks work in a frame centred on the
//! second cloud. The first cloud is moved by that estimate and
//! a per-point network predicts the remaining non-rigid flow. Total flow is
//! the sum of the non-rigid flow and the ego-motion flow of the pose.
//!
//! Everything is built on one [`Graph`], so gradients flow through the whole
//! unrolled refinement.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{mat3_to_rows, rows_to_mat3, Graph, Var};
use crate::error::{Error, Result};
use crate::flow::{FlowField, FlowKind, PointCloud};
use crate::geometry::{EulerPose, Mat3, RigidTransform, Vec3};
use crate::nn::NeighborIndex;

/// Layer widths of the two networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    /// Per-point pose encoder widths.
    pub pose_enc1: usize,
    pub pose_enc2: usize,
    /// Width of the two fully connected pose-head layers.
    pub pose_hidden: usize,
    /// Per-point encoder width for the flow network's global context.
    pub flow_enc: usize,
    pub flow_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            pose_enc1: 16,
            pose_enc2: 32,
            pose_hidden: 128,
            flow_enc: 16,
            flow_hidden: 32,
        }
    }
}

impl NetConfig {
    /// Pose head with two 2048-wide layers.
    pub fn wide_pose_head() -> Self {
        Self {
            pose_hidden: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [
            self.pose_enc1,
            self.pose_enc2,
            self.pose_hidden,
            self.flow_enc,
            self.flow_hidden,
        ];
        if w.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Number of refinement iterations used for training and for inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefineConfig {
    pub k_train: usize,
    pub k_infer: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            k_train: 5,
            k_infer: 5,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_train == 0 || self.k_infer == 0 {
            return Err(Error::InvalidConfig("refinement iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Forward-pass switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineOptions {
    pub k: usize,
    /// When false the pose branch is skipped and the flow network predicts
    /// total flow directly from the raw clouds.
    pub ego_motion: bool,
}

impl PipelineOptions {
    pub fn new(k: usize) -> Self {
        Self { k, ego_motion: true }
    }
}

/// A named, shaped block of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamGroup {
    fn rows_cols(&self) -> (usize, usize) {
        match self.shape[..] {
            [r, c] => (r, c),
            [c] => (1, c),
            _ => (1, self.values.len()),
        }
    }
}

enum Init {
    FanIn(usize),
    Zero,
}

fn layout(c: &NetConfig) -> Vec<(&'static str, usize, usize, Init)> {
    use Init::*;
    let corr = 4 * c.pose_enc2 + MATCH_STATS;
    vec![
        ("pose.enc1.w", 3, c.pose_enc1, FanIn(3)),
        ("pose.enc1.b", 1, c.pose_enc1, Zero),
        ("pose.enc2.w", c.pose_enc1, c.pose_enc2, FanIn(c.pose_enc1)),
        ("pose.enc2.b", 1, c.pose_enc2, Zero),
        ("pose.fc1.w", corr, c.pose_hidden, FanIn(corr)),
        ("pose.fc1.b", 1, c.pose_hidden, Zero),
        ("pose.fc2.w", c.pose_hidden, c.pose_hidden, FanIn(c.pose_hidden)),
        ("pose.fc2.b", 1, c.pose_hidden, Zero),
        ("pose.out.w", c.pose_hidden, 6, Zero),
        ("pose.out.b", 1, 6, Zero),
        ("pose.skip.w", MATCH_STATS, 6, Zero),
        ("flow.enc.w", 3, c.flow_enc, FanIn(3)),
        ("flow.enc.b", 1, c.flow_enc, Zero),
        ("flow.l1.w", 6, c.flow_hidden, FanIn(6 + 2 * c.flow_enc)),
        ("flow.l1.g", 2 * c.flow_enc, c.flow_hidden, FanIn(6 + 2 * c.flow_enc)),
        ("flow.l1.b", 1, c.flow_hidden, Zero),
        ("flow.l2.w", c.flow_hidden, c.flow_hidden, FanIn(c.flow_hidden)),
        ("flow.l2.b", 1, c.flow_hidden, Zero),
        ("flow.out.w", c.flow_hidden + 3, 3, Zero),
        ("flow.out.b", 1, 3, Zero),
    ]
}

/// Weights of both networks. The pose weights are used by both Siamese
/// branches and by every refinement iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub seed: u64,
    pub config: NetConfig,
    groups: Vec<ParamGroup>,
}

impl NetworkParams {
    /// Uniform fan-in initialization, `U(±√(6/fan_in))`; output layers start
    /// at zero so the untrained pipeline predicts the identity pose and zero
    /// flow.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = layout(&config)
            .into_iter()
            .map(|(name, r, c, init)| {
                let values = match init {
                    Init::Zero => vec![0.0; r * c],
                    Init::FanIn(fan_in) => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect()
                    }
                };
                ParamGroup {
                    name: name.to_string(),
                    shape: vec![r, c],
                    values,
                }
            })
            .collect();
        Ok(Self {
            seed,
            config,
            groups,
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.groups.iter().map(|g| g.values.len()).sum()
    }

    /// Overwrites every value (including zero-initialized output layers)
    /// with `U(±scale)` noise. Used to get informative gradients in checks.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in &mut self.groups {
            for v in &mut g.values {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    /// Registers every group as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundNet> {
        let vars = self
            .groups
            .iter()
            .map(|p| {
                let (r, c) = p.rows_cols();
                g.leaf(r, c, p.values.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundNet { vars })
    }

    /// Rebuilds parameters from checkpoint groups, ignoring groups that are
    /// not network weights (such as optimizer state).
    pub fn from_groups(seed: u64, groups: &[ParamGroup]) -> Result<Self> {
        let find = |name: &str| {
            groups
                .iter()
                .find(|g| g.name == name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks group {name}")))
        };
        let dims = |name: &str| -> Result<(usize, usize)> {
            let g = find(name)?;
            match g.shape[..] {
                [r, c] => Ok((r, c)),
                _ => Err(Error::Validation(format!("group {name} is not a matrix"))),
            }
        };
        let config = NetConfig {
            pose_enc1: dims("pose.enc1.w")?.1,
            pose_enc2: dims("pose.enc2.w")?.1,
            pose_hidden: dims("pose.fc1.w")?.1,
            flow_enc: dims("flow.enc.w")?.1,
            flow_hidden: dims("flow.l1.w")?.1,
        };
        config.validate()?;
        let groups = layout(&config)
            .into_iter()
            .map(|(name, r, c, _)| {
                let g = find(name)?;
                if g.shape != [r, c] || g.values.len() != r * c {
                    return Err(Error::Validation(format!(
                        "group {name} has shape {:?}, expected [{r}, {c}]",
                        g.shape
                    )));
                }
                Ok(g.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed,
            config,
            groups,
        })
    }
}

/// Parameters registered on a graph, in layout order.
#[derive(Clone, Debug)]
pub struct BoundNet {
    vars: Vec<Var>,
}

mod idx {
    pub const POSE_ENC1_W: usize = 0;
    pub const POSE_ENC1_B: usize = 1;
    pub const POSE_ENC2_W: usize = 2;
    pub const POSE_ENC2_B: usize = 3;
    pub const POSE_FC1_W: usize = 4;
    pub const POSE_FC1_B: usize = 5;
    pub const POSE_FC2_W: usize = 6;
    pub const POSE_FC2_B: usize = 7;
    pub const POSE_OUT_W: usize = 8;
    pub const POSE_OUT_B: usize = 9;
    pub const POSE_SKIP_W: usize = 10;
    pub const FLOW_ENC_W: usize = 11;
    pub const FLOW_ENC_B: usize = 12;
    pub const FLOW_L1_W: usize = 13;
    pub const FLOW_L1_G: usize = 14;
    pub const FLOW_L1_B: usize = 15;
    pub const FLOW_L2_W: usize = 16;
    pub const FLOW_L2_B: usize = 17;
    pub const FLOW_OUT_W: usize = 18;
    pub const FLOW_OUT_B: usize = 19;
}

impl BoundNet {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn dense(&self, g: &mut Graph, x: Var, w: usize, b: usize) -> Result<Var> {
        let h = g.matmul(x, self.v(w))?;
        g.add_row(h, self.v(b))
    }

    fn pose_encode(&self, g: &mut Graph, cloud: Var) -> Result<Var> {
        let h = self.dense(g, cloud, idx::POSE_ENC1_W, idx::POSE_ENC1_B)?;
        let h = g.relu(h);
        let h = self.dense(g, h, idx::POSE_ENC2_W, idx::POSE_ENC2_B)?;
        let h = g.relu(h);
        Ok(g.mean_rows(h))
    }
}

/// Records the discrete nearest-neighbour matches of a forward pass so a
/// later pass can replay them. Replaying keeps the matches fixed while
/// parameters are perturbed for finite-difference checks.
#[derive(Clone, Debug, Default)]
pub struct Matcher {
    replay: bool,
    log: Vec<Vec<usize>>,
    cursor: usize,
}

impl Matcher {
    /// Computes matches and records them.
    pub fn live() -> Self {
        Self::default()
    }

    /// Returns the recorded matches in order instead of searching.
    pub fn replay(log: Vec<Vec<usize>>) -> Self {
        Self {
            replay: true,
            log,
            cursor: 0,
        }
    }

    pub fn log(&self) -> &[Vec<usize>] {
        &self.log
    }

    pub fn into_log(self) -> Vec<Vec<usize>> {
        self.log
    }

    /// Nearest reference index for every row of a flat `N×3` query block.
    pub fn nearest(&mut self, index: &NeighborIndex, queries: &[f64]) -> Result<Vec<usize>> {
        let n = queries.len() / 3;
        if self.replay {
            let rec = self
                .log
                .get(self.cursor)
                .ok_or_else(|| Error::Validation("match log exhausted".into()))?;
            if rec.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: rec.len(),
                    found: n,
                });
            }
            self.cursor += 1;
            return Ok(rec.clone());
        }
        let found: Vec<usize> = queries
            .chunks_exact(3)
            .map(|q| index.nearest(&Vec3::new(q[0], q[1], q[2])).index)
            .collect();
        self.log.push(found.clone());
        Ok(found)
    }
}

/// The second cloud as seen by each pose step.
#[derive(Clone, Copy)]
pub struct PoseTarget<'a> {
    pub cloud: Var,
    /// Output of [`FlowNetwork::pose_context`].
    pub context: Var,
    pub index: &'a NeighborIndex,
}

/// The two learned components of the pipeline. Implemented by the real
/// network ([`BoundNet`]) and by test stubs.
pub trait FlowNetwork {
    /// Target-side pose features, computed once and reused across
    /// refinement iterations.
    fn pose_context(&self, g: &mut Graph, target: Var) -> Result<Var>;

    /// One pose estimate as a `1×6` node `(α, β, γ, tx, ty, tz)`.
    fn pose_step(&self, g: &mut Graph, source: Var, target: &PoseTarget<'_>, matcher: &mut Matcher) -> Result<Var>;

    /// Per-point flow `N×3` from `source` towards `target`.
    fn point_flow(
        &self,
        g: &mut Graph,
        source: Var,
        target: Var,
        target_index: &NeighborIndex,
        matcher: &mut Matcher,
    ) -> Result<Var>;
}

impl FlowNetwork for BoundNet {
    fn pose_context(&self, g: &mut Graph, target: Var) -> Result<Var> {
        let c = g.mean_rows(target);
        let centered = sub_row(g, target, c)?;
        let fb = self.pose_encode(g, centered)?;
        g.concat_cols(c, fb)
    }

    /// The head predicts rotation angles and a translation `t'` about the
    /// target centroid `c`; the returned translation is `t' + c − R·c`.
    fn pose_step(&self, g: &mut Graph, source: Var, target: &PoseTarget<'_>, matcher: &mut Matcher) -> Result<Var> {
        let width = g.shape(target.context).1 - 3;
        let c = g.slice_cols(target.context, 0, 3)?;
        let fb = g.slice_cols(target.context, 3, width)?;
        let centered = sub_row(g, source, c)?;
        let fa = self.pose_encode(g, centered)?;
        let stats = match_stats(g, source, centered, target, matcher)?;
        // Correlation of the two branch features.
        let diff = g.sub(fa, fb)?;
        let prod = g.mul(fa, fb)?;
        let corr = g.concat_cols(fa, fb)?;
        let corr = g.concat_cols(corr, diff)?;
        let corr = g.concat_cols(corr, prod)?;
        let corr = g.concat_cols(corr, stats)?;
        let h = self.dense(g, corr, idx::POSE_FC1_W, idx::POSE_FC1_B)?;
        let h = g.relu(h);
        let h = self.dense(g, h, idx::POSE_FC2_W, idx::POSE_FC2_B)?;
        let h = g.relu(h);
        let out = self.dense(g, h, idx::POSE_OUT_W, idx::POSE_OUT_B)?;
        let skip = g.matmul(stats, self.v(idx::POSE_SKIP_W))?;
        let out = g.add(out, skip)?;
        let angles = g.slice_cols(out, 0, 3)?;
        let t_local = g.slice_cols(out, 3, 3)?;
        let r = g.euler_to_rotation(angles)?;
        let rt = g.transpose(r);
        let rc = g.matmul(c, rt)?;
        let shift = g.sub(c, rc)?;
        let t = g.add(t_local, shift)?;
        g.concat_cols(angles, t)
    }

    fn point_flow(
        &self,
        g: &mut Graph,
        source: Var,
        target: Var,
        target_index: &NeighborIndex,
        matcher: &mut Matcher,
    ) -> Result<Var> {
        let matches = matcher.nearest(target_index, g.value(source))?;
        let nn = g.gather_rows(target, matches)?;
        let corr = g.sub(nn, source)?;
        // Work in a frame centred on the target.
        let c = g.mean_rows(target);
        let source = sub_row(g, source, c)?;
        let target = sub_row(g, target, c)?;

        let pooled = |g: &mut Graph, cloud: Var| -> Result<Var> {
            let h = self.dense(g, cloud, idx::FLOW_ENC_W, idx::FLOW_ENC_B)?;
            let h = g.relu(h);
            Ok(g.mean_rows(h))
        };
        let ga = pooled(g, source)?;
        let gb = pooled(g, target)?;
        let global = g.concat_cols(ga, gb)?;
        let global = g.matmul(global, self.v(idx::FLOW_L1_G))?;
        let global = g.add(global, self.v(idx::FLOW_L1_B))?;

        let local = g.concat_cols(source, corr)?;
        let h = g.matmul(local, self.v(idx::FLOW_L1_W))?;
        let h = g.add_row(h, global)?;
        let h = g.relu(h);
        let h = self.dense(g, h, idx::FLOW_L2_W, idx::FLOW_L2_B)?;
        let h = g.relu(h);
        // The output layer also sees the raw correspondence offset.
        let h = g.concat_cols(h, corr)?;
        self.dense(g, h, idx::FLOW_OUT_W, idx::FLOW_OUT_B)
    }
}

const MATCH_STATS: usize = 6;

/// Pooled nearest-neighbour statistics `1×6`: the per-axis torque of the
/// match offsets about the target centroid, divided by the matching inertia
/// term, followed by the mean offset. Together they are a diagonal
/// Gauss-Newton step towards the matches.
fn match_stats(
    g: &mut Graph,
    source: Var,
    centered: Var,
    target: &PoseTarget<'_>,
    matcher: &mut Matcher,
) -> Result<Var> {
    let matches = matcher.nearest(target.index, g.value(source))?;
    let nn = g.gather_rows(target.cloud, matches)?;
    let d = g.sub(nn, source)?;
    let col = |g: &mut Graph, v: Var, i: usize| g.slice_cols(v, i, 1);
    let (x, y, z) = (col(g, centered, 0)?, col(g, centered, 1)?, col(g, centered, 2)?);
    let (dx, dy, dz) = (col(g, d, 0)?, col(g, d, 1)?, col(g, d, 2)?);
    let mut torque = Vec::with_capacity(3);
    for (a, db, b, da) in [(y, dz, z, dy), (z, dx, x, dz), (x, dy, y, dx)] {
        let p = g.mul(a, db)?;
        let q = g.mul(b, da)?;
        torque.push(g.sub(p, q)?);
    }
    let (xx, yy, zz) = (g.mul(x, x)?, g.mul(y, y)?, g.mul(z, z)?);
    let inertia = [g.add(yy, zz)?, g.add(xx, zz)?, g.add(xx, yy)?];
    let mut cols = g.concat_cols(torque[0], torque[1])?;
    cols = g.concat_cols(cols, torque[2])?;
    for v in inertia {
        cols = g.concat_cols(cols, v)?;
    }
    let pooled = g.mean_rows(cols);
    let tq = g.slice_cols(pooled, 0, 3)?;
    let inert = g.slice_cols(pooled, 3, 3)?;
    let inv = g.recip(inert)?;
    let omega = g.mul(tq, inv)?;
    let shift = g.mean_rows(d);
    g.concat_cols(omega, shift)
}

fn sub_row(g: &mut Graph, a: Var, row: Var) -> Result<Var> {
    let neg = g.scale(row, -1.0);
    g.add_row(a, neg)
}

/// Graph nodes of an unrolled refinement.
#[derive(Clone, Debug)]
pub struct RefineVars {
    /// Accumulated rotation `3×3` and translation `1×3`.
    pub rotation: Var,
    pub translation: Var,
    /// `(rotation 3×3, translation 1×3)` of each intermediate estimate.
    pub steps: Vec<(Var, Var)>,
    /// The first cloud moved by the accumulated pose.
    pub source_star: Var,
}

/// Moves an `N×3` cloud by a rotation node and a `1×3` translation node.
fn transform_cloud(g: &mut Graph, cloud: Var, rotation: Var, translation: Var) -> Result<Var> {
    let rt = g.transpose(rotation);
    let moved = g.matmul(cloud, rt)?;
    g.add_row(moved, translation)
}

/// Starting from the identity, estimates `ΔT_i` from the current moved cloud
/// and left-composes it: `T = ΔT_k ∘ … ∘ ΔT_1`. Each iteration moves the
/// original source by the accumulated product.
pub fn refine_graph<N: FlowNetwork + ?Sized>(
    g: &mut Graph,
    net: &N,
    source: Var,
    target: Var,
    target_index: &NeighborIndex,
    matcher: &mut Matcher,
    k: usize,
) -> Result<RefineVars> {
    if k == 0 {
        return Err(Error::InvalidConfig("refinement needs k >= 1".into()));
    }
    let context = net.pose_context(g, target)?;
    let pt = PoseTarget {
        cloud: target,
        context,
        index: target_index,
    };
    let mut current = source;
    let mut acc: Option<(Var, Var)> = None;
    let mut steps = Vec::with_capacity(k);
    for _ in 0..k {
        let out = net.pose_step(g, current, &pt, matcher)?;
        let angles = g.slice_cols(out, 0, 3)?;
        let dt = g.slice_cols(out, 3, 3)?;
        let dr = g.euler_to_rotation(angles)?;
        steps.push((dr, dt));
        let (r, t) = match acc {
            None => (dr, dt),
            Some((r, t)) => {
                let r_new = g.matmul(dr, r)?;
                let drt = g.transpose(dr);
                let t_rot = g.matmul(t, drt)?;
                (r_new, g.add(t_rot, dt)?)
            }
        };
        acc = Some((r, t));
        current = transform_cloud(g, source, r, t)?;
    }
    let (rotation, translation) = acc.expect("k >= 1");
    Ok(RefineVars {
        rotation,
        translation,
        steps,
        source_star: current,
    })
}

/// Graph nodes of a full forward pass.
#[derive(Clone, Debug)]
pub struct PipelineVars {
    /// Euler angles `1×3` of the final pose; `None` without ego-motion.
    pub angles: Option<Var>,
    pub refine: Option<RefineVars>,
    pub nonrigid: Var,
    pub ego: Option<Var>,
    pub total: Var,
}

/// Pose refinement, non-rigid flow on the moved cloud, then
/// `d̂ = d̂_nr + (R̂ − I)·x + t̂`.
pub fn pipeline_graph<N: FlowNetwork + ?Sized>(
    g: &mut Graph,
    net: &N,
    source: Var,
    target: Var,
    target_index: &NeighborIndex,
    matcher: &mut Matcher,
    opts: PipelineOptions,
) -> Result<PipelineVars> {
    if !opts.ego_motion {
        let total = net.point_flow(g, source, target, target_index, matcher)?;
        return Ok(PipelineVars {
            angles: None,
            refine: None,
            nonrigid: total,
            ego: None,
            total,
        });
    }
    let refine = refine_graph(g, net, source, target, target_index, matcher, opts.k)?;
    let nonrigid = net.point_flow(g, refine.source_star, target, target_index, matcher)?;
    let eye = g.leaf(3, 3, mat3_to_rows(&Mat3::identity()))?;
    let r_minus_i = g.sub(refine.rotation, eye)?;
    let ego = transform_cloud(g, source, r_minus_i, refine.translation)?;
    let total = g.add(nonrigid, ego)?;
    let angles = g.rotation_to_euler(refine.rotation)?;
    Ok(PipelineVars {
        angles: Some(angles),
        refine: Some(refine),
        nonrigid,
        ego: Some(ego),
        total,
    })
}

fn transform_from(g: &Graph, r: Var, t: Var) -> RigidTransform {
    let tv = g.value(t);
    RigidTransform::new(rows_to_mat3(g.value(r)), Vec3::new(tv[0], tv[1], tv[2]))
}

fn cloud_leaf(g: &mut Graph, p: &PointCloud) -> Result<Var> {
    g.leaf(p.len(), 3, p.to_flat())
}

/// Result of [`refine_pose`].
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub transform: RigidTransform,
    pub steps: Vec<RigidTransform>,
    pub source_star: PointCloud,
}

pub fn refine_pose_with<N: FlowNetwork + ?Sized>(
    g: &mut Graph,
    net: &N,
    p1: &PointCloud,
    p2: &PointCloud,
    k: usize,
) -> Result<Refinement> {
    let a = cloud_leaf(g, p1)?;
    let b = cloud_leaf(g, p2)?;
    let index = NeighborIndex::build(p2)?;
    let r = refine_graph(g, net, a, b, &index, &mut Matcher::live(), k)?;
    Ok(Refinement {
        transform: transform_from(g, r.rotation, r.translation),
        steps: r.steps.iter().map(|&(r, t)| transform_from(g, r, t)).collect(),
        source_star: PointCloud::from_flat(g.value(r.source_star))?,
    })
}

/// Refined relative pose of `p1 → p2` after `k` iterations.
pub fn refine_pose(p1: &PointCloud, p2: &PointCloud, params: &NetworkParams, k: usize) -> Result<Refinement> {
    let mut g = Graph::new();
    let net = params.bind(&mut g)?;
    refine_pose_with(&mut g, &net, p1, p2, k)
}

/// A single pose-regressor pass.
pub fn pose_forward(p1: &PointCloud, p2: &PointCloud, params: &NetworkParams) -> Result<EulerPose> {
    let mut g = Graph::new();
    let net = params.bind(&mut g)?;
    let a = cloud_leaf(&mut g, p1)?;
    let b = cloud_leaf(&mut g, p2)?;
    let index = NeighborIndex::build(p2)?;
    let context = net.pose_context(&mut g, b)?;
    let pt = PoseTarget {
        cloud: b,
        context,
        index: &index,
    };
    let out = net.pose_step(&mut g, a, &pt, &mut Matcher::live())?;
    let v = g.value(out);
    Ok(EulerPose::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5])))
}

/// Non-rigid flow from an already pose-aligned first cloud.
pub fn flow_forward(p1_star: &PointCloud, p2: &PointCloud, params: &NetworkParams) -> Result<FlowField> {
    let mut g = Graph::new();
    let net = params.bind(&mut g)?;
    let a = cloud_leaf(&mut g, p1_star)?;
    let b = cloud_leaf(&mut g, p2)?;
    let index = NeighborIndex::build(p2)?;
    let out = net.point_flow(&mut g, a, b, &index, &mut Matcher::live())?;
    FlowField::from_flat(g.value(out), FlowKind::NonRigid)
}

/// Values of a full forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// Euler angles and translation of the final pose.
    pub pose: EulerPose,
    pub transform: RigidTransform,
    pub steps: Vec<RigidTransform>,
    pub nonrigid: FlowField,
    pub ego: FlowField,
    pub total: FlowField,
    pub ego_motion: bool,
}

impl Predictions {
    pub(crate) fn from_graph(g: &Graph, vars: &PipelineVars) -> Result<Self> {
        let n = g.shape(vars.total).0;
        let total = FlowField::from_flat(g.value(vars.total), FlowKind::Total)?;
        let (pose, transform, steps, ego, nonrigid) = match (&vars.refine, vars.angles, vars.ego) {
            (Some(r), Some(a), Some(e)) => {
                let transform = transform_from(g, r.rotation, r.translation);
                let av = g.value(a);
                (
                    EulerPose::new(Vec3::new(av[0], av[1], av[2]), transform.translation),
                    transform,
                    r.steps.iter().map(|&(r, t)| transform_from(g, r, t)).collect(),
                    FlowField::from_flat(g.value(e), FlowKind::EgoMotion)?,
                    FlowField::from_flat(g.value(vars.nonrigid), FlowKind::NonRigid)?,
                )
            }
            _ => (
                EulerPose::new(Vec3::zeros(), Vec3::zeros()),
                RigidTransform::identity(),
                Vec::new(),
                FlowField::zeros(n, FlowKind::EgoMotion),
                FlowField::from_flat(g.value(vars.nonrigid), FlowKind::NonRigid)?,
            ),
        };
        Ok(Predictions {
            pose,
            transform,
            steps,
            nonrigid,
            ego,
            total,
            ego_motion: vars.refine.is_some(),
        })
    }
}

pub fn pipeline_forward_with<N: FlowNetwork + ?Sized>(
    net: &N,
    g: &mut Graph,
    p1: &PointCloud,
    p2: &PointCloud,
    p2_index: &NeighborIndex,
    opts: PipelineOptions,
) -> Result<Predictions> {
    let a = cloud_leaf(g, p1)?;
    let b = cloud_leaf(g, p2)?;
    let vars = pipeline_graph(g, net, a, b, p2_index, &mut Matcher::live(), opts)?;
    Predictions::from_graph(g, &vars)
}

/// Inference for one pair.
pub fn pipeline_forward(
    p1: &PointCloud,
    p2: &PointCloud,
    params: &NetworkParams,
    opts: PipelineOptions,
) -> Result<Predictions> {
    let mut g = Graph::new();
    let net = params.bind(&mut g)?;
    let index = NeighborIndex::build(p2)?;
    pipeline_forward_with(&net, &mut g, p1, p2, &index, opts)
}

// ---------------------------------------------------------------------------
// Checkpoint file: "RFNW", u32 version, u64 seed, then until end of file one
// record per group: u32 name length, UTF-8 name, u32 rank, u64 dims, f64
// values. All integers and floats little-endian.

const CKPT_MAGIC: &[u8; 4] = b"RFNW";
pub const CKPT_VERSION: u32 = 1;

/// Seed plus an ordered list of named arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub groups: Vec<ParamGroup>,
}

impl Checkpoint {
    pub fn from_params(params: &NetworkParams) -> Self {
        Self {
            seed: params.seed,
            groups: params.groups.clone(),
        }
    }

    pub fn params(&self) -> Result<NetworkParams> {
        NetworkParams::from_groups(self.seed, &self.groups)
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for g in &self.groups {
            out.extend_from_slice(&(g.name.len() as u32).to_le_bytes());
            out.extend_from_slice(g.name.as_bytes());
            out.extend_from_slice(&(g.shape.len() as u32).to_le_bytes());
            for d in &g.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &g.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Parse {
                line: 0,
                message: "not an RFNW checkpoint".into(),
            });
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CKPT_VERSION,
                found: version,
            });
        }
        let seed = r.u64()?;
        let mut groups = Vec::new();
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("group name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.err("shape overflows"))?;
            let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            groups.push(ParamGroup { name, shape, values });
        }
        Ok(Self { seed, groups })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn err(&self, message: &str) -> Error {
        Error::Parse {
            line: self.pos,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::flow::ego_motion_flow;
    use rand::seq::SliceRandom;

    pub(crate) fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(4.0..8.0)))
                .collect(),
        )
        .unwrap()
    }

    /// Pose network that always answers the same 6-vector and a flow network
    /// that is either zero or a constant offset.
    pub(crate) struct Stub {
        pub pose: [f64; 6],
        pub flow: Option<[f64; 3]>,
    }

    impl FlowNetwork for Stub {
        fn pose_context(&self, _g: &mut Graph, target: Var) -> Result<Var> {
            Ok(target)
        }

        fn pose_step(&self, g: &mut Graph, _source: Var, _target: &PoseTarget<'_>, _m: &mut Matcher) -> Result<Var> {
            g.leaf(1, 6, self.pose.to_vec())
        }

        fn point_flow(
            &self,
            g: &mut Graph,
            source: Var,
            _target: Var,
            _index: &NeighborIndex,
            _m: &mut Matcher,
        ) -> Result<Var> {
            let n = g.shape(source).0;
            let v = self.flow.unwrap_or([0.0; 3]);
            g.leaf(n, 3, v.repeat(n))
        }
    }

    #[test]
    fn zero_initialized_network_is_identity_and_zero_flow() {
        let params = NetworkParams::init(NetConfig::default(), 1).unwrap();
        let p1 = random_cloud(1, 50);
        let p2 = random_cloud(2, 60);
        let pose = pose_forward(&p1, &p2, &params).unwrap();
        assert_eq!(pose.as_array(), [0.0; 6]);
        let pred = pipeline_forward(&p1, &p2, &params, PipelineOptions::new(5)).unwrap();
        assert_eq!(pred.transform, RigidTransform::identity());
        assert!(pred.total.vectors().iter().all(|v| *v == Vec3::zeros()));
        let r = refine_pose(&p1, &p2, &params, 3).unwrap();
        assert_eq!(r.source_star, p1);
    }

    #[test]
    fn match_statistics_recover_a_pure_shift() {
        let mut params = NetworkParams::init(NetConfig::default(), 2).unwrap();
        let skip = params.groups_mut().iter_mut().find(|g| g.name == "pose.skip.w").unwrap();
        for i in 0..6 {
            skip.values[i * 6 + i] = 1.0;
        }
        let p1 = random_cloud(9, 40);
        let t = Vec3::new(0.01, -0.02, 0.015);
        let p2 = p1.transformed(&RigidTransform::from_translation(t));
        let pose = pose_forward(&p1, &p2, &params).unwrap();
        assert!(pose.angles.amax() < 1e-12, "{:?}", pose.angles);
        assert!((pose.translation - t).amax() < 1e-12);
    }

    #[test]
    fn refinement_base_case_and_matrix_power() {
        let p1 = random_cloud(3, 20);
        let p2 = random_cloud(4, 20);
        let stub = Stub {
            pose: [0.05, -0.02, 0.1, 0.3, -0.1, 0.2],
            flow: None,
        };
        let dt = EulerPose::new(Vec3::new(0.05, -0.02, 0.1), Vec3::new(0.3, -0.1, 0.2)).to_transform();
        let r1 = refine_pose_with(&mut Graph::new(), &stub, &p1, &p2, 1).unwrap();
        assert_eq!(r1.transform, dt);
        assert_eq!(r1.steps, vec![dt]);
        for k in [2, 3, 5] {
            let r = refine_pose_with(&mut Graph::new(), &stub, &p1, &p2, k).unwrap();
            let oracle = dt.power(k);
            assert!((r.transform.rotation - oracle.rotation).amax() < 1e-12);
            assert!((r.transform.translation - oracle.translation).amax() < 1e-12);
            for (a, b) in r.source_star.iter().zip(p1.transformed(&oracle).iter()) {
                assert!((a - b).amax() < 1e-12);
            }
        }
        let id = Stub {
            pose: [0.0; 6],
            flow: None,
        };
        let r = refine_pose_with(&mut Graph::new(), &id, &p1, &p2, 4).unwrap();
        assert!(r.transform.is_identity(0.0));
        assert_eq!(r.source_star, p1);
    }

    #[test]
    fn stubbed_components_degenerate_composition() {
        let p1 = random_cloud(5, 30);
        let p2 = random_cloud(6, 30);
        let idx = NeighborIndex::build(&p2).unwrap();
        let pose_only = Stub {
            pose: [0.02, 0.01, -0.03, 0.1, 0.0, -0.2],
            flow: None,
        };
        let pred = pipeline_forward_with(&pose_only, &mut Graph::new(), &p1, &p2, &idx, PipelineOptions::new(2)).unwrap();
        assert_eq!(pred.total.vectors(), pred.ego.vectors());
        let em = ego_motion_flow(&p1, &pred.transform);
        assert_eq!(pred.ego.vectors(), em.vectors());

        let flow_only = Stub {
            pose: [0.0; 6],
            flow: Some([0.1, -0.2, 0.3]),
        };
        let pred = pipeline_forward_with(&flow_only, &mut Graph::new(), &p1, &p2, &idx, PipelineOptions::new(3)).unwrap();
        assert_eq!(pred.total.vectors(), pred.nonrigid.vectors());
    }

    #[test]
    fn composition_on_three_point_scene() {
        let p1 = PointCloud::new(vec![
            Vec3::new(0.0, 0.0, 4.0),
            Vec3::new(1.0, 0.5, 5.0),
            Vec3::new(-1.0, 1.0, 6.0),
        ])
        .unwrap();
        let p2 = p1.clone();
        let mut params = NetworkParams::init(NetConfig::default(), 3).unwrap();
        params.randomize(4, 0.05);
        let pred = pipeline_forward(&p1, &p2, &params, PipelineOptions::new(2)).unwrap();
        for i in 0..3 {
            let x = p1.points()[i];
            let hand = pred.nonrigid.vectors()[i] + (pred.transform.rotation * x + pred.transform.translation - x);
            assert!((pred.total.vectors()[i] - hand).amax() < 1e-12);
        }
        let em = ego_motion_flow(&p1, &pred.transform);
        for (a, b) in pred.ego.vectors().iter().zip(em.vectors()) {
            assert!((a - b).amax() < 1e-12);
        }
        assert!((pred.pose.to_transform().rotation - pred.transform.rotation).amax() < 1e-12);
    }

    #[test]
    fn pooling_symmetry_is_bitwise() {
        let mut params = NetworkParams::init(NetConfig::default(), 5).unwrap();
        params.randomize(6, 0.2);
        let p1 = random_cloud(7, 64);
        let p2 = random_cloud(8, 70);
        let mut pts = p1.points().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut perm: Vec<usize> = (0..pts.len()).collect();
        perm.shuffle(&mut rng);
        pts = perm.iter().map(|&i| pts[i]).collect();
        let shuffled = PointCloud::new(pts).unwrap();

        let a = pose_forward(&p1, &p2, &params).unwrap();
        let b = pose_forward(&shuffled, &p2, &params).unwrap();
        assert_eq!(a.as_array().map(f64::to_bits), b.as_array().map(f64::to_bits));

        let fa = flow_forward(&p1, &p2, &params).unwrap();
        let fb = flow_forward(&shuffled, &p2, &params).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(fb.vectors()[k], fa.vectors()[i]);
        }
    }

    #[test]
    fn refinement_is_deterministic() {
        let mut params = NetworkParams::init(NetConfig::default(), 9).unwrap();
        params.randomize(10, 0.1);
        let p1 = random_cloud(11, 40);
        let p2 = random_cloud(12, 40);
        let a = refine_pose(&p1, &p2, &params, 4).unwrap();
        let b = refine_pose(&p1, &p2, &params, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 4);
    }

    #[test]
    fn monolithic_mode_has_no_pose() {
        let mut params = NetworkParams::init(NetConfig::default(), 1).unwrap();
        params.randomize(2, 0.1);
        let p1 = random_cloud(1, 10);
        let p2 = random_cloud(2, 10);
        let pred = pipeline_forward(&p1, &p2, &params, PipelineOptions { k: 3, ego_motion: false }).unwrap();
        assert!(!pred.ego_motion);
        assert_eq!(pred.total.vectors(), pred.nonrigid.vectors());
        assert!(pred.ego.vectors().iter().all(|v| *v == Vec3::zeros()));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let mut params = NetworkParams::init(NetConfig::default(), 77).unwrap();
        params.randomize(1, 1.0);
        let ck = Checkpoint::from_params(&params);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"RFNW");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let p = back.params().unwrap();
        assert_eq!(p, params);
        assert_eq!(p.config, NetConfig::default());

        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::VersionMismatch { found: 9, .. })));
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
    }

    #[test]
    fn wide_head_preset_builds() {
        let p = NetworkParams::init(NetConfig::wide_pose_head(), 0).unwrap();
        assert_eq!(p.group("pose.fc2.w").unwrap().shape, vec![2048, 2048]);
        assert_eq!(p.groups().len(), 20);
    }

    #[test]
    fn replayed_matches_are_reused() {
        let p = random_cloud(1, 20);
        let idx = NeighborIndex::build(&p).unwrap();
        let q = random_cloud(2, 5).to_flat();
        let mut live = Matcher::live();
        let found = live.nearest(&idx, &q).unwrap();
        let mut replay = Matcher::replay(live.into_log());
        let other = random_cloud(3, 5).to_flat();
        assert_eq!(replay.nearest(&idx, &other).unwrap(), found);
        assert!(replay.nearest(&idx, &other).is_err());
    }
}
