//! Point-to-point ICP: nearest-neighbour matching alternated with the
//! closed-form least-squares rigid fit.

use nalgebra::SVD;

use crate::error::{Error, Result};
use crate::flow::{ego_motion_flow, FlowField, PointCloud};
use crate::geometry::{Mat3, RigidTransform, Vec3};
use crate::nn::NeighborIndex;

/// A candidate step may raise the residual by at most this much.
const ACCEPT_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once the residual improves by less than this (m).
    pub convergence_tol: f64,
    /// Matches farther apart than this are ignored (m).
    pub max_correspondence_distance: f64,
    /// Start from the translation aligning the two centroids instead of the
    /// identity.
    pub centroid_init: bool,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            convergence_tol: 1e-8,
            max_correspondence_distance: f64::INFINITY,
            centroid_init: true,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("icp max_iterations must be >= 1".into()));
        }
        if !(self.convergence_tol > 0.0) || !(self.max_correspondence_distance > 0.0) {
            return Err(Error::InvalidConfig(
                "icp tolerances and distances must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// RMS match distance before the first step and after each accepted step.
    pub residual_history: Vec<f64>,
    pub iterations: usize,
}

/// Least-squares rotation and translation mapping `src[i]` onto `dst[i]`
/// (Kabsch with reflection correction).
pub fn fit_rigid(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch {
            expected: src.len(),
            found: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{} correspondences, need at least 3",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let ca = src.iter().sum::<Vec3>() / n;
    let cb = dst.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (a, b) in src.iter().zip(dst) {
        h += (a - ca) * (b - cb).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let s = svd.singular_values;
    let mut order = [0, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    if !(s[order[1]] > 1e-12 * s[order[0]]) {
        return Err(Error::DegenerateGeometry(
            "cross-covariance has rank < 2 (collinear points)".into(),
        ));
    }
    let v = v_t.transpose();
    let mut d = Mat3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    let rotation = v * d * u.transpose();
    Ok(RigidTransform::new(rotation, cb - rotation * ca))
}

struct Matches {
    src: Vec<Vec3>,
    dst: Vec<Vec3>,
    rms: f64,
}

fn match_points(p1: &PointCloud, t: &RigidTransform, index: &NeighborIndex, max_dist: f64) -> Result<Matches> {
    let mut m = Matches {
        src: Vec::with_capacity(p1.len()),
        dst: Vec::with_capacity(p1.len()),
        rms: 0.0,
    };
    let mut sq = 0.0;
    for x in p1.iter() {
        let moved = t.apply(x);
        let nb = index.nearest(&moved);
        if nb.distance <= max_dist {
            sq += nb.distance * nb.distance;
            m.src.push(moved);
            m.dst.push(nb.point);
        }
    }
    if m.src.is_empty() {
        return Err(Error::DegenerateGeometry("no correspondences within the gating distance".into()));
    }
    m.rms = (sq / m.src.len() as f64).sqrt();
    Ok(m)
}

/// Registers `p1` onto `p2`. Steps that would raise the residual end the
/// iteration, so the history is non-increasing.
pub fn icp_register(p1: &PointCloud, p2: &PointCloud, config: &IcpConfig) -> Result<IcpResult> {
    config.validate()?;
    let index = NeighborIndex::build(p2)?;
    let mut t = if config.centroid_init {
        RigidTransform::from_translation(p2.centroid() - p1.centroid())
    } else {
        RigidTransform::identity()
    };
    let mut cur = match_points(p1, &t, &index, config.max_correspondence_distance)?;
    let mut history = vec![cur.rms];
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let step = fit_rigid(&cur.src, &cur.dst)?;
        let cand = step.compose(&t);
        let next = match_points(p1, &cand, &index, config.max_correspondence_distance)?;
        if next.rms > cur.rms + ACCEPT_SLACK {
            break;
        }
        let gain = cur.rms - next.rms;
        t = cand;
        history.push(next.rms);
        cur = next;
        if gain < config.convergence_tol {
            break;
        }
    }
    Ok(IcpResult {
        transform: t,
        residual_history: history,
        iterations,
    })
}

/// Rigid-only scene flow: the ego-motion flow of the registered transform.
pub fn icp_flow(p1: &PointCloud, p2: &PointCloud, config: &IcpConfig) -> Result<FlowField> {
    let r = icp_register(p1, p2, config)?;
    Ok(ego_motion_flow(p1, &r.transform))
}
