//! Scene pairs, the synthetic dynamic-scene generator and the text scene
//! file format.
//!
//! Frames use +y as the up axis with the ground plane at `y = 0` and +z as
//! the viewing direction.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::error::{Error, Result};
use crate::flow::{ego_motion_flow, FlowField, FlowKind, PointCloud};
use crate::geometry::{CameraIntrinsics, Mat3, RigidTransform, Vec3};

/// Tolerance for the decomposition check on loaded files.
pub const DECOMPOSITION_TOL: f64 = 1e-9;

/// Ground-truth motion of a scene pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub total: FlowField,
    pub nonrigid: FlowField,
    pub relative: RigidTransform,
}

impl GroundTruth {
    /// Largest per-point norm of `total − (nonrigid + ego_motion)`.
    pub fn decomposition_residual(&self, p1: &PointCloud) -> f64 {
        let em = ego_motion_flow(p1, &self.relative);
        self.total
            .vectors()
            .iter()
            .zip(self.nonrigid.vectors())
            .zip(em.vectors())
            .map(|((d, nr), e)| (d - (nr + e)).norm())
            .fold(0.0, f64::max)
    }

    pub fn select(&self, indices: &[usize]) -> GroundTruth {
        GroundTruth {
            total: self.total.select(indices),
            nonrigid: self.nonrigid.select(indices),
            relative: self.relative,
        }
    }
}

/// One training/evaluation sample.
///
/// Reads of the ground truth through [`ScenePair::truth`] are counted, which
/// lets tests prove that a training mode never looked at labels.
#[derive(Debug)]
pub struct ScenePair {
    pub scene_id: String,
    pub p1: PointCloud,
    pub p2: PointCloud,
    truth: Option<GroundTruth>,
    pub intrinsics: Option<CameraIntrinsics>,
    /// Seconds between the two frames; metadata only.
    pub time_delta: f64,
    truth_reads: AtomicUsize,
}

impl Clone for ScenePair {
    fn clone(&self) -> Self {
        ScenePair {
            scene_id: self.scene_id.clone(),
            p1: self.p1.clone(),
            p2: self.p2.clone(),
            truth: self.truth.clone(),
            intrinsics: self.intrinsics,
            time_delta: self.time_delta,
            truth_reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for ScenePair {
    fn eq(&self, other: &Self) -> bool {
        self.scene_id == other.scene_id
            && self.p1 == other.p1
            && self.p2 == other.p2
            && self.truth == other.truth
            && self.intrinsics == other.intrinsics
            && self.time_delta.to_bits() == other.time_delta.to_bits()
    }
}

impl ScenePair {
    /// Builds a pair, checking lengths, flow kinds and the decomposition.
    pub fn new(
        scene_id: impl Into<String>,
        p1: PointCloud,
        p2: PointCloud,
        truth: Option<GroundTruth>,
        intrinsics: Option<CameraIntrinsics>,
        time_delta: f64,
    ) -> Result<Self> {
        let pair = Self::from_parts(scene_id.into(), p1, p2, truth, intrinsics, time_delta);
        pair.validate()?;
        Ok(pair)
    }

    pub(crate) fn from_parts(
        scene_id: String,
        p1: PointCloud,
        p2: PointCloud,
        truth: Option<GroundTruth>,
        intrinsics: Option<CameraIntrinsics>,
        time_delta: f64,
    ) -> Self {
        ScenePair {
            scene_id,
            p1,
            p2,
            truth,
            intrinsics,
            time_delta,
            truth_reads: AtomicUsize::new(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(t) = &self.truth else { return Ok(()) };
        for f in [&t.total, &t.nonrigid] {
            if f.len() != self.p1.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.p1.len(),
                    found: f.len(),
                });
            }
        }
        t.total.expect_kind(FlowKind::Total)?;
        t.nonrigid.expect_kind(FlowKind::NonRigid)?;
        RigidTransform::try_new(t.relative.rotation, t.relative.translation)?;
        let residual = t.decomposition_residual(&self.p1);
        if !(residual <= DECOMPOSITION_TOL) {
            return Err(Error::Validation(format!(
                "total flow differs from non-rigid + ego-motion flow by {residual:.3e} m"
            )));
        }
        Ok(())
    }

    pub fn has_truth(&self) -> bool {
        self.truth.is_some()
    }

    /// Ground truth, counted as a label access.
    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth_reads.fetch_add(1, Ordering::Relaxed);
        self.truth.as_ref()
    }

    /// Ground truth without touching the access counter. Used by data
    /// plumbing (augmentation, file IO) that only moves labels around.
    pub(crate) fn truth_untracked(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    pub fn truth_reads(&self) -> usize {
        self.truth_reads.load(Ordering::Relaxed)
    }

    pub fn reset_truth_reads(&self) {
        self.truth_reads.store(0, Ordering::Relaxed);
    }

    /// The same pair with all labels removed.
    pub fn without_truth(&self) -> ScenePair {
        let mut s = self.clone();
        s.truth = None;
        s
    }

    /// Drops points of both clouds whose up coordinate is below `height`,
    /// filtering the ground truth with the same indices.
    pub fn remove_ground(&self, height: f64) -> Result<ScenePair> {
        let (p1, kept1) = remove_ground(&self.p1, height)?;
        let (p2, _) = remove_ground(&self.p2, height)?;
        Ok(ScenePair::from_parts(
            self.scene_id.clone(),
            p1,
            p2,
            self.truth.as_ref().map(|t| t.select(&kept1)),
            self.intrinsics,
            self.time_delta,
        ))
    }
}

/// Keeps points with `y ≥ height`; returns the kept cloud and the original
/// indices of the kept points.
pub fn remove_ground(p: &PointCloud, height: f64) -> Result<(PointCloud, Vec<usize>)> {
    let kept: Vec<usize> = p
        .iter()
        .enumerate()
        .filter(|(_, x)| x.y >= height)
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyResult);
    }
    Ok((p.select(&kept)?, kept))
}

/// One Gaussian radial displacement blob:
/// `amplitude · exp(−‖x − center‖² / (2·width²))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RbfBlob {
    pub center: Vec3,
    pub width: f64,
    pub amplitude: Vec3,
}

/// Smooth non-rigid displacement field as a sum of Gaussian blobs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RbfField {
    pub blobs: Vec<RbfBlob>,
}

impl RbfField {
    pub fn eval(&self, x: &Vec3) -> Vec3 {
        self.blobs.iter().fold(Vec3::zeros(), |acc, b| {
            let r2 = (x - b.center).norm_squared();
            acc + b.amplitude * (-r2 / (2.0 * b.width * b.width)).exp()
        })
    }
}

/// Parameters of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGenConfig {
    pub n: usize,
    pub m: usize,
    pub object_count: usize,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub rbf_count: usize,
    /// Blob widths are drawn uniformly from `[rbf_width_min, rbf_width_max]`.
    pub rbf_width_min: f64,
    pub rbf_width_max: f64,
    /// Blob amplitude magnitudes are drawn uniformly from `[0.5, 1] · rbf_amplitude`.
    pub rbf_amplitude: f64,
    pub noise_sigma: f64,
    /// Fraction of first-frame points absent from the second frame.
    pub dropout: f64,
    pub ground_plane: bool,
    /// Height of the ground plane along +y.
    pub ground_height: f64,
    /// Fraction of points sampled on the ground plane when enabled.
    pub ground_fraction: f64,
    pub time_delta: f64,
    pub intrinsics: Option<CameraIntrinsics>,
    pub seed: u64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            n: 256,
            m: 256,
            object_count: 4,
            max_rotation_deg: 5.0,
            max_translation: 0.5,
            rbf_count: 2,
            rbf_width_min: 0.6,
            rbf_width_max: 1.2,
            rbf_amplitude: 0.3,
            noise_sigma: 0.0,
            dropout: 0.0,
            ground_plane: false,
            ground_height: 0.0,
            ground_fraction: 0.25,
            time_delta: 0.1,
            intrinsics: Some(CameraIntrinsics::default()),
            seed: 0,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.n == 0 || self.m == 0 {
            return bad("point counts must be positive");
        }
        if self.object_count == 0 {
            return bad("at least one object is required");
        }
        let magnitudes = [
            self.max_rotation_deg,
            self.max_translation,
            self.rbf_amplitude,
            self.noise_sigma,
            self.time_delta,
        ];
        if magnitudes.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("magnitudes must be finite and nonnegative");
        }
        if self.max_rotation_deg > 90.0 {
            return bad("max_rotation_deg must be at most 90");
        }
        if self.rbf_count > 0 && !(self.rbf_width_min > 0.0 && self.rbf_width_max >= self.rbf_width_min) {
            return bad("rbf widths must satisfy 0 < min <= max");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.ground_fraction) {
            return bad("ground_fraction must be in [0, 1)");
        }
        Ok(())
    }

    /// Small scenes with a rigid ground plane and two non-rigid blobs; the
    /// family used for training comparisons against ICP.
    pub fn benchmark(seed: u64) -> SceneGenConfig {
        SceneGenConfig {
            n: 128,
            m: 128,
            object_count: 6,
            ground_plane: true,
            ground_fraction: 0.3,
            seed,
            ..SceneGenConfig::default()
        }
    }

    /// The configuration of the `i`-th scene of a dataset.
    pub fn for_scene(&self, i: usize) -> SceneGenConfig {
        SceneGenConfig {
            seed: scene_seed(self.seed, i),
            ..self.clone()
        }
    }
}

pub fn scene_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

#[derive(Clone, Copy, Debug)]
struct BoxObject {
    min: Vec3,
    max: Vec3,
}

impl BoxObject {
    fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    fn area(&self) -> f64 {
        let s = self.max - self.min;
        2.0 * (s.x * s.y + s.y * s.z + s.x * s.z)
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        let s = self.max - self.min;
        let faces = [s.y * s.z, s.y * s.z, s.x * s.z, s.x * s.z, s.x * s.y, s.x * s.y];
        let total: f64 = faces.iter().sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut face = 5;
        for (i, a) in faces.iter().enumerate() {
            if pick < *a {
                face = i;
                break;
            }
            pick -= a;
        }
        let mut p = Vec3::new(
            rng.gen_range(self.min.x..=self.max.x),
            rng.gen_range(self.min.y..=self.max.y),
            rng.gen_range(self.min.z..=self.max.z),
        );
        let axis = face / 2;
        p[axis] = if face % 2 == 0 { self.min[axis] } else { self.max[axis] };
        p
    }
}

struct SceneGeometry {
    objects: Vec<BoxObject>,
    ground: Option<(f64, (f64, f64), (f64, f64))>,
    ground_fraction: f64,
}

impl SceneGeometry {
    fn sample(cfg: &SceneGenConfig, rng: &mut ChaCha8Rng) -> Self {
        let objects = (0..cfg.object_count)
            .map(|_| {
                let size = Vec3::new(
                    rng.gen_range(0.6..2.0),
                    rng.gen_range(0.6..2.0),
                    rng.gen_range(0.6..2.0),
                );
                let base = Vec3::new(
                    rng.gen_range(-3.0..3.0),
                    cfg.ground_height,
                    rng.gen_range(5.0..10.0),
                );
                let min = Vec3::new(base.x - size.x / 2.0, base.y, base.z - size.z / 2.0);
                BoxObject {
                    min,
                    max: min + size,
                }
            })
            .collect();
        SceneGeometry {
            objects,
            ground: cfg
                .ground_plane
                .then_some((cfg.ground_height, (-4.5, 4.5), (3.5, 11.5))),
            ground_fraction: cfg.ground_fraction,
        }
    }

    fn sample_point(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        if let Some((h, (x0, x1), (z0, z1))) = self.ground {
            if rng.gen::<f64>() < self.ground_fraction {
                return Vec3::new(rng.gen_range(x0..x1), h, rng.gen_range(z0..z1));
            }
        }
        let total: f64 = self.objects.iter().map(BoxObject::area).sum();
        let mut pick = rng.gen::<f64>() * total;
        for o in &self.objects {
            if pick < o.area() {
                return o.sample_surface(rng);
            }
            pick -= o.area();
        }
        self.objects[self.objects.len() - 1].sample_surface(rng)
    }
}

fn sample_motion(cfg: &SceneGenConfig, rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.gen_range(0.0..=cfg.max_rotation_deg).to_radians();
    let rotation = nalgebra::Rotation3::from_axis_angle(
        &nalgebra::Unit::new_normalize(Vec3::from(axis)),
        angle,
    )
    .into_inner();
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let translation = Vec3::from(dir) * rng.gen_range(0.0..=cfg.max_translation);
    RigidTransform::new(rotation, translation)
}

fn sample_rbf(cfg: &SceneGenConfig, geom: &SceneGeometry, rng: &mut ChaCha8Rng) -> RbfField {
    RbfField {
        blobs: (0..cfg.rbf_count)
            .map(|_| {
                let obj = geom.objects[rng.gen_range(0..geom.objects.len())];
                let dir: [f64; 3] = UnitSphere.sample(rng);
                let mag = cfg.rbf_amplitude * rng.gen_range(0.5..=1.0);
                RbfBlob {
                    center: obj.center(),
                    width: rng.gen_range(cfg.rbf_width_min..=cfg.rbf_width_max),
                    amplitude: Vec3::from(dir) * mag,
                }
            })
            .collect(),
    }
}

/// Generates one scene pair with exact ground truth.
///
/// Frame 2 contains the moved first-frame points that survive dropout,
/// topped up with freshly sampled moved surface points (or subsampled) to
/// reach `m`, plus Gaussian noise, then shuffled.
pub fn generate_scene(cfg: &SceneGenConfig) -> Result<ScenePair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let geom = SceneGeometry::sample(cfg, &mut rng);
    let motion = sample_motion(cfg, &mut rng);
    let field = sample_rbf(cfg, &geom, &mut rng);

    let p1: Vec<Vec3> = (0..cfg.n).map(|_| geom.sample_point(&mut rng)).collect();
    let p1 = PointCloud::new(p1)?;
    let nonrigid = FlowField::new(p1.iter().map(|x| field.eval(x)).collect(), FlowKind::NonRigid)?;
    let em = ego_motion_flow(&p1, &motion);
    let total = FlowField::new(
        nonrigid
            .vectors()
            .iter()
            .zip(em.vectors())
            .map(|(a, b)| a + b)
            .collect(),
        FlowKind::Total,
    )?;

    let move_point = |x: &Vec3| x + (motion.rotation - Mat3::identity()) * x + motion.translation + field.eval(x);
    let mut candidates: Vec<Vec3> = p1
        .iter()
        .zip(total.vectors())
        .filter(|_| cfg.dropout == 0.0 || rng.gen::<f64>() >= cfg.dropout)
        .map(|(x, d)| x + d)
        .collect();
    if candidates.len() > cfg.m {
        candidates.shuffle(&mut rng);
        candidates.truncate(cfg.m);
    }
    while candidates.len() < cfg.m {
        let x = geom.sample_point(&mut rng);
        candidates.push(move_point(&x));
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma is finite");
        for p in &mut candidates {
            *p += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
    }
    candidates.shuffle(&mut rng);

    let pair = ScenePair::from_parts(
        format!("scene_{:016x}", cfg.seed),
        p1,
        PointCloud::new(candidates)?,
        Some(GroundTruth {
            total,
            nonrigid,
            relative: motion,
        }),
        cfg.intrinsics,
        cfg.time_delta,
    );
    Ok(pair)
}

/// `count` scenes with per-scene seeds derived from `cfg.seed`.
pub fn generate_dataset(cfg: &SceneGenConfig, count: usize) -> Result<Vec<ScenePair>> {
    (0..count).map(|i| generate_scene(&cfg.for_scene(i))).collect()
}

const MAGIC: &str = "RFSP";
const VERSION: u32 = 1;

fn real(out: &mut String, x: f64) {
    // 17 significant digits round-trip any f64.
    let _ = write!(out, " {x:.16e}");
}

/// Serializes a pair into the text scene format.
pub fn scene_to_string(s: &ScenePair) -> String {
    let truth = s.truth_untracked();
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = write!(out, "n {} m {} delta", s.p1.len(), s.p2.len());
    real(&mut out, s.time_delta);
    out.push('\n');
    match truth {
        Some(t) => {
            out.push_str("pose");
            for i in 0..3 {
                for j in 0..3 {
                    real(&mut out, t.relative.rotation[(i, j)]);
                }
            }
            for j in 0..3 {
                real(&mut out, t.relative.translation[j]);
            }
        }
        None => out.push_str("pose none"),
    }
    out.push('\n');
    if let Some(k) = s.intrinsics {
        out.push_str("intrinsics");
        for v in [k.fx, k.fy, k.cx, k.cy] {
            real(&mut out, v);
        }
        out.push('\n');
    }
    for (i, x) in s.p1.iter().enumerate() {
        out.push_str("p1");
        for v in x.iter() {
            real(&mut out, *v);
        }
        if let Some(t) = truth {
            for v in t.total.vectors()[i].iter().chain(t.nonrigid.vectors()[i].iter()) {
                real(&mut out, *v);
            }
        }
        out.push('\n');
    }
    for x in s.p2.iter() {
        out.push_str("p2");
        for v in x.iter() {
            real(&mut out, *v);
        }
        out.push('\n');
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Split<'a, char>>,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Option<(usize, Vec<&'a str>)> {
        self.inner.next().map(|(i, l)| (i + 1, l.split(' ').collect()))
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_reals(line: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| parse_err(line, format!("invalid real {f:?}")))
        })
        .collect()
}

fn expect_tagged<'a>(
    line: usize,
    fields: &'a [&'a str],
    tag: &str,
    count: usize,
) -> Result<&'a [&'a str]> {
    if fields.first() != Some(&tag) {
        return Err(parse_err(line, format!("expected {tag:?} record")));
    }
    if fields.len() != count + 1 {
        return Err(parse_err(
            line,
            format!("{tag} record needs {count} values, found {}", fields.len() - 1),
        ));
    }
    Ok(&fields[1..])
}

/// Parses the text scene format. `scene_id` is not stored in the file.
pub fn scene_from_str(text: &str, scene_id: &str) -> Result<ScenePair> {
    let body = text
        .strip_suffix('\n')
        .ok_or_else(|| parse_err(text.lines().count().max(1), "missing final newline"))?;
    let total_lines = body.split('\n').count();
    let mut lines = Lines {
        inner: body.split('\n').enumerate(),
    };
    let eof = |what: &str| parse_err(total_lines + 1, format!("unexpected end of file, expected {what}"));

    let (ln, header) = lines.next_line().ok_or_else(|| eof("header"))?;
    if header.len() != 2 || header[0] != MAGIC {
        return Err(parse_err(ln, "missing RFSP header"));
    }
    let version: u32 = header[1]
        .parse()
        .map_err(|_| parse_err(ln, "invalid version"))?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }

    let (ln, counts) = lines.next_line().ok_or_else(|| eof("counts"))?;
    if counts.len() != 6 || counts[0] != "n" || counts[2] != "m" || counts[4] != "delta" {
        return Err(parse_err(ln, "expected `n <n> m <m> delta <delta>`"));
    }
    let n: usize = counts[1].parse().map_err(|_| parse_err(ln, "invalid n"))?;
    let m: usize = counts[3].parse().map_err(|_| parse_err(ln, "invalid m"))?;
    let delta = parse_reals(ln, &counts[5..6])?[0];

    let (ln, pose) = lines.next_line().ok_or_else(|| eof("pose"))?;
    let relative = if pose == ["pose", "none"] {
        None
    } else {
        let v = parse_reals(ln, expect_tagged(ln, &pose, "pose", 12)?)?;
        let rotation = Mat3::from_row_slice(&v[..9]);
        Some(
            RigidTransform::try_new(rotation, Vec3::new(v[9], v[10], v[11]))
                .map_err(|e| Error::Validation(format!("line {ln}: {e}")))?,
        )
    };

    let mut pending = lines.next_line().ok_or_else(|| eof("points"))?;
    let mut intrinsics = None;
    if pending.1.first() == Some(&"intrinsics") {
        let (ln, ref f) = pending;
        let v = parse_reals(ln, expect_tagged(ln, f, "intrinsics", 4)?)?;
        intrinsics = Some(
            CameraIntrinsics::new(v[0], v[1], v[2], v[3])
                .map_err(|e| Error::Validation(format!("line {ln}: {e}")))?,
        );
        pending = lines.next_line().ok_or_else(|| eof("p1 record"))?;
    }

    let per_point = if relative.is_some() { 9 } else { 3 };
    let mut p1 = Vec::with_capacity(n);
    let mut total = Vec::with_capacity(n);
    let mut nonrigid = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            pending = lines.next_line().ok_or_else(|| eof("p1 record"))?;
        }
        let (ln, ref f) = pending;
        let v = parse_reals(ln, expect_tagged(ln, f, "p1", per_point)?)?;
        p1.push(Vec3::new(v[0], v[1], v[2]));
        if per_point == 9 {
            total.push(Vec3::new(v[3], v[4], v[5]));
            nonrigid.push(Vec3::new(v[6], v[7], v[8]));
        }
    }
    let mut p2 = Vec::with_capacity(m);
    for _ in 0..m {
        let (ln, f) = lines.next_line().ok_or_else(|| eof("p2 record"))?;
        let v = parse_reals(ln, expect_tagged(ln, &f, "p2", 3)?)?;
        p2.push(Vec3::new(v[0], v[1], v[2]));
    }
    if let Some((i, _)) = lines.inner.next() {
        return Err(parse_err(i + 1, "trailing data after last p2 record"));
    }

    let p1 = PointCloud::new(p1).map_err(|e| Error::Validation(e.to_string()))?;
    let p2 = PointCloud::new(p2).map_err(|e| Error::Validation(e.to_string()))?;
    let truth = match relative {
        Some(relative) => Some(GroundTruth {
            total: FlowField::new(total, FlowKind::Total)?,
            nonrigid: FlowField::new(nonrigid, FlowKind::NonRigid)?,
            relative,
        }),
        None => None,
    };
    ScenePair::new(scene_id, p1, p2, truth, intrinsics, delta)
}

pub fn write_scene(path: impl AsRef<Path>, s: &ScenePair) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scene_to_string(s)).map_err(|e| Error::io(path, e))
}

/// Reads a scene file; the scene id is the file stem.
pub fn read_scene(path: impl AsRef<Path>) -> Result<ScenePair> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    scene_from_str(&text, &id)
}

/// Reads every `*.rfsp` file of a directory in file-name order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<ScenePair>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "rfsp"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no .rfsp scene files in {}",
            dir.display()
        )));
    }
    paths.iter().map(read_scene).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::warp;
    use crate::nn::NeighborIndex;

    fn cfg(seed: u64) -> SceneGenConfig {
        SceneGenConfig {
            n: 200,
            m: 180,
            seed,
            ..SceneGenConfig::default()
        }
    }

    #[test]
    fn static_scene_is_a_shuffle() {
        let c = SceneGenConfig {
            n: 100,
            m: 100,
            max_rotation_deg: 0.0,
            max_translation: 0.0,
            rbf_count: 0,
            seed: 3,
            ..SceneGenConfig::default()
        };
        let s = generate_scene(&c).unwrap();
        let t = s.truth().unwrap();
        assert!(t.total.vectors().iter().all(|v| *v == Vec3::zeros()));
        assert!(t.nonrigid.vectors().iter().all(|v| *v == Vec3::zeros()));
        let mut a: Vec<[u64; 3]> = s.p1.iter().map(|p| p.map(f64::to_bits).into()).collect();
        let mut b: Vec<[u64; 3]> = s.p2.iter().map(|p| p.map(f64::to_bits).into()).collect();
        assert_ne!(a, b);
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn pure_camera_motion_has_no_nonrigid_part() {
        let c = SceneGenConfig {
            rbf_count: 0,
            ..cfg(4)
        };
        let s = generate_scene(&c).unwrap();
        let t = s.truth().unwrap();
        assert!(t.nonrigid.vectors().iter().all(|v| *v == Vec3::zeros()));
        assert_eq!(t.total.vectors(), ego_motion_flow(&s.p1, &t.relative).vectors());
    }

    #[test]
    fn decomposition_holds_and_warped_points_are_in_p2() {
        let c = SceneGenConfig {
            n: 150,
            m: 150,
            ..cfg(5)
        };
        let s = generate_scene(&c).unwrap();
        let t = s.truth().unwrap();
        assert!(t.decomposition_residual(&s.p1) < 1e-12);
        let idx = NeighborIndex::build(&s.p2).unwrap();
        for x in warp(&s.p1, &t.total).unwrap().iter() {
            assert_eq!(idx.nearest(x).distance, 0.0);
        }
    }

    #[test]
    fn counts_dropout_and_determinism() {
        let c = SceneGenConfig {
            dropout: 0.3,
            noise_sigma: 0.01,
            ground_plane: true,
            ..cfg(6)
        };
        let a = generate_scene(&c).unwrap();
        let b = generate_scene(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(scene_to_string(&a), scene_to_string(&b));
        assert_eq!((a.p1.len(), a.p2.len()), (200, 180));
        let other = generate_scene(&SceneGenConfig { seed: 7, ..c }).unwrap();
        assert_ne!(a.p1, other.p1);
    }

    #[test]
    fn invalid_configs_rejected() {
        for c in [
            SceneGenConfig { n: 0, ..cfg(0) },
            SceneGenConfig { dropout: 1.0, ..cfg(0) },
            SceneGenConfig { noise_sigma: -1.0, ..cfg(0) },
            SceneGenConfig { rbf_width_min: 0.0, ..cfg(0) },
        ] {
            assert!(matches!(generate_scene(&c), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn ground_removal() {
        let p = PointCloud::new(vec![Vec3::new(0.0, 1.0, 5.0), Vec3::new(1.0, 0.5, 6.0)]).unwrap();
        let (kept, idx) = remove_ground(&p, 0.3).unwrap();
        assert_eq!(kept, p);
        assert_eq!(idx, vec![0, 1]);
        assert!(matches!(remove_ground(&p, 10.0), Err(Error::EmptyResult)));

        let c = SceneGenConfig {
            ground_plane: true,
            ground_fraction: 0.4,
            ..cfg(8)
        };
        let s = generate_scene(&c).unwrap();
        let expected = s.p1.iter().filter(|x| x.y >= 0.3).count();
        let plane = s.p1.iter().filter(|x| x.y == 0.0).count();
        assert!(plane > 0);
        let (kept, idx) = remove_ground(&s.p1, 0.3).unwrap();
        assert_eq!(kept.len(), expected);
        assert!(kept.iter().all(|x| x.y != 0.0));
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(kept.points()[k], s.p1.points()[i]);
        }
        let filtered = s.remove_ground(0.3).unwrap();
        assert_eq!(filtered.truth().unwrap().total, s.truth().unwrap().total.select(&idx));
        filtered.validate().unwrap();
    }

    #[test]
    fn file_round_trip_is_byte_exact() {
        let c = SceneGenConfig {
            noise_sigma: 0.02,
            ..cfg(9)
        };
        let s = generate_scene(&c).unwrap();
        let text = scene_to_string(&s);
        let back = scene_from_str(&text, &s.scene_id).unwrap();
        assert_eq!(back, s);
        assert_eq!(scene_to_string(&back), text);

        let bare = s.without_truth();
        let text = scene_to_string(&bare);
        assert!(text.contains("pose none"));
        let back = scene_from_str(&text, &s.scene_id).unwrap();
        assert!(!back.has_truth());
        assert_eq!(scene_to_string(&back), text);
    }

    #[test]
    fn truncated_and_corrupt_files() {
        let s = generate_scene(&cfg(10)).unwrap();
        let text = scene_to_string(&s);
        let cut = &text[..text.len() / 2];
        let cut = &cut[..cut.rfind('\n').unwrap() + 1];
        assert!(matches!(scene_from_str(cut, "x"), Err(Error::Parse { .. })));
        assert!(matches!(scene_from_str(&text[..text.len() - 1], "x"), Err(Error::Parse { .. })));
        let bad_version = text.replacen("RFSP 1", "RFSP 2", 1);
        assert!(matches!(
            scene_from_str(&bad_version, "x"),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
        let garbage = text.replacen("p2 ", "p2 abc ", 1);
        match scene_from_str(&garbage, "x") {
            Err(Error::Parse { line, .. }) => assert!(line > 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn decomposition_violation_rejected_on_load() {
        let s = generate_scene(&cfg(11)).unwrap();
        let mut t = s.truth().unwrap().clone();
        let mut v = t.total.vectors().to_vec();
        v[3].x += 1e-6;
        t.total = FlowField::new(v, FlowKind::Total).unwrap();
        let broken = ScenePair::from_parts(s.scene_id.clone(), s.p1.clone(), s.p2.clone(), Some(t), s.intrinsics, s.time_delta);
        let text = scene_to_string(&broken);
        assert!(matches!(scene_from_str(&text, "x"), Err(Error::Validation(_))));
    }

    #[test]
    fn truth_reads_are_counted() {
        let s = generate_scene(&cfg(12)).unwrap();
        assert_eq!(s.truth_reads(), 0);
        let _ = s.has_truth();
        let _ = scene_to_string(&s);
        assert_eq!(s.truth_reads(), 0);
        let _ = s.truth();
        assert_eq!(s.truth_reads(), 1);
        s.reset_truth_reads();
        assert_eq!(s.truth_reads(), 0);
    }
}
