//! Scene-flow and relative-pose evaluation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::flow::{FlowField, PointCloud};
use crate::geometry::{project, rotation_error_deg, translation_error, CameraIntrinsics, RigidTransform};

/// Absolute / relative thresholds of the 3D and 2D metrics.
pub const ACC3D_STRICT_ABS: f64 = 0.05;
pub const ACC3D_STRICT_REL: f64 = 0.05;
pub const ACC3D_RELAXED_ABS: f64 = 0.1;
pub const ACC3D_RELAXED_REL: f64 = 0.1;
pub const OUTLIER3D_ABS: f64 = 0.3;
pub const OUTLIER3D_REL: f64 = 0.1;
pub const ACC2D_ABS_PX: f64 = 3.0;
pub const ACC2D_REL: f64 = 0.05;
/// Below this ground-truth magnitude the relative criterion is disabled.
pub const REL_GUARD: f64 = 1e-12;
pub const HISTOGRAM_BINS: usize = 50;

/// Per-point 3D results of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Eval3d {
    pub epe3d: f64,
    pub acc_strict: f64,
    pub acc_relaxed: f64,
    pub outliers: f64,
    pub per_point: Vec<f64>,
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            found: b,
        });
    }
    if a == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

fn fraction(flags: impl Iterator<Item = bool>, n: usize) -> f64 {
    flags.filter(|&f| f).count() as f64 / n as f64
}

/// EPE3D, Acc3D(0.05), Acc3D(0.1) and Outliers3D.
pub fn evaluate_3d(d_hat: &FlowField, d_gt: &FlowField) -> Result<Eval3d> {
    check_len(d_gt.len(), d_hat.len())?;
    let n = d_gt.len();
    let per: Vec<(f64, Option<f64>)> = d_gt
        .vectors()
        .iter()
        .zip(d_hat.vectors())
        .map(|(g, h)| {
            let e = (g - h).norm();
            let mag = g.norm();
            (e, (mag >= REL_GUARD).then(|| e / mag))
        })
        .collect();
    let below = |abs: f64, rel: f64| {
        move |&(e, r): &(f64, Option<f64>)| e < abs || r.is_some_and(|r| r < rel)
    };
    Ok(Eval3d {
        epe3d: per.iter().map(|p| p.0).sum::<f64>() / n as f64,
        acc_strict: fraction(per.iter().map(below(ACC3D_STRICT_ABS, ACC3D_STRICT_REL)), n),
        acc_relaxed: fraction(per.iter().map(below(ACC3D_RELAXED_ABS, ACC3D_RELAXED_REL)), n),
        outliers: fraction(
            per.iter()
                .map(|&(e, r)| e > OUTLIER3D_ABS || r.is_some_and(|r| r > OUTLIER3D_REL)),
            n,
        ),
        per_point: per.into_iter().map(|p| p.0).collect(),
    })
}

/// EPE2D (pixels) and Acc2D of the projected flows.
pub fn evaluate_2d(
    p1: &PointCloud,
    d_hat: &FlowField,
    d_gt: &FlowField,
    k: &CameraIntrinsics,
) -> Result<(f64, f64)> {
    check_len(p1.len(), d_gt.len())?;
    check_len(p1.len(), d_hat.len())?;
    let bad: Vec<usize> = p1
        .iter()
        .zip(d_gt.vectors())
        .zip(d_hat.vectors())
        .enumerate()
        .filter(|(_, ((x, g), h))| x.z <= 1e-9 || (*x + *g).z <= 1e-9 || (*x + *h).z <= 1e-9)
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonPositiveDepth { indices: bad });
    }
    let n = p1.len();
    let mut sum = 0.0;
    let mut accurate = 0usize;
    for ((x, g), h) in p1.iter().zip(d_gt.vectors()).zip(d_hat.vectors()) {
        let base = project(x, k)?;
        let o = project(&(x + g), k)? - base;
        let o_hat = project(&(x + h), k)? - base;
        let e = (o - o_hat).norm();
        let mag = o.norm();
        sum += e;
        if e < ACC2D_ABS_PX || (mag >= REL_GUARD && e / mag < ACC2D_REL) {
            accurate += 1;
        }
    }
    Ok((sum / n as f64, accurate as f64 / n as f64))
}

/// `(RLE [m], ROE [deg])`.
pub fn evaluate_pose(t_hat: &RigidTransform, t_gt: &RigidTransform) -> (f64, f64) {
    (
        translation_error(&t_hat.translation, &t_gt.translation),
        rotation_error_deg(&t_hat.rotation, &t_gt.rotation),
    )
}

/// Metrics of one evaluation run. 2D and pose entries are `None` when not
/// applicable (no intrinsics, or ego-motion disabled).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub epe3d: f64,
    pub acc3d_strict: f64,
    pub acc3d_relaxed: f64,
    pub outliers3d: f64,
    pub epe2d: Option<f64>,
    pub acc2d: Option<f64>,
    pub rle: Option<f64>,
    pub roe: Option<f64>,
    pub point_count: usize,
}

impl MetricsReport {
    /// Evaluates one scene.
    pub fn for_scene(
        p1: &PointCloud,
        d_hat: &FlowField,
        d_gt: &FlowField,
        intrinsics: Option<&CameraIntrinsics>,
        pose: Option<(&RigidTransform, &RigidTransform)>,
    ) -> Result<(MetricsReport, Vec<f64>)> {
        let e3 = evaluate_3d(d_hat, d_gt)?;
        let e2 = intrinsics
            .map(|k| evaluate_2d(p1, d_hat, d_gt, k))
            .transpose()?;
        let pose = pose.map(|(h, g)| evaluate_pose(h, g));
        Ok((
            MetricsReport {
                epe3d: e3.epe3d,
                acc3d_strict: e3.acc_strict,
                acc3d_relaxed: e3.acc_relaxed,
                outliers3d: e3.outliers,
                epe2d: e2.map(|e| e.0),
                acc2d: e2.map(|e| e.1),
                rle: pose.map(|p| p.0),
                roe: pose.map(|p| p.1),
                point_count: d_gt.len(),
            },
            e3.per_point,
        ))
    }

    /// Pools per-scene reports: point metrics are weighted by point count,
    /// pose metrics are a plain mean over scenes. Optional entries are kept
    /// only when every scene has them.
    pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::EmptyInput);
        }
        let total: usize = reports.iter().map(|r| r.point_count).sum();
        let weighted = |f: &dyn Fn(&MetricsReport) -> f64| {
            reports
                .iter()
                .map(|r| f(r) * r.point_count as f64)
                .sum::<f64>()
                / total as f64
        };
        let weighted_opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
            reports
                .iter()
                .map(|r| f(r).map(|v| v * r.point_count as f64))
                .sum::<Option<f64>>()
                .map(|s| s / total as f64)
        };
        let mean_opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
            reports
                .iter()
                .map(f)
                .sum::<Option<f64>>()
                .map(|s| s / reports.len() as f64)
        };
        Ok(MetricsReport {
            epe3d: weighted(&|r| r.epe3d),
            acc3d_strict: weighted(&|r| r.acc3d_strict),
            acc3d_relaxed: weighted(&|r| r.acc3d_relaxed),
            outliers3d: weighted(&|r| r.outliers3d),
            epe2d: weighted_opt(&|r| r.epe2d),
            acc2d: weighted_opt(&|r| r.acc2d),
            rle: mean_opt(&|r| r.rle),
            roe: mean_opt(&|r| r.roe),
            point_count: total,
        })
    }

    /// Drops the pose columns (reported as `-`).
    pub fn without_pose(mut self) -> Self {
        self.rle = None;
        self.roe = None;
        self
    }
}

pub const CSV_HEADER: &str = "scene_id,n,epe3d,acc3d_005,acc3d_01,outliers3d,epe2d,acc2d,rle_m,roe_deg";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

/// One CSV row in [`CSV_HEADER`] column order.
pub fn csv_row(scene_id: &str, r: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        scene_id,
        r.point_count,
        r.epe3d,
        r.acc3d_strict,
        r.acc3d_relaxed,
        r.outliers3d,
        opt(r.epe2d),
        opt(r.acc2d),
        opt(r.rle),
        opt(r.roe)
    )
}

/// Header, one row per scene, then the pooled `all` row.
pub fn metrics_csv(rows: &[(String, MetricsReport)]) -> Result<String> {
    let reports: Vec<MetricsReport> = rows.iter().map(|r| r.1.clone()).collect();
    let agg = MetricsReport::aggregate(&reports)?;
    let mut out = String::new();
    let _ = writeln!(out, "{CSV_HEADER}");
    for (id, r) in rows {
        let _ = writeln!(out, "{}", csv_row(id, r));
    }
    let _ = writeln!(out, "{}", csv_row("all", &agg));
    Ok(out)
}

/// Equal-width histogram of per-point EPE3D over `[0, max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl ErrorHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lower,upper,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", i, self.bin_edges[i], self.bin_edges[i + 1], c);
        }
        out
    }
}

/// Bins are right-open except the last, which includes the maximum.
pub fn histogram(values: &[f64], bins: usize) -> Result<ErrorHistogram> {
    if values.is_empty() || bins == 0 {
        return Err(Error::EmptyInput);
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Validation(format!("histogram value {v} is not a finite error")));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let edges: Vec<f64> = (0..=bins).map(|i| max * i as f64 / bins as f64).collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        if max == 0.0 {
            counts[0] += 1;
            continue;
        }
        let mut b = ((v / max * bins as f64) as usize).min(bins - 1);
        while b > 0 && v < edges[b] {
            b -= 1;
        }
        while b + 1 < bins && v >= edges[b + 1] {
            b += 1;
        }
        counts[b] += 1;
    }
    Ok(ErrorHistogram {
        bin_edges: edges,
        counts,
    })
}
