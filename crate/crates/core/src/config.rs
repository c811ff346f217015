//! Experiment configuration: flat `key = value` text with `gen.`, `train.`,
//! `refine.`, `loss.`, `net.` and `icp.` prefixes. `#` starts a comment.
//!
//! `train.mode` selects the loss-weight preset; explicit `loss.*` keys
//! override it wherever they appear in the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::SceneGenConfig;
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::icp::IcpConfig;
use crate::net::RefineConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub gen: SceneGenConfig,
    /// Number of scenes `generate` writes when `--count` is absent.
    pub count: usize,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub icp: IcpConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let refine = RefineConfig::default();
        Self {
            gen: SceneGenConfig::default(),
            count: 100,
            train: TrainConfig {
                k_train: refine.k_train,
                ..TrainConfig::default()
            },
            refine,
            icp: IcpConfig::default(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        message: format!("{key}: cannot parse {v:?}"),
    })
}

fn parse_bool(key: &str, v: &str, line: usize) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse {
            line,
            message: format!("{key}: expected true or false, got {v:?}"),
        }),
    }
}

fn parse_intrinsics(v: &str, line: usize) -> Result<Option<CameraIntrinsics>> {
    if v == "none" {
        return Ok(None);
    }
    let parts: Vec<f64> = v
        .split_whitespace()
        .map(|x| parse_num("gen.intrinsics", x, line))
        .collect::<Result<_>>()?;
    match parts[..] {
        [fx, fy, cx, cy] => Ok(Some(CameraIntrinsics::new(fx, fy, cx, cy)?)),
        _ => Err(Error::Parse {
            line,
            message: "gen.intrinsics: expected `none` or `fx fy cx cy`".into(),
        }),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate key {k}"),
                });
            }
        }
        let mut c = ExperimentConfig::default();
        // The mode preset goes first so loss keys can override it.
        if let Some((line, v)) = entries.get("train.mode") {
            c.train.mode = v.parse().map_err(|_| Error::Parse {
                line: *line,
                message: format!("train.mode: unknown mode {v:?}"),
            })?;
            c.train.weights = c.train.mode.weights();
        }
        for (key, (line, v)) in &entries {
            c.set(key, v, *line)?;
        }
        c.train.k_train = c.refine.k_train;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        let g = &mut self.gen;
        let t = &mut self.train;
        let w = &mut t.weights;
        match key {
            "gen.n" => g.n = parse_num(key, v, line)?,
            "gen.m" => g.m = parse_num(key, v, line)?,
            "gen.object_count" => g.object_count = parse_num(key, v, line)?,
            "gen.max_rotation_deg" => g.max_rotation_deg = parse_num(key, v, line)?,
            "gen.max_translation" => g.max_translation = parse_num(key, v, line)?,
            "gen.rbf_count" => g.rbf_count = parse_num(key, v, line)?,
            "gen.rbf_width_min" => g.rbf_width_min = parse_num(key, v, line)?,
            "gen.rbf_width_max" => g.rbf_width_max = parse_num(key, v, line)?,
            "gen.rbf_amplitude" => g.rbf_amplitude = parse_num(key, v, line)?,
            "gen.noise_sigma" => g.noise_sigma = parse_num(key, v, line)?,
            "gen.dropout" => g.dropout = parse_num(key, v, line)?,
            "gen.ground_plane" => g.ground_plane = parse_bool(key, v, line)?,
            "gen.ground_height" => g.ground_height = parse_num(key, v, line)?,
            "gen.ground_fraction" => g.ground_fraction = parse_num(key, v, line)?,
            "gen.time_delta" => g.time_delta = parse_num(key, v, line)?,
            "gen.intrinsics" => g.intrinsics = parse_intrinsics(v, line)?,
            "gen.seed" => g.seed = parse_num(key, v, line)?,
            "gen.count" => self.count = parse_num(key, v, line)?,
            "train.mode" => {}
            "train.epochs" => t.epochs = parse_num(key, v, line)?,
            "train.learning_rate" => t.learning_rate = parse_num(key, v, line)?,
            "train.decay_factor" => t.decay_factor = parse_num(key, v, line)?,
            "train.decay_every" => t.decay_every = parse_num(key, v, line)?,
            "train.batch_size" => t.batch_size = parse_num(key, v, line)?,
            "train.seed" => t.seed = parse_num(key, v, line)?,
            "train.ego_motion" => t.ego_motion = parse_bool(key, v, line)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_num(key, v, line)?,
            "train.eval_every" => t.eval_every = parse_num(key, v, line)?,
            "train.augment_rotation_deg" => t.augment_rotation_deg = parse_num(key, v, line)?,
            "train.augment_translation" => t.augment_translation = parse_num(key, v, line)?,
            "refine.k_train" => self.refine.k_train = parse_num(key, v, line)?,
            "refine.k_infer" => self.refine.k_infer = parse_num(key, v, line)?,
            "loss.w_epe3d" => w.epe3d = parse_num(key, v, line)?,
            "loss.w_nr" => w.nonrigid = parse_num(key, v, line)?,
            "loss.w_r" => w.rigid = parse_num(key, v, line)?,
            "loss.w_rot" => w.rot = parse_num(key, v, line)?,
            "loss.w_fb" => w.fb = parse_num(key, v, line)?,
            "loss.w_nn" => w.nn = parse_num(key, v, line)?,
            "net.pose_enc1" => t.net.pose_enc1 = parse_num(key, v, line)?,
            "net.pose_enc2" => t.net.pose_enc2 = parse_num(key, v, line)?,
            "net.pose_hidden" => t.net.pose_hidden = parse_num(key, v, line)?,
            "net.flow_enc" => t.net.flow_enc = parse_num(key, v, line)?,
            "net.flow_hidden" => t.net.flow_hidden = parse_num(key, v, line)?,
            "icp.max_iterations" => self.icp.max_iterations = parse_num(key, v, line)?,
            "icp.convergence_tol" => self.icp.convergence_tol = parse_num(key, v, line)?,
            "icp.max_correspondence_distance" => {
                self.icp.max_correspondence_distance = parse_num(key, v, line)?
            }
            "icp.centroid_init" => self.icp.centroid_init = parse_bool(key, v, line)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        self.refine.validate()?;
        self.icp.validate()?;
        if self.train.k_train != self.refine.k_train {
            return Err(Error::InvalidConfig("train and refine k_train differ".into()));
        }
        Ok(())
    }

    /// Every key with its effective value; parses back to `self`.
    pub fn resolved(&self) -> String {
        let g = &self.gen;
        let t = &self.train;
        let w = &t.weights;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("gen.n", g.n.to_string());
        kv("gen.m", g.m.to_string());
        kv("gen.object_count", g.object_count.to_string());
        kv("gen.max_rotation_deg", format!("{:?}", g.max_rotation_deg));
        kv("gen.max_translation", format!("{:?}", g.max_translation));
        kv("gen.rbf_count", g.rbf_count.to_string());
        kv("gen.rbf_width_min", format!("{:?}", g.rbf_width_min));
        kv("gen.rbf_width_max", format!("{:?}", g.rbf_width_max));
        kv("gen.rbf_amplitude", format!("{:?}", g.rbf_amplitude));
        kv("gen.noise_sigma", format!("{:?}", g.noise_sigma));
        kv("gen.dropout", format!("{:?}", g.dropout));
        kv("gen.ground_plane", g.ground_plane.to_string());
        kv("gen.ground_height", format!("{:?}", g.ground_height));
        kv("gen.ground_fraction", format!("{:?}", g.ground_fraction));
        kv("gen.time_delta", format!("{:?}", g.time_delta));
        kv(
            "gen.intrinsics",
            g.intrinsics.map_or_else(
                || "none".to_string(),
                |k| format!("{:?} {:?} {:?} {:?}", k.fx, k.fy, k.cx, k.cy),
            ),
        );
        kv("gen.seed", g.seed.to_string());
        kv("gen.count", self.count.to_string());
        kv("train.mode", t.mode.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.learning_rate", format!("{:?}", t.learning_rate));
        kv("train.decay_factor", format!("{:?}", t.decay_factor));
        kv("train.decay_every", t.decay_every.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.ego_motion", t.ego_motion.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("train.eval_every", t.eval_every.to_string());
        kv("train.augment_rotation_deg", format!("{:?}", t.augment_rotation_deg));
        kv("train.augment_translation", format!("{:?}", t.augment_translation));
        kv("refine.k_train", self.refine.k_train.to_string());
        kv("refine.k_infer", self.refine.k_infer.to_string());
        kv("loss.w_epe3d", format!("{:?}", w.epe3d));
        kv("loss.w_nr", format!("{:?}", w.nonrigid));
        kv("loss.w_r", format!("{:?}", w.rigid));
        kv("loss.w_rot", format!("{:?}", w.rot));
        kv("loss.w_fb", format!("{:?}", w.fb));
        kv("loss.w_nn", format!("{:?}", w.nn));
        kv("net.pose_enc1", t.net.pose_enc1.to_string());
        kv("net.pose_enc2", t.net.pose_enc2.to_string());
        kv("net.pose_hidden", t.net.pose_hidden.to_string());
        kv("net.flow_enc", t.net.flow_enc.to_string());
        kv("net.flow_hidden", t.net.flow_hidden.to_string());
        kv("icp.max_iterations", self.icp.max_iterations.to_string());
        kv("icp.convergence_tol", format!("{:?}", self.icp.convergence_tol));
        kv(
            "icp.max_correspondence_distance",
            format!("{:?}", self.icp.max_correspondence_distance),
        );
        kv("icp.centroid_init", self.icp.centroid_init.to_string());
        out
    }
}
