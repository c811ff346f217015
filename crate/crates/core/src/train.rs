//! Training loop, optimizer and evaluation driver.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::data::ScenePair;
use crate::error::{Error, Result};
use crate::flow::{augment_pair, FlowField, FlowKind};
use crate::geometry::{RigidTransform, Vec3};
use crate::icp::{icp_register, IcpConfig};
use crate::losses::{objective_graph, LossBreakdown, LossWeights, ObjectiveInput};
use crate::metrics::{histogram, metrics_csv, ErrorHistogram, MetricsReport, HISTOGRAM_BINS};
use crate::net::{
    pipeline_forward_with, Checkpoint, Matcher, NetConfig, NetworkParams, ParamGroup, PipelineOptions,
};
use crate::nn::NeighborIndex;

/// Supervision mode. Each selects a preset of loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Full,
    Hybrid,
    SelfSupervised,
}

impl TrainMode {
    pub fn weights(self) -> LossWeights {
        match self {
            TrainMode::Full => LossWeights::full(),
            TrainMode::Hybrid => LossWeights::hybrid(),
            TrainMode::SelfSupervised => LossWeights::self_supervised(),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Full => "full",
            TrainMode::Hybrid => "hybrid",
            TrainMode::SelfSupervised => "self_supervised",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "hybrid" => Ok(TrainMode::Hybrid),
            "self_supervised" | "self-supervised" => Ok(TrainMode::SelfSupervised),
            _ => Err(Error::InvalidConfig(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Only 1 is supported.
    pub batch_size: usize,
    pub k_train: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub ego_motion: bool,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Evaluate on the held-out set every this many epochs (0: never).
    pub eval_every: usize,
    /// Largest rotation (degrees) of the random rigid augmentation; 0 disables it.
    pub augment_rotation_deg: f64,
    pub augment_translation: f64,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_mode(TrainMode::Hybrid)
    }
}

impl TrainConfig {
    pub fn for_mode(mode: TrainMode) -> Self {
        Self {
            mode,
            epochs: 85,
            learning_rate: 1e-4,
            decay_factor: 0.7,
            decay_every: 35,
            batch_size: 1,
            k_train: 5,
            weights: mode.weights(),
            seed: 0,
            ego_motion: true,
            checkpoint_every: 0,
            eval_every: 0,
            augment_rotation_deg: 0.0,
            augment_translation: 0.0,
            net: NetConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size != 1 {
            return bad("only batch size 1 is supported");
        }
        if self.k_train == 0 {
            return bad("k_train must be >= 1");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.decay_every == 0 {
            return bad("decay factor must be in (0, 1] and decay_every >= 1");
        }
        if !(self.augment_rotation_deg >= 0.0 && self.augment_translation >= 0.0) {
            return bad("augmentation magnitudes must be >= 0");
        }
        self.weights.validate()?;
        self.net.validate()?;
        Ok(())
    }

    /// Weights actually optimized: without the ego-motion branch the
    /// decomposition terms do not exist.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.ego_motion {
            w.nonrigid = 0.0;
            w.rigid = 0.0;
        }
        w
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            k: self.k_train,
            ego_motion: self.ego_motion,
        }
    }
}

/// `α0 · factor^⌊epoch / every⌋`
pub fn learning_rate(alpha0: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    alpha0 * factor.powi((epoch / every) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one vector per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(groups: &[ParamGroup], config: AdamConfig) -> Self {
        Self {
            config,
            m: groups.iter().map(|g| vec![0.0; g.values.len()]).collect(),
            v: groups.iter().map(|g| vec![0.0; g.values.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(groups: &mut [ParamGroup], grads: &[Vec<f64>], state: &mut AdamState, alpha: f64) -> Result<()> {
    let shapes_ok = groups.len() == grads.len()
        && groups.len() == state.m.len()
        && groups
            .iter()
            .zip(grads)
            .zip(&state.m)
            .all(|((p, g), m)| p.values.len() == g.len() && g.len() == m.len());
    if !shapes_ok {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: (groups.len(), groups.iter().map(|g| g.values.len()).sum()),
            rhs: (grads.len(), grads.iter().map(Vec::len).sum()),
        });
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (gi, p) in groups.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[gi], &mut state.v[gi]);
        for (j, x) in p.values.iter_mut().enumerate() {
            let g = grads[gi][j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= alpha * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub alpha: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,epoch,L_total,L_epe3d,L_nr,L_r,L_fb,L_nn,alpha";

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step, r.epoch, l.total, l.epe3d, l.nonrigid, l.rigid, l.fb, l.nn, r.alpha
        );
    }
    out
}

/// Neighbour indices of a pair, built once per scene.
struct Prepared {
    i1: NeighborIndex,
    i2: NeighborIndex,
}

/// Training state that survives checkpoints.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: NetworkParams,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: usize,
    pub curve: Vec<LossRow>,
}

const META_EPOCH: &str = "train.epoch";
const META_STEP: &str = "train.step";
const META_ADAM_T: &str = "train.adam_t";
const META_EGO: &str = "train.ego_motion";
const META_K: &str = "train.k_train";

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = NetworkParams::init(config.net, config.seed)?;
        let adam = AdamState::new(params.groups(), AdamConfig::default());
        Ok(Self {
            config,
            params,
            adam,
            epoch: 0,
            step: 0,
            curve: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let params = ckpt.params()?;
        if params.config != config.net {
            return Err(Error::InvalidConfig("checkpoint layer widths differ from the config".into()));
        }
        let scalar = |name: &str| -> Result<f64> {
            ckpt.group(name)
                .and_then(|g| g.values.first().copied())
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks training state {name}")))
        };
        let mut adam = AdamState::new(params.groups(), AdamConfig::default());
        for (gi, g) in params.groups().iter().enumerate() {
            for (slot, prefix) in [(&mut adam.m[gi], "adam.m."), (&mut adam.v[gi], "adam.v.")] {
                let name = format!("{prefix}{}", g.name);
                let saved = ckpt
                    .group(&name)
                    .ok_or_else(|| Error::Validation(format!("checkpoint lacks {name}")))?;
                if saved.values.len() != slot.len() {
                    return Err(Error::Validation(format!("{name} has the wrong length")));
                }
                slot.copy_from_slice(&saved.values);
            }
        }
        adam.t = scalar(META_ADAM_T)? as u64;
        Ok(Self {
            config,
            params,
            adam,
            epoch: scalar(META_EPOCH)? as usize,
            step: scalar(META_STEP)? as usize,
            curve: Vec::new(),
        })
    }

    /// Weights plus optimizer state and counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_params(&self.params);
        let scalar = |name: &str, v: f64| ParamGroup {
            name: name.to_string(),
            shape: vec![1],
            values: vec![v],
        };
        for (gi, g) in self.params.groups().iter().enumerate() {
            for (prefix, vals) in [("adam.m.", &self.adam.m[gi]), ("adam.v.", &self.adam.v[gi])] {
                ckpt.groups.push(ParamGroup {
                    name: format!("{prefix}{}", g.name),
                    shape: g.shape.clone(),
                    values: vals.clone(),
                });
            }
        }
        ckpt.groups.push(scalar(META_EPOCH, self.epoch as f64));
        ckpt.groups.push(scalar(META_STEP, self.step as f64));
        ckpt.groups.push(scalar(META_ADAM_T, self.adam.t as f64));
        ckpt.groups.push(scalar(META_EGO, if self.config.ego_motion { 1.0 } else { 0.0 }));
        ckpt.groups.push(scalar(META_K, self.config.k_train as f64));
        ckpt
    }

    pub fn alpha(&self) -> f64 {
        learning_rate(
            self.config.learning_rate,
            self.config.decay_factor,
            self.config.decay_every,
            self.epoch,
        )
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        order
    }

    fn augmentation(&self) -> Option<RigidTransform> {
        let c = &self.config;
        if c.augment_rotation_deg == 0.0 && c.augment_translation == 0.0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed.wrapping_add(0x5851_f42d).wrapping_mul(self.step as u64 + 1));
        let max = c.augment_rotation_deg.to_radians();
        let angles = Vec3::new(
            rng.gen_range(-max..=max),
            rng.gen_range(-max..=max),
            rng.gen_range(-max..=max),
        );
        let t = c.augment_translation;
        let trans = Vec3::new(rng.gen_range(-t..=t), rng.gen_range(-t..=t), rng.gen_range(-t..=t));
        Some(RigidTransform::from_euler(&angles, trans))
    }

    fn train_step(&mut self, sample: &ScenePair, prep: Option<&Prepared>) -> Result<LossRow> {
        let w = self.config.effective_weights();
        let alpha = self.alpha();
        let augmented;
        let fresh;
        let (sample, prep) = match (self.augmentation(), prep) {
            (Some(g), _) => {
                augmented = augment_pair(sample, &g);
                fresh = prepare(&augmented)?;
                (&augmented, &fresh)
            }
            (None, Some(p)) => (sample, p),
            (None, None) => {
                fresh = prepare(sample)?;
                (sample, &fresh)
            }
        };
        // Labels are only touched when a supervised term is active.
        let truth = if w.needs_truth() { sample.truth() } else { None };
        let input = ObjectiveInput {
            scene_id: &sample.scene_id,
            p1: &sample.p1,
            p2: &sample.p2,
            p1_index: &prep.i1,
            p2_index: &prep.i2,
            truth,
        };
        let mut g = Graph::new();
        let net = self.params.bind(&mut g)?;
        let obj = objective_graph(&mut g, &net, &input, &w, self.config.pipeline_options(), &mut Matcher::live())?;
        let loss = obj.breakdown(&g);
        let non_finite = |detail: String| Error::NonFiniteLoss {
            epoch: self.epoch,
            step: self.step,
            detail,
        };
        if !loss.is_finite() {
            return Err(non_finite(format!("scene {}: {:?}", sample.scene_id, loss)));
        }
        let grads = g.backward(obj.loss)?;
        let grads: Vec<Vec<f64>> = net.vars().iter().map(|&v| grads.get(v)).collect();
        if let Some(gi) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(non_finite(format!(
                "scene {}: non-finite gradient in {}",
                sample.scene_id,
                self.params.groups()[gi].name
            )));
        }
        adam_step(self.params.groups_mut(), &grads, &mut self.adam, alpha)?;
        let row = LossRow {
            step: self.step,
            epoch: self.epoch,
            loss,
            alpha,
        };
        self.step += 1;
        self.curve.push(row);
        Ok(row)
    }

    fn run_epoch(&mut self, data: &[ScenePair], prepared: &[Prepared]) -> Result<()> {
        for i in self.epoch_order(data.len()) {
            self.train_step(&data[i], prepared.get(i))?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Trains until `config.epochs`. `on_epoch` runs after every epoch with
    /// the evaluation of that epoch, if one was scheduled.
    pub fn run<F>(&mut self, data: &[ScenePair], eval: Option<&[ScenePair]>, mut on_epoch: F) -> Result<Vec<(usize, EvalOutcome)>>
    where
        F: FnMut(&Trainer, Option<&EvalOutcome>) -> Result<()>,
    {
        if data.is_empty() {
            return Err(Error::EmptyInput);
        }
        let w = self.config.effective_weights();
        if w.needs_truth() {
            if let Some(s) = data.iter().find(|s| !s.has_truth()) {
                return Err(Error::MissingGroundTruth {
                    scene_id: s.scene_id.clone(),
                });
            }
        }
        let prepared = if self.config.augment_rotation_deg == 0.0 && self.config.augment_translation == 0.0 {
            data.iter().map(prepare).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut evals = Vec::new();
        while self.epoch < self.config.epochs {
            self.run_epoch(data, &prepared)?;
            let due = self.config.eval_every > 0 && (self.epoch % self.config.eval_every == 0 || self.epoch == self.config.epochs);
            let outcome = match (eval, due) {
                (Some(set), true) => Some(evaluate(set, &Predictor::network(&self.params, self.config.k_train, self.config.ego_motion), None)?),
                _ => None,
            };
            on_epoch(self, outcome.as_ref())?;
            if let Some(o) = outcome {
                evals.push((self.epoch, o));
            }
        }
        Ok(evals)
    }
}

fn prepare(s: &ScenePair) -> Result<Prepared> {
    Ok(Prepared {
        i1: NeighborIndex::build(&s.p1)?,
        i2: NeighborIndex::build(&s.p2)?,
    })
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub curve: Vec<LossRow>,
    pub evals: Vec<(usize, EvalOutcome)>,
}

/// Trains from scratch on `data`, evaluating on `eval` when scheduled.
pub fn train(data: &[ScenePair], eval: Option<&[ScenePair]>, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone())?;
    let evals = t.run(data, eval, |_, _| Ok(()))?;
    Ok(TrainOutcome {
        params: t.params,
        curve: t.curve,
        evals,
    })
}

// ---------------------------------------------------------------------------
// Evaluation.

/// Switches applied at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Use the options the model was trained with.
    None,
    /// Skip the pose branch; the flow network predicts total flow.
    NoEgo,
    /// A single pose step.
    NoRefine,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-ego" => Ok(Ablation::NoEgo),
            "no-refine" => Ok(Ablation::NoRefine),
            _ => Err(Error::InvalidConfig(format!("unknown ablation {s:?}"))),
        }
    }
}

impl Ablation {
    pub fn apply(self, opts: PipelineOptions) -> PipelineOptions {
        match self {
            Ablation::None => opts,
            Ablation::NoEgo => PipelineOptions { ego_motion: false, ..opts },
            Ablation::NoRefine => PipelineOptions { k: 1, ..opts },
        }
    }
}

/// What produces the flow being evaluated.
#[derive(Clone, Debug)]
pub enum Predictor<'a> {
    Network {
        params: &'a NetworkParams,
        opts: PipelineOptions,
    },
    Icp(IcpConfig),
    /// Returns the ground truth; sanity baseline.
    Oracle,
}

impl<'a> Predictor<'a> {
    pub fn network(params: &'a NetworkParams, k: usize, ego_motion: bool) -> Self {
        Predictor::Network {
            params,
            opts: PipelineOptions { k, ego_motion },
        }
    }

    /// Total flow and, when the predictor has one, the relative pose.
    pub fn predict(&self, s: &ScenePair) -> Result<(FlowField, Option<RigidTransform>)> {
        match self {
            Predictor::Network { params, opts } => {
                let mut g = Graph::new();
                let net = params.bind(&mut g)?;
                let index = NeighborIndex::build(&s.p2)?;
                let p = pipeline_forward_with(&net, &mut g, &s.p1, &s.p2, &index, *opts)?;
                let pose = p.ego_motion.then_some(p.transform);
                Ok((p.total, pose))
            }
            Predictor::Icp(cfg) => {
                let r = icp_register(&s.p1, &s.p2, cfg)?;
                Ok((crate::flow::ego_motion_flow(&s.p1, &r.transform).retagged(FlowKind::Total), Some(r.transform)))
            }
            Predictor::Oracle => {
                let gt = s.truth().ok_or_else(|| Error::MissingGroundTruth {
                    scene_id: s.scene_id.clone(),
                })?;
                Ok((gt.total.clone(), Some(gt.relative)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub per_scene: Vec<(String, MetricsReport)>,
    pub aggregate: MetricsReport,
    pub histogram: ErrorHistogram,
}

impl EvalOutcome {
    /// Per-scene rows followed by the pooled `all` row.
    pub fn metrics_csv(&self) -> Result<String> {
        metrics_csv(&self.per_scene)
    }
}

/// Number of evaluation threads: `RF_THREADS` when set, else all cores.
pub fn eval_threads() -> usize {
    std::env::var("RF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn evaluate_scene(s: &ScenePair, predictor: &Predictor<'_>) -> Result<(MetricsReport, Vec<f64>)> {
    let (flow, pose) = predictor.predict(s)?;
    let gt = s.truth().ok_or_else(|| Error::MissingGroundTruth {
        scene_id: s.scene_id.clone(),
    })?;
    let pose_pair = pose.as_ref().map(|p| (p, &gt.relative));
    match MetricsReport::for_scene(&s.p1, &flow, &gt.total, s.intrinsics.as_ref(), pose_pair) {
        // A prediction that leaves the front of the camera has no 2D
        // metrics; the scene still counts in 3D.
        Err(Error::NonPositiveDepth { .. }) => MetricsReport::for_scene(&s.p1, &flow, &gt.total, None, pose_pair),
        r => r,
    }
}

/// Evaluates every scene in parallel (at most `threads`, default
/// [`eval_threads`]) and merges in dataset order.
pub fn evaluate(data: &[ScenePair], predictor: &Predictor<'_>, threads: Option<usize>) -> Result<EvalOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or_else(eval_threads))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let results: Vec<(MetricsReport, Vec<f64>)> =
        pool.install(|| data.par_iter().map(|s| evaluate_scene(s, predictor)).collect::<Result<_>>())?;
    let reports: Vec<MetricsReport> = results.iter().map(|r| r.0.clone()).collect();
    let pooled: Vec<f64> = results.iter().flat_map(|r| r.1.iter().copied()).collect();
    Ok(EvalOutcome {
        per_scene: data
            .iter()
            .map(|s| s.scene_id.clone())
            .zip(reports.iter().cloned())
            .collect(),
        aggregate: MetricsReport::aggregate(&reports)?,
        histogram: histogram(&pooled, HISTOGRAM_BINS)?,
    })
}

/// Pipeline options stored in a training checkpoint, if any.
pub fn checkpoint_options(ckpt: &Checkpoint) -> Option<PipelineOptions> {
    let ego = ckpt.group(META_EGO)?.values.first().copied()?;
    let k = ckpt.group(META_K)?.values.first().copied()?;
    Some(PipelineOptions {
        k: k as usize,
        ego_motion: ego != 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, generate_scene, SceneGenConfig};
    use crate::geometry::rotation_error_deg;

    fn small_data(count: usize, seed: u64) -> Vec<ScenePair> {
        generate_dataset(
            &SceneGenConfig {
                n: 48,
                m: 48,
                seed,
                ..SceneGenConfig::default()
            },
            count,
        )
        .unwrap()
    }

    #[test]
    fn schedule_steps_down_every_35_epochs() {
        assert_eq!(learning_rate(1e-4, 0.7, 35, 0), 1e-4);
        assert_eq!(learning_rate(1e-4, 0.7, 35, 34), 1e-4);
        assert_eq!(learning_rate(1e-4, 0.7, 35, 35), 1e-4 * 0.7);
        assert_eq!(learning_rate(1e-4, 0.7, 35, 70), 1e-4 * 0.7f64.powi(2));
        assert_eq!(learning_rate(1e-4, 0.7, 35, 104), 1e-4 * 0.7f64.powi(2));
    }

    fn one_group(v: Vec<f64>) -> Vec<ParamGroup> {
        vec![ParamGroup {
            name: "x".into(),
            shape: vec![v.len()],
            values: v,
        }]
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = one_group(vec![1.0, -2.0]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut p, &[vec![0.0, 0.0]], &mut s, 0.1).unwrap();
        }
        assert_eq!(p[0].values, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_matches_scalar_recursion() {
        let mut p = one_group(vec![0.5]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = 0.3 + 0.01 * t as f64;
            adam_step(&mut p, &[vec![g]], &mut s, 1e-2).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-2 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0].values[0] - x).abs() < 1e-15);
        }
        // A constant gradient gives steps of almost exactly α at first.
        let mut p = one_group(vec![0.0]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[vec![7.0]], &mut s, 1e-3).unwrap();
        assert!((p[0].values[0] + 1e-3).abs() < 1e-9);
        assert!(adam_step(&mut p, &[vec![1.0, 2.0]], &mut s, 1e-3).is_err());
    }

    #[test]
    fn self_supervised_training_reads_no_labels() {
        let data = small_data(3, 1);
        let cfg = TrainConfig {
            epochs: 2,
            k_train: 2,
            learning_rate: 1e-3,
            ..TrainConfig::for_mode(TrainMode::SelfSupervised)
        };
        let out = train(&data, None, &cfg).unwrap();
        assert_eq!(out.curve.len(), 6);
        assert!(data.iter().all(|s| s.truth_reads() == 0));
        assert!(out.curve.iter().all(|r| r.loss.epe3d == 0.0 && r.loss.total == r.loss.fb + r.loss.nn));

        // Label-stripped data works too, and supervised modes refuse it.
        let stripped: Vec<ScenePair> = data.iter().map(ScenePair::without_truth).collect();
        assert!(train(&stripped, None, &cfg).is_ok());
        let hybrid = TrainConfig {
            epochs: 1,
            ..TrainConfig::for_mode(TrainMode::Hybrid)
        };
        assert!(matches!(train(&stripped, None, &hybrid), Err(Error::MissingGroundTruth { .. })));
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let data = small_data(3, 2);
        let cfg = TrainConfig {
            epochs: 4,
            k_train: 2,
            learning_rate: 1e-3,
            decay_every: 2,
            ..TrainConfig::for_mode(TrainMode::Hybrid)
        };
        let a = train(&data, None, &cfg).unwrap();
        let b = train(&data, None, &cfg).unwrap();
        let bits = |c: &[LossRow]| c.iter().map(|r| (r.loss.total.to_bits(), r.alpha.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a.curve), bits(&b.curve));
        assert_eq!(a.params, b.params);
        for r in &a.curve {
            assert!(r.loss.epe3d >= 0.0 && r.loss.nonrigid >= 0.0 && r.loss.rigid >= 0.0);
            assert!(r.loss.fb >= 0.0 && r.loss.nn >= 0.0);
        }

        // Two epochs, checkpoint, then two more from the checkpoint.
        let mut t = Trainer::new(TrainConfig { epochs: 2, ..cfg.clone() }).unwrap();
        t.run(&data, None, |_, _| Ok(())).unwrap();
        let ckpt = Checkpoint::from_bytes(&t.checkpoint().to_bytes()).unwrap();
        let mut r = Trainer::resume(cfg.clone(), &ckpt).unwrap();
        assert_eq!(r.alpha(), 1e-3 * 0.7);
        r.run(&data, None, |_, _| Ok(())).unwrap();
        assert_eq!(bits(&r.curve), bits(&a.curve[6..]));
        assert_eq!(r.params, a.params);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let data = small_data(1, 3);
        let mut t = Trainer::new(TrainConfig {
            epochs: 1,
            k_train: 1,
            ..TrainConfig::for_mode(TrainMode::Full)
        })
        .unwrap();
        let last = t.params.groups().len() - 1;
        t.params.groups_mut()[last].values[0] = f64::NAN;
        let before = t.params.clone();
        let r = t.run(&data, None, |_, _| Ok(()));
        assert!(matches!(r, Err(Error::NonFiniteLoss { epoch: 0, step: 0, .. })));
        // Parameters are left as they were before the failing step.
        assert_eq!(format!("{:?}", t.params), format!("{before:?}"));
    }

    #[test]
    fn full_mode_overfits_one_rigid_pair() {
        let s = generate_scene(&SceneGenConfig {
            n: 64,
            m: 64,
            rbf_count: 0,
            seed: 11,
            ..SceneGenConfig::default()
        })
        .unwrap();
        let data = vec![s];
        let cfg = TrainConfig {
            epochs: 2000,
            k_train: 1,
            learning_rate: 1e-3,
            decay_every: 1000,
            ..TrainConfig::for_mode(TrainMode::Full)
        };
        let out = train(&data, None, &cfg).unwrap();
        let gt = data[0].truth().unwrap().relative;
        let (_, pose) = Predictor::network(&out.params, 1, true).predict(&data[0]).unwrap();
        let roe = rotation_error_deg(&pose.unwrap().rotation, &gt.rotation);
        assert!(roe < 1.0, "{roe}");
    }

    #[test]
    fn oracle_and_icp_evaluation() {
        let data = small_data(4, 4);
        let o = evaluate(&data, &Predictor::Oracle, Some(2)).unwrap();
        let a = &o.aggregate;
        assert_eq!((a.epe3d, a.acc3d_strict, a.acc3d_relaxed, a.outliers3d), (0.0, 1.0, 1.0, 0.0));
        assert_eq!((a.epe2d, a.acc2d, a.rle, a.roe), (Some(0.0), Some(1.0), Some(0.0), Some(0.0)));
        assert_eq!(o.histogram.total(), 4 * 48);
        assert_eq!(o.per_scene.len(), 4);

        let rigid = generate_dataset(
            &SceneGenConfig {
                n: 200,
                m: 200,
                rbf_count: 0,
                seed: 5,
                ..SceneGenConfig::default()
            },
            3,
        )
        .unwrap();
        let e = evaluate(&rigid, &Predictor::Icp(IcpConfig::default()), Some(1)).unwrap();
        assert!(e.aggregate.epe3d < 1e-3);
        let e1 = evaluate(&data, &Predictor::Icp(IcpConfig::default()), Some(1)).unwrap();
        let e2 = evaluate(&data, &Predictor::Icp(IcpConfig::default()), Some(3)).unwrap();
        assert_eq!(e1, e2);
        assert!(e1.aggregate.epe3d > 1e-3);
    }

    #[test]
    fn ablations_adjust_options() {
        let o = PipelineOptions::new(5);
        assert_eq!(Ablation::None.apply(o), o);
        assert_eq!(Ablation::NoRefine.apply(o).k, 1);
        assert!(!Ablation::NoEgo.apply(o).ego_motion);
        assert!("bogus".parse::<Ablation>().is_err());
        assert_eq!("self_supervised".parse::<TrainMode>().unwrap(), TrainMode::SelfSupervised);

        let data = small_data(2, 6);
        let params = NetworkParams::init(NetConfig::default(), 0).unwrap();
        let e = evaluate(&data, &Predictor::network(&params, 1, false), Some(1)).unwrap();
        assert_eq!((e.aggregate.rle, e.aggregate.roe), (None, None));
        let e = evaluate(&data, &Predictor::network(&params, 1, true), Some(1)).unwrap();
        assert!(e.aggregate.rle.is_some());
    }
}
