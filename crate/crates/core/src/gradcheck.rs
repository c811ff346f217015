//! Backprop versus central finite differences on the full objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::losses::{objective_graph, LossWeights, ObjectiveInput};
use crate::net::{Matcher, NetworkParams, PipelineOptions};

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// One checked parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub group: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }
}

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn evaluate(
    params: &NetworkParams,
    input: &ObjectiveInput<'_>,
    w: &LossWeights,
    opts: PipelineOptions,
    log: &[Vec<usize>],
) -> Result<f64> {
    let mut g = Graph::new();
    let net = params.bind(&mut g)?;
    let mut m = Matcher::replay(log.to_vec());
    let obj = objective_graph(&mut g, &net, input, w, opts, &mut m)?;
    Ok(g.scalar(obj.loss))
}

/// Checks `count` parameters drawn uniformly (without replacement) from all
/// groups, with step `h`. Matches found by the first pass are replayed in
/// every perturbed pass.
pub fn check_objective(
    params: &NetworkParams,
    input: &ObjectiveInput<'_>,
    w: &LossWeights,
    opts: PipelineOptions,
    count: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let net = params.bind(&mut g)?;
    let mut m = Matcher::live();
    let obj = objective_graph(&mut g, &net, input, w, opts, &mut m)?;
    let loss = g.scalar(obj.loss);
    let grads = g.backward(obj.loss)?;
    let log = m.into_log();

    let mut flat: Vec<(usize, usize)> = Vec::new();
    for (gi, grp) in params.groups().iter().enumerate() {
        flat.extend((0..grp.values.len()).map(|j| (gi, j)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, flat.len(), count.min(flat.len()));

    let mut samples = Vec::with_capacity(picks.len());
    for p in picks.iter() {
        let (gi, j) = flat[p];
        let analytic = grads.get(net.vars()[gi])[j];
        let mut plus = params.clone();
        plus.groups_mut()[gi].values[j] += h;
        let mut minus = params.clone();
        minus.groups_mut()[gi].values[j] -= h;
        let numeric = (evaluate(&plus, input, w, opts, &log)? - evaluate(&minus, input, w, opts, &log)?) / (2.0 * h);
        samples.push(GradSample {
            group: params.groups()[gi].name.clone(),
            index: j,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport { loss, samples })
}
