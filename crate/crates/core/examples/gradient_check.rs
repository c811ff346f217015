//! Backprop against central differences for each loss term.

use rigidflow::data::{generate_scene, SceneGenConfig};
use rigidflow::gradcheck::check_objective;
use rigidflow::losses::{LossWeights, ObjectiveInput};
use rigidflow::net::{NetConfig, NetworkParams, PipelineOptions};
use rigidflow::nn::NeighborIndex;

fn main() -> rigidflow::Result<()> {
    let scene = generate_scene(&SceneGenConfig {
        n: 32,
        m: 32,
        seed: 9,
        ..SceneGenConfig::default()
    })?;
    let mut params = NetworkParams::init(NetConfig::default(), 1)?;
    // Output layers start at zero; perturb everything so every path is live.
    params.randomize(2, 0.3);
    let i1 = NeighborIndex::build(&scene.p1)?;
    let i2 = NeighborIndex::build(&scene.p2)?;
    let input = ObjectiveInput {
        scene_id: &scene.scene_id,
        p1: &scene.p1,
        p2: &scene.p2,
        p1_index: &i1,
        p2_index: &i2,
        truth: scene.truth(),
    };
    let z = LossWeights::zero();
    for (name, w) in [
        ("EPE3D", LossWeights { epe3d: 1.0, ..z }),
        ("non-rigid", LossWeights { nonrigid: 1.0, ..z }),
        ("rigid", LossWeights { rigid: 1.0, ..z }),
        ("cycle", LossWeights { fb: 1.0, ..z }),
        ("nearest", LossWeights { nn: 1.0, ..z }),
        ("hybrid total", LossWeights::hybrid()),
    ] {
        let r = check_objective(&params, &input, &w, PipelineOptions::new(3), 60, 1e-5, 7)?;
        println!("{name:>12}: loss {:.5}, max relative error {:.2e}", r.loss, r.max_rel_error());
    }
    Ok(())
}
