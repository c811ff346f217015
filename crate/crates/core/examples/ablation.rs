//! Supervision mode by ego-motion by refinement, all on one seed.

use rigidflow::data::{generate_dataset, SceneGenConfig};
use rigidflow::train::{evaluate, train, Predictor, TrainConfig, TrainMode};

fn main() -> rigidflow::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let mut all = generate_dataset(&SceneGenConfig::benchmark(7), 120)?;
    let test = all.split_off(100);
    let o = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    println!("mode            ego       k       EPE3D    ROE     RLE");
    for mode in [TrainMode::Hybrid, TrainMode::SelfSupervised] {
        for (ego, k) in [(true, 5), (true, 1), (false, 5)] {
            let cfg = TrainConfig {
                epochs,
                learning_rate: 1e-3,
                k_train: k,
                ego_motion: ego,
                seed: 1,
                ..TrainConfig::for_mode(mode)
            };
            let m = train(&all, None, &cfg)?;
            let e = evaluate(&test, &Predictor::network(&m.params, k, ego), None)?.aggregate;
            let k = if ego { k.to_string() } else { "-".into() };
            println!("{:<16}{:<10}{:<8}{:<9.4}{:<8}{}", mode.to_string(), ego, k, e.epe3d, o(e.roe), o(e.rle));
        }
    }
    Ok(())
}
