//! Trains with five refinement steps, then sweeps the number used at
//! inference.

use rigidflow::data::{generate_dataset, SceneGenConfig};
use rigidflow::train::{evaluate, train, Predictor, TrainConfig, TrainMode};

fn main() -> rigidflow::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let mut all = generate_dataset(&SceneGenConfig::benchmark(7), 120)?;
    let test = all.split_off(100);
    let cfg = TrainConfig {
        epochs,
        learning_rate: 1e-3,
        k_train: 5,
        ..TrainConfig::for_mode(TrainMode::Hybrid)
    };
    let model = train(&all, None, &cfg)?;
    println!("k_infer  EPE3D    ROE(deg)  RLE(m)");
    for k in [1, 2, 3, 5, 8] {
        let e = evaluate(&test, &Predictor::network(&model.params, k, true), None)?.aggregate;
        println!(
            "{k:>7}  {:.4}   {:.3}     {:.4}",
            e.epe3d,
            e.roe.unwrap_or(f64::NAN),
            e.rle.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
