//! Self-supervised training on unlabeled pairs, scored against ICP.

use rigidflow::data::{generate_dataset, SceneGenConfig, ScenePair};
use rigidflow::icp::IcpConfig;
use rigidflow::train::{evaluate, Predictor, TrainConfig, TrainMode, Trainer};

fn main() -> rigidflow::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let mut all = generate_dataset(&SceneGenConfig::benchmark(7), 120)?;
    let test = all.split_off(100);
    // The trainer never sees labels.
    let train: Vec<ScenePair> = all.iter().map(ScenePair::without_truth).collect();

    let icp = evaluate(&test, &Predictor::Icp(IcpConfig::default()), None)?;
    println!("ICP held-out EPE3D {:.4}", icp.aggregate.epe3d);

    let cfg = TrainConfig {
        epochs,
        learning_rate: 1e-3,
        k_train: 5,
        ..TrainConfig::for_mode(TrainMode::SelfSupervised)
    };
    let mut trainer = Trainer::new(cfg)?;
    trainer.run(&train, None, |t, _| {
        let rows = &t.curve[t.curve.len() - train.len()..];
        let mean = rows.iter().map(|r| r.loss.total).sum::<f64>() / rows.len() as f64;
        let e = evaluate(&test, &Predictor::network(&t.params, 5, true), None)?;
        println!(
            "epoch {:>3}  loss {:.4}  fb {:.4}  nn {:.4}  held-out EPE3D {:.4}",
            t.epoch,
            mean,
            rows.iter().map(|r| r.loss.fb).sum::<f64>() / rows.len() as f64,
            rows.iter().map(|r| r.loss.nn).sum::<f64>() / rows.len() as f64,
            e.aggregate.epe3d
        );
        Ok(())
    })?;
    Ok(())
}
