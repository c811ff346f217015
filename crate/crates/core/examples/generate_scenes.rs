//! Synthetic scene pairs with exact ground truth, written to disk and read back.

use rigidflow::data::{generate_dataset, read_dataset, write_scene, SceneGenConfig};

fn main() -> rigidflow::Result<()> {
    let cfg = SceneGenConfig {
        noise_sigma: 0.005,
        dropout: 0.1,
        ..SceneGenConfig::benchmark(42)
    };
    let scenes = generate_dataset(&cfg, 5)?;
    let dir = std::env::temp_dir().join("rigidflow-scenes");
    std::fs::create_dir_all(&dir).map_err(|e| rigidflow::Error::io(&dir, e))?;
    for s in &scenes {
        let gt = s.truth().expect("generated scenes carry labels");
        let mean_flow = gt.total.vectors().iter().map(|v| v.norm()).sum::<f64>() / s.p1.len() as f64;
        println!(
            "{}: |P1| {} |P2| {}, mean flow {:.3} m, decomposition residual {:.1e}",
            s.scene_id,
            s.p1.len(),
            s.p2.len(),
            mean_flow,
            gt.decomposition_residual(&s.p1)
        );
        write_scene(dir.join(format!("{}.rfsp", s.scene_id)), s)?;
    }
    let back = read_dataset(&dir)?;
    println!("read {} scenes back from {}", back.len(), dir.display());

    let unlabeled = scenes[0].without_truth();
    println!("stripped copy has labels: {}", unlabeled.has_truth());
    let no_ground = scenes[0].remove_ground(cfg.ground_height + 0.3)?;
    println!("ground removal kept {} of {} points", no_ground.p1.len(), scenes[0].p1.len());
    Ok(())
}
