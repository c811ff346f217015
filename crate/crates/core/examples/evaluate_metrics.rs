//! The full metric suite for the oracle, ICP and an untrained network, plus
//! the EPE3D histogram.

use rigidflow::data::{generate_dataset, SceneGenConfig};
use rigidflow::icp::IcpConfig;
use rigidflow::metrics::{MetricsReport, CSV_HEADER};
use rigidflow::net::{NetConfig, NetworkParams};
use rigidflow::train::{evaluate, Predictor};

fn show(name: &str, r: &MetricsReport) {
    let o = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{name:>9}  epe3d {:.4}  acc.05 {:.3}  acc.1 {:.3}  out {:.3}  epe2d {}  acc2d {}  rle {}  roe {}",
        r.epe3d,
        r.acc3d_strict,
        r.acc3d_relaxed,
        r.outliers3d,
        o(r.epe2d),
        o(r.acc2d),
        o(r.rle),
        o(r.roe)
    );
}

fn main() -> rigidflow::Result<()> {
    let data = generate_dataset(&SceneGenConfig::benchmark(3), 20)?;
    let untrained = NetworkParams::init(NetConfig::default(), 0)?;
    let icp = evaluate(&data, &Predictor::Icp(IcpConfig::default()), None)?;
    show("oracle", &evaluate(&data, &Predictor::Oracle, None)?.aggregate);
    show("icp", &icp.aggregate);
    show("untrained", &evaluate(&data, &Predictor::network(&untrained, 5, true), None)?.aggregate);
    show("no-ego", &evaluate(&data, &Predictor::network(&untrained, 5, false), None)?.aggregate);

    println!("\nICP per-scene CSV (first rows):\n{CSV_HEADER}");
    for line in icp.metrics_csv()?.lines().skip(1).take(3) {
        println!("{line}");
    }
    println!("\nICP EPE3D histogram ({} points):", icp.histogram.total());
    let peak = *icp.histogram.counts.iter().max().unwrap_or(&1) as f64;
    for (i, &c) in icp.histogram.counts.iter().enumerate().filter(|(_, &c)| c > 0) {
        let bar = "#".repeat(((c as f64 / peak) * 40.0).ceil() as usize);
        println!("{:>7.4} m {bar} {c}", icp.histogram.bin_edges[i]);
    }
    Ok(())
}
