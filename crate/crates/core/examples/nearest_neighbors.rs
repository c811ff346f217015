//! Exact kd-tree nearest neighbours, checked against brute force.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rigidflow::geometry::Vec3;
use rigidflow::nn::{brute_force_nearest, NeighborIndex};
use std::time::Instant;

fn main() -> rigidflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut point = || Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-2.0..2.0), rng.gen_range(3.0..12.0));
    let cloud: Vec<Vec3> = (0..20_000).map(|_| point()).collect();
    let queries: Vec<Vec3> = (0..2_000).map(|_| point()).collect();

    let t0 = Instant::now();
    let index = NeighborIndex::from_points(cloud.clone())?;
    let built = t0.elapsed();
    let t0 = Instant::now();
    let found = index.nearest_indices(&queries);
    let searched = t0.elapsed();

    let t0 = Instant::now();
    let agree = queries
        .iter()
        .zip(&found)
        .all(|(q, &i)| brute_force_nearest(&cloud, q).index == i);
    let brute = t0.elapsed();
    println!("build {built:?}, {} queries {searched:?}, brute force {brute:?}", queries.len());
    println!("matches brute force: {agree}");
    Ok(())
}
