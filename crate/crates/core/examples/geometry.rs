//! Rigid transforms, Euler angles, relative poses and ego-motion flow.

use rigidflow::flow::{ego_motion_flow, PointCloud};
use rigidflow::geometry::{relative_pose, rotation_error_deg, EulerPose, RigidTransform, Vec3};

fn main() -> rigidflow::Result<()> {
    // Camera poses of two frames, world to camera.
    let pose1 = EulerPose::new(Vec3::new(0.0, 0.05, 0.0), Vec3::new(0.0, 0.0, 0.0)).to_transform();
    let pose2 = EulerPose::new(Vec3::new(0.01, 0.08, -0.02), Vec3::new(0.1, 0.0, -0.4)).to_transform();
    let rel = relative_pose(&pose1, &pose2);
    let back = rel.to_euler()?;
    println!("relative pose angles (rad) {:?}", back.angles.as_slice());
    println!("relative pose translation (m) {:?}", back.translation.as_slice());

    let round = EulerPose::from_transform(&rel)?.to_transform();
    println!("euler round trip rotation error {:.2e} deg", rotation_error_deg(&round.rotation, &rel.rotation));

    let p = PointCloud::new(vec![Vec3::new(0.0, 0.0, 5.0), Vec3::new(1.0, -0.5, 8.0)])?;
    for (x, d) in p.iter().zip(ego_motion_flow(&p, &rel).vectors()) {
        println!("point {:?} moves by {:?}", x.as_slice(), d.as_slice());
    }

    let step = RigidTransform::from_euler(&Vec3::new(0.0, 0.0, 0.1), Vec3::new(0.2, 0.0, 0.0));
    let twice = step.compose(&step);
    println!("compose equals power: {}", twice == step.power(2));
    println!("T then T^-1 is identity: {}", step.compose(&step.inverse()).is_identity(1e-12));
    Ok(())
}
