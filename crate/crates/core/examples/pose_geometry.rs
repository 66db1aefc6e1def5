//! SE(3) exponential and logarithm, pinhole projection and pose errors.

use featloc::geometry::{pose_error, PinholeCamera, PoseSE3, Tangent};
use nalgebra::Vector3;

fn main() {
    let camera = PinholeCamera::new(500.0, 500.0, 320.0, 240.0, 640, 480).expect("camera");
    let pose = PoseSE3::look_at(&Vector3::new(0.0, -8.0, 3.0), &Vector3::zeros(), &Vector3::z());
    println!("camera centre {:.3?}", pose.center().as_slice());

    let delta = Tangent::new(0.05, -0.02, 0.01, 0.002, 0.01, -0.004);
    let moved = PoseSE3::exp(&delta).compose(&pose);
    let back = moved.compose(&pose.inverse()).log();
    println!("tangent {:.4?}", delta.as_slice());
    println!("log     {:.4?}", back.as_slice());

    let (t, r) = pose_error(&moved, &pose);
    println!("pose error {t:.4} units, {r:.4} deg");

    for p in [Vector3::zeros(), Vector3::new(1.0, 0.5, 0.0), Vector3::new(-2.0, 1.0, 1.0)] {
        let a = camera.project(&pose.transform_point(&p)).expect("in front");
        let b = camera.project(&moved.transform_point(&p)).expect("in front");
        println!(
            "{:>5.1?}: {:>7.2?} -> {:>7.2?}, shift {:.2} px",
            p.as_slice(),
            a.as_slice(),
            b.as_slice(),
            (b - a).norm()
        );
    }
}
