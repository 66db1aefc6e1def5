//! Coarse-to-fine feature-metric refinement of a perturbed query pose.

use featloc::align::{optimize_pyramid, AlignConfig, QueryView, ReferenceView};
use featloc::geometry::pose_error;
use featloc::synth::{generate_scene, perturb_pose_exact, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let config = SynthConfig { num_keyframes: 24, num_queries: 3, points_per_keyframe: 1000, ..Default::default() };
    let bench = generate_scene(&config).expect("benchmark");
    let camera = bench.world.camera;
    let align = AlignConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    for q in &bench.oracle.queries {
        let kf = bench.map.keyframe(q.source_keyframe).expect("keyframe");
        let points: Vec<_> = bench.map.visible_points(kf.id).unwrap().into_iter().map(|(p, _)| (p, None)).collect();
        let query = QueryView { pyramid: &bench.query_pyramids[&q.id], camera: &camera };
        let refs = [ReferenceView {
            pyramid: &bench.keyframe_pyramids[&kf.id],
            camera: &camera,
            pose: &kf.pose,
            points: &points,
        }];

        let init = perturb_pose_exact(&q.gt_pose, 0.2, 5.0, &mut rng);
        let (t0, r0) = pose_error(&init, &q.gt_pose);
        let result = optimize_pyramid(&init, &query, &refs, &align).expect("alignment");
        let (t1, r1) = pose_error(&result.pose, &q.gt_pose);
        println!("query {}: {t0:.3} units / {r0:.2} deg -> {t1:.4} units / {r1:.3} deg", q.id);
        for l in &result.levels {
            println!(
                "  stride {:>2}: {} iterations, {} points, cost {:.4e} -> {:.4e}, converged {}",
                l.stride, l.iterations, l.points, l.initial_cost, l.final_cost, l.converged
            );
        }
    }
}
