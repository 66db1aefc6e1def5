//! Sparse-to-dense hypercolumn matching and PnP-RANSAC re-ranking of the
//! retrieved keyframes of one synthetic query.

use featloc::evaluation::pyramid_hypercolumn;
use featloc::geometry::pose_error;
use featloc::rerank::{rerank_candidates, Candidate, RerankConfig};
use featloc::retrieval::{rank_keyframes, top_k};
use featloc::synth::{generate_scene, SynthConfig};

fn main() {
    let config = SynthConfig { num_keyframes: 24, num_queries: 4, ..Default::default() };
    let bench = generate_scene(&config).expect("benchmark");
    let strides = [4, 16];
    let camera = bench.world.camera;

    for q in &bench.oracle.queries {
        let ranking = rank_keyframes(&bench.query_descriptors[&q.id], &bench.keyframe_descriptors).unwrap();
        let shortlist = top_k(&ranking, 3);
        let query_hyp = pyramid_hypercolumn(&bench.query_pyramids[&q.id], &strides).unwrap();
        let hyps: Vec<_> = shortlist
            .iter()
            .map(|(id, _)| pyramid_hypercolumn(&bench.keyframe_pyramids[id], &strides).unwrap())
            .collect();
        let observations: Vec<_> = shortlist.iter().map(|(id, _)| bench.map.visible_points(*id).unwrap()).collect();
        let candidates: Vec<Candidate<'_>> = shortlist
            .iter()
            .enumerate()
            .map(|(i, (id, _))| Candidate { keyframe_id: *id, hypercolumn: &hyps[i], observations: &observations[i] })
            .collect();
        let out = rerank_candidates(&query_hyp, &candidates, &camera, &RerankConfig::default()).expect("rerank");

        println!("query {} (source keyframe {})", q.id, q.source_keyframe);
        for d in &out.diagnostics {
            println!(
                "  keyframe {:>2}: retrieval rank {}, {} matches, {} inliers",
                d.keyframe_id, d.retrieval_rank, d.matches, d.inliers
            );
        }
        if let Some((id, best)) = out.best() {
            let (t, r) = pose_error(&best.pose, &q.gt_pose);
            println!("  best keyframe {id}: pose error {t:.3} units, {r:.3} deg");
        }
    }
}
