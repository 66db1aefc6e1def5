//! GeM pooling on a toy map, then global retrieval on a synthetic benchmark.

use featloc::feature::FeatureMap;
use featloc::retrieval::{gem_pool, rank_keyframes, top_k, GemParams};
use featloc::synth::{generate_scene, SynthConfig};

fn main() {
    let data: Vec<f32> = (0..16).flat_map(|i| [i as f32, 1.0]).collect();
    let map = FeatureMap::new(4, 4, 2, 1, data).expect("feature map");
    for p in [1.0, 3.0, 10.0, 100.0] {
        let pooled = gem_pool(&map, &GemParams::shared(p).unwrap()).unwrap();
        println!("GeM p = {p:>5}: {pooled:.3?}");
    }

    let config = SynthConfig { num_keyframes: 24, num_queries: 12, ..Default::default() };
    let bench = generate_scene(&config).expect("benchmark");
    let mut hits = 0;
    for q in &bench.oracle.queries {
        let ranking = rank_keyframes(&bench.query_descriptors[&q.id], &bench.keyframe_descriptors).unwrap();
        let shortlist: Vec<u64> = top_k(&ranking, 3).iter().map(|(id, _)| *id).collect();
        let hit = shortlist.contains(&q.source_keyframe);
        hits += hit as usize;
        println!("query {:>2}: source keyframe {:>2}, top 3 {shortlist:?}", q.id, q.source_keyframe);
    }
    println!("source keyframe in top 3 for {hits}/{} queries", bench.oracle.queries.len());
}
