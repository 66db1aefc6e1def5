//! Generates a synthetic benchmark, writes it to disk and loads it back.
//!
//! Usage: cargo run --example synth_benchmark [output_dir]

use featloc::evaluation::LocalizationInputs;
use featloc::synth::{generate_scene, write_benchmark, SynthConfig};

fn main() {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("featloc_bench"), Into::into);
    let config = SynthConfig { num_keyframes: 24, num_queries: 8, ..Default::default() };
    let bench = generate_scene(&config).expect("benchmark");
    write_benchmark(&bench, &out).expect("write");

    println!("wrote {}", out.display());
    println!("  {} keyframes, {} map points", bench.map.keyframes.len(), bench.map.points.len());
    println!("  scene diameter {:.2}", bench.oracle.scene_diameter);
    for (stride, eps) in &bench.oracle.epsilon_render {
        println!("  stride {stride:>2}: largest two-view feature discrepancy {eps:.4}");
    }
    for q in bench.oracle.queries.iter().take(3) {
        println!(
            "  query {}: centre {:.2?}, source keyframe {}, {} correspondences",
            q.id,
            q.gt_pose.center(),
            q.source_keyframe,
            q.correspondences.len()
        );
    }

    let (inputs, oracle) = LocalizationInputs::load(&out).expect("load");
    assert_eq!(oracle, bench.oracle);
    println!("reloaded {} query pyramids, oracle round-trips", inputs.query_pyramids.len());
}
