//! End-to-end localization of a synthetic benchmark in the three pipeline
//! configurations, with recall at the default thresholds.

use featloc::evaluation::{recall, run_benchmark, Mode, PipelineConfig, Thresholds};
use featloc::synth::{generate_scene, SynthConfig};

fn main() {
    let config = SynthConfig { num_queries: 20, ..Default::default() };
    let bench = generate_scene(&config).expect("benchmark");
    let pipeline = PipelineConfig::default();
    let thresholds = Thresholds::default();
    println!("{} queries, thresholds {:?}", bench.oracle.queries.len(), thresholds.0);
    for mode in [Mode::Ra, Mode::Rp, Mode::Rpa] {
        let outcomes = run_benchmark(&bench, mode, &pipeline, 0).expect("run");
        let report = recall(&outcomes, &thresholds).expect("recall");
        let failures = outcomes.iter().filter(|o| o.failure.is_some()).count();
        println!("{:<6} recall {}  ({failures} failures)", mode.label(), report.summary());
    }
}
