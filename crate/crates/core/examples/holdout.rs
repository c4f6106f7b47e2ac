//! Generates a synthetic dataset and reports held-out accuracy per branch.
//!
//! `cargo run --release -p urfc-core --example holdout -- [noise] [regions_per_category] [seed] [test_fraction]`

use std::time::Instant;

use urfc::branches::GbdtBranchTrainer;
use urfc::fusion::FusionConfig;
use urfc::gbdt::GbdtParams;
use urfc::ingest::load_dataset;
use urfc::metrics::F1Scope;
use urfc::pipeline::{read_truth, run_holdout, TrainConfig};
use urfc::synth::{synth, SynthConfig};

fn main() -> urfc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let noise = args.first().map_or(0.3, |s| s.parse().unwrap());
    let per = args.get(1).map_or(100, |s| s.parse().unwrap());
    let seed = args.get(2).map_or(42, |s| s.parse().unwrap());
    let dir = std::env::temp_dir().join(format!("urfc-holdout-{noise}-{per}-{seed}"));
    let test_fraction = args.get(3).map_or(0.2, |s| s.parse().unwrap());
    let config = SynthConfig { noise, regions_per_category: per, seed, test_fraction, ..SynthConfig::default() };
    let start = Instant::now();
    let out = synth(&config, &dir)?;
    let dataset = load_dataset(&out.root, &out.manifest, config.window, 5, seed)?;
    let truth = read_truth(&out.test_labels)?;
    let train = TrainConfig {
        branches: GbdtBranchTrainer::uniform(GbdtParams { seed, ..GbdtParams::default() }),
        fusion: FusionConfig { seed, ..FusionConfig::default() },
    };
    let (_, report) = run_holdout(dataset, &truth, &train, F1Scope::All)?;
    print!("{}", report.to_text());
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
