//! Quick calibration probe: trains both source models for a few epochs on the
//! default benchmark and prints the ablation and comparison grids for one seed
//! range. Useful when tuning hyperparameters; not part of the test suite.

use gtta::harness::experiments::{
    aggregate, mean_target_avg_acc, run_ablation, run_comparison, ABLATION_SETTINGS,
};
use gtta::harness::report::render_csv;
use gtta::harness::{AdaptHyper, TrainConfig};
use gtta::synthdata::default_benchmark;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let n_seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let jobs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);

    let t0 = Instant::now();
    let (source, targets) = default_benchmark().unwrap();
    println!("benchmark in {:.1?}", t0.elapsed());

    let train = TrainConfig { epochs, ..TrainConfig::default() };
    let hyper = AdaptHyper::default();
    let seeds: Vec<u64> = (0..n_seeds).collect();

    let t1 = Instant::now();
    let abl = run_ablation(&source, &targets, &train, &hyper, &seeds, jobs).unwrap();
    println!("ablation in {:.1?}", t1.elapsed());
    println!("{}", render_csv(&aggregate(&abl, &ABLATION_SETTINGS)));
    for s in ABLATION_SETTINGS {
        println!("{s:>8}: mean target-avg ACC {:.2}", mean_target_avg_acc(&abl, s));
    }

    let t2 = Instant::now();
    let cmp = run_comparison(&source, &targets, &train, &hyper, &seeds, jobs).unwrap();
    println!("comparison in {:.1?}", t2.elapsed());
    let settings: Vec<&str> = vec!["none", "tent", "plclf", "t3a", "tpd"];
    println!("{}", render_csv(&aggregate(&cmp, &settings)));
    for s in &settings {
        println!("{s:>8}: mean target-avg ACC {:.2}", mean_target_avg_acc(&cmp, s));
    }
}
