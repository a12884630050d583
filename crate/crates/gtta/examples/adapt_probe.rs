//! Sweep TPD adaptation strength from a fixed source checkpoint.

use gtta::harness::{adapt_stream, domain_features, stream_order, train_source, AdaptHyper, Method, TrainConfig};
use gtta::synthdata::default_benchmark;
use gtta::tpd::TpdConfig;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let grt: bool = std::env::args().nth(2).map(|s| s == "grt").unwrap_or(true);
    let (source, targets) = default_benchmark().unwrap();
    let cfg = TrainConfig { epochs, grt_enabled: grt, seed: 0, ..TrainConfig::default() };
    let (model, _) = train_source(&cfg, &source).unwrap();

    for (clf_lr, steps, plm_lr, capacity, tau_proto) in [
        (1e-4, 1, 1e-3, 256, 0.1),
        (3e-3, 2, 1e-2, 32, 0.05),
        (3e-3, 2, 1e-2, 32, 0.1),
        (3e-3, 2, 1e-2, 32, 0.3),
        (3e-3, 2, 1e-2, 32, 1.0),
        (1e-2, 2, 1e-2, 32, 0.3),
        (1e-2, 4, 1e-2, 32, 1.0),
    ] {
        let hyper = AdaptHyper {
            tpd: TpdConfig { clf_lr, plm_lr, steps_per_batch: steps, capacity_per_class: capacity, tau_proto, ..TpdConfig::default() },
            ..AdaptHyper::default()
        };
        let mut accs = Vec::new();
        for tgt in &targets {
            let order = stream_order(0, tgt.name(), tgt.len());
            let feats = domain_features(&model, tgt, &order).unwrap();
            let labels: Vec<u8> = order.iter().map(|&i| tgt.samples[i].label).collect();
            let out = adapt_stream(&model, tgt.name(), &feats, &labels, Method::Tpd, &hyper, 0).unwrap();
            accs.push(out.eval.acc);
        }
        let avg = accs.iter().sum::<f64>() / accs.len() as f64;
        let row: Vec<String> = accs.iter().map(|a| format!("{a:5.1}")).collect();
        println!("clf {clf_lr:7.0e} st {steps} plm {plm_lr:7.0e} cap {capacity:>3} tau {tau_proto:4.2}: avg {avg:5.2} | {}", row.join(" "));
    }
}
