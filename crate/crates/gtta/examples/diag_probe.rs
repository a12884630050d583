//! Diagnostic probe: per-domain score distributions after default training.

use gtta::harness::{evaluate_frozen, train_source, TrainConfig};
use gtta::backbone::{classifier_probs_values, extract_features};
use gtta::synthdata::default_benchmark;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let grt: bool = std::env::args().nth(2).map(|s| s == "grt").unwrap_or(false);
    let (source, targets) = default_benchmark().unwrap();
    let cfg = TrainConfig { epochs, grt_enabled: grt, seed: 0, ..TrainConfig::default() };
    let (model, trace) = train_source(&cfg, &source).unwrap();
    println!("loss trace: {:?}", trace.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());

    if let Some(g) = &model.grt {
        use gtta::backbone::{backbone_forward, BackboneLeaves};
        use gtta::grt::{grt_head_forward, GrtLeaves};
        use gtta::tensor::{argmax_slice, Tape};
        let mut hits = 0usize;
        let n = 400.min(source.len());
        for s in source.samples.iter().take(n) {
            let mut tape = Tape::new();
            let bl = BackboneLeaves::bind(&mut tape, &model.backbone, false).unwrap();
            let gl = GrtLeaves::bind(&mut tape, g, false).unwrap();
            let (regions, _) = backbone_forward(&mut tape, &bl, &model.backbone.dims, &s.image_f64()).unwrap();
            let logits = grt_head_forward(&mut tape, &gl, &g.dims, regions).unwrap();
            if argmax_slice(tape.values(logits)) == s.label as usize { hits += 1; }
        }
        println!("GRT-head source ACC over {n}: {:.2}", 100.0 * hits as f64 / n as f64);
    }

    for ds in std::iter::once(&source).chain(targets.iter()) {
        let ev = evaluate_frozen(&model, ds).unwrap();
        let images: Vec<Vec<f64>> = ds.samples.iter().map(|s| s.image_f64()).collect();
        let refs: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();
        let feats = extract_features(&model.backbone, &refs).unwrap();
        let probs = classifier_probs_values(&model.backbone, &feats);
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let min = scores.iter().cloned().fold(1.0f64, f64::min);
        let max = scores.iter().cloned().fold(0.0f64, f64::max);
        let frac_pos = scores.iter().filter(|&&s| s > 0.5).count() as f64 / scores.len() as f64;
        println!(
            "{:>8}: ACC {:6.2} AUC {:6.2} | p1 min {:.3} mean {:.3} max {:.3} fracpos {:.2}",
            ds.name(), ev.acc, ev.auc, min, mean, max, frac_pos
        );
    }
}
