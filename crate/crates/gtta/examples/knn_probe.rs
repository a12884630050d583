//! Leave-one-out cosine k-NN accuracy of pooled features per domain: the signal
//! ceiling available to neighbor-vote adaptation.

use gtta::backbone::extract_features;
use gtta::harness::{train_source, TrainConfig};
use gtta::synthdata::default_benchmark;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let grt: bool = std::env::args().nth(2).map(|s| s == "grt").unwrap_or(false);
    let (source, targets) = default_benchmark().unwrap();
    let cfg = TrainConfig { epochs, grt_enabled: grt, seed: 0, ..TrainConfig::default() };
    let (model, _) = train_source(&cfg, &source).unwrap();

    for ds in targets.iter() {
        let images: Vec<Vec<f64>> = ds.samples.iter().map(|s| s.image_f64()).collect();
        let refs: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();
        let feats = extract_features(&model.backbone, &refs).unwrap();
        let normed: Vec<Vec<f64>> = feats
            .iter()
            .map(|z| {
                let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                z.iter().map(|v| v / n).collect()
            })
            .collect();
        let mut hits = 0usize;
        for i in 0..normed.len() {
            let mut sims: Vec<(f64, usize)> = (0..normed.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let dot: f64 = normed[i].iter().zip(&normed[j]).map(|(a, b)| a * b).sum();
                    (dot, j)
                })
                .collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let votes: usize = sims[..8].iter().filter(|(_, j)| ds.samples[*j].label == 1).count();
            let pred = (votes > 4) as u8;
            let pred = if votes == 4 { 0 } else { pred };
            if pred == ds.samples[i].label {
                hits += 1;
            }
        }
        println!("{:>8}: loo 8-NN ACC {:.2}", ds.name(), 100.0 * hits as f64 / normed.len() as f64);
    }
}
