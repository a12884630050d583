//! Accuracy of bias-free nearest-centroid rules per target domain.

use gtta::backbone::extract_features;
use gtta::harness::{train_source, TrainConfig};
use gtta::synthdata::default_benchmark;

fn main() {
    let grt: bool = std::env::args().nth(1).map(|s| s == "grt").unwrap_or(true);
    let (source, targets) = default_benchmark().unwrap();
    let cfg = TrainConfig { epochs: 5, grt_enabled: grt, seed: 0, ..TrainConfig::default() };
    let (model, _) = train_source(&cfg, &source).unwrap();

    let k = 2;
    let f = model.backbone.dims.feat;
    let w = &model.backbone.classifier_w.values;
    let cols: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let col: Vec<f64> = (0..f).map(|j| w[j * k + c]).collect();
            let n = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            col.iter().map(|v| v / n).collect()
        })
        .collect();

    for tgt in targets.iter() {
        let images: Vec<Vec<f64>> = tgt.samples.iter().map(|s| s.image_f64()).collect();
        let refs: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();
        let feats = extract_features(&model.backbone, &refs).unwrap();

        // rule A: cosine to normalized classifier columns (init centroids)
        let mut hits_init = 0usize;
        // rule B: cosine to the true class means of this domain's own features (oracle)
        let normed: Vec<Vec<f64>> = feats
            .iter()
            .map(|z| {
                let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                z.iter().map(|v| v / n).collect()
            })
            .collect();
        let mut means = vec![vec![0.0; f]; 2];
        let mut counts = [0usize; 2];
        for (z, s) in normed.iter().zip(&tgt.samples) {
            for (m, v) in means[s.label as usize].iter_mut().zip(z) {
                *m += v;
            }
            counts[s.label as usize] += 1;
        }
        for c in 0..2 {
            let n = means[c].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in means[c].iter_mut() {
                *v /= n;
            }
            let _ = counts[c];
        }
        let mut hits_oracle = 0usize;
        for (z, s) in normed.iter().zip(&tgt.samples) {
            let sim = |c: &Vec<f64>| -> f64 { z.iter().zip(c).map(|(a, b)| a * b).sum() };
            let pred_init = (sim(&cols[1]) > sim(&cols[0])) as u8;
            let pred_orac = (sim(&means[1]) > sim(&means[0])) as u8;
            if pred_init == s.label {
                hits_init += 1;
            }
            if pred_orac == s.label {
                hits_oracle += 1;
            }
        }
        let n = tgt.len() as f64;
        println!(
            "{:>8}: init-centroid ACC {:5.2} | oracle-centroid ACC {:5.2}",
            tgt.name(),
            100.0 * hits_init as f64 / n,
            100.0 * hits_oracle as f64 / n
        );
    }
}
