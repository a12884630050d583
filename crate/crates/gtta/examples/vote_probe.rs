//! Instrument neighbor-vote accuracy during TPD adaptation, per batch.

use gtta::harness::{domain_features, stream_order, train_source, TrainConfig};
use gtta::synthdata::default_benchmark;
use gtta::tensor::argmax_slice;
use gtta::tpd::{batch_pseudo_labels, compute_centroids, TpdConfig, TpdState};
use gtta::util::{derive_seed, sub_rng};

fn main() {
    let clf_lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let capacity: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(256);
    let (source, targets) = default_benchmark().unwrap();
    let cfg = TrainConfig { epochs: 5, grt_enabled: true, seed: 0, ..TrainConfig::default() };
    let (model, _) = train_source(&cfg, &source).unwrap();

    for tgt in targets.iter() {
        let order = stream_order(0, tgt.name(), tgt.len());
        let feats = domain_features(&model, tgt, &order).unwrap();
        let labels: Vec<u8> = order.iter().map(|&i| tgt.samples[i].label).collect();

        let mut adapted = model.clone();
        let tpd_cfg = TpdConfig { clf_lr, steps_per_batch: steps, capacity_per_class: capacity, ..TpdConfig::default() };
        let mut rng = sub_rng(derive_seed(0, tgt.name()), "plm-init");
        let mut state = TpdState::new(tpd_cfg.clone(), &adapted.backbone, &mut rng).unwrap();

        let mut vote_hits = Vec::new();
        let mut pred_hits = Vec::new();
        for (ci, chunk) in feats.chunks(tpd_cfg.batch).enumerate() {
            let lab = &labels[ci * tpd_cfg.batch..(ci * tpd_cfg.batch + chunk.len())];
            let cents = compute_centroids(&state.bank, &state.plm).unwrap();
            let pseudo = batch_pseudo_labels(&tpd_cfg, &state.bank, &state.plm, &cents, chunk).unwrap();
            // module-averaged vote
            let mut hits = 0usize;
            for b in 0..chunk.len() {
                let mut avg = vec![0.0; 2];
                for m in 0..tpd_cfg.n_modules {
                    for k in 0..2 {
                        avg[k] += pseudo[m][b][k];
                    }
                }
                if argmax_slice(&avg) == lab[b] as usize {
                    hits += 1;
                }
            }
            vote_hits.push((hits, chunk.len()));
            let preds = state.adapt_features(&mut adapted.backbone, chunk).unwrap();
            let ph = preds
                .iter()
                .zip(lab)
                .filter(|(p, &l)| argmax_slice(p) == l as usize)
                .count();
            pred_hits.push((ph, chunk.len()));
        }
        let vote_acc: Vec<String> = vote_hits.iter().map(|(h, n)| format!("{:.0}", 100.0 * *h as f64 / *n as f64)).collect();
        let pred_acc: Vec<String> = pred_hits.iter().map(|(h, n)| format!("{:.0}", 100.0 * *h as f64 / *n as f64)).collect();
        println!("{:>8}: votes {} | preds {}", tgt.name(), vote_acc.join(","), pred_acc.join(","));
    }
}
