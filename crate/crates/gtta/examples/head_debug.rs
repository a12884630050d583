//! Inspect GRT head internals on a trained model.

use gtta::backbone::{backbone_forward, BackboneLeaves};
use gtta::grt::{edge_matrix, graph_attention, grt_logits, project_nodes, topk_pool, GrtLeaves};
use gtta::harness::{train_source, TrainConfig};
use gtta::synthdata::default_benchmark;
use gtta::tensor::Tape;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let (source, _) = default_benchmark().unwrap();
    let cfg = TrainConfig { epochs, grt_enabled: true, seed: 0, ..TrainConfig::default() };
    let (model, _) = train_source(&cfg, &source).unwrap();
    let g = model.grt.as_ref().unwrap();

    println!("clf_w norm: {:.4}", g.clf_w.values.iter().map(|v| v * v).sum::<f64>().sqrt());
    println!("clf_b: {:?}", g.clf_b.values);
    println!("a_pool norm: {:.4}", g.a_pool.values.iter().map(|v| v * v).sum::<f64>().sqrt());

    for (i, s) in source.samples.iter().take(6).enumerate() {
        let mut tape = Tape::new();
        let bl = BackboneLeaves::bind(&mut tape, &model.backbone, false).unwrap();
        let gl = GrtLeaves::bind(&mut tape, g, false).unwrap();
        let (regions, _) = backbone_forward(&mut tape, &bl, &model.backbone.dims, &s.image_f64()).unwrap();
        let nodes = project_nodes(&mut tape, &gl, regions).unwrap();
        let a_mat = edge_matrix(&mut tape, nodes, gl.w_edge).unwrap();
        let mixed = graph_attention(&mut tape, &gl, &g.dims, nodes, a_mat).unwrap();
        let (pooled, kept, scores) = topk_pool(&mut tape, &gl, &g.dims, mixed, g.dims.k_keep).unwrap();
        let logits = grt_logits(&mut tape, &gl, &g.dims, pooled).unwrap();

        let sv = tape.values(scores);
        let smin = sv.iter().cloned().fold(1.0f64, f64::min);
        let smax = sv.iter().cloned().fold(0.0f64, f64::max);
        let mv = tape.values(mixed);
        // row variance of the attention output
        let f = g.dims.f_prime;
        let n = g.dims.n_regions;
        let mut row_means = vec![0.0; n];
        for r in 0..n {
            row_means[r] = mv[r * f..(r + 1) * f].iter().sum::<f64>() / f as f64;
        }
        let mean_of_means = row_means.iter().sum::<f64>() / n as f64;
        let row_var = row_means.iter().map(|m| (m - mean_of_means).powi(2)).sum::<f64>() / n as f64;
        let amat = tape.values(a_mat);
        let amin = amat.iter().cloned().fold(f64::INFINITY, f64::min);
        let amax = amat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "img {i} label {}: logits {:?} | scores [{:.3},{:.3}] kept[0..4] {:?} | row_var {:.2e} | A range [{:.2},{:.2}]",
            s.label,
            tape.values(logits).iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            smin, smax, &kept[..4], row_var, amin, amax
        );
    }
}
