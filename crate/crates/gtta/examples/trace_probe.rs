//! Trace CE components and classifier state during training, vanilla vs mutual.

use gtta::backbone::{backbone_forward, classifier_logits, BackboneLeaves};
use gtta::grt::{grt_head_forward, grt_loss, GrtLeaves};
use gtta::model::Model;
use gtta::synthdata::default_benchmark;
use gtta::tensor::{adam_step, AdamState, CeTarget, Tape};
use gtta::util::sub_rng;
use rand::seq::SliceRandom;

fn main() {
    let grt_on: bool = std::env::args().nth(1).map(|s| s == "grt").unwrap_or(false);
    let (source, _) = default_benchmark().unwrap();
    let dims = gtta::backbone::BackboneDims::default();
    let mut model = Model::init(dims, grt_on, 0);
    let gdims = model.grt.as_ref().map(|g| g.dims);
    let mut opt = AdamState::new(&model.all_params());
    let mut shuffle_rng = sub_rng(0, "train-shuffle");

    for epoch in 0..3usize {
        let mut idx: Vec<usize> = (0..source.len()).collect();
        idx.shuffle(&mut shuffle_rng);
        for (bi, chunk) in idx.chunks(16).enumerate() {
            let mut tape = Tape::new();
            let bl = BackboneLeaves::bind(&mut tape, &model.backbone, true).unwrap();
            let gl = model.grt.as_ref().map(|g| GrtLeaves::bind(&mut tape, g, true).unwrap());
            let mut pooled_rows = Vec::new();
            let mut grt_rows = Vec::new();
            let mut labels = Vec::new();
            for &i in chunk {
                let img = source.samples[i].image_f64();
                let (regions, pooled) = backbone_forward(&mut tape, &bl, &dims, &img).unwrap();
                pooled_rows.push(pooled);
                if let (Some(gl), Some(gd)) = (&gl, &gdims) {
                    grt_rows.push(grt_head_forward(&mut tape, gl, gd, regions).unwrap());
                }
                labels.push(source.samples[i].label as usize);
            }
            let pooled_b = tape.stack_rows(&pooled_rows).unwrap();
            let pb = classifier_logits(&mut tape, &bl, pooled_b).unwrap();
            let ce_b_probe = {
                let mut t2 = Tape::new();
                let pbc = t2.constant(&[labels.len(), 2], tape.values(pb).to_vec()).unwrap();
                let l = t2.cross_entropy(pbc, CeTarget::Indices(&labels)).unwrap();
                t2.scalar_value(l)
            };
            let loss = match &gl {
                Some(_) => {
                    let pg = tape.stack_rows(&grt_rows).unwrap();
                    grt_loss(&mut tape, pb, pg, &labels, 0.5).unwrap()
                }
                None => tape.cross_entropy(pb, CeTarget::Indices(&labels)).unwrap(),
            };
            tape.backward(loss).unwrap();
            bl.pull_grads(&tape, &mut model.backbone);
            if let (Some(gl), Some(g)) = (&gl, &mut model.grt) {
                gl.pull_grads(&tape, g);
            }
            if bi % 50 == 0 {
                let pbv = tape.values(pb);
                let spread: f64 = (0..labels.len())
                    .map(|b| (pbv[b * 2 + 1] - pbv[b * 2]).abs())
                    .sum::<f64>()
                    / labels.len() as f64;
                let gw = model.backbone.classifier_w.grad.as_ref().map(|g| g.iter().map(|v| v*v).sum::<f64>().sqrt()).unwrap_or(0.0);
                println!(
                    "ep {epoch} batch {bi:>3}: CE_B {ce_b_probe:.4} | mean |logit gap| {spread:.4} | bias {:?} | |grad clf_w| {gw:.2e}",
                    model.backbone.classifier_b.values.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
                );
            }
            adam_step(&mut model.all_params_mut(), &mut opt, 1e-4).unwrap();
        }
    }
}
