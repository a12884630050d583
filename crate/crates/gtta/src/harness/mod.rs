//! Source training and online evaluation streams.

pub mod experiments;
pub mod report;

use crate::backbone::{
    backbone_forward, classifier_logits, classifier_probs_values, BackboneDims, BackboneLeaves,
};
use crate::baselines::{
    plclf_step, t3a_predict, tent_step, PlclfState, T3ASupportSet, TentState,
};
use crate::error::{GttaError, Result};
use crate::grt::{grt_head_forward, grt_loss, region_attribution, GrtLeaves};
use crate::metrics::{accuracy, roc_auc, DomainEval};
use crate::model::Model;
use crate::synthdata::{disc_patch_mask, Dataset, Sample};
use crate::tensor::{adam_step, argmax_slice, AdamState, CeTarget, Tape};
use crate::tpd::{TpdConfig, TpdState};
use crate::util::{derive_seed, sub_rng};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate drops by `lr_decay_factor` every `lr_decay_every` epochs.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// Mutual-learning balance between the supervised and distilled head terms.
    pub lambda: f64,
    pub grt_enabled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch: 16,
            lr: 1e-4,
            lr_decay_every: 5,
            lr_decay_factor: 0.1,
            lambda: 0.5,
            grt_enabled: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Shuffled mini-batch training with the mutual-learning loss (plain cross-entropy
/// when the head is disabled). Returns the model and the per-epoch mean loss trace.
pub fn train_source(cfg: &TrainConfig, source: &Dataset) -> Result<(Model, Vec<f64>)> {
    if source.class_counts[0] == 0 || source.class_counts[1] == 0 {
        return Err(GttaError::SingleClassSource);
    }
    let dims = BackboneDims::default();
    let mut model = Model::init(dims, cfg.grt_enabled, cfg.seed);
    let gdims = model.grt.as_ref().map(|g| g.dims);
    let mut opt = AdamState::new(&model.all_params());
    let mut shuffle_rng = sub_rng(cfg.seed, "train-shuffle");
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut idx: Vec<usize> = (0..source.len()).collect();
        idx.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let bl = BackboneLeaves::bind(&mut tape, &model.backbone, true)?;
            let gl = match &model.grt {
                Some(g) => Some(GrtLeaves::bind(&mut tape, g, true)?),
                None => None,
            };
            let mut pooled_rows = Vec::with_capacity(chunk.len());
            let mut grt_rows = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let img = source.samples[i].image_f64();
                let (regions, pooled) = backbone_forward(&mut tape, &bl, &dims, &img)?;
                pooled_rows.push(pooled);
                if let (Some(gl), Some(gd)) = (&gl, &gdims) {
                    grt_rows.push(grt_head_forward(&mut tape, gl, gd, regions)?);
                }
                labels.push(source.samples[i].label as usize);
            }
            let pooled_b = tape.stack_rows(&pooled_rows)?;
            let pb_logits = classifier_logits(&mut tape, &bl, pooled_b)?;
            let loss = match &gl {
                Some(_) => {
                    let pg_logits = tape.stack_rows(&grt_rows)?;
                    grt_loss(&mut tape, pb_logits, pg_logits, &labels, cfg.lambda)?
                }
                None => tape.cross_entropy(pb_logits, CeTarget::Indices(&labels))?,
            };
            tape.backward(loss)?;
            bl.pull_grads(&tape, &mut model.backbone);
            if let (Some(gl), Some(g)) = (&gl, &mut model.grt) {
                gl.pull_grads(&tape, g);
            }
            adam_step(&mut model.all_params_mut(), &mut opt, lr)?;
            epoch_loss += tape.scalar_value(loss);
            batches += 1;
        }
        let mean_loss = epoch_loss / batches as f64;
        trace.push(mean_loss);
        log::info!(
            "epoch {:>2}/{} lr {:.1e} loss {:.4}",
            epoch + 1,
            cfg.epochs,
            lr,
            mean_loss
        );
    }
    Ok((model, trace))
}

/// Adaptation methods selectable on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    None,
    Tent,
    Plclf,
    T3a,
    Tpd,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::None, Method::Tent, Method::Plclf, Method::T3a, Method::Tpd];

    pub fn name(&self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Tent => "tent",
            Method::Plclf => "plclf",
            Method::T3a => "t3a",
            Method::Tpd => "tpd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Method::None),
            "tent" => Ok(Method::Tent),
            "plclf" => Ok(Method::Plclf),
            "t3a" => Ok(Method::T3a),
            "tpd" => Ok(Method::Tpd),
            other => Err(GttaError::Usage(format!(
                "unknown method {other}; expected one of none|tent|plclf|t3a|tpd"
            ))),
        }
    }
}

/// Baseline hyperparameters alongside the TPD config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptHyper {
    pub tpd: TpdConfig,
    pub tent_lr: f64,
    pub plclf_lr: f64,
    pub plclf_threshold: f64,
    pub t3a_filter_size: usize,
}

impl Default for AdaptHyper {
    fn default() -> Self {
        Self {
            tpd: TpdConfig::default(),
            tent_lr: 1e-4,
            plclf_lr: 1e-4,
            plclf_threshold: 0.9,
            t3a_filter_size: 64,
        }
    }
}

/// Fixed target stream order for one (seed, domain): every method and ablation
/// cell consumes the identical order.
pub fn stream_order(seed: u64, domain: &str, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = sub_rng(derive_seed(seed, domain), "stream-order");
    idx.shuffle(&mut rng);
    idx
}

/// Pooled features for a dataset in stream order (frozen extractor).
pub fn domain_features(model: &Model, ds: &Dataset, order: &[usize]) -> Result<Vec<Vec<f64>>> {
    let images: Vec<Vec<f64>> = order.iter().map(|&i| ds.samples[i].image_f64()).collect();
    let refs: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();
    crate::backbone::extract_features(&model.backbone, &refs)
}

pub struct StreamOutcome {
    pub eval: DomainEval,
    /// The model after adaptation (identical to the input for training-free
    /// methods).
    pub adapted: Model,
    /// Bank snapshot for tpd runs.
    pub bank_json: Option<String>,
}

fn eval_from_preds(domain: &str, preds: &[Vec<f64>], labels: &[u8]) -> Result<DomainEval> {
    let pred_labels: Vec<u8> = preds.iter().map(|p| argmax_slice(p) as u8).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p[1]).collect();
    Ok(DomainEval {
        domain: domain.to_string(),
        acc: accuracy(&pred_labels, labels)?,
        auc: roc_auc(&scores, labels)?,
    })
}

/// Run one adaptation method over a target stream and score the online
/// predictions. `feats` and `labels` must already be in stream order.
pub fn adapt_stream(
    model: &Model,
    domain: &str,
    feats: &[Vec<f64>],
    labels: &[u8],
    method: Method,
    hyper: &AdaptHyper,
    seed: u64,
) -> Result<StreamOutcome> {
    let mut adapted = model.clone();
    let batch = hyper.tpd.batch.max(1);
    let mut preds: Vec<Vec<f64>> = Vec::with_capacity(feats.len());
    let mut bank_json = None;

    match method {
        Method::None => {
            preds = classifier_probs_values(&adapted.backbone, feats);
        }
        Method::Tent => {
            let mut state = TentState::new(&adapted.backbone, hyper.tent_lr);
            for chunk in feats.chunks(batch) {
                tent_step(&mut adapted.backbone, &mut state, chunk)?;
                preds.extend(classifier_probs_values(&adapted.backbone, chunk));
            }
        }
        Method::Plclf => {
            let mut state =
                PlclfState::new(&adapted.backbone, hyper.plclf_lr, hyper.plclf_threshold);
            for chunk in feats.chunks(batch) {
                plclf_step(&mut adapted.backbone, &mut state, chunk)?;
                preds.extend(classifier_probs_values(&adapted.backbone, chunk));
            }
        }
        Method::T3a => {
            let mut support =
                T3ASupportSet::init(&adapted.backbone.classifier_w, hyper.t3a_filter_size)?;
            for z in feats {
                preds.push(t3a_predict(&mut support, &adapted.backbone, z)?);
            }
        }
        Method::Tpd => {
            let mut rng = sub_rng(derive_seed(seed, domain), "plm-init");
            let mut state = TpdState::new(hyper.tpd.clone(), &adapted.backbone, &mut rng)?;
            for chunk in feats.chunks(batch) {
                preds.extend(state.adapt_features(&mut adapted.backbone, chunk)?);
            }
            bank_json = Some(state.bank.to_json()?);
        }
    }

    Ok(StreamOutcome {
        eval: eval_from_preds(domain, &preds, labels)?,
        adapted,
        bank_json,
    })
}

/// Frozen (no adaptation) evaluation of a model on a full dataset.
pub fn evaluate_frozen(model: &Model, ds: &Dataset) -> Result<DomainEval> {
    let order: Vec<usize> = (0..ds.len()).collect();
    let feats = domain_features(model, ds, &order)?;
    let labels: Vec<u8> = ds.samples.iter().map(|s| s.label).collect();
    let preds = classifier_probs_values(&model.backbone, &feats);
    eval_from_preds(ds.name(), &preds, &labels)
}

/// Fraction of attribution mass that falls on patches intersecting the true disc,
/// using the sample's label class. Needs generation-time geometry.
pub fn disc_attribution_mass(model: &Model, sample: &Sample) -> Result<f64> {
    let meta = sample.meta.ok_or_else(|| {
        GttaError::Usage("attribution mass needs generated samples with geometry".into())
    })?;
    let heat = region_attribution(&model.backbone, &sample.image_f64(), sample.label as usize)?;
    let mask = disc_patch_mask(&meta, model.backbone.dims.patch);
    Ok(heat
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(h, _)| h)
        .sum())
}
