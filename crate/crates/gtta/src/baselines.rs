//! Reference test-time adaptation baselines operating on the same frozen feature
//! extractor: entropy minimization (tent), confident pseudo-labels (plclf), and
//! training-free prototype adjustment (t3a).

use crate::backbone::{classifier_probs_values, BackboneParams};
use crate::error::{GttaError, Result};
use crate::tensor::{
    adam_step, argmax_slice, entropy_slice, softmax_slice, AdamState, Param, Tape,
};

fn bind_classifier(
    tape: &mut Tape,
    backbone: &BackboneParams,
) -> Result<(crate::tensor::TensorId, crate::tensor::TensorId)> {
    Ok((
        backbone.classifier_w.leaf(tape)?,
        backbone.classifier_b.leaf(tape)?,
    ))
}

/// Entropy-minimization state for the linear head.
pub struct TentState {
    opt: AdamState,
    pub lr: f64,
}

impl TentState {
    pub fn new(backbone: &BackboneParams, lr: f64) -> Self {
        Self {
            opt: AdamState::new(&[&backbone.classifier_w, &backbone.classifier_b]),
            lr,
        }
    }
}

/// One Adam step on the classifier minimizing the mean prediction entropy.
pub fn tent_step(
    backbone: &mut BackboneParams,
    state: &mut TentState,
    feats: &[Vec<f64>],
) -> Result<()> {
    if feats.is_empty() {
        return Ok(());
    }
    let (b, f) = (feats.len(), feats[0].len());
    let mut tape = Tape::new();
    let (w_id, b_id) = bind_classifier(&mut tape, backbone)?;
    let flat: Vec<f64> = feats.iter().flatten().copied().collect();
    let z = tape.constant(&[b, f], flat)?;
    let lin = tape.matmul(z, w_id)?;
    let logits = tape.add_row_broadcast(lin, b_id)?;
    let probs = tape.softmax(logits, 1)?;
    let h = tape.entropy(probs)?;
    let loss = tape.reduce_mean(h, None)?;
    tape.backward(loss)?;
    backbone.classifier_w.pull_grad(&tape, w_id);
    backbone.classifier_b.pull_grad(&tape, b_id);
    adam_step(&mut backbone.classifier_params_mut(), &mut state.opt, state.lr)?;
    Ok(())
}

/// Confident-pseudo-label state for the linear head.
pub struct PlclfState {
    opt: AdamState,
    pub lr: f64,
    pub conf_threshold: f64,
}

impl PlclfState {
    pub fn new(backbone: &BackboneParams, lr: f64, conf_threshold: f64) -> Self {
        Self {
            opt: AdamState::new(&[&backbone.classifier_w, &backbone.classifier_b]),
            lr,
            conf_threshold,
        }
    }
}

/// Cross-entropy step on the samples whose max softmax reaches the confidence
/// threshold, using the argmax as the label. A batch with no qualifying sample is
/// a no-op.
pub fn plclf_step(
    backbone: &mut BackboneParams,
    state: &mut PlclfState,
    feats: &[Vec<f64>],
) -> Result<()> {
    let probs = classifier_probs_values(backbone, feats);
    let mut kept_feats: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (z, p) in feats.iter().zip(&probs) {
        let arg = argmax_slice(p);
        if p[arg] >= state.conf_threshold {
            kept_feats.extend_from_slice(z);
            labels.push(arg);
        }
    }
    if labels.is_empty() {
        return Ok(());
    }
    let f = feats[0].len();
    let mut tape = Tape::new();
    let (w_id, b_id) = bind_classifier(&mut tape, backbone)?;
    let z = tape.constant(&[labels.len(), f], kept_feats)?;
    let lin = tape.matmul(z, w_id)?;
    let logits = tape.add_row_broadcast(lin, b_id)?;
    let loss = tape.cross_entropy(logits, crate::tensor::CeTarget::Indices(&labels))?;
    tape.backward(loss)?;
    backbone.classifier_w.pull_grad(&tape, w_id);
    backbone.classifier_b.pull_grad(&tape, b_id);
    adam_step(&mut backbone.classifier_params_mut(), &mut state.opt, state.lr)?;
    Ok(())
}

/// Training-free prototype adjustment: per-class support sets seeded from the
/// normalized classifier columns, filtered to the M lowest-entropy entries.
pub struct T3ASupportSet {
    classes: Vec<Vec<(Vec<f64>, f64, u64)>>, // (unit embedding, entropy, insertion order)
    pub filter_size: usize,
    next: u64,
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

impl T3ASupportSet {
    pub fn init(classifier_w: &Param, filter_size: usize) -> Result<Self> {
        let (f, k) = (classifier_w.shape[0], classifier_w.shape[1]);
        let mut classes = Vec::with_capacity(k);
        for c in 0..k {
            let col: Vec<f64> = (0..f).map(|j| classifier_w.values[j * k + c]).collect();
            let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(GttaError::ZeroWeightColumn(c));
            }
            classes.push(vec![(col.iter().map(|v| v / norm).collect(), 0.0, 0)]);
        }
        Ok(Self { classes, filter_size, next: 1 })
    }

    /// Current per-class centroids: normalized means of the support entries.
    pub fn centroids(&self) -> Vec<Vec<f64>> {
        self.classes
            .iter()
            .map(|entries| {
                let f = entries[0].0.len();
                let mut acc = vec![0.0; f];
                for (e, _, _) in entries {
                    for (a, v) in acc.iter_mut().zip(e) {
                        *a += v;
                    }
                }
                for a in acc.iter_mut() {
                    *a /= entries.len() as f64;
                }
                normalize(&acc)
            })
            .collect()
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.classes[class].len()
    }
}

/// One t3a prediction: route `z` into the support set of the source model's argmax
/// class, filter every class to the M lowest-entropy entries (ties keep the
/// earliest), then classify by cosine against the updated centroids. No parameters
/// change anywhere.
pub fn t3a_predict(
    support: &mut T3ASupportSet,
    backbone: &BackboneParams,
    z_raw: &[f64],
) -> Result<Vec<f64>> {
    let p_src = classifier_probs_values(backbone, std::slice::from_ref(&z_raw.to_vec()))
        .pop()
        .expect("one prediction");
    let class = argmax_slice(&p_src);
    let entropy = entropy_slice(&p_src);
    let zn = normalize(z_raw);
    let order = support.next;
    support.next += 1;
    support.classes[class].push((zn.clone(), entropy, order));

    for entries in support.classes.iter_mut() {
        if entries.len() > support.filter_size {
            entries.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.2.cmp(&b.2)));
            entries.truncate(support.filter_size);
        }
    }

    let cents = support.centroids();
    let logits: Vec<f64> = cents
        .iter()
        .map(|c| zn.iter().zip(c).map(|(a, b)| a * b).sum())
        .collect();
    Ok(softmax_slice(&logits))
}
