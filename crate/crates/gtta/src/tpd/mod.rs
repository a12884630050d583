//! Test-time prediction disambiguation.
//!
//! A memory bank accumulates unit-norm target embeddings routed by predicted class.
//! For each incoming batch, neighbors retrieved from the bank vote through an
//! ensemble of linear maps (the parallel linear module, PLM) and per-map class
//! centroids, yielding hard pseudo-labels. The classifier head and the PLM are then
//! fine-tuned online with an entropy-weighted divergence objective; the feature
//! extractor stays frozen throughout.

mod bank;

pub use bank::{BankEntry, MemoryBank, Neighbor};

use crate::backbone::{classifier_probs_values, extract_features, BackboneParams};
use crate::error::{GttaError, Result};
use crate::tensor::{
    adam_step, argmax_slice, entropy_slice, softmax_slice, AdamState, Param, Tape, TensorId,
};
use rand::Rng;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TpdConfig {
    pub n_neighbors: usize,
    pub tau_proto: f64,
    pub tau_epd: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub plm_lr: f64,
    pub clf_lr: f64,
    pub steps_per_batch: usize,
    pub batch: usize,
    /// Clamp floor applied inside every KL term (pseudo-label smoothing).
    pub label_smooth_eps: f64,
    pub capacity_per_class: usize,
    pub n_modules: usize,
    /// Report predictions from before the adaptation step instead of after.
    pub predict_before_update: bool,
}

impl Default for TpdConfig {
    fn default() -> Self {
        Self {
            n_neighbors: 8,
            tau_proto: 0.1,
            tau_epd: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            plm_lr: 1e-3,
            clf_lr: 1e-4,
            steps_per_batch: 1,
            batch: 32,
            label_smooth_eps: 1e-4,
            capacity_per_class: 256,
            n_modules: 4,
            predict_before_update: false,
        }
    }
}

impl TpdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_neighbors >= 1
            && self.tau_proto > 0.0
            && self.tau_epd > 0.0
            && self.lambda1 >= 0.0
            && self.lambda2 >= 0.0
            && self.batch >= 1
            && self.n_modules >= 1
            && self.capacity_per_class >= 1;
        if !ok {
            return Err(GttaError::ConfigParse("invalid tpd configuration".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PlmModule {
    pub w: Param,
    pub b: Param,
}

/// `[module][class] → centroid vector`, L2-normalized.
pub type Centroids = Vec<Vec<Vec<f64>>>;

#[derive(Clone, Debug)]
pub struct PlmParams {
    pub modules: Vec<PlmModule>,
    pub feat: usize,
    centroid_cache: Option<Centroids>,
}

impl PlmParams {
    /// Near-identity init: each map starts as I + small uniform noise so prototype
    /// space initially mirrors feature space.
    pub fn init(n_modules: usize, feat: usize, rng: &mut impl Rng) -> Self {
        let modules = (0..n_modules)
            .map(|i| {
                let mut w = Param::uniform(format!("tpd/plm{i}_w"), vec![feat, feat], 0.05, rng);
                for j in 0..feat {
                    w.values[j * feat + j] += 1.0;
                }
                let b = Param::zeros(format!("tpd/plm{i}_b"), vec![feat]);
                PlmModule { w, b }
            })
            .collect();
        Self { modules, feat, centroid_cache: None }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.modules.iter().flat_map(|m| [&m.w, &m.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.modules.iter_mut().flat_map(|m| [&mut m.w, &mut m.b]).collect()
    }

    pub fn invalidate_centroids(&mut self) {
        self.centroid_cache = None;
    }

    /// Cached detached centroids for the current (bank, φ) state.
    pub fn centroids(&mut self, bank: &MemoryBank) -> Result<&Centroids> {
        if self.centroid_cache.is_none() {
            self.centroid_cache = Some(compute_centroids(bank, self)?);
        }
        Ok(self.centroid_cache.as_ref().unwrap())
    }
}

pub fn linear_map(z: &[f64], w: &Param, b: &Param) -> Vec<f64> {
    let (f_in, f_out) = (w.shape[0], w.shape[1]);
    let mut out = b.values.clone();
    for j in 0..f_in {
        let zj = z[j];
        for o in 0..f_out {
            out[o] += zj * w.values[j * f_out + o];
        }
    }
    out
}

fn normalize_or_same(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

/// Per-module, per-class centroids: the L2-normalized mean of `h_φᵢ(z)` over the
/// class's bank entries.
pub fn compute_centroids(bank: &MemoryBank, plm: &PlmParams) -> Result<Centroids> {
    let k = bank.num_classes();
    let mut out = Vec::with_capacity(plm.modules.len());
    for m in &plm.modules {
        let mut per_class = Vec::with_capacity(k);
        for c in 0..k {
            let entries = bank.class_entries(c);
            if entries.is_empty() {
                return Err(GttaError::EmptyClass(c));
            }
            let mut acc = vec![0.0; plm.feat];
            for e in entries {
                let h = linear_map(&e.embedding, &m.w, &m.b);
                for (a, v) in acc.iter_mut().zip(&h) {
                    *a += v;
                }
            }
            let inv = 1.0 / entries.len() as f64;
            for a in acc.iter_mut() {
                *a *= inv;
            }
            per_class.push(normalize_or_same(&acc));
        }
        out.push(per_class);
    }
    Ok(out)
}

/// Softmax over classes of −cosine_distance(h_φᵢ(z), μᵢᵏ)/τ.
pub fn proto_probs(module: &PlmModule, z: &[f64], centroids_i: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let h = normalize_or_same(&linear_map(z, &module.w, &module.b));
    let logits: Vec<f64> = centroids_i
        .iter()
        .map(|mu| {
            let dot: f64 = h.iter().zip(mu).map(|(a, b)| a * b).sum();
            (dot - 1.0) / tau // −d/τ with d = 1 − cos
        })
        .collect();
    softmax_slice(&logits)
}

/// Hard neighbor vote: fraction of neighbors whose prototype argmax is each class
/// (ties vote for the lower class). Entries lie on the lattice {0, 1/n, …, 1}.
pub fn neighbor_pseudo_label(
    module: &PlmModule,
    neighbors: &[Neighbor],
    centroids_i: &[Vec<f64>],
    tau: f64,
) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(GttaError::EmptyNeighborSet);
    }
    let k = centroids_i.len();
    let mut counts = vec![0usize; k];
    for nb in neighbors {
        let p = proto_probs(module, &nb.embedding, centroids_i, tau);
        counts[argmax_slice(&p)] += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / neighbors.len() as f64).collect())
}

/// Batch softmax of row entropies over temperature: the EPD weights. Detached —
/// these are plain values, never tape nodes.
pub fn epd_weights(p_rows: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let h: Vec<f64> = p_rows.iter().map(|r| entropy_slice(r) / tau).collect();
    softmax_slice(&h)
}

fn rows_of(tape: &Tape, id: TensorId) -> Vec<Vec<f64>> {
    let shape = tape.shape(id).to_vec();
    let (b, k) = (shape[0], shape[1]);
    let v = tape.values(id);
    (0..b).map(|i| v[i * k..(i + 1) * k].to_vec()).collect()
}

/// Entropy punishment divergence with explicit (already detached) batch weights:
/// Σ_b w_b · KL(p_b ‖ ŷ_b).
pub fn epd_with_weights(
    tape: &mut Tape,
    p: TensorId,
    y_hat: TensorId,
    weights: &[f64],
    eps: f64,
) -> Result<TensorId> {
    let kl = tape.kl_divergence(p, y_hat, eps)?;
    let w = tape.constant(&[weights.len()], weights.to_vec())?;
    let weighted = tape.mul(kl, w)?;
    Ok(tape.reduce_sum(weighted, None)?)
}

/// Entropy punishment divergence: batch-softmax(H(p)/τ)-weighted KL(p ‖ ŷ), with
/// the weights treated as constants during backward.
pub fn epd(
    tape: &mut Tape,
    p: TensorId,
    y_hat: TensorId,
    tau_epd: f64,
    eps: f64,
) -> Result<TensorId> {
    let weights = epd_weights(&rows_of(tape, p), tau_epd);
    epd_with_weights(tape, p, y_hat, &weights, eps)
}

/// Tape bindings for the test-time trainable parameters: classifier head + PLM.
pub struct TpdLeaves {
    pub clf_w: TensorId,
    pub clf_b: TensorId,
    pub plm: Vec<(TensorId, TensorId)>,
}

impl TpdLeaves {
    pub fn bind(
        tape: &mut Tape,
        backbone: &BackboneParams,
        plm: &PlmParams,
        trainable: bool,
    ) -> Result<Self> {
        let bind = |tape: &mut Tape, p: &Param| {
            if trainable {
                p.leaf(tape)
            } else {
                p.frozen_leaf(tape)
            }
        };
        Ok(Self {
            clf_w: bind(tape, &backbone.classifier_w)?,
            clf_b: bind(tape, &backbone.classifier_b)?,
            plm: plm
                .modules
                .iter()
                .map(|m| Ok((bind(tape, &m.w)?, bind(tape, &m.b)?)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn pull_grads(&self, tape: &Tape, backbone: &mut BackboneParams, plm: &mut PlmParams) {
        backbone.classifier_w.pull_grad(tape, self.clf_w);
        backbone.classifier_b.pull_grad(tape, self.clf_b);
        for (m, &(w_id, b_id)) in plm.modules.iter_mut().zip(&self.plm) {
            m.w.pull_grad(tape, w_id);
            m.b.pull_grad(tape, b_id);
        }
    }
}

/// EPD weights used by one `ttt_loss` evaluation. Freezing them turns the loss into
/// the exact function the tape differentiates, which finite differences can check.
#[derive(Clone, Debug)]
pub struct TttWeights {
    /// Per module: weights from the prototype prediction's entropies.
    pub proto: Vec<Vec<f64>>,
    /// Weights from the classifier prediction's entropies (module-independent).
    pub clf: Vec<f64>,
}

fn centroid_rows_on_tape(
    tape: &mut Tape,
    bank: &MemoryBank,
    plm_leaf: (TensorId, TensorId),
    feat: usize,
) -> Result<TensorId> {
    let k = bank.num_classes();
    let mut rows = Vec::with_capacity(k);
    for c in 0..k {
        let entries = bank.class_entries(c);
        if entries.is_empty() {
            return Err(GttaError::EmptyClass(c));
        }
        let mut flat = Vec::with_capacity(entries.len() * feat);
        for e in entries {
            flat.extend_from_slice(&e.embedding);
        }
        let z = tape.constant(&[entries.len(), feat], flat)?;
        let h = tape.matmul(z, plm_leaf.0)?;
        let h = tape.add_row_broadcast(h, plm_leaf.1)?;
        let mean = tape.reduce_mean(h, Some(0))?;
        let row = tape.reshape(mean, &[1, feat])?;
        let (normed, _) = tape.l2_normalize(row, 1, 1e-12)?;
        rows.push(normed);
    }
    tape.stack_rows(&rows).map_err(Into::into)
}

/// The test-time training objective, averaged over PLM modules:
/// EPD(p_protoᵢ ‖ p̂ᵢ) + λ₁·EPD(p_clf ‖ p̂ᵢ) + λ₂·mean_b KL(p_clf ‖ p_protoᵢ).
/// Pseudo-labels are detached constants; EPD weights are detached (pass
/// `frozen_weights` to pin them for gradient verification). Centroids are built on
/// the tape from the current PLM, so gradient reaches φ through both the sample
/// embedding and the centroids.
pub fn ttt_loss(
    tape: &mut Tape,
    cfg: &TpdConfig,
    feats: &[Vec<f64>],
    leaves: &TpdLeaves,
    bank: &MemoryBank,
    pseudo: &[Vec<Vec<f64>>],
    frozen_weights: Option<&TttWeights>,
) -> Result<(TensorId, TttWeights)> {
    let b = feats.len();
    if b == 0 {
        return Err(GttaError::EmptyEval);
    }
    let f = feats[0].len();
    let flat: Vec<f64> = feats.iter().flatten().copied().collect();
    let z = tape.constant(&[b, f], flat)?;

    let clf_lin = tape.matmul(z, leaves.clf_w)?;
    let clf_logits = tape.add_row_broadcast(clf_lin, leaves.clf_b)?;
    let p_clf = tape.softmax(clf_logits, 1)?;
    let clf_weights = match frozen_weights {
        Some(w) => w.clf.clone(),
        None => epd_weights(&rows_of(tape, p_clf), cfg.tau_epd),
    };

    let mut total: Option<TensorId> = None;
    let mut proto_weights_used = Vec::with_capacity(leaves.plm.len());
    for (i, &plm_leaf) in leaves.plm.iter().enumerate() {
        let h = tape.matmul(z, plm_leaf.0)?;
        let h = tape.add_row_broadcast(h, plm_leaf.1)?;
        let (h_norm, _) = tape.l2_normalize(h, 1, 1e-12)?;
        let centroids = centroid_rows_on_tape(tape, bank, plm_leaf, f)?;
        let cent_t = tape.transpose(centroids)?;
        let sims = tape.matmul(h_norm, cent_t)?;
        let shifted = tape.add_scalar(sims, -1.0);
        let proto_logits = tape.scale(shifted, 1.0 / cfg.tau_proto);
        let p_proto = tape.softmax(proto_logits, 1)?;

        let k = bank.num_classes();
        let pseudo_flat: Vec<f64> = pseudo[i].iter().flatten().copied().collect();
        let p_hat = tape.constant(&[b, k], pseudo_flat)?;

        let w1 = match frozen_weights {
            Some(w) => w.proto[i].clone(),
            None => epd_weights(&rows_of(tape, p_proto), cfg.tau_epd),
        };
        let term1 = epd_with_weights(tape, p_proto, p_hat, &w1, cfg.label_smooth_eps)?;
        proto_weights_used.push(w1);

        let term2_raw = epd_with_weights(tape, p_clf, p_hat, &clf_weights, cfg.label_smooth_eps)?;
        let term2 = tape.scale(term2_raw, cfg.lambda1);

        let kl3 = tape.kl_divergence(p_clf, p_proto, cfg.label_smooth_eps)?;
        let kl3_mean = tape.reduce_mean(kl3, None)?;
        let term3 = tape.scale(kl3_mean, cfg.lambda2);

        let t12 = tape.add(term1, term2)?;
        let module_loss = tape.add(t12, term3)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, module_loss)?,
            None => module_loss,
        });
    }
    let loss = tape.scale(total.expect("n_modules >= 1"), 1.0 / leaves.plm.len() as f64);
    Ok((loss, TttWeights { proto: proto_weights_used, clf: clf_weights }))
}

/// Per-module hard pseudo-labels for a batch: `[module][sample][K]`.
pub fn batch_pseudo_labels(
    cfg: &TpdConfig,
    bank: &MemoryBank,
    plm: &PlmParams,
    centroids: &Centroids,
    feats: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut pseudo = vec![Vec::with_capacity(feats.len()); plm.modules.len()];
    for z in feats {
        let zn = normalize_or_same(z);
        let neighbors = bank.retrieve_neighbors(&zn, cfg.n_neighbors)?;
        for (i, module) in plm.modules.iter().enumerate() {
            pseudo[i].push(neighbor_pseudo_label(
                module,
                &neighbors,
                &centroids[i],
                cfg.tau_proto,
            )?);
        }
    }
    Ok(pseudo)
}

/// Online adaptation state: bank + PLM + per-head optimizers.
pub struct TpdState {
    pub cfg: TpdConfig,
    pub bank: MemoryBank,
    pub plm: PlmParams,
    clf_opt: AdamState,
    plm_opt: AdamState,
    arrival: u64,
}

impl TpdState {
    pub fn new(cfg: TpdConfig, backbone: &BackboneParams, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let bank = MemoryBank::init(&backbone.classifier_w, cfg.capacity_per_class)?;
        let plm = PlmParams::init(cfg.n_modules, backbone.dims.feat, rng);
        let clf_opt = AdamState::new(&[&backbone.classifier_w, &backbone.classifier_b]);
        let plm_opt = AdamState::new(&plm.params());
        Ok(Self { cfg, bank, plm, clf_opt, plm_opt, arrival: 0 })
    }

    /// Adapt on one batch of images: extract frozen features, then delegate.
    pub fn adapt_batch(
        &mut self,
        backbone: &mut BackboneParams,
        images: &[&[f64]],
    ) -> Result<Vec<Vec<f64>>> {
        let feats = extract_features(backbone, images)?;
        self.adapt_features(backbone, &feats)
    }

    /// Adapt on precomputed pooled features (the extractor is frozen, so features
    /// can be computed once per stream). Returns the reported predictions and
    /// inserts every sample into the bank with its reported prediction.
    pub fn adapt_features(
        &mut self,
        backbone: &mut BackboneParams,
        feats: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        if feats.is_empty() {
            return Ok(Vec::new());
        }
        let pre_update_preds = if self.cfg.predict_before_update {
            Some(classifier_probs_values(backbone, feats))
        } else {
            None
        };

        // pseudo-labels from the current bank, fixed for this batch's steps
        let pseudo = {
            let centroids = self.plm.centroids(&self.bank)?.clone();
            batch_pseudo_labels(&self.cfg, &self.bank, &self.plm, &centroids, feats)
        };
        match pseudo {
            Ok(pseudo) => {
                for _ in 0..self.cfg.steps_per_batch {
                    let mut tape = Tape::new();
                    let leaves = TpdLeaves::bind(&mut tape, backbone, &self.plm, true)?;
                    let (loss, _) =
                        ttt_loss(&mut tape, &self.cfg, feats, &leaves, &self.bank, &pseudo, None)?;
                    tape.backward(loss)?;
                    leaves.pull_grads(&tape, backbone, &mut self.plm);
                    adam_step(
                        &mut backbone.classifier_params_mut(),
                        &mut self.clf_opt,
                        self.cfg.clf_lr,
                    )?;
                    adam_step(&mut self.plm.params_mut(), &mut self.plm_opt, self.cfg.plm_lr)?;
                    self.plm.invalidate_centroids();
                }
            }
            Err(GttaError::EmptyBank) | Err(GttaError::EmptyNeighborSet) => {
                // no usable neighbors: skip the adaptation step, still predict
                log::warn!("adaptation step skipped: no usable neighbors in the bank");
            }
            Err(e) => return Err(e),
        }

        let preds = match pre_update_preds {
            Some(p) => p,
            None => classifier_probs_values(backbone, feats),
        };
        for (z, p) in feats.iter().zip(&preds) {
            self.arrival += 1;
            match self.bank.update(z, p, self.arrival) {
                Ok(()) => {}
                Err(GttaError::ZeroNormEmbedding) => {
                    log::warn!("skipped zero-norm embedding at arrival {}", self.arrival);
                }
                Err(e) => return Err(e),
            }
        }
        self.plm.invalidate_centroids();
        Ok(preds)
    }
}

/// Continuous glaucoma score (probability of class 1) for one image; no state is
/// touched.
pub fn tpd_predict_score(backbone: &BackboneParams, image: &[f64]) -> Result<f64> {
    let feats = extract_features(backbone, &[image])?;
    Ok(classifier_probs_values(backbone, &feats)[0][1])
}

#[cfg(test)]
mod tests;
