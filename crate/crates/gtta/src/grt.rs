//! Graph-relation training head.
//!
//! Region features become graph nodes (linear projection plus a learnable 1D
//! positional embedding). Edges come from a learned bilinear form `A = h W hᵀ`
//! rather than a fixed similarity. A single-head graph self-attention layer mixes
//! node features with `A` added to the pairwise attention logits, top-k pooling
//! keeps the highest-scoring half of the nodes (score-gated so the score vector is
//! trainable), and a linear classifier on the flattened survivors produces the
//! auxiliary prediction. Training couples this head with the backbone head through
//! a mutual-learning loss.

use crate::backbone::{backbone_forward, classifier_logits, BackboneLeaves, BackboneParams};
use crate::error::{GttaError, Result};
use crate::tensor::{argmax_slice, CeTarget, Param, Tape, TensorId};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GrtDims {
    pub n_regions: usize,
    /// Backbone region feature width (input).
    pub feat_in: usize,
    /// Node embedding width after projection.
    pub f: usize,
    /// Attention output width.
    pub f_prime: usize,
    /// Nodes kept by top-k pooling.
    pub k_keep: usize,
    pub classes: usize,
}

impl GrtDims {
    /// Defaults tied to a backbone: F = F' = backbone feature width,
    /// k_keep = ⌈N/2⌉.
    pub fn for_backbone(b: &crate::backbone::BackboneDims) -> Self {
        let k_keep: usize = std::env::var("GTTA_KKEEP")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(|| b.n_regions().div_ceil(2));
        Self {
            n_regions: b.n_regions(),
            feat_in: b.feat,
            f: b.feat,
            f_prime: b.feat,
            k_keep,
            classes: b.classes,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GrtParams {
    pub dims: GrtDims,
    pub w_proj: Param,
    pub pos_embed: Param,
    pub w_edge: Param,
    pub w_att: Param,
    pub a_src: Param,
    pub a_dst: Param,
    pub a_pool: Param,
    pub clf_w: Param,
    pub clf_b: Param,
}

impl GrtParams {
    pub fn init(dims: GrtDims, rng: &mut impl Rng) -> Self {
        let GrtDims { n_regions, feat_in, f, f_prime, k_keep, classes } = dims;
        let att_scale = 1.0 / (f_prime as f64).sqrt();
        let wproj_scale: f64 = std::env::var("GTTA_WPROJ_SCALE").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
        let wedge_scale: f64 = std::env::var("GTTA_WEDGE_SCALE").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
        let watt_scale: f64 = std::env::var("GTTA_WATT_SCALE").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
        let pos_scale: f64 = std::env::var("GTTA_POS_SCALE").ok().and_then(|v| v.parse().ok()).unwrap_or(0.1);
        Self {
            dims,
            w_proj: {
                let scale = wproj_scale * (6.0 / (feat_in + f) as f64).sqrt();
                Param::uniform("grt/w_proj", vec![feat_in, f], scale, rng)
            },
            pos_embed: Param::uniform("grt/pos_embed", vec![n_regions, f], pos_scale, rng),
            // small scale keeps the additive attention bias A = hWhᵀ near O(1) at init
            w_edge: Param::uniform("grt/w_edge", vec![f, f], wedge_scale / f as f64, rng),
            w_att: Param::glorot("grt/w_att", f, f_prime, rng),
            a_src: Param::uniform("grt/a_src", vec![f_prime], watt_scale * att_scale, rng),
            a_dst: Param::uniform("grt/a_dst", vec![f_prime], watt_scale * att_scale, rng),
            a_pool: Param::uniform("grt/a_pool", vec![f_prime], att_scale, rng),
            // zero-started head: logits begin at chance and the first gradients
            // carve the class direction instead of fighting a random readout
            clf_w: Param::zeros("grt/clf_w", vec![k_keep * f_prime, classes]),
            clf_b: Param::zeros("grt/clf_b", vec![classes]),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_proj,
            &self.pos_embed,
            &self.w_edge,
            &self.w_att,
            &self.a_src,
            &self.a_dst,
            &self.a_pool,
            &self.clf_w,
            &self.clf_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_proj,
            &mut self.pos_embed,
            &mut self.w_edge,
            &mut self.w_att,
            &mut self.a_src,
            &mut self.a_dst,
            &mut self.a_pool,
            &mut self.clf_w,
            &mut self.clf_b,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GrtLeaves {
    pub w_proj: TensorId,
    pub pos_embed: TensorId,
    pub w_edge: TensorId,
    pub w_att: TensorId,
    pub a_src: TensorId,
    pub a_dst: TensorId,
    pub a_pool: TensorId,
    pub clf_w: TensorId,
    pub clf_b: TensorId,
}

impl GrtLeaves {
    pub fn bind(tape: &mut Tape, p: &GrtParams, trainable: bool) -> Result<Self> {
        let bind = |tape: &mut Tape, param: &Param| {
            if trainable {
                param.leaf(tape)
            } else {
                param.frozen_leaf(tape)
            }
        };
        Ok(Self {
            w_proj: bind(tape, &p.w_proj)?,
            pos_embed: bind(tape, &p.pos_embed)?,
            w_edge: bind(tape, &p.w_edge)?,
            w_att: bind(tape, &p.w_att)?,
            a_src: bind(tape, &p.a_src)?,
            a_dst: bind(tape, &p.a_dst)?,
            a_pool: bind(tape, &p.a_pool)?,
            clf_w: bind(tape, &p.clf_w)?,
            clf_b: bind(tape, &p.clf_b)?,
        })
    }

    pub fn pull_grads(&self, tape: &Tape, p: &mut GrtParams) {
        p.w_proj.pull_grad(tape, self.w_proj);
        p.pos_embed.pull_grad(tape, self.pos_embed);
        p.w_edge.pull_grad(tape, self.w_edge);
        p.w_att.pull_grad(tape, self.w_att);
        p.a_src.pull_grad(tape, self.a_src);
        p.a_dst.pull_grad(tape, self.a_dst);
        p.a_pool.pull_grad(tape, self.a_pool);
        p.clf_w.pull_grad(tape, self.clf_w);
        p.clf_b.pull_grad(tape, self.clf_b);
    }
}

/// Nodes = regions · W_proj + positional embedding.
pub fn project_nodes(
    tape: &mut Tape,
    leaves: &GrtLeaves,
    regions: TensorId,
) -> Result<TensorId> {
    let proj = tape.matmul(regions, leaves.w_proj)?;
    Ok(tape.add(proj, leaves.pos_embed)?)
}

/// Learned edge weights `A = nodes · W_edge · nodesᵀ`.
pub fn edge_matrix(tape: &mut Tape, nodes: TensorId, w_edge: TensorId) -> Result<TensorId> {
    let nw = tape.matmul(nodes, w_edge)?;
    let nt = tape.transpose(nodes)?;
    Ok(tape.matmul(nw, nt)?)
}

/// Single-head graph self-attention with the edge matrix added to the pairwise
/// attention logits: e_ij = leaky_relu(a_srcᵀt_i + a_dstᵀt_j, 0.2) + A_ij,
/// α = row-softmax(e), out_i = elu(Σ_j α_ij t_j).
pub fn graph_attention(
    tape: &mut Tape,
    leaves: &GrtLeaves,
    dims: &GrtDims,
    nodes: TensorId,
    a_mat: TensorId,
) -> Result<TensorId> {
    let n = dims.n_regions;
    let t = tape.matmul(nodes, leaves.w_att)?;
    let a_src_col = tape.reshape(leaves.a_src, &[dims.f_prime, 1])?;
    let a_dst_col = tape.reshape(leaves.a_dst, &[dims.f_prime, 1])?;
    let s_src = tape.matmul(t, a_src_col)?; // [N, 1]
    let s_dst = tape.matmul(t, a_dst_col)?; // [N, 1]
    let ones_row = tape.constant(&[1, n], vec![1.0; n])?;
    let ones_col = tape.constant(&[n, 1], vec![1.0; n])?;
    let src_grid = tape.matmul(s_src, ones_row)?;
    let dst_row = tape.transpose(s_dst)?;
    let dst_grid = tape.matmul(ones_col, dst_row)?;
    let pair = tape.add(src_grid, dst_grid)?;
    let act = tape.leaky_relu(pair, 0.2);
    let e = tape.add(act, a_mat)?;
    let alpha = tape.softmax(e, 1)?;
    let mixed = tape.matmul(alpha, t)?;
    Ok(tape.elu(mixed))
}

/// Score-gated top-k pooling. Scores are `sigmoid(a_poolᵀ h'_i)`; the k highest
/// scoring rows survive (ties keep the lower index) and each kept row is scaled by
/// its score so `a_pool` receives gradient. Returns (pooled rows, kept indices in
/// ascending order, score tensor).
pub fn topk_pool(
    tape: &mut Tape,
    leaves: &GrtLeaves,
    dims: &GrtDims,
    nodes_p: TensorId,
    k_keep: usize,
) -> Result<(TensorId, Vec<usize>, TensorId)> {
    let n = dims.n_regions;
    if k_keep < 1 || k_keep > n {
        return Err(GttaError::BadK { k: k_keep, n });
    }
    let a_pool_col = tape.reshape(leaves.a_pool, &[dims.f_prime, 1])?;
    let raw = tape.matmul(nodes_p, a_pool_col)?; // [N, 1]
    let scores = tape.sigmoid(raw);
    let gated = tape.mul_col_broadcast(nodes_p, scores)?;
    let kept = top_k_indices(tape.values(scores), k_keep);
    let pooled = tape.gather_rows(gated, &kept)?;
    Ok((pooled, kept, scores))
}

/// Indices of the k largest scores, ties broken toward the lower index; returned
/// ascending.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// Flatten the pooled rows and apply the head classifier.
pub fn grt_logits(
    tape: &mut Tape,
    leaves: &GrtLeaves,
    dims: &GrtDims,
    pooled: TensorId,
) -> Result<TensorId> {
    let flat = tape.reshape(pooled, &[1, dims.k_keep * dims.f_prime])?;
    let lin = tape.matmul(flat, leaves.clf_w)?;
    Ok(tape.add_row_broadcast(lin, leaves.clf_b)?)
}

/// Full head for one image's region features: project → edges → attention →
/// top-k pool → classifier. Returns `[1 × K]` logits.
pub fn grt_head_forward(
    tape: &mut Tape,
    leaves: &GrtLeaves,
    dims: &GrtDims,
    regions: TensorId,
) -> Result<TensorId> {
    let nodes = project_nodes(tape, leaves, regions)?;
    let a_mat = edge_matrix(tape, nodes, leaves.w_edge)?;
    let mixed = graph_attention(tape, leaves, dims, nodes, a_mat)?;
    let (pooled, _, _) = topk_pool(tape, leaves, dims, mixed, dims.k_keep)?;
    grt_logits(tape, leaves, dims, pooled)
}

/// Detached hard labels: one-hot of the backbone's argmax per row. No gradient
/// flows through these.
pub fn hard_labels(p_b_values: &[f64], batch: usize, classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * classes];
    for b in 0..batch {
        let arg = argmax_slice(&p_b_values[b * classes..(b + 1) * classes]);
        out[b * classes + arg] = 1.0;
    }
    out
}

/// Mutual-learning loss:
/// CE(p_B, y) + λ·CE(p_GRT, y) + (1−λ)·CE(p_GRT, one_hot(argmax p_B)),
/// with the hard backbone labels detached from the gradient path.
pub fn grt_loss(
    tape: &mut Tape,
    p_b_logits: TensorId,
    p_grt_logits: TensorId,
    y: &[usize],
    lambda: f64,
) -> Result<TensorId> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(GttaError::InvalidLambda(lambda));
    }
    let shape = tape.shape(p_b_logits).to_vec();
    let (batch, classes) = (shape[0], shape[1]);
    let ce_b = tape.cross_entropy(p_b_logits, CeTarget::Indices(y))?;
    let ce_g = tape.cross_entropy(p_grt_logits, CeTarget::Indices(y))?;
    let hard = hard_labels(tape.values(p_b_logits), batch, classes);
    let ce_h = tape.cross_entropy(p_grt_logits, CeTarget::Probs(&hard))?;
    let ce_g_scaled = tape.scale(ce_g, lambda);
    let ce_h_scaled = tape.scale(ce_h, 1.0 - lambda);
    let partial = tape.add(ce_b, ce_g_scaled)?;
    Ok(tape.add(partial, ce_h_scaled)?)
}

/// Gradient × activation attribution over the backbone's region features for one
/// class logit, normalized to sum 1 and arranged on the patch grid. An all-zero
/// map is defined as uniform.
pub fn region_attribution(
    backbone: &BackboneParams,
    image: &[f64],
    class: usize,
) -> Result<Vec<f64>> {
    let dims = backbone.dims;
    let mut tape = Tape::new();
    let leaves = BackboneLeaves::bind(&mut tape, backbone, true)?;
    let (regions, pooled) = backbone_forward(&mut tape, &leaves, &dims, image)?;
    let logits = classifier_logits(&mut tape, &leaves, pooled)?;
    let mut pick = vec![0.0; dims.classes];
    if class >= dims.classes {
        return Err(GttaError::Tensor(crate::error::TensorError::IndexOutOfRange {
            index: class,
            classes: dims.classes,
        }));
    }
    pick[class] = 1.0;
    let mask = tape.constant(&[1, dims.classes], pick)?;
    let masked = tape.mul(logits, mask)?;
    let target = tape.reduce_sum(masked, None)?;
    tape.backward(target)?;

    let n = dims.n_regions();
    let f = dims.feat;
    let rv = tape.values(regions).to_vec();
    let grad = tape
        .grad(regions)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; n * f]);
    let mut heat: Vec<f64> = (0..n)
        .map(|r| {
            (0..f).map(|j| grad[r * f + j] * rv[r * f + j]).sum::<f64>().abs()
        })
        .collect();
    let total: f64 = heat.iter().sum();
    if total > 0.0 {
        for h in heat.iter_mut() {
            *h /= total;
        }
    } else {
        heat = vec![1.0 / n as f64; n];
    }
    Ok(heat)
}
