//! Patch-MLP feature extractor with a linear classifier head.
//!
//! Images are cut into non-overlapping patches, each embedded linearly, then passed
//! through two per-region MLP layers that add the mean over regions back to every
//! region (global context) before an ELU. The pooled feature is the mean over
//! region vectors; a linear head on top produces class logits.

use crate::error::{GttaError, Result};
use crate::synthdata::{IMG_C, IMG_H};
use crate::tensor::{Param, Tape, TensorId};
use rand::Rng;

/// Architecture sizes. The benchmark uses the default; tests may shrink everything
/// while keeping the graph structure identical.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneDims {
    pub img_hw: usize,
    pub patch: usize,
    pub feat: usize,
    pub classes: usize,
}

impl Default for BackboneDims {
    fn default() -> Self {
        Self { img_hw: IMG_H, patch: 8, feat: 64, classes: 2 }
    }
}

impl BackboneDims {
    pub fn grid(&self) -> usize {
        self.img_hw / self.patch
    }

    pub fn n_regions(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        IMG_C * self.patch * self.patch
    }

    /// (row, col) patch coordinates of a region index.
    pub fn region_coords(&self, region: usize) -> (usize, usize) {
        (region / self.grid(), region % self.grid())
    }
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub dims: BackboneDims,
    pub patch_embed_w: Param,
    pub patch_embed_b: Param,
    pub mix1_w: Param,
    pub mix1_b: Param,
    pub mix2_w: Param,
    pub mix2_b: Param,
    pub classifier_w: Param,
    pub classifier_b: Param,
}

impl BackboneParams {
    pub fn init(dims: BackboneDims, rng: &mut impl Rng) -> Self {
        let (pd, f, k) = (dims.patch_dim(), dims.feat, dims.classes);
        // trunk starts at half Glorot scale: Adam moves weights by ~lr per step
        // regardless of gradient magnitude, so a smaller start lets the short
        // decayed schedule actually reshape the features
        fn half(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Param {
            let scale = 0.5 * (6.0 / (fan_in + fan_out) as f64).sqrt();
            Param::uniform(name, vec![fan_in, fan_out], scale, rng)
        }
        // zero-DC patch embedding: each unit's weights sum to zero within every
        // channel, so uniform intensity shifts cancel at init and only local
        // contrast drives the features
        let pe_scale: f64 = std::env::var("GTTA_PE_SCALE").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
        let mut patch_embed_w = {
            let scale = pe_scale * (6.0 / (pd + f) as f64).sqrt();
            Param::uniform("backbone/patch_embed_w", vec![pd, f], scale, rng)
        };
        let px = dims.patch * dims.patch;
        for j in 0..f {
            for c in 0..IMG_C {
                let mean: f64 = (0..px)
                    .map(|i| patch_embed_w.values[(c * px + i) * f + j])
                    .sum::<f64>()
                    / px as f64;
                for i in 0..px {
                    patch_embed_w.values[(c * px + i) * f + j] -= mean;
                }
            }
        }
        Self {
            dims,
            patch_embed_w,
            patch_embed_b: Param::zeros("backbone/patch_embed_b", vec![f]),
            mix1_w: half("backbone/mix1_w", f, f, rng),
            mix1_b: Param::zeros("backbone/mix1_b", vec![f]),
            mix2_w: half("backbone/mix2_w", f, f, rng),
            mix2_b: Param::zeros("backbone/mix2_b", vec![f]),
            classifier_w: Param::glorot("backbone/classifier_w", f, k, rng),
            classifier_b: Param::zeros("backbone/classifier_b", vec![k]),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.patch_embed_w,
            &self.patch_embed_b,
            &self.mix1_w,
            &self.mix1_b,
            &self.mix2_w,
            &self.mix2_b,
            &self.classifier_w,
            &self.classifier_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.patch_embed_w,
            &mut self.patch_embed_b,
            &mut self.mix1_w,
            &mut self.mix1_b,
            &mut self.mix2_w,
            &mut self.mix2_b,
            &mut self.classifier_w,
            &mut self.classifier_b,
        ]
    }

    /// Everything except the classifier head — the frozen part at test time.
    pub fn feature_params(&self) -> Vec<&Param> {
        vec![
            &self.patch_embed_w,
            &self.patch_embed_b,
            &self.mix1_w,
            &self.mix1_b,
            &self.mix2_w,
            &self.mix2_b,
        ]
    }

    pub fn classifier_params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.classifier_w, &mut self.classifier_b]
    }
}

/// Parameter bindings on one tape.
#[derive(Clone, Copy, Debug)]
pub struct BackboneLeaves {
    pub patch_embed_w: TensorId,
    pub patch_embed_b: TensorId,
    pub mix1_w: TensorId,
    pub mix1_b: TensorId,
    pub mix2_w: TensorId,
    pub mix2_b: TensorId,
    pub classifier_w: TensorId,
    pub classifier_b: TensorId,
}

impl BackboneLeaves {
    pub fn bind(tape: &mut Tape, p: &BackboneParams, trainable: bool) -> Result<Self> {
        Self::bind_split(tape, p, trainable, trainable)
    }

    /// Bind with independent trainability for features and classifier; test-time
    /// adaptation freezes the features and trains only the head.
    pub fn bind_split(
        tape: &mut Tape,
        p: &BackboneParams,
        train_features: bool,
        train_classifier: bool,
    ) -> Result<Self> {
        let bind = |tape: &mut Tape, param: &Param, t: bool| {
            if t {
                param.leaf(tape)
            } else {
                param.frozen_leaf(tape)
            }
        };
        Ok(Self {
            patch_embed_w: bind(tape, &p.patch_embed_w, train_features)?,
            patch_embed_b: bind(tape, &p.patch_embed_b, train_features)?,
            mix1_w: bind(tape, &p.mix1_w, train_features)?,
            mix1_b: bind(tape, &p.mix1_b, train_features)?,
            mix2_w: bind(tape, &p.mix2_w, train_features)?,
            mix2_b: bind(tape, &p.mix2_b, train_features)?,
            classifier_w: bind(tape, &p.classifier_w, train_classifier)?,
            classifier_b: bind(tape, &p.classifier_b, train_classifier)?,
        })
    }

    /// Pull gradients back into the parameter structs after `backward`.
    pub fn pull_grads(&self, tape: &Tape, p: &mut BackboneParams) {
        p.patch_embed_w.pull_grad(tape, self.patch_embed_w);
        p.patch_embed_b.pull_grad(tape, self.patch_embed_b);
        p.mix1_w.pull_grad(tape, self.mix1_w);
        p.mix1_b.pull_grad(tape, self.mix1_b);
        p.mix2_w.pull_grad(tape, self.mix2_w);
        p.mix2_b.pull_grad(tape, self.mix2_b);
        p.classifier_w.pull_grad(tape, self.classifier_w);
        p.classifier_b.pull_grad(tape, self.classifier_b);
    }
}

/// Cut an `[3 × H × W]` image into non-overlapping flattened patches, ordered
/// row-major over the patch grid; each patch vector is (channel, dy, dx) row-major.
pub fn patchify(image: &[f64], dims: &BackboneDims) -> Result<Vec<f64>> {
    let (hw, patch) = (dims.img_hw, dims.patch);
    if image.len() != IMG_C * hw * hw {
        return Err(GttaError::Tensor(crate::error::TensorError::ShapeMismatch(
            format!("expected {} image values, got {}", IMG_C * hw * hw, image.len()),
        )));
    }
    let grid = dims.grid();
    let plane = hw * hw;
    let mut out = Vec::with_capacity(dims.n_regions() * dims.patch_dim());
    for pr in 0..grid {
        for pc in 0..grid {
            for c in 0..IMG_C {
                for dy in 0..patch {
                    let y = pr * patch + dy;
                    let base = c * plane + y * hw + pc * patch;
                    out.extend_from_slice(&image[base..base + patch]);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of `patchify` (used to verify the patch bijection).
pub fn unpatchify(patches: &[f64], dims: &BackboneDims) -> Vec<f64> {
    let (hw, patch) = (dims.img_hw, dims.patch);
    let grid = dims.grid();
    let plane = hw * hw;
    let pd = dims.patch_dim();
    let mut img = vec![0.0; IMG_C * plane];
    for pr in 0..grid {
        for pc in 0..grid {
            let p = pr * grid + pc;
            for c in 0..IMG_C {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let v = patches[p * pd + c * patch * patch + dy * patch + dx];
                        img[c * plane + (pr * patch + dy) * hw + pc * patch + dx] = v;
                    }
                }
            }
        }
    }
    img
}

fn mix_layer(tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let lin = tape.matmul(x, w)?;
    let biased = tape.add_row_broadcast(lin, b)?;
    let ctx = tape.reduce_mean(biased, Some(0))?;
    let with_ctx = tape.add_row_broadcast(biased, ctx)?;
    Ok(tape.elu(with_ctx))
}

/// Forward one image: returns the per-region feature matrix `[N × F]` and the
/// pooled feature `[1 × F]` (mean over regions).
pub fn backbone_forward(
    tape: &mut Tape,
    leaves: &BackboneLeaves,
    dims: &BackboneDims,
    image: &[f64],
) -> Result<(TensorId, TensorId)> {
    let patches = patchify(image, dims)?;
    let p = tape.constant(&[dims.n_regions(), dims.patch_dim()], patches)?;
    let emb = tape.matmul(p, leaves.patch_embed_w)?;
    let emb = tape.add_row_broadcast(emb, leaves.patch_embed_b)?;
    let h1 = mix_layer(tape, emb, leaves.mix1_w, leaves.mix1_b)?;
    let regions = mix_layer(tape, h1, leaves.mix2_w, leaves.mix2_b)?;
    let pooled = tape.reduce_mean(regions, Some(0))?;
    let pooled = tape.reshape(pooled, &[1, dims.feat])?;
    Ok((regions, pooled))
}

/// Linear head: `pooled · W + b` for a `[B × F]` batch of pooled features.
pub fn classifier_logits(
    tape: &mut Tape,
    leaves: &BackboneLeaves,
    pooled: TensorId,
) -> Result<TensorId> {
    let lin = tape.matmul(pooled, leaves.classifier_w)?;
    Ok(tape.add_row_broadcast(lin, leaves.classifier_b)?)
}

/// Class probabilities from pooled features, computed without a tape. Every
/// prediction the crate reports — frozen evaluation or adaptation — goes through
/// this one function, so a zero-learning-rate adaptation is bit-identical to the
/// frozen model.
pub fn classifier_probs_values(model: &BackboneParams, feats: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = model.dims.classes;
    let f = model.dims.feat;
    feats
        .iter()
        .map(|z| {
            let mut logits = model.classifier_b.values.clone();
            for j in 0..f {
                for c in 0..k {
                    logits[c] += z[j] * model.classifier_w.values[j * k + c];
                }
            }
            crate::tensor::softmax_slice(&logits)
        })
        .collect()
}

/// Pooled features for a batch of images with no gradient tracking — the frozen
/// `f_θ(x)` used by test-time adaptation.
pub fn extract_features(model: &BackboneParams, images: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for &img in images {
        let mut tape = Tape::new();
        let leaves = BackboneLeaves::bind(&mut tape, model, false)?;
        let (_, pooled) = backbone_forward(&mut tape, &leaves, &model.dims, img)?;
        out.push(tape.values(pooled).to_vec());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, softmax_slice, CeTarget};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn small_dims() -> BackboneDims {
        BackboneDims { img_hw: 16, patch: 4, feat: 8, classes: 2 }
    }

    fn rand_image(r: &mut ChaCha8Rng, hw: usize) -> Vec<f64> {
        use rand::Rng;
        (0..IMG_C * hw * hw).map(|_| r.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn patchify_constant_image() {
        let dims = BackboneDims::default();
        let img = vec![0.37; IMG_C * 64 * 64];
        let p = patchify(&img, &dims).unwrap();
        assert_eq!(p.len(), 64 * 192);
        assert!(p.iter().all(|&v| v == 0.37));
    }

    #[test]
    fn patchify_is_local() {
        let dims = BackboneDims::default();
        let mut img = vec![0.0; IMG_C * 64 * 64];
        img[0] = 1.0; // channel 0, pixel (0, 0) → patch 0 only
        let p = patchify(&img, &dims).unwrap();
        let pd = dims.patch_dim();
        assert!(p[..pd].iter().any(|&v| v != 0.0));
        assert!(p[pd..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_round_trips() {
        let dims = BackboneDims::default();
        let mut r = rng();
        let img = rand_image(&mut r, 64);
        let p = patchify(&img, &dims).unwrap();
        assert_eq!(unpatchify(&p, &dims), img);
    }

    #[test]
    fn patchify_rejects_misshaped_input() {
        let dims = BackboneDims::default();
        assert!(patchify(&[0.0; 100], &dims).is_err());
    }

    #[test]
    fn zero_weights_give_zero_pooled() {
        let dims = small_dims();
        let mut r = rng();
        let mut params = BackboneParams::init(dims, &mut r);
        for p in params.params_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let img = rand_image(&mut r, dims.img_hw);
        let mut tape = Tape::new();
        let leaves = BackboneLeaves::bind(&mut tape, &params, false).unwrap();
        let (_, pooled) = backbone_forward(&mut tape, &leaves, &dims, &img).unwrap();
        assert!(tape.values(pooled).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooled_is_mean_of_region_rows() {
        let dims = small_dims();
        let mut r = rng();
        let params = BackboneParams::init(dims, &mut r);
        let img = rand_image(&mut r, dims.img_hw);
        let mut tape = Tape::new();
        let leaves = BackboneLeaves::bind(&mut tape, &params, false).unwrap();
        let (regions, pooled) = backbone_forward(&mut tape, &leaves, &dims, &img).unwrap();
        let rv = tape.values(regions);
        let n = dims.n_regions();
        for j in 0..dims.feat {
            let mean: f64 = (0..n).map(|i| rv[i * dims.feat + j]).sum::<f64>() / n as f64;
            assert!((mean - tape.values(pooled)[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn backbone_is_permutation_equivariant_over_patches() {
        let dims = small_dims();
        let mut r = rng();
        let params = BackboneParams::init(dims, &mut r);
        let img = rand_image(&mut r, dims.img_hw);

        // swap two patch blocks in the image
        let (pa, pb) = (1usize, 6usize);
        let pd = dims.patch_dim();
        let mut patches = patchify(&img, &dims).unwrap();
        for j in 0..pd {
            patches.swap(pa * pd + j, pb * pd + j);
        }
        let swapped = unpatchify(&patches, &dims);

        let run = |image: &[f64]| {
            let mut tape = Tape::new();
            let leaves = BackboneLeaves::bind(&mut tape, &params, false).unwrap();
            let (regions, _) = backbone_forward(&mut tape, &leaves, &dims, image).unwrap();
            tape.values(regions).to_vec()
        };
        let base = run(&img);
        let perm = run(&swapped);
        let f = dims.feat;
        for j in 0..f {
            assert!((base[pa * f + j] - perm[pb * f + j]).abs() <= 1e-12);
            assert!((base[pb * f + j] - perm[pa * f + j]).abs() <= 1e-12);
        }
        for i in 0..dims.n_regions() {
            if i != pa && i != pb {
                for j in 0..f {
                    assert!((base[i * f + j] - perm[i * f + j]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn classifier_trivial_cases() {
        let dims = small_dims();
        let mut r = rng();
        let mut params = BackboneParams::init(dims, &mut r);
        params.classifier_w.values.iter_mut().for_each(|v| *v = 0.0);
        params.classifier_b.values = vec![2.0, 0.0];

        let mut tape = Tape::new();
        let leaves = BackboneLeaves::bind(&mut tape, &params, false).unwrap();
        let pooled = tape.constant(&[1, dims.feat], vec![0.3; dims.feat]).unwrap();
        let logits = classifier_logits(&mut tape, &leaves, pooled).unwrap();
        assert_eq!(tape.values(logits), &[2.0, 0.0]);
        let sm = softmax_slice(tape.values(logits));
        let e2 = 2.0f64.exp();
        assert!((sm[0] - e2 / (e2 + 1.0)).abs() <= 1e-12);

        // zero bias, zero weights → 0.5 / 0.5
        params.classifier_b.values = vec![0.0, 0.0];
        let mut tape = Tape::new();
        let leaves = BackboneLeaves::bind(&mut tape, &params, false).unwrap();
        let pooled = tape.constant(&[1, dims.feat], vec![0.0; dims.feat]).unwrap();
        let logits = classifier_logits(&mut tape, &leaves, pooled).unwrap();
        let sm = softmax_slice(tape.values(logits));
        assert_eq!(sm, vec![0.5, 0.5]);
    }

    #[test]
    fn classifier_matches_scalar_dot_oracle() {
        let dims = small_dims();
        let mut r = rng();
        let params = BackboneParams::init(dims, &mut r);
        use rand::Rng;
        let pooled: Vec<f64> = (0..dims.feat).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let leaves = BackboneLeaves::bind(&mut tape, &params, false).unwrap();
        let pid = tape.constant(&[1, dims.feat], pooled.clone()).unwrap();
        let logits = classifier_logits(&mut tape, &leaves, pid).unwrap();
        for k in 0..dims.classes {
            let mut oracle = params.classifier_b.values[k];
            for j in 0..dims.feat {
                oracle += pooled[j] * params.classifier_w.values[j * dims.classes + k];
            }
            assert!((tape.values(logits)[k] - oracle).abs() <= 1e-12);
        }
    }

    #[test]
    fn end_to_end_gradcheck_through_ce() {
        let dims = small_dims();
        let mut r = rng();
        let model = BackboneParams::init(dims, &mut r);
        let img = rand_image(&mut r, dims.img_hw);

        let mut params: Vec<_> = model.params().into_iter().cloned().collect();
        let err = grad_check(
            &mut params,
            |tape, ids| {
                let leaves = BackboneLeaves {
                    patch_embed_w: ids[0],
                    patch_embed_b: ids[1],
                    mix1_w: ids[2],
                    mix1_b: ids[3],
                    mix2_w: ids[4],
                    mix2_b: ids[5],
                    classifier_w: ids[6],
                    classifier_b: ids[7],
                };
                let (_, pooled) = backbone_forward(tape, &leaves, &dims, &img)?;
                let logits = classifier_logits(tape, &leaves, pooled)?;
                Ok(tape.cross_entropy(logits, CeTarget::Indices(&[1]))?)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "backbone end-to-end gradcheck rel err {err}");
    }
}
