//! The full source model: patch backbone plus optional graph-relation head.

use crate::backbone::{BackboneDims, BackboneParams};
use crate::error::{GttaError, Result};
use crate::grt::{GrtDims, GrtParams};
use crate::tensor::{load_checkpoint, load_into_params, save_checkpoint, Checkpoint, Param};
use crate::util::sub_rng;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: BackboneParams,
    pub grt: Option<GrtParams>,
}

impl Model {
    /// Seeded init. The backbone draws come from a stream independent of the head,
    /// so a vanilla model and a GRT model share bit-identical backbone init under
    /// the same seed.
    pub fn init(dims: BackboneDims, grt_enabled: bool, seed: u64) -> Self {
        let mut rng_b = sub_rng(seed, "backbone-init");
        let backbone = BackboneParams::init(dims, &mut rng_b);
        let grt = grt_enabled.then(|| {
            let mut rng_g = sub_rng(seed, "grt-init");
            GrtParams::init(GrtDims::for_backbone(&dims), &mut rng_g)
        });
        Self { backbone, grt }
    }

    pub fn all_params(&self) -> Vec<&Param> {
        let mut p = self.backbone.params();
        if let Some(g) = &self.grt {
            p.extend(g.params());
        }
        p
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.backbone.params_mut();
        if let Some(g) = &mut self.grt {
            p.extend(g.params_mut());
        }
        p
    }

    pub fn digest(&self) -> String {
        Checkpoint::from_params(self.all_params()).digest()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self.all_params())
    }

    /// Load a checkpoint saved by `save`. Head presence is inferred from the
    /// stored tensor names.
    pub fn load(path: &Path, dims: BackboneDims) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let has_grt = ckpt.tensors.keys().any(|k| k.starts_with("grt/"));
        let mut model = Self::init(dims, has_grt, 0);
        load_into_params(&ckpt, model.all_params_mut())?;
        Ok(model)
    }

    pub fn require_grt(&self) -> Result<&GrtParams> {
        self.grt
            .as_ref()
            .ok_or_else(|| GttaError::Usage("this operation needs a GRT-trained model".into()))
    }
}
