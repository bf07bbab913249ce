//! Training objectives behind a common trait, registered by name and
//! selected at runtime from the experiment config.
//!
//! Each objective composes tape losses over the forward outputs:
//!   global_only      gamma * global
//!   lovt             gamma * global + mu * local-image + nu * local-report
//!   lovt_uni_gauss   gamma * global + eta * (uni-gauss image + report)
//!   lovt_uni_xent    gamma * global + eta * (uni-xent image + report)
//!   uni_only         eta * (uni image + report), variant from the config

use crate::autodiff::{NodeId, Tape};
use crate::error::{LabError, Result};
use crate::loss::{
    tape_global_loss, tape_local_image_loss, tape_local_report_loss, tape_uniformity,
    LossConfig, UniformityVariant,
};
use crate::numeric::Matrix;
use crate::toy::ForwardNodes;

/// Inputs an objective may need beyond the forward outputs.
pub struct ObjectiveContext<'a> {
    pub cfg: &'a LossConfig,
    /// Spatial positiveness matrix for the local image loss.
    pub positiveness: &'a Matrix,
    /// Uniformity variant for objectives that do not fix one themselves.
    pub variant: UniformityVariant,
}

/// The scalar training loss plus the raw (uncoefficiented) component nodes
/// that get logged.
pub struct ObjectiveTerms {
    pub total: NodeId,
    pub global_part: Option<NodeId>,
    pub uni_image: Option<NodeId>,
    pub uni_report: Option<NodeId>,
}

pub trait Objective: Send + Sync {
    fn name(&self) -> &'static str;
    fn build(
        &self,
        tape: &mut Tape,
        fw: &ForwardNodes,
        ctx: &ObjectiveContext<'_>,
    ) -> Result<ObjectiveTerms>;
}

struct GlobalOnly;

impl Objective for GlobalOnly {
    fn name(&self) -> &'static str {
        "global_only"
    }

    fn build(
        &self,
        tape: &mut Tape,
        fw: &ForwardNodes,
        ctx: &ObjectiveContext<'_>,
    ) -> Result<ObjectiveTerms> {
        let global = tape_global_loss(tape, fw.zbar_image, fw.zbar_report, ctx.cfg)?;
        let total = tape.scalar_mul(global, ctx.cfg.gamma)?;
        Ok(ObjectiveTerms {
            total,
            global_part: Some(global),
            uni_image: None,
            uni_report: None,
        })
    }
}

struct Lovt;

impl Objective for Lovt {
    fn name(&self) -> &'static str {
        "lovt"
    }

    fn build(
        &self,
        tape: &mut Tape,
        fw: &ForwardNodes,
        ctx: &ObjectiveContext<'_>,
    ) -> Result<ObjectiveTerms> {
        let cfg = ctx.cfg;
        let global = tape_global_loss(tape, fw.zbar_image, fw.zbar_report, cfg)?;
        let local_image = tape_local_image_loss(
            tape,
            &fw.z_image,
            &fw.cross_to_image,
            &fw.pool_w_image,
            ctx.positiveness,
            cfg,
        )?;
        let local_report = tape_local_report_loss(
            tape,
            &fw.z_report,
            &fw.cross_to_report,
            &fw.pool_w_report,
            cfg,
        )?;
        let a = tape.scalar_mul(global, cfg.gamma)?;
        let b = tape.scalar_mul(local_image, cfg.mu)?;
        let c = tape.scalar_mul(local_report, cfg.nu)?;
        let ab = tape.add(a, b)?;
        let total = tape.add(ab, c)?;
        Ok(ObjectiveTerms {
            total,
            global_part: Some(global),
            uni_image: None,
            uni_report: None,
        })
    }
}

struct LovtUni(UniformityVariant);

impl Objective for LovtUni {
    fn name(&self) -> &'static str {
        match self.0 {
            UniformityVariant::Gauss => "lovt_uni_gauss",
            UniformityVariant::Xent => "lovt_uni_xent",
        }
    }

    fn build(
        &self,
        tape: &mut Tape,
        fw: &ForwardNodes,
        ctx: &ObjectiveContext<'_>,
    ) -> Result<ObjectiveTerms> {
        let cfg = ctx.cfg;
        let global = tape_global_loss(tape, fw.zbar_image, fw.zbar_report, cfg)?;
        let ui = tape_uniformity(tape, &fw.z_image, cfg.tau_prime, self.0)?;
        let ur = tape_uniformity(tape, &fw.z_report, cfg.tau_prime, self.0)?;
        let g = tape.scalar_mul(global, cfg.gamma)?;
        let u = tape.add(ui, ur)?;
        let u = tape.scalar_mul(u, cfg.eta)?;
        let total = tape.add(g, u)?;
        Ok(ObjectiveTerms {
            total,
            global_part: Some(global),
            uni_image: Some(ui),
            uni_report: Some(ur),
        })
    }
}

struct UniOnly;

impl Objective for UniOnly {
    fn name(&self) -> &'static str {
        "uni_only"
    }

    fn build(
        &self,
        tape: &mut Tape,
        fw: &ForwardNodes,
        ctx: &ObjectiveContext<'_>,
    ) -> Result<ObjectiveTerms> {
        let cfg = ctx.cfg;
        let ui = tape_uniformity(tape, &fw.z_image, cfg.tau_prime, ctx.variant)?;
        let ur = tape_uniformity(tape, &fw.z_report, cfg.tau_prime, ctx.variant)?;
        let u = tape.add(ui, ur)?;
        let total = tape.scalar_mul(u, cfg.eta)?;
        Ok(ObjectiveTerms {
            total,
            global_part: None,
            uni_image: Some(ui),
            uni_report: Some(ur),
        })
    }
}

/// Name-keyed registry of the built-in objectives.
pub struct ObjectiveRegistry {
    entries: Vec<Box<dyn Objective>>,
}

impl Default for ObjectiveRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl ObjectiveRegistry {
    pub fn builtin() -> Self {
        ObjectiveRegistry {
            entries: vec![
                Box::new(GlobalOnly),
                Box::new(Lovt),
                Box::new(LovtUni(UniformityVariant::Gauss)),
                Box::new(LovtUni(UniformityVariant::Xent)),
                Box::new(UniOnly),
            ],
        }
    }

    pub fn get(&self, name: &str) -> Result<&dyn Objective> {
        self.entries
            .iter()
            .map(|b| b.as_ref())
            .find(|o| o.name() == name)
            .ok_or_else(|| {
                LabError::Unsupported(format!(
                    "unknown objective '{name}' (known: {})",
                    self.names().join(", ")
                ))
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|b| b.name()).collect()
    }

    /// The uniformity variant an objective itself pins, if any.
    pub fn fixed_variant(name: &str) -> Option<UniformityVariant> {
        match name {
            "lovt_uni_gauss" => Some(UniformityVariant::Gauss),
            "lovt_uni_xent" => Some(UniformityVariant::Xent),
            _ => None,
        }
    }
}
