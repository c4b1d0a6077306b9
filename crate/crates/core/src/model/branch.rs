use serde::{Deserialize, Serialize};

use super::encoder::{BackboneConfig, Encoder, EncoderSpec};
use super::layers::{ClassifierHead, Linear};
use crate::error::{Error, Result};
use crate::params::ParamDecl;
use crate::tape::{Graph, Var};

/// Gradient reversal strength. Forward is the identity; backward multiplies
/// the incoming gradient by `-lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrlSpec {
    pub lambda: f64,
}

impl Default for GrlSpec {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl GrlSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "grl lambda must be a finite non-negative number, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn apply(&self, g: &mut Graph, z: Var) -> Var {
        g.reverse_grad(z, self.lambda)
    }
}

/// Which embeddings the per-modality task head consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    #[default]
    Both,
    OnlyInv,
    OnlyInf,
}

impl Representation {
    pub fn head_width(self, embed_width: usize) -> usize {
        match self {
            Representation::Both => 2 * embed_width,
            Representation::OnlyInv | Representation::OnlyInf => embed_width,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTriple {
    pub z_inv: Var,
    pub z_inf: Var,
    pub z_irr: Var,
}

/// Two encoders over the same input: a specific encoder whose `2D` output is
/// split into `z_irr` (first half) and `z_inf` (second half), and an invariant
/// encoder followed by an affine projection down to `z_inv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchExtractor {
    pub prefix: String,
    pub embed_width: usize,
    pub specific: Encoder,
    pub invariant: Encoder,
    pub projection: Linear,
}

impl BranchExtractor {
    pub fn new(
        prefix: impl Into<String>,
        backbone: &BackboneConfig,
        input_shape: &[usize],
        embed_width: usize,
    ) -> Result<Self> {
        let prefix = prefix.into();
        if embed_width == 0 {
            return Err(Error::Config("embed_width must be positive".into()));
        }
        let enc = |name: &str| {
            Encoder::new(
                format!("{prefix}.{name}"),
                EncoderSpec {
                    backbone: backbone.clone(),
                    input_shape: input_shape.to_vec(),
                    out_width: 2 * embed_width,
                },
            )
        };
        let specific = enc("spec")?;
        let invariant = enc("inv.enc")?;
        let projection = Linear::new(format!("{prefix}.inv.proj"), invariant.out_width(), embed_width);
        Ok(Self {
            prefix,
            embed_width,
            specific,
            invariant,
            projection,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.specific.spec.input_shape
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        let mut d = self.specific.decls();
        d.extend(self.invariant.decls());
        d.extend(self.projection.decls());
        d
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<EmbeddingTriple> {
        let v = self.specific.forward(g, x)?;
        let d = self.embed_width;
        let z_irr = g.slice_cols(v, 0, d)?;
        let z_inf = g.slice_cols(v, d, 2 * d)?;
        let h = self.invariant.forward(g, x)?;
        let z_inv = self.projection.forward(g, h)?;
        Ok(EmbeddingTriple { z_inv, z_inf, z_irr })
    }
}

/// Logits of a per-modality task head; `z_irr` is never read.
pub fn task_logits(
    g: &mut Graph,
    head: &ClassifierHead,
    triple: &EmbeddingTriple,
    representation: Representation,
) -> Result<Var> {
    let features = match representation {
        Representation::Both => g.concat_cols(triple.z_inv, triple.z_inf)?,
        Representation::OnlyInv => triple.z_inv,
        Representation::OnlyInf => triple.z_inf,
    };
    head.forward(g, features)
}
