use serde::{Deserialize, Serialize};

use super::branch::{task_logits, BranchExtractor, EmbeddingTriple, GrlSpec, Representation};
use super::deploy::{BranchArch, Model, ModelArch};
use super::encoder::BackboneConfig;
use super::layers::{ClassifierHead, Linear};
use crate::error::{Error, Result};
use crate::params::{ParamDecl, ParamStore};
use crate::tape::{Graph, Var};

pub const MODALITIES: usize = 2;

/// Per-modality backbones and the shared embedding width `D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub m1: BackboneConfig,
    pub m2: BackboneConfig,
    pub embed_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m1: BackboneConfig::default(),
            m2: BackboneConfig::default(),
            embed_width: 16,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self, modality: usize) -> &BackboneConfig {
        if modality == 0 {
            &self.m1
        } else {
            &self.m2
        }
    }
}

/// Layout of the jointly trained two-branch network and its seven heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscomArch {
    pub n_classes: usize,
    pub embed_width: usize,
    pub representation: Representation,
    pub grl: GrlSpec,
    pub branches: [BranchExtractor; MODALITIES],
    pub cl_task: [ClassifierHead; MODALITIES],
    pub cl_adv: ClassifierHead,
    pub cl_m_inf: ClassifierHead,
    pub cl_m_irr: ClassifierHead,
    pub cl_aux: ClassifierHead,
}

impl DiscomArch {
    pub fn new(
        config: &ModelConfig,
        input_shapes: [&[usize]; MODALITIES],
        n_classes: usize,
        grl: GrlSpec,
        representation: Representation,
    ) -> Result<Self> {
        grl.validate()?;
        if n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
        }
        let d = config.embed_width;
        let branch = |m: usize| {
            BranchExtractor::new(format!("m{}", m + 1), config.backbone(m), input_shapes[m], d)
        };
        let head_w = representation.head_width(d);
        Ok(Self {
            n_classes,
            embed_width: d,
            representation,
            grl,
            branches: [branch(0)?, branch(1)?],
            cl_task: [
                Linear::new("cl_m1", head_w, n_classes),
                Linear::new("cl_m2", head_w, n_classes),
            ],
            cl_adv: Linear::new("cl_adv", d, MODALITIES),
            cl_m_inf: Linear::new("cl_m_inf", d, MODALITIES),
            cl_m_irr: Linear::new("cl_m_irr", d, MODALITIES),
            cl_aux: Linear::new("cl_aux", d, n_classes),
        })
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        let mut d = Vec::new();
        for b in &self.branches {
            d.extend(b.decls());
        }
        for h in self.cl_task.iter().chain([
            &self.cl_adv,
            &self.cl_m_inf,
            &self.cl_m_irr,
            &self.cl_aux,
        ]) {
            d.extend(h.decls());
        }
        d
    }

    /// Parameter-name prefixes needed to run one modality at inference.
    pub fn deploy_prefixes(&self, modality: usize) -> [String; 2] {
        [
            format!("{}.", self.branches[modality].prefix),
            format!("{}.", self.cl_task[modality].name),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub arch: DiscomArch,
    pub params: ParamStore,
}

/// Graph nodes produced by one joint forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BundleForward {
    pub triples: [EmbeddingTriple; MODALITIES],
    pub task_logits: [Var; MODALITIES],
}

impl ModelBundle {
    pub fn init(arch: DiscomArch, seed: u64) -> Self {
        let params = ParamStore::initialize(&arch.decls(), seed);
        Self { arch, params }
    }

    pub fn forward(&self, g: &mut Graph, x: [Var; MODALITIES]) -> Result<BundleForward> {
        let a = &self.arch;
        let t0 = a.branches[0].forward(g, x[0])?;
        let t1 = a.branches[1].forward(g, x[1])?;
        let l0 = task_logits(g, &a.cl_task[0], &t0, a.representation)?;
        let l1 = task_logits(g, &a.cl_task[1], &t1, a.representation)?;
        Ok(BundleForward {
            triples: [t0, t1],
            task_logits: [l0, l1],
        })
    }

    /// Standalone single-modality model: that branch and its task head only.
    pub fn deploy(&self, modality: usize) -> Model {
        let prefixes = self.arch.deploy_prefixes(modality);
        let refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
        Model {
            arch: ModelArch::Branch(BranchArch {
                modality,
                n_classes: self.arch.n_classes,
                representation: self.arch.representation,
                branch: self.arch.branches[modality].clone(),
                head: self.arch.cl_task[modality].clone(),
            }),
            params: self.params.subset(&refs),
        }
    }
}
