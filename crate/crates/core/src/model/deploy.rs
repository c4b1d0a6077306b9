use serde::{Deserialize, Serialize};

use super::branch::{task_logits, BranchExtractor, Representation};
use super::encoder::{BackboneConfig, Encoder, EncoderSpec};
use super::layers::{ClassifierHead, Linear};
use crate::data_io::Batch;
use crate::error::{Error, Result};
use crate::params::{ParamDecl, ParamStore};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Anything that maps a paired batch to per-class logits.
pub trait Classifier {
    fn n_classes(&self) -> usize;

    fn logits(&self, batch: &Batch) -> Result<Tensor>;

    fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        Ok(self.logits(batch)?.argmax_rows())
    }
}

/// One deployed modality of a jointly trained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchArch {
    pub modality: usize,
    pub n_classes: usize,
    pub representation: Representation,
    pub branch: BranchExtractor,
    pub head: ClassifierHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlainKind {
    Single { modality: usize },
    /// Penultimate features of both encoders are added elementwise.
    Fusion,
}

/// A conventional encoder + linear head classifier (teachers and students).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlainArch {
    pub kind: PlainKind,
    pub n_classes: usize,
    pub encoders: Vec<Encoder>,
    pub head: ClassifierHead,
}

impl PlainArch {
    /// `feature_width` is the penultimate width (the DisCoM task head sees
    /// `2D`, so baselines use the same).
    pub fn single(
        modality: usize,
        backbone: &BackboneConfig,
        input_shape: &[usize],
        feature_width: usize,
        n_classes: usize,
    ) -> Result<Self> {
        let enc = Encoder::new(
            "enc",
            EncoderSpec {
                backbone: backbone.clone(),
                input_shape: input_shape.to_vec(),
                out_width: feature_width,
            },
        )?;
        Ok(Self {
            kind: PlainKind::Single { modality },
            n_classes,
            encoders: vec![enc],
            head: Linear::new("head", feature_width, n_classes),
        })
    }

    pub fn fusion(
        backbones: [&BackboneConfig; 2],
        input_shapes: [&[usize]; 2],
        feature_width: usize,
        n_classes: usize,
    ) -> Result<Self> {
        let mut encoders = Vec::new();
        for m in 0..2 {
            encoders.push(Encoder::new(
                format!("enc_m{}", m + 1),
                EncoderSpec {
                    backbone: backbones[m].clone(),
                    input_shape: input_shapes[m].to_vec(),
                    out_width: feature_width,
                },
            )?);
        }
        Ok(Self {
            kind: PlainKind::Fusion,
            n_classes,
            encoders,
            head: Linear::new("head", feature_width, n_classes),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArch {
    Branch(BranchArch),
    Plain(PlainArch),
}

impl ModelArch {
    pub fn n_classes(&self) -> usize {
        match self {
            ModelArch::Branch(b) => b.n_classes,
            ModelArch::Plain(p) => p.n_classes,
        }
    }

    /// The modality a single-input model reads, `None` for fusion.
    pub fn modality(&self) -> Option<usize> {
        match self {
            ModelArch::Branch(b) => Some(b.modality),
            ModelArch::Plain(PlainArch {
                kind: PlainKind::Single { modality },
                ..
            }) => Some(*modality),
            ModelArch::Plain(_) => None,
        }
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        match self {
            ModelArch::Branch(b) => [b.branch.decls(), b.head.decls()].concat(),
            ModelArch::Plain(p) => {
                let mut d: Vec<ParamDecl> = p.encoders.iter().flat_map(Encoder::decls).collect();
                d.extend(p.head.decls());
                d
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: ModelArch,
    pub params: ParamStore,
}

impl Model {
    pub fn init(arch: ModelArch, seed: u64) -> Self {
        let params = ParamStore::initialize(&arch.decls(), seed);
        Self { arch, params }
    }

    /// Builds the logits node. `x` holds the graph inputs per modality; a
    /// single-input model only reads its own slot.
    pub fn forward(&self, g: &mut Graph, x: [Option<Var>; 2]) -> Result<Var> {
        let need = |m: usize| {
            x[m].ok_or_else(|| Error::Config(format!("model needs a modality-{} input", m + 1)))
        };
        match &self.arch {
            ModelArch::Branch(b) => {
                let triple = b.branch.forward(g, need(b.modality)?)?;
                task_logits(g, &b.head, &triple, b.representation)
            }
            ModelArch::Plain(p) => match p.kind {
                PlainKind::Single { modality } => {
                    let f = p.encoders[0].forward(g, need(modality)?)?;
                    p.head.forward(g, f)
                }
                PlainKind::Fusion => {
                    let f1 = p.encoders[0].forward(g, need(0)?)?;
                    let f2 = p.encoders[1].forward(g, need(1)?)?;
                    let f = g.add(f1, f2)?;
                    p.head.forward(g, f)
                }
            },
        }
    }

    /// Logits of a single-input model on a raw observation batch.
    pub fn logits_on(&self, x: &Tensor) -> Result<Tensor> {
        let m = self
            .arch
            .modality()
            .ok_or_else(|| Error::Config("a fusion model needs both modalities".into()))?;
        let mut g = Graph::new(&self.params);
        let v = g.input(x.clone());
        let mut slots = [None, None];
        slots[m] = Some(v);
        let out = self.forward(&mut g, slots)?;
        Ok(g.value(out).clone())
    }
}

impl Classifier for Model {
    fn n_classes(&self) -> usize {
        self.arch.n_classes()
    }

    fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let slots = match self.arch.modality() {
            Some(m) => {
                let mut s = [None, None];
                s[m] = Some(g.input(batch.x[m].clone()));
                s
            }
            None => [
                Some(g.input(batch.x[0].clone())),
                Some(g.input(batch.x[1].clone())),
            ],
        };
        let out = self.forward(&mut g, slots)?;
        Ok(g.value(out).clone())
    }
}
