//! Encoder backbones: a two-layer MLP, a small three-block CNN and a
//! ResNet-18-shaped residual network (no pretrained weights, no batch norm).

use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Linear};
use crate::error::{Error, Result};
use crate::params::ParamDecl;
use crate::tape::{Conv2dGeom, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Mlp,
    SmallCnn,
    Resnet18Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Hidden width of the MLP.
    pub hidden_width: usize,
    /// Channels of the first two small-CNN blocks; the third emits the
    /// encoder output width.
    pub cnn_channels: [usize; 2],
    /// Stem width of the residual network; its output width is 8x this.
    pub resnet_base_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Mlp,
            hidden_width: 64,
            cnn_channels: [16, 32],
            resnet_base_width: 64,
        }
    }
}

/// Shape contract of one encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub backbone: BackboneConfig,
    /// Per-sample input shape, without the batch axis.
    pub input_shape: Vec<usize>,
    pub out_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    downsample: Option<Conv2d>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Layers {
    Mlp {
        fc1: Linear,
        fc2: Linear,
    },
    SmallCnn {
        convs: [Conv2d; 3],
    },
    Resnet {
        stem: Conv2d,
        blocks: Vec<ResBlock>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub prefix: String,
    pub spec: EncoderSpec,
    layers: Layers,
}

impl Encoder {
    pub fn new(prefix: impl Into<String>, spec: EncoderSpec) -> Result<Self> {
        let prefix = prefix.into();
        if spec.out_width == 0 || spec.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "encoder `{prefix}` has an empty input or output"
            )));
        }
        let p = |s: &str| format!("{prefix}.{s}");
        let layers = match spec.backbone.kind {
            BackboneKind::Mlp => {
                let in_w: usize = spec.input_shape.iter().product();
                let h = spec.backbone.hidden_width;
                if h == 0 {
                    return Err(Error::Config("mlp hidden_width must be positive".into()));
                }
                Layers::Mlp {
                    fc1: Linear::new(p("fc1"), in_w, h),
                    fc2: Linear::new(p("fc2"), h, spec.out_width),
                }
            }
            BackboneKind::SmallCnn => {
                let c = image_channels(&spec.input_shape, &prefix)?;
                let [c1, c2] = spec.backbone.cnn_channels;
                if c1 == 0 || c2 == 0 {
                    return Err(Error::Config("cnn_channels must be positive".into()));
                }
                Layers::SmallCnn {
                    convs: [
                        Conv2d::new(p("conv1"), c, c1, 3, 1),
                        Conv2d::new(p("conv2"), c1, c2, 3, 2),
                        Conv2d::new(p("conv3"), c2, spec.out_width, 3, 2),
                    ],
                }
            }
            BackboneKind::Resnet18Shape => {
                let c = image_channels(&spec.input_shape, &prefix)?;
                let w = spec.backbone.resnet_base_width;
                if w == 0 || 8 * w != spec.out_width {
                    return Err(Error::Config(format!(
                        "resnet18_shape with base width {w} emits {} features, but the encoder must emit {}",
                        8 * w,
                        spec.out_width
                    )));
                }
                let stem = Conv2d::new(p("stem"), c, w, 7, 2);
                let mut blocks = Vec::new();
                let mut cin = w;
                for (stage, cout) in [w, 2 * w, 4 * w, 8 * w].into_iter().enumerate() {
                    for b in 0..2 {
                        let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                        let name = |s: &str| p(&format!("layer{}.{b}.{s}", stage + 1));
                        let mut conv2 = Conv2d::new(name("conv2"), cout, cout, 3, 1);
                        conv2.zero_init = true;
                        let downsample = (stride != 1 || cin != cout)
                            .then(|| Conv2d::new(name("downsample"), cin, cout, 1, stride));
                        blocks.push(ResBlock {
                            conv1: Conv2d::new(name("conv1"), cin, cout, 3, stride),
                            conv2,
                            downsample,
                        });
                        cin = cout;
                    }
                }
                Layers::Resnet { stem, blocks }
            }
        };
        Ok(Self {
            prefix,
            spec,
            layers,
        })
    }

    pub fn out_width(&self) -> usize {
        self.spec.out_width
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        match &self.layers {
            Layers::Mlp { fc1, fc2 } => [fc1.decls(), fc2.decls()].concat(),
            Layers::SmallCnn { convs } => convs.iter().flat_map(Conv2d::decls).collect(),
            Layers::Resnet { stem, blocks } => {
                let mut d = stem.decls();
                for b in blocks {
                    d.extend(b.conv1.decls());
                    d.extend(b.conv2.decls());
                    if let Some(ds) = &b.downsample {
                        d.extend(ds.decls());
                    }
                }
                d
            }
        }
    }

    /// Maps `[B, ..input_shape]` to `[B, out_width]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::dim(format!(
                "encoder `{}` expects per-sample shape {:?}, got batch shape {:?}",
                self.prefix, self.spec.input_shape, shape
            )));
        }
        match &self.layers {
            Layers::Mlp { fc1, fc2 } => {
                let flat = g.flatten(x)?;
                let h = fc1.forward(g, flat)?;
                let h = g.relu(h);
                fc2.forward(g, h)
            }
            Layers::SmallCnn { convs } => {
                let mut h = x;
                for conv in convs {
                    h = conv.forward(g, h)?;
                    h = g.relu(h);
                }
                g.global_avg_pool(h)
            }
            Layers::Resnet { stem, blocks } => {
                let h = stem.forward(g, x)?;
                let h = g.relu(h);
                let mut h = g.max_pool2d(h, 3, Conv2dGeom { stride: 2, pad: 1 })?;
                for b in blocks {
                    let t = b.conv1.forward(g, h)?;
                    let t = g.relu(t);
                    let t = b.conv2.forward(g, t)?;
                    let skip = match &b.downsample {
                        Some(ds) => ds.forward(g, h)?,
                        None => h,
                    };
                    let sum = g.add(t, skip)?;
                    h = g.relu(sum);
                }
                g.global_avg_pool(h)
            }
        }
    }
}

fn image_channels(shape: &[usize], prefix: &str) -> Result<usize> {
    match shape {
        [c, _, _] => Ok(*c),
        other => Err(Error::Config(format!(
            "convolutional encoder `{prefix}` needs [C, H, W] inputs, got {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn spec(kind: BackboneKind, input_shape: Vec<usize>, out_width: usize) -> EncoderSpec {
        EncoderSpec {
            backbone: BackboneConfig {
                kind,
                resnet_base_width: 4,
                cnn_channels: [4, 6],
                hidden_width: 8,
            },
            input_shape,
            out_width,
        }
    }

    fn run(enc: &Encoder, x: Tensor) -> Result<Tensor> {
        let params = ParamStore::initialize(&enc.decls(), 0);
        let mut g = Graph::new(&params);
        let xv = g.input(x);
        let out = enc.forward(&mut g, xv)?;
        Ok(g.value(out).clone())
    }

    #[test]
    fn every_backbone_emits_its_out_width() {
        let mlp = Encoder::new("e", spec(BackboneKind::Mlp, vec![1, 4, 4], 6)).unwrap();
        let cnn = Encoder::new("e", spec(BackboneKind::SmallCnn, vec![1, 8, 8], 6)).unwrap();
        let res = Encoder::new("e", spec(BackboneKind::Resnet18Shape, vec![2, 32, 32], 32)).unwrap();
        let x = Tensor::full(&[3, 1, 4, 4], 0.3);
        assert_eq!(run(&mlp, x).unwrap().shape(), &[3, 6]);
        let x = Tensor::full(&[3, 1, 8, 8], 0.3);
        assert_eq!(run(&cnn, x).unwrap().shape(), &[3, 6]);
        let x = Tensor::new(vec![2, 2, 32, 32], (0..4096).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap();
        let out = run(&res, x).unwrap();
        assert_eq!(out.shape(), &[2, 32]);
        assert!(out.all_finite());
    }

    #[test]
    fn resnet_follows_the_resnet18_layer_plan() {
        let res = Encoder::new("r", spec(BackboneKind::Resnet18Shape, vec![3, 32, 32], 32)).unwrap();
        let decls = res.decls();
        let convs = decls.iter().filter(|d| d.name.ends_with(".weight")).count();
        // stem + 8 blocks x 2 convs + 3 downsample projections
        assert_eq!(convs, 1 + 16 + 3);
        assert!(decls.iter().any(|d| d.name == "r.layer4.1.conv2.weight"));
    }

    #[test]
    fn wrong_input_shape_is_a_dimension_error() {
        let mlp = Encoder::new("e", spec(BackboneKind::Mlp, vec![16], 6)).unwrap();
        assert!(matches!(run(&mlp, Tensor::zeros(&[2, 12])), Err(Error::Dimension(_))));
    }

    #[test]
    fn convolutional_encoders_need_images() {
        assert!(Encoder::new("e", spec(BackboneKind::SmallCnn, vec![16], 6)).is_err());
        assert!(Encoder::new("e", spec(BackboneKind::Resnet18Shape, vec![1, 8, 8], 30)).is_err());
    }
}
