use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamDecl};
use crate::tape::{Conv2dGeom, Graph, Var};

/// One affine map `x · Wᵀ + b`. Every classifier head is a single `Linear`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub name: String,
    pub in_width: usize,
    pub out_width: usize,
}

pub type ClassifierHead = Linear;

impl Linear {
    pub fn new(name: impl Into<String>, in_width: usize, out_width: usize) -> Self {
        Self {
            name: name.into(),
            in_width,
            out_width,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        let init = Init::Uniform {
            fan_in: self.in_width,
        };
        vec![
            ParamDecl::new(self.weight_name(), vec![self.out_width, self.in_width], init),
            ParamDecl::new(self.bias_name(), vec![self.out_width], init),
        ]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.in_width {
            return Err(Error::dim(format!(
                "`{}` expects [B, {}] input, got {:?}",
                self.name, self.in_width, shape
            )));
        }
        let w = g.param(&self.weight_name())?;
        let b = g.param(&self.bias_name())?;
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Start from a zero weight (used on the last conv of residual blocks).
    pub zero_init: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad: kernel / 2,
            zero_init: false,
        }
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        let w_init = if self.zero_init {
            Init::Zeros
        } else {
            Init::Uniform { fan_in }
        };
        vec![
            ParamDecl::new(
                format!("{}.weight", self.name),
                vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
                w_init,
            ),
            ParamDecl::new(
                format!("{}.bias", self.name),
                vec![self.out_channels],
                Init::Uniform { fan_in },
            ),
        ]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.weight", self.name))?;
        let b = g.param(&format!("{}.bias", self.name))?;
        g.conv2d(
            x,
            w,
            b,
            Conv2dGeom {
                stride: self.stride,
                pad: self.pad,
            },
        )
    }
}
