//! Layer specifications and their string grammar.
//!
//! Layers are written the way the network tables spell them:
//! `k(3,3)-c64-s1-p1-d1` for a convolution (kernel, channels, stride,
//! padding, dilation, with an optional trailing `-relu`) and
//! `maxpooling(2,2)` for 2x2/stride-2 max pooling. `Display` and `FromStr`
//! round-trip, and configs serialize layers as these strings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Smooth positive rectifier; used on the density output so the head
    /// cannot saturate into an all-zero dead state.
    Softplus,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        kernel: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
        /// As written in the grammar; `d0` appears in 1x1 rows where
        /// dilation is meaningless and is treated as 1 when applied.
        dilation: usize,
    },
    MaxPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(kernel: usize, out_channels: usize, stride: usize, padding: usize) -> Self {
        Self::conv_dilated(kernel, out_channels, stride, padding, 1)
    }

    pub fn conv_dilated(
        kernel: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        LayerSpec {
            kind: LayerKind::Conv {
                kernel,
                out_channels,
                stride,
                padding,
                dilation,
            },
            activation: Activation::None,
        }
    }

    pub fn maxpool() -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool,
            activation: Activation::None,
        }
    }

    pub fn relu(mut self) -> Self {
        self.activation = Activation::Relu;
        self
    }

    /// Output channel count, or `None` for pooling layers.
    pub fn out_channels(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Conv { out_channels, .. } => Some(out_channels),
            LayerKind::MaxPool => None,
        }
    }

    /// Factor by which this layer shrinks the spatial extents.
    pub fn spatial_divisor(&self) -> usize {
        match self.kind {
            LayerKind::Conv { stride, .. } => stride,
            LayerKind::MaxPool => 2,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LayerKind::Conv {
                kernel,
                out_channels,
                stride,
                padding,
                dilation,
            } => {
                write!(
                    f,
                    "k({},{})-c{}-s{}-p{}-d{}",
                    kernel, kernel, out_channels, stride, padding, dilation
                )?;
                match self.activation {
                    Activation::Relu => write!(f, "-relu")?,
                    Activation::Softplus => write!(f, "-softplus")?,
                    Activation::None => {}
                }
                Ok(())
            }
            LayerKind::MaxPool => write!(f, "maxpooling(2,2)"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "maxpooling(2,2)" {
            return Ok(LayerSpec::maxpool());
        }
        let bad = || CoreError::invalid(format!("unparsable layer spec: {:?}", s));

        let rest = s.strip_prefix("k(").ok_or_else(bad)?;
        let (kk, rest) = rest.split_once(')').ok_or_else(bad)?;
        let (k1, k2) = kk.split_once(',').ok_or_else(bad)?;
        let kernel: usize = k1.trim().parse().map_err(|_| bad())?;
        let kernel2: usize = k2.trim().parse().map_err(|_| bad())?;
        if kernel != kernel2 || kernel == 0 {
            return Err(CoreError::invalid(format!(
                "conv kernels must be square and nonzero, got ({},{})",
                kernel, kernel2
            )));
        }

        let mut out_channels = None;
        let mut stride = None;
        let mut padding = None;
        let mut dilation = None;
        let mut activation = Activation::None;
        for part in rest.split('-').filter(|p| !p.is_empty()) {
            if part == "relu" {
                activation = Activation::Relu;
                continue;
            }
            if part == "softplus" {
                activation = Activation::Softplus;
                continue;
            }
            let (tag, num) = part.split_at(1);
            let value: usize = num.parse().map_err(|_| bad())?;
            match tag {
                "c" => out_channels = Some(value),
                "s" => stride = Some(value),
                "p" => padding = Some(value),
                "d" => dilation = Some(value),
                _ => return Err(bad()),
            }
        }
        let spec = LayerSpec {
            kind: LayerKind::Conv {
                kernel,
                out_channels: out_channels.ok_or_else(bad)?,
                stride: stride.ok_or_else(bad)?,
                padding: padding.ok_or_else(bad)?,
                dilation: dilation.ok_or_else(bad)?,
            },
            activation,
        };
        if let LayerKind::Conv { stride, .. } = spec.kind {
            if stride == 0 {
                return Err(CoreError::invalid("conv stride must be positive".to_string()));
            }
        }
        Ok(spec)
    }
}

impl Serialize for LayerSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LayerSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
