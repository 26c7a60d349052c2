use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at the pre-activation `x` (0 at the ReLU kink).
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Dense feed-forward architecture. The last layer's output are the logits;
/// softmax is applied at loss/evaluation time only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<LayerSpec>", into = "Vec<LayerSpec>")]
pub struct ArchSpec {
    layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("architecture needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::param(format!("layer {i} has a zero dimension")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    /// ReLU MLP through the given widths, e.g. `[16, 64, 16]` is one hidden
    /// layer of 64 units with an identity (logit) head.
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::param("mlp needs at least input and output widths"));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| LayerSpec {
                in_dim: widths[i],
                out_dim: widths[i + 1],
                activation: if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.out_dim * l.in_dim + l.out_dim).sum()
    }
}

impl TryFrom<Vec<LayerSpec>> for ArchSpec {
    type Error = Error;

    fn try_from(layers: Vec<LayerSpec>) -> Result<Self> {
        Self::new(layers)
    }
}

impl From<ArchSpec> for Vec<LayerSpec> {
    fn from(a: ArchSpec) -> Self {
        a.layers
    }
}

/// Compact form: widths joined by `x`, e.g. `16x64x16`.
impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let widths = s
            .split('x')
            .map(|w| {
                w.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::param(format!("bad width `{w}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::mlp(&widths)
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.layers[0].in_dim)?;
        for l in &self.layers {
            write!(f, "x{}", l.out_dim)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_must_match() {
        let bad = vec![
            LayerSpec {
                in_dim: 2,
                out_dim: 3,
                activation: Activation::Relu,
            },
            LayerSpec {
                in_dim: 4,
                out_dim: 2,
                activation: Activation::Identity,
            },
        ];
        assert!(ArchSpec::new(bad).is_err());
        assert!(ArchSpec::new(vec![]).is_err());
    }

    #[test]
    fn parse_and_display() {
        let a: ArchSpec = "16x64x16".parse().unwrap();
        assert_eq!(a.num_layers(), 2);
        assert_eq!(a.layers()[0].activation, Activation::Relu);
        assert_eq!(a.layers()[1].activation, Activation::Identity);
        assert_eq!(a.to_string(), "16x64x16");
        assert_eq!(a.num_params(), 16 * 64 + 64 + 64 * 16 + 16);
    }

    #[test]
    fn serde_validates() {
        let json = r#"[{"in_dim":2,"out_dim":3,"activation":"relu"},{"in_dim":5,"out_dim":1,"activation":"identity"}]"#;
        assert!(serde_json::from_str::<ArchSpec>(json).is_err());
    }
}
