//! The patch encoder: 16×16×3 patch → unit-norm 128-vector.
//!
//! The network family is a stack of same-padded convolutions, GoogLeNet-style
//! inception blocks, non-overlapping max pools and fully connected layers,
//! followed by division by the Euclidean norm. Inputs are shifted by −0.5
//! before the first layer. Everything runs on the CPU over a channel-major
//! (C, N, H, W) batch layout so that every convolution is one GEMM.

mod network;
mod params;
mod real;

use std::fmt;

pub use network::{
    backward, backward_cached, forward, forward_cached, Embeddings, ForwardCache, NORM_GUARD,
};
pub use params::{init_parameters, Gradients, ParamBlock, ParameterSet};
pub use real::Real;

use crate::error::{Error, Result};
use crate::{CHANNELS, EMBEDDING_DIM, PATCH_SIZE};

/// Branch widths of one inception block. Output channels are the sum of
/// `b1`, `b3`, `b5` and `pool_proj`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InceptionSpec {
    pub b1: usize,
    pub b3_reduce: usize,
    pub b3: usize,
    pub b5_reduce: usize,
    pub b5: usize,
    pub pool_proj: usize,
}

impl InceptionSpec {
    pub fn out_channels(&self) -> usize {
        self.b1 + self.b3 + self.b5 + self.pool_proj
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Same-padded, stride-1 convolution with an odd kernel.
    Conv {
        out: usize,
        kernel: usize,
        relu: bool,
    },
    Inception(InceptionSpec),
    /// Non-overlapping max pool; `size` must divide the spatial extent.
    MaxPool {
        size: usize,
    },
    /// Fully connected; the first one flattens the spatial volume.
    Dense {
        out: usize,
        relu: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub embedding_dim: usize,
    pub normalize_output: bool,
    pub layers: Vec<LayerSpec>,
}

impl Default for ArchitectureConfig {
    /// conv3×3/32 → inception(64) → pool → inception(96) → pool →
    /// fc 256 → fc 128 → L2 normalize.
    fn default() -> Self {
        Self::with_layers(vec![
            LayerSpec::Conv {
                out: 32,
                kernel: 3,
                relu: true,
            },
            LayerSpec::Inception(InceptionSpec {
                b1: 16,
                b3_reduce: 16,
                b3: 24,
                b5_reduce: 8,
                b5: 12,
                pool_proj: 12,
            }),
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Inception(InceptionSpec {
                b1: 24,
                b3_reduce: 24,
                b3: 36,
                b5_reduce: 12,
                b5: 18,
                pool_proj: 18,
            }),
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Dense {
                out: 256,
                relu: true,
            },
            LayerSpec::Dense {
                out: EMBEDDING_DIM,
                relu: false,
            },
        ])
    }
}

impl ArchitectureConfig {
    pub fn with_layers(layers: Vec<LayerSpec>) -> Self {
        Self {
            input_size: PATCH_SIZE,
            input_channels: CHANNELS,
            embedding_dim: EMBEDDING_DIM,
            normalize_output: true,
            layers,
        }
    }

    /// A member of the same family with fewer than 500 parameters, used for
    /// finite-difference checks and fast tests.
    pub fn tiny() -> Self {
        Self::with_layers(vec![
            LayerSpec::Conv {
                out: 2,
                kernel: 3,
                relu: true,
            },
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Inception(InceptionSpec {
                b1: 1,
                b3_reduce: 1,
                b3: 1,
                b5_reduce: 1,
                b5: 1,
                pool_proj: 1,
            }),
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Dense { out: 2, relu: true },
            LayerSpec::Dense {
                out: EMBEDDING_DIM,
                relu: false,
            },
        ])
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    /// Checks the invariants and returns the shapes of every parameter block.
    pub fn validate(&self) -> Result<()> {
        network::plan(self).map(|_| ())
    }

    pub fn parameter_count(&self) -> Result<usize> {
        let (_, blocks) = network::plan(self)?;
        Ok(blocks
            .iter()
            .map(|b| b.shape.iter().product::<usize>())
            .sum())
    }

    /// Canonical `key=value` text, one entry per line.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Architecture(msg);
        let mut input_size = None;
        let mut input_channels = None;
        let mut embedding_dim = None;
        let mut normalize_output = None;
        let mut layer_count = None;
        let mut layers: Vec<Option<LayerSpec>> = Vec::new();

        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got `{line}`")))?;
            let parse_usize = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| bad(format!("`{key}` expects an integer, got `{v}`")))
            };
            match key.trim() {
                "input_size" => input_size = Some(parse_usize(value)?),
                "input_channels" => input_channels = Some(parse_usize(value)?),
                "embedding_dim" => embedding_dim = Some(parse_usize(value)?),
                "normalize_output" => {
                    normalize_output = Some(parse_bool(value).ok_or_else(|| {
                        bad(format!("normalize_output expects a boolean, got `{value}`"))
                    })?)
                }
                "layers" => {
                    let n = parse_usize(value)?;
                    layer_count = Some(n);
                    layers.resize(n.max(layers.len()), None);
                }
                k if k.starts_with("layer.") => {
                    let idx = parse_usize(&k["layer.".len()..])?;
                    if idx >= layers.len() {
                        layers.resize(idx + 1, None);
                    }
                    layers[idx] = Some(parse_layer(value)?);
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }

        let layer_count = layer_count.ok_or_else(|| bad("missing `layers`".into()))?;
        if layers.len() != layer_count {
            return Err(bad(format!(
                "`layers={layer_count}` but entries up to layer.{} present",
                layers.len() - 1
            )));
        }
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| bad(format!("missing layer.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let config = Self {
            input_size: input_size.ok_or_else(|| bad("missing `input_size`".into()))?,
            input_channels: input_channels.ok_or_else(|| bad("missing `input_channels`".into()))?,
            embedding_dim: embedding_dim.ok_or_else(|| bad("missing `embedding_dim`".into()))?,
            normalize_output: normalize_output
                .ok_or_else(|| bad("missing `normalize_output`".into()))?,
            layers,
        };
        config.validate()?;
        Ok(config)
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn parse_layer(value: &str) -> Result<LayerSpec> {
    let bad = |msg: String| Error::Architecture(msg);
    let mut parts = value.split_whitespace();
    let kind = parts
        .next()
        .ok_or_else(|| bad("empty layer specification".into()))?;
    let mut fields = std::collections::BTreeMap::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| bad(format!("layer field `{p}` is not key=value")))?;
        fields.insert(k, v);
    }
    let num = |name: &str| -> Result<usize> {
        fields
            .get(name)
            .ok_or_else(|| bad(format!("{kind} layer missing `{name}`")))?
            .parse()
            .map_err(|_| bad(format!("{kind} layer field `{name}` is not an integer")))
    };
    let flag = |name: &str| -> Result<bool> {
        let v = fields
            .get(name)
            .ok_or_else(|| bad(format!("{kind} layer missing `{name}`")))?;
        parse_bool(v).ok_or_else(|| bad(format!("{kind} layer field `{name}` is not a boolean")))
    };
    Ok(match kind {
        "conv" => LayerSpec::Conv {
            out: num("out")?,
            kernel: num("kernel")?,
            relu: flag("relu")?,
        },
        "inception" => LayerSpec::Inception(InceptionSpec {
            b1: num("b1")?,
            b3_reduce: num("b3_reduce")?,
            b3: num("b3")?,
            b5_reduce: num("b5_reduce")?,
            b5: num("b5")?,
            pool_proj: num("pool_proj")?,
        }),
        "maxpool" => LayerSpec::MaxPool { size: num("size")? },
        "dense" => LayerSpec::Dense {
            out: num("out")?,
            relu: flag("relu")?,
        },
        other => return Err(bad(format!("unknown layer kind `{other}`"))),
    })
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { out, kernel, relu } => {
                write!(f, "conv out={out} kernel={kernel} relu={relu}")
            }
            LayerSpec::Inception(s) => write!(
                f,
                "inception b1={} b3_reduce={} b3={} b5_reduce={} b5={} pool_proj={}",
                s.b1, s.b3_reduce, s.b3, s.b5_reduce, s.b5, s.pool_proj
            ),
            LayerSpec::MaxPool { size } => write!(f, "maxpool size={size}"),
            LayerSpec::Dense { out, relu } => write!(f, "dense out={out} relu={relu}"),
        }
    }
}

impl fmt::Display for ArchitectureConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input_size={}", self.input_size)?;
        writeln!(f, "input_channels={}", self.input_channels)?;
        writeln!(f, "embedding_dim={}", self.embedding_dim)?;
        writeln!(f, "normalize_output={}", self.normalize_output)?;
        writeln!(f, "layers={}", self.layers.len())?;
        for (i, layer) in self.layers.iter().enumerate() {
            writeln!(f, "layer.{i}={layer}")?;
        }
        Ok(())
    }
}
