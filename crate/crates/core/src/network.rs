//! Network descriptors and shape propagation.
//!
//! A [`NetworkSpec`] is an ordered list of layers applied to an input of a
//! fixed shape. Outputs are logits; likelihood nonlinearities (softmax) live
//! in [`crate::lla`], never inside the network.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamBlock, ParamLayout, ParamRole};

/// One layer of a feed-forward network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    /// Affine map `W x + b` with `W` stored row-major as `[output, input]`.
    Dense { input: usize, output: usize },
    /// 2-D convolution, stride 1, valid padding. Weights are `[out, in, k, k]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    Tanh,
    Flatten,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Dense { input, output } => input * output + output,
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => out_channels * in_channels * kernel * kernel + out_channels,
            Layer::Relu | Layer::Tanh | Layer::Flatten => 0,
        }
    }

    /// Fan-in of a parametrized layer.
    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            Layer::Dense { input, .. } => Some(input),
            Layer::Conv2d {
                in_channels,
                kernel,
                ..
            } => Some(in_channels * kernel * kernel),
            _ => None,
        }
    }

    fn output_shape(&self, index: usize, input: Shape) -> Result<Shape> {
        let loc = || format!("layer {index} ({self})");
        match (*self, input) {
            (Layer::Dense { input: i, output }, Shape::Flat(d)) => {
                if i != d {
                    return Err(shape_err(loc(), format!("expects {i} inputs, got {d}")));
                }
                Ok(Shape::Flat(output))
            }
            (Layer::Dense { .. }, s @ Shape::Image { .. }) => Err(shape_err(
                loc(),
                format!("dense layer applied to image shape {s}; insert flatten"),
            )),
            (
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                },
                Shape::Image {
                    channels,
                    height,
                    width,
                },
            ) => {
                if in_channels != channels {
                    return Err(shape_err(
                        loc(),
                        format!("expects {in_channels} channels, got {channels}"),
                    ));
                }
                if kernel == 0 || kernel > height || kernel > width {
                    return Err(shape_err(
                        loc(),
                        format!("kernel {kernel} does not fit {height}x{width} input"),
                    ));
                }
                Ok(Shape::Image {
                    channels: out_channels,
                    height: height - kernel + 1,
                    width: width - kernel + 1,
                })
            }
            (Layer::Conv2d { .. }, Shape::Flat(d)) => Err(shape_err(
                loc(),
                format!("convolution applied to flat input of size {d}"),
            )),
            (Layer::Relu | Layer::Tanh, s) => Ok(s),
            (Layer::Flatten, s) => Ok(Shape::Flat(s.size())),
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layer::Dense { input, output } => write!(f, "dense {input} {output}"),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => write!(f, "conv2d {in_channels} {out_channels} {kernel}"),
            Layer::Relu => f.write_str("relu"),
            Layer::Tanh => f.write_str("tanh"),
            Layer::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    /// Parses the textual form used in config files, e.g. `dense 2 16`,
    /// `conv2d 1 4 3`, `relu`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::Config("empty layer descriptor".into()))?;
        let nums: Vec<usize> = parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad integer `{p}` in layer `{s}`")))
            })
            .collect::<Result<_>>()?;
        let layer = match (name.to_ascii_lowercase().as_str(), nums.as_slice()) {
            ("dense", &[input, output]) => Layer::Dense { input, output },
            ("conv2d", &[in_channels, out_channels, kernel]) => Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            },
            ("relu", []) => Layer::Relu,
            ("tanh", []) => Layer::Tanh,
            ("flatten", []) => Layer::Flatten,
            _ => return Err(Error::Config(format!("unrecognised layer `{s}`"))),
        };
        Ok(layer)
    }
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Flat(d) => d,
            Shape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    /// `[d]` is flat, `[c, h, w]` is an image.
    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [d] => Ok(Shape::Flat(d)),
            [channels, height, width] => Ok(Shape::Image {
                channels,
                height,
                width,
            }),
            _ => Err(shape_err(
                "input shape",
                format!("expected 1 or 3 dimensions, got {dims:?}"),
            )),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Flat(d) => vec![d],
            Shape::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Flat(d) => write!(f, "[{d}]"),
            Shape::Image {
                channels,
                height,
                width,
            } => write!(f, "[{channels}, {height}, {width}]"),
        }
    }
}

/// A validated feed-forward architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct NetworkSpec {
    layers: Vec<Layer>,
    input_shape: Shape,
    /// Shape entering each layer, plus the final output shape.
    shapes: Vec<Shape>,
    layout: ParamLayout,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
}

impl TryFrom<RawSpec> for NetworkSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        NetworkSpec::new(Shape::from_dims(&raw.input_shape)?, raw.layers)
    }
}

impl From<NetworkSpec> for RawSpec {
    fn from(spec: NetworkSpec) -> Self {
        RawSpec {
            input_shape: spec.input_shape.dims(),
            layers: spec.layers,
        }
    }
}

impl NetworkSpec {
    /// Validates that consecutive layers compose and the output is flat.
    pub fn new(input_shape: Shape, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.size() == 0 {
            return Err(shape_err("input shape", "input has zero size"));
        }
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut current = input_shape;
        shapes.push(current);
        for (index, layer) in layers.iter().enumerate() {
            current = layer.output_shape(index, current)?;
            shapes.push(current);
            let (weight_shape, bias) = match *layer {
                Layer::Dense { input, output } => (vec![output, input], output),
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                } => (vec![out_channels, in_channels, kernel, kernel], out_channels),
                _ => continue,
            };
            let weight_len: usize = weight_shape.iter().product();
            blocks.push(ParamBlock {
                layer: index,
                role: ParamRole::Weight,
                shape: weight_shape,
                offset,
            });
            offset += weight_len;
            blocks.push(ParamBlock {
                layer: index,
                role: ParamRole::Bias,
                shape: vec![bias],
                offset,
            });
            offset += bias;
        }
        match current {
            Shape::Flat(c) if c >= 1 => {}
            Shape::Flat(_) => return Err(shape_err("output", "network has zero outputs")),
            s => {
                return Err(shape_err(
                    "output",
                    format!("network output must be flat, got {s}; add flatten + dense"),
                ))
            }
        }
        Ok(Self {
            layers,
            input_shape,
            shapes,
            layout: ParamLayout::new(blocks)?,
        })
    }

    /// Fully connected network with `activation` between dense layers,
    /// e.g. `mlp(&[2, 16, 16, 2], Layer::Tanh)`.
    pub fn mlp(widths: &[usize], activation: Layer) -> Result<Self> {
        if widths.len() < 2 {
            return Err(shape_err("mlp", "need at least input and output widths"));
        }
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(Layer::Dense {
                input: pair[0],
                output: pair[1],
            });
            if i + 2 < widths.len() {
                layers.push(activation);
            }
        }
        Self::new(Shape::Flat(widths[0]), layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.size()
    }

    /// Number of network outputs `C`.
    pub fn output_dim(&self) -> usize {
        self.shapes.last().map(Shape::size).unwrap_or(0)
    }

    /// Shape entering layer `i`; index `layers().len()` is the output.
    pub fn shape_at(&self, i: usize) -> Shape {
        self.shapes[i]
    }

    pub fn param_count(&self) -> usize {
        self.layout.total()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Same architecture with the final dense layer widened to `outputs`.
    pub fn with_output_dim(&self, outputs: usize) -> Result<Self> {
        let mut layers = self.layers.clone();
        match layers.iter_mut().rev().find(|l| l.param_count() > 0) {
            Some(Layer::Dense { output, .. }) => *output = outputs,
            _ => {
                return Err(shape_err(
                    "output",
                    "last parametrized layer must be dense to widen the output",
                ))
            }
        }
        Self::new(self.input_shape, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_param_count() {
        let spec = NetworkSpec::new(Shape::Flat(2), vec![Layer::Dense { input: 2, output: 3 }])
            .unwrap();
        assert_eq!(spec.param_count(), 9);
        assert_eq!(spec.output_dim(), 3);
    }

    #[test]
    fn conv_shapes_compose() {
        let spec = NetworkSpec::new(
            Shape::Image {
                channels: 1,
                height: 6,
                width: 5,
            },
            vec![
                Layer::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                },
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense {
                    input: 2 * 4 * 3,
                    output: 3,
                },
            ],
        )
        .unwrap();
        assert_eq!(spec.param_count(), 2 * 9 + 2 + 24 * 3 + 3);
        assert_eq!(spec.output_dim(), 3);
    }

    #[test]
    fn mismatch_names_layer() {
        let err = NetworkSpec::new(
            Shape::Flat(2),
            vec![
                Layer::Dense { input: 2, output: 4 },
                Layer::Tanh,
                Layer::Dense { input: 5, output: 1 },
            ],
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 2"), "{msg}");
    }

    #[test]
    fn layer_text_round_trip() {
        for text in ["dense 2 16", "conv2d 1 4 3", "relu", "tanh", "flatten"] {
            let layer: Layer = text.parse().unwrap();
            assert_eq!(layer.to_string(), text);
        }
        assert!("dense 2".parse::<Layer>().is_err());
        assert!("softmax".parse::<Layer>().is_err());
    }

    #[test]
    fn widen_output() {
        let spec = NetworkSpec::mlp(&[2, 16, 16, 2], Layer::Tanh).unwrap();
        let wide = spec.with_output_dim(16).unwrap();
        assert_eq!(wide.output_dim(), 16);
        assert_eq!(wide.layers().len(), spec.layers().len());
    }

    #[test]
    fn serde_round_trip() {
        let spec = NetworkSpec::mlp(&[2, 8, 3], Layer::Relu).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let back: NetworkSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }
}
