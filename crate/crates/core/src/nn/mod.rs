//! Layers and the two networks built from them.
//!
//! A network is a [`Stack`]: an ordered list of [`LayerSpec`]s plus the
//! parameters they own. Signals travel as `[n × channels × length]`; a dense
//! layer flattens whatever it receives to `[n × features]`.

mod checkpoint;
mod classifier;
mod refiner;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    classifier_checkpoint, classifier_from_checkpoint, load_classifier, load_refiner, read_checkpoint,
    refiner_checkpoint, refiner_from_checkpoint, save_classifier, save_refiner, Checkpoint, ModelKind,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub(crate) use classifier::argmax;
pub use classifier::{BoundClassifier, ClassifierArch, ClassifierModel};
pub use refiner::{RefinerArch, RefinerModel};

use crate::error::{Error, Result};
use crate::tensor::{Padding, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Dense {
        inputs: usize,
        units: usize,
    },
    Relu,
    MaxPool1d {
        width: usize,
    },
    Upsample1d {
        factor: usize,
    },
    /// Concatenates, along channels, the output of the earlier layer at index `from`.
    SkipConcat {
        from: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn dense(inputs: usize, units: usize) -> Self {
        LayerSpec::Dense { inputs, units }
    }

    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::Dense { inputs, units } => vec![("weight", vec![inputs, units]), ("bias", vec![units])],
            _ => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv1d { in_channels, kernel, .. } => in_channels * kernel,
            LayerSpec::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let pad = match padding {
                    Padding::Same => "same",
                    Padding::Valid => "valid",
                };
                write!(f, "conv1d in={in_channels} out={out_channels} kernel={kernel} stride={stride} padding={pad}")
            }
            LayerSpec::Dense { inputs, units } => write!(f, "dense in={inputs} units={units}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::MaxPool1d { width } => write!(f, "maxpool1d width={width}"),
            LayerSpec::Upsample1d { factor } => write!(f, "upsample1d factor={factor}"),
            LayerSpec::SkipConcat { from } => write!(f, "skip-concat from={from}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut words = line.split_whitespace();
        let kind = words.next().ok_or_else(|| Error::format("empty layer line"))?;
        let mut fields = std::collections::BTreeMap::new();
        for word in words {
            let (k, v) = word
                .split_once('=')
                .ok_or_else(|| Error::format(format!("layer field `{word}` is not key=value")))?;
            fields.insert(k, v);
        }
        let num = |key: &str| -> Result<usize> {
            let raw = fields
                .get(key)
                .ok_or_else(|| Error::format(format!("`{kind}` layer is missing `{key}`")))?;
            let v: usize = raw
                .parse()
                .map_err(|_| Error::format(format!("`{key}={raw}` is not a count")))?;
            if v == 0 && key != "from" {
                return Err(Error::format(format!("`{key}` must be positive")));
            }
            Ok(v)
        };
        Ok(match kind {
            "conv1d" => LayerSpec::Conv1d {
                in_channels: num("in")?,
                out_channels: num("out")?,
                kernel: num("kernel")?,
                stride: num("stride")?,
                padding: match fields.get("padding").copied() {
                    Some("same") => Padding::Same,
                    Some("valid") => Padding::Valid,
                    other => return Err(Error::format(format!("unknown padding {other:?}"))),
                },
            },
            "dense" => LayerSpec::Dense {
                inputs: num("in")?,
                units: num("units")?,
            },
            "relu" => LayerSpec::Relu,
            "maxpool1d" => LayerSpec::MaxPool1d { width: num("width")? },
            "upsample1d" => LayerSpec::Upsample1d { factor: num("factor")? },
            "skip-concat" => LayerSpec::SkipConcat { from: num("from")? },
            other => return Err(Error::format(format!("unknown layer kind `{other}`"))),
        })
    }
}

/// Activation shape between layers, per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feature {
    Signal { channels: usize, length: usize },
    Flat(usize),
}

impl Feature {
    pub fn size(&self) -> usize {
        match *self {
            Feature::Signal { channels, length } => channels * length,
            Feature::Flat(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered layers and their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    layers: Vec<LayerSpec>,
    params: Vec<Param>,
    input: Feature,
    output: Feature,
}

impl Stack {
    /// Validates the layer list against `input` and allocates zeroed parameters
    /// named `{prefix}.{layer}.{weight|bias}`.
    pub fn new(prefix: &str, layers: Vec<LayerSpec>, input: Feature) -> Result<Self> {
        let output = infer(&layers, input)?;
        let mut params = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            for (kind, shape) in layer.param_shapes() {
                let mut value = Tensor::zeros(&shape);
                value.set_requires_grad(true);
                params.push(Param {
                    name: format!("{prefix}.{i}.{kind}"),
                    value,
                });
            }
        }
        Ok(Self {
            layers,
            params,
            input,
            output,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn input(&self) -> Feature {
        self.input
    }

    pub fn output(&self) -> Feature {
        self.output
    }

    /// Uniform init scaled by fan-in: `±sqrt(6 / fan_in)` when a relu follows
    /// (He), `±sqrt(3 / fan_in)` otherwise; biases zero.
    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        let mut p = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.param_shapes().is_empty() {
                continue;
            }
            let gain = if matches!(self.layers.get(i + 1), Some(LayerSpec::Relu)) { 6.0 } else { 3.0 };
            let bound = (gain / layer.fan_in() as f64).sqrt();
            for v in self.params[p].value.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
            self.params[p + 1].value.data_mut().fill(0.0);
            p += 2;
        }
    }

    /// Puts every parameter on `tape`, tracked or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.leaf(&p.value) } else { tape.constant(&p.value) })
            .collect()
    }

    /// Runs the stack on `x` (`[n × c × len]` or `[n × features]`) with parameters bound in `vars`.
    pub fn forward(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Result<Var> {
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        let mut p = 0;
        for layer in &self.layers {
            cur = match *layer {
                LayerSpec::Conv1d { stride, padding, .. } => {
                    let y = tape.conv1d(cur, vars[p], Some(vars[p + 1]), stride, padding)?;
                    p += 2;
                    y
                }
                LayerSpec::Dense { .. } => {
                    let shape = tape.shape(cur).to_vec();
                    let flat = if shape.len() > 2 {
                        let n = shape[0];
                        tape.reshape(cur, vec![n, shape[1..].iter().product()])?
                    } else {
                        cur
                    };
                    let y = tape.linear(flat, vars[p], vars[p + 1])?;
                    p += 2;
                    y
                }
                LayerSpec::Relu => tape.relu(cur)?,
                LayerSpec::MaxPool1d { width } => tape.maxpool1d(cur, width)?,
                LayerSpec::Upsample1d { factor } => tape.upsample1d(cur, factor)?,
                LayerSpec::SkipConcat { from } => tape.concat_channels(cur, outputs[from])?,
            };
            outputs.push(cur);
        }
        Ok(cur)
    }

    pub(crate) fn spec_lines(&self) -> String {
        self.layers.iter().map(|l| format!("{l}\n")).collect()
    }
}

fn infer(layers: &[LayerSpec], input: Feature) -> Result<Feature> {
    let mut seen: Vec<Feature> = Vec::with_capacity(layers.len());
    let mut cur = input;
    for (i, layer) in layers.iter().enumerate() {
        let bad = |detail: String| Error::config(format!("layer {i} ({layer}): {detail}"));
        cur = match (*layer, cur) {
            (
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                Feature::Signal { channels, length },
            ) => {
                if channels != in_channels {
                    return Err(bad(format!("receives {channels} channels")));
                }
                if stride == 0 {
                    return Err(bad("stride must be positive".into()));
                }
                let padded = length + if padding == Padding::Same { kernel - 1 } else { 0 };
                if kernel == 0 || kernel > padded {
                    return Err(bad(format!("kernel does not fit length {length}")));
                }
                Feature::Signal {
                    channels: out_channels,
                    length: (padded - kernel) / stride + 1,
                }
            }
            (LayerSpec::Dense { inputs, units }, f) => {
                if f.size() != inputs {
                    return Err(bad(format!("receives {} features", f.size())));
                }
                Feature::Flat(units)
            }
            (LayerSpec::Relu, f) => f,
            (LayerSpec::MaxPool1d { width }, Feature::Signal { channels, length }) => {
                if width == 0 || width > length {
                    return Err(bad(format!("width does not fit length {length}")));
                }
                Feature::Signal {
                    channels,
                    length: length / width,
                }
            }
            (LayerSpec::Upsample1d { factor }, Feature::Signal { channels, length }) if factor > 0 => {
                Feature::Signal {
                    channels,
                    length: length * factor,
                }
            }
            (LayerSpec::SkipConcat { from }, Feature::Signal { channels, length }) => match seen.get(from) {
                Some(Feature::Signal {
                    channels: c2,
                    length: l2,
                }) if *l2 == length => Feature::Signal {
                    channels: channels + c2,
                    length,
                },
                _ => return Err(bad(format!("cannot concatenate with layer {from}"))),
            },
            (_, f) => return Err(bad(format!("does not accept {f:?}"))),
        };
        seen.push(cur);
    }
    Ok(cur)
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Free-standing 1-D convolution on a single `[c_in × len]` signal, outside any model.
pub fn conv1d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let w = tape.constant(kernel);
    let y = tape.conv1d(x, w, None, stride, padding)?;
    Ok(tape.value(y).clone())
}
