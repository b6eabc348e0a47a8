use super::{seeded_rng, Feature, LayerSpec, Param, Stack};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Encoder–decoder with one skip concatenation per level.
///
/// Each encoder level is conv + relu followed by a 2× max pool; the decoder
/// mirrors it with nearest-neighbour upsampling, a concat of the matching
/// encoder activation, and conv + relu. A final width-1 convolution maps to
/// one channel, which is added to the input and clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerArch {
    pub input_length: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub kernel: usize,
}

impl RefinerArch {
    pub fn new(input_length: usize) -> Self {
        Self {
            input_length,
            base_channels: 8,
            depth: 2,
            kernel: 3,
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut skips = Vec::new();
        let mut channels = 1;
        let mut width = self.base_channels;
        for _ in 0..self.depth {
            layers.push(LayerSpec::conv(channels, width, self.kernel));
            layers.push(LayerSpec::Relu);
            skips.push((layers.len() - 1, width));
            layers.push(LayerSpec::MaxPool1d { width: 2 });
            channels = width;
            width *= 2;
        }
        let bottom = channels;
        layers.push(LayerSpec::conv(channels, bottom, self.kernel));
        layers.push(LayerSpec::Relu);
        channels = bottom;
        for (from, skip_channels) in skips.into_iter().rev() {
            layers.push(LayerSpec::Upsample1d { factor: 2 });
            layers.push(LayerSpec::SkipConcat { from });
            layers.push(LayerSpec::conv(channels + skip_channels, skip_channels, self.kernel));
            layers.push(LayerSpec::Relu);
            channels = skip_channels;
        }
        layers.push(LayerSpec::conv(channels, 1, 1));
        layers
    }
}

/// `R_φ`: maps `[n × d]` patterns to refined `[n × d]` patterns in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerModel {
    input_length: usize,
    stack: Stack,
}

impl RefinerModel {
    /// Seeded He-style init with the final layer zeroed, so a fresh refiner is
    /// the identity on inputs already inside `[0, 1]`.
    pub fn new(arch: &RefinerArch, seed: u64) -> Result<Self> {
        if arch.depth > 0 && arch.input_length % (1 << arch.depth) != 0 {
            return Err(Error::config(format!(
                "refiner input length {} must be divisible by {}",
                arch.input_length,
                1usize << arch.depth
            )));
        }
        let mut model = Self::from_layers(arch.input_length, arch.layers())?;
        model.init_parameters(seed);
        Ok(model)
    }

    pub fn from_layers(input_length: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let input = Feature::Signal {
            channels: 1,
            length: input_length,
        };
        let stack = Stack::new("refiner", layers, input)?;
        if stack.output() != input {
            return Err(Error::config(format!(
                "refiner output {:?} must equal its input {input:?}",
                stack.output()
            )));
        }
        Ok(Self { input_length, stack })
    }

    pub fn init_parameters(&mut self, seed: u64) {
        let mut rng = seeded_rng(seed);
        self.stack.init(&mut rng);
        self.zero_final_layer();
    }

    pub fn zero_final_layer(&mut self) {
        let params = self.stack.params_mut();
        let n = params.len();
        for p in &mut params[n.saturating_sub(2)..] {
            p.value.data_mut().fill(0.0);
        }
    }

    pub fn input_length(&self) -> usize {
        self.input_length
    }

    pub fn stack(&self) -> &Stack {
        &self.stack
    }

    pub fn params(&self) -> &[Param] {
        self.stack.params()
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        self.stack.params_mut()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.stack.bind(tape, trainable)
    }

    pub fn forward_on(&self, tape: &mut Tape, vars: &[Var], batch: Var) -> Result<Var> {
        let shape = tape.shape(batch).to_vec();
        if shape.len() != 2 || shape[1] != self.input_length {
            return Err(Error::shape(
                "forward_refiner",
                format!("batch {shape:?} for input length {}", self.input_length),
            ));
        }
        let x = tape.reshape(batch, vec![shape[0], 1, shape[1]])?;
        let delta = self.stack.forward(tape, x, vars)?;
        let delta = tape.reshape(delta, shape)?;
        let sum = tape.add(batch, delta)?;
        tape.clamp01(sum)
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.rank() == 2 && batch.shape()[0] == 0 && batch.shape()[1] == self.input_length {
            return Ok(batch.clone());
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(batch);
        let y = self.forward_on(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }
}
