use super::{seeded_rng, Feature, LayerSpec, Param, Stack};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Shape of the default classifier: conv stages (conv + relu + pool), a hidden
/// dense layer, the embedding layer, and a dense head to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierArch {
    pub input_length: usize,
    pub classes: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub hidden: usize,
    pub embedding_dim: usize,
}

impl ClassifierArch {
    pub fn new(input_length: usize, classes: usize) -> Self {
        Self {
            input_length,
            classes,
            conv_channels: vec![8, 16, 16],
            kernel: 5,
            pool: 2,
            hidden: 64,
            embedding_dim: 32,
        }
    }

    pub fn layers(&self) -> (Vec<LayerSpec>, Vec<LayerSpec>) {
        let mut embed = Vec::new();
        let mut channels = 1;
        let mut length = self.input_length;
        for &out in &self.conv_channels {
            embed.push(LayerSpec::conv(channels, out, self.kernel));
            embed.push(LayerSpec::Relu);
            embed.push(LayerSpec::MaxPool1d { width: self.pool });
            channels = out;
            length /= self.pool;
        }
        embed.push(LayerSpec::dense(channels * length, self.hidden));
        embed.push(LayerSpec::Relu);
        embed.push(LayerSpec::dense(self.hidden, self.embedding_dim));
        let head = vec![LayerSpec::dense(self.embedding_dim, self.classes)];
        (embed, head)
    }
}

/// `C = G ∘ F`: `embed` maps a pattern to its embedding, `head` maps the
/// embedding to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    input_length: usize,
    classes: usize,
    embed: Stack,
    head: Stack,
}

/// Classifier parameters placed on a tape.
pub struct BoundClassifier {
    embed: Vec<Var>,
    head: Vec<Var>,
}

impl BoundClassifier {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.embed.iter().chain(&self.head).copied()
    }
}

impl ClassifierModel {
    pub fn new(arch: &ClassifierArch, seed: u64) -> Result<Self> {
        let (embed, head) = arch.layers();
        let mut model = Self::from_layers(arch.input_length, arch.classes, embed, head)?;
        model.init_parameters(seed);
        Ok(model)
    }

    /// Builds a model with zeroed parameters from explicit layer lists.
    pub fn from_layers(input_length: usize, classes: usize, embed: Vec<LayerSpec>, head: Vec<LayerSpec>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {classes}")));
        }
        let input = match embed.first() {
            Some(LayerSpec::Conv1d { .. }) => Feature::Signal {
                channels: 1,
                length: input_length,
            },
            _ => Feature::Flat(input_length),
        };
        let embed = Stack::new("embed", embed, input)?;
        let Feature::Flat(m) = embed.output() else {
            return Err(Error::config("embedding stack must end in a dense layer"));
        };
        let head = Stack::new("head", head, Feature::Flat(m))?;
        if head.output() != Feature::Flat(classes) {
            return Err(Error::config(format!("head produces {:?}, expected {classes} logits", head.output())));
        }
        Ok(Self {
            input_length,
            classes,
            embed,
            head,
        })
    }

    pub fn init_parameters(&mut self, seed: u64) {
        let mut rng = seeded_rng(seed);
        self.embed.init(&mut rng);
        self.head.init(&mut rng);
    }

    pub fn input_length(&self) -> usize {
        self.input_length
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn embedding_dim(&self) -> usize {
        self.embed.output().size()
    }

    pub fn embed_stack(&self) -> &Stack {
        &self.embed
    }

    pub fn head_stack(&self) -> &Stack {
        &self.head
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.embed.params().iter().chain(self.head.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.embed.params_mut().iter_mut().chain(self.head.params_mut().iter_mut())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundClassifier {
        BoundClassifier {
            embed: self.embed.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
        }
    }

    /// Embeddings `[n × m]` and logits `[n × l]` for a batch `[n × d]` on the tape.
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundClassifier, batch: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(batch).to_vec();
        if shape.len() != 2 || shape[1] != self.input_length {
            return Err(Error::shape(
                "forward_classifier",
                format!("batch {shape:?} for input length {}", self.input_length),
            ));
        }
        let x = match self.embed.input() {
            Feature::Signal { .. } => tape.reshape(batch, vec![shape[0], 1, shape[1]])?,
            Feature::Flat(_) => batch,
        };
        let emb = self.embed.forward(tape, x, &bound.embed)?;
        let logits = self.head.forward(tape, emb, &bound.head)?;
        Ok((emb, logits))
    }

    /// Inference: embeddings and logits as plain tensors.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        if batch.rank() == 2 && batch.shape()[0] == 0 {
            if batch.shape()[1] != self.input_length {
                return Err(Error::shape("forward_classifier", "input length mismatch"));
            }
            return Ok((Tensor::zeros(&[0, self.embedding_dim()]), Tensor::zeros(&[0, self.classes])));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(batch);
        let (e, l) = self.forward_on(&mut tape, &bound, x)?;
        Ok((tape.value(e).clone(), tape.value(l).clone()))
    }

    /// Argmax of the head's softmax for each row.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let (_, logits) = self.forward(batch)?;
        Ok(logits.rows().map(argmax).collect())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ClassifierModel {
        let mut arch = ClassifierArch::new(64, 3);
        arch.conv_channels = vec![4, 4];
        arch.hidden = 8;
        arch.embedding_dim = 6;
        ClassifierModel::new(&arch, 11).unwrap()
    }

    fn batch(rows: usize, d: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn empty_batch_shapes() {
        let m = small();
        let (e, l) = m.forward(&Tensor::zeros(&[0, 64])).unwrap();
        assert_eq!(e.shape(), &[0, 6]);
        assert_eq!(l.shape(), &[0, 3]);
    }

    #[test]
    fn duplicated_rows_and_determinism() {
        let m = small();
        let b = batch(1, 64, 3);
        let twice = Tensor::from_rows(&[b.row(0), b.row(0)], 64).unwrap();
        let (e, l) = m.forward(&twice).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(l.row(0), l.row(1));
        let (e2, l2) = m.forward(&twice).unwrap();
        assert_eq!(e, e2);
        assert_eq!(l, l2);
        // A single row evaluated alone matches its row in a larger batch.
        let many = batch(5, 64, 4);
        let (_, all) = m.forward(&many).unwrap();
        let (_, one) = m.forward(&Tensor::from_rows(&[many.row(2)], 64).unwrap()).unwrap();
        assert_eq!(one.row(0), all.row(2));
    }

    #[test]
    fn rejects_wrong_length() {
        let m = small();
        assert!(m.forward(&batch(2, 63, 1)).is_err());
    }

    #[test]
    fn default_arch_dimensions() {
        let m = ClassifierModel::new(&ClassifierArch::new(256, 7), 0).unwrap();
        assert_eq!(m.embedding_dim(), 32);
        assert_eq!(m.classes(), 7);
        assert!(ClassifierModel::new(&ClassifierArch::new(256, 1), 0).is_err());
    }
}
