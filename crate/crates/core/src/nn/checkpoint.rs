//! Model checkpoint files.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "PFCK"  u32 version  u8 kind (0 classifier, 1 refiner)
//! u32 len, layer-spec text (UTF-8)
//! u32 tensor count
//! per tensor: u32 len, name; u32 rank; rank × u64 extents; raw f64 values
//! ```
//!
//! Classifier checkpoints carry the prototypes as a tensor named `prototypes`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{ClassifierModel, LayerSpec, RefinerModel};
use crate::error::{Error, Result};
use crate::proto::PrototypeSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const PROTOTYPES: &str = "prototypes";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Classifier,
    Refiner,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub spec: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(match self.kind {
            ModelKind::Classifier => 0,
            ModelKind::Refiner => 1,
        });
        put_str(&mut out, &self.spec);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!(
                "not a checkpoint (magic {:?})",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = get_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let mut kind = [0u8; 1];
        read_exact(&mut r, &mut kind)?;
        let kind = match kind[0] {
            0 => ModelKind::Classifier,
            1 => ModelKind::Refiner,
            k => return Err(Error::format(format!("unknown model kind {k}"))),
        };
        let spec = get_str(&mut r)?;
        let count = get_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let rank = get_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(Error::format(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(get_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let remaining = bytes.len() - r.position() as usize;
            if n.checked_mul(8).is_none_or(|b| b > remaining) {
                return Err(Error::format(format!("tensor `{name}` is truncated")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(get_f64(&mut r)?);
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::format("trailing bytes after last tensor"));
        }
        Ok(Self { kind, spec, tensors })
    }

    fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::format(format!("checkpoint is missing tensor `{name}`")))?;
        Ok(self.tensors.remove(pos).1)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::format("unexpected end of file"))
}

fn get_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut Cursor<&[u8]>) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = get_u32(r)? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(Error::format("string runs past end of file"));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::format("string is not UTF-8"))
}

struct SpecText {
    fields: Vec<(String, String)>,
    sections: Vec<(String, Vec<LayerSpec>)>,
}

impl SpecText {
    fn parse(text: &str) -> Result<Self> {
        let mut fields = Vec::new();
        let mut sections: Vec<(String, Vec<LayerSpec>)> = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                sections.push((name.to_string(), Vec::new()));
            } else if let Some(section) = sections.last_mut() {
                section.1.push(line.parse()?);
            } else {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::format(format!("bad header line `{line}`")))?;
                fields.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        Ok(Self { fields, sections })
    }

    fn field(&self, key: &str) -> Result<usize> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| Error::format(format!("checkpoint header is missing `{key}`")))
    }

    fn section(&self, name: &str) -> Result<Vec<LayerSpec>> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, l)| l.clone())
            .ok_or_else(|| Error::format(format!("checkpoint is missing section [{name}]")))
    }
}

fn fill_params<'a>(ckpt: &mut Checkpoint, params: impl Iterator<Item = &'a mut super::Param>) -> Result<()> {
    for p in params {
        let t = ckpt.take(&p.name)?;
        if t.shape() != p.value.shape() {
            return Err(Error::format(format!(
                "tensor `{}` has shape {:?}, layer expects {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

pub fn classifier_checkpoint(model: &ClassifierModel, protos: &PrototypeSet) -> Checkpoint {
    let spec = format!(
        "input_length={}\nclasses={}\n[embed]\n{}[head]\n{}",
        model.input_length(),
        model.classes(),
        model.embed_stack().spec_lines(),
        model.head_stack().spec_lines()
    );
    let mut tensors: Vec<(String, Tensor)> = model.params().map(|p| (p.name.clone(), bare(&p.value))).collect();
    tensors.push((PROTOTYPES.to_string(), protos.tensor().clone()));
    Checkpoint {
        kind: ModelKind::Classifier,
        spec,
        tensors,
    }
}

pub fn refiner_checkpoint(model: &RefinerModel) -> Checkpoint {
    let spec = format!("input_length={}\n[layers]\n{}", model.input_length(), model.stack().spec_lines());
    Checkpoint {
        kind: ModelKind::Refiner,
        spec,
        tensors: model.params().iter().map(|p| (p.name.clone(), bare(&p.value))).collect(),
    }
}

fn bare(t: &Tensor) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().to_vec())
}

pub fn classifier_from_checkpoint(mut ckpt: Checkpoint) -> Result<(ClassifierModel, PrototypeSet)> {
    if ckpt.kind != ModelKind::Classifier {
        return Err(Error::format("checkpoint holds a refiner, not a classifier"));
    }
    let spec = SpecText::parse(&ckpt.spec)?;
    let mut model = ClassifierModel::from_layers(
        spec.field("input_length")?,
        spec.field("classes")?,
        spec.section("embed")?,
        spec.section("head")?,
    )?;
    fill_params(&mut ckpt, model.params_mut())?;
    let protos = PrototypeSet::new(ckpt.take(PROTOTYPES)?)?;
    if protos.class_count() != model.classes() || protos.dim() != model.embedding_dim() {
        return Err(Error::format("prototype table does not match the classifier"));
    }
    if !ckpt.tensors.is_empty() {
        return Err(Error::format(format!("unexpected tensor `{}`", ckpt.tensors[0].0)));
    }
    Ok((model, protos))
}

pub fn refiner_from_checkpoint(mut ckpt: Checkpoint) -> Result<RefinerModel> {
    if ckpt.kind != ModelKind::Refiner {
        return Err(Error::format("checkpoint holds a classifier, not a refiner"));
    }
    let spec = SpecText::parse(&ckpt.spec)?;
    let mut model = RefinerModel::from_layers(spec.field("input_length")?, spec.section("layers")?)?;
    fill_params(&mut ckpt, model.params_mut().iter_mut())?;
    if !ckpt.tensors.is_empty() {
        return Err(Error::format(format!("unexpected tensor `{}`", ckpt.tensors[0].0)));
    }
    Ok(model)
}

pub fn save_classifier(path: &Path, model: &ClassifierModel, protos: &PrototypeSet) -> Result<()> {
    fs::write(path, classifier_checkpoint(model, protos).to_bytes())?;
    Ok(())
}

pub fn load_classifier(path: &Path) -> Result<(ClassifierModel, PrototypeSet)> {
    classifier_from_checkpoint(read_checkpoint(path)?)
}

pub fn save_refiner(path: &Path, model: &RefinerModel) -> Result<()> {
    fs::write(path, refiner_checkpoint(model).to_bytes())?;
    Ok(())
}

pub fn load_refiner(path: &Path) -> Result<RefinerModel> {
    refiner_from_checkpoint(read_checkpoint(path)?)
}
