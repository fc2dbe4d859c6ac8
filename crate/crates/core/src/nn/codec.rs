//! Binary container for models and model updates.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   "FIDM" (model) or "FIDU" (update / tensor dump)
//! version    u8        currently 1
//! FIDM:      seed u64
//! FIDU:      client u32, round u32, samples u32
//! input      u32 rank, then rank x u32 dims
//! layers     u32 count, then per layer:
//!              kind u8, activation u8, kind-specific fields (see below)
//! tensors    u32 count, then per tensor:
//!              u32 rank, rank x u32 dims, product(dims) x f64
//! ```
//!
//! Kind fields: Dense `units u32`; Conv2D / ConvTranspose2D `filters, kh, kw,
//! sh, sw` as u32 and `padding u8` (0 valid, 1 same); MaxPool2D `ph, pw u32`;
//! Flatten none; Reshape `rank u32, dims u32`; Dropout `rate f64`;
//! Upsample2D `fh, fw u32`; BatchNorm `momentum f64, epsilon f64`.
//!
//! A model stores its trainable tensors in layer order followed by the
//! batch-norm running statistics. An update stores one delta per trainable
//! tensor in layer order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::layer::{Activation, LayerKind, LayerSpec, Padding};
use super::model::{Model, ParamSet};
use crate::error::{FidelError, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"FIDM";
pub const UPDATE_MAGIC: [u8; 4] = *b"FIDU";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UpdateMeta {
    pub client: u32,
    pub round: u32,
    pub samples: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Header {
    Model { seed: u64 },
    Update(UpdateMeta),
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<Tensor>,
}

pub fn encode<W: Write>(
    w: &mut W,
    header: &Header,
    input_shape: &[usize],
    layers: &[LayerSpec],
    tensors: &[&Tensor],
) -> io::Result<()> {
    match header {
        Header::Model { seed } => {
            w.write_all(&MODEL_MAGIC)?;
            w.write_all(&[VERSION])?;
            w.write_all(&seed.to_le_bytes())?;
        }
        Header::Update(meta) => {
            w.write_all(&UPDATE_MAGIC)?;
            w.write_all(&[VERSION])?;
            put_u32(w, meta.client)?;
            put_u32(w, meta.round)?;
            put_u32(w, meta.samples)?;
        }
    }
    put_dims(w, input_shape)?;
    put_u32(w, layers.len() as u32)?;
    for layer in layers {
        put_layer(w, layer)?;
    }
    put_u32(w, tensors.len() as u32)?;
    for t in tensors {
        put_dims(w, t.shape())?;
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Container, String> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
    let version = r.u8()?;
    if version != VERSION {
        return Err(format!("unsupported container version {version}"));
    }
    let header = match magic {
        MODEL_MAGIC => Header::Model { seed: r.u64()? },
        UPDATE_MAGIC => Header::Update(UpdateMeta {
            client: r.u32()?,
            round: r.u32()?,
            samples: r.u32()?,
        }),
        other => return Err(format!("unknown magic {:?}", String::from_utf8_lossy(&other))),
    };
    let input_shape = r.dims()?;
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count.min(1024));
    for _ in 0..layer_count {
        layers.push(r.layer()?);
    }
    let tensor_count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(tensor_count.min(1024));
    for _ in 0..tensor_count {
        let shape = r.dims()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor too large")?;
        let raw = r.take(len.checked_mul(8).ok_or("tensor too large")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| e.to_string())?);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(Container {
        header,
        input_shape,
        layers,
        tensors,
    })
}

pub fn write_container(
    path: &Path,
    header: &Header,
    input_shape: &[usize],
    layers: &[LayerSpec],
    tensors: &[&Tensor],
) -> Result<()> {
    let mut buf = Vec::new();
    encode(&mut buf, header, input_shape, layers, tensors).expect("writing to memory");
    fs::write(path, buf).map_err(|e| FidelError::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| FidelError::io(path, e))?;
    decode(&bytes).map_err(|reason| FidelError::format(path, reason))
}

pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    let mut tensors: Vec<&Tensor> = model.params().tensors().collect();
    tensors.extend(model.state().iter().flatten());
    let mut buf = Vec::new();
    encode(
        &mut buf,
        &Header::Model { seed: model.seed() },
        model.input_shape(),
        model.layers(),
        &tensors,
    )
    .expect("writing to memory");
    buf
}

pub fn model_from_container(c: Container) -> std::result::Result<Model, String> {
    let Header::Model { seed } = c.header else {
        return Err("not a model container".into());
    };
    let template = Model::new(&c.input_shape, c.layers.clone(), seed).map_err(|e| e.to_string())?;
    let param_counts: Vec<usize> = template.params().layers().iter().map(Vec::len).collect();
    let state_counts: Vec<usize> = template.state().iter().map(Vec::len).collect();
    let expected = param_counts.iter().sum::<usize>() + state_counts.iter().sum::<usize>();
    if c.tensors.len() != expected {
        return Err(format!("expected {expected} tensors, found {}", c.tensors.len()));
    }
    let mut iter = c.tensors.into_iter();
    let params = param_counts
        .iter()
        .map(|&k| iter.by_ref().take(k).collect())
        .collect();
    let state = state_counts.iter().map(|&k| iter.by_ref().take(k).collect()).collect();
    Model::from_parts(&c.input_shape, c.layers, ParamSet::new(params), state, seed).map_err(|e| e.to_string())
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(model)).map_err(|e| FidelError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let c = read_container(path)?;
    model_from_container(c).map_err(|reason| FidelError::format(path, reason))
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_dims<W: Write>(w: &mut W, dims: &[usize]) -> io::Result<()> {
    put_u32(w, dims.len() as u32)?;
    for &d in dims {
        put_u32(w, d as u32)?;
    }
    Ok(())
}

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::None => 0,
        Activation::Relu => 1,
        Activation::Sigmoid => 2,
        Activation::Tanh => 3,
        Activation::Softmax => 4,
    }
}

fn put_layer<W: Write>(w: &mut W, layer: &LayerSpec) -> io::Result<()> {
    let tag: u8 = match layer.kind {
        LayerKind::Dense { .. } => 0,
        LayerKind::Conv2D { .. } => 1,
        LayerKind::ConvTranspose2D { .. } => 2,
        LayerKind::MaxPool2D { .. } => 3,
        LayerKind::Flatten => 4,
        LayerKind::Reshape { .. } => 5,
        LayerKind::Dropout { .. } => 6,
        LayerKind::Upsample2D { .. } => 7,
        LayerKind::BatchNorm { .. } => 8,
    };
    w.write_all(&[tag, activation_tag(layer.activation)])?;
    match &layer.kind {
        LayerKind::Dense { units } => put_u32(w, *units as u32),
        LayerKind::Conv2D {
            filters,
            kernel,
            stride,
            padding,
        }
        | LayerKind::ConvTranspose2D {
            filters,
            kernel,
            stride,
            padding,
        } => {
            for v in [*filters, kernel.0, kernel.1, stride.0, stride.1] {
                put_u32(w, v as u32)?;
            }
            w.write_all(&[match padding {
                Padding::Valid => 0,
                Padding::Same => 1,
            }])
        }
        LayerKind::MaxPool2D { pool: (a, b) } | LayerKind::Upsample2D { factor: (a, b) } => {
            put_u32(w, *a as u32)?;
            put_u32(w, *b as u32)
        }
        LayerKind::Flatten => Ok(()),
        LayerKind::Reshape { target } => put_dims(w, target),
        LayerKind::Dropout { rate } => w.write_all(&rate.to_le_bytes()),
        LayerKind::BatchNorm { momentum, epsilon } => {
            w.write_all(&momentum.to_le_bytes())?;
            w.write_all(&epsilon.to_le_bytes())
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn usize(&mut self) -> std::result::Result<usize, String> {
        Ok(self.u32()? as usize)
    }

    fn dims(&mut self) -> std::result::Result<Vec<usize>, String> {
        let rank = self.usize()?;
        if rank > 16 {
            return Err(format!("implausible rank {rank}"));
        }
        (0..rank).map(|_| self.usize()).collect()
    }

    fn layer(&mut self) -> std::result::Result<LayerSpec, String> {
        let tag = self.u8()?;
        let activation = match self.u8()? {
            0 => Activation::None,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Tanh,
            4 => Activation::Softmax,
            other => return Err(format!("unknown activation tag {other}")),
        };
        let kind = match tag {
            0 => LayerKind::Dense { units: self.usize()? },
            1 | 2 => {
                let filters = self.usize()?;
                let kernel = (self.usize()?, self.usize()?);
                let stride = (self.usize()?, self.usize()?);
                let padding = match self.u8()? {
                    0 => Padding::Valid,
                    1 => Padding::Same,
                    other => return Err(format!("unknown padding tag {other}")),
                };
                if tag == 1 {
                    LayerKind::Conv2D {
                        filters,
                        kernel,
                        stride,
                        padding,
                    }
                } else {
                    LayerKind::ConvTranspose2D {
                        filters,
                        kernel,
                        stride,
                        padding,
                    }
                }
            }
            3 => LayerKind::MaxPool2D {
                pool: (self.usize()?, self.usize()?),
            },
            4 => LayerKind::Flatten,
            5 => LayerKind::Reshape { target: self.dims()? },
            6 => LayerKind::Dropout { rate: self.f64()? },
            7 => LayerKind::Upsample2D {
                factor: (self.usize()?, self.usize()?),
            },
            8 => LayerKind::BatchNorm {
                momentum: self.f64()?,
                epsilon: self.f64()?,
            },
            other => return Err(format!("unknown layer tag {other}")),
        };
        Ok(LayerSpec { kind, activation })
    }
}
