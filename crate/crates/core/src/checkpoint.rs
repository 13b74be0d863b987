//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `BIRDCKPT`, `u32` version, `u32` header
//! length and that many bytes of `key=value` lines, `u32` tensor count, then
//! per tensor: `u32` name length, name, `u32` rank, `u64` dims, `f64` data.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::propagation::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BIRDCKPT";
pub const VERSION: u32 = 1;

fn err(field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub n_train: usize,
    pub model: ModelConfig,
    pub ablation: Ablation,
}

impl CheckpointHeader {
    fn to_text(&self) -> String {
        let mut m = self.model.to_map();
        m.insert("n_train".into(), self.n_train.to_string());
        // d and K spelled out alongside the full width table
        m.insert("d".into(), self.model.deform_groups.to_string());
        m.insert("K".into(), self.model.kernel.to_string());
        for (k, v) in [
            ("enable_bp", self.ablation.backward_prop),
            ("enable_fp", self.ablation.forward_prop),
            ("enable_ltmf", self.ablation.ltmf),
            ("enable_gtmf", self.ablation.gtmf),
            ("enable_stf", self.ablation.stf),
        ] {
            m.insert(k.into(), v.to_string());
        }
        m.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn parse(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("header", format!("malformed line `{line}`")))?;
            m.insert(k.to_string(), v.to_string());
        }
        let model = ModelConfig::from_map(&m).map_err(|(f, msg)| err(format!("header.{f}"), msg))?;
        let uint = |k: &str| -> Result<usize> {
            m.get(k)
                .ok_or_else(|| err(format!("header.{k}"), "missing"))?
                .parse()
                .map_err(|_| err(format!("header.{k}"), "not an unsigned integer"))
        };
        let flag = |k: &str| -> Result<bool> {
            m.get(k)
                .ok_or_else(|| err(format!("header.{k}"), "missing"))?
                .parse()
                .map_err(|_| err(format!("header.{k}"), "not true/false"))
        };
        if uint("d")? != model.deform_groups {
            return Err(err("header.d", "disagrees with deform_groups"));
        }
        if uint("K")? != model.kernel {
            return Err(err("header.K", "disagrees with kernel"));
        }
        Ok(CheckpointHeader {
            n_train: uint("n_train")?,
            model,
            ablation: Ablation {
                backward_prop: flag("enable_bp")?,
                forward_prop: flag("enable_fp")?,
                ltmf: flag("enable_ltmf")?,
                gtmf: flag("enable_gtmf")?,
                stf: flag("enable_stf")?,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, n_train: usize) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                n_train,
                model: model.config,
                ablation: model.ablation,
            },
            tensors: model
                .params
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = self.header.to_text();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(err("magic", "not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(err("version", format!("unsupported version {version}, expected {VERSION}")));
        }
        let hlen = r.u32("header.length")? as usize;
        let htext = std::str::from_utf8(r.take(hlen, "header")?).map_err(|_| err("header", "not UTF-8"))?;
        let header = CheckpointHeader::parse(htext)?;
        let count = r.u32("tensor_count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let nlen = r.u32(&format!("tensor[{i}].name"))? as usize;
            let name = std::str::from_utf8(r.take(nlen, &format!("tensor[{i}].name"))?)
                .map_err(|_| err(format!("tensor[{i}].name"), "not UTF-8"))?
                .to_string();
            let rank = r.u32(&format!("{name}.shape"))? as usize;
            let shape = (0..rank)
                .map(|_| r.u64(&format!("{name}.shape")).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8, &format!("{name}.data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| err(format!("{name}.shape"), e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(err("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model the checkpoint was taken from.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.header.model, self.header.ablation, 0)?;
        if self.tensors.len() != model.params.len() {
            return Err(err(
                "tensor_count",
                format!("{} tensors, model expects {}", self.tensors.len(), model.params.len()),
            ));
        }
        for (name, t) in self.tensors {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| err(name.clone(), "no such parameter in the model"))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(err(
                    format!("{name}.shape"),
                    format!("{:?}, model expects {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| err(field, "file truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}
