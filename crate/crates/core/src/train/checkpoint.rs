//! DJVC checkpoint container.
//!
//! ```text
//! "DJVC" | u32 version
//! CONF: utf-8 TOML config snapshot
//! STEP: u64 training step
//! PARM: tensor list
//! OPTM: u64 optimizer step | tensor list (first moments) | tensor list (second moments)
//! tensor list: u32 count, then per tensor
//!     u16 name length | name | u8 dtype | u8 ndim | u64 dims… | u64 byte length | data
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::config::Config;
use super::optim::AdamW;
use super::TrainError;
use crate::binio::{write_header, write_section, FormatError, Reader};
use crate::model::{Model, ParamStore};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DJVC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: Config,
    pub step: u64,
    pub params: ParamStore<T>,
    pub optimizer: AdamW<T>,
}

fn write_tensors<'a, T: Scalar>(out: &mut Vec<u8>, items: impl ExactSizeIterator<Item = (&'a String, &'a Tensor<T>)>) {
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    let mut buf = Vec::new();
    for (name, t) in items {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.clear();
        for &x in t.data() {
            x.write_le(&mut buf);
        }
        out.extend_from_slice(&(buf.len() as u64).to_le_bytes());
        out.extend_from_slice(&buf);
    }
}

fn read_tensors<T: Scalar>(r: &mut Reader<'_>) -> Result<BTreeMap<String, Tensor<T>>, FormatError> {
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_offset = r.pos();
        let n = r.u16()?;
        let name = String::from_utf8(r.take(n as u64)?.to_vec()).map_err(|e| FormatError::Invalid {
            offset: name_offset,
            message: format!("tensor name is not utf-8: {e}"),
        })?;
        let dtype_offset = r.pos();
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| FormatError::Invalid {
            offset: dtype_offset,
            message: format!("unknown dtype for {name}"),
        })?;
        let ndim = r.u8()?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len_offset = r.pos();
        let len = r.u64()?;
        let numel: u64 = shape.iter().map(|&d| d as u64).product();
        if len != numel * dtype.size() as u64 {
            return Err(FormatError::SectionLength {
                offset: len_offset,
                section: name,
                expected: numel * dtype.size() as u64,
                got: len,
            });
        }
        let bytes = r.take(len)?;
        let data: Vec<T> = match dtype {
            DType::F32 => bytes.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(shape, data).expect("length checked");
        out.insert(name, t);
    }
    Ok(out)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_header(&mut out, MAGIC, VERSION);
        write_section(&mut out, b"CONF", self.config.to_toml().as_bytes());
        write_section(&mut out, b"STEP", &self.step.to_le_bytes());
        let mut p = Vec::new();
        write_tensors(&mut p, self.params.iter().collect::<Vec<_>>().into_iter());
        write_section(&mut out, b"PARM", &p);
        let mut o = Vec::new();
        o.extend_from_slice(&self.optimizer.step.to_le_bytes());
        write_tensors(&mut o, self.optimizer.m.iter());
        write_tensors(&mut o, self.optimizer.v.iter());
        write_section(&mut out, b"OPTM", &o);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader::new(bytes);
        r.header(MAGIC, VERSION)?;
        let (conf, conf_offset) = r.section(b"CONF", None)?;
        let text = std::str::from_utf8(conf).map_err(|e| FormatError::Invalid {
            offset: conf_offset,
            message: format!("config is not utf-8: {e}"),
        })?;
        let config = Config::from_toml(text)?;
        let step = u64::from_le_bytes(r.section(b"STEP", Some(8))?.0.try_into().unwrap());

        let end = |r: &Reader<'_>, len: u64| r.pos() as u64 + len;
        let len = r.section_header(b"PARM", None)?;
        let stop = end(&r, len);
        let mut params = ParamStore::new();
        for (k, v) in read_tensors::<T>(&mut r)? {
            params.insert(k, v);
        }
        check_consumed(&r, stop, "PARM")?;

        let len = r.section_header(b"OPTM", None)?;
        let stop = end(&r, len);
        let opt_step = r.u64()?;
        let m = read_tensors(&mut r)?;
        let v = read_tensors(&mut r)?;
        check_consumed(&r, stop, "OPTM")?;
        r.finish()?;
        Ok(Self {
            config,
            step,
            params,
            optimizer: AdamW { step: opt_step, m, v },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Model for the stored config with the stored parameters.
    pub fn model(&self) -> Result<Model<T>, TrainError> {
        let mut model = Model::new(self.config.model.clone(), 0)?;
        load_params(&mut model, &self.params)?;
        Ok(model)
    }
}

fn check_consumed(r: &Reader<'_>, stop: u64, section: &str) -> Result<(), FormatError> {
    if r.pos() as u64 != stop {
        return Err(FormatError::SectionLength {
            offset: r.pos(),
            section: section.to_string(),
            expected: stop,
            got: r.pos() as u64,
        });
    }
    Ok(())
}

/// Copy `params` into `model`, requiring identical names and shapes.
pub fn load_params<T: Scalar>(model: &mut Model<T>, params: &ParamStore<T>) -> Result<(), TrainError> {
    for (name, t) in model.params.iter() {
        match params.get(name) {
            None => return Err(TrainError::Param { name: name.clone(), reason: "missing from checkpoint".into() }),
            Some(p) if p.shape() != t.shape() => {
                return Err(TrainError::Param {
                    name: name.clone(),
                    reason: format!("checkpoint shape {:?}, model shape {:?}", p.shape(), t.shape()),
                })
            }
            _ => {}
        }
    }
    if let Some((name, _)) = params.iter().find(|(k, _)| !model.params.contains(k)) {
        return Err(TrainError::Param { name: name.clone(), reason: "not part of the model".into() });
    }
    model.params = params.clone();
    Ok(())
}
