//! Binary checkpoint container.
//!
//! ```text
//! "TBSE" | version: u16 | meta_len: u32 | meta: utf-8 key=value text
//! | count: u32 | count x ( name_len: u32 | name | axes: u32 | axes x u32 | f32 data )
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TBSE";
pub const FORMAT_VERSION: u16 = 1;
/// Name prefix under which optimizer state is stored.
pub const ADAM_PREFIX: &str = "adam/";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub arrays: Vec<NamedArray>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| NnError::Format(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| NnError::Format(e.to_string()))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_u32(w, self.meta.len())?;
        w.write_all(self.meta.as_bytes())?;
        write_u32(w, self.arrays.len())?;
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(NnError::Format(format!("{}: shape/data mismatch", a.name)));
            }
            write_u32(w, a.name.len())?;
            w.write_all(a.name.as_bytes())?;
            write_u32(w, a.shape.len())?;
            for &d in &a.shape {
                write_u32(w, d)?;
            }
            for v in &a.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Format(format!("bad magic {magic:?}")));
        }
        let mut ver = [0u8; 2];
        r.read_exact(&mut ver)?;
        let ver = u16::from_le_bytes(ver);
        if ver != FORMAT_VERSION {
            return Err(NnError::Format(format!("unsupported version {ver}")));
        }
        let meta = read_string(r)?;
        let count = read_u32(r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_string(r)?;
            let axes = read_u32(r)? as usize;
            let shape = (0..axes)
                .map(|_| read_u32(r).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn named<T: Scalar>(name: String, t: &Tensor<T>) -> NamedArray {
    NamedArray {
        name,
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Parameters followed by Adam moments and the step counter.
    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out: Vec<NamedArray> = self
            .params
            .iter()
            .map(|p| named(p.name.clone(), &p.value))
            .collect();
        for p in &self.params {
            out.push(named(format!("{ADAM_PREFIX}m/{}", p.name), &p.m));
            out.push(named(format!("{ADAM_PREFIX}v/{}", p.name), &p.v));
        }
        out.push(NamedArray {
            name: format!("{ADAM_PREFIX}step"),
            shape: vec![1],
            data: vec![self.step as f32],
        });
        out
    }

    /// Overwrites every parameter (and the optimizer state, when present)
    /// from `arrays`. Every parameter must be present with its exact shape.
    pub fn load_arrays(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let find = |name: &str| arrays.iter().find(|a| a.name == name);
        let to_tensor = |a: &NamedArray, want: &[usize]| -> Result<Tensor<T>> {
            if a.shape != want {
                return Err(NnError::Format(format!(
                    "{}: stored shape {:?}, expected {want:?}",
                    a.name, a.shape
                )));
            }
            Tensor::from_vec(want, a.data.iter().map(|&v| T::of_f64(v as f64)).collect())
        };
        let mut staged = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let a = find(&p.name)
                .ok_or_else(|| NnError::Format(format!("checkpoint lacks {}", p.name)))?;
            let value = to_tensor(a, p.value.shape())?;
            let m = find(&format!("{ADAM_PREFIX}m/{}", p.name))
                .map(|a| to_tensor(a, p.value.shape()))
                .transpose()?;
            let v = find(&format!("{ADAM_PREFIX}v/{}", p.name))
                .map(|a| to_tensor(a, p.value.shape()))
                .transpose()?;
            staged.push((value, m, v));
        }
        for (i, (value, m, v)) in staged.into_iter().enumerate() {
            let p = &mut self.params[i];
            p.value = value;
            p.m = m.unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            p.v = v.unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            p.grad = None;
        }
        self.step = find(&format!("{ADAM_PREFIX}step"))
            .and_then(|a| a.data.first())
            .map_or(0, |&s| s as u64);
        Ok(())
    }
}
