use std::io::{Read, Write};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Handle to one tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of 2-D parameter tensors. Biases and scalars
/// are stored as `1 x n` and `1 x 1` matrices. Gradients and optimizer
/// moments use the same layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

const MAGIC: &[u8; 8] = b"DSPARAMS";
const ARCHIVE_VERSION: u32 = 1;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter `{name}`");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: (usize, usize)) -> Result<ParamId> {
        let id = self.id(name).ok_or_else(|| Error::format("checkpoint", format!("missing parameter `{name}`")))?;
        let found = self.values[id.0].dim();
        if found != shape {
            return Err(Error::format(
                "checkpoint",
                format!("parameter `{name}` has shape {found:?}, expected {shape:?}"),
            ));
        }
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.values.iter_mut()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Array2::zeros(v.dim())).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for v in &mut self.values {
            v.fill(0.0);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().flat_map(|v| v.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// New set holding only the tensors whose names satisfy `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        let mut out = Self::new();
        for (name, value) in self.iter() {
            if keep(name) {
                out.add(name, value.clone());
            }
        }
        out
    }

    /// Flat little-endian archive: magic, version, count, then per tensor
    /// name length, name, rows, cols and row-major `f64` data.
    pub fn write_archive(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        out.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, value) in self.iter() {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            let (r, c) = value.dim();
            out.write_all(&(r as u32).to_le_bytes())?;
            out.write_all(&(c as u32).to_le_bytes())?;
            for x in value.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.num_scalars());
        self.write_archive(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_archive(input: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::format("parameter archive", m);
        let io = |e: std::io::Error| Error::format("parameter archive", e);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 4];
        let mut read_u32 = |input: &mut dyn Read| -> Result<u32> {
            input.read_exact(&mut word).map_err(io)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = read_u32(input)?;
        if version != ARCHIVE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = read_u32(input)?;
        let mut out = Self::new();
        for _ in 0..count {
            let name_len = read_u32(input)? as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| bad("non-UTF-8 name"))?;
            let rows = read_u32(input)? as usize;
            let cols = read_u32(input)? as usize;
            let mut data = vec![0u8; rows * cols * 8];
            input.read_exact(&mut data).map_err(io)?;
            let values: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Array2::from_shape_vec((rows, cols), values).map_err(|e| bad(&e.to_string()))?;
            if out.id(&name).is_some() {
                return Err(bad(&format!("duplicate tensor `{name}`")));
            }
            out.add(name, value);
        }
        Ok(out)
    }
}
