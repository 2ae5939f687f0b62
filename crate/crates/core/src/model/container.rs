//! Portable tensor container: `"XCAE"`, version, JSON metadata, then named
//! matrices stored as little-endian `f32`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XCAE";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::format(e.to_string()))?;
        out.write_all(&(meta.len() as u32).to_le_bytes())?;
        out.write_all(&meta)?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            if t.data.len() != t.rows * t.cols {
                return Err(Error::Shape(format!("tensor {} data does not match shape", t.name)));
            }
            out.write_all(&(t.name.len() as u16).to_le_bytes())?;
            out.write_all(t.name.as_bytes())?;
            out.write_all(&(t.rows as u32).to_le_bytes())?;
            out.write_all(&(t.cols as u32).to_le_bytes())?;
            for v in &t.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("bad container magic"));
        }
        let mut b2 = [0u8; 2];
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != VERSION {
            return Err(Error::format(format!("unsupported container version {version}")));
        }
        input.read_exact(&mut b4)?;
        let mut meta = vec![0u8; u32::from_le_bytes(b4) as usize];
        input.read_exact(&mut meta)?;
        let meta = serde_json::from_slice(&meta).map_err(|e| Error::format(e.to_string()))?;
        input.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4);
        let mut tensors = Vec::new();
        for _ in 0..n {
            input.read_exact(&mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not utf-8"))?;
            input.read_exact(&mut b4)?;
            let rows = u32::from_le_bytes(b4) as usize;
            input.read_exact(&mut b4)?;
            let cols = u32::from_le_bytes(b4) as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                input.read_exact(&mut b4)?;
                data.push(f32::from_le_bytes(b4));
            }
            tensors.push(NamedTensor { name, rows, cols, data });
        }
        Ok(Container { meta, tensors })
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").and_then(|k| k.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}
