//! Minimal dense reverse-mode automatic differentiation.
//!
//! Values are row-major `f64` matrices ([`Tensor`]). A [`Tape`] records
//! eagerly evaluated operations; parameters live in a flat [`ParamVector`]
//! whose layout is a list of named 2-D segments. Every network in the crate
//! (actor, critic, Q-networks, dynamics model) is an [`MlpSpec`] over one of
//! these vectors, trained with [`adam_step`].

mod adam;
mod mlp;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mlp::{forward, forward_batch, forward_tape, Activation, MlpSpec};
pub use tape::{Gradients, ParamGroup, Tape, Var};
pub use tensor::Tensor;

use crate::error::{ensure, Error, Result};
use std::io::{Read, Write};

/// One named 2-D block of a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Segment { name: name.into(), rows, cols }
    }

    pub fn size(&self) -> usize {
        self.rows * self.cols
    }
}

/// Flat parameter store with a segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
    offsets: Vec<usize>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PGVP";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let total: usize = layout.iter().map(Segment::size).sum();
        ensure!(
            total == values.len(),
            Shape,
            "layout covers {} values but buffer holds {}",
            total,
            values.len()
        );
        ensure!(values.iter().all(|v| v.is_finite()), Numeric, "parameter values must be finite");
        let mut offsets = Vec::with_capacity(layout.len());
        let mut acc = 0;
        for s in &layout {
            offsets.push(acc);
            acc += s.size();
        }
        Ok(ParamVector { values, layout, offsets })
    }

    pub fn zeros(layout: Vec<Segment>) -> Self {
        let n = layout.iter().map(Segment::size).sum();
        Self::new(vec![0.0; n], layout).expect("zero buffer always matches its layout")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn offset(&self, segment: usize) -> usize {
        self.offsets[segment]
    }

    pub fn segment(&self, i: usize) -> &[f64] {
        let o = self.offsets[i];
        &self.values[o..o + self.layout[i].size()]
    }

    pub fn segment_mut(&mut self, i: usize) -> &mut [f64] {
        let o = self.offsets[i];
        let n = self.layout[i].size();
        &mut self.values[o..o + n]
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.layout.iter().position(|s| s.name == name)
    }

    /// Concatenate several vectors, prefixing segment names.
    pub fn concat(parts: &[(&str, &ParamVector)]) -> Self {
        let mut values = Vec::new();
        let mut layout = Vec::new();
        for (prefix, p) in parts {
            values.extend_from_slice(&p.values);
            for s in &p.layout {
                layout.push(Segment::new(format!("{prefix}.{}", s.name), s.rows, s.cols));
            }
        }
        Self::new(values, layout).expect("concatenation of valid vectors is valid")
    }

    /// Extract the segments whose names start with `prefix.`, stripping it.
    pub fn extract(&self, prefix: &str) -> Result<Self> {
        let pre = format!("{prefix}.");
        let mut values = Vec::new();
        let mut layout = Vec::new();
        for (i, s) in self.layout.iter().enumerate() {
            if let Some(rest) = s.name.strip_prefix(&pre) {
                values.extend_from_slice(self.segment(i));
                layout.push(Segment::new(rest, s.rows, s.cols));
            }
        }
        ensure!(!layout.is_empty(), Format, "no segments under prefix {prefix:?}");
        Self::new(values, layout)
    }

    /// Write the versioned little-endian checkpoint.
    ///
    /// ```text
    /// magic    4 bytes  "PGVP"
    /// version  u32      1
    /// nseg     u32
    /// nseg x { name_len u32, name utf-8, rows u32, cols u32 }
    /// nval     u64
    /// nval x f64
    /// ```
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layout.len() as u32).to_le_bytes())?;
        for s in &self.layout {
            w.write_all(&(s.name.len() as u32).to_le_bytes())?;
            w.write_all(s.name.as_bytes())?;
            w.write_all(&(s.rows as u32).to_le_bytes())?;
            w.write_all(&(s.cols as u32).to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        ensure!(&magic == CHECKPOINT_MAGIC, Format, "bad magic {:?}", magic);
        let version = read_u32(r)?;
        ensure!(version == CHECKPOINT_VERSION, Format, "unsupported checkpoint version {version}");
        let nseg = read_u32(r)? as usize;
        let mut layout = Vec::with_capacity(nseg);
        for _ in 0..nseg {
            let n = read_u32(r)? as usize;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            layout.push(Segment::new(name, rows, cols));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        Self::new(values, layout)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Euclidean norm of a flat gradient.
pub fn global_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_must_cover_values() {
        assert!(ParamVector::new(vec![0.0; 5], vec![Segment::new("a", 2, 2)]).is_err());
        assert!(ParamVector::new(vec![f64::NAN], vec![Segment::new("a", 1, 1)]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_header() {
        let p = ParamVector::new(
            vec![1.0, -2.5, 3.25, 0.0, 1e-300],
            vec![Segment::new("w", 2, 2), Segment::new("b", 1, 1)],
        )
        .unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PGVP");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        let q = ParamVector::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);

        buf[4] = 9;
        assert!(matches!(ParamVector::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn concat_and_extract() {
        let a = ParamVector::new(vec![1.0, 2.0], vec![Segment::new("w", 1, 2)]).unwrap();
        let b = ParamVector::new(vec![3.0], vec![Segment::new("w", 1, 1)]).unwrap();
        let c = ParamVector::concat(&[("a", &a), ("b", &b)]);
        assert_eq!(c.extract("b").unwrap(), b);
        assert_eq!(c.extract("a").unwrap(), a);
        assert!(c.extract("z").is_err());
    }
}
