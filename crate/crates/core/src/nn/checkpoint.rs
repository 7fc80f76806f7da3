//! Binary checkpoint: magic, format version, widths, slots, then raw
//! little-endian parameters layer by layer.

use std::io::{Read, Write};
use std::path::Path;

use super::{DenseLayer, DropoutSlot, ModelSpec, Network};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"DRPATCK\0";
const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("unexpected end of checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.buf.len() * 8)
            .ok_or_else(|| self.err(format!("implausible length {v}")))
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }
}

impl Network {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.parameter_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let put = |out: &mut Vec<u8>, v: u64| out.extend_from_slice(&v.to_le_bytes());
        put(&mut out, self.spec.widths.len() as u64);
        for &w in &self.spec.widths {
            put(&mut out, w as u64);
        }
        put(&mut out, self.spec.dropout.len() as u64);
        for s in &self.spec.dropout {
            put(&mut out, s.after_layer as u64);
            put(&mut out, s.rate.to_bits());
        }
        for layer in &self.layers {
            for &v in layer.weights.data().iter().chain(&layer.bias) {
                put(&mut out, v.to_bits());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                reason: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let nw = r.len()?;
        let widths = (0..nw).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let ns = r.len()?;
        let dropout = (0..ns)
            .map(|_| {
                Ok(DropoutSlot {
                    after_layer: r.len()?,
                    rate: r.f64()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec { widths, dropout };
        spec.validate()?;
        let n = spec.layers();
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let (fi, fo) = (spec.widths[l], spec.widths[l + 1]);
            let w = (0..fi * fo).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let bias = (0..fo).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            layers.push(DenseLayer {
                weights: Matrix::from_vec(fi, fo, w)?,
                bias,
                activation: if l + 1 == n {
                    super::Activation::Identity
                } else {
                    super::Activation::Relu
                },
            });
        }
        if r.pos != buf.len() {
            return Err(r.err("trailing bytes after parameters"));
        }
        Network::from_parts(spec, layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}
