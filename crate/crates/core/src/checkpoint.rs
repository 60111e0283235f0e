//! Binary model checkpoints.
//!
//! ```text
//! b"BVIBCKPT" | version u32 | tensor count u32
//! per tensor: name length u16 | UTF-8 name | rows u32 | cols u32 | rows*cols f64
//! ```
//!
//! Integers and floats are little-endian; floats are stored bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numerics::{Dense, Matrix};
use crate::vib::{DecoderParams, EncoderParams, ModelParams};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BVIBCKPT";
pub const VERSION: u32 = 1;

const LAYERS: [&str; 5] = [
    "encoder.trunk",
    "encoder.mu_head",
    "encoder.logvar_head",
    "decoder.hidden",
    "decoder.output",
];

fn layers(p: &ModelParams) -> [&Dense; 5] {
    [
        &p.encoder.trunk,
        &p.encoder.mu_head,
        &p.encoder.logvar_head,
        &p.decoder.hidden,
        &p.decoder.output,
    ]
}

fn write_tensor<W: Write>(
    w: &mut W,
    name: &str,
    rows: usize,
    cols: usize,
    data: &[f64],
) -> Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_params<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&((LAYERS.len() * 2) as u32).to_le_bytes())?;
    for (name, layer) in LAYERS.iter().zip(layers(params)) {
        let (rows, cols) = layer.weight.shape();
        write_tensor(
            &mut w,
            &format!("{name}.weight"),
            rows,
            cols,
            layer.weight.as_slice(),
        )?;
        write_tensor(
            &mut w,
            &format!("{name}.bias"),
            1,
            layer.bias.len(),
            &layer.bias,
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Tracks the byte offset so parse errors can point at the failure.
struct Cursor<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Parse {
                    offset: self.offset,
                    message: format!("checkpoint truncated while reading {what}"),
                },
                _ => Error::Io(e),
            })?;
        self.offset += n;
        Ok(buf)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.bytes(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
    }
}

fn read_tensor<R: Read>(c: &mut Cursor<R>, expected: &str) -> Result<Matrix> {
    let at = c.offset;
    let len = c.u16("tensor name length")? as usize;
    let name = String::from_utf8(c.bytes(len, "tensor name")?).map_err(|_| Error::Parse {
        offset: at + 2,
        message: "tensor name is not UTF-8".into(),
    })?;
    if name != expected {
        return Err(Error::Parse {
            offset: at,
            message: format!("expected tensor {expected}, found {name}"),
        });
    }
    let rows = c.u32("tensor rows")? as usize;
    let cols = c.u32("tensor cols")? as usize;
    let raw = c.bytes(rows * cols * 8, "tensor data")?;
    let data = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn read_params<R: Read>(r: R) -> Result<ModelParams> {
    let mut c = Cursor {
        inner: r,
        offset: 0,
    };
    if c.bytes(8, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a checkpoint file".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 8,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = c.u32("tensor count")? as usize;
    if count != LAYERS.len() * 2 {
        return Err(Error::Parse {
            offset: 12,
            message: format!("expected {} tensors, found {count}", LAYERS.len() * 2),
        });
    }
    let mut dense = Vec::with_capacity(LAYERS.len());
    for name in LAYERS {
        let weight = read_tensor(&mut c, &format!("{name}.weight"))?;
        let at = c.offset;
        let bias = read_tensor(&mut c, &format!("{name}.bias"))?;
        if bias.rows() != 1 || bias.cols() != weight.rows() {
            return Err(Error::Parse {
                offset: at,
                message: format!("{name} bias does not match its weight"),
            });
        }
        dense.push(Dense {
            weight,
            bias: bias.into_vec(),
        });
    }
    let mut it = dense.into_iter();
    let mut next = || it.next().expect("one entry per layer");
    let params = ModelParams {
        encoder: EncoderParams {
            trunk: next(),
            mu_head: next(),
            logvar_head: next(),
        },
        decoder: DecoderParams {
            hidden: next(),
            output: next(),
        },
    };
    params.validate()?;
    Ok(params)
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_params(params, BufWriter::new(File::create(path)?))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_params(BufReader::new(File::open(path)?))
}
