//! Binary checkpoints: little-endian, magic `SPCN`, version 1.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ConvLayer, FcLayer, Layer, Network};
use crate::error::{Error, Result};
use crate::io_util::{read_exact, read_f32s, read_u32, read_u8, write_f32s, write_u32, Tracked};
use crate::network::Arch;
use crate::pruning::PruneMaskSet;
use crate::tensor::{Matrix, Tensor4};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPCN";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_POOL: u8 = 2;
const TAG_FC: u8 = 3;

pub fn write_checkpoint<W: Write>(w: &mut W, net: &Network, mask: Option<&PruneMaskSet>) -> std::io::Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    let desc = net.arch().descriptor();
    write_u32(w, desc.len() as u32)?;
    w.write_all(desc.as_bytes())?;
    for layer in net.layers() {
        match layer {
            Layer::Conv(c) => {
                w.write_all(&[TAG_CONV])?;
                for d in c.kernels.dims() {
                    write_u32(w, d as u32)?;
                }
                write_f32s(w, c.kernels.as_slice())?;
                write_f32s(w, &c.bias)?;
            }
            Layer::Pool => w.write_all(&[TAG_POOL])?,
            Layer::Fc(f) => {
                w.write_all(&[TAG_FC])?;
                write_u32(w, f.weights.rows() as u32)?;
                write_u32(w, f.weights.cols() as u32)?;
                write_f32s(w, f.weights.as_slice())?;
                write_f32s(w, &f.bias)?;
            }
        }
    }
    match mask {
        Some(m) => {
            w.write_all(&[1])?;
            m.write_to(w)
        }
        None => w.write_all(&[0]),
    }
}

pub fn read_checkpoint<R: Read>(reader: R) -> Result<(Network, Option<PruneMaskSet>)> {
    let mut r = Tracked::new(reader);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "checkpoint header")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint".into(),
            expected: u32::from_le_bytes(CHECKPOINT_MAGIC),
            found: u32::from_le_bytes(magic),
        });
    }
    let version = read_u32(&mut r, "checkpoint header")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(version));
    }
    let len = read_u32(&mut r, "arch descriptor")? as usize;
    if len > 1 << 16 {
        return Err(Error::Format { what: "arch descriptor".into(), message: format!("length {len}") });
    }
    let mut buf = vec![0u8; len];
    read_exact(&mut r, &mut buf, "arch descriptor")?;
    let desc = String::from_utf8(buf)
        .map_err(|e| Error::Format { what: "arch descriptor".into(), message: e.to_string() })?;
    let arch = Arch::from_descriptor(&desc)?;
    let mut layers = Vec::new();
    for pos in 1..arch.layers().len() {
        let name = format!("layer {}", arch.layer_name(pos));
        let tag = read_u8(&mut r, &name)?;
        let layer = match tag {
            TAG_CONV => {
                let mut d = [0usize; 4];
                for v in &mut d {
                    *v = read_u32(&mut r, &name)? as usize;
                }
                check_len(&d, &name)?;
                let kernels = read_f32s(&mut r, d.iter().product(), &name)?;
                let bias = read_f32s(&mut r, d[0], &name)?;
                Layer::Conv(ConvLayer { kernels: Tensor4::from_vec(d, kernels)?, bias })
            }
            TAG_POOL => Layer::Pool,
            TAG_FC => {
                let rows = read_u32(&mut r, &name)? as usize;
                let cols = read_u32(&mut r, &name)? as usize;
                check_len(&[rows, cols], &name)?;
                let w = read_f32s(&mut r, rows * cols, &name)?;
                let bias = read_f32s(&mut r, rows, &name)?;
                Layer::Fc(FcLayer { weights: Matrix::from_vec(rows, cols, w)?, bias })
            }
            t => return Err(Error::Format { what: name, message: format!("unknown layer tag {t}") }),
        };
        layers.push(layer);
    }
    let net = Network::from_parts(arch, layers)?;
    let mask = match read_u8(&mut r, "mask section")? {
        0 => None,
        1 => {
            let m = PruneMaskSet::read_tracked(&mut r)?;
            m.validate(net.arch())?;
            Some(m)
        }
        t => return Err(Error::Format { what: "mask section".into(), message: format!("tag {t}") }),
    };
    if !r.at_eof()? {
        return Err(Error::Format { what: "checkpoint".into(), message: "trailing bytes".into() });
    }
    Ok((net, mask))
}

fn check_len(dims: &[usize], name: &str) -> Result<()> {
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    match n {
        Some(n) if n > 0 && n <= 1 << 28 => Ok(()),
        _ => Err(Error::Format { what: name.to_string(), message: format!("dimensions {dims:?}") }),
    }
}

pub fn save_checkpoint(path: &Path, net: &Network, mask: Option<&PruneMaskSet>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, net, mask).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, Option<PruneMaskSet>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
