//! `VOLB` files: magic, version byte, dims as three u32, spacing as three
//! f32 (mm), then little-endian f32 voxels in slice-major order.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Volume;
use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 4] = b"VOLB";
const VERSION: u8 = 1;

pub fn write_volume_to(mut w: impl Write, v: &Volume) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u8(VERSION)?;
    for d in v.dims() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for s in v.spacing() {
        w.write_f32::<LittleEndian>(s as f32)?;
    }
    let mut buf = Vec::with_capacity(v.len() * 4);
    for &x in v.data() {
        buf.write_f32::<LittleEndian>(x)?;
    }
    w.write_all(&buf)
}

pub fn read_volume_from(mut r: impl Read) -> Result<Volume> {
    let bad = |m: String| Error::Format(m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| bad(format!("volume header: {e}")))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad volume magic {magic:?}")));
    }
    let version = r.read_u8().map_err(|e| bad(e.to_string()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported volume version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))? as usize;
    }
    let mut spacing = [0f64; 3];
    for s in &mut spacing {
        *s = f64::from(r.read_f32::<LittleEndian>().map_err(|e| bad(e.to_string()))?);
    }
    let n: usize = dims.iter().product();
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|e| bad(format!("volume body ({n} voxels expected): {e}")))?;
    Volume::new(dims, spacing, data).map_err(|e| bad(e.to_string()))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    write_volume_to(&mut w, v).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    read_volume_from(std::io::BufReader::new(file))
}
