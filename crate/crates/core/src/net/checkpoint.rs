//! Binary checkpoint format.
//!
//! ```text
//! "AFLW1"
//! u32 n_hidden, u32 hidden_widths[n_hidden]
//! u32 activation (0 = tanh, 1 = silu)
//! u32 cond_dim
//! u32 data_dim
//! f64 params[param_count]
//! ```
//! All integers and floats are little-endian; the parameter count is implied
//! by the header and must match the remaining byte length exactly.

use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, ArchSpec, VelocityModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"AFLW1";

pub fn write_checkpoint<W: Write>(model: &VelocityModel, mut w: W) -> std::io::Result<()> {
    let arch = model.arch();
    let mut buf = Vec::with_capacity(5 + 4 * (4 + arch.hidden_widths.len()) + 8 * model.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(arch.hidden_widths.len() as u32).to_le_bytes());
    for &h in &arch.hidden_widths {
        buf.extend_from_slice(&(h as u32).to_le_bytes());
    }
    buf.extend_from_slice(&arch.activation.code().to_le_bytes());
    buf.extend_from_slice(&(arch.cond_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(arch.data_dim as u32).to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<VelocityModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(5, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes, not an AFLW1 checkpoint".into()));
    }
    let n_hidden = cur.u32("hidden layer count")? as usize;
    if n_hidden > 1024 {
        return Err(Error::Checkpoint(format!("implausible hidden layer count {n_hidden}")));
    }
    let hidden_widths = (0..n_hidden)
        .map(|_| cur.u32("hidden width").map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let act_code = cur.u32("activation")?;
    let activation = Activation::from_code(act_code)
        .ok_or_else(|| Error::Checkpoint(format!("unknown activation code {act_code}")))?;
    let cond_dim = cur.u32("cond_dim")? as usize;
    let data_dim = cur.u32("data_dim")? as usize;
    let arch = ArchSpec::new(data_dim, cond_dim, hidden_widths, activation);
    arch.validate()
        .map_err(|e| Error::Checkpoint(format!("invalid architecture header: {e}")))?;

    let n = arch.param_count();
    let rest = &bytes[cur.pos..];
    if rest.len() != 8 * n {
        return Err(Error::Checkpoint(format!(
            "expected {n} parameters ({} bytes), found {} bytes",
            8 * n,
            rest.len()
        )));
    }
    let params = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    VelocityModel::from_params(arch, params)
}

pub fn save_checkpoint(model: &VelocityModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).expect("writing to a Vec cannot fail");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<VelocityModel> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
