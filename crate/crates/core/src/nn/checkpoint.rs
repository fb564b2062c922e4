//! Model checkpoint serialization.
//!
//! Layout, all little-endian: magic `SVMD`, u32 version, u32 parameter
//! count, then per parameter a u16 name length, the name bytes, a u8
//! rank, `rank` u32 extents, and the f32 values in row-major order. The
//! remainder of the file is an ASCII `key=value` block (LF-separated)
//! describing the model configuration.

use std::io::{self, Read, Write};

use crate::nn::optim::ParamSet;
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::NnError;

const MAGIC: &[u8; 4] = b"SVMD";
const VERSION: u32 = 1;

/// Write parameters and a trailing config block.
pub fn write_checkpoint<F: Scalar>(
    params: &ParamSet<F>,
    config_block: &str,
    w: &mut impl Write,
) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, p) in params.iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(NnError::Checkpoint(format!("parameter name too long: {name}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let shape = p.value.shape();
        if shape.len() > u8::MAX as usize {
            return Err(NnError::Checkpoint("rank exceeds u8".into()));
        }
        w.write_all(&[shape.len() as u8])?;
        for &extent in shape {
            w.write_all(&(extent as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.numel() * 4);
        for &v in p.value.data() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.write_all(config_block.as_bytes())?;
    Ok(())
}

/// A checkpoint read back from disk: named f32 tensors plus the trailing
/// config block.
pub struct Checkpoint {
    pub params: Vec<(String, Tensor<f32>)>,
    pub config_block: String,
}

/// Read a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, NnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("missing SVMD magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len_buf = [0u8; 2];
        r.read_exact(&mut len_buf)?;
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?;
        let mut rank_buf = [0u8; 1];
        r.read_exact(&mut rank_buf)?;
        let mut shape = Vec::with_capacity(rank_buf[0] as usize);
        for _ in 0..rank_buf[0] {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.push((name, Tensor::from_vec(&shape, data)?));
    }
    let mut config_block = String::new();
    r.read_to_string(&mut config_block)
        .map_err(|e: io::Error| NnError::Io(e))?;
    Ok(Checkpoint { params, config_block })
}

/// Copy checkpoint values into an existing parameter set. Names and
/// shapes must match the set exactly.
pub fn load_into<F: Scalar>(ckpt: &Checkpoint, params: &mut ParamSet<F>) -> Result<(), NnError> {
    if ckpt.params.len() != params.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint holds {} parameters, model expects {}",
            ckpt.params.len(),
            params.len()
        )));
    }
    for (slot, (name, tensor)) in ckpt.params.iter().enumerate() {
        if params.name(slot) != name {
            return Err(NnError::Checkpoint(format!(
                "parameter {slot} is {:?} in the checkpoint but {:?} in the model",
                name,
                params.name(slot)
            )));
        }
        let p = params.get_mut(slot);
        if p.value.shape() != tensor.shape() {
            return Err(NnError::Checkpoint(format!(
                "{name}: shape {:?} in checkpoint, {:?} in model",
                tensor.shape(),
                p.value.shape()
            )));
        }
        p.value = tensor.cast();
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, NnError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
