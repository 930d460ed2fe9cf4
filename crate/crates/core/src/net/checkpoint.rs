//! Checkpoint container: `"PSCK"`, version u32, JSON header (length-prefixed),
//! then `count` named tensor snapshots in parameter order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchMode, NetConfig, Param, ParserNet};
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::tensor::{read_snapshot, write_snapshot, Element, BILINEAR_CONVENTION};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub mode: ArchMode,
    pub config: NetConfig,
    pub levels: Vec<usize>,
    pub hierarchy: String,
    pub hierarchy_hash: u64,
    pub bilinear: String,
    pub dtype: String,
}

fn dtype_name<T: Element>() -> &'static str {
    match T::DTYPE {
        crate::tensor::DType::F64 => "f64",
        crate::tensor::DType::F32 => "f32",
    }
}

pub fn save_checkpoint<T: Element>(net: &ParserNet<T>, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        mode: net.mode(),
        config: net.config().clone(),
        levels: net.levels().to_vec(),
        hierarchy: net.hierarchy().to_text(),
        hierarchy_hash: net.hierarchy().hash(),
        bilinear: BILINEAR_CONVENTION.to_string(),
        dtype: dtype_name::<T>().to_string(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(net.params().len() as u32).to_le_bytes())?;
        for p in net.params() {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            write_snapshot(&p.tensor, &mut w)?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| match e {
        Error::Stream(io) => Error::io(path, io),
        other => other,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_header<R: Read>(r: &mut R) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
    if header.bilinear != BILINEAR_CONVENTION {
        return Err(Error::Format(format!(
            "checkpoint uses bilinear convention '{}'",
            header.bilinear
        )));
    }
    Ok(header)
}

/// Loads a checkpoint into precision `T` (converting if it was stored in the other one).
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<ParserNet<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let load = |r: &mut BufReader<File>| -> Result<ParserNet<T>> {
        let header = read_header(r)?;
        let hierarchy = LabelHierarchy::from_text(&header.hierarchy)?;
        if hierarchy.hash() != header.hierarchy_hash {
            return Err(Error::HashMismatch {
                left: header.hierarchy_hash,
                right: hierarchy.hash(),
            });
        }
        let count = read_u32(r)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let tensor = read_snapshot::<T, _>(r)?.with_grad();
            params.push(Param { name, tensor });
        }
        ParserNet::from_params(header.mode, header.config, hierarchy, header.levels, params)
    };
    load(&mut r).map_err(|e| match e {
        Error::Stream(io) => Error::io(path, io),
        other => other,
    })
}

/// Header of a checkpoint file without loading its tensors.
pub fn peek_header(path: &Path) -> Result<CheckpointHeader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut BufReader::new(file)).map_err(|e| match e {
        Error::Stream(io) => Error::io(path, io),
        other => other,
    })
}
