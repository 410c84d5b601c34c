//! The `TCDW` checkpoint format.
//!
//! Little-endian binary layout:
//!
//! ```text
//! magic        4 bytes  "TCDW"
//! version      u32      currently 1
//! net config   depth u32, base_channels u32, feature_channels u32,
//!              use_batchnorm u8, tau f32
//! epoch        u64
//! flags        adam u8, rng u8
//! param table  count u32, then per tensor:
//!              name_len u32, UTF-8 name, rank u32, dims u32 x rank,
//!              f32 payload
//! stats table  running mean/var as "<layer>.mean" / "<layer>.var"
//!              tensors in the same encoding
//! adam         (if flagged) step u64, m table, v table
//! rng          (if flagged) 32-byte seed, u128 word position
//! ```
//!
//! Tensor payloads are written bit-exactly, so `load(save(state))`
//! reproduces forward outputs bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{ModelState, NetConfig};
use crate::tensor::{RunningStats, Tensor};

pub const MAGIC: [u8; 4] = *b"TCDW";
pub const FORMAT_VERSION: u32 = 1;

/// Optimizer moments captured for exact training resumption.
#[derive(Clone, Debug)]
pub struct AdamSnapshot {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// RNG position captured for exact training resumption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

/// Everything a checkpoint persists.
pub struct Checkpoint {
    pub state: ModelState,
    pub epoch: u64,
    pub adam: Option<AdamSnapshot>,
    pub rng: Option<RngSnapshot>,
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;

    let cfg = ckpt.state.config();
    write_u32(&mut w, cfg.depth as u32)?;
    write_u32(&mut w, cfg.base_channels as u32)?;
    write_u32(&mut w, cfg.feature_channels as u32)?;
    w.write_all(&[u8::from(cfg.use_batchnorm)])?;
    write_f32(&mut w, cfg.tau)?;

    write_u64(&mut w, ckpt.epoch)?;
    w.write_all(&[u8::from(ckpt.adam.is_some()), u8::from(ckpt.rng.is_some())])?;

    // Parameters.
    write_u32(&mut w, ckpt.state.params().len() as u32)?;
    for (name, tensor) in ckpt.state.param_names().iter().zip(ckpt.state.params()) {
        write_tensor_entry(&mut w, name, tensor.shape(), tensor.data())?;
    }

    // Running stats as flat mean/var tensors.
    write_u32(&mut w, 2 * ckpt.state.stats().len() as u32)?;
    for (name, stats) in ckpt.state.stat_names().iter().zip(ckpt.state.stats()) {
        write_tensor_entry(&mut w, &format!("{name}.mean"), &[stats.mean.len()], &stats.mean)?;
        write_tensor_entry(&mut w, &format!("{name}.var"), &[stats.var.len()], &stats.var)?;
    }

    if let Some(adam) = &ckpt.adam {
        write_u64(&mut w, adam.step)?;
        for moments in [&adam.m, &adam.v] {
            write_u32(&mut w, moments.len() as u32)?;
            for (name, data) in ckpt.state.param_names().iter().zip(moments) {
                write_tensor_entry(&mut w, name, &[data.len()], data)?;
            }
        }
    }
    if let Some(rng) = &ckpt.rng {
        w.write_all(&rng.seed)?;
        w.write_all(&rng.word_pos.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a TCDW checkpoint (magic {magic:?})",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }

    let depth = read_u32(&mut r)? as usize;
    let base_channels = read_u32(&mut r)? as usize;
    let feature_channels = read_u32(&mut r)? as usize;
    let use_batchnorm = read_u8(&mut r)? != 0;
    let tau = read_f32(&mut r)?;
    let config = NetConfig {
        depth,
        base_channels,
        feature_channels,
        use_batchnorm,
        tau,
    };

    let epoch = read_u64(&mut r)?;
    let has_adam = read_u8(&mut r)? != 0;
    let has_rng = read_u8(&mut r)? != 0;

    let param_count = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let (name, shape, data) = read_tensor_entry(&mut r)?;
        params.push((name, Tensor::new(shape, data)?));
    }

    let stat_count = read_u32(&mut r)? as usize;
    if stat_count % 2 != 0 {
        return Err(Error::Data(format!(
            "stats table holds {stat_count} entries, expected mean/var pairs"
        )));
    }
    let mut stats = Vec::with_capacity(stat_count / 2);
    for _ in 0..stat_count / 2 {
        let (mean_name, _, mean) = read_tensor_entry(&mut r)?;
        let (var_name, _, var) = read_tensor_entry(&mut r)?;
        let base = mean_name
            .strip_suffix(".mean")
            .ok_or_else(|| Error::Data(format!("stats entry '{mean_name}' lacks .mean suffix")))?;
        if var_name != format!("{base}.var") {
            return Err(Error::Data(format!(
                "stats entry '{var_name}' does not pair with '{mean_name}'"
            )));
        }
        stats.push((base.to_string(), RunningStats { mean, var }));
    }

    let state = ModelState::from_parts(config, params, stats)?;

    let adam = if has_adam {
        let step = read_u64(&mut r)?;
        let mut tables = Vec::with_capacity(2);
        for _ in 0..2 {
            let count = read_u32(&mut r)? as usize;
            if count != state.params().len() {
                return Err(Error::Data(format!(
                    "adam table holds {count} tensors, expected {}",
                    state.params().len()
                )));
            }
            let mut table = Vec::with_capacity(count);
            for (expected, param) in state.param_names().iter().zip(state.params()) {
                let (name, _, data) = read_tensor_entry(&mut r)?;
                if &name != expected {
                    return Err(Error::Data(format!(
                        "adam tensor '{name}' where '{expected}' was expected"
                    )));
                }
                if data.len() != param.numel() {
                    return Err(Error::Data(format!(
                        "adam tensor '{name}' has {} values, expected {}",
                        data.len(),
                        param.numel()
                    )));
                }
                table.push(data);
            }
            tables.push(table);
        }
        let v = tables.pop().unwrap();
        let m = tables.pop().unwrap();
        Some(AdamSnapshot { step, m, v })
    } else {
        None
    };

    let rng = if has_rng {
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let mut pos = [0u8; 16];
        r.read_exact(&mut pos)?;
        Some(RngSnapshot {
            seed,
            word_pos: u128::from_le_bytes(pos),
        })
    } else {
        None
    };

    let mut trailer = [0u8; 1];
    if r.read(&mut trailer)? != 0 {
        return Err(Error::Data("trailing bytes after checkpoint".into()));
    }

    Ok(Checkpoint {
        state,
        epoch,
        adam,
        rng,
    })
}

// ── primitive codecs ────────────────────────────────────────────────

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_tensor_entry<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, shape.len() as u32)?;
    for d in shape {
        write_u32(w, *d as u32)?;
    }
    let mut bytes = Vec::with_capacity(4 * data.len());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

fn read_tensor_entry<R: Read>(r: &mut R) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let name_len = read_u32(r)?;
    if name_len > MAX_NAME_LEN {
        return Err(Error::Data(format!("tensor name length {name_len} is implausible")));
    }
    let mut name_bytes = vec![0u8; name_len as usize];
    r.read_exact(&mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|e| Error::Data(format!("tensor name is not UTF-8: {e}")))?;
    let rank = read_u32(r)?;
    if rank > MAX_RANK {
        return Err(Error::Data(format!("tensor rank {rank} is implausible")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; 4 * numel];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name, shape, data))
}
