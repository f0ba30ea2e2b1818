//! Checkpoint file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  b"CDLMCKPT"
//! version   u32      currently 1
//! cfg_len   u64      byte length of the config block
//! config    utf-8    "key = value" lines for every ModelConfig field
//! blobs     repeated until EOF, in canonical parameter order
//!     name_len  u32
//!     name      utf-8
//!     count     u64      element count
//!     data      f32 LE   count elements
//! ```
//!
//! Parameter order is the canonical visit order: backbone (`tok_emb`,
//! `pos_emb`, per-layer attention and MLP tensors, final norm, output
//! projection) followed by the four horizon-head tensors.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Backbone, KHead, ModelConfig, ModelError, Result};

const MAGIC: &[u8; 8] = b"CDLMCKPT";
const VERSION: u32 = 1;

fn config_block(cfg: &ModelConfig) -> String {
    format!(
        "n_layers = {}\nd_model = {}\nn_heads = {}\nd_ff = {}\nvocab_size = {}\nmax_seq_len = {}\nk_max = {}\nkhead_hidden = {}\n",
        cfg.n_layers,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_ff,
        cfg.vocab_size,
        cfg.max_seq_len,
        cfg.k_max,
        cfg.khead_hidden
    )
}

fn parse_config(block: &str) -> Result<ModelConfig> {
    let get = |key: &str| -> Result<usize> {
        block
            .lines()
            .find_map(|line| {
                let (k, v) = line.split_once('=')?;
                (k.trim() == key).then(|| v.trim().parse::<usize>().ok())?
            })
            .ok_or_else(|| ModelError::ConfigMismatch(format!("missing or bad key {key:?}")))
    };
    Ok(ModelConfig {
        n_layers: get("n_layers")?,
        d_model: get("d_model")?,
        n_heads: get("n_heads")?,
        d_ff: get("d_ff")?,
        vocab_size: get("vocab_size")?,
        max_seq_len: get("max_seq_len")?,
        k_max: get("k_max")?,
        khead_hidden: get("khead_hidden")?,
    })
}

pub fn save_checkpoint(path: &Path, backbone: &Backbone<f32>, khead: &KHead<f32>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = config_block(&backbone.cfg);
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;

    let mut io_err: Option<std::io::Error> = None;
    {
        let mut write_blob = |name: String, t: &crate::numerics::Tensor<f32>| {
            if io_err.is_some() {
                return;
            }
            let res = (|| -> std::io::Result<()> {
                let w = &mut w;
                w.write_all(&(name.len() as u32).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&(t.numel() as u64).to_le_bytes())?;
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
                Ok(())
            })();
            if let Err(e) = res {
                io_err = Some(e);
            }
        };
        backbone.visit_params(&mut write_blob);
        khead.visit_params(&mut write_blob);
    }
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| ModelError::Truncated(format!("while reading {what}")))
}

pub fn load_checkpoint(path: &Path) -> Result<(Backbone<f32>, KHead<f32>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut magic, "magic bytes")?;
    if &magic != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut v4 = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut v4, "format version")?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(ModelError::Version { found: version, expected: VERSION });
    }
    let mut v8 = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut v8, "config length")?;
    let cfg_len = u64::from_le_bytes(v8) as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    read_exact_or_truncated(&mut r, &mut cfg_bytes, "config block")?;
    let cfg = parse_config(
        std::str::from_utf8(&cfg_bytes)
            .map_err(|_| ModelError::ConfigMismatch("config block is not utf-8".into()))?,
    )?;
    cfg.validate();

    // Zero-shaped model, then fill blobs in canonical order.
    let (mut backbone, mut khead) = super::init_params::<f32>(&cfg, 0);
    let mut read_blob = |expected_name: String,
                         t: &mut crate::numerics::Tensor<f32>|
     -> Result<()> {
        let mut n4 = [0u8; 4];
        read_exact_or_truncated(&mut r, &mut n4, "blob name length")?;
        let name_len = u32::from_le_bytes(n4) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or_truncated(&mut r, &mut name, "blob name")?;
        let name = String::from_utf8(name)
            .map_err(|_| ModelError::ConfigMismatch("blob name is not utf-8".into()))?;
        if name != expected_name {
            return Err(ModelError::ConfigMismatch(format!(
                "expected blob {expected_name:?}, found {name:?}"
            )));
        }
        let mut c8 = [0u8; 8];
        read_exact_or_truncated(&mut r, &mut c8, "blob length")?;
        let count = u64::from_le_bytes(c8) as usize;
        if count != t.numel() {
            return Err(ModelError::ConfigMismatch(format!(
                "blob {name:?} holds {count} elements but the config implies {}",
                t.numel()
            )));
        }
        let mut bytes = vec![0u8; count * 4];
        read_exact_or_truncated(&mut r, &mut bytes, &format!("blob {name:?} data"))?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        Ok(())
    };

    let mut result: Result<()> = Ok(());
    backbone.visit_params_mut(&mut |name, t| {
        if result.is_ok() {
            result = read_blob(name, t);
        }
    });
    khead.visit_params_mut(&mut |name, t| {
        if result.is_ok() {
            result = read_blob(name, t);
        }
    });
    result?;
    Ok((backbone, khead))
}
