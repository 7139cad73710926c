//! Binary checkpoint format for a trained backbone and its decoder bank.
//!
//! Layout, all integers little-endian u64 and all floats little-endian f64:
//!
//! ```text
//! magic    8 bytes  "ICXEXIT1"
//! header   7 u64    d_model, n_layers, n_heads, d_ff, max_features,
//!                   max_classes, seed
//! records  repeated until EOF:
//!          name_len u64, name bytes (UTF-8),
//!          rank u64, dims (rank u64s),
//!          values (product(dims) f64s, row-major)
//! ```
//!
//! Records carry the backbone parameters under their canonical names
//! (`feat.w`, `label.emb`, `layer3.wq`, ...) followed by `dec{i}.hidden.w`,
//! `dec{i}.hidden.b`, `dec{i}.out.w`, `dec{i}.out.b` for each layer's
//! decoder. Loading demands exactly the records the header implies: anything
//! missing, duplicated, unknown, misshapen, or non-finite is rejected.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::{BackboneWeights, ModelConfig};
use crate::decoder::{DecoderBank, DecoderWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ICXEXIT1";

fn checkpoint_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Serializes `backbone` and `bank` to `path`, overwriting any existing file.
/// Identical weights always produce identical bytes.
pub fn save_checkpoint(path: &Path, backbone: &BackboneWeights, bank: &DecoderBank) -> Result<()> {
    let cfg = &backbone.config;
    if bank.n_layers() != cfg.n_layers {
        return Err(Error::Contract(format!(
            "checkpoint needs one decoder per layer: bank has {}, backbone {}",
            bank.n_layers(),
            cfg.n_layers
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    out(MAGIC)?;
    for v in [
        cfg.d_model as u64,
        cfg.n_layers as u64,
        cfg.n_heads as u64,
        cfg.d_ff as u64,
        cfg.max_features as u64,
        cfg.max_classes as u64,
        cfg.seed,
    ] {
        out(&v.to_le_bytes())?;
    }

    let mut records: Vec<(String, &Tensor)> = backbone.named_parameters();
    for dec in bank.decoders() {
        for (suffix, tensor) in dec.parameters() {
            records.push((format!("dec{}.{suffix}", dec.layer_index), tensor));
        }
    }
    for (name, tensor) in records {
        if !tensor.is_finite() {
            return Err(checkpoint_err(
                path,
                format!("refusing to write non-finite values in record {name}"),
            ));
        }
        out(&(name.len() as u64).to_le_bytes())?;
        out(name.as_bytes())?;
        out(&(tensor.rank() as u64).to_le_bytes())?;
        for &dim in tensor.shape() {
            out(&(dim as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            out(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct RecordReader<'a> {
    reader: BufReader<File>,
    path: &'a Path,
}

impl<'a> RecordReader<'a> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.reader
            .read_exact(buf)
            .map_err(|_| checkpoint_err(self.path, format!("truncated while reading {what}")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.exact(&mut buf, what)?;
        Ok(u64::from_le_bytes(buf))
    }

    /// Reads the next u64 or reports a clean end of file; bytes that stop
    /// mid-word are a truncation error.
    fn u64_or_eof(&mut self) -> Result<Option<u64>> {
        let mut buf = [0u8; 8];
        let mut filled = 0;
        while filled < 8 {
            match self.reader.read(&mut buf[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => {
                    return Err(checkpoint_err(
                        self.path,
                        "truncated while reading record name length",
                    ))
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(Error::io(self.path, e)),
            }
        }
        Ok(Some(u64::from_le_bytes(buf)))
    }
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(BackboneWeights, DecoderBank)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = RecordReader {
        reader: BufReader::new(file),
        path,
    };

    let mut magic = [0u8; 8];
    r.exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(checkpoint_err(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(MAGIC)
            ),
        ));
    }
    let header: Vec<u64> = (0..7)
        .map(|_| r.u64("header"))
        .collect::<Result<_>>()?;
    let config = ModelConfig {
        d_model: header[0] as usize,
        n_layers: header[1] as usize,
        n_heads: header[2] as usize,
        d_ff: header[3] as usize,
        max_features: header[4] as usize,
        max_classes: header[5] as usize,
        seed: header[6],
    };
    config
        .validate()
        .map_err(|e| checkpoint_err(path, format!("header describes an invalid model: {e}")))?;

    let mut records: BTreeMap<String, Tensor> = BTreeMap::new();
    loop {
        let name_len = match r.u64_or_eof()? {
            None => break,
            Some(len) => len as usize,
        };
        if name_len == 0 || name_len > 256 {
            return Err(checkpoint_err(
                path,
                format!("implausible record name length {name_len}"),
            ));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.exact(&mut name_bytes, "record name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| checkpoint_err(path, "record name is not UTF-8"))?;
        let rank = r.u64("record rank")? as usize;
        if rank == 0 || rank > 2 {
            return Err(checkpoint_err(
                path,
                format!("record {name} has unsupported rank {rank}"),
            ));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u64("record dims")? as usize;
            if d == 0 || numel.saturating_mul(d) > (1 << 28) {
                return Err(checkpoint_err(
                    path,
                    format!("record {name} has implausible dimensions"),
                ));
            }
            numel *= d;
            dims.push(d);
        }
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.exact(&mut buf, "record values")?;
            let v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(checkpoint_err(
                    path,
                    format!("record {name} holds non-finite value {v}"),
                ));
            }
            data.push(v);
        }
        let tensor = Tensor::new(data, dims)
            .map_err(|e| checkpoint_err(path, format!("record {name}: {e}")))?;
        if records.insert(name.clone(), tensor).is_some() {
            return Err(checkpoint_err(path, format!("duplicate record {name}")));
        }
    }

    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let tensor = records
            .remove(name)
            .ok_or_else(|| checkpoint_err(path, format!("missing record {name}")))?;
        if tensor.shape() != shape {
            return Err(checkpoint_err(
                path,
                format!(
                    "record {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    shape
                ),
            ));
        }
        Ok(tensor)
    };

    let mut backbone = BackboneWeights::init(&config)?;
    backbone.feature_w = take("feat.w", &[config.max_features, config.d_model])?;
    backbone.feature_b = take("feat.b", &[config.d_model])?;
    backbone.label_embedding = take("label.emb", &[config.max_classes + 1, config.d_model])?;
    let d = config.d_model;
    let ff = config.d_ff;
    for i in 0..config.n_layers {
        let n = i + 1;
        let l = &mut backbone.layers[i];
        l.ln1_gain = take(&format!("layer{n}.ln1.g"), &[d])?;
        l.ln1_bias = take(&format!("layer{n}.ln1.b"), &[d])?;
        l.wq = take(&format!("layer{n}.wq"), &[d, d])?;
        l.bq = take(&format!("layer{n}.bq"), &[d])?;
        l.wk = take(&format!("layer{n}.wk"), &[d, d])?;
        l.bk = take(&format!("layer{n}.bk"), &[d])?;
        l.wv = take(&format!("layer{n}.wv"), &[d, d])?;
        l.bv = take(&format!("layer{n}.bv"), &[d])?;
        l.wo = take(&format!("layer{n}.wo"), &[d, d])?;
        l.bo = take(&format!("layer{n}.bo"), &[d])?;
        l.ln2_gain = take(&format!("layer{n}.ln2.g"), &[d])?;
        l.ln2_bias = take(&format!("layer{n}.ln2.b"), &[d])?;
        l.ffn1_w = take(&format!("layer{n}.ffn1.w"), &[d, ff])?;
        l.ffn1_b = take(&format!("layer{n}.ffn1.b"), &[ff])?;
        l.ffn2_w = take(&format!("layer{n}.ffn2.w"), &[ff, d])?;
        l.ffn2_b = take(&format!("layer{n}.ffn2.b"), &[d])?;
    }

    let dh = config.d_hidden();
    let kmax = config.max_classes;
    let mut decoders = Vec::with_capacity(config.n_layers);
    for layer in 1..=config.n_layers {
        decoders.push(DecoderWeights {
            layer_index: layer,
            hidden_w: take(&format!("dec{layer}.hidden.w"), &[d, dh])?,
            hidden_b: take(&format!("dec{layer}.hidden.b"), &[dh])?,
            out_w: take(&format!("dec{layer}.out.w"), &[dh, kmax])?,
            out_b: take(&format!("dec{layer}.out.b"), &[kmax])?,
        });
    }

    if let Some(name) = records.keys().next() {
        return Err(checkpoint_err(path, format!("unexpected record {name}")));
    }
    Ok((backbone, DecoderBank::new(decoders)?))
}
