//! Binary model container.
//!
//! ```text
//! magic        8 bytes   b"DCMPNET\0"
//! version      u32 LE
//! header_len   u64 LE
//! header       header_len bytes of UTF-8 JSON
//! blocks       f64 LE values, one block after another in header order
//! ```

use super::{validate_layers, BlockInfo, BlockKind, BnStats, LayerSpec, NetworkModel};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 8] = *b"DCMPNET\0";
pub const FORMAT_VERSION: u32 = 1;

const MAX_HEADER: u64 = 64 << 20;

/// A model plus free-form metadata (hyperparameters, seed, data source, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub model: NetworkModel,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    layers: Vec<LayerSpec>,
    blocks: Vec<BlockInfo>,
    #[serde(default)]
    metadata: serde_json::Value,
}

fn all_blocks(model: &NetworkModel) -> (Vec<BlockInfo>, Vec<&[f64]>) {
    let mut infos = model.blocks();
    let mut slices = model.block_slices();
    if let Some(stats) = &model.bn_stats {
        for (layer, s) in stats.iter().enumerate() {
            if let Some(s) = s {
                for (kind, v) in [(BlockKind::BnMean, &s.mean), (BlockKind::BnVar, &s.var)] {
                    infos.push(BlockInfo {
                        layer,
                        kind,
                        len: v.len(),
                    });
                    slices.push(v);
                }
            }
        }
    }
    (infos, slices)
}

pub fn write_model<W: Write>(mut w: W, file: &ModelFile) -> Result<()> {
    let (blocks, slices) = all_blocks(&file.model);
    let header = Header {
        layers: file.model.layers().to_vec(),
        blocks,
        metadata: file.metadata.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for s in slices {
        for v in s {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Counts consumed bytes so parse errors can report an offset.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Parse {
                    offset: self.offset,
                    message: format!("truncated file while reading {what}"),
                }
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }
}

pub fn read_model<R: Read>(r: R) -> Result<ModelFile> {
    let mut c = Cursor {
        inner: r,
        offset: 0,
    };
    let mut magic = [0u8; 8];
    c.read_exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a model file (bad magic)".into(),
        });
    }
    let mut b4 = [0u8; 4];
    c.read_exact(&mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Parse {
            offset: 8,
            message: format!("unsupported format version {version}"),
        });
    }
    let mut b8 = [0u8; 8];
    c.read_exact(&mut b8, "header length")?;
    let hlen = u64::from_le_bytes(b8);
    if hlen > MAX_HEADER {
        return Err(Error::Parse {
            offset: 12,
            message: format!("header length {hlen} exceeds limit"),
        });
    }
    let start = c.offset;
    let mut json = vec![0u8; hlen as usize];
    c.read_exact(&mut json, "header")?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Parse {
        offset: start,
        message: format!("invalid header: {e}"),
    })?;
    validate_layers(&header.layers).map_err(|e| Error::Parse {
        offset: start,
        message: e.to_string(),
    })?;

    let mut model = NetworkModel::from_weights(
        header.layers.clone(),
        header
            .layers
            .iter()
            .map(|s| {
                let (m, n) = s.weight_shape();
                Matrix::zeros(m, n)
            })
            .collect(),
    )?;
    let expected = {
        let mut probe = model.clone();
        probe.bn_stats = bn_skeleton(&header.layers, &header.blocks);
        all_blocks(&probe).0
    };
    if expected != header.blocks {
        return Err(Error::Parse {
            offset: start,
            message: "block table does not match the layer list".into(),
        });
    }

    let mut stats: Vec<Option<BnStats>> = vec![None; header.layers.len()];
    let mut slots = model.block_slices_mut().into_iter();
    for info in &header.blocks {
        let block_start = c.offset;
        let mut values = vec![0.0; info.len];
        for v in values.iter_mut() {
            c.read_exact(&mut b8, "parameter block")?;
            *v = f64::from_le_bytes(b8);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                offset: block_start,
                message: format!(
                    "non-finite value in {:?} block of layer {}",
                    info.kind, info.layer
                ),
            });
        }
        match info.kind {
            BlockKind::BnMean | BlockKind::BnVar => {
                let s = stats[info.layer].get_or_insert_with(|| BnStats {
                    mean: Vec::new(),
                    var: Vec::new(),
                });
                if info.kind == BlockKind::BnMean {
                    s.mean = values;
                } else {
                    s.var = values;
                }
            }
            _ => {
                let slot = slots.next().expect("block table checked");
                slot.copy_from_slice(&values);
            }
        }
    }
    drop(slots);
    let mut extra = [0u8; 1];
    if c.inner.read(&mut extra)? != 0 {
        return Err(Error::Parse {
            offset: c.offset,
            message: "trailing bytes after the last block".into(),
        });
    }
    if stats.iter().any(Option::is_some) {
        model.bn_stats = Some(stats);
    }
    Ok(ModelFile {
        model,
        metadata: header.metadata,
    })
}

/// Placeholder statistics with the block lengths named in the header, so the
/// expected block table can be rebuilt for comparison.
fn bn_skeleton(layers: &[LayerSpec], blocks: &[BlockInfo]) -> Option<Vec<Option<BnStats>>> {
    if !blocks.iter().any(|b| b.kind == BlockKind::BnMean) {
        return None;
    }
    Some(
        layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                blocks
                    .iter()
                    .any(|b| b.layer == i && b.kind == BlockKind::BnMean)
                    .then(|| BnStats {
                        mean: vec![0.0; l.channels()],
                        var: vec![0.0; l.channels()],
                    })
            })
            .collect(),
    )
}

pub fn save_model(path: impl AsRef<Path>, file: &ModelFile) -> Result<()> {
    write_model(BufWriter::new(File::create(path)?), file)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    read_model(BufReader::new(File::open(path)?))
}
