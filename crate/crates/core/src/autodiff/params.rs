//! Named parameter blocks with a flat little-endian f64 binary encoding.
//! Checkpoints pair this blob with a JSON manifest listing name, shape, and
//! offset per block, so the blob alone is enough to restore weights once the
//! manifest fixes the layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Manifest entry describing one block's slice of the blob.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BlockLayout {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Register a block; names must be unique.
    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::shape("param block", format!("{name}: shape {shape:?} expects {want} values, got {}", data.len())));
        }
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(Error::InvalidInput(format!("duplicate parameter block name {name:?}")));
        }
        self.blocks.push(ParamBlock { name: name.to_string(), shape: shape.to_vec(), data });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn get(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.data.len()).collect()
    }

    /// Detach all data vectors for an optimizer step, in block order.
    pub fn take_data(&mut self) -> Vec<Vec<f64>> {
        self.blocks.iter_mut().map(|b| std::mem::take(&mut b.data)).collect()
    }

    /// Restore data vectors detached by `take_data`.
    pub fn restore_data(&mut self, data: Vec<Vec<f64>>) {
        assert_eq!(data.len(), self.blocks.len(), "restore_data block count mismatch");
        for (b, d) in self.blocks.iter_mut().zip(data) {
            assert_eq!(b.shape.iter().product::<usize>(), d.len(), "restore_data length mismatch");
            b.data = d;
        }
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn layout(&self) -> Vec<BlockLayout> {
        let mut offset = 0;
        self.blocks
            .iter()
            .map(|b| {
                let entry = BlockLayout { name: b.name.clone(), shape: b.shape.clone(), offset, len: b.data.len() };
                offset += b.data.len();
                entry
            })
            .collect()
    }

    /// All blocks concatenated as little-endian f64 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_len() * 8);
        for b in &self.blocks {
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Rebuild a set from a manifest layout plus the matching byte blob.
    pub fn from_bytes(layout: &[BlockLayout], bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 8 != 0 {
            return Err(Error::Format("parameter blob length is not a multiple of 8".into()));
        }
        let total = bytes.len() / 8;
        let mut values = Vec::with_capacity(total);
        for chunk in bytes.chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().expect("chunks_exact(8) yields 8 bytes")));
        }
        let mut set = ParamSet::new();
        for entry in layout {
            let want: usize = entry.shape.iter().product();
            if want != entry.len {
                return Err(Error::Format(format!("block {:?}: shape {:?} disagrees with len {}", entry.name, entry.shape, entry.len)));
            }
            let end = entry.offset.checked_add(entry.len).filter(|e| *e <= total);
            let Some(end) = end else {
                return Err(Error::Format(format!("block {:?} extends past the blob ({} values)", entry.name, total)));
            };
            set.push(&entry.name, &entry.shape, values[entry.offset..end].to_vec())?;
        }
        if set.total_len() != total {
            return Err(Error::Format(format!("blob holds {} values but layout covers {}", total, set.total_len())));
        }
        Ok(set)
    }
}
