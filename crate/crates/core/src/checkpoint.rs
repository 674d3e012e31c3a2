//! Binary model checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "ISEG" | version
//! patch_size | heatmap_size | num_categories | kernel_size | head_width
//! num_blocks | (channels, stride) per block
//! num_arrays | per array: ndim, dims..., values as f64 LE
//! CRC-32 of every preceding byte
//! ```
//!
//! Arrays are stored kernel then bias for every layer in network order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ArchDescriptor, SegNet};
use crate::nn::LayerParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ISEG";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("dimension fits in u32").to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, dims: &[usize], values: &[f64]) {
    put_u32(out, dims.len());
    for &d in dims {
        put_u32(out, d);
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(net: &SegNet) -> Vec<u8> {
    let a = &net.arch;
    let mut out = Vec::with_capacity(64 + 8 * net.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [a.patch_size, a.heatmap_size, a.num_categories, a.kernel_size, a.head_width] {
        put_u32(&mut out, v);
    }
    put_u32(&mut out, a.block_channels.len());
    for (&c, &s) in a.block_channels.iter().zip(&a.block_strides) {
        put_u32(&mut out, c);
        put_u32(&mut out, s);
    }
    put_u32(&mut out, 2 * net.params.len());
    for p in &net.params {
        put_array(&mut out, &p.kernel.dims(), p.kernel.data());
        put_array(&mut out, &[p.bias.len()], &p.bias);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn array(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let ndim = self.u32()?;
        if ndim == 0 || ndim > 4 {
            return Err(Error::Checkpoint(format!("array with {ndim} dimensions")));
        }
        let dims = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("array size overflows".into()))?;
        Ok((dims, self.f64s(len)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SegNet> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing ISEG header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let [patch_size, heatmap_size, num_categories, kernel_size, head_width] =
        [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    let blocks = r.u32()?;
    if blocks > 64 {
        return Err(Error::Checkpoint(format!("{blocks} blocks")));
    }
    let mut block_channels = Vec::with_capacity(blocks);
    let mut block_strides = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        block_channels.push(r.u32()?);
        block_strides.push(r.u32()?);
    }
    let arch = ArchDescriptor {
        patch_size,
        heatmap_size,
        num_categories,
        block_channels,
        block_strides,
        kernel_size,
        head_width,
    };
    arch.validate().map_err(|e| Error::Checkpoint(format!("invalid architecture: {e}")))?;
    let arrays = r.u32()?;
    if arrays != 2 * arch.layer_shapes().len() {
        return Err(Error::Checkpoint(format!("{arrays} arrays for {} layers", arch.layer_shapes().len())));
    }
    let mut params = Vec::with_capacity(arrays / 2);
    for _ in 0..arrays / 2 {
        let (kdims, kernel) = r.array()?;
        let (bdims, bias) = r.array()?;
        if kdims.len() != 4 || bdims.len() != 1 {
            return Err(Error::Checkpoint("layer arrays must be a 4-d kernel and a 1-d bias".into()));
        }
        let kernel = Tensor::from_vec([kdims[0], kdims[1], kdims[2], kdims[3]], kernel)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.push(LayerParams { kernel, bias });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    SegNet::new(arch, params).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(net: &SegNet, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SegNet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
