//! Binary containers for features (`UFST`), learned weights (`UADW`) and
//! few-shot memory banks (`UFSB`). All integers and floats are
//! little-endian; payloads are float32.
//!
//! ```text
//! UFST: "UFST" u16 version u16 L u32 image_h u32 image_w
//!       L x { u16 block u32 d u32 grid_h u32 grid_w }
//!       L x { d f32 global token, grid_h*grid_w*d f32 patch tokens }
//! UADW: "UADW" u16 version f32 tau f32 lambda_p f32 lambda_f u16 L
//!       L x { u16 block u32 d, w_cls d*2 f32, w_seg d*2 f32 }   (column-major, normal first)
//!       u32 n, n bytes UTF-8 JSON metadata
//! UFSB: "UFSB" u16 version u16 L
//!       L x { u16 block u32 d u32 rows }
//!       L x { rows*d f32 unit tokens }
//!       u16 K, K x { u32 n, n bytes UTF-8 reference id }
//! ```

use std::fs;
use std::path::Path;

use super::binary::{to_u16, to_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::fewshot::{MemoryBank, TokenStore};
use crate::model::{FeatureStack, HeadWeights, LayerFeatures, LayerWeights, Provenance, WeightBank};

pub const FEATURE_MAGIC: &[u8; 4] = b"UFST";
pub const WEIGHT_MAGIC: &[u8; 4] = b"UADW";
pub const BANK_MAGIC: &[u8; 4] = b"UFSB";
pub const FORMAT_VERSION: u16 = 1;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_version(r: &mut Reader<'_>) -> Result<()> {
    let at = r.offset();
    let v = r.u16("version")?;
    if v != FORMAT_VERSION {
        return Err(Error::format(at, format!("unsupported version {v}")));
    }
    Ok(())
}

pub fn encode_features(stack: &FeatureStack) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(FEATURE_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u16(to_u16(stack.layers.len(), "layer count")?);
    w.u32(to_u32(stack.image_height, "image height")?);
    w.u32(to_u32(stack.image_width, "image width")?);
    for l in &stack.layers {
        w.u16(l.block_index);
        w.u32(to_u32(l.dim, "dim")?);
        w.u32(to_u32(l.grid_h, "grid height")?);
        w.u32(to_u32(l.grid_w, "grid width")?);
    }
    for l in &stack.layers {
        w.f32s(&l.global_token);
        w.f32s(&l.patch_tokens);
    }
    Ok(w.buf)
}

pub fn decode_features(bytes: &[u8], source_id: &str) -> Result<FeatureStack> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    check_version(&mut r)?;
    let count = r.u16("layer count")? as usize;
    let image_h = r.u32("image height")? as usize;
    let image_w = r.u32("image width")? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let block = r.u16("block index")?;
        let d = r.u32("dim")? as usize;
        let gh = r.u32("grid height")? as usize;
        let gw = r.u32("grid width")? as usize;
        if d == 0 || gh == 0 || gw == 0 {
            return Err(Error::format(
                at,
                format!("block {block}: zero-sized layer {gh}x{gw}x{d}"),
            ));
        }
        headers.push((block, d, gh, gw));
    }
    let mut layers = Vec::with_capacity(count);
    for (block, d, gh, gw) in headers {
        let global = r.f32_vec(d, "global token")?;
        let cells = gh
            .checked_mul(gw)
            .and_then(|c| c.checked_mul(d))
            .ok_or_else(|| Error::format(r.offset(), "patch tensor size overflow"))?;
        let patches = r.f32_vec(cells, "patch tokens")?;
        layers.push(LayerFeatures::new(block, gh, gw, global, patches)?);
    }
    r.expect_end()?;
    FeatureStack::new(layers, image_h, image_w, source_id)
}

pub fn write_feature_file(stack: &FeatureStack, path: &Path) -> Result<()> {
    write_file(path, &encode_features(stack)?)
}

/// Reads a feature file; the stack's source id is the file stem.
pub fn read_feature_file(path: &Path) -> Result<FeatureStack> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_features(&read_file(path)?, &id)
}

pub fn encode_weights(bank: &WeightBank) -> Result<Vec<u8>> {
    bank.validate()?;
    let mut w = Writer::default();
    w.bytes(WEIGHT_MAGIC);
    w.u16(FORMAT_VERSION);
    w.f32(bank.tau);
    w.f32(bank.lambda_p);
    w.f32(bank.lambda_f);
    w.u16(to_u16(bank.layers.len(), "layer count")?);
    for l in &bank.layers {
        w.u16(l.block_index);
        w.u32(to_u32(l.dim(), "dim")?);
        for head in [&l.cls, &l.seg] {
            w.f32s(&head.normal);
            w.f32s(&head.anomaly);
        }
    }
    let meta = serde_json::to_vec(&bank.metadata)?;
    w.u32(to_u32(meta.len(), "metadata length")?);
    w.bytes(&meta);
    Ok(w.buf)
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightBank> {
    let mut r = Reader::new(bytes);
    r.magic(WEIGHT_MAGIC)?;
    check_version(&mut r)?;
    let tau = r.f32("tau")?;
    let lambda_p = r.f32("lambda_p")?;
    let lambda_f = r.f32("lambda_f")?;
    let count = r.u16("layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let block = r.u16("block index")?;
        let d = r.u32("dim")? as usize;
        if d == 0 {
            return Err(Error::format(at, format!("block {block}: zero dim")));
        }
        let mut heads = Vec::with_capacity(2);
        for name in ["cls", "seg"] {
            let at = r.offset();
            let normal = r.f32_vec(d, name)?;
            let anomaly = r.f32_vec(d, name)?;
            let head = HeadWeights { normal, anomaly };
            head.validate()
                .map_err(|e| Error::format(at, format!("block {block} {name}: {e}")))?;
            heads.push(head);
        }
        let seg = heads.pop().expect("two heads");
        let cls = heads.pop().expect("two heads");
        layers.push(LayerWeights {
            block_index: block,
            cls,
            seg,
        });
    }
    let len = r.u32("metadata length")? as usize;
    let at = r.offset();
    let raw = r.take(len, "metadata")?;
    let metadata: Provenance =
        serde_json::from_slice(raw).map_err(|e| Error::format(at, format!("metadata JSON: {e}")))?;
    r.expect_end()?;
    let bank = WeightBank {
        layers,
        tau,
        lambda_p,
        lambda_f,
        metadata,
    };
    bank.validate()?;
    Ok(bank)
}

pub fn write_weight_file(bank: &WeightBank, path: &Path) -> Result<()> {
    write_file(path, &encode_weights(bank)?)
}

pub fn read_weight_file(path: &Path) -> Result<WeightBank> {
    decode_weights(&read_file(path)?)
}

pub fn encode_bank(bank: &MemoryBank) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(BANK_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u16(to_u16(bank.layers.len(), "layer count")?);
    for s in &bank.layers {
        w.u16(s.block_index);
        w.u32(to_u32(s.dim, "dim")?);
        w.u32(to_u32(s.rows(), "rows")?);
    }
    for s in &bank.layers {
        w.f32s(&s.tokens);
    }
    w.u16(to_u16(bank.source_ids.len(), "shots")?);
    for id in &bank.source_ids {
        w.u32(to_u32(id.len(), "id length")?);
        w.bytes(id.as_bytes());
    }
    Ok(w.buf)
}

pub fn decode_bank(bytes: &[u8]) -> Result<MemoryBank> {
    let mut r = Reader::new(bytes);
    r.magic(BANK_MAGIC)?;
    check_version(&mut r)?;
    let count = r.u16("layer count")? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let block = r.u16("block index")?;
        let d = r.u32("dim")? as usize;
        let rows = r.u32("rows")? as usize;
        if d == 0 {
            return Err(Error::format(at, format!("block {block}: zero dim")));
        }
        headers.push((block, d, rows));
    }
    let mut layers = Vec::with_capacity(count);
    for (block_index, dim, rows) in headers {
        let at = r.offset();
        let n = rows
            .checked_mul(dim)
            .ok_or_else(|| Error::format(at, "bank size overflow"))?;
        let tokens = r.f32_vec(n, "bank tokens")?;
        if let Some(k) = tokens.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "block {block_index}: non-finite bank token in row {}",
                k / dim
            )));
        }
        layers.push(TokenStore {
            block_index,
            dim,
            tokens,
        });
    }
    let shots = r.u16("shots")? as usize;
    let mut source_ids = Vec::with_capacity(shots);
    for _ in 0..shots {
        let len = r.u32("id length")? as usize;
        let at = r.offset();
        let raw = r.take(len, "reference id")?;
        let id = std::str::from_utf8(raw)
            .map_err(|e| Error::format(at, format!("reference id is not UTF-8: {e}")))?;
        source_ids.push(id.to_string());
    }
    r.expect_end()?;
    Ok(MemoryBank {
        layers,
        shots,
        source_ids,
    })
}

pub fn write_bank_file(bank: &MemoryBank, path: &Path) -> Result<()> {
    write_file(path, &encode_bank(bank)?)
}

pub fn read_bank_file(path: &Path) -> Result<MemoryBank> {
    decode_bank(&read_file(path)?)
}
