//! Model file format.
//!
//! Byte-exact layout (all integers little-endian):
//!
//! | offset        | size | contents                                        |
//! |---------------|------|-------------------------------------------------|
//! | 0             | 4    | magic `"GMDL"`                                  |
//! | 4             | 4    | format version, u32 = 1                         |
//! | 8             | 4    | header text length `A`, u32                     |
//! | 12            | A    | UTF-8 header text (see below)                   |
//! | 12+A          | 8    | parameter count `N`, u64                        |
//! | 20+A          | 4·N  | parameters, f32 LE, canonical enumeration order |
//! | 20+A+4N       | 32   | SHA-256 of the parameter block                  |
//!
//! The header text is the canonical architecture text
//! ([`Arch::to_text`]) followed by zero or more `meta <key> <value>` lines
//! (sorted by key). Meta lines carry things like a trained subnet's output
//! wiring; f32 meta values are stored as bit-exact 8-digit hex so
//! save → load → save is the identity on bytes. Two models of the same
//! architecture (and same meta) therefore serialize to files that differ
//! only inside the parameter block.
//!
//! The trailing checksum covers the parameter block only, so a patch tool
//! can rewrite individual parameters and the checksum without touching the
//! header.

use crate::arch::{hex, Arch, ParamId};
use crate::error::{Error, Result};
use crate::net::Model;
use crate::params::ParamSet;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"GMDL";
pub const VERSION: u32 = 1;

/// Key/value metadata stored in the header (sorted by key on disk).
pub type Meta = BTreeMap<String, String>;

/// Store an f32 bit-exactly in a meta map.
pub fn meta_set_f32(meta: &mut Meta, key: &str, v: f32) {
    meta.insert(key.to_string(), format!("{:08x}", v.to_bits()));
}

/// Read back an f32 stored by [`meta_set_f32`].
pub fn meta_get_f32(meta: &Meta, key: &str) -> Result<f32> {
    let s = meta.get(key).ok_or_else(|| Error::Format(format!("missing meta key '{key}'")))?;
    let bits =
        u32::from_str_radix(s, 16).map_err(|_| Error::Format(format!("bad f32 meta '{s}'")))?;
    Ok(f32::from_bits(bits))
}

pub fn meta_get_usize(meta: &Meta, key: &str) -> Result<usize> {
    let s = meta.get(key).ok_or_else(|| Error::Format(format!("missing meta key '{key}'")))?;
    s.parse().map_err(|_| Error::Format(format!("bad integer meta '{s}'")))
}

/// Byte offset of a parameter tensor inside the parameter block.
pub fn param_offset(arch: &Arch, id: ParamId) -> Option<u64> {
    arch.param_elem_offset(id).map(|e| 4 * e as u64)
}

/// Serialize to the on-disk byte layout.
pub fn model_to_bytes(arch: &Arch, params: &ParamSet, meta: &Meta) -> Result<Vec<u8>> {
    if params.len_params() != arch.param_count() {
        return Err(Error::Internal(format!(
            "param set has {} values, arch needs {}",
            params.len_params(),
            arch.param_count()
        )));
    }
    let mut header = arch.to_text();
    for (k, v) in meta {
        if k.contains(' ') || k.is_empty() || v.contains(|c: char| c == ' ' || c == '\n') {
            return Err(Error::InvalidConfig(format!("bad meta entry '{k}'='{v}'")));
        }
        header.push_str(&format!("meta {k} {v}\n"));
    }

    let flat = params.to_flat();
    let mut out = Vec::with_capacity(12 + header.len() + 8 + 4 * flat.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    let pstart = out.len();
    for v in &flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out[pstart..]);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Locations of the variable-size sections inside a serialized model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    /// Byte offset where the parameter block starts.
    pub param_start: usize,
    /// Number of f32 parameters.
    pub param_count: usize,
}

impl Layout {
    pub fn param_end(&self) -> usize {
        self.param_start + 4 * self.param_count
    }
}

/// Parse and validate everything except the parameter values themselves.
/// Returns the architecture, meta map and section layout.
pub fn parse_header(bytes: &[u8]) -> Result<(Arch, Meta, Layout)> {
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let hend = 12usize.checked_add(hlen).ok_or_else(|| Error::Format("header overflow".into()))?;
    if bytes.len() < hend + 8 {
        return Err(Error::Format("truncated header".into()));
    }
    let text = std::str::from_utf8(&bytes[12..hend])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;

    // Split arch lines from meta lines.
    let mut arch_text = String::new();
    let mut meta = Meta::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad meta line '{line}'")))?;
            meta.insert(k.to_string(), v.to_string());
        } else {
            arch_text.push_str(line);
            arch_text.push('\n');
        }
    }
    let arch = Arch::from_text(&arch_text)?;
    arch.infer()?;

    let count = u64::from_le_bytes(bytes[hend..hend + 8].try_into().unwrap()) as usize;
    if count != arch.param_count() {
        return Err(Error::Format(format!(
            "parameter count {count} does not match architecture ({})",
            arch.param_count()
        )));
    }
    let layout = Layout { param_start: hend + 8, param_count: count };
    if bytes.len() != layout.param_end() + 32 {
        return Err(Error::Format(format!(
            "file size {} does not match layout (expected {})",
            bytes.len(),
            layout.param_end() + 32
        )));
    }
    Ok((arch, meta, layout))
}

/// Verify the trailing checksum of a serialized model.
pub fn verify_checksum(bytes: &[u8], layout: Layout) -> Result<()> {
    let digest = Sha256::digest(&bytes[layout.param_start..layout.param_end()]);
    if digest.as_slice() != &bytes[layout.param_end()..layout.param_end() + 32] {
        return Err(Error::ChecksumMismatch("model parameter block".into()));
    }
    Ok(())
}

/// Recompute and overwrite the trailing checksum (after patching).
pub fn rewrite_checksum(bytes: &mut [u8], layout: Layout) {
    let digest = Sha256::digest(&bytes[layout.param_start..layout.param_end()]);
    bytes[layout.param_end()..layout.param_end() + 32].copy_from_slice(&digest);
}

/// Deserialize, verifying magic, version, arch, count and checksum.
pub fn model_from_bytes(bytes: &[u8]) -> Result<(Model, Meta)> {
    let (arch, meta, layout) = parse_header(bytes)?;
    verify_checksum(bytes, layout)?;
    let mut flat = Vec::with_capacity(layout.param_count);
    for chunk in bytes[layout.param_start..layout.param_end()].chunks_exact(4) {
        flat.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let params = ParamSet::from_flat(&arch, &flat)?;
    Ok((Model::new(arch, params)?, meta))
}

pub fn save_model(path: &Path, model: &Model, meta: &Meta) -> Result<()> {
    std::fs::write(path, model_to_bytes(model.arch(), &model.params, meta)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Model, Meta)> {
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Hex SHA-256 of a byte slice (artifact fingerprints in manifests/reports).
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{named_arch, ParamName};
    use crate::rng::stream;

    fn sample() -> (Arch, ParamSet) {
        let arch = named_arch("cnn-small").unwrap();
        let params = ParamSet::init(&arch, &mut stream(11, "fmt"));
        (arch, params)
    }

    #[test]
    fn roundtrip_is_byte_identity() {
        let (arch, params) = sample();
        let mut meta = Meta::new();
        meta_set_f32(&mut meta, "w_out", 10.25);
        meta.insert("target".into(), "3".into());
        let bytes = model_to_bytes(&arch, &params, &meta).unwrap();
        let (model, meta2) = model_from_bytes(&bytes).unwrap();
        assert_eq!(meta, meta2);
        let bytes2 = model_to_bytes(model.arch(), &model.params, &meta2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn same_arch_differs_only_in_param_block() {
        let arch = named_arch("mlp-tiny").unwrap();
        let a = ParamSet::init(&arch, &mut stream(1, "a"));
        let b = ParamSet::init(&arch, &mut stream(2, "b"));
        let ba = model_to_bytes(&arch, &a, &Meta::new()).unwrap();
        let bb = model_to_bytes(&arch, &b, &Meta::new()).unwrap();
        assert_eq!(ba.len(), bb.len());
        let (_, _, layout) = parse_header(&ba).unwrap();
        assert_eq!(ba[..layout.param_start], bb[..layout.param_start]);
        assert_ne!(ba[layout.param_start..layout.param_end()], bb[layout.param_start..layout.param_end()]);
    }

    #[test]
    fn corrupted_param_fails_checksum() {
        let (arch, params) = sample();
        let mut bytes = model_to_bytes(&arch, &params, &Meta::new()).unwrap();
        let (_, _, layout) = parse_header(&bytes).unwrap();
        bytes[layout.param_start + 5] ^= 0x40;
        assert!(matches!(model_from_bytes(&bytes), Err(Error::ChecksumMismatch(_))));
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let (arch, params) = sample();
        let bytes = model_to_bytes(&arch, &params, &Meta::new()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(model_from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(model_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn param_offsets_are_scaled_element_offsets() {
        let (arch, _) = sample();
        let id = ParamId { layer: 4, name: ParamName::Weight };
        assert_eq!(param_offset(&arch, id), arch.param_elem_offset(id).map(|e| 4 * e as u64));
        // First parameter starts at offset 0.
        let first = arch.param_specs()[0].0;
        assert_eq!(param_offset(&arch, first), Some(0));
    }

    #[test]
    fn f32_meta_roundtrip_is_bit_exact() {
        let mut meta = Meta::new();
        for v in [0.0f32, -0.0, 1.5, f32::MIN_POSITIVE, -123.456e-30] {
            meta_set_f32(&mut meta, "x", v);
            assert_eq!(meta_get_f32(&meta, "x").unwrap().to_bits(), v.to_bits());
        }
    }
}
