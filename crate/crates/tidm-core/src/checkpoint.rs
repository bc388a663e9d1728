//! TIDM checkpoint container.
//!
//! Layout: magic `TIDM`, u32 LE format version, u64 LE manifest length,
//! manifest text, payload of concatenated little-endian f32 arrays, and a
//! trailing u64 LE FNV-1a checksum of the payload bytes. The manifest's
//! first line records the training step count; each following line is
//! `name shape offset length` with the shape dims joined by `x`.

use crate::error::{Result, TidmError};
use crate::numerics::{ParamStore, Tensor};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TIDM";
pub const FORMAT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    let mut manifest = format!("step_count = {}\n", params.step_count());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in params.iter() {
        let offset = payload.len();
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let shape = tensor
            .shape()
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!(
            "{name} {shape} {offset} {}\n",
            payload.len() - offset
        ));
    }
    let mut out = Vec::with_capacity(4 + 4 + 8 + manifest.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
    std::fs::write(path, out).map_err(|e| TidmError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes =
        std::fs::read(path).map_err(|e| TidmError::io(path.display().to_string(), e))?;
    if bytes.len() < 16 {
        return Err(TidmError::CheckpointTruncated(format!(
            "{}: {} bytes is smaller than any valid container",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(TidmError::CheckpointBadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(TidmError::CheckpointUnknownVersion(version));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest_end = 16usize
        .checked_add(manifest_len)
        .filter(|&e| e + 8 <= bytes.len())
        .ok_or_else(|| {
            TidmError::CheckpointTruncated(format!(
                "{}: manifest length {manifest_len} exceeds file",
                path.display()
            ))
        })?;
    let manifest = std::str::from_utf8(&bytes[16..manifest_end])
        .map_err(|_| TidmError::CheckpointTruncated("manifest is not UTF-8".to_string()))?;
    let payload = &bytes[manifest_end..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = fnv1a(payload);
    if stored != computed {
        return Err(TidmError::CheckpointChecksum { stored, computed });
    }

    let mut lines = manifest.lines();
    let step_line = lines
        .next()
        .ok_or_else(|| TidmError::CheckpointTruncated("empty manifest".to_string()))?;
    let step_count: u64 = step_line
        .strip_prefix("step_count = ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            TidmError::CheckpointTruncated(format!("bad step_count line {step_line:?}"))
        })?;

    let mut params = ParamStore::new();
    let mut expected_offset = 0usize;
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape_s, offset_s, len_s] = fields.as_slice() else {
            return Err(TidmError::CheckpointTruncated(format!(
                "bad manifest line {line:?}"
            )));
        };
        let shape: Vec<usize> = shape_s
            .split('x')
            .map(|d| d.parse().map_err(|_| bad_field(line)))
            .collect::<std::result::Result<_, _>>()?;
        let offset: usize = offset_s.parse().map_err(|_| bad_field(line))?;
        let len: usize = len_s.parse().map_err(|_| bad_field(line))?;
        // offsets must tile the payload in order without gaps or overlap
        if offset != expected_offset {
            return Err(TidmError::CheckpointTruncated(format!(
                "manifest offset {offset} for {name}, expected {expected_offset}"
            )));
        }
        let numel: usize = shape.iter().product();
        if len != numel * 4 || offset + len > payload.len() {
            return Err(TidmError::CheckpointTruncated(format!(
                "array {name}: {len} bytes does not fit shape {shape_s} in payload"
            )));
        }
        let data: Vec<f32> = payload[offset..offset + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name.to_string(), Tensor::from_vec(shape, data)?)?;
        expected_offset = offset + len;
    }
    if expected_offset != payload.len() {
        return Err(TidmError::CheckpointTruncated(format!(
            "payload has {} trailing bytes not covered by the manifest",
            payload.len() - expected_offset
        )));
    }
    params.set_step_count(step_count);
    Ok(params)
}

fn bad_field(line: &str) -> TidmError {
    TidmError::CheckpointTruncated(format!("bad manifest line {line:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn sample_store() -> ParamStore {
        let mut rng = Rng::new(3);
        let mut p = ParamStore::new();
        p.insert("b/w".to_string(), rng.sample_standard_normal(&[2, 3]).unwrap())
            .unwrap();
        p.insert("a/v".to_string(), rng.sample_standard_normal(&[4]).unwrap())
            .unwrap();
        p.set_step_count(77);
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tidm");
        let p = sample_store();
        save_checkpoint(&path, &p).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p.checksum(), q.checksum());
        assert_eq!(q.step_count(), 77);
        for (name, t) in p.iter() {
            assert_eq!(q.get(name).unwrap().data(), t.data());
            assert_eq!(q.get(name).unwrap().shape(), t.shape());
        }
    }

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tidm");
        save_checkpoint(&path, &ParamStore::new()).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert!(q.is_empty());
    }

    #[test]
    fn corrupted_payload_byte_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tidm");
        save_checkpoint(&path, &sample_store()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() - 20; // inside the payload
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(TidmError::CheckpointChecksum { .. }) => {}
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_and_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tidm");
        save_checkpoint(&path, &sample_store()).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TidmError::CheckpointBadMagic)
        ));

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TidmError::CheckpointUnknownVersion(9))
        ));

        std::fs::write(&path, &good[..10]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TidmError::CheckpointTruncated(_))
        ));
    }
}
