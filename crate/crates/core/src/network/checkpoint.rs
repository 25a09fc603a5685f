//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic, a little-endian `u64` manifest length, the
//! UTF-8 manifest, the tensor payload as little-endian `f32`, and finally
//! the FNV-1a 64 digest of the payload as a little-endian `u64`.
//!
//! Manifest lines:
//! ```text
//! config <key> = <value>
//! meta <key> = <value>
//! rng <name> <seed> <stream_id> <word_pos>
//! tensor <name> <d0,d1,..> <byte offset>
//! ```

use std::fs;
use std::path::Path;

use awb_tensor::{numel, RngState, Tensor};

use crate::error::{AwbError, CheckpointError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AWBCKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub meta: Vec<(String, String)>,
    pub rng: Vec<(String, RngState)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

fn malformed(msg: impl Into<String>) -> AwbError {
    CheckpointError::Malformed(msg.into()).into()
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(char::is_whitespace) {
        return Err(malformed(format!("{kind} name {s:?} must be non-empty without whitespace")));
    }
    Ok(())
}

fn read_u64(bytes: &[u8], at: usize, what: &str) -> Result<u64> {
    let slice = bytes
        .get(at..at + 8)
        .ok_or_else(|| CheckpointError::Truncated(format!("missing {what}")))?;
    Ok(u64::from_le_bytes(slice.try_into().expect("8 bytes")))
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn rng(&self, name: &str) -> Option<RngState> {
        self.rng.iter().find(|(k, _)| k == name).map(|(_, s)| *s)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(k, _)| k == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        for (k, v) in &self.config {
            check_token("config", k)?;
            if v.contains('\n') {
                return Err(malformed(format!("config value for {k} spans lines")));
            }
            manifest.push_str(&format!("config {k} = {v}\n"));
        }
        for (k, v) in &self.meta {
            check_token("meta", k)?;
            if v.contains('\n') {
                return Err(malformed(format!("meta value for {k} spans lines")));
            }
            manifest.push_str(&format!("meta {k} = {v}\n"));
        }
        for (name, s) in &self.rng {
            check_token("rng", name)?;
            manifest.push_str(&format!("rng {name} {} {} {}\n", s.seed, s.stream_id, s.word_pos));
        }
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            check_token("tensor", name)?;
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor {name} {} {}\n", dims.join(","), payload.len()));
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(24 + manifest.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&payload);
        let digest = fnv1a64(&out[CHECKPOINT_MAGIC.len()..]);
        out.extend_from_slice(&digest.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() {
            return Err(CheckpointError::Truncated(format!("{} bytes, shorter than the magic", bytes.len())).into());
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::VersionMismatch(String::from_utf8_lossy(&bytes[..8]).into_owned()).into());
        }
        let mlen = read_u64(bytes, 8, "manifest length")? as usize;
        let mstart: usize = 16;
        let mend = mstart
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CheckpointError::Truncated("manifest runs past end of file".into()))?;
        let manifest =
            std::str::from_utf8(&bytes[mstart..mend]).map_err(|_| malformed("manifest is not UTF-8"))?;

        let mut ck = Checkpoint::default();
        let mut layout = Vec::new();
        for line in manifest.lines() {
            let (kind, rest) = line.split_once(' ').ok_or_else(|| malformed(format!("bad line {line:?}")))?;
            match kind {
                "config" | "meta" => {
                    let (k, v) = rest.split_once(" = ").ok_or_else(|| malformed(format!("bad line {line:?}")))?;
                    let target = if kind == "config" { &mut ck.config } else { &mut ck.meta };
                    target.push((k.to_string(), v.to_string()));
                }
                "rng" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, seed, stream, pos] = f[..] else {
                        return Err(malformed(format!("bad rng line {line:?}")));
                    };
                    let parse_err = || malformed(format!("bad rng line {line:?}"));
                    ck.rng.push((
                        name.to_string(),
                        RngState {
                            seed: seed.parse().map_err(|_| parse_err())?,
                            stream_id: stream.parse().map_err(|_| parse_err())?,
                            word_pos: pos.parse().map_err(|_| parse_err())?,
                        },
                    ));
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, dims, offset] = f[..] else {
                        return Err(malformed(format!("bad tensor line {line:?}")));
                    };
                    let shape = dims
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| malformed(format!("bad shape in {line:?}")))?;
                    let offset: usize = offset.parse().map_err(|_| malformed(format!("bad offset in {line:?}")))?;
                    layout.push((name.to_string(), shape, offset));
                }
                other => return Err(malformed(format!("unknown manifest entry {other:?}"))),
            }
        }

        let mut expected_offset = 0usize;
        for (name, shape, offset) in &layout {
            if *offset != expected_offset {
                return Err(malformed(format!("tensor {name} at offset {offset}, expected {expected_offset}")));
            }
            expected_offset += numel(shape) * 4;
        }
        let payload_end = mend + expected_offset;
        if bytes.len() < payload_end + 8 {
            return Err(CheckpointError::Truncated(format!(
                "{} bytes, expected {}",
                bytes.len(),
                payload_end + 8
            ))
            .into());
        }
        if bytes.len() > payload_end + 8 {
            return Err(malformed(format!("{} trailing bytes", bytes.len() - payload_end - 8)));
        }
        let payload = &bytes[mend..payload_end];
        let stored = read_u64(bytes, payload_end, "digest")?;
        let computed = fnv1a64(&bytes[CHECKPOINT_MAGIC.len()..payload_end]);
        if stored != computed {
            return Err(CheckpointError::DigestMismatch { stored, computed }.into());
        }
        for (name, shape, offset) in layout {
            let n = numel(&shape);
            let data = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            ck.tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| AwbError::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| AwbError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| AwbError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: vec![("model.channels".into(), "4,8".into())],
            meta: vec![("epoch".into(), "3".into())],
            rng: vec![("waves".into(), RngState { seed: 1, stream_id: 2, word_pos: 77 })],
            tensors: vec![
                ("a".into(), Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap()),
                ("b".into(), Tensor::new(&[3], vec![f32::MIN_POSITIVE, 7.0, -0.0]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta("epoch"), Some("3"));
        assert_eq!(back.rng("waves").unwrap().word_pos, 77);
    }

    #[test]
    fn distinct_failures() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&[]),
            Err(AwbError::Checkpoint(CheckpointError::Truncated(_)))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(AwbError::Checkpoint(CheckpointError::Truncated(_)))
        ));
        let mut v2 = bytes.clone();
        v2[7] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(AwbError::Checkpoint(CheckpointError::VersionMismatch(_)))));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 12] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(AwbError::Checkpoint(CheckpointError::DigestMismatch { .. }))
        ));
    }
}
