//! Binary checkpoint format.
//!
//! Layout: magic "VKD1", u32 LE tensor count, then per tensor a u16 LE
//! name length, the UTF-8 name, a u8 rank, u32 LE dims, and the raw
//! little-endian f32 payload; a trailing u32 LE CRC32 covers every
//! preceding byte. The config echo travels as an ordinary tensor under a
//! reserved name whose f32 elements hold the JSON bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VKD1";
const CONFIG_TENSOR: &str = "__config_json";

#[derive(Debug, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub config_json: Option<String>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn from_named(named: &[(String, Tensor)], config_json: Option<String>) -> Checkpoint {
        let tensors = named
            .iter()
            .map(|(name, t)| (name.clone(), t.shape().to_vec(), t.data_vec()))
            .collect();
        Checkpoint { tensors, config_json }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, shape, data)| (shape.as_slice(), data.as_slice()))
    }

    /// Copy stored values into live tensors by name; every target must be
    /// present with a matching shape.
    pub fn load_into(&self, named: &[(String, Tensor)]) -> Result<()> {
        for (name, tensor) in named {
            let (shape, data) = self.get(name).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing tensor {name:?}"))
            })?;
            if shape != tensor.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name:?} has shape {shape:?}, model expects {:?}",
                    tensor.shape()
                )));
            }
            tensor.set_data(data)?;
        }
        Ok(())
    }

    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        let mut entries: Vec<(&str, Vec<usize>, std::borrow::Cow<'_, [f32]>)> = self
            .tensors
            .iter()
            .map(|(n, s, d)| (n.as_str(), s.clone(), std::borrow::Cow::from(d.as_slice())))
            .collect();
        let config_data: Option<Vec<f32>> = self
            .config_json
            .as_ref()
            .map(|json| json.bytes().map(f32::from).collect());
        if let Some(data) = &config_data {
            entries.push((CONFIG_TENSOR, vec![data.len().max(1)], std::borrow::Cow::from(pad_nonempty(data))));
        }
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, shape, data) in &entries {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(shape.len() as u8);
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if buf.len() < MAGIC.len() + 4 + 4 {
            return Err(Error::Format(format!(
                "{}: too short to be a checkpoint",
                path.display()
            )));
        }
        if &buf[..4] != MAGIC {
            return Err(Error::Format(format!(
                "{}: unknown checkpoint version (magic {:02x?})",
                path.display(),
                &buf[..4]
            )));
        }
        let body_len = buf.len() - 4;
        let stored_crc = u32::from_le_bytes([buf[body_len], buf[body_len + 1], buf[body_len + 2], buf[body_len + 3]]);
        let actual_crc = crc32fast::hash(&buf[..body_len]);
        if stored_crc != actual_crc {
            return Err(Error::Format(format!(
                "{}: CRC mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})",
                path.display()
            )));
        }
        let body = &buf[..body_len];
        let mut off = 4usize;
        let count = u32::from_le_bytes([body[off], body[off + 1], body[off + 2], body[off + 3]]) as usize;
        off += 4;
        let mut tensors = Vec::with_capacity(count);
        let mut config_json = None;
        for _ in 0..count {
            if off + 2 > body.len() {
                return Err(Error::Format("checkpoint truncated in tensor header".into()));
            }
            let name_len = u16::from_le_bytes([body[off], body[off + 1]]) as usize;
            off += 2;
            if off + name_len + 1 > body.len() {
                return Err(Error::Format("checkpoint truncated in tensor name".into()));
            }
            let name = std::str::from_utf8(&body[off..off + name_len])
                .map_err(|_| Error::Format("checkpoint tensor name is not UTF-8".into()))?
                .to_string();
            off += name_len;
            let rank = body[off] as usize;
            off += 1;
            if off + 4 * rank > body.len() {
                return Err(Error::Format("checkpoint truncated in dims".into()));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = u32::from_le_bytes([body[off], body[off + 1], body[off + 2], body[off + 3]]) as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format("checkpoint dims overflow".into()))?;
                shape.push(d);
                off += 4;
            }
            if off + 4 * numel > body.len() {
                return Err(Error::Format(format!(
                    "checkpoint truncated in payload of {name:?}"
                )));
            }
            let mut data = Vec::with_capacity(numel);
            for k in 0..numel {
                let b = &body[off + 4 * k..off + 4 * k + 4];
                data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
            }
            off += 4 * numel;
            if name == CONFIG_TENSOR {
                let bytes: Vec<u8> = data.iter().map(|&v| v as u8).collect();
                config_json = Some(
                    String::from_utf8(bytes.into_iter().take_while(|&b| b != 0).collect())
                        .map_err(|_| Error::Format("checkpoint config echo is not UTF-8".into()))?,
                );
            } else {
                tensors.push((name, shape, data));
            }
        }
        if off != body.len() {
            return Err(Error::Format("checkpoint has trailing bytes before the CRC".into()));
        }
        Ok(Checkpoint { tensors, config_json })
    }
}

fn pad_nonempty(data: &[f32]) -> Vec<f32> {
    if data.is_empty() {
        vec![0.0]
    } else {
        data.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                ("a.w".into(), vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, -0.0]),
                ("b".into(), vec![1], vec![42.0]),
            ],
            config_json: Some("{\"kind\":\"test\"}".into()),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vkd1");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.tensors.len(), 2);
        for ((n1, s1, d1), (n2, s2, d2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            let b1: Vec<[u8; 4]> = d1.iter().map(|v| v.to_le_bytes()).collect();
            let b2: Vec<[u8; 4]> = d2.iter().map(|v| v.to_le_bytes()).collect();
            assert_eq!(b1, b2, "payload of {n1} must round trip bitwise");
        }
        assert_eq!(back.config_json, ck.config_json);
    }

    #[test]
    fn flipped_byte_is_caught_by_crc() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vkd1");
        sample().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("CRC"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vkd1");
        sample().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        // keep the CRC consistent so the magic check itself fires
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("unknown checkpoint version"), "{err}");
    }

    #[test]
    fn empty_table_is_a_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.vkd1");
        Checkpoint::new().save(&path).unwrap();
        let size = std::fs::metadata(&path).unwrap().len();
        assert_eq!(size, 4 + 4 + 4, "header, count, crc only");
        let back = Checkpoint::load(&path).unwrap();
        assert!(back.tensors.is_empty());
        assert!(back.config_json.is_none());
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vkd1");
        sample().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn load_into_checks_names_and_shapes() {
        let ck = sample();
        let t = Tensor::zeros(&[2, 3]);
        ck.load_into(&[("a.w".into(), t.clone())]).unwrap();
        assert_eq!(t.data_vec(), vec![1.0, -2.5, 3.25, 0.0, 1e-7, -0.0]);

        let wrong_shape = Tensor::zeros(&[3, 2]);
        assert!(ck.load_into(&[("a.w".into(), wrong_shape)]).is_err());
        let missing = Tensor::zeros(&[1]);
        assert!(ck.load_into(&[("nope".into(), missing)]).is_err());
    }
}
