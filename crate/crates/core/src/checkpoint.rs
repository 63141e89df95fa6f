//! Checkpoint files: one line of UTF-8 JSON header, then the raw
//! little-endian `f32` payload of every tensor in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::network::{MultiTaskNet, NetConfig, NetError};
use crate::tensor::Tensor;

pub const FORMAT_NAME: &str = "covernet-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: NetConfig,
    tensors: Vec<ManifestEntry>,
    payload_bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn to_bytes(net: &MultiTaskNet<f32>) -> Vec<u8> {
    let mut offset = 0;
    let tensors = net
        .params()
        .iter()
        .map(|p| {
            let entry = ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.numel() * 4;
            entry
        })
        .collect();
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        config: net.config().clone(),
        tensors,
        payload_bytes: offset,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(offset);
    for p in net.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<MultiTaskNet<f32>, NetError> {
    let bad = |msg: String| NetError::Checkpoint(msg);
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header terminator".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| bad(format!("malformed header: {e}")))?;
    if header.format != FORMAT_NAME {
        return Err(bad(format!("unknown format {:?}", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    let payload = &bytes[newline + 1..];
    if payload.len() != header.payload_bytes {
        return Err(bad(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let mut expected_offset = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel * 4;
        if entry.offset != expected_offset || end > payload.len() {
            return Err(bad(format!("tensor {} has inconsistent offset", entry.name)));
        }
        let data = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(bad("payload has trailing bytes".into()));
    }
    MultiTaskNet::from_parts(header.config, tensors)
}

pub fn save_checkpoint(net: &MultiTaskNet<f32>, path: impl AsRef<Path>) -> Result<(), NetError> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MultiTaskNet<f32>, NetError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net() -> MultiTaskNet<f32> {
        MultiTaskNet::build(NetConfig {
            base_channels: 4,
            head_channels: 4,
            decoder_channels: 4,
            low_level_channels: 2,
            seed: 11,
            ..NetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let net = small_net();
        let bytes = to_bytes(&net);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = to_bytes(&small_net());
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(from_bytes(&bytes), Err(NetError::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_rejected() {
        let bytes = to_bytes(&small_net());
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).to_string();
        let bumped = text.replace("\"version\":1", "\"version\":2");
        let mut out = bumped.into_bytes();
        out.extend_from_slice(&bytes[text.len()..]);
        let err = from_bytes(&out).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = small_net();
        let bytes = to_bytes(&net);
        let split = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header = String::from_utf8(bytes[..split].to_vec()).unwrap();
        // Claim a wider stem; payload and plan no longer agree.
        let edited = header.replacen("\"base_channels\":4", "\"base_channels\":5", 1);
        let mut out = edited.into_bytes();
        out.extend_from_slice(&bytes[split..]);
        assert!(from_bytes(&out).is_err());
    }
}
