//! Binary checkpoints for classifiers, so a run directory can be resumed.
//!
//! Layout (little-endian): `"CPCL" | u32 version | u16 C, H, W | u32 classes |
//! u8 frozen_backbone | u32 block_count | (u32 len, f32 × len)* | u32 crc32`,
//! the CRC covering everything after the magic. Blocks are the weights and
//! biases of conv1, conv2, fc and head, in that order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::export::write_atomic;
use crate::models::Classifier;

const MAGIC: [u8; 4] = *b"CPCL";
const VERSION: u32 = 1;

fn blocks(model: &Classifier) -> [&[f32]; 8] {
    let b = &model.backbone;
    [
        &b.conv1.weight,
        &b.conv1.bias,
        &b.conv2.weight,
        &b.conv2.bias,
        &b.fc.weight,
        &b.fc.bias,
        &model.head.weight,
        &model.head.bias,
    ]
}

fn blocks_mut(model: &mut Classifier) -> [&mut Vec<f32>; 8] {
    let b = &mut model.backbone;
    [
        &mut b.conv1.weight,
        &mut b.conv1.bias,
        &mut b.conv2.weight,
        &mut b.conv2.bias,
        &mut b.fc.weight,
        &mut b.fc.bias,
        &mut model.head.weight,
        &mut model.head.bias,
    ]
}

pub fn encode_classifier(model: &Classifier) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let (c, h, w) = model.input_shape();
    for d in [c, h, w] {
        buf.extend_from_slice(&(d as u16).to_le_bytes());
    }
    buf.extend_from_slice(&(model.num_classes as u32).to_le_bytes());
    buf.push(model.frozen_backbone as u8);
    let bl = blocks(model);
    buf.extend_from_slice(&(bl.len() as u32).to_le_bytes());
    for b in bl {
        buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
        for v in b {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[4..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn decode_classifier(bytes: &[u8]) -> Result<Classifier> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::format("magic", "not a classifier checkpoint"));
    }
    if bytes.len() < 4 + 4 + 6 + 4 + 1 + 4 + 4 {
        return Err(Error::format("header", "file truncated"));
    }
    let end = bytes.len() - 4;
    if crc32fast::hash(&bytes[4..end]) != u32::from_le_bytes(bytes[end..].try_into().unwrap()) {
        return Err(Error::format("checksum", "CRC32 mismatch"));
    }
    let body = &bytes[..end];
    let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().unwrap());
    let u16_at = |i: usize| u16::from_le_bytes(body[i..i + 2].try_into().unwrap()) as usize;
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let shape = (u16_at(8), u16_at(10), u16_at(12));
    let classes = u32_at(14) as usize;
    if shape.0 == 0 || shape.1 < 4 || shape.2 < 4 || shape.1 % 4 != 0 || shape.2 % 4 != 0 || classes < 2 {
        return Err(Error::format("input_shape", format!("unusable shape {shape:?} / {classes} classes")));
    }
    let frozen = body[18] != 0;
    let count = u32_at(19) as usize;
    let mut model = Classifier::new(shape, classes, 0);
    model.frozen_backbone = frozen;
    let targets = blocks_mut(&mut model);
    if count != targets.len() {
        return Err(Error::format("block_count", format!("expected {}, found {count}", targets.len())));
    }
    let mut pos = 23;
    for (i, t) in targets.into_iter().enumerate() {
        if body.len() < pos + 4 {
            return Err(Error::format("blocks", "file truncated"));
        }
        let len = u32_at(pos) as usize;
        pos += 4;
        if len != t.len() {
            return Err(Error::format("blocks", format!("block {i} has {len} values, expected {}", t.len())));
        }
        if body.len() < pos + 4 * len {
            return Err(Error::format("blocks", "file truncated"));
        }
        for (dst, src) in t.iter_mut().zip(body[pos..pos + 4 * len].chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().unwrap());
        }
        pos += 4 * len;
    }
    if pos != body.len() {
        return Err(Error::format("trailer", "unexpected bytes after the last block"));
    }
    Ok(model)
}

pub fn save_classifier(model: &Classifier, path: &Path) -> Result<()> {
    write_atomic(path, &encode_classifier(model))
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    decode_classifier(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_parameters() {
        let mut m = Classifier::new((3, 16, 16), 5, 12);
        m.frozen_backbone = true;
        let back = decode_classifier(&encode_classifier(&m)).unwrap();
        assert_eq!(back.param_hash(), m.param_hash());
        assert!(back.frozen_backbone);
        assert_eq!(back.num_classes, 5);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_classifier(&Classifier::new((1, 8, 8), 2, 1));
        let mut bad = bytes.clone();
        bad[40] ^= 0xff;
        assert!(matches!(decode_classifier(&bad), Err(Error::Format { field: "checksum", .. })));
        assert!(decode_classifier(&bytes[..bytes.len() - 9]).is_err());
        assert!(matches!(decode_classifier(b"nope"), Err(Error::Format { field: "magic", .. })));
    }
}
