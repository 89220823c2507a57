//! Single-file model checkpoint format.
//!
//! Layout: `b"VRCK"` magic, `u32` LE version, `u64` LE header length, a JSON
//! header (architecture, ontology, validation accuracy, tensor shapes), then
//! raw little-endian `f64` tensor payloads in header order. Parameters round
//! trip bitwise. The decoder treats its input as untrusted.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{ArchDescriptor, SourceModel};
use crate::data::LabelOntology;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VRCK";
const VERSION: u32 = 1;
const MAX_HEADER_BYTES: u64 = 1 << 20;
const MAX_TOTAL_ELEMENTS: u64 = 1 << 25;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchDescriptor,
    ontology: LabelOntology,
    val_top1: f64,
    tensors: Vec<TensorInfo>,
}

/// Expected tensor layout for an architecture, in payload order.
fn expected_tensors(arch: &ArchDescriptor) -> Vec<TensorInfo> {
    let mut tensors = Vec::new();
    for (i, block) in arch.blocks.iter().enumerate() {
        tensors.push(TensorInfo {
            name: format!("block{i}.weight"),
            shape: vec![block.out_channels, block.col_rows(arch.block_in_channels(i))],
        });
        tensors.push(TensorInfo {
            name: format!("block{i}.bias"),
            shape: vec![block.out_channels],
        });
    }
    let feat = arch.blocks.last().map(|b| b.out_channels).unwrap_or(0);
    tensors.push(TensorInfo {
        name: "head.weight".into(),
        shape: vec![arch.n_classes, feat],
    });
    tensors.push(TensorInfo {
        name: "head.bias".into(),
        shape: vec![arch.n_classes],
    });
    tensors
}

/// Serializes a model to checkpoint bytes.
pub fn encode(model: &SourceModel) -> Vec<u8> {
    let header = Header {
        arch: model.arch().clone(),
        ontology: model.ontology().clone(),
        val_top1: model.val_top1(),
        tensors: expected_tensors(model.arch()),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    let mut push = |values: &[f64]| {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (w, b) in model.conv_weights().iter().zip(model.conv_biases()) {
        push(w.as_slice().expect("contiguous"));
        push(b.as_slice().expect("contiguous"));
    }
    push(model.head_weight().as_slice().expect("contiguous"));
    push(model.head_bias().as_slice().expect("contiguous"));
    out
}

fn read_f64s(bytes: &[u8], count: usize) -> Vec<f64> {
    bytes[..count * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

/// Decodes checkpoint bytes, validating structure before touching payload.
pub fn decode(bytes: &[u8]) -> Result<SourceModel> {
    let fail = |msg: String| Error::Format(format!("checkpoint: {msg}"));

    if bytes.len() < 16 {
        return Err(fail("truncated prelude".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_BYTES {
        return Err(fail(format!("header length {header_len} exceeds limit")));
    }
    let header_end = 16usize
        .checked_add(header_len as usize)
        .ok_or_else(|| fail("header length overflow".into()))?;
    if bytes.len() < header_end {
        return Err(fail("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| fail(format!("header parse failed: {e}")))?;

    header.arch.validate().map_err(|e| fail(e.to_string()))?;
    let expected = expected_tensors(&header.arch);
    if header.tensors.len() != expected.len() {
        return Err(fail(format!(
            "{} tensors listed, architecture implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut total: u64 = 0;
    for (got, want) in header.tensors.iter().zip(&expected) {
        if got.name != want.name || got.shape != want.shape {
            return Err(fail(format!(
                "tensor {} has shape {:?}, expected {} with {:?}",
                got.name, got.shape, want.name, want.shape
            )));
        }
        let elems = got
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| fail(format!("tensor {} shape overflow", got.name)))?;
        total = total
            .checked_add(elems)
            .ok_or_else(|| fail("element count overflow".into()))?;
    }
    if total > MAX_TOTAL_ELEMENTS {
        return Err(fail(format!("{total} parameters exceed limit")));
    }
    let payload = &bytes[header_end..];
    let want_bytes = (total as usize) * 8;
    if payload.len() != want_bytes {
        return Err(fail(format!(
            "payload is {} bytes, tensors need {want_bytes}",
            payload.len()
        )));
    }

    let mut offset = 0usize;
    let mut take = |count: usize| -> Vec<f64> {
        let vals = read_f64s(&payload[offset..], count);
        offset += count * 8;
        vals
    };
    let arch = header.arch;
    let mut conv_weights = Vec::with_capacity(arch.blocks.len());
    let mut conv_biases = Vec::with_capacity(arch.blocks.len());
    for (i, block) in arch.blocks.iter().enumerate() {
        let rows = block.out_channels;
        let cols = block.col_rows(arch.block_in_channels(i));
        let w = Array2::from_shape_vec((rows, cols), take(rows * cols))
            .expect("shape validated against element count");
        let b = Array1::from_vec(take(rows));
        conv_weights.push(w);
        conv_biases.push(b);
    }
    let feat = arch.blocks.last().expect("validated").out_channels;
    let head_weight = Array2::from_shape_vec((arch.n_classes, feat), take(arch.n_classes * feat))
        .expect("shape validated");
    let head_bias = Array1::from_vec(take(arch.n_classes));

    if conv_weights
        .iter()
        .flat_map(|w| w.iter())
        .chain(conv_biases.iter().flat_map(|b| b.iter()))
        .chain(head_weight.iter())
        .chain(head_bias.iter())
        .any(|v| !v.is_finite())
    {
        return Err(fail("non-finite parameter value".into()));
    }

    SourceModel::from_parts(
        arch,
        conv_weights,
        conv_biases,
        head_weight,
        head_bias,
        header.ontology,
        header.val_top1,
    )
}

pub fn save(model: &SourceModel, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SourceModel> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Load(format!("missing checkpoint {}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchDescriptor;

    fn ontology(n: usize) -> LabelOntology {
        LabelOntology::new((0..n).map(|i| format!("c{i}")).collect(), "ck").unwrap()
    }

    fn model() -> SourceModel {
        let mut m =
            SourceModel::init(ArchDescriptor::tiny(3), ontology(3), 17).unwrap();
        m.set_val_top1(0.875);
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let bytes = encode(&m);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.arch(), m.arch());
        assert_eq!(back.ontology(), m.ontology());
        assert_eq!(back.val_top1(), m.val_top1());
        for (a, b) in m.conv_weights().iter().zip(back.conv_weights()) {
            assert_eq!(a, b);
        }
        assert_eq!(m.head_weight(), back.head_weight());
        assert_eq!(m.head_bias(), back.head_bias());
        // And byte-for-byte stable on re-encode.
        assert_eq!(bytes, encode(&back));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("model.vrck");
        let m = model();
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(m.head_weight(), back.head_weight());
    }

    #[test]
    fn decoder_rejects_malformed_inputs() {
        let good = encode(&model());

        assert!(matches!(decode(b""), Err(Error::Format(_))));
        assert!(matches!(decode(b"NOPE"), Err(Error::Format(_))));

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(decode(&bad_version).is_err());

        let mut huge_header = good.clone();
        huge_header[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(&huge_header).is_err());

        let truncated = &good[..good.len() - 9];
        assert!(decode(truncated).is_err());

        let mut extra = good.clone();
        extra.extend_from_slice(&[0u8; 8]);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn decoder_rejects_non_finite_parameters() {
        let good = encode(&model());
        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
    }
}
