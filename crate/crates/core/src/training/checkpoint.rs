//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `"DYCK"`, `u32` version, `u32` config length + config JSON, `u64` step,
//! `u32` parameter count, then per parameter: `u32` name length + name, `u32` rank,
//! `u64` extents, `u8` frozen flag, `f32` values; finally a `u32` CRC-32 of every
//! preceding byte.

use std::fs;
use std::path::Path;

use crate::detector::{DetectionModel, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DYCK";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes a model and its step counter.
pub fn checkpoint_bytes(model: &DetectionModel, step: u64) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config())?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.push(p.frozen as u8);
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint(model: &DetectionModel, step: u64, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model, step)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::checkpoint(field, format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds the model from its stored configuration, then checks every stored
/// parameter against it (name, shape, frozen flag) before copying values in. The
/// checksum is verified last so structural damage is reported by field.
pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<(DetectionModel, u64)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::checkpoint("magic", "not a checkpoint file"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::checkpoint("version", format!("unsupported version {version}")));
    }
    let len = r.u32("config_length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::checkpoint("config", e.to_string()))?;
    let step = r.u64("step")?;
    let mut model = DetectionModel::new(&config).map_err(|e| Error::checkpoint("config", e.to_string()))?;
    let count = r.u32("param_count")? as usize;
    if count != model.store.len() {
        return Err(Error::checkpoint(
            "param_count",
            format!("{count} parameters stored, configuration declares {}", model.store.len()),
        ));
    }
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for (i, id) in ids.into_iter().enumerate() {
        let field = |f: &str| format!("params[{i}].{f}");
        let name_len = r.u32(&field("name_length"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, &field("name"))?)
            .map_err(|_| Error::checkpoint(field("name"), "not valid UTF-8"))?;
        let expected = model.store.get(id);
        if name != expected.name {
            return Err(Error::checkpoint(field("name"), format!("found `{name}`, expected `{}`", expected.name)));
        }
        let rank = r.u32(&field("rank"))? as usize;
        if rank != expected.tensor.shape().len() {
            return Err(Error::checkpoint(
                field("rank"),
                format!("`{name}` has rank {rank}, expected {}", expected.tensor.shape().len()),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&field("shape"))?);
        }
        if shape.iter().zip(expected.tensor.shape()).any(|(&a, &b)| a != b as u64) {
            return Err(Error::checkpoint(
                field("shape"),
                format!("shape mismatch for `{name}`: stored {shape:?}, expected {:?}", expected.tensor.shape()),
            ));
        }
        let frozen = match r.take(1, &field("frozen"))?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::checkpoint(field("frozen"), format!("invalid flag byte {b}"))),
        };
        if frozen != expected.frozen {
            return Err(Error::checkpoint(field("frozen"), format!("frozen flag of `{name}` differs")));
        }
        let n = expected.tensor.numel();
        let raw = r.take(4 * n, &field("data"))?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        model.store.set_value(id, &values)?;
    }
    let body = r.pos;
    let stored = r.u32("checksum")?;
    let actual = crc32fast::hash(&buf[..body]);
    if stored != actual {
        return Err(Error::checkpoint("checksum", format!("stored {stored:08x}, computed {actual:08x}")));
    }
    if r.pos != buf.len() {
        return Err(Error::checkpoint("trailer", format!("{} unexpected trailing bytes", buf.len() - r.pos)));
    }
    Ok((model, step))
}

pub fn load_checkpoint(path: &Path) -> Result<(DetectionModel, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::build_model;
    use crate::injection::IntegrationStrategy;
    use crate::numeric::gradcheck::random_tensor;

    fn model() -> DetectionModel {
        let (mut m, _) = build_model(&ModelConfig::new("S", "toy-tiny", IntegrationStrategy::DualP0P3).with_seed(3)).unwrap();
        m.force_gates(0.3).unwrap();
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = checkpoint_bytes(&m, 42).unwrap();
        let (back, step) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(step, 42);
        assert_eq!(back.param_report(), m.param_report());
        for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
        let x = random_tensor(&[1, 3, 64, 64], 9, 1.0).cast();
        assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dyck");
        save_checkpoint(&model(), 7, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().1, 7);
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    fn field_of(bytes: &[u8]) -> String {
        match checkpoint_from_bytes(bytes) {
            Err(Error::Checkpoint { field, .. }) => field,
            other => panic!("expected a checkpoint error, got {:?}", other.map(|(_, s)| s)),
        }
    }

    #[test]
    fn corruption_is_reported_by_field() {
        let good = checkpoint_bytes(&model(), 1).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(field_of(&bad), "magic");
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(field_of(&bad), "version");
        assert_eq!(field_of(&good[..good.len() - 7]), format!("params[{}].data", model().store.len() - 1));
        assert_eq!(field_of(&good[..good.len() - 3]), "checksum");
        let mut bad = good.clone();
        let last_value = bad.len() - 5;
        bad[last_value] ^= 0x10;
        assert_eq!(field_of(&bad), "checksum");
        assert_eq!(field_of(&good[..2]), "magic");
        let mut long = good.clone();
        long.push(0);
        assert_eq!(field_of(&long), "trailer");

        // first extent of the first parameter
        let cfg_len = u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
        let first = 12 + cfg_len + 8 + 4;
        let name_len = u32::from_le_bytes(good[first..first + 4].try_into().unwrap()) as usize;
        let extent = first + 4 + name_len + 4;
        let mut bad = good.clone();
        bad[extent] ^= 0x01;
        assert_eq!(field_of(&bad), "params[0].shape");
        let mut bad = good;
        bad[12] = b'!';
        assert_eq!(field_of(&bad), "config");
    }

    #[test]
    fn byte_flips_anywhere_are_rejected() {
        let good = checkpoint_bytes(&model(), 1).unwrap();
        let positions = (0..300.min(good.len())).chain((300..good.len()).step_by(997));
        for i in positions {
            let mut bad = good.clone();
            bad[i] = bad[i].wrapping_add(0x5a);
            assert!(checkpoint_from_bytes(&bad).is_err(), "flip at {i} accepted");
        }
    }
}
