//! Training checkpoints: configuration, progress, parameters, batch-norm
//! statistics and momentum buffers in one file.
//!
//! Layout, version 1 (all integers little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `DNCK` |
//! | 4 | format version (u32) |
//! | 1 | scalar width in bytes (4 or 8) |
//! | 3 | zero padding |
//! | 8 | metadata length `m` (u64) |
//! | m | metadata, UTF-8 JSON: run config, completed steps, total steps, progress, history, batch hashes |
//! | 4 | entry count (u32) |
//! | … | entries |
//! | 32 | SHA-256 of every preceding byte |
//!
//! Each entry is: kind (u8: 0 parameter, 1 buffer, 2 velocity), name length
//! (u16), UTF-8 name, rank (u8), dims (u32 each), then the row-major payload
//! as raw scalars. Parameters and buffers appear in registry order; velocity
//! entries follow their parameters' order and reuse the parameter names.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{DiNetModel, ModelConfig};
use crate::tensor::{Precision, Scalar, Tensor};
use crate::train::{EpochHash, LossRecord, OptimizerState, TrainState};

const MAGIC: &[u8; 4] = b"DNCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum EntryKind {
    Param = 0,
    Buffer = 1,
    Velocity = 2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    run: RunConfig,
    step: usize,
    total_steps: usize,
    progress: f64,
    history: Vec<LossRecord>,
    batch_hashes: Vec<EpochHash>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub run: RunConfig,
    pub state: TrainState<T>,
    pub total_steps: usize,
}

impl<T> Checkpoint<T> {
    /// Fraction of the run's steps completed.
    pub fn progress(&self) -> f64 {
        fraction(self.state.step, self.total_steps)
    }

    /// Fails with a shape error unless `config` builds the same network.
    pub fn check_model_config(&self, config: &ModelConfig) -> Result<()> {
        if *config == self.run.model {
            return Ok(());
        }
        let (ours, theirs) = (serde_json::to_value(config)?, serde_json::to_value(&self.run.model)?);
        let differing: Vec<String> = match (ours.as_object(), theirs.as_object()) {
            (Some(a), Some(b)) => a
                .iter()
                .filter(|(k, v)| b.get(*k) != Some(*v))
                .map(|(k, v)| format!("{k}: {v} (checkpoint {})", b.get(k).unwrap_or(&serde_json::Value::Null)))
                .collect(),
            _ => Vec::new(),
        };
        Err(Error::shape(format!(
            "model config does not match the checkpoint: {}",
            differing.join("; ")
        )))
    }
}

fn fraction(step: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        step as f64 / total as f64
    }
}

fn put_entry<T: Scalar>(out: &mut Vec<u8>, kind: EntryKind, name: &str, t: &Tensor<T>) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("entry name too long: {name}")))?;
    let rank = u8::try_from(t.ndim()).map_err(|_| Error::shape(format!("rank of {name} too large")))?;
    out.push(kind as u8);
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::shape(format!("extent of {name} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

/// Serializes `state` with the run configuration that produced it.
pub fn encode_checkpoint<T: Scalar>(state: &TrainState<T>, run: &RunConfig, total_steps: usize) -> Result<Vec<u8>> {
    let store = &state.model.params;
    if state.optimizer.velocity.len() != store.len() {
        return Err(Error::shape(format!(
            "optimizer holds {} buffers for {} parameters",
            state.optimizer.velocity.len(),
            store.len()
        )));
    }
    let meta = Metadata {
        run: run.clone(),
        step: state.step,
        total_steps,
        progress: fraction(state.step, total_steps),
        history: state.history.clone(),
        batch_hashes: state.batch_hashes.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::PRECISION.tag());
    out.extend_from_slice(&[0; 3]);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let count = 2 * store.len() + store.buffers().len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for p in store.params() {
        put_entry(&mut out, EntryKind::Param, &p.name, &p.value)?;
    }
    for b in store.buffers() {
        put_entry(&mut out, EntryKind::Buffer, &b.name, &b.value)?;
    }
    for (p, v) in store.params().iter().zip(&state.optimizer.velocity) {
        put_entry(&mut out, EntryKind::Velocity, &p.name, v)?;
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes the checkpoint through a temporary file and a rename, so an
/// interrupted write never leaves a truncated checkpoint under `path`.
pub fn save_checkpoint<T: Scalar>(
    state: &TrainState<T>,
    run: &RunConfig,
    total_steps: usize,
    path: &Path,
) -> Result<()> {
    let bytes = encode_checkpoint(state, run, total_steps)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::Path {
        path: tmp.clone(),
        reason: e.to_string(),
    })?;
    fs::rename(&tmp, path).map_err(|e| Error::Path {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::corrupt(self.path, format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn entry<T: Scalar>(&mut self) -> Result<(u8, String, Tensor<T>)> {
        let kind = self.u8()?;
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::corrupt(self.path, "entry name is not UTF-8"))?
            .to_string();
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let width = T::PRECISION.bytes();
        let payload = self.take(numel.checked_mul(width).ok_or_else(|| Error::corrupt(self.path, "entry too large"))?)?;
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        Ok((kind, name, Tensor::new(&shape, data)?))
    }
}

fn expect_entry<T: Scalar>(
    r: &mut Reader<'_>,
    kind: EntryKind,
    name: &str,
    shape: &[usize],
) -> Result<Tensor<T>> {
    let (k, n, t) = r.entry::<T>()?;
    if k != kind as u8 || n != name {
        return Err(Error::shape(format!(
            "checkpoint entry {n:?} (kind {k}) where the model expects {name:?} (kind {})",
            kind as u8
        )));
    }
    if t.shape() != shape {
        return Err(Error::shape(format!(
            "checkpoint entry {name} has shape {:?}, model expects {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    if bytes.len() < 24 + DIGEST_LEN || &bytes[..4] != MAGIC {
        return Err(Error::corrupt(path, "missing checkpoint header"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut r = Reader { path, bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::corrupt(path, "checksum mismatch"));
    }
    let tag = r.u8()?;
    r.take(3)?;
    let precision =
        Precision::from_tag(tag).ok_or_else(|| Error::corrupt(path, format!("unknown scalar width {tag}")))?;
    if precision != T::PRECISION {
        return Err(Error::invalid(format!(
            "checkpoint holds {precision:?} precision values, requested {:?}",
            T::PRECISION
        )));
    }
    let meta_len = usize::try_from(r.u64()?).map_err(|_| Error::corrupt(path, "metadata length overflows"))?;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::corrupt(path, format!("metadata: {e}")))?;

    let mut model = DiNetModel::<T>::build(meta.run.model.clone(), meta.run.model_seed())?;
    let store = &mut model.params;
    let count = r.u32()? as usize;
    let expected = 2 * store.len() + store.buffers().len();
    if count != expected {
        return Err(Error::shape(format!(
            "checkpoint has {count} entries, the configured model needs {expected}"
        )));
    }
    for p in store.params_mut() {
        p.value = expect_entry(&mut r, EntryKind::Param, &p.name, p.value.shape())?;
    }
    for b in store.buffers_mut() {
        b.value = expect_entry(&mut r, EntryKind::Buffer, &b.name, b.value.shape())?;
    }
    let velocity = store
        .params()
        .iter()
        .map(|p| expect_entry(&mut r, EntryKind::Velocity, &p.name, p.value.shape()))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != body.len() {
        return Err(Error::corrupt(path, "trailing bytes after the last entry"));
    }
    Ok(Checkpoint {
        run: meta.run,
        state: TrainState {
            model,
            optimizer: OptimizerState { velocity },
            step: meta.step,
            history: meta.history,
            batch_hashes: meta.batch_hashes,
        },
        total_steps: meta.total_steps,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::Path {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BlockSpec;

    fn small_run() -> RunConfig {
        let mut run = RunConfig::with_seed(5);
        run.model = ModelConfig {
            input_shape: [1, 4, 8, 8],
            blocks: vec![BlockSpec::plain(4), BlockSpec::grouped(8, 2).downsampled()],
            feature_dim: 8,
            num_actions: 3,
            domain_hidden: [6, 4],
            ..ModelConfig::default()
        };
        run
    }

    fn state(run: &RunConfig) -> TrainState<f32> {
        let model = DiNetModel::build(run.model.clone(), run.model_seed()).unwrap();
        let mut st = TrainState::new(model);
        for (i, v) in st.optimizer.velocity.iter_mut().enumerate() {
            v.fill(0.125 * i as f32 - 1.0);
        }
        for b in st.model.params.buffers_mut() {
            b.value.fill(0.3);
        }
        st.step = 7;
        st.history.push(LossRecord {
            step: 6,
            epoch: 0,
            p: 0.1 + 0.2,
            lambda: 0.1,
            lr: 0.01,
            loss_action: 1.0 / 3.0,
            loss_domain: 0.6931471805599453,
            objective: 1.0 / 3.0 - 0.1 * 0.6931471805599453,
        });
        st
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let run = small_run();
        let st = state(&run);
        let bytes = encode_checkpoint(&st, &run, 20).unwrap();
        let ck = decode_checkpoint::<f32>(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.run, run);
        assert_eq!(ck.state.step, 7);
        assert_eq!(ck.total_steps, 20);
        assert_eq!(ck.progress(), 0.35);
        assert_eq!(ck.state.history, st.history);
        for (a, b) in ck.state.model.params.params().iter().zip(st.model.params.params()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        for (a, b) in ck.state.model.params.buffers().iter().zip(st.model.params.buffers()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert_eq!(ck.state.optimizer, st.optimizer);
        assert_eq!(encode_checkpoint(&ck.state, &ck.run, 20).unwrap(), bytes);
    }

    #[test]
    fn truncated_is_corrupt() {
        let run = small_run();
        let bytes = encode_checkpoint(&state(&run), &run, 20).unwrap();
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            let r = decode_checkpoint::<f32>(&bytes[..cut], Path::new("cut"));
            assert!(matches!(r, Err(Error::Corrupt { .. })), "cut at {cut}: {r:?}");
        }
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let run = small_run();
        let mut bytes = encode_checkpoint(&state(&run), &run, 20).unwrap();
        let i = bytes.len() - 100;
        bytes[i] ^= 1;
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes, Path::new("x")),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn version_mismatch() {
        let run = small_run();
        let mut bytes = encode_checkpoint(&state(&run), &run, 20).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes, Path::new("x")),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn shape_mismatch_against_config() {
        let run = small_run();
        let bytes = encode_checkpoint(&state(&run), &run, 20).unwrap();
        let ck = decode_checkpoint::<f32>(&bytes, Path::new("x")).unwrap();
        let mut other = run.model.clone();
        other.feature_dim = 16;
        assert!(matches!(ck.check_model_config(&other), Err(Error::Shape(_))));
        ck.check_model_config(&run.model).unwrap();
    }

    #[test]
    fn precision_must_match() {
        let run = small_run();
        let bytes = encode_checkpoint(&state(&run), &run, 20).unwrap();
        assert!(decode_checkpoint::<f64>(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let run = small_run();
        let st = state(&run);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&st, &run, 20, &path).unwrap();
        let ck = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(ck.state.step, st.step);
        assert!(!path.with_extension("tmp").exists());
        assert!(matches!(
            load_checkpoint::<f32>(&dir.path().join("missing.ckpt")),
            Err(Error::Path { .. })
        ));
    }
}
