//! Binary checkpoint container.
//!
//! Layout (little endian):
//! `"HYCN"` · u32 version · u8 scalar width · u64 len · config JSON ·
//! u64 step · u64 optimizer step · u8 learn-κ flag · u32 tensor count ·
//! per tensor { u16 name len · name · u64 rows · u64 cols · f64 values } ·
//! SHA-256 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelState, TrainConfig};
use crate::error::{Error, Result};
use crate::net::{Encoder, EncoderConfig, OptimState, ScalarParams, Tensor};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"HYCN";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Self-description stored in the header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub image_encoder: EncoderConfig,
    pub text_encoder: EncoderConfig,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<impl Real>) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rows() as u64).to_le_bytes());
    out.extend((t.cols() as u64).to_le_bytes());
    for &v in t.data() {
        out.extend(v.as_f64().to_le_bytes());
    }
}

/// Serializes a model state and its config.
pub fn encode<T: Real>(state: &ModelState<T>, cfg: &TrainConfig) -> Vec<u8> {
    let meta = CheckpointMeta {
        train: cfg.clone(),
        image_encoder: state.image.config().clone(),
        text_encoder: state.text.config().clone(),
    };
    let json = serde_json::to_vec(&meta).expect("config serializes");
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.push(T::BYTES);
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(&json);
    out.extend(state.step.to_le_bytes());
    out.extend(state.optim.step.to_le_bytes());
    out.push(u8::from(state.learn_kappa));
    let mut tensors: Vec<(String, Tensor<T>)> = Vec::new();
    for (i, p) in state.image.params().into_iter().enumerate() {
        tensors.push((format!("image.{i}"), p.clone()));
    }
    for (i, p) in state.text.params().into_iter().enumerate() {
        tensors.push((format!("text.{i}"), p.clone()));
    }
    let sc = state.scalars.as_array();
    tensors.push(("scalars".into(), Tensor::new(1, 4, sc.to_vec()).expect("shape")));
    for (i, m) in state.optim.m.iter().enumerate() {
        tensors.push((format!("adam.m.{i}"), m.clone()));
    }
    for (i, v) in state.optim.v.iter().enumerate() {
        tensors.push((format!("adam.v.{i}"), v.clone()));
    }
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        put_tensor(&mut out, name, t);
    }
    let digest = Sha256::digest(&out);
    out.extend(digest.as_slice());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or("unexpected end of data")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "length overflow".to_string())
    }
}

/// Parses a checkpoint produced by [`encode`].
pub fn decode<T: Real>(bytes: &[u8]) -> std::result::Result<(ModelState<T>, CheckpointMeta), String> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..4] != MAGIC {
        return Err("not a checkpoint file (bad magic)".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err("checksum mismatch (file truncated or corrupted)".into());
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("format version {version} unsupported (expected {VERSION})"));
    }
    let width = r.u8()?;
    if width != T::BYTES {
        return Err(format!("stored scalar width {width} bytes, expected {}", T::BYTES));
    }
    let n = r.len()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(n)?).map_err(|e| format!("bad config header: {e}"))?;
    let step = r.u64()?;
    let optim_step = r.u64()?;
    let learn_kappa = r.u8()? != 0;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nl = r.u16()? as usize;
        let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
        let (rows, cols) = (r.len()?, r.len()?);
        let len = rows.checked_mul(cols).ok_or("tensor size overflow")?;
        let raw = r.take(len.checked_mul(8).ok_or("tensor size overflow")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        tensors.push((name, Tensor::new(rows, cols, data).map_err(|e| e.to_string())?));
    }
    if r.pos != body.len() {
        return Err("trailing bytes after tensors".into());
    }
    let mut take = |prefix: &str| -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        while tensors.first().is_some_and(|(n, _)| n.starts_with(prefix)) {
            out.push(tensors.remove(0).1);
        }
        out
    };
    let image = take("image.");
    let text = take("text.");
    let scalars = take("scalars");
    let m = take("adam.m.");
    let v = take("adam.v.");
    if !tensors.is_empty() || scalars.len() != 1 || scalars[0].shape() != (1, 4) {
        return Err("unexpected tensor layout".into());
    }
    let s = scalars[0].data();
    let scalars = ScalarParams::from_array([s[0], s[1], s[2], s[3]]);
    let image = Encoder::from_params(meta.image_encoder.clone(), image).map_err(|e| e.to_string())?;
    let text = Encoder::from_params(meta.text_encoder.clone(), text).map_err(|e| e.to_string())?;
    let mut state = ModelState::assemble(image, text, scalars, learn_kappa);
    if m.len() != state.optim.m.len()
        || v.len() != m.len()
        || m.iter().zip(&state.optim.m).any(|(a, b)| a.shape() != b.shape())
        || v.iter().zip(&state.optim.v).any(|(a, b)| a.shape() != b.shape())
    {
        return Err("optimizer moments do not match the parameters".into());
    }
    state.optim = OptimState { m, v, step: optim_step };
    state.step = step;
    Ok((state, meta))
}

/// Writes atomically via a temporary file in the same directory.
pub fn save_checkpoint<T: Real>(state: &ModelState<T>, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let bytes = encode(state, cfg);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ModelState<T>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::trainer::{train_run, RunOptions};

    fn trained() -> (ModelState<f64>, TrainConfig) {
        let data = generate_synthetic(&SynthSpec {
            depth: 2,
            branching: 2,
            feature_dim: 5,
            samples_per_leaf: 4,
            ..SynthSpec::default()
        })
        .unwrap()
        .0;
        let cfg = TrainConfig {
            batch_size: 4,
            total_steps: 6,
            warmup_steps: 2,
            max_lr: 1e-2,
            hidden_dims: vec![6],
            embed_dim: 3,
            eval_batches: 1,
            ..TrainConfig::default()
        };
        (train_run(&cfg, &data, &RunOptions::default()).unwrap().state, cfg)
    }

    #[test]
    fn roundtrip_is_exact() {
        let (state, cfg) = trained();
        let bytes = encode(&state, &cfg);
        let (back, meta) = decode::<f64>(&bytes).unwrap();
        assert_eq!(back, state);
        assert_eq!(meta.train, cfg);
        assert_eq!(encode(&back, &cfg), bytes);
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let (state, cfg) = trained();
        let bytes = encode(&state, &cfg);
        let err = decode::<f64>(&bytes[..bytes.len() - 7]).unwrap_err();
        assert!(err.contains("checksum"), "{err}");
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(decode::<f64>(&flipped).unwrap_err().contains("checksum"));
        assert!(decode::<f64>(b"nope").unwrap_err().contains("magic"));
    }

    #[test]
    fn version_and_width_mismatches_are_refused() {
        let (state, cfg) = trained();
        let mut bytes = encode(&state, &cfg);
        bytes[4] = 9;
        let n = bytes.len() - DIGEST_LEN;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(digest.as_slice());
        assert!(decode::<f64>(&bytes).unwrap_err().contains("version"));
        assert!(decode::<f32>(&encode(&state, &cfg)).unwrap_err().contains("width"));
    }

    #[test]
    fn file_roundtrip() {
        let (state, cfg) = trained();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.hycn");
        save_checkpoint(&state, &cfg, &p).unwrap();
        assert_eq!(load_checkpoint::<f64>(&p).unwrap().0, state);
        assert!(matches!(load_checkpoint::<f64>(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
