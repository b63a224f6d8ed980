//! Self-describing binary checkpoints.
//!
//! ```text
//! "UVSC"  u32 version  u8 dtype
//! u32 config length, config text (key = value lines)
//! u64 stage-1 step, u64 stage-2 step, u64 generator and discriminator Adam steps
//! RNG state (56 bytes)
//! u32 tensor count, then per tensor:
//!     u16 name length, name, u8 dtype, u8 rank, u64 dims…, u64 payload offset
//! u64 payload length, payload (little-endian values)
//! ```
//!
//! Adam moments are stored as tensors next to their parameters
//! (`generator.m/<name>`, `generator.v/<name>`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::nn::{AdamConfig, AdamState, ParamStore};
use crate::tensor::rng::RngState;
use crate::tensor::{numel, DType, Scalar, Tensor};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 4] = b"UVSC";
pub const VERSION: u32 = 1;

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub config: TrainConfig,
    pub params: ModelParams<T>,
    pub gen_adam: AdamState<T>,
    pub disc_adam: AdamState<T>,
    pub stage1_step: u64,
    pub stage2_step: u64,
    pub rng: RngState,
}

/// Decoded file contents before interpretation.
struct Container<T> {
    dtype: DType,
    config_text: String,
    steps: [u64; 4],
    rng: RngState,
    tensors: Vec<(String, Vec<usize>, Vec<T>)>,
}

fn encode<T: Scalar>(c: &Container<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(c.dtype.code());
    out.extend_from_slice(&(c.config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(c.config_text.as_bytes());
    for s in c.steps {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&c.rng.to_bytes());
    out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, shape, data) in &c.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(c.dtype.code());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (data.len() * c.dtype.size()) as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, _, data) in &c.tensors {
        for &v in data {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::TruncatedCheckpoint {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint(format!("{what} is not UTF-8")))
    }
}

fn corrupt(m: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(m.into())
}

/// Header fields up to and including the dtype.
fn read_prefix(r: &mut Reader<'_>) -> Result<DType> {
    if r.take(4)? != MAGIC {
        return Err(corrupt("missing UVSC magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let code = r.u8()?;
    DType::from_code(code).ok_or_else(|| corrupt(format!("unknown dtype code {code}")))
}

fn decode<T: Scalar>(bytes: &[u8]) -> Result<Container<T>> {
    let mut r = Reader { bytes, pos: 0 };
    let dtype = read_prefix(&mut r)?;
    if dtype != T::DTYPE {
        return Err(Error::Config(format!(
            "checkpoint holds {dtype:?} values but was loaded as {:?}",
            T::DTYPE
        )));
    }
    let config_len = r.u32()? as usize;
    let config_text = r.utf8(config_len, "config")?;
    let steps = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
    let rng = RngState::from_bytes(r.take(RngState::BYTES)?).expect("exact length");
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.utf8(name_len, "tensor name")?;
        if r.u8()? != dtype.code() {
            return Err(corrupt(format!("tensor `{name}` has a different dtype from the file")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        table.push((name, shape, offset));
    }
    let payload_len = r.u64()? as usize;
    let payload = r.take(payload_len)?;
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} unexpected bytes after the payload", bytes.len() - r.pos)));
    }
    let size = dtype.size();
    let mut tensors = Vec::with_capacity(table.len());
    for (name, shape, offset) in table {
        let n = numel(&shape);
        let end = n.checked_mul(size).and_then(|b| b.checked_add(offset));
        let Some(end) = end.filter(|&e| e <= payload_len) else {
            return Err(corrupt(format!("tensor `{name}` lies outside the payload")));
        };
        let data = payload[offset..end].chunks_exact(size).map(T::read_le).collect();
        tensors.push((name, shape, data));
    }
    Ok(Container {
        dtype,
        config_text,
        steps,
        rng,
        tensors,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write then rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Precision of the values stored in a checkpoint file.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = read_file(path)?;
    read_prefix(&mut Reader { bytes: &bytes, pos: 0 })
}

fn push_store<T: Scalar>(out: &mut Vec<(String, Vec<usize>, Vec<T>)>, prefix: &str, store: &ParamStore<T>) {
    for (_, name, t) in store.iter() {
        out.push((format!("{prefix}/{name}"), t.shape().to_vec(), t.to_vec()));
    }
}

fn push_moments<T: Scalar>(
    out: &mut Vec<(String, Vec<usize>, Vec<T>)>,
    prefix: &str,
    store: &ParamStore<T>,
    adam: &AdamState<T>,
) {
    for (id, name, t) in store.iter() {
        out.push((format!("{prefix}.m/{name}"), t.shape().to_vec(), adam.m[id.0].clone()));
    }
    for (id, name, t) in store.iter() {
        out.push((format!("{prefix}.v/{name}"), t.shape().to_vec(), adam.v[id.0].clone()));
    }
}

impl<T: Scalar> Checkpoint<T> {
    /// Fresh run state: initialized parameters, zeroed optimizer state.
    pub fn initial(config: &TrainConfig) -> Result<(Model, Self)> {
        config.validate()?;
        let (model, params) = Model::new::<T>(&config.model, config.seed)?;
        let gen_adam = AdamState::new(&params.generator, AdamConfig::default());
        let disc_adam = AdamState::new(&params.discriminator, AdamConfig::default());
        let rng = crate::tensor::rng::SeededRng::derived(config.seed, "training").state();
        Ok((
            model,
            Checkpoint {
                config: config.clone(),
                params,
                gen_adam,
                disc_adam,
                stage1_step: 0,
                stage2_step: 0,
                rng,
            },
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let p = &self.params;
        push_store(&mut tensors, "generator", &p.generator);
        push_moments(&mut tensors, "generator", &p.generator, &self.gen_adam);
        push_store(&mut tensors, "discriminator", &p.discriminator);
        push_moments(&mut tensors, "discriminator", &p.discriminator, &self.disc_adam);
        encode(&Container {
            dtype: T::DTYPE,
            config_text: self.config.to_text(),
            steps: [self.stage1_step, self.stage2_step, self.gen_adam.step, self.disc_adam.step],
            rng: self.rng,
            tensors,
        })
    }

    /// Rebuild the model layout from the stored config and fill it.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Self)> {
        let c = decode::<T>(bytes)?;
        let config = TrainConfig::parse(&c.config_text).map_err(|e| corrupt(format!("stored config: {e}")))?;
        let (model, mut ckpt) = Self::initial(&config)?;
        let mut by_name: std::collections::HashMap<String, (Vec<usize>, Vec<T>)> =
            c.tensors.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
        let mut take = |name: String, shape: &[usize]| -> Result<Vec<T>> {
            let (s, d) = by_name
                .remove(&name)
                .ok_or_else(|| corrupt(format!("missing tensor `{name}`")))?;
            if s != shape {
                return Err(corrupt(format!("tensor `{name}` has shape {s:?}, expected {shape:?}")));
            }
            Ok(d)
        };
        for (prefix, store, adam) in [
            ("generator", &mut ckpt.params.generator, &mut ckpt.gen_adam),
            ("discriminator", &mut ckpt.params.discriminator, &mut ckpt.disc_adam),
        ] {
            let entries: Vec<_> = store.iter().map(|(id, n, t)| (id, n.to_string(), t.shape().to_vec())).collect();
            for (id, name, shape) in entries {
                store.set(id, take(format!("{prefix}/{name}"), &shape)?)?;
                adam.m[id.0] = take(format!("{prefix}.m/{name}"), &shape)?;
                adam.v[id.0] = take(format!("{prefix}.v/{name}"), &shape)?;
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(corrupt(format!("unexpected tensor `{extra}`")));
        }
        ckpt.stage1_step = c.steps[0];
        ckpt.stage2_step = c.steps[1];
        ckpt.gen_adam.step = c.steps[2];
        ckpt.disc_adam.step = c.steps[3];
        ckpt.rng = c.rng;
        Ok((model, ckpt))
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    write_file(path, &ckpt.to_bytes())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model, Checkpoint<T>)> {
    Checkpoint::from_bytes(&read_file(path)?).map_err(|e| match e {
        Error::CorruptCheckpoint(m) => Error::CorruptCheckpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// A bare set of named tensors in the same container (no config, zero
/// counters), e.g. externally supplied feature-network weights.
pub fn save_tensors<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let tensors = store.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec(), t.to_vec())).collect();
    let bytes = encode(&Container {
        dtype: T::DTYPE,
        config_text: String::new(),
        steps: [0; 4],
        rng: crate::tensor::rng::SeededRng::new(0).state(),
        tensors,
    });
    write_file(path, &bytes)
}

pub fn load_tensors<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let c = decode::<T>(&read_file(path)?)?;
    let mut store = ParamStore::new();
    for (name, shape, data) in c.tensors {
        store.push(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn micro_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig::micro(),
            precision: DType::F64,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn bytes_round_trip() {
        let (_, mut c) = Checkpoint::<f64>::initial(&micro_config()).unwrap();
        c.stage1_step = 12;
        c.gen_adam.step = 12;
        c.gen_adam.m[0][0] = 0.25;
        let bytes = c.to_bytes();
        let (_, back) = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.stage1_step, 12);
        assert_eq!(back.gen_adam.m[0][0], 0.25);
        assert!(back.params.bitwise_eq(&c.params));
    }

    #[test]
    fn distinct_errors() {
        let (_, c) = Checkpoint::<f64>::initial(&micro_config()).unwrap();
        let bytes = c.to_bytes();
        for cut in [2, 10, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::<f64>::from_bytes(&bytes[..cut]), Err(Error::TruncatedCheckpoint { .. })),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(Error::CorruptCheckpoint(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bad),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Config(_))));
    }

    #[test]
    fn tensor_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.push("a", Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
        s.push("b", Tensor::from_f64(&[1], &[-1.]).unwrap());
        let p = dir.path().join("t.bin");
        save_tensors(&s, &p).unwrap();
        assert!(load_tensors::<f32>(&p).unwrap().bitwise_eq(&s));
        assert_eq!(checkpoint_dtype(&p).unwrap(), DType::F32);
    }
}
