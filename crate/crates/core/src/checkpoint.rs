//! Binary checkpoint interchange: parameters, optimizer velocities, and RNG
//! position, all little-endian, guarded by an architecture fingerprint.
//!
//! Layout: magic `VFLC`, format version, epoch, fingerprint, then a tensor
//! table (name, dims, dtype code, raw values), then two length-prefixed
//! optional sections for the optimizer state and the RNG state.

use crate::optim::Sgd;
use crate::params::ParamStore;
use crate::tensor::{Dtype, Element, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{self, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VFLC";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("fingerprint mismatch: checkpoint was written by a different model configuration")]
    FingerprintMismatch,
    #[error("checkpoint does not match the store: {0}")]
    StoreMismatch(String),
}

type Result<V> = std::result::Result<V, CheckpointError>;

fn format_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub fingerprint: [u8; 32],
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything read back from a checkpoint file.
#[derive(Debug)]
pub struct Loaded<T: Element> {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub velocities: Option<Vec<Vec<T>>>,
    pub rng: Option<RngState>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(format_err(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn tensor_bytes<T: Element>(w: &mut Writer, name: &str, t: &Tensor<T>) {
    w.u32(name.len() as u32);
    w.bytes(name.as_bytes());
    w.u32(t.shape().len() as u32);
    for &d in t.shape() {
        w.u64(d as u64);
    }
    w.bytes(&[T::DTYPE.code()]);
    for v in t.data() {
        v.write_le(&mut w.buf);
    }
}

fn read_values<T: Element>(r: &mut Reader, n: usize) -> Result<Vec<T>> {
    let raw = r.take(n * T::DTYPE.size_bytes())?;
    let mut out = Vec::with_capacity(n);
    for chunk in raw.chunks_exact(T::DTYPE.size_bytes()) {
        out.push(T::read_le(chunk));
    }
    Ok(out)
}

/// Serializes parameters plus optional optimizer and RNG state.
pub fn save_checkpoint<T: Element>(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore<T>,
    optimizer: Option<&Sgd<T>>,
    rng: Option<&RngState>,
) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(meta.epoch);
    w.bytes(&meta.fingerprint);
    w.u64(store.len() as u64);
    for (_, p) in store.iter() {
        tensor_bytes(&mut w, &p.name, &p.value);
    }
    match optimizer {
        None => w.u64(0),
        Some(opt) => {
            let mut section = Writer { buf: Vec::new() };
            section.u64(opt.state().len() as u64);
            for v in opt.state() {
                section.u64(v.len() as u64);
                for x in v {
                    x.write_le(&mut section.buf);
                }
            }
            w.u64(section.buf.len() as u64);
            w.bytes(&section.buf);
        }
    }
    match rng {
        None => w.u64(0),
        Some(state) => {
            w.u64(32 + 16 + 8);
            w.bytes(&state.seed);
            w.bytes(&state.word_pos.to_le_bytes());
            w.bytes(&state.stream.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&w.buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint; refuses a fingerprint mismatch unless `force`.
pub fn load_checkpoint<T: Element>(
    path: &Path,
    expected_fingerprint: Option<&[u8; 32]>,
    force: bool,
) -> Result<Loaded<T>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(format_err("bad magic, not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let epoch = r.u64()?;
    let fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
    if let Some(want) = expected_fingerprint {
        if &fingerprint != want && !force {
            return Err(CheckpointError::FingerprintMismatch);
        }
    }
    let count = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| format_err("tensor name is not utf-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let code = r.take(1)?[0];
        let dtype = Dtype::from_code(code)
            .ok_or_else(|| format_err(format!("unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(format_err(format!(
                "tensor {name} stored as {dtype:?}, loading as {:?}",
                T::DTYPE
            )));
        }
        let n = shape.iter().product::<usize>();
        let data = read_values::<T>(&mut r, n)?;
        let t = Tensor::new(shape, data)
            .map_err(|e| format_err(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    let opt_len = r.u64()? as usize;
    let velocities = if opt_len == 0 {
        None
    } else {
        let mut section = Reader { buf: r.take(opt_len)?, pos: 0 };
        let vcount = section.u64()? as usize;
        let mut vels = Vec::with_capacity(vcount);
        for _ in 0..vcount {
            let n = section.u64()? as usize;
            vels.push(read_values::<T>(&mut section, n)?);
        }
        if !section.done() {
            return Err(format_err("trailing bytes in optimizer section"));
        }
        Some(vels)
    };
    let rng_len = r.u64()? as usize;
    let rng = if rng_len == 0 {
        None
    } else {
        if rng_len != 56 {
            return Err(format_err(format!("rng section has {rng_len} bytes, expected 56")));
        }
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let stream = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        Some(RngState { seed, word_pos, stream })
    };
    if !r.done() {
        return Err(format_err("trailing bytes after rng section"));
    }
    Ok(Loaded { meta: CheckpointMeta { epoch, fingerprint }, tensors, velocities, rng })
}

/// Writes loaded tensors into a freshly built store; names and shapes must
/// line up exactly with build order.
pub fn apply_tensors<T: Element>(
    store: &mut ParamStore<T>,
    tensors: &[(String, Tensor<T>)],
) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(CheckpointError::StoreMismatch(format!(
            "{} tensors for {} parameters",
            tensors.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (id, (name, value)) in ids.into_iter().zip(tensors) {
        let p = store.get_mut(id);
        if &p.name != name {
            return Err(CheckpointError::StoreMismatch(format!(
                "parameter order differs: {} vs {}",
                p.name, name
            )));
        }
        if p.value.shape() != value.shape() {
            return Err(CheckpointError::StoreMismatch(format!(
                "{name}: shape {:?} vs {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value.clone();
    }
    Ok(())
}
