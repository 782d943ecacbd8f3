//! Versioned binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "MICE" | version: u32 | sections: u32 | sections × (tag: u32, offset: u64, len: u64) | payloads
//! ```

use crate::config::{parse_config, render_config};
use crate::encoder::EncoderParams;
use crate::model::EmbeddingQueue;
use crate::numcore::{DenseMatrix, RngState, SeededRng};
use crate::prototypes::{ExpertPrototypes, GatingPrototypes, PrototypeAccumulator};
use crate::trainer::{SgdState, TrainConfig, TrainState};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MICE";
pub const FORMAT_VERSION: u32 = 1;

const CONFIG: u32 = 1;
const META: u32 = 2;
const STUDENT: u32 = 3;
const TEACHER: u32 = 4;
const MU: u32 = 5;
const OMEGA: u32 = 6;
const QUEUE: u32 = 7;
const OPTIMIZER: u32 = 8;
const RNG: u32 = 9;
const ACCUMULATOR: u32 = 10;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptCheckpoint(msg.into())
}

fn put_f64s<'a>(out: &mut Vec<u8>, slices: impl IntoIterator<Item = &'a [f64]>) {
    for s in slices {
        for x in s {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn put_u64s(out: &mut Vec<u8>, xs: &[u64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialize a training state together with the configuration it runs under.
pub fn encode(state: &TrainState, config: &TrainConfig) -> Vec<u8> {
    let mut sections: Vec<(u32, Vec<u8>)> = Vec::new();
    sections.push((CONFIG, render_config(config).into_bytes()));

    let (next, fill, qdata) = state.queue.raw_parts();
    let mut meta = Vec::new();
    put_u64s(
        &mut meta,
        &[
            state.student.shape().input_dim as u64,
            state.epoch as u64,
            state.step,
            state.queue.capacity() as u64,
            next as u64,
            fill as u64,
        ],
    );
    sections.push((META, meta));

    let mut b = Vec::new();
    put_f64s(&mut b, state.student.slices());
    sections.push((STUDENT, b));
    let mut b = Vec::new();
    put_f64s(&mut b, state.teacher.slices());
    sections.push((TEACHER, b));
    let mut b = Vec::new();
    put_f64s(&mut b, [state.mu.mu.as_slice()]);
    sections.push((MU, b));
    let mut b = Vec::new();
    put_f64s(&mut b, [state.omega.matrix().as_slice()]);
    sections.push((OMEGA, b));
    let mut b = Vec::new();
    put_f64s(&mut b, [qdata]);
    sections.push((QUEUE, b));
    let mut b = Vec::new();
    put_f64s(&mut b, state.momentum.student.slices());
    put_f64s(&mut b, [state.momentum.mu.as_slice()]);
    sections.push((OPTIMIZER, b));

    let rs = state.rng.state();
    let mut b = Vec::new();
    b.extend_from_slice(&rs.seed);
    b.extend_from_slice(&rs.stream.to_le_bytes());
    b.extend_from_slice(&rs.word_pos.to_le_bytes());
    sections.push((RNG, b));

    let mut b = Vec::new();
    put_u64s(&mut b, &state.accumulator.counts);
    put_f64s(&mut b, [state.accumulator.mu_hat.as_slice()]);
    sections.push((ACCUMULATOR, b));

    let header_len = 12 + sections.len() * 20;
    let mut out = Vec::with_capacity(header_len + sections.iter().map(|s| s.1.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    let mut offset = header_len as u64;
    for (tag, payload) in &sections {
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        offset += payload.len() as u64;
    }
    for (_, payload) in sections {
        out.extend_from_slice(&payload);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("section {} is truncated", self.what)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| corrupt(format!("{}: size out of range", self.what)))
    }

    fn fill(&mut self, dst: &mut [f64]) -> Result<(), CheckpointError> {
        let raw = self.take(dst.len() * 8)?;
        for (d, c) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), CheckpointError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(corrupt(format!("section {} has {} trailing bytes", self.what, self.bytes.len() - self.pos)))
        }
    }
}

fn fill_all(r: &mut Reader<'_>, slices: Vec<&mut [f64]>) -> Result<(), CheckpointError> {
    for s in slices {
        r.fill(s)?;
    }
    Ok(())
}

/// Inverse of [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(TrainState, TrainConfig), CheckpointError> {
    let mut head = Reader { bytes, pos: 0, what: "header" };
    if head.take(4)? != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = head.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let count = head.u32()? as usize;
    let mut table = std::collections::BTreeMap::new();
    for _ in 0..count {
        let tag = head.u32()?;
        let offset = head.usize()?;
        let len = head.usize()?;
        let end = offset.checked_add(len).filter(|&e| e <= bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("section {tag} extends past the end of the file")))?;
        table.insert(tag, &bytes[offset..end]);
    }
    let section = |tag: u32, what: &'static str| -> Result<Reader<'_>, CheckpointError> {
        let b = table.get(&tag).ok_or_else(|| corrupt(format!("missing section {what}")))?;
        Ok(Reader { bytes: b, pos: 0, what })
    };

    let text = std::str::from_utf8(section(CONFIG, "config")?.bytes).map_err(|_| corrupt("config is not UTF-8"))?;
    let config = parse_config(text).map_err(|e| corrupt(format!("config: {e}")))?;

    let mut meta = section(META, "meta")?;
    let input_dim = meta.usize()?;
    let epoch = meta.usize()?;
    let step = meta.u64()?;
    let capacity = meta.usize()?;
    let next = meta.usize()?;
    let fill = meta.usize()?;
    meta.finish()?;
    if capacity != config.queue_size {
        return Err(corrupt("queue capacity disagrees with config"));
    }

    let shape = config.encoder_shape(input_dim);
    let (k, d) = (config.n_clusters, config.embed_dim);

    let mut student = EncoderParams::zeros(&shape);
    let mut r = section(STUDENT, "student")?;
    fill_all(&mut r, student.slices_mut())?;
    r.finish()?;

    let mut teacher = student.teacher_copy();
    let mut r = section(TEACHER, "teacher")?;
    fill_all(&mut r, teacher.slices_mut())?;
    r.finish()?;

    let mut mu = DenseMatrix::zeros(k, d);
    let mut r = section(MU, "mu")?;
    r.fill(mu.as_mut_slice())?;
    r.finish()?;

    let mut omega = DenseMatrix::zeros(k, d);
    let mut r = section(OMEGA, "omega")?;
    r.fill(omega.as_mut_slice())?;
    r.finish()?;

    let heads = shape.expert_heads;
    let mut qdata = vec![0.0; heads * capacity * d];
    let mut r = section(QUEUE, "queue")?;
    r.fill(&mut qdata)?;
    r.finish()?;
    let queue = EmbeddingQueue::from_raw_parts(capacity, heads, d, next, fill, qdata)
        .map_err(|e| corrupt(format!("queue: {e}")))?;

    let mut momentum = SgdState { student: EncoderParams::zeros(&shape), mu: DenseMatrix::zeros(k, d) };
    let mut r = section(OPTIMIZER, "optimizer")?;
    fill_all(&mut r, momentum.student.slices_mut())?;
    r.fill(momentum.mu.as_mut_slice())?;
    r.finish()?;

    let mut r = section(RNG, "rng")?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    r.finish()?;
    let rng = SeededRng::from_state(RngState { seed, stream, word_pos });

    let mut accumulator = PrototypeAccumulator::new(k, d);
    let mut r = section(ACCUMULATOR, "accumulator")?;
    for c in accumulator.counts.iter_mut() {
        *c = r.u64()?;
    }
    r.fill(accumulator.mu_hat.as_mut_slice())?;
    r.finish()?;

    let state = TrainState {
        student,
        teacher,
        mu: ExpertPrototypes::new(mu),
        omega: GatingPrototypes::from_matrix(omega),
        queue,
        momentum,
        accumulator,
        epoch,
        step,
        rng,
    };
    Ok((state, config))
}

/// Write atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(state: &TrainState, config: &TrainConfig, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode(state, config);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig), CheckpointError> {
    decode(&std::fs::read(path)?)
}
