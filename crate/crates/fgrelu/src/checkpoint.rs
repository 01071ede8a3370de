//! Self-describing binary checkpoints: network spec, every parameter tensor,
//! and optionally the training RNG position. Round-trips bit-exactly.
//!
//! Layout: magic, format version, precision tag, length-prefixed TOML spec,
//! parameter table (name, trainable flag, shape, f64 little-endian data),
//! optional RNG snapshot.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::tensor::Tensor;
use crate::train::{rng_stream, RngStream};
use crate::Real;

const MAGIC: &[u8; 8] = b"FGCKPT01";

/// Training RNG position: enough to resume the shuffle/dropout streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub shuffle_word_pos: u128,
    pub dropout_word_pos: u128,
}

impl RngSnapshot {
    pub fn capture(seed: u64, shuffle: &rand_chacha::ChaCha8Rng, dropout: &rand_chacha::ChaCha8Rng) -> Self {
        RngSnapshot {
            seed,
            shuffle_word_pos: shuffle.get_word_pos(),
            dropout_word_pos: dropout.get_word_pos(),
        }
    }

    pub fn restore(&self) -> (rand_chacha::ChaCha8Rng, rand_chacha::ChaCha8Rng) {
        let mut shuffle = rng_stream(self.seed, RngStream::Shuffle);
        shuffle.set_word_pos(self.shuffle_word_pos);
        let mut dropout = rng_stream(self.seed, RngStream::Dropout);
        dropout.set_word_pos(self.dropout_word_pos);
        (shuffle, dropout)
    }
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
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> u64 {
        self.cur.position()
    }
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.offset(), message: message.into() }
    }
    fn take(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.cur
            .read_exact(&mut buf)
            .map_err(|_| self.err(format!("truncated checkpoint, wanted {n} bytes")))?;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

/// Serialize a network (and optional RNG position) to checkpoint bytes.
pub fn encode(net: &Network, rng: Option<&RngSnapshot>) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(1);
    w.u32(if cfg!(feature = "single") { 32 } else { 64 });

    let spec_text = toml::to_string(&net.spec)
        .map_err(|e| Error::Usage(format!("cannot serialize network spec: {e}")))?;
    w.bytes(spec_text.as_bytes());

    let ids: Vec<_> = net.params.ids().collect();
    w.u64(ids.len() as u64);
    for id in ids {
        w.bytes(net.params.name(id).as_bytes());
        w.buf.push(net.params.is_trainable(id) as u8);
        let t = net.params.get(id);
        w.u64(t.rank() as u64);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        for &v in t.data() {
            w.buf.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }

    match rng {
        Some(s) => {
            w.buf.push(1);
            w.u64(s.seed);
            w.u128(s.shuffle_word_pos);
            w.u128(s.dropout_word_pos);
        }
        None => w.buf.push(0),
    }
    Ok(w.buf)
}

/// Parse checkpoint bytes back into a network.
pub fn decode(bytes: &[u8]) -> Result<(Network, Option<RngSnapshot>)> {
    let mut r = Reader { cur: Cursor::new(bytes) };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, message: "not a checkpoint file (bad magic)".into() });
    }
    let version = r.u32()?;
    if version != 1 {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let bits = r.u32()?;
    let expected_bits = if cfg!(feature = "single") { 32 } else { 64 };
    if bits != expected_bits {
        return Err(r.err(format!(
            "checkpoint was written in {bits}-bit precision, this build is {expected_bits}-bit"
        )));
    }

    let spec_text = String::from_utf8(r.bytes()?)
        .map_err(|_| Error::Format { offset: 0, message: "spec header is not UTF-8".into() })?;
    let spec: NetworkSpec =
        toml::from_str(&spec_text).map_err(|e| Error::Usage(format!("bad spec in checkpoint: {e}")))?;

    let n_params = r.u64()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name = String::from_utf8(r.bytes()?)
            .map_err(|_| Error::Format { offset: 0, message: "parameter name is not UTF-8".into() })?;
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = r.take(8)?;
            data.push(f64::from_le_bytes(raw.try_into().expect("8 bytes")) as Real);
        }
        params.add(name, Tensor::new(shape, data)?, trainable);
    }

    let rng = match r.take(1)?[0] {
        0 => None,
        1 => Some(RngSnapshot {
            seed: r.u64()?,
            shuffle_word_pos: r.u128()?,
            dropout_word_pos: r.u128()?,
        }),
        other => return Err(r.err(format!("bad rng tag {other}"))),
    };

    let net = Network::from_parts(spec, params)?;
    Ok((net, rng))
}

pub fn save(path: impl AsRef<Path>, net: &Network, rng: Option<&RngSnapshot>) -> Result<()> {
    fs::write(path, encode(net, rng)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Network, Option<RngSnapshot>)> {
    decode(&fs::read(path)?)
}
