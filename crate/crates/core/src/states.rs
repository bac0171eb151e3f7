//! Per-line state matrices: the built-in mock causal encoder and the `LNST`
//! on-disk format shared with the external hidden-state extractor.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "LNST" | u16 version | u16 flags | u32 M | u32 D | u8 tag_len | tag | M*D f32 (row-major)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::SourceDocument;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const STATE_MAGIC: [u8; 4] = *b"LNST";
pub const STATE_FORMAT_VERSION: u16 = 1;
pub const STATE_FILE_EXT: &str = "lnst";
/// Default ceiling on the payload a header may ask us to allocate.
pub const DEFAULT_READ_CAP: u64 = 2 << 30;

/// One row per source line, `M x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix {
    pub doc_id: String,
    pub rows: Array2<f32>,
    pub encoder_tag: String,
    pub encoder_version: u16,
}

impl StateMatrix {
    pub fn new(
        doc_id: impl Into<String>,
        rows: Array2<f32>,
        encoder_tag: impl Into<String>,
        encoder_version: u16,
    ) -> Result<Self> {
        let sm = Self { doc_id: doc_id.into(), rows, encoder_tag: encoder_tag.into(), encoder_version };
        sm.check_finite()?;
        Ok(sm)
    }

    pub fn line_count(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.rows.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos / self.dim().max(1), pos % self.dim().max(1));
            return Err(Error::Numeric(format!(
                "state matrix {:?} has a non-finite entry at row {}, column {c}",
                self.doc_id,
                r + 1
            )));
        }
        Ok(())
    }

    /// The tag as stored on disk. A nonzero encoder version travels as an
    /// `@N` suffix so files from taggers that do not version stay untouched.
    fn disk_tag(&self) -> String {
        if self.encoder_version == 0 {
            self.encoder_tag.clone()
        } else {
            format!("{}@{}", self.encoder_tag, self.encoder_version)
        }
    }
}

fn split_disk_tag(tag: &str) -> (String, u16) {
    if let Some((name, ver)) = tag.rsplit_once('@') {
        if let Ok(v) = ver.parse::<u16>() {
            if v != 0 && !ver.starts_with('0') {
                return (name.to_owned(), v);
            }
        }
    }
    (tag.to_owned(), 0)
}

// ---------------------------------------------------------------------------
// Mock encoder
// ---------------------------------------------------------------------------

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Identifier/number runs and single punctuation characters. Every line
/// also carries a terminator token, so even blank lines have a feature.
pub fn tokenize(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        let word = c.is_alphanumeric() || c == '_';
        match (word, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(&line[s..i]);
                start = None;
            }
            _ => {}
        }
        if !word && !c.is_whitespace() {
            out.push(&line[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&line[s..]);
    }
    out.push("\n");
    out
}

/// Deterministic, strictly prefix-causal stand-in for a left-to-right LM.
///
/// Each line is feature-hashed into `buckets` signed counts (unit-normalized),
/// projected to `dim` with a fixed Gaussian matrix, and folded into a running
/// accumulator `acc_i = decay * acc_{i-1} + proj(f_i)`. The emitted row is the
/// L2-normalized accumulator, so row `i` only ever sees lines `1..=i`.
#[derive(Debug, Clone)]
pub struct MockEncoder {
    dim: usize,
    seed: u64,
    buckets: usize,
    decay: f64,
    projection: Array2<f64>,
}

impl MockEncoder {
    pub const TAG: &'static str = "mock-prefix-hash";
    pub const VERSION: u16 = 1;
    pub const DEFAULT_BUCKETS: usize = 512;
    pub const DEFAULT_DECAY: f64 = 0.9;

    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(Error::Config(format!("state dimension must be at least 8, got {dim}")));
        }
        let buckets = Self::DEFAULT_BUCKETS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_9a0e_c7ed);
        let projection = Array2::from_shape_simple_fn((buckets, dim), || StandardNormal.sample(&mut rng));
        Ok(Self { dim, seed, buckets, decay: Self::DEFAULT_DECAY, projection })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn line_feature(&self, line: &str) -> Vec<(usize, f64)> {
        let mut counts: Vec<(usize, f64)> = Vec::new();
        for tok in tokenize(line) {
            let h = fnv1a(self.seed, tok.as_bytes());
            let bucket = (h % self.buckets as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            match counts.iter_mut().find(|(b, _)| *b == bucket) {
                Some((_, v)) => *v += sign,
                None => counts.push((bucket, sign)),
            }
        }
        let norm = counts.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            counts.iter_mut().for_each(|(_, v)| *v /= norm);
        }
        counts
    }

    pub fn encode(&self, doc: &SourceDocument) -> Result<StateMatrix> {
        if doc.lines.is_empty() {
            return Err(Error::Config(format!("document {:?} is empty", doc.id)));
        }
        let mut rows = Array2::<f32>::zeros((doc.line_count(), self.dim));
        let mut acc = vec![0.0f64; self.dim];
        for (i, line) in doc.lines.iter().enumerate() {
            acc.iter_mut().for_each(|a| *a *= self.decay);
            for (bucket, w) in self.line_feature(line) {
                let proj = self.projection.row(bucket);
                acc.iter_mut().zip(proj.iter()).for_each(|(a, p)| *a += w * p);
            }
            let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
            let mut row = rows.row_mut(i);
            if norm > 0.0 {
                row.iter_mut().zip(&acc).for_each(|(r, a)| *r = (a / norm) as f32);
            } else {
                row[0] = 1.0;
            }
        }
        StateMatrix::new(doc.id.clone(), rows, Self::TAG, Self::VERSION)
    }
}

/// One-shot helper matching the encoder's constructor arguments.
pub fn encode_causal_mock(doc: &SourceDocument, dim: usize, seed: u64) -> Result<StateMatrix> {
    MockEncoder::new(dim, seed)?.encode(doc)
}

pub fn encode_corpus(docs: &[SourceDocument], dim: usize, seed: u64, exec: Exec) -> Result<Vec<StateMatrix>> {
    let enc = MockEncoder::new(dim, seed)?;
    par::try_map(exec, docs, |d| enc.encode(d))
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

pub fn encode_states<W: Write>(sm: &StateMatrix, mut w: W) -> Result<()> {
    sm.check_finite()?;
    let tag = sm.disk_tag();
    let tag_len =
        u8::try_from(tag.len()).map_err(|_| Error::Format(format!("encoder tag longer than 255 bytes: {tag:?}")))?;
    let m = u32::try_from(sm.line_count()).map_err(|_| Error::Format("too many rows".into()))?;
    let d = u32::try_from(sm.dim()).map_err(|_| Error::Format("dimension too large".into()))?;

    let mut buf = Vec::with_capacity(17 + tag.len() + sm.rows.len() * 4);
    buf.extend_from_slice(&STATE_MAGIC);
    buf.extend_from_slice(&STATE_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&m.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    buf.push(tag_len);
    buf.extend_from_slice(tag.as_bytes());
    for v in sm.rows.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], consumed: u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated { expected: consumed + buf.len() as u64, found: consumed + filled as u64 })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Decode a state file. `cap` bounds the payload allocation implied by the
/// header; oversized headers are rejected before anything is allocated.
pub fn decode_states<R: Read>(mut r: R, doc_id: impl Into<String>, cap: u64) -> Result<StateMatrix> {
    let mut fixed = [0u8; 17];
    read_exact_or_truncated(&mut r, &mut fixed, 0)?;
    let magic: [u8; 4] = fixed[0..4].try_into().unwrap();
    if magic != STATE_MAGIC {
        return Err(Error::BadMagic { expected: STATE_MAGIC, found: magic });
    }
    let version = u16::from_le_bytes([fixed[4], fixed[5]]);
    if version != STATE_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let m = u32::from_le_bytes(fixed[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(fixed[12..16].try_into().unwrap()) as usize;
    let tag_len = fixed[16] as usize;
    if d == 0 && m > 0 {
        return Err(Error::DimensionMismatch("header declares rows of width 0".into()));
    }

    let mut tag = vec![0u8; tag_len];
    read_exact_or_truncated(&mut r, &mut tag, 17)?;
    let tag = String::from_utf8(tag).map_err(|_| Error::Format("encoder tag is not UTF-8".into()))?;

    let payload = (m as u64)
        .checked_mul(d as u64)
        .and_then(|n| n.checked_mul(4))
        .ok_or(Error::TooLarge { requested: u64::MAX, cap })?;
    if payload > cap {
        return Err(Error::TooLarge { requested: payload, cap });
    }
    let mut bytes = vec![0u8; payload as usize];
    read_exact_or_truncated(&mut r, &mut bytes, 17 + tag_len as u64)?;

    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::DimensionMismatch(format!("payload is longer than the {m} x {d} rows the header declares")));
    }

    let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let rows = Array2::from_shape_vec((m, d), values).expect("length checked above");
    let (encoder_tag, encoder_version) = split_disk_tag(&tag);
    let sm = StateMatrix { doc_id: doc_id.into(), rows, encoder_tag, encoder_version };
    sm.check_finite().map_err(|e| Error::Format(e.to_string()))?;
    Ok(sm)
}

pub fn write_states(sm: &StateMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    encode_states(sm, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Read a state file; the document id is recovered from the file name.
pub fn read_states(path: impl AsRef<Path>) -> Result<StateMatrix> {
    read_states_with_cap(path, DEFAULT_READ_CAP)
}

pub fn read_states_with_cap(path: impl AsRef<Path>, cap: u64) -> Result<StateMatrix> {
    let path = path.as_ref();
    let doc_id = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(doc_id_from_file_name)
        .unwrap_or_else(|| path.display().to_string());
    let f = fs::File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Error::Reference(format!("state file {} not found", path.display())),
        _ => e.into(),
    })?;
    decode_states(io::BufReader::new(f), doc_id, cap)
}

/// File name for a document's states. Characters outside
/// `[A-Za-z0-9._-]` are percent-encoded, which keeps the mapping reversible.
pub fn state_file_name(doc_id: &str) -> String {
    let mut out = String::with_capacity(doc_id.len() + 5);
    for b in doc_id.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out.push('.');
    out.push_str(STATE_FILE_EXT);
    out
}

pub fn doc_id_from_file_name(name: &str) -> Option<String> {
    let stem = name.strip_suffix(STATE_FILE_EXT)?.strip_suffix('.')?;
    let bytes = stem.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = stem.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

pub fn state_path(dir: impl AsRef<Path>, doc_id: &str) -> PathBuf {
    dir.as_ref().join(state_file_name(doc_id))
}

/// Every state file in `dir`, sorted by document id.
pub fn list_state_files(dir: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if let Some(id) = path.file_name().and_then(|n| n.to_str()).and_then(doc_id_from_file_name) {
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}
