//! On-disk formats. All binary layouts are little-endian regardless of host.
//!
//! * `.svxf` feature files: magic "SVXF", u32 version, u32 T, u32 d, then
//!   T*d f32 values in row-major (time-major) order.
//! * prediction files: one `key=value` record per line, UTF-8.
//! * checkpoints: magic "XVCK", config hash, step counter, RNG state, and
//!   length-prefixed named f64 tensors (parameters and optimizer moments).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{EventClass, EventPrediction, GroundTruthEvent, Span};

// ── helpers ──────────────────────────────────────────────────────────

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Parse(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} available",
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

// ── feature files ────────────────────────────────────────────────────

pub const SVXF_MAGIC: &[u8; 4] = b"SVXF";
pub const SVXF_VERSION: u32 = 1;

pub fn svxf_bytes(features: &Tensor) -> Result<Vec<u8>> {
    if !features.is_matrix() {
        return Err(Error::Shape("feature file expects a [T, d] matrix".into()));
    }
    let (t, d) = (features.rows(), features.cols());
    let mut buf = Vec::with_capacity(16 + t * d * 4);
    buf.extend_from_slice(SVXF_MAGIC);
    put_u32(&mut buf, SVXF_VERSION);
    put_u32(&mut buf, t as u32);
    put_u32(&mut buf, d as u32);
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn svxf_parse(bytes: &[u8]) -> Result<Tensor> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(4, "magic")?;
    if magic != SVXF_MAGIC {
        return Err(Error::Parse(format!(
            "bad magic at offset 0: expected \"SVXF\", got {magic:?}"
        )));
    }
    let version = c.u32("version")?;
    if version != SVXF_VERSION {
        return Err(Error::Parse(format!(
            "unsupported feature-file version {version} at offset 4"
        )));
    }
    let t = c.u32("frame count")? as usize;
    let d = c.u32("feature dim")? as usize;
    let payload = c.take(t * d * 4, "feature payload")?;
    if c.pos != bytes.len() {
        return Err(Error::Parse(format!(
            "trailing bytes: expected file length {}, got {}",
            c.pos,
            bytes.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![t, d], data)
}

pub fn write_svxf(path: &Path, features: &Tensor) -> Result<()> {
    std::fs::write(path, svxf_bytes(features)?)?;
    Ok(())
}

pub fn read_svxf(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    svxf_parse(&bytes)
}

// ── prediction files ─────────────────────────────────────────────────

pub fn prediction_line(video_id: &str, p: &EventPrediction) -> String {
    format!(
        "video_id={} t_st={:.6} t_ed={:.6} fg_score={:.6} error_prob={:.6} class={}",
        video_id,
        p.span.start,
        p.span.end,
        p.fg_score,
        p.error_prob,
        p.predicted_class().as_str()
    )
}

pub fn write_predictions(path: &Path, rows: &[(String, EventPrediction)]) -> Result<()> {
    let mut out = String::new();
    for (id, p) in rows {
        out.push_str(&prediction_line(id, p));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn parse_predictions(text: &str) -> Result<Vec<(String, EventPrediction)>> {
    let mut rows = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut video_id = None;
        let mut t_st = None;
        let mut t_ed = None;
        let mut fg = None;
        let mut err = None;
        let mut class = None;
        for field in line.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(|| {
                Error::Parse(format!("prediction line {}: field '{field}' lacks '='", lineno + 1))
            })?;
            match key {
                "video_id" => video_id = Some(value.to_string()),
                "t_st" => t_st = value.parse::<f64>().ok(),
                "t_ed" => t_ed = value.parse::<f64>().ok(),
                "fg_score" => fg = value.parse::<f64>().ok(),
                "error_prob" => err = value.parse::<f64>().ok(),
                "class" => class = EventClass::parse(value),
                other => {
                    return Err(Error::Parse(format!(
                        "prediction line {}: unknown field '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        let (Some(video_id), Some(t_st), Some(t_ed), Some(fg), Some(err), Some(_)) =
            (video_id, t_st, t_ed, fg, err, class)
        else {
            return Err(Error::Parse(format!(
                "prediction line {}: missing or malformed fields",
                lineno + 1
            )));
        };
        rows.push((
            video_id,
            EventPrediction {
                span: Span::new(t_st, t_ed),
                fg_score: fg,
                error_prob: err,
                query_index: rows.len(),
                caption: None,
            },
        ));
    }
    Ok(rows)
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, EventPrediction)>> {
    parse_predictions(&std::fs::read_to_string(path)?)
}

// ── ground-truth sidecar files (same key=value shape) ────────────────

pub fn gt_line(video_id: &str, e: &GroundTruthEvent) -> String {
    format!(
        "video_id={} t_st={:.6} t_ed={:.6} error={}",
        video_id,
        e.span.start,
        e.span.end,
        if e.error { 1 } else { 0 }
    )
}

pub fn write_ground_truth(path: &Path, rows: &[(String, GroundTruthEvent)]) -> Result<()> {
    let mut out = String::new();
    for (id, e) in rows {
        out.push_str(&gt_line(id, e));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── checkpoints ──────────────────────────────────────────────────────

pub const CKPT_MAGIC: &[u8; 4] = b"XVCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    /// Named tensors in a fixed order: model parameters first, then
    /// optimizer moments under `adam.m.` / `adam.v.` prefixes.
    pub tensors: Vec<(String, Tensor)>,
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut buf, CKPT_VERSION);
    put_u64(&mut buf, ckpt.config_hash);
    put_u64(&mut buf, ckpt.step);
    buf.extend_from_slice(&ckpt.rng_seed);
    buf.extend_from_slice(&ckpt.rng_word_pos.to_le_bytes());
    put_u32(&mut buf, ckpt.tensors.len() as u32);
    for (name, tensor) in &ckpt.tensors {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, tensor.shape().len() as u32);
        for &dim in tensor.shape() {
            put_u32(&mut buf, dim as u32);
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn checkpoint_parse(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::Parse(format!(
            "bad magic at offset 0: expected \"XVCK\", got {magic:?}"
        )));
    }
    let version = c.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let config_hash = c.u64("config hash")?;
    let step = c.u64("step")?;
    let rng_seed: [u8; 32] = c.take(32, "rng seed")?.try_into().unwrap();
    let rng_word_pos = u128::from_le_bytes(c.take(16, "rng position")?.try_into().unwrap());
    let count = c.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = String::from_utf8(c.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?;
        let ndim = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = c.take(numel * 8, "tensor payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Parse(format!(
            "trailing bytes: expected checkpoint length {}, got {}",
            c.pos,
            bytes.len()
        )));
    }
    Ok(Checkpoint { config_hash, step, rng_seed, rng_word_pos, tensors })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(ckpt))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_parse(&std::fs::read(path)?)
}
