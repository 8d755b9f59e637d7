//! Seeded synthetic decode traces and the binary trace file format.
//!
//! All generators draw from `Xoshiro256PlusPlus` seeded through SplitMix64
//! (`seed_from_u64`), so a trace is a pure function of its seed and
//! parameters.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "QKVTRACE"
//! version    u8       1
//! head_dim   u32
//! length     u32      number of steps
//! payload    f32 * 3 * head_dim * length, per step: key, value, query
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::error::{QuestError, Result};
use crate::vector::dot;

pub const TRACE_MAGIC: &[u8; 8] = b"QKVTRACE";
pub const TRACE_VERSION: u8 = 1;
const HEADER_LEN: u64 = 8 + 1 + 4 + 4;

/// Retries allowed when a planted needle fails to dominate.
const MAX_NEEDLE_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
    pub query: Vec<f32>,
}

/// One head's decode sequence. Step `t` appends `(key, value)` and then its
/// query attends tokens `0..=t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub head_dim: usize,
    pub steps: Vec<TraceStep>,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 {
            return Err(QuestError::TraceFormat("head_dim must be >= 1".into()));
        }
        for step in &self.steps {
            for v in [&step.key, &step.value, &step.query] {
                if v.len() != self.head_dim {
                    return Err(QuestError::DimensionMismatch {
                        expected: self.head_dim,
                        got: v.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Where a trace came from; exported as a one-row CSV alongside experiments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceMeta {
    pub kind: &'static str,
    pub seed: u64,
    pub head_dim: usize,
    pub length: usize,
    pub needle_position: Option<usize>,
    pub alignment: Option<f64>,
    pub noise_scale: Option<f64>,
    /// Needle logit minus the largest distractor logit (unscaled dot products).
    pub margin: Option<f64>,
    /// Standard deviation of the distractor logits for the probe query.
    pub noise_logit_std: Option<f64>,
    pub attempts: u64,
}

impl TraceMeta {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.serialize(self)?;
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeedleSpec {
    pub needle_position: usize,
    /// Length of the planted key's component along the probe direction.
    pub alignment: f64,
    /// Scale of the Gaussian noise added to the planted key.
    pub noise_scale: f64,
}

#[derive(Debug, Clone)]
pub struct NeedleTrace {
    pub trace: DecodeTrace,
    pub meta: TraceMeta,
}

fn rng_for(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn unit_normal(head_dim: usize) -> Normal<f32> {
    Normal::new(0.0, 1.0 / (head_dim as f32).sqrt()).expect("finite positive std")
}

fn draw(rng: &mut Xoshiro256PlusPlus, dist: &Normal<f32>, head_dim: usize) -> Vec<f32> {
    (0..head_dim).map(|_| dist.sample(rng)).collect()
}

/// Trace with i.i.d. `N(0, 1/head_dim)` entries.
pub fn gen_gaussian_trace(seed: u64, length: usize, head_dim: usize) -> Result<DecodeTrace> {
    if length == 0 {
        return Err(QuestError::InvalidArgument(
            "trace length must be >= 1".into(),
        ));
    }
    if head_dim == 0 {
        return Err(QuestError::InvalidArgument("head_dim must be >= 1".into()));
    }
    let mut rng = rng_for(seed);
    let dist = unit_normal(head_dim);
    let steps = (0..length)
        .map(|_| TraceStep {
            key: draw(&mut rng, &dist, head_dim),
            value: draw(&mut rng, &dist, head_dim),
            query: draw(&mut rng, &dist, head_dim),
        })
        .collect();
    Ok(DecodeTrace { head_dim, steps })
}

pub fn gaussian_meta(seed: u64, length: usize, head_dim: usize) -> TraceMeta {
    TraceMeta {
        kind: "gaussian",
        seed,
        head_dim,
        length,
        needle_position: None,
        alignment: None,
        noise_scale: None,
        margin: None,
        noise_logit_std: None,
        attempts: 1,
    }
}

fn sub_seed(seed: u64, attempt: u64) -> u64 {
    seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Gaussian trace with one planted key aligned to the final query.
///
/// The needle key is `alignment * q_hat + noise_scale * z`, with `q_hat` the
/// unit probe direction and `z ~ N(0, 1/head_dim)`. If the needle is not the
/// strict argmax logit for the probe, the trace is regenerated from the next
/// sub-seed. `alignment == 0` plants nothing and returns the plain Gaussian
/// trace.
pub fn gen_needle_trace(
    seed: u64,
    length: usize,
    head_dim: usize,
    spec: NeedleSpec,
) -> Result<NeedleTrace> {
    if spec.needle_position >= length {
        return Err(QuestError::InvalidArgument(format!(
            "needle position {} outside trace of length {length}",
            spec.needle_position
        )));
    }
    if [spec.alignment, spec.noise_scale]
        .iter()
        .any(|x| x.is_nan() || *x < 0.0)
    {
        return Err(QuestError::InvalidArgument(
            "alignment and noise_scale must be non-negative".into(),
        ));
    }
    let mut meta = TraceMeta {
        kind: "needle",
        needle_position: Some(spec.needle_position),
        alignment: Some(spec.alignment),
        noise_scale: Some(spec.noise_scale),
        ..gaussian_meta(seed, length, head_dim)
    };
    if spec.alignment == 0.0 {
        return Ok(NeedleTrace {
            trace: gen_gaussian_trace(seed, length, head_dim)?,
            meta,
        });
    }

    for attempt in 0..MAX_NEEDLE_ATTEMPTS {
        let s = sub_seed(seed, attempt);
        let mut trace = gen_gaussian_trace(s, length, head_dim)?;
        let mut rng = rng_for(s ^ 0xD1B5_4A32_D192_ED03);
        let dist = unit_normal(head_dim);
        let probe = trace.steps[length - 1].query.clone();
        let norm = dot(&probe, &probe).sqrt();
        if norm == 0.0 {
            continue;
        }
        let noise = draw(&mut rng, &dist, head_dim);
        let needle: Vec<f32> = probe
            .iter()
            .zip(&noise)
            .map(|(&q, &z)| {
                (spec.alignment * f64::from(q) / norm + spec.noise_scale * f64::from(z)) as f32
            })
            .collect();
        trace.steps[spec.needle_position].key = needle;

        let logits: Vec<f64> = trace.steps.iter().map(|st| dot(&probe, &st.key)).collect();
        let needle_logit = logits[spec.needle_position];
        let distractors = logits
            .iter()
            .enumerate()
            .filter(|(t, _)| *t != spec.needle_position)
            .map(|(_, &l)| l);
        let (count, sum, sum_sq, max) = distractors.fold(
            (0usize, 0.0f64, 0.0f64, f64::NEG_INFINITY),
            |(n, s, s2, m), l| (n + 1, s + l, s2 + l * l, m.max(l)),
        );
        if count > 0 && needle_logit <= max {
            continue;
        }
        meta.seed = seed;
        meta.attempts = attempt + 1;
        if count > 0 {
            let mean = sum / count as f64;
            meta.margin = Some(needle_logit - max);
            meta.noise_logit_std = Some((sum_sq / count as f64 - mean * mean).max(0.0).sqrt());
        }
        return Ok(NeedleTrace { trace, meta });
    }
    Err(QuestError::InvalidArgument(format!(
        "needle failed to dominate after {MAX_NEEDLE_ATTEMPTS} attempts; raise alignment"
    )))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> QuestError + '_ {
    move |source| QuestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_trace<W: Write>(trace: &DecodeTrace, mut out: W) -> std::io::Result<()> {
    out.write_all(TRACE_MAGIC)?;
    out.write_all(&[TRACE_VERSION])?;
    out.write_all(&(trace.head_dim as u32).to_le_bytes())?;
    out.write_all(&(trace.steps.len() as u32).to_le_bytes())?;
    for step in &trace.steps {
        for v in [&step.key, &step.value, &step.query] {
            for x in v.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
    }
    out.flush()
}

pub fn write_trace(path: &Path, trace: &DecodeTrace) -> Result<()> {
    trace.validate()?;
    if u32::try_from(trace.head_dim).is_err() || u32::try_from(trace.len()).is_err() {
        return Err(QuestError::TraceFormat(
            "trace dimensions exceed u32".into(),
        ));
    }
    let file = File::create(path).map_err(io_err(path))?;
    encode_trace(trace, BufWriter::new(file)).map_err(io_err(path))
}

pub fn decode_trace(bytes: &[u8]) -> Result<DecodeTrace> {
    if bytes.len() < TRACE_MAGIC.len() || &bytes[..8] != TRACE_MAGIC {
        return Err(QuestError::TraceFormat("bad magic".into()));
    }
    if (bytes.len() as u64) < HEADER_LEN {
        return Err(QuestError::TraceTruncated {
            expected: HEADER_LEN,
            found: bytes.len() as u64,
        });
    }
    let version = bytes[8];
    if version != TRACE_VERSION {
        return Err(QuestError::TraceFormat(format!(
            "unsupported version {version}"
        )));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let head_dim = u32_at(9) as usize;
    let length = u32_at(13) as usize;
    if head_dim == 0 {
        return Err(QuestError::TraceFormat("head_dim is zero".into()));
    }
    let payload = &bytes[HEADER_LEN as usize..];
    let expected = 3 * 4 * head_dim as u64 * length as u64;
    if (payload.len() as u64) < expected {
        return Err(QuestError::TraceTruncated {
            expected: HEADER_LEN + expected,
            found: bytes.len() as u64,
        });
    }
    if payload.len() as u64 > expected {
        return Err(QuestError::TraceFormat(format!(
            "{} trailing bytes after payload",
            payload.len() as u64 - expected
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut take = || -> Vec<f32> { floats.by_ref().take(head_dim).collect() };
    let steps = (0..length)
        .map(|_| TraceStep {
            key: take(),
            value: take(),
            query: take(),
        })
        .collect();
    Ok(DecodeTrace { head_dim, steps })
}

pub fn read_trace(path: &Path) -> Result<DecodeTrace> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    decode_trace(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoded(trace: &DecodeTrace) -> Vec<u8> {
        let mut buf = Vec::new();
        encode_trace(trace, &mut buf).unwrap();
        buf
    }

    #[test]
    fn same_seed_same_trace() {
        assert_eq!(
            gen_gaussian_trace(7, 32, 8).unwrap(),
            gen_gaussian_trace(7, 32, 8).unwrap()
        );
    }

    #[test]
    fn different_seeds_differ_in_first_step() {
        let a = gen_gaussian_trace(1, 1, 16).unwrap();
        let b = gen_gaussian_trace(2, 1, 16).unwrap();
        assert_eq!(a.len(), 1);
        assert_ne!(a.steps[0], b.steps[0]);
    }

    #[test]
    fn zero_length_rejected() {
        assert!(gen_gaussian_trace(0, 0, 4).is_err());
    }

    #[test]
    fn needle_dominates() {
        let spec = NeedleSpec {
            needle_position: 300,
            alignment: 10.0,
            noise_scale: 0.1,
        };
        let nt = gen_needle_trace(11, 1024, 32, spec).unwrap();
        let probe = &nt.trace.steps[1023].query;
        let logits: Vec<f64> = nt.trace.steps.iter().map(|s| dot(probe, &s.key)).collect();
        let argmax = crate::metrics::top_n_indices(&logits, 1)[0];
        assert_eq!(argmax, 300);
        assert!(nt.meta.margin.unwrap() > 0.0);
    }

    #[test]
    fn needle_at_last_position() {
        let spec = NeedleSpec {
            needle_position: 99,
            alignment: 5.0,
            noise_scale: 0.1,
        };
        let nt = gen_needle_trace(3, 100, 16, spec).unwrap();
        assert_eq!(nt.meta.needle_position, Some(99));
        assert!(gen_needle_trace(
            3,
            100,
            16,
            NeedleSpec {
                needle_position: 100,
                ..spec
            }
        )
        .is_err());
    }

    #[test]
    fn zero_alignment_is_plain_gaussian() {
        let spec = NeedleSpec {
            needle_position: 5,
            alignment: 0.0,
            noise_scale: 0.1,
        };
        let nt = gen_needle_trace(9, 64, 8, spec).unwrap();
        assert_eq!(nt.trace, gen_gaussian_trace(9, 64, 8).unwrap());
    }

    #[test]
    fn header_layout() {
        let t = gen_gaussian_trace(0, 2, 3).unwrap();
        let bytes = encoded(&t);
        assert_eq!(&bytes[..8], b"QKVTRACE");
        assert_eq!(bytes[8], 1);
        assert_eq!(&bytes[9..13], &3u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 17 + 2 * 3 * 3 * 4);
        assert_eq!(&bytes[17..21], &t.steps[0].key[0].to_le_bytes());
    }

    #[test]
    fn truncated_and_bad_magic() {
        let t = gen_gaussian_trace(0, 4, 4).unwrap();
        let bytes = encoded(&t);
        assert!(matches!(
            decode_trace(&bytes[..bytes.len() - 1]),
            Err(QuestError::TraceTruncated { .. })
        ));
        assert!(matches!(
            decode_trace(&bytes[..12]),
            Err(QuestError::TraceTruncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_trace(&bad),
            Err(QuestError::TraceFormat(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            decode_trace(&long),
            Err(QuestError::TraceFormat(_))
        ));
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(decode_trace(&v2), Err(QuestError::TraceFormat(_))));
    }

    #[test]
    fn write_rejects_ragged_trace() {
        let mut t = gen_gaussian_trace(0, 2, 4).unwrap();
        t.steps[1].value.pop();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_trace(&dir.path().join("t.bin"), &t),
            Err(QuestError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn meta_csv_has_header() {
        let mut buf = Vec::new();
        gaussian_meta(5, 10, 4).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("kind,seed,head_dim,length,needle_position"));
        assert!(text.contains("gaussian,5,4,10,"));
    }
}
