//! Episode files.
//!
//! An episode is stored as a versioned JSON document:
//!
//! ```text
//! {
//!   "format": "protoseg-episode",
//!   "version": 1,
//!   "seed": 7,
//!   "spec": { ...generator settings, or null... },
//!   "classes": [3, 11],
//!   "support": [ { "height", "width", "dim", "features": <payload>,
//!                  "masks": [ { "class": 3, "bits": "0011..." } ] } ],
//!   "aux":     [ { "height", "width", "dim", "features": <payload>, "tags": [3] } ],
//!   "query":   [ { "height", "width", "dim", "features": <payload>, "tags": [3, 11] } ],
//!   "query_labels": [ { "height", "width", "labels": [0, 0, 3, ...] } ],
//!   "truth": { "class_means": [ { "class": 3, "mean": <payload> } ],
//!              "background_mean": <payload>, "distractor_means": [<payload>] }
//! }
//! ```
//!
//! Feature values are row-major `height x width x dim`. A payload is one of
//! `{"plain": [f64, ...]}`, `{"base64": "..."}` (little-endian f64 bytes) or
//! `{"blob": n}`, an index into the blobs of the binary container. Mask bits
//! are a string of `0`/`1`, one character per pixel, row-major.
//!
//! The binary container is the magic `PSEGBIN\0`, a little-endian `u32`
//! version, a `u64` header length followed by the JSON header (with every
//! payload as a blob index), a `u64` blob count, then each blob as a `u64`
//! value count followed by that many little-endian f64 values.
//!
//! All three encodings round-trip bit-exactly.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Episode, GroundTruth, SyntheticSpec};
use crate::features::{BinaryMask, FeatureMap};
use crate::fusion::AuxImage;
use crate::metric::{LabelMap, SupportImage};
use crate::{Error, Result};

pub const FORMAT_NAME: &str = "protoseg-episode";
pub const FORMAT_VERSION: u32 = 1;
pub const BINARY_MAGIC: &[u8; 8] = b"PSEGBIN\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeFormat {
    /// JSON with feature values written as numbers.
    #[default]
    Json,
    /// JSON with feature values as base64 little-endian f64.
    Base64,
    /// Length-prefixed little-endian binary blobs behind a JSON header.
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum Payload {
    Plain(Vec<f64>),
    Base64(String),
    Blob(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskRecord {
    class: usize,
    bits: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SupportRecord {
    height: usize,
    width: usize,
    dim: usize,
    features: Payload,
    masks: Vec<MaskRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaggedRecord {
    height: usize,
    width: usize,
    dim: usize,
    features: Payload,
    tags: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassMeanRecord {
    class: usize,
    mean: Payload,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthRecord {
    class_means: Vec<ClassMeanRecord>,
    background_mean: Payload,
    distractor_means: Vec<Payload>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    format: String,
    version: u32,
    seed: u64,
    spec: Option<SyntheticSpec>,
    classes: Vec<usize>,
    support: Vec<SupportRecord>,
    aux: Vec<TaggedRecord>,
    query: Vec<TaggedRecord>,
    query_labels: Vec<LabelRecord>,
    truth: TruthRecord,
}

struct Encoder<'a> {
    format: EpisodeFormat,
    blobs: Vec<&'a [f64]>,
}

impl<'a> Encoder<'a> {
    fn payload(&mut self, values: &'a [f64]) -> Payload {
        match self.format {
            EpisodeFormat::Json => Payload::Plain(values.to_vec()),
            EpisodeFormat::Base64 => {
                let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
                Payload::Base64(STANDARD.encode(bytes))
            }
            EpisodeFormat::Binary => {
                self.blobs.push(values);
                Payload::Blob(self.blobs.len() - 1)
            }
        }
    }

    fn tagged(&mut self, img: &'a AuxImage) -> TaggedRecord {
        let f = &img.features;
        TaggedRecord {
            height: f.height(),
            width: f.width(),
            dim: f.dim(),
            features: self.payload(f.values()),
            tags: img.tags.clone(),
        }
    }
}

fn mask_bits(mask: &BinaryMask) -> String {
    mask.bits().iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn parse_bits(height: usize, width: usize, bits: &str) -> Result<BinaryMask> {
    let bits = bits
        .chars()
        .map(|ch| match ch {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::Format(format!("mask bit `{other}` is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    BinaryMask::new(height, width, bits)
}

fn build_record<'a>(episode: &'a Episode, enc: &mut Encoder<'a>) -> EpisodeRecord {
    let view = episode.inference();
    let scoring = episode.scoring();
    let support = view
        .support
        .iter()
        .map(|s| SupportRecord {
            height: s.features.height(),
            width: s.features.width(),
            dim: s.features.dim(),
            features: enc.payload(s.features.values()),
            masks: s
                .masks
                .iter()
                .map(|(c, m)| MaskRecord {
                    class: *c,
                    bits: mask_bits(m),
                })
                .collect(),
        })
        .collect();
    let aux = view.aux.iter().map(|a| enc.tagged(a)).collect();
    let query = view.query.iter().map(|q| enc.tagged(q)).collect();
    let query_labels = scoring
        .query_truth
        .iter()
        .map(|gt| LabelRecord {
            height: gt.height(),
            width: gt.width(),
            labels: gt.labels().to_vec(),
        })
        .collect();
    let truth = scoring.truth;
    let truth = TruthRecord {
        class_means: truth
            .class_means
            .iter()
            .map(|(c, m)| ClassMeanRecord {
                class: *c,
                mean: enc.payload(m),
            })
            .collect(),
        background_mean: enc.payload(&truth.background_mean),
        distractor_means: truth.distractor_means.iter().map(|m| enc.payload(m)).collect(),
    };
    EpisodeRecord {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        seed: episode.seed(),
        spec: episode.spec().cloned(),
        classes: episode.classes().to_vec(),
        support,
        aux,
        query,
        query_labels,
        truth,
    }
}

/// Serialize an episode in the requested encoding.
pub fn write_episode(episode: &Episode, format: EpisodeFormat) -> Result<Vec<u8>> {
    let mut enc = Encoder {
        format,
        blobs: Vec::new(),
    };
    let record = build_record(episode, &mut enc);
    match format {
        EpisodeFormat::Json | EpisodeFormat::Base64 => {
            let mut text = serde_json::to_vec_pretty(&record)?;
            text.push(b'\n');
            Ok(text)
        }
        EpisodeFormat::Binary => {
            let header = serde_json::to_vec(&record)?;
            let mut out = Vec::with_capacity(header.len() + 64);
            out.extend_from_slice(BINARY_MAGIC);
            out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
            out.extend_from_slice(&(header.len() as u64).to_le_bytes());
            out.extend_from_slice(&header);
            out.extend_from_slice(&(enc.blobs.len() as u64).to_le_bytes());
            for blob in &enc.blobs {
                out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
                for v in blob.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Ok(out)
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("binary episode is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format("length does not fit in memory".into()))
    }
}

fn read_blobs(bytes: &[u8]) -> Result<(EpisodeRecord, Vec<Vec<f64>>)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(BINARY_MAGIC.len())? != BINARY_MAGIC {
        return Err(Error::Format("not a binary episode file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported binary episode version {version}")));
    }
    let header_len = r.u64()?;
    let record: EpisodeRecord = serde_json::from_slice(r.take(header_len)?)?;
    let count = r.u64()?;
    let mut blobs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u64()?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("blob too large".into()))?)?;
        blobs.push(
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    if r.at != bytes.len() {
        return Err(Error::Format("trailing bytes after the last blob".into()));
    }
    Ok((record, blobs))
}

struct Decoder {
    blobs: Vec<Vec<f64>>,
}

impl Decoder {
    fn values(&self, p: Payload) -> Result<Vec<f64>> {
        match p {
            Payload::Plain(v) => Ok(v),
            Payload::Base64(s) => {
                let bytes = STANDARD
                    .decode(s.as_bytes())
                    .map_err(|e| Error::Format(format!("bad base64 payload: {e}")))?;
                if bytes.len() % 8 != 0 {
                    return Err(Error::Format("base64 payload is not a whole number of f64".into()));
                }
                Ok(bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect())
            }
            Payload::Blob(i) => self
                .blobs
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Format(format!("blob {i} does not exist"))),
        }
    }

    fn features(&self, height: usize, width: usize, dim: usize, p: Payload) -> Result<FeatureMap> {
        FeatureMap::new(height, width, dim, self.values(p)?)
    }

    fn tagged(&self, r: TaggedRecord) -> Result<AuxImage> {
        Ok(AuxImage {
            features: self.features(r.height, r.width, r.dim, r.features)?,
            tags: r.tags,
        })
    }
}

fn episode_from_record(record: EpisodeRecord, dec: Decoder) -> Result<Episode> {
    if record.format != FORMAT_NAME {
        return Err(Error::Format(format!("unexpected format `{}`", record.format)));
    }
    if record.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported episode version {}", record.version)));
    }
    let support = record
        .support
        .into_iter()
        .map(|s| {
            let masks = s
                .masks
                .iter()
                .map(|m| Ok((m.class, parse_bits(s.height, s.width, &m.bits)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(SupportImage {
                features: dec.features(s.height, s.width, s.dim, s.features)?,
                masks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aux = record.aux.into_iter().map(|a| dec.tagged(a)).collect::<Result<Vec<_>>>()?;
    let query = record.query.into_iter().map(|q| dec.tagged(q)).collect::<Result<Vec<_>>>()?;
    let query_truth = record
        .query_labels
        .into_iter()
        .map(|l| LabelMap::new(l.height, l.width, l.labels))
        .collect::<Result<Vec<_>>>()?;
    let t = record.truth;
    let truth = GroundTruth {
        class_means: t
            .class_means
            .into_iter()
            .map(|m| Ok((m.class, dec.values(m.mean)?)))
            .collect::<Result<Vec<_>>>()?,
        background_mean: dec.values(t.background_mean)?,
        distractor_means: t
            .distractor_means
            .into_iter()
            .map(|m| dec.values(m))
            .collect::<Result<Vec<_>>>()?,
    };
    Episode::from_parts(
        record.seed,
        record.spec,
        record.classes,
        support,
        aux,
        query,
        query_truth,
        truth,
    )
}

/// Parse an episode written by [`write_episode`] in any encoding.
pub fn read_episode(bytes: &[u8]) -> Result<Episode> {
    if bytes.starts_with(BINARY_MAGIC) {
        let (record, blobs) = read_blobs(bytes)?;
        episode_from_record(record, Decoder { blobs })
    } else {
        let record: EpisodeRecord = serde_json::from_slice(bytes)?;
        episode_from_record(record, Decoder { blobs: Vec::new() })
    }
}
