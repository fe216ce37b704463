//! Corpus data model, synthetic generator and file I/O.

mod container;
mod generate;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{
    decode_classifier, decode_corpus, decode_pool, encode_classifier, encode_corpus, encode_pool,
    load_corpus, save_corpus, MAGIC, FORMAT_VERSION,
};
pub use generate::{generate_corpus, CorpusSpec};

/// Default phone alphabet size (CMU phone set without stress).
pub const DEFAULT_ALPHABET_SIZE: usize = 41;
/// Default feature dimension.
pub const DEFAULT_FEATURE_DIM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhoneId(pub u16);

impl PhoneId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for PhoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Female, Gender::Male];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }

    pub fn other(self) -> Gender {
        match self {
            Gender::Female => Gender::Male,
            Gender::Male => Gender::Female,
        }
    }
}

/// Role of an utterance in the evaluation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    AttackerTrain,
    Enroll,
    Trial,
    TargetPool,
    DurationTrain,
}

impl Split {
    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Split::AttackerTrain => 0,
            Split::Enroll => 1,
            Split::Trial => 2,
            Split::TargetPool => 3,
            Split::DurationTrain => 4,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => Split::AttackerTrain,
            1 => Split::Enroll,
            2 => Split::Trial,
            3 => Split::TargetPool,
            4 => Split::DurationTrain,
            _ => return None,
        })
    }
}

/// A `T × D` sequence of frames, stored row-major as `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f32>,
}

#[derive(Deserialize)]
struct RawMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl TryFrom<RawMatrix> for FeatureMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        FeatureMatrix::new(raw.dim, raw.data)
    }
}

impl FeatureMatrix {
    /// Requires `dim ≥ 1`, at least one row, and only finite entries.
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if data.is_empty() {
            return Err(Error::Empty("feature matrix has no frames"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value in frame {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or(Error::Empty("feature matrix has no frames"))?;
        let mut data = Vec::with_capacity(dim * rows.len());
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: row.len() });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::invalid(format!("row {i} out of range {}", self.rows())));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(self.dim, data)
    }

    /// Per-column mean over all frames, in f64.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.dim];
        for row in self.iter_rows() {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        let n = self.rows() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: String,
    pub gender: Gender,
    pub split: Split,
    pub features: FeatureMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_labels: Option<Vec<PhoneId>>,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        if let Some(labels) = &self.gold_labels {
            if labels.len() != self.features.rows() {
                return Err(Error::LengthMismatch {
                    left: labels.len(),
                    right: self.features.rows(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerInfo {
    pub speaker_id: String,
    pub gender: Gender,
}

/// Identity parameters the generator planted in one speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub gender: Gender,
    pub timbre_offset: Vec<f64>,
    pub timbre_strength: f64,
    pub per_phone_duration_mean: Vec<f64>,
    pub duration_jitter: f64,
}

/// Ground truth kept alongside generated corpora so tests can compare learned
/// quantities against what was planted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTruth {
    /// `P × D` phone prototypes.
    pub prototypes: FeatureMatrix,
    pub profiles: Vec<SpeakerProfile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub alphabet_size: usize,
    pub feature_dim: usize,
    pub speakers: Vec<SpeakerInfo>,
    pub utterances: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<GeneratorTruth>,
}

impl Corpus {
    /// Checks every structural invariant of a corpus.
    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size == 0 || self.alphabet_size > u16::MAX as usize {
            return Err(Error::invalid(format!("alphabet size {}", self.alphabet_size)));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature dimension 0"));
        }
        let mut ids = std::collections::HashMap::new();
        for s in &self.speakers {
            if ids.insert(s.speaker_id.as_str(), s.gender).is_some() {
                return Err(Error::invalid(format!("duplicate speaker id {}", s.speaker_id)));
            }
        }
        for u in &self.utterances {
            match ids.get(u.speaker_id.as_str()) {
                None => {
                    return Err(Error::invalid(format!(
                        "utterance {} references unknown speaker {}",
                        u.utterance_id, u.speaker_id
                    )))
                }
                Some(&g) if g != u.gender => {
                    return Err(Error::invalid(format!(
                        "utterance {} gender disagrees with speaker",
                        u.utterance_id
                    )))
                }
                _ => {}
            }
            if u.features.dim() != self.feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.feature_dim,
                    actual: u.features.dim(),
                });
            }
            u.validate()?;
            if let Some(labels) = &u.gold_labels {
                if let Some(bad) = labels.iter().find(|p| p.index() >= self.alphabet_size) {
                    return Err(Error::invalid(format!(
                        "phone {bad} outside alphabet of size {}",
                        self.alphabet_size
                    )));
                }
            }
        }
        if let Some(truth) = &self.truth {
            if truth.prototypes.rows() != self.alphabet_size
                || truth.prototypes.dim() != self.feature_dim
            {
                return Err(Error::invalid("prototype matrix shape disagrees with corpus"));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerInfo> {
        self.speakers.iter().find(|s| s.speaker_id == id)
    }

    pub fn profile(&self, id: &str) -> Option<&SpeakerProfile> {
        self.truth.as_ref()?.profiles.iter().find(|p| p.speaker_id == id)
    }

    /// Speakers that own at least one utterance in `split`, in corpus order.
    pub fn speakers_in(&self, split: Split) -> Vec<&SpeakerInfo> {
        self.speakers
            .iter()
            .filter(|s| self.split(split).any(|u| u.speaker_id == s.speaker_id))
            .collect()
    }
}
