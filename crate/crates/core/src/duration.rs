//! Phone durations: a single-speaker duration table, blending of predicted and
//! true durations, rounding to whole frames, and segment resampling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureMatrix, PhoneId, Utterance};
use crate::error::{Error, Result};
use crate::phonelab::{collapse, PhoneClassifier, Transcript};

/// Mean duration (in frames) per phone, learned from one speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationModel {
    means: BTreeMap<u16, f64>,
    fallback: f64,
}

impl DurationModel {
    pub fn new(means: BTreeMap<u16, f64>, fallback: f64) -> Result<Self> {
        if !(fallback.is_finite() && fallback >= 1.0) {
            return Err(Error::invalid(format!("fallback duration {fallback}")));
        }
        if let Some((p, m)) = means.iter().find(|(_, m)| !(m.is_finite() && **m >= 1.0)) {
            return Err(Error::invalid(format!("duration mean {m} for phone {p}")));
        }
        Ok(Self { means, fallback })
    }

    /// Learns per-phone means of the true durations obtained by labeling and
    /// collapsing each utterance. The split must contain exactly one speaker.
    pub fn train<'a>(
        utterances: impl IntoIterator<Item = &'a Utterance>,
        classifier: &PhoneClassifier,
    ) -> Result<Self> {
        let mut speaker: Option<&str> = None;
        let mut sums: BTreeMap<u16, (f64, usize)> = BTreeMap::new();
        let (mut total, mut count) = (0.0, 0usize);
        for utt in utterances {
            match speaker {
                None => speaker = Some(&utt.speaker_id),
                Some(s) if s != utt.speaker_id => {
                    return Err(Error::invalid(format!(
                        "duration model needs a single speaker, found {s} and {}",
                        utt.speaker_id
                    )))
                }
                _ => {}
            }
            let transcript = collapse(&classifier.classify_frames(&utt.features)?)?;
            for (&p, &d) in transcript.phones().iter().zip(transcript.durations()) {
                let e = sums.entry(p.0).or_insert((0.0, 0));
                e.0 += d as f64;
                e.1 += 1;
                total += d as f64;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Empty("duration-train split"));
        }
        let means = sums.into_iter().map(|(p, (s, n))| (p, s / n as f64)).collect();
        Self::new(means, total / count as f64)
    }

    pub fn fallback(&self) -> f64 {
        self.fallback
    }

    pub fn mean(&self, phone: PhoneId) -> Option<f64> {
        self.means.get(&phone.0).copied()
    }

    pub fn predict_phone(&self, phone: PhoneId) -> f64 {
        self.mean(phone).unwrap_or(self.fallback)
    }

    pub fn predict(&self, phones: &[PhoneId]) -> Vec<f64> {
        phones.iter().map(|&p| self.predict_phone(p)).collect()
    }

    /// `{"<phone>": mean, ..., "fallback": mean}`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (p, m) in &self.means {
            map.insert(p.to_string(), serde_json::json!(m));
        }
        map.insert("fallback".into(), serde_json::json!(self.fallback));
        serde_json::Value::Object(map)
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| Error::invalid("duration table is not an object"))?;
        let mut means = BTreeMap::new();
        let mut fallback = None;
        for (key, v) in obj {
            let m = v.as_f64().ok_or_else(|| Error::invalid(format!("non-numeric entry {key}")))?;
            if key == "fallback" {
                fallback = Some(m);
            } else {
                let p: u16 = key.parse().map_err(|_| Error::invalid(format!("bad phone key {key:?}")))?;
                means.insert(p, m);
            }
        }
        Self::new(means, fallback.ok_or_else(|| Error::invalid("missing fallback"))?)
    }
}

impl Serialize for DurationModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for DurationModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        Self::from_json(&v).map_err(serde::de::Error::custom)
    }
}

/// `d = w·p + (1 − w)·t`, componentwise.
pub fn blend(predicted: &[f64], truth: &[f64], w: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("duration weight {w} outside [0, 1]")));
    }
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch { left: predicted.len(), right: truth.len() });
    }
    Ok(predicted.iter().zip(truth).map(|(&p, &t)| w * p + (1.0 - w) * t).collect())
}

/// Round half up, then clamp to at least one frame.
pub fn round_durations(durations: &[f64]) -> Result<Vec<usize>> {
    durations
        .iter()
        .map(|&d| {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::invalid(format!("duration {d} must be positive")));
            }
            Ok(((d + 0.5).floor() as usize).max(1))
        })
        .collect()
}

/// Source row indices for resampling `n_old` frames to `n_new`.
///
/// `idx(j) = ⌊j·(n_old−1)/(n_new−1) + ½⌋` for `n_new > 1` (exact integer
/// arithmetic); a single output frame takes the middle row `⌊(n_old−1)/2⌋`.
pub fn resample_indices(n_old: usize, n_new: usize) -> Result<Vec<usize>> {
    if n_old == 0 || n_new == 0 {
        return Err(Error::Empty("segment"));
    }
    if n_new == 1 {
        return Ok(vec![(n_old - 1) / 2]);
    }
    let (a, b) = ((n_old - 1) as u128, (n_new - 1) as u128);
    Ok((0..n_new as u128).map(|j| ((2 * j * a + b) / (2 * b)) as usize).collect())
}

/// Evenly samples rows of a segment; rows are copied, never interpolated.
pub fn resample_segment(segment: &FeatureMatrix, n_new: usize) -> Result<FeatureMatrix> {
    segment.select_rows(&resample_indices(segment.rows(), n_new)?)
}

/// A duration plan for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationPlan {
    pub w: f64,
    pub truth: Vec<usize>,
    pub predicted: Vec<f64>,
    pub blended: Vec<f64>,
    pub rounded: Vec<usize>,
}

impl DurationPlan {
    pub fn new(transcript: &Transcript, model: &DurationModel, w: f64) -> Result<Self> {
        let truth = transcript.durations().to_vec();
        let t: Vec<f64> = truth.iter().map(|&d| d as f64).collect();
        let predicted = model.predict(transcript.phones());
        let blended = blend(&predicted, &t, w)?;
        let rounded = round_durations(&blended)?;
        Ok(Self { w, truth, predicted, blended, rounded })
    }
}

/// Resamples each transcript segment of `features` to its new duration.
pub fn apply_duration_plan(
    features: &FeatureMatrix,
    transcript: &Transcript,
    rounded: &[usize],
) -> Result<FeatureMatrix> {
    if transcript.total_frames() != features.rows() {
        return Err(Error::LengthMismatch { left: transcript.total_frames(), right: features.rows() });
    }
    if rounded.len() != transcript.len() {
        return Err(Error::LengthMismatch { left: rounded.len(), right: transcript.len() });
    }
    let mut indices = Vec::with_capacity(rounded.iter().sum());
    let mut start = 0;
    for (&n_old, &n_new) in transcript.durations().iter().zip(rounded) {
        indices.extend(resample_indices(n_old, n_new)?.into_iter().map(|i| start + i));
        start += n_old;
    }
    features.select_rows(&indices)
}
