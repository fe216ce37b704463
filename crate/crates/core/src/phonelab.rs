//! Frame-level phone labeling, run-length transcripts and labeling metrics.
//!
//! The labeler is a nearest-prototype classifier under cosine similarity: one
//! mean vector per phone seen in training. Downstream code only consumes the
//! label sequence, and the labeling error rate on synthetic data is controlled
//! through the generator's noise level.

use rayon::prelude::*;

use crate::corpus::{FeatureMatrix, PhoneId, Utterance};
use crate::error::{Error, Result};
use crate::vector::{cosine_with_norms, norm};

#[derive(Clone, Debug, PartialEq)]
pub struct PhoneClassifier {
    alphabet_size: usize,
    dim: usize,
    // (phone, prototype, norm) for phones present in training, ascending phone.
    entries: Vec<(PhoneId, Vec<f32>, f64)>,
}

impl PhoneClassifier {
    /// Fits one prototype per phone: the mean of that phone's frames.
    pub fn train<'a, I>(alphabet_size: usize, labeled_frames: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f32], PhoneId)>,
    {
        let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; alphabet_size];
        let mut dim = None;
        for (frame, phone) in labeled_frames {
            let d = *dim.get_or_insert(frame.len());
            if frame.len() != d {
                return Err(Error::DimensionMismatch { expected: d, actual: frame.len() });
            }
            if phone.index() >= alphabet_size {
                return Err(Error::invalid(format!(
                    "phone {phone} outside alphabet of size {alphabet_size}"
                )));
            }
            let (acc, n) = sums[phone.index()].get_or_insert_with(|| (vec![0.0; d], 0));
            for (a, &v) in acc.iter_mut().zip(frame) {
                *a += v as f64;
            }
            *n += 1;
        }
        let dim = dim.ok_or(Error::Empty("no labeled frames"))?;
        let entries = sums
            .into_iter()
            .enumerate()
            .filter_map(|(p, s)| {
                s.map(|(acc, n)| {
                    let proto: Vec<f32> = acc.iter().map(|&a| (a / n as f64) as f32).collect();
                    let nm = norm(&proto);
                    (PhoneId(p as u16), proto, nm)
                })
            })
            .collect();
        Ok(Self { alphabet_size, dim, entries })
    }

    /// Trains on the gold labels of the given utterances; unlabeled ones are skipped.
    pub fn train_on_utterances<'a>(
        alphabet_size: usize,
        utterances: impl IntoIterator<Item = &'a Utterance>,
    ) -> Result<Self> {
        let frames = utterances.into_iter().flat_map(|u| {
            u.gold_labels
                .iter()
                .flat_map(move |labels| u.features.iter_rows().zip(labels.iter().copied()))
        });
        Self::train(alphabet_size, frames)
    }

    pub fn from_prototypes(
        alphabet_size: usize,
        dim: usize,
        prototypes: Vec<(PhoneId, Vec<f32>)>,
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(prototypes.len());
        for (phone, proto) in prototypes {
            if phone.index() >= alphabet_size {
                return Err(Error::invalid(format!("phone {phone} outside alphabet")));
            }
            if proto.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: proto.len() });
            }
            if proto.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite prototype"));
            }
            let nm = norm(&proto);
            entries.push((phone, proto, nm));
        }
        if entries.is_empty() {
            return Err(Error::Empty("classifier has no prototypes"));
        }
        entries.sort_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid("duplicate phone prototype"));
        }
        Ok(Self { alphabet_size, dim, entries })
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototypes(&self) -> impl Iterator<Item = (PhoneId, &[f32])> {
        self.entries.iter().map(|(p, v, _)| (*p, v.as_slice()))
    }

    pub fn prototype(&self, phone: PhoneId) -> Option<&[f32]> {
        self.entries.iter().find(|e| e.0 == phone).map(|e| e.1.as_slice())
    }

    /// Most cosine-similar prototype; ties go to the lowest phone index.
    pub fn classify_frame(&self, frame: &[f32]) -> PhoneId {
        let nf = norm(frame);
        let mut best = self.entries[0].0;
        let mut best_sim = f64::NEG_INFINITY;
        for (phone, proto, np) in &self.entries {
            let sim = cosine_with_norms(frame, nf, proto, *np);
            if sim > best_sim {
                best_sim = sim;
                best = *phone;
            }
        }
        best
    }

    pub fn classify_frames(&self, features: &FeatureMatrix) -> Result<Vec<PhoneId>> {
        if features.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: features.dim() });
        }
        Ok(features
            .as_slice()
            .par_chunks_exact(self.dim)
            .map(|frame| self.classify_frame(frame))
            .collect())
    }
}

/// A phone sequence without adjacent repeats, with a duration in frames per phone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcript {
    phones: Vec<PhoneId>,
    durations: Vec<usize>,
}

impl Transcript {
    pub fn new(phones: Vec<PhoneId>, durations: Vec<usize>) -> Result<Self> {
        if phones.len() != durations.len() {
            return Err(Error::LengthMismatch { left: phones.len(), right: durations.len() });
        }
        if phones.is_empty() {
            return Err(Error::Empty("transcript"));
        }
        if phones.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("transcript has adjacent duplicate phones"));
        }
        if durations.contains(&0) {
            return Err(Error::invalid("transcript duration 0"));
        }
        Ok(Self { phones, durations })
    }

    pub fn phones(&self) -> &[PhoneId] {
        &self.phones
    }

    pub fn durations(&self) -> &[usize] {
        &self.durations
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Inverse of [`collapse`].
    pub fn expand(&self) -> Vec<PhoneId> {
        self.phones
            .iter()
            .zip(&self.durations)
            .flat_map(|(&p, &n)| std::iter::repeat_n(p, n))
            .collect()
    }
}

/// Run-length encodes a label sequence.
pub fn collapse(labels: &[PhoneId]) -> Result<Transcript> {
    if labels.is_empty() {
        return Err(Error::Empty("label sequence"));
    }
    let mut phones = Vec::new();
    let mut durations: Vec<usize> = Vec::new();
    for &l in labels {
        if phones.last() == Some(&l) {
            *durations.last_mut().unwrap() += 1;
        } else {
            phones.push(l);
            durations.push(1);
        }
    }
    Ok(Transcript { phones, durations })
}

pub fn frame_accuracy(pred: &[PhoneId], gold: &[PhoneId]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: gold.len() });
    }
    if gold.is_empty() {
        return Err(Error::Empty("label sequence"));
    }
    let hits = pred.iter().zip(gold).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// One step of a minimal edit script, as indices into (reference, hypothesis).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match(usize, usize),
    Substitute(usize, usize),
    Delete(usize),
    Insert(usize),
}

fn distance_table<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<Vec<usize>> {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut t = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in t[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = t[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
        }
    }
    t
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    distance_table(reference, hypothesis)[reference.len()][hypothesis.len()]
}

/// A minimal edit script; on ties the backtrace prefers the diagonal.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<EditOp> {
    let t = distance_table(reference, hypothesis);
    let (mut i, mut j) = (reference.len(), hypothesis.len());
    let mut ops = Vec::with_capacity(i.max(j));
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if t[i][j] == t[i - 1][j - 1] + usize::from(!same) {
                ops.push(if same {
                    EditOp::Match(i - 1, j - 1)
                } else {
                    EditOp::Substitute(i - 1, j - 1)
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && t[i][j] == t[i - 1][j] + 1 {
            ops.push(EditOp::Delete(i - 1));
            i -= 1;
        } else {
            ops.push(EditOp::Insert(j - 1));
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Edit distance between phone sequences divided by the reference length.
pub fn phone_error_rate(pred: &Transcript, reference: &Transcript) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference transcript"));
    }
    Ok(edit_distance(reference.phones(), pred.phones()) as f64 / reference.len() as f64)
}
