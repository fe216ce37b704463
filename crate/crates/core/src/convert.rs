//! Feature conversion and the anonymization pipeline.
//!
//! Two conversion rules are supported. Plain kNN conversion replaces every
//! source frame with the mean of its `neighbor_count` most cosine-similar
//! target frames. Codebook conversion replaces it with the single most similar
//! cluster center of a [`QuantizedPool`].
//!
//! Nearest-neighbor ties always resolve to the lower index, and every sum is
//! taken in ascending index order, so results are bit-reproducible and do not
//! depend on how frames are split across threads.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureMatrix, PhoneId, Utterance};
use crate::duration::{apply_duration_plan, DurationModel, DurationPlan};
use crate::error::{Error, Result};
use crate::phonelab::{collapse, PhoneClassifier};
use crate::quantize::QuantizedPool;
use crate::seed::derive_seed;
use crate::select::StrategyKind;
use crate::vector::{cosine_with_norms, dot_lanes, norm, unit_f64};

pub const DEFAULT_NEIGHBOR_COUNT: usize = 4;

/// Where the nearest center is searched in codebook conversion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// All centers of all phones.
    #[default]
    Global,
    /// Only centers of the frame's predicted phone, falling back to global
    /// when the target has no centers for that phone.
    PerPhone,
}

/// One anonymizer configuration, identified as `(a-b)` with `w = a/10` and
/// `b` clusters per phone (`0` disables quantization). A strategy suffix such
/// as `_r` or `_d,1` selects the target selection rule; no suffix means
/// same-gender selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AnonConfig {
    w_tenths: u8,
    pub clusters: usize,
    pub neighbor_count: usize,
    pub selection: StrategyKind,
}

impl AnonConfig {
    pub fn new(w: f64, clusters: usize) -> Result<Self> {
        let tenths = (w * 10.0).round();
        if !(0.0..=10.0).contains(&tenths) || (w * 10.0 - tenths).abs() > 1e-9 {
            return Err(Error::invalid(format!("duration weight {w} is not a multiple of 0.1 in [0, 1]")));
        }
        Ok(Self {
            w_tenths: tenths as u8,
            clusters,
            neighbor_count: DEFAULT_NEIGHBOR_COUNT,
            selection: StrategyKind::SameGender,
        })
    }

    pub fn with_selection(mut self, selection: StrategyKind) -> Self {
        self.selection = selection;
        self
    }

    pub fn with_neighbor_count(mut self, n: usize) -> Self {
        self.neighbor_count = n;
        self
    }

    pub fn w(&self) -> f64 {
        self.w_tenths as f64 / 10.0
    }

    pub fn w_tenths(&self) -> u8 {
        self.w_tenths
    }

    /// `(a-b)` without the strategy suffix.
    pub fn short_id(&self) -> String {
        format!("({}-{})", self.w_tenths, self.clusters)
    }
}

impl fmt::Display for AnonConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.short_id(), self.selection.suffix())
    }
}

impl FromStr for AnonConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::ConfigIdentifier(s.to_string());
        let rest = s.strip_prefix('(').ok_or_else(bad)?;
        let (body, suffix) = rest.split_once(')').ok_or_else(bad)?;
        let (a, b) = body.split_once('-').ok_or_else(bad)?;
        let digits = |t: &str| !t.is_empty() && t.bytes().all(|c| c.is_ascii_digit());
        if !digits(a) || !digits(b) {
            return Err(bad());
        }
        let a: u8 = a.parse().map_err(|_| bad())?;
        let clusters: usize = b.parse().map_err(|_| bad())?;
        if a > 10 {
            return Err(bad());
        }
        let selection = StrategyKind::from_suffix(suffix).ok_or_else(bad)?;
        Ok(Self { w_tenths: a, clusters, neighbor_count: DEFAULT_NEIGHBOR_COUNT, selection })
    }
}

impl Serialize for AnonConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AnonConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn format_config(config: &AnonConfig) -> String {
    config.to_string()
}

pub fn parse_config(s: &str) -> Result<AnonConfig> {
    s.parse()
}

/// Raw target frames with cached unit-normalized copies, for kNN conversion.
///
/// Rows are grouped around pivots chosen by farthest-first traversal; each
/// group stores its angular radius. A query skips a group when the angular
/// triangle inequality shows no row in it can beat the current k-th best, so
/// the result is identical to a full scan.
#[derive(Clone, Debug)]
pub struct KnnIndex {
    frames: FeatureMatrix,
    unit: Vec<f64>,
    groups: Vec<Group>,
    /// Zero rows have no direction and are always scanned.
    zero_rows: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Group {
    pivot: Vec<f64>,
    /// Largest angle between the pivot and a member row.
    radius: f64,
    rows: Vec<usize>,
}

/// Angular slack absorbing rounding in the pruning bound.
const ANGLE_SLACK: f64 = 1e-7;

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    sim: f64,
    index: usize,
}

impl Candidate {
    /// Higher similarity first, then lower index.
    fn beats(self, other: Candidate) -> bool {
        self.sim > other.sim || (self.sim == other.sim && self.index < other.index)
    }
}

fn angle(cos: f64) -> f64 {
    cos.clamp(-1.0, 1.0).acos()
}

impl KnnIndex {
    pub fn new(frames: FeatureMatrix) -> Self {
        let dim = frames.dim();
        let unit: Vec<f64> = frames.iter_rows().flat_map(unit_f64).collect();
        let rows: Vec<&[f64]> = unit.chunks_exact(dim).collect();
        let (nonzero, zero_rows): (Vec<usize>, Vec<usize>) =
            (0..rows.len()).partition(|&i| rows[i].iter().any(|&x| x != 0.0));
        let mut groups = Vec::new();
        if let Some(&first) = nonzero.first() {
            let n_pivots = ((nonzero.len() as f64).sqrt() as usize).clamp(1, 128);
            let mut pivots = vec![first];
            // Best cosine of each row to any chosen pivot, and that pivot.
            let mut best: Vec<(f64, usize)> =
                nonzero.iter().map(|&i| (dot_lanes(rows[i], rows[first]), 0)).collect();
            while pivots.len() < n_pivots {
                let (pos, &(cos, _)) = best
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.0.cmp(&b.0)))
                    .expect("nonempty");
                if cos >= 1.0 {
                    break;
                }
                let p = nonzero[pos];
                let g = pivots.len();
                pivots.push(p);
                for (b, &i) in best.iter_mut().zip(&nonzero) {
                    let c = dot_lanes(rows[i], rows[p]);
                    if c > b.0 {
                        *b = (c, g);
                    }
                }
            }
            groups = pivots
                .iter()
                .map(|&p| Group { pivot: rows[p].to_vec(), radius: 0.0, rows: Vec::new() })
                .collect();
            for (&(cos, g), &i) in best.iter().zip(&nonzero) {
                let group = &mut groups[g];
                group.radius = group.radius.max(angle(cos));
                group.rows.push(i);
            }
            groups.retain(|g| !g.rows.is_empty());
        }
        Self { frames, unit, groups, zero_rows }
    }

    pub fn from_utterances<'a>(utts: impl IntoIterator<Item = &'a Utterance>) -> Result<Self> {
        let mut dim = None;
        let mut data = Vec::new();
        for u in utts {
            let d = *dim.get_or_insert(u.features.dim());
            if d != u.features.dim() {
                return Err(Error::DimensionMismatch { expected: d, actual: u.features.dim() });
            }
            data.extend_from_slice(u.features.as_slice());
        }
        let dim = dim.ok_or(Error::Empty("target pool"))?;
        Ok(Self::new(FeatureMatrix::new(dim, data)?))
    }

    pub fn frames(&self) -> &FeatureMatrix {
        &self.frames
    }

    fn offer(&self, f: &[f64], index: usize, k: usize, best: &mut Vec<Candidate>) {
        let dim = self.frames.dim();
        let cand = Candidate { sim: dot_lanes(f, &self.unit[index * dim..(index + 1) * dim]), index };
        if best.len() == k && !cand.beats(best[k - 1]) {
            return;
        }
        let pos = best.partition_point(|&c| c.beats(cand));
        best.insert(pos, cand);
        best.truncate(k);
    }

    /// Ranks target rows by `⟨frame, row/|row|⟩` (cosine similarity scaled by
    /// the constant `|frame|`), ties going to the lower row index.
    fn nearest(&self, frame: &[f32], k: usize, out: &mut [f32]) {
        let f: Vec<f64> = frame.iter().map(|&x| x as f64).collect();
        let nf = dot_lanes(&f, &f).sqrt();
        let mut best: Vec<Candidate> = Vec::with_capacity(k + 1);
        for &i in &self.zero_rows {
            self.offer(&f, i, k, &mut best);
        }
        let mut order: Vec<(f64, usize)> = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, group)| (if nf > 0.0 { dot_lanes(&f, &group.pivot) / nf } else { 0.0 }, g))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (cos, g) in order {
            let group = &self.groups[g];
            if nf > 0.0 && best.len() == k {
                let gap = (angle(cos) - group.radius - ANGLE_SLACK).max(0.0);
                let bound = nf * gap.cos() + ANGLE_SLACK * nf;
                if bound < best[k - 1].sim {
                    continue;
                }
            }
            for &i in &group.rows {
                self.offer(&f, i, k, &mut best);
            }
        }
        let mut idx: Vec<usize> = best.into_iter().map(|c| c.index).collect();
        idx.sort_unstable();
        mean_rows(&self.frames, &idx, out);
    }

    pub fn convert(&self, source: &FeatureMatrix, neighbor_count: usize) -> Result<FeatureMatrix> {
        if neighbor_count == 0 {
            return Err(Error::invalid("neighbor_count must be at least 1"));
        }
        let dim = self.frames.dim();
        if source.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: source.dim() });
        }
        let k = neighbor_count.min(self.frames.rows());
        let mut out = vec![0.0f32; source.as_slice().len()];
        out.par_chunks_exact_mut(dim)
            .zip(source.as_slice().par_chunks_exact(dim))
            .for_each(|(o, frame)| self.nearest(frame, k, o));
        FeatureMatrix::new(dim, out)
    }
}

fn mean_rows(m: &FeatureMatrix, idx: &[usize], out: &mut [f32]) {
    let mut acc = vec![0.0f64; m.dim()];
    for &i in idx {
        for (a, &v) in acc.iter_mut().zip(m.row(i)) {
            *a += v as f64;
        }
    }
    let n = idx.len() as f64;
    for (o, a) in out.iter_mut().zip(acc) {
        *o = (a / n) as f32;
    }
}

/// Mean of the `neighbor_count` most cosine-similar target frames, per source frame.
pub fn knn_convert(
    source: &FeatureMatrix,
    target_frames: &FeatureMatrix,
    neighbor_count: usize,
) -> Result<FeatureMatrix> {
    KnnIndex::new(target_frames.clone()).convert(source, neighbor_count)
}

/// A codebook with cached norms and per-phone ranges into the flattened
/// center list.
#[derive(Clone, Debug)]
pub struct CodebookIndex {
    pool: QuantizedPool,
    centers: Vec<(PhoneId, Vec<f32>, f64)>,
    ranges: Vec<std::ops::Range<usize>>,
}

impl CodebookIndex {
    pub fn new(pool: QuantizedPool) -> Result<Self> {
        let centers: Vec<_> = pool.iter_centers().map(|(p, c)| (p, c.to_vec(), norm(c))).collect();
        if centers.is_empty() {
            return Err(Error::Empty("quantized pool has no centers"));
        }
        let mut ranges = Vec::with_capacity(pool.alphabet_size());
        let mut start = 0;
        for p in 0..pool.alphabet_size() {
            let n = pool.centers(PhoneId(p as u16)).len() / pool.dim();
            ranges.push(start..start + n);
            start += n;
        }
        Ok(Self { pool, centers, ranges })
    }

    pub fn pool(&self) -> &QuantizedPool {
        &self.pool
    }

    fn nearest_in(&self, frame: &[f32], nf: f64, range: std::ops::Range<usize>) -> usize {
        let mut best = range.start;
        let mut best_sim = f64::NEG_INFINITY;
        for i in range {
            let (_, c, nc) = &self.centers[i];
            let sim = cosine_with_norms(frame, nf, c, *nc);
            if sim > best_sim {
                best_sim = sim;
                best = i;
            }
        }
        best
    }

    pub fn convert(
        &self,
        source: &FeatureMatrix,
        mode: SearchMode,
        source_labels: Option<&[PhoneId]>,
    ) -> Result<FeatureMatrix> {
        let dim = self.pool.dim();
        if source.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: source.dim() });
        }
        let labels = match mode {
            SearchMode::Global => None,
            SearchMode::PerPhone => {
                let l = source_labels
                    .ok_or_else(|| Error::invalid("per-phone search needs source labels"))?;
                if l.len() != source.rows() {
                    return Err(Error::LengthMismatch { left: l.len(), right: source.rows() });
                }
                Some(l)
            }
        };
        let all = 0..self.centers.len();
        let picks: Vec<usize> = (0..source.rows())
            .into_par_iter()
            .map(|t| {
                let frame = source.row(t);
                let nf = norm(frame);
                let range = labels
                    .and_then(|l| self.ranges.get(l[t].index()))
                    .filter(|r| !r.is_empty())
                    .cloned()
                    .unwrap_or(all.clone());
                self.nearest_in(frame, nf, range)
            })
            .collect();
        let mut out = Vec::with_capacity(picks.len() * dim);
        for i in picks {
            out.extend_from_slice(&self.centers[i].1);
        }
        FeatureMatrix::new(dim, out)
    }
}

/// Replaces each frame with its most cosine-similar center.
pub fn quantized_convert(
    source: &FeatureMatrix,
    pool: &QuantizedPool,
    mode: SearchMode,
    source_labels: Option<&[PhoneId]>,
) -> Result<FeatureMatrix> {
    CodebookIndex::new(pool.clone())?.convert(source, mode, source_labels)
}

/// Conversion material of the selected target speaker.
#[derive(Clone, Debug)]
pub enum TargetAssets {
    Frames(KnnIndex),
    Codebook(CodebookIndex),
}

/// Models shared by every utterance of a run.
#[derive(Clone, Copy, Debug)]
pub struct Models<'a> {
    pub classifier: &'a PhoneClassifier,
    pub durations: &'a DurationModel,
}

/// Anonymizes one utterance:
///
/// 1. label frames and collapse them into a transcript with true durations;
/// 2. predict durations, blend with weight `w` and round;
/// 3. resample each phone segment to its new duration;
/// 4. convert with the codebook when `clusters > 0`, else with kNN.
///
/// The output carries a pseudonymous speaker id derived from `(seed,
/// utterance_id)` and no gold labels.
pub fn anonymize_utterance(
    utt: &Utterance,
    config: &AnonConfig,
    assets: &TargetAssets,
    models: Models<'_>,
    mode: SearchMode,
    seed: u64,
) -> Result<Utterance> {
    let labels = models.classifier.classify_frames(&utt.features)?;
    let transcript = collapse(&labels)?;
    let plan = DurationPlan::new(&transcript, models.durations, config.w())?;
    let features = if plan.rounded == plan.truth {
        utt.features.clone()
    } else {
        apply_duration_plan(&utt.features, &transcript, &plan.rounded)?
    };
    let converted = match (config.clusters, assets) {
        (0, TargetAssets::Frames(index)) => index.convert(&features, config.neighbor_count)?,
        (k, TargetAssets::Codebook(index)) if k > 0 => {
            let new_labels: Vec<PhoneId> = transcript
                .phones()
                .iter()
                .zip(&plan.rounded)
                .flat_map(|(&p, &n)| std::iter::repeat_n(p, n))
                .collect();
            index.convert(&features, mode, Some(&new_labels))?
        }
        (k, _) => {
            return Err(Error::invalid(format!(
                "config {config} with {k} clusters needs {} target assets",
                if k > 0 { "codebook" } else { "raw frame" }
            )))
        }
    };
    Ok(Utterance {
        utterance_id: utt.utterance_id.clone(),
        speaker_id: format!("anon-{:016x}", derive_seed(seed, &format!("pseudo/{}", utt.utterance_id))),
        gender: utt.gender,
        split: utt.split,
        features: converted,
        gold_labels: None,
    })
}
