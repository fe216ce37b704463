//! The semi-informed attacker and the verification protocol.
//!
//! The attacker mean-pools frames into utterance embeddings and weights each
//! dimension by its Fisher ratio (between-speaker over within-speaker
//! variance), estimated on data anonymized by the system under attack.
//! Enrollment and trial embeddings are compared with cosine similarity and
//! the equal error rate is reported per gender, folded into `[0, 50]`, and
//! averaged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureMatrix, Gender, Utterance};
use crate::error::{Error, Result};
use crate::phonelab::{align, collapse, phone_error_rate, EditOp, PhoneClassifier};

pub const FISHER_EPSILON: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackerModel {
    /// Raw Fisher ratio per dimension.
    pub fisher: Vec<f64>,
    /// Weights applied to embeddings; uniform when the model is uninformative.
    pub weights: Vec<f64>,
    /// False when no dimension separates the training speakers.
    pub informative: bool,
}

impl AttackerModel {
    /// Uniform weights, i.e. plain mean pooling.
    pub fn uniform(dim: usize) -> Self {
        Self { fisher: vec![0.0; dim], weights: vec![1.0; dim], informative: false }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

/// Fits Fisher-ratio weights from utterances labeled with their true source
/// speaker. Needs at least two speakers with at least two utterances each.
pub fn train_attacker(samples: &[(&str, &FeatureMatrix)]) -> Result<AttackerModel> {
    let dim = samples.first().ok_or(Error::Empty("attacker training data"))?.1.dim();
    let mut by_speaker: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for (spk, feats) in samples {
        if feats.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: feats.dim() });
        }
        by_speaker.entry(spk).or_default().push(feats.mean_row());
    }
    if by_speaker.len() < 2 {
        return Err(Error::Degenerate("attacker needs at least two speakers".into()));
    }
    if let Some((s, _)) = by_speaker.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::Degenerate(format!("speaker {s} has fewer than two utterances")));
    }
    let n_spk = by_speaker.len() as f64;
    let speaker_means: Vec<Vec<f64>> = by_speaker
        .values()
        .map(|embs| {
            let n = embs.len() as f64;
            (0..dim).map(|j| embs.iter().map(|e| e[j]).sum::<f64>() / n).collect()
        })
        .collect();
    let grand: Vec<f64> =
        (0..dim).map(|j| speaker_means.iter().map(|m| m[j]).sum::<f64>() / n_spk).collect();
    let mut fisher = vec![0.0; dim];
    for j in 0..dim {
        let between =
            speaker_means.iter().map(|m| (m[j] - grand[j]).powi(2)).sum::<f64>() / n_spk;
        let within = by_speaker
            .values()
            .zip(&speaker_means)
            .map(|(embs, m)| {
                embs.iter().map(|e| (e[j] - m[j]).powi(2)).sum::<f64>() / embs.len() as f64
            })
            .sum::<f64>()
            / n_spk;
        fisher[j] = between / (within + FISHER_EPSILON);
    }
    let informative = fisher.iter().any(|&f| f > 1e-9);
    let weights = if informative { fisher.clone() } else { vec![1.0; dim] };
    Ok(AttackerModel { fisher, weights, informative })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding(pub Vec<f64>);

/// Mean-pools each utterance, averages across utterances, and scales
/// dimension `j` by `sqrt(weight_j)`.
pub fn embed(utterances: &[&FeatureMatrix], attacker: &AttackerModel) -> Result<SpeakerEmbedding> {
    if utterances.is_empty() {
        return Err(Error::Empty("embedding input"));
    }
    let dim = attacker.dim();
    let mut acc = vec![0.0; dim];
    for u in utterances {
        if u.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: u.dim() });
        }
        for (a, m) in acc.iter_mut().zip(u.mean_row()) {
            *a += m;
        }
    }
    let n = utterances.len() as f64;
    Ok(SpeakerEmbedding(
        acc.iter().zip(&attacker.weights).map(|(a, w)| a / n * w.sqrt()).collect(),
    ))
}

/// Cosine similarity of two embeddings.
pub fn score(enroll: &SpeakerEmbedding, trial: &SpeakerEmbedding) -> Result<f64> {
    let (a, b) = (&enroll.0, &trial.0);
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), actual: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine score of a zero embedding"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer_percent: f64,
    pub threshold: f64,
}

/// Equal error rate of `(score, is_target)` trials; a trial is accepted when
/// its score is at least the threshold.
///
/// Operating points are evaluated at every distinct score, at midpoints
/// between consecutive distinct scores and at `+∞`. The EER is where the
/// false-acceptance and false-rejection rates cross, linearly interpolated
/// between the two adjacent operating points that bracket the crossing.
pub fn compute_eer(trials: &[(f64, bool)]) -> Result<Eer> {
    if trials.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::invalid("non-finite trial score"));
    }
    let n_target = trials.iter().filter(|t| t.1).count();
    let n_nontarget = trials.len() - n_target;
    if n_target == 0 || n_nontarget == 0 {
        return Err(Error::Degenerate("EER needs both target and nontarget trials".into()));
    }
    let mut sorted = trials.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (threshold, FAR, FRR) in increasing threshold order.
    let mut points: Vec<(f64, f64, f64)> = Vec::with_capacity(2 * sorted.len() + 1);
    let (nt, nn) = (n_target as f64, n_nontarget as f64);
    // Counts of trials strictly below the current threshold.
    let (mut below_t, mut below_n) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        points.push((s, (n_nontarget - below_n) as f64 / nn, below_t as f64 / nt));
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                below_t += 1;
            } else {
                below_n += 1;
            }
            i += 1;
        }
        let next = if i < sorted.len() { 0.5 * (s + sorted[i].0) } else { f64::INFINITY };
        points.push((next, (n_nontarget - below_n) as f64 / nn, below_t as f64 / nt));
    }
    Ok(crossing(&points))
}

fn crossing(points: &[(f64, f64, f64)]) -> Eer {
    for w in points.windows(2) {
        let (ta, fa_a, fr_a) = w[0];
        let (tb, fa_b, fr_b) = w[1];
        let (da, db) = (fa_a - fr_a, fa_b - fr_b);
        if da > 0.0 && db <= 0.0 {
            let alpha = da / (da - db);
            let eer = fa_a + alpha * (fa_b - fa_a);
            let threshold = if tb.is_infinite() { ta } else { ta + alpha * (tb - ta) };
            return Eer { eer_percent: 100.0 * eer, threshold };
        }
    }
    // The first point always has FAR = 1, FRR = 0 and the last FAR = 0,
    // FRR = 1, so a crossing exists.
    unreachable!("FAR − FRR changes sign over the sweep")
}

/// Replaces EERs above 50% with `100 − EER`.
pub fn fold_eer(eer_percent: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&eer_percent) {
        return Err(Error::invalid(format!("EER {eer_percent} outside [0, 100]")));
    }
    Ok(eer_percent.min(100.0 - eer_percent))
}

pub fn gender_averaged_eer(eer_female: f64, eer_male: f64) -> Result<f64> {
    for e in [eer_female, eer_male] {
        if !(0.0..=50.0).contains(&e) {
            return Err(Error::invalid(format!("folded EER {e} outside [0, 50]")));
        }
    }
    Ok(0.5 * (eer_female + eer_male))
}

/// Area under the ROC curve (probability that a target outscores a
/// nontarget, ties counting one half).
pub fn auc(trials: &[(f64, bool)]) -> f64 {
    let targets: Vec<f64> = trials.iter().filter(|t| t.1).map(|t| t.0).collect();
    let nontargets: Vec<f64> = trials.iter().filter(|t| !t.1).map(|t| t.0).collect();
    let mut wins = 0.0;
    for &t in &targets {
        for &n in &nontargets {
            wins += if t > n {
                1.0
            } else if t == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (targets.len() * nontargets.len()) as f64
}

/// One verification trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll_speaker: String,
    pub trial_utterance: String,
    pub is_same_speaker: bool,
    pub gender: Gender,
}

/// Every same-gender (enrolled speaker, trial utterance) pair.
pub fn build_trials(enroll: &[(&str, Gender)], trials: &[&Utterance]) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for &(spk, gender) in enroll {
        for utt in trials.iter().filter(|u| u.gender == gender) {
            out.push(Trial {
                enroll_speaker: spk.to_string(),
                trial_utterance: utt.utterance_id.clone(),
                is_same_speaker: utt.speaker_id == spk,
                gender,
            });
        }
    }
    for g in Gender::ALL {
        let target = out.iter().filter(|t| t.gender == g && t.is_same_speaker).count();
        let nontarget = out.iter().filter(|t| t.gender == g && !t.is_same_speaker).count();
        if target == 0 || nontarget == 0 {
            return Err(Error::Degenerate(format!(
                "{} trials need both target and nontarget pairs ({target}/{nontarget})",
                g.as_str()
            )));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub enroll_spk: String,
    pub trial_utt: String,
    pub gender: Gender,
    pub label: u8,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialCounts {
    pub target: usize,
    pub nontarget: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub per_proxy: f64,
    pub duration_distortion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub eer_female: f64,
    pub eer_male: f64,
    pub eer_averaged: f64,
    pub raw_eer_female: f64,
    pub raw_eer_male: f64,
    pub threshold_female: f64,
    pub threshold_male: f64,
    pub trials_female: TrialCounts,
    pub trials_male: TrialCounts,
    pub attacker_informative: bool,
    pub utility: UtilityReport,
}

/// Per-gender EERs of scored trials, folded and averaged.
pub fn privacy_report(
    scores: &[ScoredTrial],
    attacker_informative: bool,
    utility: UtilityReport,
) -> Result<PrivacyReport> {
    let per_gender = |g: Gender| -> Result<(Eer, TrialCounts)> {
        let trials: Vec<(f64, bool)> =
            scores.iter().filter(|s| s.gender == g).map(|s| (s.score, s.label == 1)).collect();
        let counts = TrialCounts {
            target: trials.iter().filter(|t| t.1).count(),
            nontarget: trials.iter().filter(|t| !t.1).count(),
        };
        Ok((compute_eer(&trials)?, counts))
    };
    let (f, tf) = per_gender(Gender::Female)?;
    let (m, tm) = per_gender(Gender::Male)?;
    let eer_female = fold_eer(f.eer_percent)?;
    let eer_male = fold_eer(m.eer_percent)?;
    Ok(PrivacyReport {
        eer_female,
        eer_male,
        eer_averaged: gender_averaged_eer(eer_female, eer_male)?,
        raw_eer_female: f.eer_percent,
        raw_eer_male: m.eer_percent,
        threshold_female: f.threshold,
        threshold_male: m.threshold,
        trials_female: tf,
        trials_male: tm,
        attacker_informative,
        utility,
    })
}

/// Phone-fidelity and duration-distortion proxies over paired utterances.
///
/// `per_proxy` is the mean PER of the anonymized transcript against the
/// source transcript (both obtained with `classifier`). `duration_distortion`
/// is the mean over utterances of `Σ|d_anon − d_src| / Σ d_src`, summed over
/// phones aligned (match or substitution) by the minimal edit script.
pub fn utility_proxies(
    pairs: &[(&Utterance, &Utterance)],
    classifier: &PhoneClassifier,
) -> Result<UtilityReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("utility pairs"));
    }
    let mut per_sum = 0.0;
    let mut dist_sum = 0.0;
    for (src, anon) in pairs {
        if src.utterance_id != anon.utterance_id {
            return Err(Error::invalid(format!(
                "unpaired utterances {} and {}",
                src.utterance_id, anon.utterance_id
            )));
        }
        let ts = collapse(&classifier.classify_frames(&src.features)?)?;
        let ta = collapse(&classifier.classify_frames(&anon.features)?)?;
        per_sum += phone_error_rate(&ta, &ts)?;
        let (mut diff, mut base) = (0.0, 0.0);
        for op in align(ts.phones(), ta.phones()) {
            if let EditOp::Match(i, j) | EditOp::Substitute(i, j) = op {
                let (ds, da) = (ts.durations()[i] as f64, ta.durations()[j] as f64);
                diff += (da - ds).abs();
                base += ds;
            }
        }
        dist_sum += if base > 0.0 { diff / base } else { 0.0 };
    }
    let n = pairs.len() as f64;
    Ok(UtilityReport { per_proxy: per_sum / n, duration_distortion: dist_sum / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fm(rows: &[&[f32]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn score_examples() {
        let e = |v: &[f64]| SpeakerEmbedding(v.to_vec());
        assert!((score(&e(&[1.0, 2.0]), &e(&[1.0, 2.0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(score(&e(&[1.0, 0.0]), &e(&[0.0, 3.0])).unwrap(), 0.0);
        assert!((score(&e(&[1.0, 1.0]), &e(&[-2.0, -2.0])).unwrap() + 1.0).abs() < 1e-15);
        assert!(score(&e(&[0.0, 0.0]), &e(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn eer_examples() {
        let sep = [(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
        let r = compute_eer(&sep).unwrap();
        assert_eq!(r.eer_percent, 0.0);
        assert!(r.threshold > 0.2 && r.threshold <= 0.8);
        let sym = [(0.1, true), (0.1, false), (0.5, true), (0.5, false), (0.7, true), (0.7, false)];
        assert!((compute_eer(&sym).unwrap().eer_percent - 50.0).abs() < 1e-12);
        let inverted = [(0.1, true), (0.9, false)];
        assert_eq!(compute_eer(&inverted).unwrap().eer_percent, 100.0);
        assert!(compute_eer(&[(0.1, true)]).is_err());
        assert!(compute_eer(&[(f64::NAN, true), (0.0, false)]).is_err());
    }

    #[test]
    fn fold_and_average() {
        assert_eq!(fold_eer(52.0).unwrap(), 48.0);
        assert_eq!(fold_eer(49.6).unwrap(), 49.6);
        assert_eq!(fold_eer(50.0).unwrap(), 50.0);
        assert!(fold_eer(100.5).is_err());
        assert!(fold_eer(-0.1).is_err());
        assert_eq!(gender_averaged_eer(48.0, 48.0).unwrap(), 48.0);
        assert_eq!(gender_averaged_eer(44.0, 50.0).unwrap(), 47.0);
        assert!(gender_averaged_eer(60.0, 40.0).is_err());
    }

    #[test]
    fn attacker_weights() {
        // Two speakers differing only in dimension 0.
        let a1 = fm(&[&[1.0, 0.5, 2.0]]);
        let a2 = fm(&[&[1.1, -0.5, 2.0]]);
        let b1 = fm(&[&[-1.0, 0.5, 2.0]]);
        let b2 = fm(&[&[-1.1, -0.5, 2.0]]);
        let m = train_attacker(&[("a", &a1), ("a", &a2), ("b", &b1), ("b", &b2)]).unwrap();
        let max_other = m.weights[1].max(m.weights[2]);
        assert!(m.weights[0] >= 10.0 * max_other, "{:?}", m.weights);
        assert!(m.informative);
        let again = train_attacker(&[("a", &a1), ("a", &a2), ("b", &b1), ("b", &b2)]).unwrap();
        assert_eq!(m, again);

        let same = fm(&[&[1.0, 2.0]]);
        let m = train_attacker(&[("a", &same), ("a", &same), ("b", &same), ("b", &same)]).unwrap();
        assert!(m.fisher.iter().all(|&f| f.abs() < 1e-9));
        assert!(!m.informative);
        assert_eq!(m.weights, vec![1.0, 1.0]);

        assert!(matches!(train_attacker(&[("a", &a1), ("a", &a2)]), Err(Error::Degenerate(_))));
        assert!(matches!(
            train_attacker(&[("a", &a1), ("a", &a2), ("b", &b1)]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn embedding_examples() {
        let u = fm(&[&[1.0, 2.0], &[3.0, 6.0]]);
        let uniform = AttackerModel::uniform(2);
        assert_eq!(embed(&[&u], &uniform).unwrap().0, vec![2.0, 4.0]);
        assert_eq!(embed(&[&u, &u], &uniform).unwrap(), embed(&[&u], &uniform).unwrap());
        assert!(embed(&[], &uniform).is_err());
        let weighted = AttackerModel { fisher: vec![4.0, 1.0], weights: vec![4.0, 1.0], informative: true };
        assert_eq!(embed(&[&u], &weighted).unwrap().0, vec![4.0, 4.0]);
    }

    // Direct counting at every candidate threshold, then the same crossing rule.
    fn brute_eer(trials: &[(f64, bool)]) -> f64 {
        let mut cands: Vec<f64> = trials.iter().map(|t| t.0).collect();
        cands.sort_by(f64::total_cmp);
        cands.dedup();
        let mids: Vec<f64> = cands.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        cands.extend(mids);
        cands.push(f64::INFINITY);
        cands.sort_by(f64::total_cmp);
        let nt = trials.iter().filter(|t| t.1).count() as f64;
        let nn = trials.len() as f64 - nt;
        let pts: Vec<(f64, f64)> = cands
            .iter()
            .map(|&th| {
                let fa = trials.iter().filter(|t| !t.1 && t.0 >= th).count() as f64 / nn;
                let fr = trials.iter().filter(|t| t.1 && t.0 < th).count() as f64 / nt;
                (fa, fr)
            })
            .collect();
        for w in pts.windows(2) {
            let (da, db) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
            if da > 0.0 && db <= 0.0 {
                let a = da / (da - db);
                return 100.0 * (w[0].0 + a * (w[1].0 - w[0].0));
            }
        }
        unreachable!()
    }

    proptest! {
        #[test]
        fn eer_matches_enumeration(
            trials in proptest::collection::vec((0u8..20, any::<bool>()), 2..60)
        ) {
            let trials: Vec<(f64, bool)> = trials.into_iter().map(|(s, l)| (s as f64 / 7.0, l)).collect();
            prop_assume!(trials.iter().any(|t| t.1) && trials.iter().any(|t| !t.1));
            let e = compute_eer(&trials).unwrap().eer_percent;
            prop_assert!((e - brute_eer(&trials)).abs() < 1e-9);
        }

        #[test]
        fn eer_invariances(
            trials in proptest::collection::vec((-1.0f64..1.0, any::<bool>()), 2..80)
        ) {
            prop_assume!(trials.iter().any(|t| t.1) && trials.iter().any(|t| !t.1));
            let e = compute_eer(&trials).unwrap().eer_percent;
            let mapped: Vec<_> = trials.iter().map(|&(s, l)| ((3.0 * s).exp() + 2.0, l)).collect();
            prop_assert!((compute_eer(&mapped).unwrap().eer_percent - e).abs() < 1e-9);
            let doubled: Vec<_> = trials.iter().chain(&trials).copied().collect();
            prop_assert!((compute_eer(&doubled).unwrap().eer_percent - e).abs() < 1e-9);
        }

        #[test]
        fn fold_is_symmetric(x in 0.0f64..=100.0) {
            prop_assert!((fold_eer(x).unwrap() - fold_eer(100.0 - x).unwrap()).abs() < 1e-12);
        }
    }
}
