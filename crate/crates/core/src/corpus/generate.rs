use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    Corpus, FeatureMatrix, Gender, GeneratorTruth, PhoneId, SpeakerInfo, SpeakerProfile, Split,
    Utterance, DEFAULT_ALPHABET_SIZE, DEFAULT_FEATURE_DIM,
};
use crate::error::{Error, Result};
use crate::seed::keyed_rng;

/// Parameters of the synthetic corpus.
///
/// Source speakers are split into attacker-train speakers and evaluation
/// speakers; evaluation speakers contribute `enroll_utterances` enrollment
/// utterances and the remainder as trials. Target-pool speakers and the single
/// duration-train speaker are generated with the same process.
///
/// Identity is planted through two independent channels: a timbre offset added
/// to every frame (`timbre_strength`, `gender_separation`) and a per-phone
/// duration table (`duration_signal`, `duration_spread`).
///
/// Phone prototypes occupy the leading `content_dims` coordinates and timbre
/// offsets the trailing `speaker_dims` coordinates; with both equal to
/// `feature_dim` the two share every axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub eval_speakers: usize,
    pub female_fraction: f64,
    pub utterances_per_speaker: usize,
    pub enroll_utterances: usize,
    pub phones_per_utterance: usize,
    pub num_target_speakers: usize,
    pub target_utterances: usize,
    pub duration_train_utterances: usize,
    pub alphabet_size: usize,
    pub feature_dim: usize,
    pub content_dims: Option<usize>,
    pub speaker_dims: Option<usize>,
    pub prototype_scale: f64,
    pub noise_scale: f64,
    pub timbre_strength: f64,
    pub gender_separation: f64,
    pub duration_signal: bool,
    pub duration_base_min: f64,
    pub duration_base_max: f64,
    pub duration_spread: f64,
    pub duration_jitter: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_speakers: 20,
            eval_speakers: 10,
            female_fraction: 0.5,
            utterances_per_speaker: 12,
            enroll_utterances: 4,
            phones_per_utterance: 60,
            num_target_speakers: 20,
            target_utterances: 30,
            duration_train_utterances: 40,
            alphabet_size: DEFAULT_ALPHABET_SIZE,
            feature_dim: DEFAULT_FEATURE_DIM,
            content_dims: None,
            speaker_dims: None,
            prototype_scale: 3.0,
            noise_scale: 0.6,
            timbre_strength: 0.6,
            gender_separation: 1.0,
            duration_signal: true,
            duration_base_min: 6.0,
            duration_base_max: 10.0,
            duration_spread: 2.0,
            duration_jitter: 1.0,
        }
    }
}

impl CorpusSpec {
    pub fn content_dims(&self) -> usize {
        self.content_dims.unwrap_or(self.feature_dim)
    }

    pub fn speaker_dims(&self) -> usize {
        self.speaker_dims.unwrap_or(self.feature_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_speakers == 0 {
            return bad("num_speakers must be at least 1");
        }
        if self.utterances_per_speaker == 0 {
            return bad("utterances_per_speaker must be at least 1");
        }
        if self.eval_speakers > self.num_speakers {
            return bad("eval_speakers exceeds num_speakers");
        }
        if self.eval_speakers > 0 && self.enroll_utterances >= self.utterances_per_speaker {
            return bad("enroll_utterances must leave at least one trial utterance");
        }
        if self.phones_per_utterance == 0 {
            return bad("phones_per_utterance must be at least 1");
        }
        if self.alphabet_size < 2 || self.alphabet_size > u16::MAX as usize {
            return bad("alphabet_size must be in [2, 65535]");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1");
        }
        if !(1..=self.feature_dim).contains(&self.content_dims())
            || !(1..=self.feature_dim).contains(&self.speaker_dims())
        {
            return bad("content_dims and speaker_dims must be in [1, feature_dim]");
        }
        if self.num_target_speakers > 0 && self.target_utterances == 0 {
            return bad("target speakers need at least one utterance");
        }
        if !(0.0..=1.0).contains(&self.female_fraction) {
            return bad("female_fraction must be in [0, 1]");
        }
        for (name, v) in [
            ("prototype_scale", self.prototype_scale),
            ("noise_scale", self.noise_scale),
            ("timbre_strength", self.timbre_strength),
            ("gender_separation", self.gender_separation),
            ("duration_spread", self.duration_spread),
            ("duration_jitter", self.duration_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidSpec(format!("{name} must be finite and ≥ 0")));
            }
        }
        if !(self.duration_base_min >= 1.0 && self.duration_base_max >= self.duration_base_min) {
            return bad("duration base range must satisfy 1 ≤ min ≤ max");
        }
        Ok(())
    }
}

// Bresenham-style interleaving: speaker i is female when the running count of
// females steps up, so any prefix is as balanced as the fraction allows.
fn gender_at(i: usize, female_fraction: f64) -> Gender {
    let step = |n: usize| (n as f64 * female_fraction + 0.5).floor();
    if step(i + 1) > step(i) {
        Gender::Female
    } else {
        Gender::Male
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

struct Shared {
    prototypes: Vec<Vec<f64>>,
    gender_axis: Vec<f64>,
    duration_base: Vec<f64>,
}

fn shared_parameters(spec: &CorpusSpec, seed: u64) -> Shared {
    let (p, d) = (spec.alphabet_size, spec.feature_dim);
    let (dc, ds) = (spec.content_dims(), spec.speaker_dims());
    let mut rng = keyed_rng(seed, "prototypes");
    // Rejection keeps prototypes at least 60% of the typical pairwise distance
    // apart; give up after a bounded number of draws so tiny D still works.
    let min_sep = 0.6 * spec.prototype_scale * (2.0 * dc as f64).sqrt();
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(p);
    while prototypes.len() < p {
        let mut cand = Vec::new();
        for _attempt in 0..200 {
            cand = (0..d)
                .map(|j| if j < dc { spec.prototype_scale * normal(&mut rng) } else { 0.0 })
                .collect::<Vec<_>>();
            let ok = prototypes.iter().all(|q| {
                q.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_sep
            });
            if ok {
                break;
            }
        }
        prototypes.push(cand);
    }
    let mut axis: Vec<f64> =
        (0..d).map(|j| if j >= d - ds { normal(&mut rng) } else { 0.0 }).collect();
    let n = axis.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    axis.iter_mut().for_each(|v| *v /= n);

    let mut rng = keyed_rng(seed, "duration-base");
    let duration_base = (0..p)
        .map(|_| rng.random_range(spec.duration_base_min..=spec.duration_base_max))
        .collect();
    Shared { prototypes, gender_axis: axis, duration_base }
}

fn make_profile(
    spec: &CorpusSpec,
    shared: &Shared,
    seed: u64,
    speaker_id: &str,
    gender: Gender,
) -> SpeakerProfile {
    let mut rng = keyed_rng(seed, &format!("speaker/{speaker_id}"));
    let sign = match gender {
        Gender::Female => 1.0,
        Gender::Male => -1.0,
    };
    let first = spec.feature_dim - spec.speaker_dims();
    let timbre_offset = shared
        .gender_axis
        .iter()
        .enumerate()
        .map(|(j, &a)| {
            if j >= first {
                sign * spec.gender_separation * a + normal(&mut rng)
            } else {
                0.0
            }
        })
        .collect();
    // Means are whole frames so that jitter-free speech reproduces them exactly.
    let per_phone_duration_mean = shared
        .duration_base
        .iter()
        .map(|&base| {
            let z = normal(&mut rng);
            let m = if spec.duration_signal { base + spec.duration_spread * z } else { base };
            round_half_up(m).max(1.0)
        })
        .collect();
    SpeakerProfile {
        speaker_id: speaker_id.to_string(),
        gender,
        timbre_offset,
        timbre_strength: spec.timbre_strength,
        per_phone_duration_mean,
        duration_jitter: spec.duration_jitter,
    }
}

fn make_utterance(
    spec: &CorpusSpec,
    shared: &Shared,
    profile: &SpeakerProfile,
    seed: u64,
    utterance_id: String,
    split: Split,
) -> Utterance {
    let mut rng = keyed_rng(seed, &format!("utterance/{utterance_id}"));
    let p = spec.alphabet_size;
    let d = spec.feature_dim;
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    let mut prev: Option<usize> = None;
    for _ in 0..spec.phones_per_utterance {
        // Uniform over phones different from the previous one.
        let phone = match prev {
            None => rng.random_range(0..p),
            Some(q) => {
                let r = rng.random_range(0..p - 1);
                if r >= q {
                    r + 1
                } else {
                    r
                }
            }
        };
        prev = Some(phone);
        let mean = profile.per_phone_duration_mean[phone];
        let jitter = profile.duration_jitter * normal(&mut rng);
        let dur = round_half_up(mean + jitter).max(1.0) as usize;
        for _ in 0..dur {
            for j in 0..d {
                let v = shared.prototypes[phone][j]
                    + profile.timbre_strength * profile.timbre_offset[j]
                    + spec.noise_scale * normal(&mut rng);
                frames.push(v as f32);
            }
            labels.push(PhoneId(phone as u16));
        }
    }
    Utterance {
        utterance_id,
        speaker_id: profile.speaker_id.clone(),
        gender: profile.gender,
        split,
        features: FeatureMatrix::new(d, frames).expect("generator emits finite frames"),
        gold_labels: Some(labels),
    }
}

/// Generates a corpus; a pure function of `(spec, seed)`.
///
/// Each speaker and each utterance draws from its own keyed stream, so the
/// result does not depend on the rayon thread count.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let shared = shared_parameters(spec, seed);

    struct Plan {
        info: SpeakerInfo,
        splits: Vec<Split>,
    }
    let mut plans = Vec::new();
    let n_train = spec.num_speakers - spec.eval_speakers;
    for i in 0..spec.num_speakers {
        let gender = gender_at(i, spec.female_fraction);
        let splits = if i < n_train {
            vec![Split::AttackerTrain; spec.utterances_per_speaker]
        } else {
            (0..spec.utterances_per_speaker)
                .map(|u| if u < spec.enroll_utterances { Split::Enroll } else { Split::Trial })
                .collect()
        };
        plans.push(Plan {
            info: SpeakerInfo { speaker_id: format!("spk{i:03}"), gender },
            splits,
        });
    }
    for i in 0..spec.num_target_speakers {
        plans.push(Plan {
            info: SpeakerInfo { speaker_id: format!("tgt{i:03}"), gender: gender_at(i, 0.5) },
            splits: vec![Split::TargetPool; spec.target_utterances],
        });
    }
    if spec.duration_train_utterances > 0 {
        plans.push(Plan {
            info: SpeakerInfo { speaker_id: "dur000".into(), gender: Gender::Female },
            splits: vec![Split::DurationTrain; spec.duration_train_utterances],
        });
    }

    let generated: Vec<(SpeakerProfile, Vec<Utterance>)> = plans
        .par_iter()
        .map(|plan| {
            let profile =
                make_profile(spec, &shared, seed, &plan.info.speaker_id, plan.info.gender);
            let utts = plan
                .splits
                .iter()
                .enumerate()
                .map(|(u, &split)| {
                    let id = format!("{}-{u:03}", plan.info.speaker_id);
                    make_utterance(spec, &shared, &profile, seed, id, split)
                })
                .collect();
            (profile, utts)
        })
        .collect();

    let speakers = plans.into_iter().map(|p| p.info).collect();
    let mut profiles = Vec::with_capacity(generated.len());
    let mut utterances = Vec::new();
    for (profile, utts) in generated {
        profiles.push(profile);
        utterances.extend(utts);
    }
    let proto_data: Vec<f32> = shared.prototypes.iter().flatten().map(|&v| v as f32).collect();
    let corpus = Corpus {
        alphabet_size: spec.alphabet_size,
        feature_dim: spec.feature_dim,
        speakers,
        utterances,
        truth: Some(GeneratorTruth {
            prototypes: FeatureMatrix::new(spec.feature_dim, proto_data)?,
            profiles,
        }),
    };
    corpus.validate()?;
    Ok(corpus)
}
