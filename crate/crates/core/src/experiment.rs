//! Config-driven runs and sweeps.
//!
//! A run anonymizes the attacker-train, enrollment and trial splits of a
//! corpus, trains the attacker on the anonymized attacker-train split and
//! scores every same-gender trial. A sweep repeats runs over a grid of
//! configurations, strategies, pool sizes and replicate seeds on one corpus.
//!
//! Seeds: the corpus seed defaults to `derive_seed(seed, "corpus")`; a run uses
//! `seed` directly; sweep replicate `r` uses `derive_seed(seed, "replicate/r")`
//! for every cell, so cells of one replicate share their random streams.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::convert::{
    anonymize_utterance, AnonConfig, CodebookIndex, KnnIndex, Models, SearchMode, TargetAssets,
    DEFAULT_NEIGHBOR_COUNT,
};
use crate::corpus::{
    encode_classifier, encode_corpus, generate_corpus, load_corpus, Corpus,
    CorpusSpec, Gender, Split, Utterance,
};
use crate::duration::DurationModel;
use crate::error::{Error, Result};
use crate::phonelab::{frame_accuracy, PhoneClassifier};
use crate::privacy::{
    build_trials, embed, privacy_report, score, train_attacker, utility_proxies, AttackerModel,
    PrivacyReport, ScoredTrial, UtilityReport,
};
use crate::quantize::build_quantized_pool;
use crate::seed::{derive_seed, keyed_rng};
use crate::select::{select_target, selection_rng, StrategyKind, TargetSpeaker};

pub const SCHEMA_VERSION: u32 = 1;

/// Pipeline stage reported with every failure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Corpus,
    Train,
    Select,
    Anonymize,
    Attack,
    Evaluate,
    Write,
    Report,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Corpus => "corpus",
            Stage::Train => "train",
            Stage::Select => "select",
            Stage::Anonymize => "anonymize",
            Stage::Attack => "attack",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage.as_str(), self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|error| StageError { stage, error })
    }
}

/// Where the corpus comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Generate {
        #[serde(default)]
        spec: CorpusSpec,
        /// Defaults to a seed derived from the experiment seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Path(PathBuf),
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Generate { spec: CorpusSpec::default(), seed: None }
    }
}

/// What a run applies to the evaluation data: nothing, or one anonymizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnonChoice {
    Original,
    Anonymize(AnonConfig),
}

impl fmt::Display for AnonChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnonChoice::Original => f.write_str("original"),
            AnonChoice::Anonymize(c) => c.fmt(f),
        }
    }
}

impl std::str::FromStr for AnonChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "original" {
            Ok(AnonChoice::Original)
        } else {
            Ok(AnonChoice::Anonymize(s.parse()?))
        }
    }
}

impl Serialize for AnonChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AnonChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Sweep grid; every combination of the lists is one row per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub w: Vec<f64>,
    pub clusters: Vec<usize>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyKind>,
    /// Target pool sizes; empty means the whole pool.
    #[serde(default)]
    pub pool_sizes: Vec<usize>,
    /// Replicate seeds.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    /// The full `(w-k)` grid with same-gender selection and one replicate.
    fn default() -> Self {
        Self {
            w: vec![0.0, 0.3, 0.7, 1.0],
            clusters: vec![0, 32, 16, 8],
            strategies: default_strategies(),
            pool_sizes: Vec::new(),
            seeds: default_seeds(),
        }
    }
}

fn default_strategies() -> Vec<StrategyKind> {
    vec![StrategyKind::SameGender]
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_anon() -> AnonChoice {
    AnonChoice::Anonymize(AnonConfig::new(0.0, 8).expect("valid identifier"))
}

fn default_neighbors() -> usize {
    DEFAULT_NEIGHBOR_COUNT
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

/// One experiment, as read from a JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSource,
    /// `original` or an identifier such as `(7-8)` or `(0-8)_r`.
    #[serde(default = "default_anon")]
    pub anon: AnonChoice,
    /// Overrides the identifier's strategy suffix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyKind>,
    /// Size of the target pool (a seeded, gender-interleaved prefix); all targets if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_targets: Option<usize>,
    /// Number of attacker-train speakers used; all if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacker_speakers: Option<usize>,
    #[serde(default)]
    pub search_mode: SearchMode,
    #[serde(default = "default_neighbors")]
    pub neighbor_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
}

impl ExperimentConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            corpus: CorpusSource::default(),
            anon: default_anon(),
            strategy: None,
            num_targets: None,
            attacker_speakers: None,
            search_mode: SearchMode::default(),
            neighbor_count: DEFAULT_NEIGHBOR_COUNT,
            output: None,
            sweep: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.neighbor_count == 0 {
            return Err(Error::invalid("neighbor_count must be at least 1"));
        }
        if self.num_targets == Some(0) {
            return Err(Error::invalid("num_targets must be at least 1"));
        }
        if let CorpusSource::Generate { spec, .. } = &self.corpus {
            spec.validate()?;
        }
        self.resolved_anon()?;
        if let Some(grid) = &self.sweep {
            if grid.w.is_empty() || grid.clusters.is_empty() || grid.strategies.is_empty() || grid.seeds.is_empty() {
                return Err(Error::invalid("sweep grid lists must be nonempty"));
            }
            for &w in &grid.w {
                AnonConfig::new(w, 0)?;
            }
            if grid.pool_sizes.contains(&0) {
                return Err(Error::invalid("pool sizes must be at least 1"));
            }
        }
        Ok(())
    }

    /// The anonymizer with strategy override and neighbor count applied.
    pub fn resolved_anon(&self) -> Result<AnonChoice> {
        match self.anon {
            AnonChoice::Original => Ok(AnonChoice::Original),
            AnonChoice::Anonymize(mut c) => {
                if let Some(s) = self.strategy {
                    c = c.with_selection(s);
                }
                Ok(AnonChoice::Anonymize(c.with_neighbor_count(self.neighbor_count)))
            }
        }
    }

    pub fn corpus_seed(&self) -> u64 {
        match &self.corpus {
            CorpusSource::Generate { seed: Some(s), .. } => *s,
            _ => derive_seed(self.seed, "corpus"),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Generates or loads the configured corpus.
pub fn materialize_corpus(config: &ExperimentConfig) -> StageResult<Corpus> {
    match &config.corpus {
        CorpusSource::Generate { spec, .. } => generate_corpus(spec, config.corpus_seed()).at(Stage::Corpus),
        CorpusSource::Path(p) => load_corpus(p).at(Stage::Corpus),
    }
}

/// Corpus plus the models every run on it shares.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub corpus: Corpus,
    pub classifier: PhoneClassifier,
    pub durations: DurationModel,
}

impl Workspace {
    /// Trains the phone classifier on the gold labels of the attacker-train
    /// split and the duration model on the duration-train split.
    pub fn prepare(corpus: Corpus) -> StageResult<Self> {
        corpus.validate().at(Stage::Corpus)?;
        let classifier =
            PhoneClassifier::train_on_utterances(corpus.alphabet_size, corpus.split(Split::AttackerTrain))
                .at(Stage::Train)?;
        let durations =
            DurationModel::train(corpus.split(Split::DurationTrain), &classifier).at(Stage::Train)?;
        Ok(Self { corpus, classifier, durations })
    }

    fn models(&self) -> Models<'_> {
        Models { classifier: &self.classifier, durations: &self.durations }
    }

    /// Frame accuracy of the classifier over all gold-labeled utterances.
    pub fn classifier_accuracy(&self) -> Result<f64> {
        let (mut hits, mut total) = (0.0, 0usize);
        for utt in &self.corpus.utterances {
            if let Some(gold) = &utt.gold_labels {
                let pred = self.classifier.classify_frames(&utt.features)?;
                hits += frame_accuracy(&pred, gold)? * gold.len() as f64;
                total += gold.len();
            }
        }
        if total == 0 {
            return Err(Error::Empty("gold labels"));
        }
        Ok(hits / total as f64)
    }
}

/// Parameters of a single run on a prepared workspace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSettings {
    pub anon: AnonChoice,
    pub search_mode: SearchMode,
    pub num_targets: Option<usize>,
    pub attacker_speakers: Option<usize>,
    pub seed: u64,
}

impl RunSettings {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            anon: config.resolved_anon()?,
            search_mode: config.search_mode,
            num_targets: config.num_targets,
            attacker_speakers: config.attacker_speakers,
            seed: config.seed,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: PrivacyReport,
    pub scores: Vec<ScoredTrial>,
    pub attacker: AttackerModel,
    pub pool: Vec<TargetSpeaker>,
}

/// Target speakers in a seeded order that alternates genders, so every
/// prefix is as gender-balanced as the pool allows.
pub fn ordered_targets(corpus: &Corpus, seed: u64) -> Vec<TargetSpeaker> {
    let mut rng = keyed_rng(seed, "target-order");
    let mut by_gender: Vec<Vec<TargetSpeaker>> = Gender::ALL
        .iter()
        .map(|&g| {
            let mut v: Vec<TargetSpeaker> = corpus
                .speakers_in(Split::TargetPool)
                .into_iter()
                .filter(|s| s.gender == g)
                .map(|s| TargetSpeaker { speaker_id: s.speaker_id.clone(), gender: s.gender })
                .collect();
            v.shuffle(&mut rng);
            v.reverse();
            v
        })
        .collect();
    let mut out = Vec::new();
    while by_gender.iter().any(|v| !v.is_empty()) {
        for v in by_gender.iter_mut() {
            out.extend(v.pop());
        }
    }
    out
}

fn build_assets(
    ws: &Workspace,
    pool: &[TargetSpeaker],
    config: &AnonConfig,
    seed: u64,
) -> Result<BTreeMap<String, TargetAssets>> {
    pool.par_iter()
        .map(|t| {
            let utts = ws.corpus.split(Split::TargetPool).filter(|u| u.speaker_id == t.speaker_id);
            let assets = if config.clusters == 0 {
                TargetAssets::Frames(KnnIndex::from_utterances(utts)?)
            } else {
                let pool_seed = derive_seed(seed, &format!("pool/{}", t.speaker_id));
                let q = build_quantized_pool(utts, &ws.classifier, config.clusters, pool_seed)?;
                TargetAssets::Codebook(CodebookIndex::new(q)?)
            };
            Ok((t.speaker_id.clone(), assets))
        })
        .collect()
}

/// Runs the full privacy protocol once.
pub fn run_once(ws: &Workspace, settings: &RunSettings) -> StageResult<RunOutput> {
    let corpus = &ws.corpus;
    let mut attacker_speakers: Vec<&str> =
        corpus.speakers_in(Split::AttackerTrain).iter().map(|s| s.speaker_id.as_str()).collect();
    if let Some(n) = settings.attacker_speakers {
        if n > attacker_speakers.len() {
            return Err(Error::invalid(format!(
                "attacker_speakers {n} exceeds the {} available",
                attacker_speakers.len()
            )))
            .at(Stage::Config);
        }
        attacker_speakers.truncate(n);
    }
    let sources: Vec<&Utterance> = corpus
        .utterances
        .iter()
        .filter(|u| match u.split {
            Split::AttackerTrain => attacker_speakers.contains(&u.speaker_id.as_str()),
            Split::Enroll | Split::Trial => true,
            _ => false,
        })
        .collect();

    let (anonymized, pool): (Vec<Utterance>, Vec<TargetSpeaker>) = match settings.anon {
        AnonChoice::Original => (sources.iter().map(|&u| u.clone()).collect(), Vec::new()),
        AnonChoice::Anonymize(config) => {
            let mut pool = ordered_targets(corpus, settings.seed);
            if let Some(n) = settings.num_targets {
                if n > pool.len() {
                    return Err(Error::invalid(format!(
                        "num_targets {n} exceeds the {} target speakers",
                        pool.len()
                    )))
                    .at(Stage::Config);
                }
                pool.truncate(n);
            }
            let strategy = config.selection.realize(&pool, settings.seed).at(Stage::Select)?;
            let choices: Vec<&TargetSpeaker> = sources
                .iter()
                .map(|u| {
                    let mut rng = selection_rng(settings.seed, &u.utterance_id);
                    select_target(u.gender, &pool, &strategy, &mut rng)
                })
                .collect::<Result<_>>()
                .at(Stage::Select)?;
            let assets = build_assets(ws, &pool, &config, settings.seed).at(Stage::Anonymize)?;
            let anonymized = sources
                .par_iter()
                .zip(choices.par_iter())
                .map(|(u, t)| {
                    anonymize_utterance(
                        u,
                        &config,
                        &assets[&t.speaker_id],
                        ws.models(),
                        settings.search_mode,
                        settings.seed,
                    )
                })
                .collect::<Result<Vec<_>>>()
                .at(Stage::Anonymize)?;
            (anonymized, pool)
        }
    };

    let pairs: Vec<(&Utterance, &Utterance)> = sources.iter().copied().zip(&anonymized).collect();
    let train: Vec<(&str, &crate::corpus::FeatureMatrix)> = pairs
        .iter()
        .filter(|(s, _)| s.split == Split::AttackerTrain)
        .map(|(s, a)| (s.speaker_id.as_str(), &a.features))
        .collect();
    let attacker = train_attacker(&train).at(Stage::Attack)?;

    let enroll_speakers: Vec<(&str, Gender)> = corpus
        .speakers_in(Split::Enroll)
        .iter()
        .map(|s| (s.speaker_id.as_str(), s.gender))
        .collect();
    let trial_sources: Vec<&Utterance> =
        sources.iter().copied().filter(|u| u.split == Split::Trial).collect();
    let trials = build_trials(&enroll_speakers, &trial_sources).at(Stage::Evaluate)?;

    let enroll_emb = enroll_speakers
        .par_iter()
        .map(|(spk, _)| {
            let feats: Vec<_> = pairs
                .iter()
                .filter(|(s, _)| s.split == Split::Enroll && s.speaker_id == *spk)
                .map(|(_, a)| &a.features)
                .collect();
            Ok((spk.to_string(), embed(&feats, &attacker)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()
        .at(Stage::Evaluate)?;
    let trial_emb = pairs
        .par_iter()
        .filter(|(s, _)| s.split == Split::Trial)
        .map(|(s, a)| Ok((s.utterance_id.clone(), embed(&[&a.features], &attacker)?)))
        .collect::<Result<BTreeMap<_, _>>>()
        .at(Stage::Evaluate)?;
    let scores = trials
        .par_iter()
        .map(|t| {
            Ok(ScoredTrial {
                enroll_spk: t.enroll_speaker.clone(),
                trial_utt: t.trial_utterance.clone(),
                gender: t.gender,
                label: u8::from(t.is_same_speaker),
                score: score(&enroll_emb[&t.enroll_speaker], &trial_emb[&t.trial_utterance])?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .at(Stage::Evaluate)?;

    let eval_pairs: Vec<(&Utterance, &Utterance)> = pairs
        .iter()
        .copied()
        .filter(|(s, _)| matches!(s.split, Split::Enroll | Split::Trial))
        .collect();
    let utility = match settings.anon {
        AnonChoice::Original => UtilityReport::default(),
        AnonChoice::Anonymize(_) => utility_proxies(&eval_pairs, &ws.classifier).at(Stage::Evaluate)?,
    };
    let report = privacy_report(&scores, attacker.informative, utility).at(Stage::Evaluate)?;
    Ok(RunOutput { report, scores, attacker, pool })
}

/// Trial scores as CSV with columns `enroll_spk,trial_utt,gender,label,score`.
pub fn scores_csv(scores: &[ScoredTrial]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in scores {
        w.serialize(s)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Writes files via temporary names and renames them only once every file is
/// written, so a failed write leaves no new report behind.
fn write_all(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut staged = Vec::new();
    for (name, bytes) in files {
        let tmp = dir.join(format!(".{name}.tmp"));
        if let Err(e) = fs::write(&tmp, bytes) {
            for t in &staged {
                let _ = fs::remove_file(t);
            }
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        staged.push(tmp);
    }
    for ((name, _), tmp) in files.iter().zip(&staged) {
        fs::rename(tmp, dir.join(name))?;
    }
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("value serializes");
    v.push(b'\n');
    v
}

fn output_dir(config: &ExperimentConfig, out: Option<&Path>) -> StageResult<PathBuf> {
    out.map(Path::to_path_buf)
        .or_else(|| config.output.clone())
        .ok_or_else(|| Error::invalid("no output directory (set \"output\" or pass --out)"))
        .at(Stage::Config)
}

/// Writes `corpus.pkvc` and a manifest echoing the resolved spec.
pub fn cmd_gen_corpus(config: &ExperimentConfig, out: Option<&Path>) -> StageResult<PathBuf> {
    config.validate().at(Stage::Config)?;
    let CorpusSource::Generate { spec, .. } = &config.corpus else {
        return Err(Error::invalid("gen-corpus needs a \"generate\" corpus source")).at(Stage::Config);
    };
    let dir = output_dir(config, out)?;
    let seed = config.corpus_seed();
    let corpus = generate_corpus(spec, seed).at(Stage::Corpus)?;
    let bytes = encode_corpus(&corpus).at(Stage::Corpus)?;
    let manifest = serde_json::json!({
        "tool": "pkvc",
        "version": crate::VERSION,
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "spec": spec,
        "speakers": corpus.speakers.len(),
        "utterances": corpus.utterances.len(),
        "corpus_sha256": sha256_hex(&bytes),
    });
    write_all(&dir, &[("corpus.pkvc", bytes), ("manifest.json", pretty(&manifest))]).at(Stage::Write)?;
    Ok(dir.join("corpus.pkvc"))
}

/// Trains the shared models and writes them with a short summary.
pub fn cmd_train(config: &ExperimentConfig, out: Option<&Path>) -> StageResult<PathBuf> {
    config.validate().at(Stage::Config)?;
    let dir = output_dir(config, out)?;
    let ws = Workspace::prepare(materialize_corpus(config)?)?;
    let accuracy = ws.classifier_accuracy().at(Stage::Train)?;
    let summary = serde_json::json!({
        "tool": "pkvc",
        "version": crate::VERSION,
        "config_sha256": config.hash(),
        "classifier_frame_accuracy": accuracy,
        "duration_fallback": ws.durations.fallback(),
    });
    write_all(
        &dir,
        &[
            ("classifier.pkvc", encode_classifier(&ws.classifier)),
            ("duration_model.json", pretty(&ws.durations)),
            ("train.json", pretty(&summary)),
        ],
    )
    .at(Stage::Write)?;
    Ok(dir)
}

/// Runs one experiment and writes its run directory.
pub fn cmd_run(config: &ExperimentConfig, out: Option<&Path>) -> StageResult<RunOutput> {
    config.validate().at(Stage::Config)?;
    let dir = output_dir(config, out)?;
    let corpus = materialize_corpus(config)?;
    let corpus_hash = sha256_hex(&encode_corpus(&corpus).at(Stage::Corpus)?);
    let ws = Workspace::prepare(corpus)?;
    let settings = RunSettings::from_config(config).at(Stage::Config)?;
    let output = run_once(&ws, &settings)?;
    let manifest = serde_json::json!({
        "tool": "pkvc",
        "version": crate::VERSION,
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "config_sha256": config.hash(),
        "anon": settings.anon.to_string(),
        "seeds": { "master": config.seed, "corpus": config.corpus_seed(), "run": settings.seed },
        "corpus_sha256": corpus_hash,
        "target_pool": output.pool.iter().map(|t| &t.speaker_id).collect::<Vec<_>>(),
    });
    let csv = scores_csv(&output.scores).at(Stage::Write)?;
    write_all(
        &dir,
        &[
            ("privacy_report.json", pretty(&output.report)),
            ("utility.json", pretty(&output.report.utility)),
            ("scores.csv", csv.into_bytes()),
            ("manifest.json", pretty(&manifest)),
        ],
    )
    .at(Stage::Write)?;
    Ok(output)
}

/// One cell of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub config: AnonConfig,
    pub pool_size: Option<usize>,
    pub replicate: u64,
}

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub identifier: String,
    pub w: f64,
    pub clusters: usize,
    pub strategy: StrategyKind,
    pub pool_size: usize,
    pub seed: u64,
    pub eer_f: Option<f64>,
    pub eer_m: Option<f64>,
    pub eer_avg: Option<f64>,
    pub per_proxy: Option<f64>,
    pub duration_distortion: Option<f64>,
    pub eer_avg_mean: Option<f64>,
    pub eer_avg_std: Option<f64>,
    pub per_proxy_mean: Option<f64>,
    pub per_proxy_std: Option<f64>,
    pub duration_distortion_mean: Option<f64>,
    pub duration_distortion_std: Option<f64>,
    pub error: String,
    pub runtime_ms: u64,
}

/// Cells in row order: w, clusters, strategy, pool size, then seed.
pub fn sweep_cells(config: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    let grid = config.sweep.as_ref().ok_or_else(|| Error::invalid("config has no \"sweep\" grid"))?;
    let pools: Vec<Option<usize>> =
        if grid.pool_sizes.is_empty() { vec![None] } else { grid.pool_sizes.iter().map(|&p| Some(p)).collect() };
    let mut cells = Vec::new();
    for &w in &grid.w {
        for &k in &grid.clusters {
            for &strategy in &grid.strategies {
                let c = AnonConfig::new(w, k)?.with_selection(strategy).with_neighbor_count(config.neighbor_count);
                for &pool_size in &pools {
                    for &replicate in &grid.seeds {
                        cells.push(SweepCell { config: c, pool_size, replicate });
                    }
                }
            }
        }
    }
    Ok(cells)
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

/// Runs every cell on a shared workspace. Failed cells keep their row with
/// an error tag; aggregates cover the successful replicates of a cell.
pub fn run_sweep(ws: &Workspace, config: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let cells = sweep_cells(config)?;
    let total_targets = ws.corpus.speakers_in(Split::TargetPool).len();
    let mut rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|cell| {
            let started = Instant::now();
            let settings = RunSettings {
                anon: AnonChoice::Anonymize(cell.config),
                search_mode: config.search_mode,
                num_targets: cell.pool_size,
                attacker_speakers: config.attacker_speakers,
                seed: derive_seed(config.seed, &format!("replicate/{}", cell.replicate)),
            };
            let result = run_once(ws, &settings);
            let mut row = SweepRow {
                identifier: cell.config.to_string(),
                w: cell.config.w(),
                clusters: cell.config.clusters,
                strategy: cell.config.selection,
                pool_size: cell.pool_size.unwrap_or(total_targets),
                seed: cell.replicate,
                eer_f: None,
                eer_m: None,
                eer_avg: None,
                per_proxy: None,
                duration_distortion: None,
                eer_avg_mean: None,
                eer_avg_std: None,
                per_proxy_mean: None,
                per_proxy_std: None,
                duration_distortion_mean: None,
                duration_distortion_std: None,
                error: String::new(),
                runtime_ms: 0,
            };
            match result {
                Ok(out) => {
                    let r = out.report;
                    row.eer_f = Some(r.eer_female);
                    row.eer_m = Some(r.eer_male);
                    row.eer_avg = Some(r.eer_averaged);
                    row.per_proxy = Some(r.utility.per_proxy);
                    row.duration_distortion = Some(r.utility.duration_distortion);
                }
                Err(e) => row.error = e.to_string(),
            }
            row.runtime_ms = started.elapsed().as_millis() as u64;
            row
        })
        .collect();

    let mut groups: BTreeMap<(String, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups.entry((r.identifier.clone(), r.pool_size)).or_default().push(i);
    }
    for idx in groups.values() {
        let collect = |f: fn(&SweepRow) -> Option<f64>| -> Vec<f64> {
            idx.iter().filter_map(|&i| f(&rows[i])).collect()
        };
        let eer = mean_std(&collect(|r| r.eer_avg));
        let per = mean_std(&collect(|r| r.per_proxy));
        let dur = mean_std(&collect(|r| r.duration_distortion));
        for &i in idx {
            let r = &mut rows[i];
            (r.eer_avg_mean, r.eer_avg_std) = eer;
            (r.per_proxy_mean, r.per_proxy_std) = per;
            (r.duration_distortion_mean, r.duration_distortion_std) = dur;
        }
    }
    Ok(rows)
}

pub fn rows_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Runs the configured grid and writes `results.csv` and a manifest.
pub fn cmd_sweep(config: &ExperimentConfig, out: Option<&Path>) -> StageResult<Vec<SweepRow>> {
    config.validate().at(Stage::Config)?;
    sweep_cells(config).at(Stage::Config)?;
    let dir = output_dir(config, out)?;
    let corpus = materialize_corpus(config)?;
    let corpus_hash = sha256_hex(&encode_corpus(&corpus).at(Stage::Corpus)?);
    let ws = Workspace::prepare(corpus)?;
    let rows = run_sweep(&ws, config).at(Stage::Evaluate)?;
    let manifest = serde_json::json!({
        "tool": "pkvc",
        "version": crate::VERSION,
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "config_sha256": config.hash(),
        "seeds": { "master": config.seed, "corpus": config.corpus_seed() },
        "corpus_sha256": corpus_hash,
        "rows": rows.len(),
        "failed_rows": rows.iter().filter(|r| !r.error.is_empty()).count(),
    });
    let csv = rows_csv(&rows).at(Stage::Write)?;
    write_all(&dir, &[("results.csv", csv.into_bytes()), ("manifest.json", pretty(&manifest))])
        .at(Stage::Write)?;
    Ok(rows)
}

/// Human-readable summary of a run directory or a sweep `results.csv`.
pub fn cmd_report(path: &Path) -> StageResult<String> {
    let report_path = if path.is_dir() { path.join("privacy_report.json") } else { path.to_path_buf() };
    if report_path.file_name().is_some_and(|n| n == "privacy_report.json") && report_path.exists() {
        let text = fs::read_to_string(&report_path).map_err(Error::from).at(Stage::Report)?;
        let r: PrivacyReport = serde_json::from_str(&text).map_err(Error::from).at(Stage::Report)?;
        return Ok(format!(
            "EER female {:.1}  male {:.1}  avg {:.1}  (trials f {}/{}, m {}/{})\n\
             PER proxy {:.3}  duration distortion {:.3}\n",
            r.eer_female,
            r.eer_male,
            r.eer_averaged,
            r.trials_female.target,
            r.trials_female.nontarget,
            r.trials_male.target,
            r.trials_male.nontarget,
            r.utility.per_proxy,
            r.utility.duration_distortion,
        ));
    }
    let csv_path = if path.is_dir() { path.join("results.csv") } else { path.to_path_buf() };
    let mut reader = csv::Reader::from_path(&csv_path).map_err(Error::from).at(Stage::Report)?;
    let headers = reader.headers().map_err(Error::from).at(Stage::Report)?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::invalid(format!("results.csv lacks column {name}")))
    };
    let (c_id, c_pool, c_mean, c_std, c_per, c_err) = (|| {
        Ok::<_, Error>((
            col("identifier")?,
            col("pool_size")?,
            col("eer_avg_mean")?,
            col("eer_avg_std")?,
            col("per_proxy_mean")?,
            col("error")?,
        ))
    })()
    .at(Stage::Report)?;
    let mut seen = Vec::new();
    let mut out = format!("{:<12} {:>5} {:>14} {:>9} {:>7}\n", "config", "pool", "EER avg", "PER", "errors");
    let mut errors: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(Error::from).at(Stage::Report)?;
        let key = (rec[c_id].to_string(), rec[c_pool].to_string());
        if !rec[c_err].is_empty() {
            *errors.entry(key.clone()).or_default() += 1;
        }
        records.push(rec);
    }
    for rec in &records {
        let key = (rec[c_id].to_string(), rec[c_pool].to_string());
        if seen.contains(&key) {
            continue;
        }
        let fmt_num = |s: &str, prec: usize| s.parse::<f64>().map(|v| format!("{v:.prec$}")).unwrap_or_else(|_| "-".into());
        out.push_str(&format!(
            "{:<12} {:>5} {:>7} ± {:<4} {:>9} {:>7}\n",
            key.0,
            key.1,
            fmt_num(&rec[c_mean], 1),
            fmt_num(&rec[c_std], 1),
            fmt_num(&rec[c_per], 3),
            errors.get(&key).copied().unwrap_or(0),
        ));
        seen.push(key);
    }
    Ok(out)
}
