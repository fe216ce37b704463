//! The `PKVC` binary container.
//!
//! All integers and floats are little-endian. Strings are a `u32` byte length
//! followed by UTF-8. Every file starts with the same header:
//!
//! ```text
//! "PKVC" | version u32 | kind u32 | alphabet_size u32 | feature_dim u32
//! ```
//!
//! followed by a body selected by `kind`:
//!
//! * `1` corpus: `n_speakers u32 | n_utterances u32 | flags u32`, the speaker
//!   table (`id str | gender u8`), the utterances
//!   (`id str | speaker u32 | split u8 | frames u32 | frames×D f32 | has_labels u8 | [runs u32 | (phone u16, length u16)×runs]`),
//!   then, when `flags & 1`, the generator truth
//!   (`P×D f32 prototypes | n u32 | (speaker u32 | strength f64 | jitter f64 | D f64 | P f64)×n`).
//! * `2` phone classifier: `n u32 | (phone u16 | D f32)×n`.
//! * `3` quantized pool: `speaker str | k u32 | (count u32 | count×D f32)×P`.
//!
//! Label runs longer than `u16::MAX` are split into several runs.

use std::path::Path;

use super::{
    Corpus, FeatureMatrix, Gender, GeneratorTruth, PhoneId, SpeakerInfo, SpeakerProfile, Split,
    Utterance,
};
use crate::error::{Error, Result};
use crate::phonelab::PhoneClassifier;
use crate::quantize::QuantizedPool;

pub const MAGIC: &[u8; 4] = b"PKVC";
pub const FORMAT_VERSION: u32 = 1;

const KIND_CORPUS: u32 = 1;
const KIND_CLASSIFIER: u32 = 2;
const KIND_POOL: u32 = 3;
const FLAG_TRUTH: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(kind: u32, alphabet: usize, dim: usize) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(kind);
        w.u32(alphabet as u32);
        w.u32(dim as u32);
        w
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse { offset: self.pos as u64, message: message.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => self.err(format!("truncated while reading {what}")),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn count(&mut self, what: &str, elem_size: usize) -> Result<usize> {
        let start = self.pos;
        let n = self.u32(what)? as usize;
        // Reject counts that cannot fit in the remaining bytes before allocating.
        if n.saturating_mul(elem_size) > self.bytes.len() - self.pos {
            self.pos = start;
            return self.err(format!("{what} count {n} exceeds remaining input"));
        }
        Ok(n)
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.saturating_mul(4), what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.saturating_mul(8), what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.count(what, 1)?;
        let start = self.pos;
        let raw = self.take(n, what)?;
        match std::str::from_utf8(raw) {
            Ok(s) => Ok(s.to_string()),
            Err(e) => Err(Error::Parse {
                offset: (start + e.valid_up_to()) as u64,
                message: format!("invalid UTF-8 in {what}"),
            }),
        }
    }
    fn matrix(&mut self, rows: usize, dim: usize, what: &str) -> Result<FeatureMatrix> {
        let at = self.pos;
        let data = self.f32s(rows.saturating_mul(dim), what)?;
        FeatureMatrix::new(dim, data).map_err(|e| Error::Parse {
            offset: at as u64,
            message: format!("{what}: {e}"),
        })
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return self.err(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }

    fn header(&mut self, expected_kind: u32) -> Result<(usize, usize)> {
        if self.take(4, "magic")? != MAGIC {
            self.pos = 0;
            return self.err("bad magic, expected \"PKVC\"");
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            self.pos -= 4;
            return self.err(format!("unsupported format version {version}"));
        }
        let kind = self.u32("kind")?;
        if kind != expected_kind {
            self.pos -= 4;
            return self.err(format!("container kind {kind}, expected {expected_kind}"));
        }
        let alphabet = self.u32("alphabet size")? as usize;
        let dim = self.u32("feature dim")? as usize;
        if dim == 0 {
            self.pos -= 4;
            return self.err("feature dim 0");
        }
        Ok((alphabet, dim))
    }
}

fn label_runs(labels: &[PhoneId]) -> Vec<(u16, u16)> {
    let mut runs: Vec<(u16, u16)> = Vec::new();
    for &p in labels {
        match runs.last_mut() {
            Some((q, n)) if *q == p.0 && *n < u16::MAX => *n += 1,
            _ => runs.push((p.0, 1)),
        }
    }
    runs
}

fn gender_byte(g: Gender) -> u8 {
    match g {
        Gender::Female => 0,
        Gender::Male => 1,
    }
}

pub fn encode_corpus(corpus: &Corpus) -> Result<Vec<u8>> {
    corpus.validate()?;
    let mut w = Writer::header(KIND_CORPUS, corpus.alphabet_size, corpus.feature_dim);
    w.u32(corpus.speakers.len() as u32);
    w.u32(corpus.utterances.len() as u32);
    w.u32(if corpus.truth.is_some() { FLAG_TRUTH } else { 0 });
    let index_of = |id: &str| corpus.speakers.iter().position(|s| s.speaker_id == id);
    for s in &corpus.speakers {
        w.str(&s.speaker_id);
        w.u8(gender_byte(s.gender));
    }
    for u in &corpus.utterances {
        w.str(&u.utterance_id);
        w.u32(index_of(&u.speaker_id).expect("validated") as u32);
        w.u8(u.split.to_byte());
        w.u32(u.features.rows() as u32);
        w.f32s(u.features.as_slice());
        match &u.gold_labels {
            None => w.u8(0),
            Some(labels) => {
                w.u8(1);
                let runs = label_runs(labels);
                w.u32(runs.len() as u32);
                for (p, n) in runs {
                    w.u16(p);
                    w.u16(n);
                }
            }
        }
    }
    if let Some(truth) = &corpus.truth {
        w.f32s(truth.prototypes.as_slice());
        w.u32(truth.profiles.len() as u32);
        for prof in &truth.profiles {
            let idx = index_of(&prof.speaker_id)
                .ok_or_else(|| Error::invalid(format!("profile for unknown {}", prof.speaker_id)))?;
            if prof.timbre_offset.len() != corpus.feature_dim
                || prof.per_phone_duration_mean.len() != corpus.alphabet_size
            {
                return Err(Error::invalid("profile vector lengths disagree with corpus"));
            }
            w.u32(idx as u32);
            w.f64s(&[prof.timbre_strength, prof.duration_jitter]);
            w.f64s(&prof.timbre_offset);
            w.f64s(&prof.per_phone_duration_mean);
        }
    }
    Ok(w.buf)
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    let mut r = Reader { bytes, pos: 0 };
    let (alphabet, dim) = r.header(KIND_CORPUS)?;
    let n_speakers = r.count("speaker count", 5)?;
    let n_utts = r.count("utterance count", 14)?;
    let flags = r.u32("flags")?;
    let mut speakers = Vec::with_capacity(n_speakers);
    for _ in 0..n_speakers {
        let speaker_id = r.str("speaker id")?;
        let gender = match r.u8("gender")? {
            0 => Gender::Female,
            1 => Gender::Male,
            g => {
                r.pos -= 1;
                return r.err(format!("bad gender byte {g}"));
            }
        };
        speakers.push(SpeakerInfo { speaker_id, gender });
    }
    let speaker_at = |r: &mut Reader, what: &str| -> Result<usize> {
        let i = r.u32(what)? as usize;
        if i >= speakers.len() {
            r.pos -= 4;
            return r.err(format!("speaker index {i} out of range"));
        }
        Ok(i)
    };
    let mut utterances = Vec::with_capacity(n_utts);
    for _ in 0..n_utts {
        let utterance_id = r.str("utterance id")?;
        let si = speaker_at(&mut r, "utterance speaker")?;
        let split = match Split::from_byte(r.u8("split")?) {
            Some(s) => s,
            None => {
                r.pos -= 1;
                return r.err("bad split tag");
            }
        };
        let frames = r.u32("frame count")? as usize;
        let features = r.matrix(frames, dim, "frames")?;
        let gold_labels = match r.u8("label flag")? {
            0 => None,
            1 => {
                let n_runs = r.count("label runs", 4)?;
                let mut labels = Vec::with_capacity(frames);
                for _ in 0..n_runs {
                    let p = r.u16("run phone")?;
                    let n = r.u16("run length")?;
                    if p as usize >= alphabet || n == 0 {
                        r.pos -= 4;
                        return r.err(format!("bad label run ({p}, {n})"));
                    }
                    labels.extend(std::iter::repeat_n(PhoneId(p), n as usize));
                }
                if labels.len() != frames {
                    return r.err(format!("{} labels for {frames} frames", labels.len()));
                }
                Some(labels)
            }
            f => {
                r.pos -= 1;
                return r.err(format!("bad label flag {f}"));
            }
        };
        utterances.push(Utterance {
            utterance_id,
            speaker_id: speakers[si].speaker_id.clone(),
            gender: speakers[si].gender,
            split,
            features,
            gold_labels,
        });
    }
    let truth = if flags & FLAG_TRUTH != 0 {
        let prototypes = r.matrix(alphabet, dim, "prototypes")?;
        let n = r.count("profile count", 20)?;
        let mut profiles = Vec::with_capacity(n);
        for _ in 0..n {
            let si = speaker_at(&mut r, "profile speaker")?;
            let head = r.f64s(2, "profile scalars")?;
            let timbre_offset = r.f64s(dim, "timbre offset")?;
            let per_phone_duration_mean = r.f64s(alphabet, "duration means")?;
            profiles.push(SpeakerProfile {
                speaker_id: speakers[si].speaker_id.clone(),
                gender: speakers[si].gender,
                timbre_offset,
                timbre_strength: head[0],
                per_phone_duration_mean,
                duration_jitter: head[1],
            });
        }
        Some(GeneratorTruth { prototypes, profiles })
    } else {
        None
    };
    r.finish()?;
    let corpus = Corpus { alphabet_size: alphabet, feature_dim: dim, speakers, utterances, truth };
    corpus.validate().map_err(|e| Error::Parse { offset: bytes.len() as u64, message: e.to_string() })?;
    Ok(corpus)
}

pub fn encode_classifier(classifier: &PhoneClassifier) -> Vec<u8> {
    let mut w = Writer::header(KIND_CLASSIFIER, classifier.alphabet_size(), classifier.dim());
    let present: Vec<_> = classifier.prototypes().collect();
    w.u32(present.len() as u32);
    for (phone, proto) in present {
        w.u16(phone.0);
        w.f32s(proto);
    }
    w.buf
}

pub fn decode_classifier(bytes: &[u8]) -> Result<PhoneClassifier> {
    let mut r = Reader { bytes, pos: 0 };
    let (alphabet, dim) = r.header(KIND_CLASSIFIER)?;
    let n = r.count("prototype count", 2 + 4 * dim)?;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let p = r.u16("phone")?;
        let v = r.f32s(dim, "prototype")?;
        entries.push((PhoneId(p), v));
    }
    r.finish()?;
    PhoneClassifier::from_prototypes(alphabet, dim, entries)
        .map_err(|e| Error::Parse { offset: bytes.len() as u64, message: e.to_string() })
}

pub fn encode_pool(pool: &QuantizedPool) -> Vec<u8> {
    let mut w = Writer::header(KIND_POOL, pool.alphabet_size(), pool.dim());
    w.str(&pool.speaker_id);
    w.u32(pool.k as u32);
    for p in 0..pool.alphabet_size() {
        let centers = pool.centers(PhoneId(p as u16));
        w.u32((centers.len() / pool.dim()) as u32);
        w.f32s(centers);
    }
    w.buf
}

pub fn decode_pool(bytes: &[u8]) -> Result<QuantizedPool> {
    let mut r = Reader { bytes, pos: 0 };
    let (alphabet, dim) = r.header(KIND_POOL)?;
    let speaker_id = r.str("pool speaker")?;
    let k = r.u32("k")? as usize;
    let mut per_phone = Vec::with_capacity(alphabet);
    for _ in 0..alphabet {
        let n = r.count("center count", 4 * dim)?;
        per_phone.push(r.f32s(n * dim, "centers")?);
    }
    r.finish()?;
    QuantizedPool::from_parts(speaker_id, k, dim, per_phone)
        .map_err(|e| Error::Parse { offset: bytes.len() as u64, message: e.to_string() })
}

fn json_offset(bytes: &[u8], err: &serde_json::Error) -> u64 {
    // serde_json reports 1-based line/column; convert to a byte offset.
    let mut line = 1;
    let mut offset = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if line == err.line() {
            offset = i;
            break;
        }
        if b == b'\n' {
            line += 1;
        }
    }
    (offset + err.column().saturating_sub(1)).min(bytes.len()) as u64
}

/// Writes the corpus; paths ending in `.json` use the JSON manifest variant.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if path.extension().is_some_and(|e| e == "json") {
        corpus.validate()?;
        serde_json::to_vec_pretty(corpus)?
    } else {
        encode_corpus(corpus)?
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads either container variant, detected from the first bytes.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        return decode_corpus(&bytes);
    }
    match bytes.iter().find(|b| !b.is_ascii_whitespace()) {
        Some(b'{') => {
            let corpus: Corpus = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
                offset: json_offset(&bytes, &e),
                message: e.to_string(),
            })?;
            corpus.validate().map_err(|e| Error::Parse {
                offset: bytes.len() as u64,
                message: e.to_string(),
            })?;
            Ok(corpus)
        }
        _ => Err(Error::Parse { offset: 0, message: "neither a PKVC container nor JSON".into() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    fn tiny() -> Corpus {
        let spec = CorpusSpec {
            num_speakers: 2,
            eval_speakers: 0,
            utterances_per_speaker: 2,
            phones_per_utterance: 4,
            num_target_speakers: 1,
            target_utterances: 1,
            duration_train_utterances: 1,
            alphabet_size: 6,
            feature_dim: 3,
            ..CorpusSpec::default()
        };
        generate_corpus(&spec, 4).unwrap()
    }

    #[test]
    fn roundtrip_generated() {
        let c = tiny();
        let bytes = encode_corpus(&c).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(decode_corpus(&bytes).unwrap(), c);
    }

    #[test]
    fn minimal_corpus_roundtrips() {
        let c = Corpus {
            alphabet_size: 1,
            feature_dim: 1,
            speakers: vec![SpeakerInfo { speaker_id: "a".into(), gender: Gender::Male }],
            utterances: vec![Utterance {
                utterance_id: "a-0".into(),
                speaker_id: "a".into(),
                gender: Gender::Male,
                split: Split::Trial,
                features: FeatureMatrix::new(1, vec![-0.0]).unwrap(),
                gold_labels: Some(vec![PhoneId(0)]),
            }],
            truth: None,
        };
        let back = decode_corpus(&encode_corpus(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.utterances[0].features.as_slice()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = encode_corpus(&tiny()).unwrap();
        for cut in (0..bytes.len()).step_by(7) {
            match decode_corpus(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let mut bytes = encode_corpus(&tiny()).unwrap();
        bytes.push(0);
        let n = bytes.len() as u64;
        assert!(matches!(decode_corpus(&bytes), Err(Error::Parse { offset, .. }) if offset == n - 1));
        bytes[0] = b'X';
        assert!(matches!(decode_corpus(&bytes), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn long_label_runs_split() {
        let labels = vec![PhoneId(2); 70_000];
        let runs = label_runs(&labels);
        assert_eq!(runs, vec![(2, u16::MAX), (2, (70_000 - u16::MAX as u32) as u16)]);
    }

    #[test]
    fn json_variant_roundtrips() {
        let c = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        save_corpus(&c, &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), c);
        std::fs::write(&path, b"{\n  \"alphabet_size\": 3,\n  oops").unwrap();
        assert!(matches!(load_corpus(&path), Err(Error::Parse { offset, .. }) if offset > 0));
    }
}
