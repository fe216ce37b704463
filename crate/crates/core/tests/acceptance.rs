//! Acceptance gate: every criterion runs at its stated tolerance and runtime
//! budget and prints one PASS/FAIL line. Run with
//! `cargo test --release -p pkvc-core --test acceptance -- --nocapture`.

use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pkvc::convert::{CodebookIndex, KnnIndex, SearchMode};
use pkvc::corpus::{generate_corpus, CorpusSpec, FeatureMatrix, Gender, PhoneId};
use pkvc::duration::{blend, resample_segment};
use pkvc::experiment::{cmd_run, run_once, AnonChoice, CorpusSource, ExperimentConfig, RunSettings, Workspace};
use pkvc::privacy::{compute_eer, fold_eer, gender_averaged_eer, privacy_report, ScoredTrial, UtilityReport};
use pkvc::quantize::{kmeans, KMeansParams, QuantizedPool};
use pkvc::select::{build_disjoint_split, select_target, SelectionStrategy, TargetSpeaker};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check, u64);

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> FeatureMatrix {
    let data = (0..rows * dim).map(|_| gauss(rng) as f32).collect();
    FeatureMatrix::new(dim, data).unwrap()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

// ---------------------------------------------------------------- criterion 1

fn blend_exactness() -> Check {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let p = r.random_range(0.0..40.0);
        let t = r.random_range(0.0..40.0);
        let w = r.random_range(0.0..=1.0);
        let got = blend(&[p], &[t], w).map_err(|e| e.to_string())?[0];
        worst = worst.max((got - (w * p + (1.0 - w) * t)).abs());
        ensure(blend(&[p], &[t], 0.0).unwrap()[0] == t, "w=0 endpoint not exact")?;
        ensure(blend(&[p], &[t], 1.0).unwrap()[0] == p, "w=1 endpoint not exact")?;
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!("10^4 triples, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 2

fn resampling_anchor() -> Check {
    let rows: Vec<Vec<f32>> = (0..5).map(|i| vec![i as f32, 10.0 * i as f32]).collect();
    let seg = FeatureMatrix::from_rows(&rows).unwrap();
    let out = resample_segment(&seg, 3).map_err(|e| e.to_string())?;
    let got: Vec<&[f32]> = out.iter_rows().collect();
    let want = [rows[0].as_slice(), rows[2].as_slice(), rows[4].as_slice()];
    ensure(got == want, format!("got rows {got:?}"))?;
    Ok("5 → 3 keeps rows 1, 3, 5".into())
}

// ---------------------------------------------------------------- criterion 3

/// Sweeps every candidate threshold and counts errors directly.
fn brute_force_eer(trials: &[(f64, bool)]) -> f64 {
    let mut scores: Vec<f64> = trials.iter().map(|t| t.0).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut thresholds = scores.clone();
    thresholds.extend(scores.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(f64::total_cmp);
    let targets = trials.iter().filter(|t| t.1).count() as f64;
    let nontargets = trials.len() as f64 - targets;
    let rates: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let fa = trials.iter().filter(|&&(s, l)| !l && s >= th).count() as f64 / nontargets;
            let fr = trials.iter().filter(|&&(s, l)| l && s < th).count() as f64 / targets;
            (fa, fr)
        })
        .collect();
    for pair in rates.windows(2) {
        let (a, b) = (pair[0].0 - pair[0].1, pair[1].0 - pair[1].1);
        if a > 0.0 && b <= 0.0 {
            let t = a / (a - b);
            return 100.0 * (pair[0].0 + t * (pair[1].0 - pair[0].0));
        }
    }
    panic!("no crossing")
}

fn eer_oracle() -> Check {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for i in 0..500 {
        let n = r.random_range(2..=200);
        // Coarse scores on some sets force ties.
        let coarse = i % 3 == 0;
        let mut trials: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let label = r.random_bool(0.3);
                let s = gauss(&mut r) + if label { 1.0 } else { 0.0 };
                (if coarse { (s * 4.0).round() / 4.0 } else { s }, label)
            })
            .collect();
        trials[0].1 = true;
        trials[1].1 = false;
        let got = compute_eer(&trials).map_err(|e| e.to_string())?.eer_percent;
        worst = worst.max((got - brute_force_eer(&trials)).abs());
    }
    ensure(worst <= 1e-9, format!("max deviation {worst:e}"))?;

    for n in [1usize, 5, 50] {
        let separable: Vec<(f64, bool)> =
            (0..n).map(|i| (1.0 + i as f64, true)).chain((0..n).map(|i| (-(i as f64), false))).collect();
        let e = compute_eer(&separable).unwrap().eer_percent;
        ensure(e == 0.0, format!("separable set gave {e}"))?;
        let symmetric: Vec<(f64, bool)> =
            (0..n).flat_map(|i| [(i as f64 * 0.37, true), (i as f64 * 0.37, false)]).collect();
        let e = compute_eer(&symmetric).unwrap().eer_percent;
        ensure((e - 50.0).abs() <= 1e-9, format!("label-symmetric set gave {e}"))?;
    }
    Ok(format!("500 sets, max deviation {worst:.1e}; separable 0%, symmetric 50%"))
}

// ---------------------------------------------------------------- criterion 4

fn folding_rules() -> Check {
    ensure(fold_eer(52.0).unwrap() == 48.0, "fold(52) != 48")?;
    ensure(fold_eer(49.6).unwrap() == 49.6, "fold(49.6) != 49.6")?;
    // Eighths are exact in binary, so 100 - (100 - x) == x on this grid.
    for i in 0..=800 {
        let x = i as f64 / 8.0;
        let (a, b) = (fold_eer(x).unwrap(), fold_eer(100.0 - x).unwrap());
        ensure(a == b && a <= 50.0, format!("fold asymmetric at {x}: {a} vs {b}"))?;
    }
    let mut r = rng(4);
    let mut scores = Vec::new();
    for g in Gender::ALL {
        // Inverted scores on one gender give a raw EER above 50%.
        let sign = if g == Gender::Male { -1.0 } else { 1.0 };
        for i in 0..120 {
            let label = i % 4 == 0;
            let s = sign * (gauss(&mut r) + if label { 0.8 } else { 0.0 });
            scores.push(ScoredTrial {
                enroll_spk: format!("e{}", i % 7),
                trial_utt: format!("{}-{i}", g.as_str()),
                gender: g,
                label: u8::from(label),
                score: s,
            });
        }
    }
    let report = privacy_report(&scores, true, UtilityReport::default()).map_err(|e| e.to_string())?;
    let folded = |g: Gender| {
        let t: Vec<(f64, bool)> =
            scores.iter().filter(|s| s.gender == g).map(|s| (s.score, s.label == 1)).collect();
        let raw = brute_force_eer(&t);
        (raw, raw.min(100.0 - raw))
    };
    let ((raw_f, f), (raw_m, m)) = (folded(Gender::Female), folded(Gender::Male));
    ensure(raw_m > 50.0, "male raw EER should exceed 50%")?;
    ensure((report.eer_female - f).abs() <= 1e-9 && (report.eer_male - m).abs() <= 1e-9, "per-gender mismatch")?;
    ensure(report.eer_averaged == gender_averaged_eer(report.eer_female, report.eer_male).unwrap(), "average")?;
    ensure((report.eer_averaged - (f + m) / 2.0).abs() <= 1e-9, "averaged EER mismatch")?;
    Ok(format!("raw f {raw_f:.2} m {raw_m:.2} → folded avg {:.2}", report.eer_averaged))
}

// ---------------------------------------------------------------- criterion 5

fn knn_oracle(source: &FeatureMatrix, pool: &FeatureMatrix, k: usize) -> Vec<f32> {
    let mut out = Vec::new();
    for frame in source.iter_rows() {
        let mut ranked: Vec<(f64, usize)> =
            pool.iter_rows().enumerate().map(|(i, row)| (cosine(frame, row), i)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = ranked.iter().take(k).map(|&(_, i)| i).collect();
        chosen.sort_unstable();
        for j in 0..pool.dim() {
            let sum: f64 = chosen.iter().map(|&i| pool.row(i)[j] as f64).sum();
            out.push((sum / chosen.len() as f64) as f32);
        }
    }
    out
}

fn codebook_oracle(source: &FeatureMatrix, pool: &QuantizedPool, labels: Option<&[PhoneId]>) -> Vec<f32> {
    let all: Vec<(PhoneId, &[f32])> = pool.iter_centers().collect();
    let mut out = Vec::new();
    for (t, frame) in source.iter_rows().enumerate() {
        let restricted: Vec<&(PhoneId, &[f32])> = match labels {
            Some(l) => all.iter().filter(|(p, _)| *p == l[t]).collect(),
            None => Vec::new(),
        };
        let candidates: Vec<&(PhoneId, &[f32])> =
            if restricted.is_empty() { all.iter().collect() } else { restricted };
        let mut best: Option<(f64, &[f32])> = None;
        for (_, c) in candidates {
            let s = cosine(frame, c);
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, c));
            }
        }
        out.extend_from_slice(best.unwrap().1);
    }
    out
}

fn conversion_oracles() -> Check {
    let mut r = rng(5);
    for instance in 0..100 {
        let dim = r.random_range(2..=12);
        let source = random_matrix(&mut r, 50, dim);
        let mut pool = random_matrix(&mut r, 200, dim).into_vec();
        // Duplicated and zero rows exercise tie-breaking.
        if instance % 4 == 0 {
            let row: Vec<f32> = pool[..dim].to_vec();
            pool[5 * dim..6 * dim].copy_from_slice(&row);
            pool[7 * dim..8 * dim].iter_mut().for_each(|v| *v = 0.0);
        }
        let pool = FeatureMatrix::new(dim, pool).unwrap();
        let k = [1, 4, 7][instance % 3];
        let got = KnnIndex::new(pool.clone()).convert(&source, k).map_err(|e| e.to_string())?;
        ensure(got.as_slice() == knn_oracle(&source, &pool, k).as_slice(), format!("kNN instance {instance}"))?;

        let phones = 6;
        let per_phone: Vec<Vec<f32>> = (0..phones)
            .map(|p| {
                if p == 2 {
                    return Vec::new();
                }
                let n = r.random_range(1..=8);
                random_matrix(&mut r, n, dim).into_vec()
            })
            .collect();
        let q = QuantizedPool::from_parts("t".into(), 8, dim, per_phone).unwrap();
        let labels: Vec<PhoneId> = (0..50).map(|_| PhoneId(r.random_range(0..phones) as u16)).collect();
        let index = CodebookIndex::new(q.clone()).map_err(|e| e.to_string())?;
        let global = index.convert(&source, SearchMode::Global, None).map_err(|e| e.to_string())?;
        ensure(global.as_slice() == codebook_oracle(&source, &q, None).as_slice(), format!("global {instance}"))?;
        let local = index.convert(&source, SearchMode::PerPhone, Some(&labels)).map_err(|e| e.to_string())?;
        ensure(
            local.as_slice() == codebook_oracle(&source, &q, Some(&labels)).as_slice(),
            format!("per-phone {instance}"),
        )?;
    }
    Ok("100 instances: kNN, codebook global and per-phone exact".into())
}

// ---------------------------------------------------------------- criterion 6

fn objective(points: &[Vec<f32>], centers: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| {
            centers
                .iter()
                .map(|c| p.iter().zip(c).map(|(&a, &b)| (a as f64 - b).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Plain Lloyd iterations from uniformly drawn distinct starting points.
fn lloyd_restart(points: &[Vec<f32>], k: usize, r: &mut ChaCha8Rng) -> f64 {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    for i in 0..k {
        let j = r.random_range(i..idx.len());
        idx.swap(i, j);
    }
    let mut centers: Vec<Vec<f64>> =
        idx[..k].iter().map(|&i| points[i].iter().map(|&v| v as f64).collect()).collect();
    for _ in 0..200 {
        let mut sums = vec![vec![0.0; points[0].len()]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let (best, _) = centers
                .iter()
                .enumerate()
                .map(|(c, ctr)| (c, p.iter().zip(ctr).map(|(&a, &b)| (a as f64 - b).powi(2)).sum::<f64>()))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            counts[best] += 1;
            for (s, &v) in sums[best].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        let next: Vec<Vec<f64>> = (0..k)
            .map(|c| {
                if counts[c] == 0 {
                    centers[c].clone()
                } else {
                    sums[c].iter().map(|s| s / counts[c] as f64).collect()
                }
            })
            .collect();
        if next == centers {
            break;
        }
        centers = next;
    }
    objective(points, &centers)
}

fn kmeans_properties() -> Check {
    let mut r = rng(6);
    for run in 0..100u64 {
        let n = r.random_range(20..200);
        let dim = r.random_range(1..6);
        let pts: Vec<Vec<f32>> = (0..n).map(|_| (0..dim).map(|_| gauss(&mut r) as f32).collect()).collect();
        let refs: Vec<&[f32]> = pts.iter().map(Vec::as_slice).collect();
        let res = kmeans(&refs, KMeansParams::new(r.random_range(1..10), run)).map_err(|e| e.to_string())?;
        for w in res.history.windows(2) {
            ensure(w[1] <= w[0], format!("run {run}: objective rose {} → {}", w[0], w[1]))?;
        }
    }
    let pts: Vec<Vec<f32>> = (0..57).map(|_| (0..3).map(|_| gauss(&mut r) as f32).collect()).collect();
    let refs: Vec<&[f32]> = pts.iter().map(Vec::as_slice).collect();
    let one = kmeans(&refs, KMeansParams::new(1, 2)).unwrap();
    for j in 0..3 {
        let mean = pts.iter().map(|p| p[j] as f64).sum::<f64>() / pts.len() as f64;
        ensure((one.center(0)[j] as f64 - mean).abs() <= 1e-6, "k=1 center is not the mean")?;
    }
    // The stored f32 center rounds the mean; compare objectives in f64.
    let mean: Vec<f64> =
        (0..3).map(|j| pts.iter().map(|p| p[j] as f64).sum::<f64>() / pts.len() as f64).collect();
    let stored: Vec<f64> = one.center(0).iter().map(|&v| v as f64).collect();
    ensure((objective(&pts, &[stored]) - objective(&pts, &[mean])).abs() <= 1e-9, "k=1 objective")?;

    let mut worst = 0.0f64;
    for inst in 0..10u64 {
        let small: Vec<Vec<f32>> = (0..30)
            .map(|i| {
                let c = (i % 3) as f64 * 2.0;
                vec![(c + gauss(&mut r)) as f32, (gauss(&mut r) - c) as f32]
            })
            .collect();
        let refs: Vec<&[f32]> = small.iter().map(Vec::as_slice).collect();
        let got = kmeans(&refs, KMeansParams::new(3, inst)).unwrap();
        let centers: Vec<Vec<f64>> =
            (0..got.n_centers()).map(|c| got.center(c).iter().map(|&v| v as f64).collect()).collect();
        let ours = objective(&small, &centers);
        let best = (0..100).map(|_| lloyd_restart(&small, 3, &mut r)).fold(f64::INFINITY, f64::min);
        worst = worst.max(ours / best - 1.0);
    }
    ensure(worst <= 0.05, format!("objective {:.1}% above the restart oracle", 100.0 * worst))?;
    Ok(format!("100 monotone runs; k=1 mean; worst gap to 100-restart oracle {:.2}%", 100.0 * worst))
}

// ------------------------------------------------------------- criteria 7 to 9

fn seed_mean(ws: &Workspace, anon: &str, pool: Option<usize>, seeds: &[u64]) -> std::result::Result<(f64, f64), String> {
    let anon: AnonChoice = anon.parse().map_err(|e: pkvc::Error| e.to_string())?;
    let (mut eer, mut per) = (0.0, 0.0);
    for &seed in seeds {
        let settings = RunSettings {
            anon,
            search_mode: SearchMode::Global,
            num_targets: pool,
            attacker_speakers: None,
            seed,
        };
        let out = run_once(ws, &settings).map_err(|e| e.to_string())?;
        eer += out.report.eer_averaged;
        per += out.report.utility.per_proxy;
    }
    Ok((eer / seeds.len() as f64, per / seeds.len() as f64))
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const CORPUS_SEED: u64 = 7;

fn phonetic_variation_spec() -> CorpusSpec {
    CorpusSpec::default()
}

fn phonetic_variation_trend() -> Check {
    let ws = Workspace::prepare(generate_corpus(&phonetic_variation_spec(), CORPUS_SEED).unwrap())
        .map_err(|e| e.to_string())?;
    let e0 = seed_mean(&ws, "(0-0)", None, &SEEDS)?.0;
    let e32 = seed_mean(&ws, "(0-32)", None, &SEEDS)?.0;
    let e8 = seed_mean(&ws, "(0-8)", None, &SEEDS)?.0;
    let line = format!("EER (0-0) {e0:.2}, (0-32) {e32:.2}, (0-8) {e8:.2}");
    ensure(e32 - e0 >= 2.0 && e8 - e32 >= 2.0, line.clone())?;
    Ok(line)
}

fn duration_spec() -> CorpusSpec {
    CorpusSpec { timbre_strength: 0.1, ..CorpusSpec::default() }
}

fn duration_trend() -> Check {
    let ws = Workspace::prepare(generate_corpus(&duration_spec(), CORPUS_SEED).unwrap())
        .map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for id in ["(0-0)", "(3-0)", "(7-0)", "(10-0)"] {
        rows.push(seed_mean(&ws, id, None, &SEEDS)?);
    }
    let per: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let line = format!(
        "EER w=0 {:.2}, w=1 {:.2}; per_proxy over w {:?}",
        rows[0].0,
        rows[3].0,
        per.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>()
    );
    ensure(rows[3].0 - rows[0].0 >= 2.0, format!("EER gap too small: {line}"))?;
    ensure(per.windows(2).all(|w| w[1] >= w[0]), format!("per_proxy decreases: {line}"))?;
    Ok(line)
}

/// Speaker identity on its own coordinates, so target variation is not
/// buried under phone content, and twice the evaluation speakers for power.
fn pool_spec() -> CorpusSpec {
    CorpusSpec {
        num_speakers: 30,
        eval_speakers: 20,
        utterances_per_speaker: 16,
        num_target_speakers: 50,
        target_utterances: 15,
        content_dims: Some(12),
        speaker_dims: Some(4),
        ..CorpusSpec::default()
    }
}

const POOL_SEEDS: [u64; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

fn pool_size_trend() -> Check {
    let ws = Workspace::prepare(generate_corpus(&pool_spec(), CORPUS_SEED).unwrap())
        .map_err(|e| e.to_string())?;
    let sizes = [2usize, 5, 10, 25, 50];
    let mut eer = Vec::new();
    for &n in &sizes {
        eer.push(seed_mean(&ws, "(7-8)_r", Some(n), &POOL_SEEDS)?.0);
    }
    let line = sizes.iter().zip(&eer).map(|(n, e)| format!("{n}:{e:.2}")).collect::<Vec<_>>().join(" ");
    ensure(eer[..4].windows(2).all(|w| w[1] >= w[0]), format!("not non-decreasing over 2..25: {line}"))?;
    ensure(eer[4] - eer[3] < eer[2] - eer[0], format!("no saturation: {line}"))?;
    Ok(line)
}

// --------------------------------------------------------------- criterion 10

fn selection_strategies() -> Check {
    let pool: Vec<TargetSpeaker> = (0..40)
        .map(|i| TargetSpeaker {
            speaker_id: format!("t{i:02}"),
            gender: if i % 2 == 0 { Gender::Female } else { Gender::Male },
        })
        .collect();
    let mut r = rng(10);
    let mut counts = vec![0usize; pool.len()];
    let draws = 10_000;
    for i in 0..draws {
        let source = if i % 2 == 0 { Gender::Female } else { Gender::Male };
        let t = select_target(source, &pool, &SelectionStrategy::SameGender, &mut r).map_err(|e| e.to_string())?;
        ensure(t.gender == source, "same-gender draw changed gender")?;
        let t = select_target(source, &pool, &SelectionStrategy::Random, &mut r).unwrap();
        counts[t.speaker_id[1..].parse::<usize>().unwrap()] += 1;
    }
    let expected = draws as f64 / pool.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dof = (pool.len() - 1) as f64;
    ensure(chi2 <= dof + 3.0 * (2.0 * dof).sqrt(), format!("chi-square {chi2:.1}"))?;

    for seed in 0..20 {
        let SelectionStrategy::DisjointSplit { groups, .. } = build_disjoint_split(&pool, seed, false).unwrap() else {
            return Err("disjoint split has the wrong shape".into());
        };
        ensure(groups[0].iter().all(|id| !groups[1].contains(id)), "groups overlap")?;
        ensure(groups[0].len() + groups[1].len() == pool.len(), "groups do not cover the pool")?;
        for g in &groups {
            let females = g.iter().filter(|id| pool.iter().any(|t| &t.speaker_id == *id && t.gender == Gender::Female)).count();
            ensure(2 * females == g.len(), "group not gender balanced")?;
        }
    }
    Ok(format!("same-gender 10^4/10^4; chi-square {chi2:.1} on {dof} dof; disjoint splits balanced"))
}

// --------------------------------------------------------------- criterion 11

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = ExperimentConfig::new(42);
    config.corpus = CorpusSource::Generate {
        spec: CorpusSpec { num_speakers: 12, eval_speakers: 6, num_target_speakers: 6, ..CorpusSpec::default() },
        seed: None,
    };
    config.anon = "(7-8)_r".parse().unwrap();
    let mut outputs = Vec::new();
    for (name, threads) in [("a", 1), ("b", 4), ("c", 1)] {
        let dir = tmp.path().join(name);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| cmd_run(&config, Some(&dir))).map_err(|e| e.to_string())?;
        outputs.push(dir);
    }
    for file in ["privacy_report.json", "scores.csv"] {
        let first = fs::read(outputs[0].join(file)).unwrap();
        for dir in &outputs[1..] {
            ensure(fs::read(dir.join(file)).unwrap() == first, format!("{file} differs"))?;
        }
    }
    Ok("three runs (1 and 4 threads) byte-identical".into())
}

// --------------------------------------------------------------- criterion 12

fn sanity_floor() -> Check {
    let spec = CorpusSpec::default();
    let ws = Workspace::prepare(generate_corpus(&spec, CORPUS_SEED).unwrap()).map_err(|e| e.to_string())?;
    let settings = RunSettings {
        anon: AnonChoice::Original,
        search_mode: SearchMode::Global,
        num_targets: None,
        attacker_speakers: None,
        seed: 1,
    };
    let out = run_once(&ws, &settings).map_err(|e| e.to_string())?;
    let e = out.report.eer_averaged;
    ensure(e <= 10.0, format!("original EER {e:.2}"))?;
    Ok(format!("original EER {e:.2}"))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 12] = [
        ("duration blend exactness", blend_exactness, 1),
        ("resampling anchor", resampling_anchor, 1),
        ("EER oracle equivalence", eer_oracle, 10),
        ("folding and averaging", folding_rules, 1),
        ("conversion oracle equivalence", conversion_oracles, 10),
        ("k-means properties", kmeans_properties, 30),
        ("trend: phonetic variation", phonetic_variation_trend, 300),
        ("trend: phone duration", duration_trend, 300),
        ("trend: pool size", pool_size_trend, 600),
        ("selection strategies", selection_strategies, 30),
        ("end-to-end determinism", determinism, 120),
        ("sanity floor", sanity_floor, 60),
    ];
    let mut failed = Vec::new();
    for (i, (name, check, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let result = match result {
            Ok(msg) if took > Duration::from_secs(budget) => {
                Err(format!("{msg}; took {took:.1?}, budget {budget} s"))
            }
            other => other,
        };
        match &result {
            Ok(msg) => println!("criterion {:>2} PASS  {name}: {msg} [{took:.1?}]", i + 1),
            Err(msg) => {
                println!("criterion {:>2} FAIL  {name}: {msg} [{took:.1?}]", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
