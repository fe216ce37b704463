//! Per-phone k-means codebooks of a target speaker.
//!
//! A target's frames are labeled with the phone classifier, grouped by label,
//! and each group is reduced to at most `k` cluster centers. Conversion then
//! draws from these centers instead of the raw target frames, which caps how
//! many realizations of each phone the output can contain.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{PhoneId, Utterance};
use crate::error::{Error, Result};
use crate::phonelab::PhoneClassifier;
use crate::seed::keyed_rng;
use crate::vector::squared_distance;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Independent seeded starts; the lowest final objective wins.
    pub n_init: usize,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, seed, max_iters: 100, rel_tol: 1e-6, n_init: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Row-major `n_centers × D`.
    pub centers: Vec<f32>,
    pub dim: usize,
    /// Within-cluster sum of squared distances after each assignment step.
    pub history: Vec<f64>,
}

impl KMeansResult {
    pub fn n_centers(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn center(&self, i: usize) -> &[f32] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn objective(&self) -> f64 {
        self.history.last().copied().unwrap_or(0.0)
    }
}

/// Sum over points of the squared distance to the nearest center.
pub fn quantization_error(points: &[&[f32]], centers: &[f32], dim: usize) -> f64 {
    let centers: Vec<Vec<f64>> =
        centers.chunks_exact(dim).map(|c| c.iter().map(|&v| v as f64).collect()).collect();
    points
        .iter()
        .map(|p| centers.iter().map(|c| squared_distance(p, c)).fold(f64::INFINITY, f64::min))
        .sum()
}

fn distinct_points<'a>(points: &[&'a [f32]]) -> Vec<&'a [f32]> {
    let mut out: Vec<&[f32]> = Vec::new();
    for &p in points {
        if !out.iter().any(|q| q.iter().zip(p).all(|(a, b)| a.to_bits() == b.to_bits())) {
            out.push(p);
        }
    }
    out
}

/// Draws an index with probability proportional to `weights`.
fn weighted_pick(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    if total <= 0.0 {
        return rng.random_range(0..weights.len());
    }
    let mut target = rng.random::<f64>() * total;
    let mut chosen = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            chosen = Some(i);
            if target < w {
                break;
            }
            target -= w;
        }
    }
    chosen.expect("positive total implies a positive weight")
}

/// Greedy k-means++: each step samples `2 + ln k` candidates by squared
/// distance and keeps the one that lowers the potential most.
fn plus_plus_init(points: &[&[f32]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let to64 = |p: &[f32]| p.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let trials = 2 + (k as f64).ln() as usize;
    let first = rng.random_range(0..points.len());
    let mut centers = vec![to64(points[first])];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
        for _ in 0..trials {
            let c = to64(points[weighted_pick(&d2, total, rng)]);
            let next: Vec<f64> = d2.iter().zip(points).map(|(&d, p)| d.min(squared_distance(p, &c))).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, c, next));
            }
        }
        let (_, c, next) = best.expect("at least one trial");
        d2 = next;
        centers.push(c);
    }
    centers
}

fn assign(points: &[&[f32]], centers: &[Vec<f64>], labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let d = squared_distance(p, center);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
        dists[i] = best_d;
        total += best_d;
    }
    total
}

/// Lloyd's algorithm from `n_init` seeded k-means++ starts.
///
/// Each start stops when the relative decrease of the objective falls below
/// `rel_tol`, when assignments stop changing, or after `max_iters` updates; the
/// start with the lowest final objective is returned, ties to the earliest.
/// When there are at most `k` distinct points they are returned as the
/// centers. An empty cluster is re-seeded at the point farthest from its
/// current center.
pub fn kmeans(points: &[&[f32]], params: KMeansParams) -> Result<KMeansResult> {
    if params.k == 0 {
        return Err(Error::invalid("k-means needs k ≥ 1"));
    }
    if params.n_init == 0 {
        return Err(Error::invalid("k-means needs n_init ≥ 1"));
    }
    let dim = points.first().ok_or(Error::Empty("k-means points"))?.len();
    if dim == 0 {
        return Err(Error::invalid("zero-dimensional points"));
    }
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, actual: p.len() });
    }

    let distinct = distinct_points(points);
    if distinct.len() <= params.k {
        return Ok(KMeansResult {
            centers: distinct.iter().flat_map(|p| p.iter().copied()).collect(),
            dim,
            history: vec![0.0],
        });
    }

    let mut best: Option<(Vec<Vec<f64>>, Vec<f64>)> = None;
    for start in 0..params.n_init {
        let mut rng = keyed_rng(params.seed, &format!("kmeans++/{start}"));
        let (centers, history) = lloyd(points, dim, &params, &mut rng);
        let obj = *history.last().expect("history starts nonempty");
        if best.as_ref().is_none_or(|b| obj < *b.1.last().expect("nonempty")) {
            best = Some((centers, history));
        }
    }
    let (centers, history) = best.expect("n_init ≥ 1");
    let centers = centers.iter().flat_map(|c| c.iter().map(|&v| v as f32)).collect();
    Ok(KMeansResult { centers, dim, history })
}

fn lloyd(points: &[&[f32]], dim: usize, params: &KMeansParams, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut centers = plus_plus_init(points, params.k, rng);
    let n = points.len();
    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut prev_labels = labels.clone();
    let mut history = vec![assign(points, &centers, &mut labels, &mut dists)];

    for _ in 0..params.max_iters {
        let mut sums = vec![vec![0.0f64; dim]; params.k];
        let mut counts = vec![0usize; params.k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, &v) in sums[l].iter_mut().zip(p.iter()) {
                *s += v as f64;
            }
        }
        for c in 0..params.k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centers[c] = sums[c].iter().map(|s| s / n).collect();
            }
        }
        for c in 0..params.k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap();
                centers[c] = points[far].iter().map(|&v| v as f64).collect();
                dists[far] = 0.0;
            }
        }
        prev_labels.copy_from_slice(&labels);
        let obj = assign(points, &centers, &mut labels, &mut dists);
        let last = *history.last().unwrap();
        history.push(obj);
        if labels == prev_labels || last <= 0.0 || (last - obj) / last < params.rel_tol {
            break;
        }
    }

    (centers, history)
}

/// Per-phone cluster centers of one target speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedPool {
    pub speaker_id: String,
    pub k: usize,
    dim: usize,
    // Row-major centers per phone; empty for phones the target never produced.
    per_phone: Vec<Vec<f32>>,
}

impl QuantizedPool {
    pub fn from_parts(
        speaker_id: String,
        k: usize,
        dim: usize,
        per_phone: Vec<Vec<f32>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("pool dimension 0"));
        }
        for c in &per_phone {
            if c.len() % dim != 0 {
                return Err(Error::invalid("center data not a multiple of the dimension"));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite center"));
            }
            if k > 0 && c.len() / dim > k {
                return Err(Error::invalid(format!("more than k={k} centers for a phone")));
            }
        }
        Ok(Self { speaker_id, k, dim, per_phone })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alphabet_size(&self) -> usize {
        self.per_phone.len()
    }

    /// Row-major centers of one phone (possibly empty).
    pub fn centers(&self, phone: PhoneId) -> &[f32] {
        self.per_phone.get(phone.index()).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn total_centers(&self) -> usize {
        self.per_phone.iter().map(|c| c.len() / self.dim).sum()
    }

    /// Every center with its phone, ordered by phone then cluster.
    pub fn iter_centers(&self) -> impl Iterator<Item = (PhoneId, &[f32])> {
        self.per_phone.iter().enumerate().flat_map(move |(p, c)| {
            c.chunks_exact(self.dim).map(move |row| (PhoneId(p as u16), row))
        })
    }
}

/// Labels every target frame, then clusters each phone group with `kmeans(·, k)`.
/// Group `p` uses the seed derived from `(seed, "phone/p")`.
pub fn build_quantized_pool<'a>(
    target_utterances: impl IntoIterator<Item = &'a Utterance>,
    classifier: &PhoneClassifier,
    k: usize,
    seed: u64,
) -> Result<QuantizedPool> {
    if k == 0 {
        return Err(Error::invalid("quantization needs k ≥ 1"));
    }
    let mut groups: Vec<Vec<&[f32]>> = vec![Vec::new(); classifier.alphabet_size()];
    let mut speaker_id = None;
    for utt in target_utterances {
        let labels = classifier.classify_frames(&utt.features)?;
        for (frame, label) in utt.features.iter_rows().zip(labels) {
            groups[label.index()].push(frame);
        }
        speaker_id.get_or_insert_with(|| utt.speaker_id.clone());
    }
    let speaker_id = speaker_id.ok_or(Error::Empty("target speech"))?;
    let per_phone = groups
        .par_iter()
        .enumerate()
        .map(|(p, group)| {
            if group.is_empty() {
                return Ok(Vec::new());
            }
            let params = KMeansParams::new(k, crate::seed::derive_seed(seed, &format!("phone/{p}")));
            Ok(kmeans(group, params)?.centers)
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedPool::from_parts(speaker_id, k, classifier.dim(), per_phone)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::keyed_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cloud(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = keyed_rng(seed, "cloud");
        (0..n)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f32>>())
            .collect()
    }

    fn refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
        v.iter().map(|r| r.as_slice()).collect()
    }

    #[test]
    fn k1_is_the_mean() {
        let pts = cloud(50, 3, 1);
        let r = kmeans(&refs(&pts), KMeansParams::new(1, 0)).unwrap();
        for j in 0..3 {
            let mean = pts.iter().map(|p| p[j] as f64).sum::<f64>() / 50.0;
            assert!((r.center(0)[j] as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn few_distinct_points_are_returned() {
        let pts = vec![vec![1.0f32, 2.0], vec![3.0, 4.0], vec![1.0, 2.0]];
        let r = kmeans(&refs(&pts), KMeansParams::new(3, 9)).unwrap();
        assert_eq!(r.centers, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r.objective(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(kmeans(&[], KMeansParams::new(2, 0)).is_err());
        let pts = cloud(3, 2, 0);
        assert!(kmeans(&refs(&pts), KMeansParams::new(0, 0)).is_err());
    }

    #[test]
    fn deterministic_and_monotone() {
        for seed in 0..20 {
            let pts = cloud(80, 4, seed);
            let a = kmeans(&refs(&pts), KMeansParams::new(5, seed)).unwrap();
            let b = kmeans(&refs(&pts), KMeansParams::new(5, seed)).unwrap();
            assert_eq!(a, b);
            for w in a.history.windows(2) {
                assert!(w[1] <= w[0], "objective increased: {:?}", a.history);
            }
        }
    }

    #[test]
    fn centers_inside_bounding_box() {
        let pts = cloud(60, 3, 4);
        let r = kmeans(&refs(&pts), KMeansParams::new(6, 2)).unwrap();
        for c in r.centers.chunks_exact(3) {
            for j in 0..3 {
                let lo = pts.iter().map(|p| p[j]).fold(f32::INFINITY, f32::min);
                let hi = pts.iter().map(|p| p[j]).fold(f32::NEG_INFINITY, f32::max);
                assert!(c[j] >= lo && c[j] <= hi);
            }
        }
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // Far outlier plus a tight blob; a duplicate-heavy set forces reseeding paths.
        let mut pts = vec![vec![0.0f32, 0.0]; 10];
        pts.extend([vec![0.1, 0.0], vec![0.0, 0.1], vec![100.0, 100.0]]);
        let r = kmeans(&refs(&pts), KMeansParams::new(3, 5)).unwrap();
        assert_eq!(r.n_centers(), 3);
        assert!(r.centers.chunks_exact(2).any(|c| c == [100.0, 100.0]));
    }
}
