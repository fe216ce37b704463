// Small dense-vector helpers shared by the search code. Accumulation is in f64
// with a fixed left-to-right order so results are reproducible.

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[inline]
pub(crate) fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity given precomputed norms; zero vectors score 0.
#[inline]
pub(crate) fn cosine_with_norms(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

#[inline]
pub(crate) fn squared_distance(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

/// Dot product of two f64 vectors with four fixed accumulation lanes, so the
/// loop vectorizes while the summation order stays fixed.
#[inline]
pub(crate) fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `a / |a|` in f64; the zero vector stays zero.
pub(crate) fn unit_f64(a: &[f32]) -> Vec<f64> {
    let n = norm(a);
    if n == 0.0 {
        return vec![0.0; a.len()];
    }
    a.iter().map(|&x| x as f64 / n).collect()
}
