//! Small numeric helpers for probability vectors.
//!
//! All distributions in this crate are dense `Vec<f64>` over a finite grid.
//! These helpers keep tolerance handling in one place.

/// Absolute slack accepted when checking that a vector sums to one.
pub const DIST_SUM_TOL: f64 = 1e-10;

/// Entries more negative than this are treated as genuinely negative rather
/// than rounding noise.
pub const NEG_TOL: f64 = 1e-12;

/// Sum of entries.
pub fn total(v: &[f64]) -> f64 {
    v.iter().sum()
}

/// L1 distance between two equal-length vectors.
pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Checks nonnegativity (up to `NEG_TOL`) and unit sum (up to `tol`).
pub fn is_distribution(v: &[f64], tol: f64) -> bool {
    v.iter().all(|&w| w >= -NEG_TOL && w.is_finite()) && (total(v) - 1.0).abs() <= tol
}

/// Divides by the total mass. Panics on non-positive mass; callers are
/// expected to guard against that with a domain error first.
pub fn normalize(v: &mut [f64]) {
    let mass = total(v);
    assert!(mass > 0.0, "cannot normalize a vector with mass {mass}");
    for w in v.iter_mut() {
        *w /= mass;
    }
}

/// Convex combination `(1 - lambda) * a + lambda * b`.
pub fn blend(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect()
}

/// Dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the smallest entry, lowest index on ties within `tie_eps`.
pub fn argmin_with_ties(v: &[f64], tie_eps: f64) -> (usize, Vec<usize>) {
    let mut best = 0usize;
    for (i, &q) in v.iter().enumerate() {
        if q < v[best] {
            best = i;
        }
    }
    let ties = v
        .iter()
        .enumerate()
        .filter(|(_, &q)| q - v[best] <= tie_eps)
        .map(|(i, _)| i)
        .collect();
    (best, ties)
}
