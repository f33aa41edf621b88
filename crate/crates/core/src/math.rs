//! Thin wrappers over `libm` so numeric code reads like `std`.

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub(crate) fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub(crate) fn powi(x: f64, n: u32) -> f64 {
    let mut acc = 1.0;
    for _ in 0..n {
        acc *= x;
    }
    acc
}

#[inline]
pub(crate) fn sin(x: f64) -> f64 {
    libm::sin(x)
}

/// Weighted dot product `Σ_j w_j a_j b_j`.
#[inline]
pub(crate) fn wdot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum()
}

#[inline]
pub(crate) fn wnorm_sq(w: &[f64], a: &[f64]) -> f64 {
    wdot(w, a, a)
}

/// Weighted squared distance `Σ_j w_j (a_j - b_j)²`.
#[inline]
pub(crate) fn wdist_sq(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter()
        .zip(a)
        .zip(b)
        .map(|((w, a), b)| {
            let d = a - b;
            w * d * d
        })
        .sum()
}
