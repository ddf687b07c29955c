//! Small numeric helpers shared across modules: seed mixing, bit-level
//! hashing of float data, least-squares slopes and direction sampling.

use nalgebra::DVector;

/// SplitMix64 output function. Used to derive per-trial seeds from a base
/// seed so that ensembles are extendable without recomputation: the seed of
/// trial `i` is `splitmix64(base ^ splitmix64(i + 1))`.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for trial `index` of an ensemble with the given base seed.
pub fn trial_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(1)))
}

/// FNV-1a over the raw bits of a float slice. Stable fingerprint for driver
/// data; not a cryptographic hash.
pub fn hash_f64_slice(data: impl IntoIterator<Item = f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in data {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
    }
    h
}

/// Ordinary least-squares slope of `y` against `x`. Returns `None` when
/// fewer than two distinct abscissae are given.
pub fn ls_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|xi| (xi - mx) * (xi - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    Some(sxy / sxx)
}

/// Log-log slope of `(x, y)` pairs, skipping non-positive entries.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for (&xi, &yi) in x.iter().zip(y) {
        if xi > 0.0 && yi > 0.0 {
            lx.push(xi.ln());
            ly.push(yi.ln());
        }
    }
    ls_slope(&lx, &ly)
}

/// Inverse of the standard normal CDF (Acklam's rational approximation,
/// relative error below 1.2e-9). `p` must lie strictly in (0, 1).
#[allow(clippy::excessive_precision)] // published coefficient set
pub fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -inverse_normal_cdf(1.0 - p)
    }
}

/// Deterministic set of unit directions in `R^dim`: the coordinate axes plus
/// `extra` low-discrepancy sphere points. The extra points come from a
/// Kronecker sequence (generalized golden ratio) offset by the seed, mapped
/// coordinatewise through the inverse normal CDF and normalized; this gives
/// an approximately uniform, seed-reproducible net on the sphere.
pub fn unit_directions(dim: usize, extra: usize, seed: u64) -> Vec<DVector<f64>> {
    assert!(dim >= 1);
    let mut dirs: Vec<DVector<f64>> = (0..dim)
        .map(|i| DVector::from_fn(dim, |j, _| if i == j { 1.0 } else { 0.0 }))
        .collect();
    if dim == 1 {
        // On the line every unit direction is +-1; extra samples add nothing.
        return dirs;
    }

    // Generalized golden ratio: unique positive root of x^(dim+1) = x + 1.
    let mut phi = 1.5_f64;
    for _ in 0..64 {
        phi = (1.0 + phi).powf(1.0 / (dim as f64 + 1.0));
    }
    let alphas: Vec<f64> = (1..=dim).map(|k| (1.0 / phi.powi(k as i32)) % 1.0).collect();
    let offset = (splitmix64(seed) as f64) / (u64::MAX as f64);

    for s in 0..extra {
        let mut v = DVector::zeros(dim);
        for (k, &a) in alphas.iter().enumerate() {
            let u = (offset + a * (s as f64 + 1.0)).fract();
            let u = u.clamp(1e-12, 1.0 - 1e-12);
            v[k] = inverse_normal_cdf(u);
        }
        let norm = v.norm();
        if norm > 1e-12 {
            dirs.push(v / norm);
        }
    }
    dirs
}
