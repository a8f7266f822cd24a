//! Low-discrepancy and stratified designs on boxes.

use rand::Rng;

use crate::domain::Bounds;

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical inverse of `index` in `base`.
fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut scale = inv;
    let mut out = 0.0;
    while index > 0 {
        out += (index % base) as f64 * scale;
        index /= base;
        scale *= inv;
    }
    out
}

/// First `n` points of the Halton sequence in `[0,1)^d`, skipping the origin.
pub fn halton(n: usize, d: usize) -> Vec<Vec<f64>> {
    assert!(d <= PRIMES.len(), "halton sequence supports at most {} dimensions", PRIMES.len());
    (1..=n as u64)
        .map(|i| PRIMES[..d].iter().map(|&b| radical_inverse(i, b)).collect())
        .collect()
}

/// Halton points mapped into `bounds`.
pub fn halton_in(bounds: &Bounds, n: usize) -> Vec<Vec<f64>> {
    halton(n, bounds.dim())
        .into_iter()
        .map(|u| bounds.from_unit(&u))
        .collect()
}

/// Halton points with a random Cranley–Patterson rotation, mapped into `bounds`.
pub fn shifted_halton_in<R: Rng + ?Sized>(bounds: &Bounds, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let d = bounds.dim();
    let shift: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
    halton(n, d)
        .into_iter()
        .map(|u| {
            let rotated: Vec<f64> = u.iter().zip(&shift).map(|(a, s)| (a + s).fract()).collect();
            bounds.from_unit(&rotated)
        })
        .collect()
}

/// Latin hypercube design of `n` points in `[0,1]^d`: every axis is cut into
/// `n` equal strata and each stratum holds exactly one point.
pub fn latin_hypercube<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut strata: Vec<usize> = (0..n).collect();
        // Fisher–Yates
        for i in (1..n).rev() {
            let k = rng.random_range(0..=i);
            strata.swap(i, k);
        }
        for (i, p) in points.iter_mut().enumerate() {
            p[j] = (strata[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn halton_base_two_and_three() {
        let pts = halton(4, 2);
        let expect = [[0.5, 1.0 / 3.0], [0.25, 2.0 / 3.0], [0.75, 1.0 / 9.0], [0.125, 4.0 / 9.0]];
        for (p, e) in pts.iter().zip(expect.iter()) {
            assert!((p[0] - e[0]).abs() < 1e-15 && (p[1] - e[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn lhs_three_points_one_per_third() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut xs: Vec<f64> = latin_hypercube(3, 1, &mut rng).into_iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        for (i, x) in xs.iter().enumerate() {
            assert!(*x >= i as f64 / 3.0 && *x < (i + 1) as f64 / 3.0);
        }
    }

    #[test]
    fn lhs_projection_property_in_eight_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = latin_hypercube(10, 8, &mut rng);
        for j in 0..8 {
            let mut seen = [false; 10];
            for p in &pts {
                let s = (p[j] * 10.0).floor() as usize;
                assert!(!seen[s]);
                seen[s] = true;
            }
        }
    }

    #[test]
    fn lhs_is_deterministic_per_seed() {
        let a = latin_hypercube(5, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = latin_hypercube(5, 3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
