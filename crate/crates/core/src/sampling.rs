//! Seeded generators for randomized suites and for the CLI's random family
//! pairs. Coefficients are dyadic rationals (k/256), so the exact algebra
//! layer stays bit-exact on generated data, and magnitudes stay small
//! enough that spectra remain close to their free-problem locations.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::piecewise::PiecewisePoly;
use crate::regularization::{
    singularity_orders, CoefficientSet, FMatrix, FamilyParams, OrderSpec, QMatrix,
};

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dyadic value in [-scale, scale] with 8 fractional bits.
pub fn dyadic(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    rng.gen_range(-256i32..=256) as f64 / 256.0 * scale
}

fn dyadic_knots(rng: &mut ChaCha8Rng) -> Vec<f64> {
    match rng.gen_range(0..3u8) {
        0 => vec![0.0, 1.0],
        1 => vec![0.0, 0.5, 1.0],
        _ => vec![0.0, 0.25, 0.625, 1.0],
    }
}

/// Random piecewise polynomial with dyadic coefficients. `scale` should be
/// a power of two to preserve exactness.
pub fn random_poly(
    rng: &mut ChaCha8Rng,
    knots: &[f64],
    max_degree: usize,
    scale: f64,
    complex: bool,
) -> PiecewisePoly {
    let cells = (0..knots.len() - 1)
        .map(|_| {
            (0..=max_degree)
                .map(|_| {
                    let re = dyadic(rng, scale);
                    let im = if complex { dyadic(rng, scale) } else { 0.0 };
                    Complex64::new(re, im)
                })
                .collect()
        })
        .collect();
    PiecewisePoly::new(knots.to_vec(), cells).expect("generated mesh is valid")
}

/// Random coefficient set with small antiderivatives; the top entry is
/// zero when `tau_top_zero` is set.
pub fn random_coefficient_set(
    rng: &mut ChaCha8Rng,
    order: OrderSpec,
    tau_top_zero: bool,
) -> CoefficientSet {
    let n = order.n();
    let knots = dyadic_knots(rng);
    let sigma = (0..n)
        .map(|nu| {
            if tau_top_zero && nu == n - 1 {
                PiecewisePoly::zero()
            } else {
                random_poly(rng, &knots, 2, 0.25, false)
            }
        })
        .collect();
    CoefficientSet::new(order, sigma, tau_top_zero).expect("generated set is valid")
}

/// Random free data for one family member: dyadic functions and small
/// complex constants.
pub fn random_family_params(rng: &mut ChaCha8Rng, order: OrderSpec) -> FamilyParams {
    let orders = singularity_orders(order);
    let knots = dyadic_knots(rng);
    let mut params = FamilyParams::default();
    for (nu, &i_nu) in orders.iter().enumerate() {
        for i in 0..i_nu {
            params
                .tau
                .insert((nu, i), random_poly(rng, &knots, 2, 0.25, false));
            params.c.insert(
                (nu, i),
                Complex64::new(dyadic(rng, 0.25), dyadic(rng, 0.25)),
            );
        }
    }
    params
}

/// Random pattern-valid Q matrix (dyadic entries).
pub fn random_q_matrix(rng: &mut ChaCha8Rng, order: OrderSpec) -> QMatrix {
    let m = order.m();
    let knots = dyadic_knots(rng);
    let q = (0..=m)
        .map(|r| {
            (0..=m)
                .map(|j| {
                    if order.is_even() && r == m && j == m {
                        PiecewisePoly::zero()
                    } else {
                        random_poly(rng, &knots, 2, 1.0, false)
                    }
                })
                .collect()
        })
        .collect();
    QMatrix::new(order, q).expect("generated Q is pattern-valid")
}

/// Random pattern-valid F matrix (dyadic entries).
pub fn random_f_matrix(rng: &mut ChaCha8Rng, order: OrderSpec) -> FMatrix {
    let n = order.n();
    let knots = dyadic_knots(rng);
    let f = (0..n)
        .map(|k| {
            (0..n)
                .map(|j| {
                    if crate::regularization::forced_zero(order, k + 1, j + 1) {
                        PiecewisePoly::zero()
                    } else {
                        random_poly(rng, &knots, 2, 1.0, false)
                    }
                })
                .collect()
        })
        .collect();
    FMatrix::new(order, f).expect("generated F is pattern-valid")
}

/// Perturb the first antiderivative so the canonical signatures of the two
/// sets differ by about `target` in L2. The bump survives moment
/// normalization because it is rescaled after canonicalization.
pub fn perturbed_coefficient_set(
    rng: &mut ChaCha8Rng,
    base: &CoefficientSet,
    target: f64,
) -> CoefficientSet {
    let order = base.order();
    let bump = random_poly(rng, &[0.0, 0.375, 1.0], 2, 1.0, false);
    let i0 = singularity_orders(order)[0];
    let canonical_bump = bump.moment_normalize(i0);
    let size = canonical_bump.norm(crate::piecewise::NormKind::L2);
    let scaled = bump.scale(target / size.max(1e-300));
    let mut sigma = base.sigma().to_vec();
    sigma[0] = &sigma[0] + &scaled;
    CoefficientSet::new(order, sigma, base.tau_top_zero()).expect("perturbed set is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let o = OrderSpec::new(4).unwrap();
        let a = random_coefficient_set(&mut rng_from_seed(9), o, true);
        let b = random_coefficient_set(&mut rng_from_seed(9), o, true);
        for (x, y) in a.sigma().iter().zip(b.sigma()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn perturbation_hits_target_distance() {
        let o = OrderSpec::new(2).unwrap();
        let mut rng = rng_from_seed(17);
        let base = random_coefficient_set(&mut rng, o, true);
        let other = perturbed_coefficient_set(&mut rng, &base, 2e-2);
        let dist = base.signature_distance(&other).unwrap();
        assert!(dist >= 1e-2, "distance {dist}");
        assert!(dist <= 6e-2, "distance {dist}");
    }
}
