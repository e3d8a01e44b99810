//! Second-order showcase: Sturm-Liouville equation y'' - q y = lambda y
//! with q = sigma' + r carried through the associated matrix
//! [[sigma, 0], [-sigma^2, -sigma]] + [[0, 0], [r, 0]].
//!
//! Produces the classical discrete data: Dirichlet eigenvalues (zeros of
//! S(1, lambda)), quasi-Neumann eigenvalues (zeros of C(1, lambda)),
//! weight numbers alpha_n = integral of y_n^2 with y_n = S(., lambda_n),
//! and the Weyl function m(lambda) = -C(1, lambda) / S(1, lambda). These
//! are assembled directly from fundamental-matrix entries, independently
//! of the generic-order Weyl machinery, so the two paths cross-check each
//! other.

use num_complex::Complex64;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::gauss;
use crate::piecewise::{NormKind, PiecewisePoly};
use crate::regularization::{FMatrix, OrderSpec};
use crate::spectral::{find_zeros, integrate_fundamental, integrate_fundamental_path, Region};

/// Discrete spectral data of the second-order problem.
#[derive(Clone, Debug, Default)]
pub struct SL2Data {
    /// Dirichlet eigenvalues, largest (closest to zero) first.
    pub dirichlet: Vec<Complex64>,
    /// Quasi-Neumann eigenvalues, same ordering.
    pub quasi_neumann: Vec<Complex64>,
    /// Weight numbers alpha_n matching `dirichlet`.
    pub weights: Vec<Complex64>,
    /// Optional (lambda, m(lambda)) samples.
    pub weyl_samples: Vec<(Complex64, Complex64)>,
}

impl Serialize for SL2Data {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Sample {
            lambda: [f64; 2],
            m: [f64; 2],
        }
        let pairs = |v: &[Complex64]| -> Vec<[f64; 2]> { v.iter().map(|z| [z.re, z.im]).collect() };
        let samples: Vec<Sample> = self
            .weyl_samples
            .iter()
            .map(|&(l, m)| Sample {
                lambda: [l.re, l.im],
                m: [m.re, m.im],
            })
            .collect();
        let mut s = serializer.serialize_struct("SL2Data", 4)?;
        s.serialize_field("dirichlet", &pairs(&self.dirichlet))?;
        s.serialize_field("quasiNeumann", &pairs(&self.quasi_neumann))?;
        s.serialize_field("weights", &pairs(&self.weights))?;
        s.serialize_field("weylSamples", &samples)?;
        s.end()
    }
}

/// Associated matrix [[sigma, 0], [-sigma^2 + r, -sigma]] for
/// y'' - (sigma' + r) y.
pub fn sl2_matrix(sigma: &PiecewisePoly, r: &PiecewisePoly) -> FMatrix {
    let order = OrderSpec::new(2).unwrap();
    let minus_sq = (sigma * sigma).scale(-1.0);
    let f = vec![
        vec![sigma.clone(), PiecewisePoly::zero()],
        vec![&minus_sq + r, sigma.scale(-1.0)],
    ];
    FMatrix::new(order, f).expect("second-order pattern holds by construction")
}

fn coefficient_size(sigma: &PiecewisePoly, r: &PiecewisePoly) -> f64 {
    let s = sigma.norm(NormKind::LInf);
    s * s + s + r.norm(NormKind::LInf)
}

/// Zeros of one top-row entry of the fundamental matrix at x = 1, found in
/// an expanding strip and returned with the largest real part first.
fn entry_zeros(
    f: &FMatrix,
    col: usize,
    count: usize,
    size: f64,
    offset: f64,
    tol: f64,
) -> Result<Vec<Complex64>> {
    let coarse_tol = 1e-6f64.max(tol * 0.1).min(1e-6);
    let fine_tol = (tol * 0.1).clamp(1e-13, 1e-10);
    let coarse = |lambda: Complex64| {
        integrate_fundamental(f, lambda, coarse_tol).map(|fm| fm.c1[(0, col)])
    };
    let pad = 2.0 + 4.0 * size;
    let pad_im = (2.0 + 2.0 * size).max(1.0);
    let pi = std::f64::consts::PI;
    let mut left = ((count as f64 + offset + 0.1) * pi).powi(2) + 20.0 * (1.0 + size);
    let mut last_err = Error::WindingUnstable;
    for _ in 0..6 {
        let region = Region::new(-left, pad, -pad_im, pad_im)?;
        // Localization target sits well above the coarse integration
        // noise; the polish below owns the final accuracy.
        match find_zeros(&coarse, region, 1e-5) {
            Ok(zeros) if zeros.len() >= count => {
                let mut lams: Vec<Complex64> = zeros.iter().map(|z| z.z).collect();
                lams.sort_by(|a, b| b.re.total_cmp(&a.re));
                lams.truncate(count);
                // Polish each against the tight integration tolerance.
                let fine = |lambda: Complex64| {
                    integrate_fundamental(f, lambda, fine_tol).map(|fm| fm.c1[(0, col)])
                };
                for lam in lams.iter_mut() {
                    *lam = polish(&fine, *lam).unwrap_or(*lam);
                }
                return Ok(lams);
            }
            Ok(_) => {
                last_err = Error::InvalidInput(format!(
                    "fewer than {count} zeros found down to {left:.1}"
                ));
            }
            Err(e) => last_err = e,
        }
        left *= 1.7;
    }
    Err(last_err)
}

fn polish<F>(f: &F, z0: Complex64) -> Option<Complex64>
where
    F: Fn(Complex64) -> Result<Complex64>,
{
    let mut z = z0;
    let mut fz = f(z).ok()?;
    for _ in 0..30 {
        let h = 1e-6 * (1.0 + z.norm());
        let fp = (f(z + h).ok()? - f(z - h).ok()?) / (2.0 * h);
        if fp.norm() < 1e-300 {
            return None;
        }
        let step = -fz / fp;
        z += step;
        fz = f(z).ok()?;
        if step.norm() <= 1e-13 * (1.0 + z.norm()) {
            break;
        }
    }
    Some(z)
}

/// Dirichlet and quasi-Neumann spectra with weight numbers.
pub fn sl2_spectra(
    sigma: &PiecewisePoly,
    r: &PiecewisePoly,
    count: usize,
    tol: f64,
) -> Result<SL2Data> {
    if count == 0 {
        return Err(Error::InvalidInput("count must be >= 1".into()));
    }
    let f = sl2_matrix(sigma, r);
    let size = coefficient_size(sigma, r);
    let dirichlet = entry_zeros(&f, 1, count, size, 0.6, tol)?;
    let quasi_neumann = entry_zeros(&f, 0, count, size, 0.1, tol)?;

    // Weight numbers: alpha_n = integral of S(x, lambda_n)^2 dx by
    // composite Gauss quadrature on the solution path.
    let rule = gauss::panel_rule((count + 4).max(8), 16);
    let mut grid: Vec<f64> = rule.iter().map(|&(x, _)| x).collect();
    grid.sort_by(f64::total_cmp);
    let integ_tol = (tol * 0.01).clamp(1e-12, 1e-10);
    let mut weights = Vec::with_capacity(count);
    for &lam in &dirichlet {
        let path = integrate_fundamental_path(&f, lam, integ_tol, &grid)?;
        let mut alpha = Complex64::ZERO;
        for (p, &(_, w)) in path.iter().zip(&rule) {
            let y = p.c[(0, 1)] * p.log_scale.exp();
            alpha += w * y * y;
        }
        weights.push(alpha);
    }
    Ok(SL2Data {
        dirichlet,
        quasi_neumann,
        weights,
        weyl_samples: Vec::new(),
    })
}

/// Weyl function m(lambda) = -C(1, lambda) / S(1, lambda).
pub fn weyl_function(
    sigma: &PiecewisePoly,
    r: &PiecewisePoly,
    lambda: Complex64,
    tol: f64,
) -> Result<Complex64> {
    let f = sl2_matrix(sigma, r);
    weyl_function_of(&f, lambda, tol)
}

fn weyl_function_of(f: &FMatrix, lambda: Complex64, tol: f64) -> Result<Complex64> {
    let integ_tol = (tol * 0.01).clamp(1e-12, 1e-10);
    let fm = integrate_fundamental(f, lambda, integ_tol)?;
    let num = fm.c1[(0, 0)];
    let den = fm.c1[(0, 1)];
    let scale = fm.c1.max_abs().max(1e-300);
    if den.norm() < tol * scale {
        return Err(Error::NearEigenvalue {
            lambda,
            cond: scale / den.norm().max(1e-300),
        });
    }
    Ok(-num / den)
}

/// |alpha_n^{-1} - Res m| at the n-th Dirichlet eigenvalue (1-based),
/// with the residue taken by trapezoid contour integration of m.
pub fn residue_identity_check(
    sigma: &PiecewisePoly,
    r: &PiecewisePoly,
    n_index: usize,
    tol: f64,
) -> Result<f64> {
    if n_index == 0 {
        return Err(Error::InvalidInput("eigenvalue index is 1-based".into()));
    }
    let data = sl2_spectra(sigma, r, n_index + 1, tol)?;
    let lam = data.dirichlet[n_index - 1];
    let alpha = data.weights[n_index - 1];
    let gap = data
        .dirichlet
        .iter()
        .filter(|&&z| (z - lam).norm() > 1e-9)
        .map(|&z| (z - lam).norm())
        .fold(f64::INFINITY, f64::min);
    let radius = (0.5 * gap).min(1.0);
    let f = sl2_matrix(sigma, r);

    let nodes = 64;
    let mut residue = Complex64::ZERO;
    let mut second = Complex64::ZERO;
    for j in 0..nodes {
        let theta = std::f64::consts::TAU * j as f64 / nodes as f64;
        let w = radius * Complex64::new(theta.cos(), theta.sin());
        let m = weyl_function_of(&f, lam + w, 1e-12)?;
        residue += m * w / nodes as f64;
        second += m * w * w / nodes as f64;
    }
    let ratio = second.norm() * radius / residue.norm().max(1e-30);
    if ratio >= 1e-6 {
        return Err(Error::NonSimplePole { lambda: lam, ratio });
    }
    let inv_alpha = Complex64::ONE / alpha;
    Ok((inv_alpha - residue).norm())
}

/// Shift sigma by a constant: the Dirichlet data must not move at all, and
/// m(lambda) may change only by a lambda-independent constant. Returns
/// (max eigenvalue displacement, max deviation of the m-difference from
/// its mean over `lambdas`).
pub fn shift_experiment(
    sigma: &PiecewisePoly,
    r: &PiecewisePoly,
    c: Complex64,
    lambdas: &[Complex64],
    tol: f64,
) -> Result<(f64, f64)> {
    let shifted = sigma + &PiecewisePoly::constant(c);
    let count = 5;
    let base = sl2_spectra(sigma, r, count, tol)?;
    let moved = sl2_spectra(&shifted, r, count, tol)?;
    let dirichlet_residual = base
        .dirichlet
        .iter()
        .zip(&moved.dirichlet)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);

    let mut diffs = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        let m0 = weyl_function(sigma, r, lam, tol)?;
        let m1 = weyl_function(&shifted, r, lam, tol)?;
        diffs.push(m0 - m1);
    }
    let mean = diffs.iter().sum::<Complex64>() / diffs.len().max(1) as f64;
    let constancy = diffs
        .iter()
        .map(|d| (d - mean).norm())
        .fold(0.0, f64::max);
    Ok((dirichlet_residual, constancy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{find_eigenvalues, weight_matrix, weyl_matrix};
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn zero() -> PiecewisePoly {
        PiecewisePoly::zero()
    }

    #[test]
    fn matrix_forms() {
        let sigma = PiecewisePoly::poly(&[0.5, 1.0]);
        let r = PiecewisePoly::poly(&[2.0]);
        let f = sl2_matrix(&sigma, &zero());
        assert_eq!(f.entry(0, 0), &sigma.refine(f.knots()));
        assert!(f.entry(0, 1).is_zero());
        let expect = (&sigma * &sigma).scale(-1.0);
        assert!(f.entry(1, 0).l2_distance(&expect) < 1e-15);

        let f = sl2_matrix(&zero(), &r);
        assert!(f.entry(0, 0).is_zero());
        assert_eq!(f.entry(1, 0), &r.refine(f.knots()));

        let f = sl2_matrix(&zero(), &zero());
        assert!(f.entries().iter().flatten().all(|e| e.is_zero()));
    }

    #[test]
    fn free_spectra_closed_forms() {
        let data = sl2_spectra(&zero(), &zero(), 6, 1e-10).unwrap();
        for (i, (lam, mu)) in data.dirichlet.iter().zip(&data.quasi_neumann).enumerate() {
            let n = (i + 1) as f64;
            let lam_exact = -(n * PI) * (n * PI);
            let mu_exact = -((n - 0.5) * PI) * ((n - 0.5) * PI);
            assert!(
                (lam - c(lam_exact, 0.0)).norm() < 1e-8 * lam_exact.abs(),
                "lambda_{}: {} vs {}",
                i + 1,
                lam,
                lam_exact
            );
            assert!(
                (mu - c(mu_exact, 0.0)).norm() < 1e-8 * mu_exact.abs(),
                "mu_{}: {} vs {}",
                i + 1,
                mu,
                mu_exact
            );
            let alpha_exact = 1.0 / (2.0 * n * n * PI * PI);
            assert!(
                (data.weights[i] - c(alpha_exact, 0.0)).norm() < 1e-6 * alpha_exact,
                "alpha_{}",
                i + 1
            );
        }
    }

    #[test]
    fn constant_potential_shift() {
        let data = sl2_spectra(&zero(), &PiecewisePoly::constant(1.0), 3, 1e-10).unwrap();
        for (i, lam) in data.dirichlet.iter().enumerate() {
            let n = (i + 1) as f64;
            let exact = -(n * PI) * (n * PI) - 1.0;
            assert!((lam - c(exact, 0.0)).norm() < 1e-8 * exact.abs());
        }
    }

    /// Transfer-matrix oracle for a delta interaction of weight `alpha` at
    /// x = 1/2: on each half y'' = lambda y, y continuous, y' jumps by
    /// alpha y(1/2). Returns the first `count` Dirichlet eigenvalues.
    fn delta_oracle(alpha: f64, count: usize) -> Vec<f64> {
        let g = |rho: f64| {
            let (s, co) = ((rho * 0.5).sin() / rho, (rho * 0.5).cos());
            let d_plus = co + alpha * s;
            s * co + d_plus * s
        };
        let mut roots = Vec::new();
        let mut rho = 1e-3;
        let step = 1e-3;
        let mut g0 = g(rho);
        while roots.len() < count && rho < 60.0 {
            let rho1 = rho + step;
            let g1 = g(rho1);
            if g0.signum() != g1.signum() {
                let (mut lo, mut hi) = (rho, rho1);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if g(lo).signum() == g(mid).signum() {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                roots.push(-(0.5 * (lo + hi)).powi(2));
            }
            rho = rho1;
            g0 = g1;
        }
        roots
    }

    #[test]
    fn delta_interaction_matches_transfer_matrix_oracle() {
        let alpha = 1.0;
        let sigma = PiecewisePoly::step(0.5, alpha).unwrap();
        let data = sl2_spectra(&sigma, &zero(), 3, 1e-10).unwrap();
        let oracle = delta_oracle(alpha, 3);
        for (got, want) in data.dirichlet.iter().zip(&oracle) {
            assert!(
                (got - c(*want, 0.0)).norm() < 1e-7 * want.abs(),
                "{got} vs {want}"
            );
        }
    }

    #[test]
    fn weyl_function_closed_forms() {
        // m(lambda) = -rho cot(rho) at lambda = -rho^2.
        let rho = 1.1f64;
        let m = weyl_function(&zero(), &zero(), c(-rho * rho, 0.0), 1e-9).unwrap();
        let exact = -rho * rho.cos() / rho.sin();
        assert!((m - c(exact, 0.0)).norm() < 1e-9);
        let m = weyl_function(&zero(), &zero(), c(-(PI / 2.0) * (PI / 2.0), 0.0), 1e-9).unwrap();
        assert!(m.norm() < 1e-9);
    }

    #[test]
    fn weyl_function_matches_generic_path() {
        let mut rng = crate::sampling::rng_from_seed(41);
        let sigma = crate::sampling::random_poly(&mut rng, &[0.0, 0.5, 1.0], 2, 0.25, false);
        let r = crate::sampling::random_poly(&mut rng, &[0.0, 1.0], 1, 0.25, false);
        let f = sl2_matrix(&sigma, &r);
        for lam in [c(1.0, 2.0), c(-3.0, 1.0), c(-20.0, 0.7)] {
            let direct = weyl_function(&sigma, &r, lam, 1e-10).unwrap();
            let generic = weyl_matrix(&f, lam, 1e-10).unwrap().m[(1, 0)];
            assert!((direct - generic).norm() < 1e-8, "{direct} vs {generic}");
        }
    }

    #[test]
    fn near_eigenvalue_rejected() {
        let err = weyl_function(&zero(), &zero(), c(-PI * PI, 0.0), 1e-9);
        assert!(matches!(err, Err(Error::NearEigenvalue { .. })));
    }

    #[test]
    fn residue_identity_free_and_random() {
        // Free problem: residue = 2 n^2 pi^2 exactly.
        let gap = residue_identity_check(&zero(), &zero(), 1, 1e-10).unwrap();
        assert!(gap < 1e-8 * 2.0 * PI * PI, "gap {gap:.3e}");
        // Constant potential.
        let gap = residue_identity_check(&zero(), &PiecewisePoly::constant(2.5), 2, 1e-10).unwrap();
        assert!(gap < 1e-6 * 8.0 * PI * PI, "gap {gap:.3e}");
        // Random piecewise-linear sigma.
        let mut rng = crate::sampling::rng_from_seed(53);
        let sigma = crate::sampling::random_poly(&mut rng, &[0.0, 0.5, 1.0], 1, 0.25, false);
        let gap = residue_identity_check(&sigma, &zero(), 1, 1e-10).unwrap();
        assert!(gap < 1e-5 * 2.0 * PI * PI, "gap {gap:.3e}");
    }

    #[test]
    fn shift_experiment_examples() {
        let lams = [c(0.5, 1.0), c(-2.0, 0.5), c(-11.0, 1.5), c(3.0, -1.0)];
        let (d0, w0) = shift_experiment(&zero(), &zero(), c(0.0, 0.0), &lams, 1e-10).unwrap();
        assert_eq!(d0, 0.0);
        assert_eq!(w0, 0.0);

        let (d1, w1) = shift_experiment(&zero(), &zero(), c(1.0, 0.0), &lams, 1e-10).unwrap();
        assert!(d1 < 1e-7, "dirichlet moved by {d1:.3e}");
        assert!(w1 < 1e-7, "m-shift non-constant by {w1:.3e}");

        let mut rng = crate::sampling::rng_from_seed(61);
        let sigma = crate::sampling::random_poly(&mut rng, &[0.0, 0.25, 1.0], 2, 0.25, false);
        let (d2, w2) = shift_experiment(&sigma, &zero(), c(0.0, 2.0), &lams, 1e-10).unwrap();
        assert!(d2 < 1e-6, "dirichlet moved by {d2:.3e}");
        assert!(w2 < 1e-6, "m-shift non-constant by {w2:.3e}");
    }

    #[test]
    fn real_spectra_interlace() {
        let mut rng = crate::sampling::rng_from_seed(67);
        let sigma = crate::sampling::random_poly(&mut rng, &[0.0, 0.5, 1.0], 2, 0.25, false);
        let data = sl2_spectra(&sigma, &zero(), 5, 1e-9).unwrap();
        for lam in data.dirichlet.iter().chain(&data.quasi_neumann) {
            assert!(lam.im.abs() < 1e-7, "real problem, complex eigenvalue {lam}");
        }
        // mu_n interlace: lambda_n < mu_n < lambda_{n+1} in decreasing
        // order from zero: mu_1 > lambda_1 > mu_2 > lambda_2 > ...
        for i in 0..5 {
            assert!(data.quasi_neumann[i].re > data.dirichlet[i].re);
            if i + 1 < 5 {
                assert!(data.dirichlet[i].re > data.quasi_neumann[i + 1].re);
            }
        }
    }

    #[test]
    fn agrees_with_generic_order_machinery() {
        let mut rng = crate::sampling::rng_from_seed(71);
        let sigma = crate::sampling::random_poly(&mut rng, &[0.0, 0.5, 1.0], 1, 0.25, false);
        let f = sl2_matrix(&sigma, &zero());
        let data = sl2_spectra(&sigma, &zero(), 3, 1e-10).unwrap();
        let region = Region::new(
            data.dirichlet[2].re - 5.0,
            data.dirichlet[0].re + 5.0,
            -2.0,
            2.0,
        )
        .unwrap();
        let recs = find_eigenvalues(&f, 1, region, 1e-10).unwrap();
        assert_eq!(recs.len(), 3);
        for (rec, lam) in recs.iter().zip(data.dirichlet.iter().rev()) {
            assert!((rec.lambda0 - lam).norm() < 1e-9, "{} vs {}", rec.lambda0, lam);
        }
        // Weight numbers against the generic weight matrix: N_{2,1} = 1/alpha_n.
        let lam1 = data.dirichlet[0];
        let others: Vec<Complex64> = data.dirichlet.clone();
        let radius = crate::spectral::default_radius(lam1, &others);
        let (w, _) = weight_matrix(&f, lam1, radius, 64, 1e-6).unwrap();
        let inv_alpha = Complex64::ONE / data.weights[0];
        assert!(
            (w[(1, 0)] - inv_alpha).norm() < 1e-6 * inv_alpha.norm(),
            "{} vs {}",
            w[(1, 0)],
            inv_alpha
        );
    }

    #[test]
    fn counting_function_sanity() {
        let data = sl2_spectra(&zero(), &PiecewisePoly::constant(0.5), 8, 1e-9).unwrap();
        let r = 500.0f64;
        let counted = data
            .dirichlet
            .iter()
            .filter(|l| l.re >= -r && l.re <= 0.0)
            .count() as i64;
        let expected = (r.sqrt() / PI).floor() as i64;
        assert!((counted - expected).abs() <= 1, "{counted} vs {expected}");
    }
}
