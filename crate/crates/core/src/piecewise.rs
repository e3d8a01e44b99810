//! Exact calculus for piecewise-polynomial functions on [0, 1].
//!
//! Every integrable coefficient in this crate is carried as a
//! [`PiecewisePoly`]: a knot mesh of [0, 1] with one polynomial per cell,
//! stored in the global monomial basis. With that basis, refining a mesh
//! copies coefficient vectors verbatim, so sums and products on merged
//! meshes are exact up to floating-point rounding of the coefficient
//! arithmetic itself (and bit-exact on dyadic data). Antiderivatives and
//! moment conditions are evaluated in closed form; quadrature only appears
//! where an absolute value makes the integrand non-polynomial.
//!
//! Coefficients are complex; real data round-trips through the JSON form
//! as plain numbers.

use num_complex::Complex64;
use serde::de::Error as _;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::gauss;
use crate::ratmat::{self, Rat};

/// Piecewise polynomial on a knot mesh of [0, 1].
///
/// Invariants: knots strictly increasing with first 0 and last 1, one
/// nonempty coefficient vector per cell, trailing exact-zero coefficients
/// trimmed.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewisePoly {
    knots: Vec<f64>,
    cells: Vec<Vec<Complex64>>,
}

/// Which norm [`PiecewisePoly::norm`] computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    L1,
    L2,
    LInf,
}

impl PiecewisePoly {
    pub fn new(knots: Vec<f64>, cells: Vec<Vec<Complex64>>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidMesh("need at least two knots".into()));
        }
        if knots[0] != 0.0 || *knots.last().unwrap() != 1.0 {
            return Err(Error::InvalidMesh(format!(
                "knots must span [0, 1], got [{}, {}]",
                knots[0],
                knots.last().unwrap()
            )));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidMesh("knots must be strictly increasing".into()));
        }
        if cells.len() != knots.len() - 1 {
            return Err(Error::InvalidMesh(format!(
                "{} cells for {} knots",
                cells.len(),
                knots.len()
            )));
        }
        if cells.iter().any(|c| c.is_empty()) {
            return Err(Error::InvalidMesh("empty coefficient cell".into()));
        }
        if cells
            .iter()
            .flatten()
            .any(|c| !c.re.is_finite() || !c.im.is_finite())
        {
            return Err(Error::InvalidMesh("non-finite coefficient".into()));
        }
        let mut pp = PiecewisePoly { knots, cells };
        pp.trim();
        Ok(pp)
    }

    pub fn from_real(knots: Vec<f64>, cells: Vec<Vec<f64>>) -> Result<Self> {
        let cells = cells
            .into_iter()
            .map(|c| c.into_iter().map(|v| Complex64::new(v, 0.0)).collect())
            .collect();
        Self::new(knots, cells)
    }

    /// Single-cell polynomial on [0, 1] with the given monomial coefficients.
    pub fn poly(coeffs: &[f64]) -> Self {
        let c = if coeffs.is_empty() { &[0.0][..] } else { coeffs };
        Self::from_real(vec![0.0, 1.0], vec![c.to_vec()]).unwrap()
    }

    pub fn poly_complex(coeffs: &[Complex64]) -> Self {
        let c = if coeffs.is_empty() {
            vec![Complex64::ZERO]
        } else {
            coeffs.to_vec()
        };
        Self::new(vec![0.0, 1.0], vec![c]).unwrap()
    }

    pub fn constant(c: impl Into<Complex64>) -> Self {
        Self::poly_complex(&[c.into()])
    }

    pub fn zero() -> Self {
        Self::poly(&[0.0])
    }

    /// The identity function x.
    pub fn x() -> Self {
        Self::poly(&[0.0, 1.0])
    }

    /// Step of the given height on [at, 1], zero before.
    pub fn step(at: f64, height: impl Into<Complex64>) -> Result<Self> {
        if !(0.0 < at && at < 1.0) {
            return Err(Error::InvalidMesh(format!("step knot {at} outside (0, 1)")));
        }
        Self::new(
            vec![0.0, at, 1.0],
            vec![vec![Complex64::ZERO], vec![height.into()]],
        )
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn cells(&self) -> &[Vec<Complex64>] {
        &self.cells
    }

    pub fn degree(&self) -> usize {
        self.cells.iter().map(|c| c.len() - 1).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.cells.iter().all(|c| c.iter().all(|v| *v == Complex64::ZERO))
    }

    pub fn is_zero_within(&self, tol: f64) -> bool {
        self.max_abs_coeff() <= tol
    }

    pub fn is_real(&self) -> bool {
        self.cells.iter().all(|c| c.iter().all(|v| v.im == 0.0))
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.cells
            .iter()
            .flatten()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    fn trim(&mut self) {
        for cell in &mut self.cells {
            while cell.len() > 1 && *cell.last().unwrap() == Complex64::ZERO {
                cell.pop();
            }
        }
    }

    fn cell_index(&self, x: f64) -> usize {
        debug_assert!((0.0..=1.0).contains(&x), "evaluation point {x} outside [0, 1]");
        let idx = self.knots.partition_point(|&k| k <= x);
        idx.saturating_sub(1).min(self.cells.len() - 1)
    }

    pub fn eval(&self, x: f64) -> Complex64 {
        horner(&self.cells[self.cell_index(x)], x)
    }

    /// Copy onto a finer mesh. `knots` must contain every knot of `self`.
    pub fn refine(&self, knots: &[f64]) -> Self {
        if knots == self.knots.as_slice() {
            return self.clone();
        }
        let cells = knots
            .windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                self.cells[self.cell_index(mid)].clone()
            })
            .collect();
        PiecewisePoly {
            knots: knots.to_vec(),
            cells,
        }
    }

    pub fn scale(&self, s: impl Into<Complex64>) -> Self {
        let s = s.into();
        let mut out = self.clone();
        for cell in &mut out.cells {
            for v in cell.iter_mut() {
                *v *= s;
            }
        }
        out.trim();
        out
    }

    pub fn conj(&self) -> Self {
        let mut out = self.clone();
        for cell in &mut out.cells {
            for v in cell.iter_mut() {
                *v = v.conj();
            }
        }
        out
    }

    /// Exact integral over [0, 1].
    pub fn integral(&self) -> Complex64 {
        self.moment(0)
    }

    /// Exact k-th moment: integral of x^k times self over [0, 1].
    pub fn moment(&self, k: usize) -> Complex64 {
        let mut total = Complex64::ZERO;
        for (i, cell) in self.cells.iter().enumerate() {
            let (a, b) = (self.knots[i], self.knots[i + 1]);
            for (j, &c) in cell.iter().enumerate() {
                let p = (k + j + 1) as i32;
                total += c * (b.powi(p) - a.powi(p)) / p as f64;
            }
        }
        total
    }

    /// Raw order-fold antiderivative, continuous across knots and vanishing
    /// at x = 0. Apply [`PiecewisePoly::moment_normalize`] for the canonical
    /// moment-free choice.
    pub fn antiderivative(&self, order: usize) -> Self {
        assert!(order >= 1, "antiderivative order must be >= 1");
        let mut out = self.clone();
        for _ in 0..order {
            out = out.antiderivative_once();
        }
        out
    }

    fn antiderivative_once(&self) -> Self {
        let mut cells = Vec::with_capacity(self.cells.len());
        let mut carry = Complex64::ZERO;
        for (i, cell) in self.cells.iter().enumerate() {
            let (a, b) = (self.knots[i], self.knots[i + 1]);
            let mut anti = vec![Complex64::ZERO; cell.len() + 1];
            for (j, &c) in cell.iter().enumerate() {
                anti[j + 1] = c / (j + 1) as f64;
            }
            let at_a = horner(&anti, a);
            anti[0] = carry - at_a;
            carry = horner(&anti, b);
            cells.push(anti);
        }
        let mut out = PiecewisePoly {
            knots: self.knots.clone(),
            cells,
        };
        out.trim();
        out
    }

    /// Add the unique polynomial of degree < i that makes the moments
    /// of order 0 .. i-1 vanish. The i x i moment system is inverted in
    /// exact rational arithmetic (its inverse has integer entries).
    pub fn moment_normalize(&self, i: usize) -> Self {
        if i == 0 {
            return self.clone();
        }
        let gram: Vec<Vec<Rat>> = (0..i)
            .map(|r| (0..i).map(|c| ratmat::rat(1, (r + c + 1) as i128)).collect())
            .collect();
        let inv = ratmat::inverse(&gram).expect("moment Gram matrix is invertible");
        let moments: Vec<Complex64> = (0..i).map(|k| self.moment(k)).collect();
        let correction: Vec<Complex64> = (0..i)
            .map(|j| {
                -(0..i)
                    .map(|k| ratmat::to_f64(&inv[j][k]) * moments[k])
                    .sum::<Complex64>()
            })
            .collect();
        self + &PiecewisePoly::poly_complex(&correction)
    }

    /// Classical derivative inside each cell. Refuses input with a jump at
    /// an interior knot: differentiating it would silently drop a delta.
    pub fn derivative_cellwise(&self) -> Result<Self> {
        let tol = 1e-12 * (1.0 + self.max_abs_coeff());
        for i in 1..self.cells.len() {
            let x = self.knots[i];
            let left = horner(&self.cells[i - 1], x);
            let right = horner(&self.cells[i], x);
            let jump = (left - right).norm();
            if jump > tol {
                return Err(Error::DiscontinuousAtKnot { x, jump });
            }
        }
        let cells = self
            .cells
            .iter()
            .map(|cell| {
                if cell.len() == 1 {
                    vec![Complex64::ZERO]
                } else {
                    cell.iter()
                        .enumerate()
                        .skip(1)
                        .map(|(j, &c)| c * j as f64)
                        .collect()
                }
            })
            .collect();
        let mut out = PiecewisePoly {
            knots: self.knots.clone(),
            cells,
        };
        out.trim();
        Ok(out)
    }

    pub fn norm(&self, kind: NormKind) -> f64 {
        match kind {
            NormKind::L2 => {
                let sq = self * &self.conj();
                sq.integral().re.max(0.0).sqrt()
            }
            NormKind::L1 => self.l1_norm(),
            NormKind::LInf => self.linf_norm(),
        }
    }

    fn l1_norm(&self) -> f64 {
        if self.is_real() {
            // Exact: split each cell at sign changes, integrate piecewise.
            let mut total = 0.0;
            for (i, cell) in self.cells.iter().enumerate() {
                let (a, b) = (self.knots[i], self.knots[i + 1]);
                let mut cuts = vec![a];
                cuts.extend(real_sign_changes(cell, a, b));
                cuts.push(b);
                for w in cuts.windows(2) {
                    total += integral_on(cell, w[0], w[1]).re.abs();
                }
            }
            total
        } else {
            let rule = gauss::panel_rule(4 * self.cells.len().max(4), 16);
            rule.iter().map(|&(x, w)| w * self.eval(x).norm()).sum()
        }
    }

    fn linf_norm(&self) -> f64 {
        let mut best: f64 = 0.0;
        for (i, cell) in self.cells.iter().enumerate() {
            let (a, b) = (self.knots[i], self.knots[i + 1]);
            for k in 0..=256 {
                let x = a + (b - a) * k as f64 / 256.0;
                best = best.max(horner(cell, x).norm());
            }
        }
        best
    }

    pub fn l2_distance(&self, other: &Self) -> f64 {
        (self - other).norm(NormKind::L2)
    }
}

fn horner(coeffs: &[Complex64], x: f64) -> Complex64 {
    let mut acc = Complex64::ZERO;
    for &c in coeffs.iter().rev() {
        acc = acc * x + c;
    }
    acc
}

fn integral_on(coeffs: &[Complex64], a: f64, b: f64) -> Complex64 {
    let mut total = Complex64::ZERO;
    for (j, &c) in coeffs.iter().enumerate() {
        let p = (j + 1) as i32;
        total += c * (b.powi(p) - a.powi(p)) / p as f64;
    }
    total
}

/// Real zeros of a real cell polynomial in (a, b), located by sampling and
/// bisection. Good to ~1e-14; used only to split |f| integrals.
fn real_sign_changes(coeffs: &[Complex64], a: f64, b: f64) -> Vec<f64> {
    let f = |x: f64| horner(coeffs, x).re;
    let samples = 16 * coeffs.len().max(2);
    let mut cuts = Vec::new();
    let mut x0 = a;
    let mut f0 = f(x0);
    for k in 1..=samples {
        let x1 = a + (b - a) * k as f64 / samples as f64;
        let f1 = f(x1);
        if f1 == 0.0 {
            if k < samples {
                cuts.push(x1);
            }
            x0 = x1;
            f0 = f1;
            continue;
        }
        if f0 != 0.0 && f0.signum() != f1.signum() {
            let (mut lo, mut hi) = (x0, x1);
            let mut flo = f0;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let fm = f(mid);
                if fm == 0.0 {
                    lo = mid;
                    break;
                }
                if flo.signum() == fm.signum() {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                }
            }
            cuts.push(0.5 * (lo + hi));
        }
        x0 = x1;
        f0 = f1;
    }
    cuts
}

/// Sorted union of two knot meshes (exact float comparison).
pub fn merge_knots(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => {
                if x < y {
                    i += 1;
                    x
                } else if y < x {
                    j += 1;
                    y
                } else {
                    i += 1;
                    j += 1;
                    x
                }
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (None, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => unreachable!(),
        };
        out.push(next);
    }
    out
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $op:tt) => {
        impl std::ops::$trait for &PiecewisePoly {
            type Output = PiecewisePoly;
            fn $method(self, rhs: &PiecewisePoly) -> PiecewisePoly {
                let knots = merge_knots(&self.knots, &rhs.knots);
                let a = self.refine(&knots);
                let b = rhs.refine(&knots);
                let cells = a
                    .cells
                    .iter()
                    .zip(&b.cells)
                    .map(|(ca, cb)| {
                        let len = ca.len().max(cb.len());
                        (0..len)
                            .map(|k| {
                                let x = ca.get(k).copied().unwrap_or(Complex64::ZERO);
                                let y = cb.get(k).copied().unwrap_or(Complex64::ZERO);
                                x $op y
                            })
                            .collect()
                    })
                    .collect();
                let mut out = PiecewisePoly { knots, cells };
                out.trim();
                out
            }
        }
    };
}

binary_op!(Add, add, +);
binary_op!(Sub, sub, -);

impl std::ops::Mul for &PiecewisePoly {
    type Output = PiecewisePoly;
    fn mul(self, rhs: &PiecewisePoly) -> PiecewisePoly {
        let knots = merge_knots(&self.knots, &rhs.knots);
        let a = self.refine(&knots);
        let b = rhs.refine(&knots);
        let cells = a
            .cells
            .iter()
            .zip(&b.cells)
            .map(|(ca, cb)| {
                let mut out = vec![Complex64::ZERO; ca.len() + cb.len() - 1];
                for (i, &x) in ca.iter().enumerate() {
                    for (j, &y) in cb.iter().enumerate() {
                        out[i + j] += x * y;
                    }
                }
                out
            })
            .collect();
        let mut out = PiecewisePoly { knots, cells };
        out.trim();
        out
    }
}

impl std::ops::Neg for &PiecewisePoly {
    type Output = PiecewisePoly;
    fn neg(self) -> PiecewisePoly {
        self.scale(Complex64::new(-1.0, 0.0))
    }
}

// JSON form: { "knots": [...], "cells": [[c, ...], ...] } where each
// coefficient is a plain number (real) or an [re, im] pair.
impl Serialize for PiecewisePoly {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        #[serde(untagged)]
        enum Coef {
            Real(f64),
            Pair([f64; 2]),
        }
        let cells: Vec<Vec<Coef>> = self
            .cells
            .iter()
            .map(|cell| {
                cell.iter()
                    .map(|c| {
                        if c.im == 0.0 {
                            Coef::Real(c.re)
                        } else {
                            Coef::Pair([c.re, c.im])
                        }
                    })
                    .collect()
            })
            .collect();
        let mut s = serializer.serialize_struct("PiecewisePoly", 2)?;
        s.serialize_field("knots", &self.knots)?;
        s.serialize_field("cells", &cells)?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for PiecewisePoly {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Coef {
            Real(f64),
            Pair([f64; 2]),
        }
        #[derive(Deserialize)]
        struct Raw {
            knots: Vec<f64>,
            cells: Vec<Vec<Coef>>,
        }
        let raw = Raw::deserialize(deserializer)?;
        let cells = raw
            .cells
            .into_iter()
            .map(|cell| {
                cell.into_iter()
                    .map(|c| match c {
                        Coef::Real(re) => Complex64::new(re, 0.0),
                        Coef::Pair([re, im]) => Complex64::new(re, im),
                    })
                    .collect()
            })
            .collect();
        PiecewisePoly::new(raw.knots, cells).map_err(D::Error::custom)
    }
}
