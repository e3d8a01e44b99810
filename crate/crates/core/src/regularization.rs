//! The associated-matrix algebra: singularity orders, the integer basis
//! matrices supported on single anti-diagonals, assembly of the bilinear
//! form matrix Q, the bijection between the Q and F matrix classes (even
//! and odd order), decomposition of Q over the basis, reconstruction of a
//! canonical coefficient signature, and the constructive family of all
//! associated matrices for a fixed coefficient set.
//!
//! Notation: an expression of order n = 2m + s carries coefficients
//! tau_nu = (-1)^{i_nu} sigma_nu^{(i_nu)} with integrable antiderivatives
//! sigma_nu and singularity orders i_{2k+j} = m - k - j. Everything below
//! works at the antiderivative level, so no distributional derivative is
//! ever evaluated.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use num_complex::Complex64;
use serde::de::Error as _;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::piecewise::{merge_knots, PiecewisePoly};
use crate::ratmat::{self, Rat};

/// Order n = 2m + s of a differential expression, n >= 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OrderSpec {
    n: usize,
}

impl OrderSpec {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput(format!("order n = {n} must be >= 2")));
        }
        Ok(OrderSpec { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.n / 2
    }

    /// Parity bit: 0 for even n, 1 for odd.
    pub fn s(&self) -> usize {
        self.n % 2
    }

    pub fn is_even(&self) -> bool {
        self.n % 2 == 0
    }
}

/// (-1)^p as a real scalar.
fn sign_pow(p: usize) -> f64 {
    if p % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn binom(n: usize, k: usize) -> i64 {
    if k > n {
        return 0;
    }
    let mut acc: i64 = 1;
    for j in 0..k.min(n - k) {
        acc = acc * (n - j) as i64 / (j + 1) as i64;
    }
    acc
}

/// Singularity orders (i_nu) for nu = 0 .. n-1: i_{2k+j} = m - k - j.
pub fn singularity_orders(order: OrderSpec) -> Vec<usize> {
    let m = order.m();
    (0..order.n())
        .map(|nu| {
            let (k, j) = (nu / 2, nu % 2);
            m - k - j
        })
        .collect()
}

/// Integer basis matrix supported on the anti-diagonal r + j = nu + i.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChiMatrix {
    pub nu: usize,
    pub i: usize,
    entries: Vec<Vec<i64>>,
}

impl ChiMatrix {
    pub fn entries(&self) -> &[Vec<i64>] {
        &self.entries
    }

    pub fn entry(&self, r: usize, j: usize) -> i64 {
        self.entries[r][j]
    }
}

/// Basis matrix chi_{nu, i} of size (m+1) x (m+1).
///
/// For nu = 2k the nonzero entries are binomials C(i, s) at (s+k, i-s+k);
/// for nu = 2k+1 they are C(i+1, s) - 2 C(i, s-1) at (s+k, i+1-s+k), with
/// C(i, -1) taken as 0.
pub fn chi(order: OrderSpec, nu: usize, i: usize) -> Result<ChiMatrix> {
    let n = order.n();
    let m = order.m();
    if nu >= n {
        return Err(Error::IndexOutOfRange(format!("nu = {nu} for order n = {n}")));
    }
    let i_nu = singularity_orders(order)[nu];
    if i > i_nu {
        return Err(Error::IndexOutOfRange(format!(
            "i = {i} exceeds singularity order i_{nu} = {i_nu}"
        )));
    }
    let mut entries = vec![vec![0i64; m + 1]; m + 1];
    let k = nu / 2;
    if nu % 2 == 0 {
        for s in 0..=i {
            entries[s + k][i - s + k] = binom(i, s);
        }
    } else {
        for s in 0..=i + 1 {
            let two_c = if s == 0 { 0 } else { 2 * binom(i, s - 1) };
            entries[s + k][i + 1 - s + k] = binom(i + 1, s) - two_c;
        }
    }
    Ok(ChiMatrix { nu, i, entries })
}

/// Number of basis matrices for the given order: sum over nu of (i_nu + 1).
pub fn chi_count(order: OrderSpec) -> usize {
    singularity_orders(order).iter().map(|i| i + 1).sum()
}

/// Exact rank of the vectorized basis set over the rationals.
pub fn chi_rank(order: OrderSpec) -> usize {
    let m = order.m();
    let orders = singularity_orders(order);
    let mut rows = Vec::new();
    for (nu, &i_nu) in orders.iter().enumerate() {
        for i in 0..=i_nu {
            let ch = chi(order, nu, i).unwrap();
            let row: Vec<Rat> = ch
                .entries
                .iter()
                .flatten()
                .map(|&v| ratmat::rat(v as i128, 1))
                .collect();
            rows.push(row);
        }
    }
    let _ = m;
    ratmat::rank(&rows)
}

/// Coefficient set: order, antiderivatives sigma_nu, and an assertion flag
/// that the top coefficient tau_{n-1} vanishes (the class used by the
/// inverse-problem layer).
#[derive(Clone, Debug)]
pub struct CoefficientSet {
    order: OrderSpec,
    sigma: Vec<PiecewisePoly>,
    tau_top_zero: bool,
}

impl CoefficientSet {
    pub fn new(order: OrderSpec, sigma: Vec<PiecewisePoly>, tau_top_zero: bool) -> Result<Self> {
        if sigma.len() != order.n() {
            return Err(Error::InvalidInput(format!(
                "{} antiderivatives for order n = {}",
                sigma.len(),
                order.n()
            )));
        }
        if tau_top_zero && !sigma[order.n() - 1].is_zero() {
            return Err(Error::InvalidInput(
                "tauTopZero asserted but sigma_{n-1} is not identically zero".into(),
            ));
        }
        Ok(CoefficientSet {
            order,
            sigma,
            tau_top_zero,
        })
    }

    pub fn order(&self) -> OrderSpec {
        self.order
    }

    pub fn sigma(&self) -> &[PiecewisePoly] {
        &self.sigma
    }

    pub fn tau_top_zero(&self) -> bool {
        self.tau_top_zero
    }

    /// Canonical representatives: each sigma_nu moment-normalized to order
    /// i_nu. Two coefficient sets describe the same distributions exactly
    /// when their canonical signatures coincide.
    pub fn canonical_signature(&self) -> Vec<PiecewisePoly> {
        let orders = singularity_orders(self.order);
        self.sigma
            .iter()
            .zip(&orders)
            .map(|(s, &i)| s.moment_normalize(i))
            .collect()
    }

    /// Largest L2 distance between canonical representatives.
    pub fn signature_distance(&self, other: &CoefficientSet) -> Result<f64> {
        if self.order != other.order {
            return Err(Error::InvalidInput("orders differ".into()));
        }
        let a = self.canonical_signature();
        let b = other.canonical_signature();
        Ok(a.iter()
            .zip(&b)
            .map(|(x, y)| x.l2_distance(y))
            .fold(0.0, f64::max))
    }

    /// Hash of the canonical signature sampled on a fixed grid and
    /// quantized to 1e-8, for cheap disjointness probes over many family
    /// members. Mesh-independent: equal functions hash equal.
    pub fn signature_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.order.n().hash(&mut h);
        for s in self.canonical_signature() {
            for j in 0..64 {
                let x = (j as f64 + 0.5) / 64.0;
                let v = s.eval(x);
                quantize(v.re).hash(&mut h);
                quantize(v.im).hash(&mut h);
            }
        }
        h.finish()
    }
}

fn quantize(v: f64) -> i64 {
    (v / 1e-8).round() as i64
}

// JSON form: { "n": .., "sigma": [..], "tauTopZero": .. }.
impl Serialize for CoefficientSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("CoefficientSet", 3)?;
        s.serialize_field("n", &self.order.n())?;
        s.serialize_field("sigma", &self.sigma)?;
        s.serialize_field("tauTopZero", &self.tau_top_zero)?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for CoefficientSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(rename_all = "camelCase")]
        struct Raw {
            n: usize,
            sigma: Vec<PiecewisePoly>,
            #[serde(default)]
            tau_top_zero: bool,
        }
        let raw = Raw::deserialize(deserializer)?;
        let order = OrderSpec::new(raw.n).map_err(D::Error::custom)?;
        CoefficientSet::new(order, raw.sigma, raw.tau_top_zero).map_err(D::Error::custom)
    }
}

/// Matrix of the bilinear form, (m+1) x (m+1). In the even case the
/// bottom-right entry must vanish.
#[derive(Clone, Debug, PartialEq)]
pub struct QMatrix {
    order: OrderSpec,
    q: Vec<Vec<PiecewisePoly>>,
}

impl QMatrix {
    pub fn new(order: OrderSpec, q: Vec<Vec<PiecewisePoly>>) -> Result<Self> {
        let m = order.m();
        if q.len() != m + 1 || q.iter().any(|row| row.len() != m + 1) {
            return Err(Error::InvalidInput(format!(
                "Q must be {0} x {0} for order n = {1}",
                m + 1,
                order.n()
            )));
        }
        if order.is_even() && !q[m][m].is_zero() {
            return Err(Error::PatternViolation(
                "even order requires q_{m,m} = 0".into(),
            ));
        }
        Ok(QMatrix { order, q })
    }

    pub fn order(&self) -> OrderSpec {
        self.order
    }

    pub fn entry(&self, r: usize, j: usize) -> &PiecewisePoly {
        &self.q[r][j]
    }

    pub fn entries(&self) -> &[Vec<PiecewisePoly>] {
        &self.q
    }
}

/// Associated matrix candidate: n x n with the lower block pattern of its
/// class. Entries are refined to one shared knot mesh on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FMatrix {
    order: OrderSpec,
    f: Vec<Vec<PiecewisePoly>>,
    knots: Vec<f64>,
}

/// Matrix classes recognized by [`matrix_class`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixClass {
    /// The block sparsity pattern alone.
    Fn,
    /// Pattern plus identically vanishing trace.
    Fn0,
}

/// Whether position (k, j), 1-based, is forced to zero for the given order.
pub fn forced_zero(order: OrderSpec, k: usize, j: usize) -> bool {
    let m = order.m();
    if order.is_even() {
        k < m || j > m + 1 || (k == m && j == m + 1)
    } else {
        k < m + 1 || j > m + 1
    }
}

/// Check raw entries against a class without constructing an [`FMatrix`].
pub fn matrix_class(order: OrderSpec, entries: &[Vec<PiecewisePoly>], class: MatrixClass) -> bool {
    let n = order.n();
    if entries.len() != n || entries.iter().any(|row| row.len() != n) {
        return false;
    }
    for (k, row) in entries.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            if forced_zero(order, k + 1, j + 1) && !e.is_zero() {
                return false;
            }
        }
    }
    if class == MatrixClass::Fn0 {
        let mut trace = PiecewisePoly::zero();
        for k in 0..n {
            trace = &trace + &entries[k][k];
        }
        if !trace.is_zero() {
            return false;
        }
    }
    true
}

impl FMatrix {
    pub fn new(order: OrderSpec, f: Vec<Vec<PiecewisePoly>>) -> Result<Self> {
        let n = order.n();
        if f.len() != n || f.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidInput(format!("F must be {n} x {n}")));
        }
        if !matrix_class(order, &f, MatrixClass::Fn) {
            return Err(Error::PatternViolation(format!(
                "entries outside the order-{n} block pattern are nonzero"
            )));
        }
        let mut knots = vec![0.0, 1.0];
        for row in &f {
            for e in row {
                knots = merge_knots(&knots, e.knots());
            }
        }
        let f = f
            .into_iter()
            .map(|row| row.into_iter().map(|e| e.refine(&knots)).collect())
            .collect();
        Ok(FMatrix { order, f, knots })
    }

    pub fn order(&self) -> OrderSpec {
        self.order
    }

    pub fn entry(&self, k: usize, j: usize) -> &PiecewisePoly {
        &self.f[k][j]
    }

    pub fn entries(&self) -> &[Vec<PiecewisePoly>] {
        &self.f
    }

    /// Shared knot mesh of all entries.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn in_class(&self, class: MatrixClass) -> bool {
        matrix_class(self.order, &self.f, class)
    }

    /// Canonical coefficient set this matrix regularizes: invert the
    /// bijection, decompose over the basis, reconstruct.
    pub fn signature(&self) -> Result<CoefficientSet> {
        let q = s_n_inverse(self)?;
        let decomp = decompose_chi(&q)?;
        reconstruct_signature(&decomp, self.order)
    }
}

impl Serialize for FMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("FMatrix", 2)?;
        s.serialize_field("n", &self.order.n())?;
        s.serialize_field("f", &self.f)?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for FMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            n: usize,
            f: Vec<Vec<PiecewisePoly>>,
        }
        let raw = Raw::deserialize(deserializer)?;
        let order = OrderSpec::new(raw.n).map_err(D::Error::custom)?;
        FMatrix::new(order, raw.f).map_err(D::Error::custom)
    }
}

/// Free data selecting one member of the family of associated matrices:
/// functions tau_{nu,i} and constants c_{nu,i} for i < i_nu. Missing keys
/// mean zero.
#[derive(Clone, Debug, Default)]
pub struct FamilyParams {
    pub tau: BTreeMap<(usize, usize), PiecewisePoly>,
    pub c: BTreeMap<(usize, usize), Complex64>,
}

impl FamilyParams {
    fn validate(&self, order: OrderSpec) -> Result<()> {
        let orders = singularity_orders(order);
        for &(nu, i) in self.tau.keys().chain(self.c.keys()) {
            if nu >= order.n() || i >= orders[nu] {
                return Err(Error::KeyRangeError { nu, i });
            }
        }
        Ok(())
    }
}

// JSON form: { "tauFree": { "nu,i": PiecewisePoly, .. }, "cFree": { "nu,i": c } }.
impl Serialize for FamilyParams {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        #[serde(untagged)]
        enum CNum {
            Real(f64),
            Pair([f64; 2]),
        }
        let tau: BTreeMap<String, &PiecewisePoly> = self
            .tau
            .iter()
            .map(|(&(nu, i), v)| (format!("{nu},{i}"), v))
            .collect();
        let c: BTreeMap<String, CNum> = self
            .c
            .iter()
            .map(|(&(nu, i), v)| {
                let num = if v.im == 0.0 {
                    CNum::Real(v.re)
                } else {
                    CNum::Pair([v.re, v.im])
                };
                (format!("{nu},{i}"), num)
            })
            .collect();
        let mut s = serializer.serialize_struct("FamilyParams", 2)?;
        s.serialize_field("tauFree", &tau)?;
        s.serialize_field("cFree", &c)?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for FamilyParams {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum CNum {
            Real(f64),
            Pair([f64; 2]),
        }
        #[derive(Deserialize)]
        #[serde(rename_all = "camelCase")]
        struct Raw {
            #[serde(default)]
            tau_free: BTreeMap<String, PiecewisePoly>,
            #[serde(default)]
            c_free: BTreeMap<String, CNum>,
        }
        fn parse_key<E: serde::de::Error>(key: &str) -> std::result::Result<(usize, usize), E> {
            let (a, b) = key
                .split_once(',')
                .ok_or_else(|| E::custom(format!("bad key '{key}', expected 'nu,i'")))?;
            let nu = a.trim().parse().map_err(E::custom)?;
            let i = b.trim().parse().map_err(E::custom)?;
            Ok((nu, i))
        }
        let raw = Raw::deserialize(deserializer)?;
        let mut out = FamilyParams::default();
        for (k, v) in raw.tau_free {
            out.tau.insert(parse_key(&k)?, v);
        }
        for (k, v) in raw.c_free {
            let c = match v {
                CNum::Real(re) => Complex64::new(re, 0.0),
                CNum::Pair([re, im]) => Complex64::new(re, im),
            };
            out.c.insert(parse_key(&k)?, c);
        }
        Ok(out)
    }
}

/// Q matrix of the standard regularization: sum over nu of
/// sigma_nu times chi_{nu, i_nu}.
pub fn assemble_q_ms(set: &CoefficientSet) -> QMatrix {
    let order = set.order();
    let m = order.m();
    let orders = singularity_orders(order);
    let mut q = vec![vec![PiecewisePoly::zero(); m + 1]; m + 1];
    for (nu, sigma) in set.sigma().iter().enumerate() {
        let ch = chi(order, nu, orders[nu]).unwrap();
        for r in 0..=m {
            for j in 0..=m {
                let w = ch.entry(r, j);
                if w != 0 {
                    q[r][j] = &q[r][j] + &sigma.scale(w as f64);
                }
            }
        }
    }
    QMatrix::new(order, q).expect("standard assembly stays inside the Q class")
}

/// The bijection from the Q class onto the F class.
///
/// Even order: the block formulas including the quadratic coupling term
/// q_{j-1,m} q_{m,2m-k}. Odd order: f_{k,j} = (-1)^k q_{j-1,2m+1-k}.
pub fn s_n(q: &QMatrix) -> Result<FMatrix> {
    let order = q.order();
    let n = order.n();
    let m = order.m();
    let mut f = vec![vec![PiecewisePoly::zero(); n]; n];
    if order.is_even() {
        for j in 1..=m {
            f[m - 1][j - 1] = q.entry(j - 1, m).scale(sign_pow(m + 1));
        }
        for k in m + 1..=2 * m {
            f[k - 1][m] = q.entry(m, 2 * m - k).scale(sign_pow(k + 1));
            for j in 1..=m {
                let prod = q.entry(j - 1, m) * q.entry(m, 2 * m - k);
                f[k - 1][j - 1] = &q.entry(j - 1, 2 * m - k).scale(sign_pow(k + 1))
                    + &prod.scale(sign_pow(m + k));
            }
        }
    } else {
        for k in m + 1..=2 * m + 1 {
            for j in 1..=m + 1 {
                f[k - 1][j - 1] = q.entry(j - 1, 2 * m + 1 - k).scale(sign_pow(k));
            }
        }
    }
    FMatrix::new(order, f)
}

/// Inverse of [`s_n`]. Exact round trip: the quadratic term is recovered
/// with the same operand order the forward map used, so on dyadic data the
/// composition is bit-identical.
pub fn s_n_inverse(f: &FMatrix) -> Result<QMatrix> {
    let order = f.order();
    let m = order.m();
    let mut q = vec![vec![PiecewisePoly::zero(); m + 1]; m + 1];
    if order.is_even() {
        for j in 1..=m {
            q[j - 1][m] = f.entry(m - 1, j - 1).scale(sign_pow(m + 1));
        }
        for k in m + 1..=2 * m {
            q[m][2 * m - k] = f.entry(k - 1, m).scale(sign_pow(k + 1));
        }
        for k in m + 1..=2 * m {
            for j in 1..=m {
                let prod = &q[j - 1][m] * &q[m][2 * m - k];
                let without = f.entry(k - 1, j - 1) - &prod.scale(sign_pow(m + k));
                q[j - 1][2 * m - k] = without.scale(sign_pow(k + 1));
            }
        }
    } else {
        for k in m + 1..=2 * m + 1 {
            for j in 1..=m + 1 {
                q[j - 1][2 * m + 1 - k] = f.entry(k - 1, j - 1).scale(sign_pow(k));
            }
        }
    }
    QMatrix::new(order, q)
}

/// Unique coefficients tau_{nu,i} with Q = sum tau_{nu,i} chi_{nu,i}.
///
/// Each basis matrix lives on the single anti-diagonal r + j = nu + i, so
/// the system splits per anti-diagonal; those small integer systems are
/// inverted in exact rational arithmetic.
pub fn decompose_chi(q: &QMatrix) -> Result<BTreeMap<(usize, usize), PiecewisePoly>> {
    let order = q.order();
    let n = order.n();
    let m = order.m();
    let orders = singularity_orders(order);
    let mut out = BTreeMap::new();
    for d in 0..n {
        let r_lo = d.saturating_sub(m);
        let r_hi = d.min(m);
        let positions: Vec<(usize, usize)> = (r_lo..=r_hi).map(|r| (r, d - r)).collect();
        let pairs: Vec<(usize, usize)> = (0..n)
            .filter(|&nu| d >= nu && d - nu <= orders[nu])
            .map(|nu| (nu, d - nu))
            .collect();
        if pairs.len() != positions.len() {
            return Err(Error::SingularBasis { diag: d });
        }
        let chis: Vec<ChiMatrix> = pairs
            .iter()
            .map(|&(nu, i)| chi(order, nu, i).unwrap())
            .collect();
        let basis: Vec<Vec<Rat>> = positions
            .iter()
            .map(|&(r, c)| {
                chis.iter()
                    .map(|ch| ratmat::rat(ch.entry(r, c) as i128, 1))
                    .collect()
            })
            .collect();
        let inv = ratmat::inverse(&basis).ok_or(Error::SingularBasis { diag: d })?;
        for (pi, &(nu, i)) in pairs.iter().enumerate() {
            let mut tau = PiecewisePoly::zero();
            for (pos, &(r, c)) in positions.iter().enumerate() {
                let w = ratmat::to_f64(&inv[pi][pos]);
                if w != 0.0 {
                    tau = &tau + &q.entry(r, c).scale(w);
                }
            }
            out.insert((nu, i), tau);
        }
    }
    Ok(out)
}

/// Rebuild the canonical coefficient set from a basis decomposition.
///
/// tau_nu = sum_i (-1)^i tau_{nu,i}^{(i)}, evaluated at the antiderivative
/// level: sigma_nu is the moment-normalized value of
/// (-1)^{i_nu} sum_i (-1)^i (i_nu - i)-fold antiderivative of tau_{nu,i}.
pub fn reconstruct_signature(
    decomp: &BTreeMap<(usize, usize), PiecewisePoly>,
    order: OrderSpec,
) -> Result<CoefficientSet> {
    let n = order.n();
    let orders = singularity_orders(order);
    for &(nu, i) in decomp.keys() {
        if nu >= n || i > orders[nu] {
            return Err(Error::IndexOutOfRange(format!(
                "decomposition key (nu, i) = ({nu}, {i})"
            )));
        }
    }
    let mut sigma = Vec::with_capacity(n);
    let mut scale: f64 = 0.0;
    for nu in 0..n {
        let i_nu = orders[nu];
        let mut acc = PiecewisePoly::zero();
        for i in 0..=i_nu {
            let Some(tau) = decomp.get(&(nu, i)) else {
                continue;
            };
            let lifted = if i == i_nu {
                tau.clone()
            } else {
                tau.antiderivative(i_nu - i)
            };
            acc = &acc + &lifted.scale(sign_pow(i));
        }
        let s = acc.scale(sign_pow(i_nu)).moment_normalize(i_nu);
        scale = scale.max(s.max_abs_coeff());
        sigma.push(s);
    }
    // Snap a numerically vanished top coefficient to exact zero so the
    // class flag can be carried.
    let top_zero = sigma[n - 1].is_zero_within(1e-10 * (1.0 + scale));
    if top_zero {
        sigma[n - 1] = PiecewisePoly::zero();
    }
    CoefficientSet::new(order, sigma, top_zero)
}

/// One member of the family of associated matrices for `set`, selected by
/// the free data in `params`.
///
/// The dependent coefficients are built at the antiderivative level:
/// tau_{nu,i_nu} is the moment-normalized value of
/// sigma_nu - (-1)^{i_nu} sum_{i<i_nu} (-1)^i (i_nu-i)-fold antiderivative
/// of tau_{nu,i}, plus the free polynomial sum_i c_{nu,i} x^i. The Q matrix
/// is then assembled over the basis and mapped through the bijection.
pub fn family_matrix(set: &CoefficientSet, params: &FamilyParams) -> Result<FMatrix> {
    let order = set.order();
    params.validate(order)?;
    let n = order.n();
    let m = order.m();
    let orders = singularity_orders(order);
    let mut q = vec![vec![PiecewisePoly::zero(); m + 1]; m + 1];
    let zero = PiecewisePoly::zero();
    for nu in 0..n {
        let i_nu = orders[nu];
        let mut base = set.sigma()[nu].clone();
        for i in 0..i_nu {
            let tau = params.tau.get(&(nu, i)).unwrap_or(&zero);
            if tau.is_zero() {
                continue;
            }
            let lifted = tau.antiderivative(i_nu - i);
            base = &base - &lifted.scale(sign_pow(i_nu + i));
        }
        let mut top = base.moment_normalize(i_nu);
        let c_coeffs: Vec<Complex64> = (0..i_nu)
            .map(|i| params.c.get(&(nu, i)).copied().unwrap_or(Complex64::ZERO))
            .collect();
        if c_coeffs.iter().any(|c| *c != Complex64::ZERO) {
            top = &top + &PiecewisePoly::poly_complex(&c_coeffs);
        }
        // Scatter tau_{nu,i} chi_{nu,i} for i < i_nu and the top term.
        for i in 0..=i_nu {
            let tau = if i == i_nu {
                &top
            } else {
                params.tau.get(&(nu, i)).unwrap_or(&zero)
            };
            if tau.is_zero() {
                continue;
            }
            let ch = chi(order, nu, i).unwrap();
            for r in 0..=m {
                for j in 0..=m {
                    let w = ch.entry(r, j);
                    if w != 0 {
                        q[r][j] = &q[r][j] + &tau.scale(w as f64);
                    }
                }
            }
        }
    }
    s_n(&QMatrix::new(order, q)?)
}
