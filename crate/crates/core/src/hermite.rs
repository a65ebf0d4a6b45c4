//! Probabilists' Hermite polynomials and Gaussian-measure inner products.
//!
//! Two coefficient conventions appear here and they are never mixed silently:
//!
//! * [`LinkFunction`] stores coefficients in the orthonormal basis
//!   `He_k / sqrt(k!)`, so a unit-variance link has `sum c_k^2 = 1`.
//! * [`HermiteExpansion`] stores `H(h, k) = E[h(z) He_k(z)]`, the
//!   non-normalized convention in which `h = sum H(h,k) He_k / k!`.
//!
//! `H(g, k) = c_k * sqrt(k!)` converts between the two.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Highest Hermite order accepted anywhere in the crate.
pub const MAX_ORDER: usize = 64;

/// Default zero tolerance for exact (quadrature) coefficient classification.
pub const QUADRATURE_ZERO_TOL: f64 = 1e-8;

/// Significance multiplier for Monte-Carlo coefficient classification.
pub const MC_SIGNIFICANCE: f64 = 5.0;

const MAX_NODES: usize = 512;
const MC_BLOCK: usize = 1 << 16;

/// `He_k(z)` via the three-term recurrence.
pub fn he(k: usize, z: f64) -> Result<f64> {
    if k > MAX_ORDER {
        return Err(Error::invalid(format!(
            "Hermite order {k} exceeds the supported maximum {MAX_ORDER}"
        )));
    }
    Ok(he_unchecked(k, z))
}

#[inline]
fn he_unchecked(k: usize, z: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, z);
    if k == 0 {
        return prev;
    }
    for n in 1..k {
        let next = z * cur - n as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Fill `out[k] = He_k(z)` for `k = 0..out.len()`.
#[inline]
pub fn he_all(z: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = z;
    }
    for n in 1..out.len().saturating_sub(1) {
        out[n + 1] = z * out[n] - n as f64 * out[n - 1];
    }
}

pub fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, i| acc * i as f64)
}

/// Orthonormal Hermite function `He_k(z) / sqrt(k!)` for all `k < out.len()`.
fn he_normalized_all(z: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = z;
    }
    for n in 1..out.len().saturating_sub(1) {
        let nf = n as f64;
        out[n + 1] = (z * out[n] - nf.sqrt() * out[n - 1]) / (nf + 1.0).sqrt();
    }
}

/// Gauss–Hermite rule for the standard Gaussian weight `exp(-z^2/2)/sqrt(2 pi)`.
///
/// Nodes start from the Golub–Welsch eigenvalues of the Jacobi matrix and are
/// polished with Newton steps on the orthonormal recurrence; weights use the
/// closed form `w_i = 1 / (n * p_{n-1}(x_i)^2)` with `p` orthonormal.
#[derive(Debug, Clone)]
pub struct GaussHermiteRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermiteRule {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n > MAX_NODES {
            return Err(Error::invalid(format!(
                "quadrature node count must be in 1..={MAX_NODES}, got {n}"
            )));
        }
        let jacobi = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let mut nodes: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
        nodes.sort_by(f64::total_cmp);

        let mut buf = vec![0.0; n + 1];
        let nf = n as f64;
        let mut weights = Vec::with_capacity(n);
        for x in nodes.iter_mut() {
            for _ in 0..3 {
                he_normalized_all(*x, &mut buf);
                let step = buf[n] / (nf.sqrt() * buf[n - 1]);
                if !step.is_finite() {
                    break;
                }
                *x -= step;
            }
            he_normalized_all(*x, &mut buf);
            weights.push(1.0 / (nf * buf[n - 1] * buf[n - 1]));
        }
        Ok(Self { nodes, weights })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(z)]` for `z ~ N(0,1)`. Fails on a non-finite integrand value.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::numerical(format!(
                    "integrand is not finite at quadrature node z = {x}"
                )));
            }
            acc += w * v;
        }
        Ok(acc)
    }
}

/// `H(h, k) = E[h(z) He_k(z)]` by Gauss–Hermite quadrature with `nodes` points.
pub fn gauss_hermite_inner<F: Fn(f64) -> f64>(h: F, k: usize, nodes: usize) -> Result<f64> {
    he(k, 0.0)?;
    let rule = GaussHermiteRule::new(nodes)?;
    rule.expect(|z| h(z) * he_unchecked(k, z))
}

/// `H(h, p)` for `p = 0..=p_max` with a single quadrature rule.
pub fn quadrature_expansion<F: Fn(f64) -> f64>(
    h: F,
    p_max: usize,
    nodes: usize,
) -> Result<HermiteExpansion> {
    he(p_max, 0.0)?;
    let rule = GaussHermiteRule::new(nodes)?;
    let mut coeffs = vec![0.0; p_max + 1];
    let mut hs = vec![0.0; p_max + 1];
    for (&x, &w) in rule.nodes().iter().zip(rule.weights()) {
        let v = h(x);
        if !v.is_finite() {
            return Err(Error::numerical(format!(
                "integrand is not finite at quadrature node z = {x}"
            )));
        }
        he_all(x, &mut hs);
        for (c, hp) in coeffs.iter_mut().zip(&hs) {
            *c += w * v * hp;
        }
    }
    Ok(HermiteExpansion::exact(coeffs))
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

impl McEstimate {
    /// `|estimate| > multiplier * std_error`.
    pub fn is_significant(&self, multiplier: f64) -> bool {
        self.estimate.abs() > multiplier * self.std_error
    }
}

/// Running mean / second moment per coefficient, merged with Chan's formula.
#[derive(Clone)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, xs: &[f64]) {
        self.n += 1.0;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(xs) {
            let delta = x - *m;
            *m += delta / self.n;
            *s += delta * (x - *m);
        }
    }

    fn merge(&mut self, other: &Moments) {
        if other.n == 0.0 {
            return;
        }
        let n = self.n + other.n;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * other.n / n;
            self.m2[i] += other.m2[i] + delta * delta * self.n * other.n / n;
        }
        self.n = n;
    }
}

/// Monte-Carlo estimates of `H(h, p)`, `p = 0..=p_max`, from `samples` draws.
///
/// Samples are split into fixed-size blocks, each with its own child stream,
/// and block statistics are merged in block order; the result does not depend
/// on the number of worker threads.
pub fn mc_expansion<F>(
    h: F,
    p_max: usize,
    samples: usize,
    stream: &RngStream,
) -> Result<HermiteExpansion>
where
    F: Fn(f64) -> f64 + Sync,
{
    he(p_max, 0.0)?;
    if samples < 2 {
        return Err(Error::invalid(
            "Monte-Carlo estimation needs at least 2 samples",
        ));
    }
    let blocks = samples.div_ceil(MC_BLOCK);
    let partials: Vec<Result<Moments>> = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let count = MC_BLOCK.min(samples - blk * MC_BLOCK);
            let mut rng = stream.child(blk as u64).rng();
            let mut hs = vec![0.0; p_max + 1];
            let mut mom = Moments::new(p_max + 1);
            for _ in 0..count {
                let z: f64 = rng.sample(StandardNormal);
                let v = h(z);
                if !v.is_finite() {
                    return Err(Error::numerical(format!(
                        "Monte-Carlo integrand is not finite at z = {z}"
                    )));
                }
                he_all(z, &mut hs);
                for x in hs.iter_mut() {
                    *x *= v;
                }
                mom.push(&hs);
            }
            Ok(mom)
        })
        .collect();
    let mut total = Moments::new(p_max + 1);
    for part in partials {
        total.merge(&part?);
    }
    let n = total.n;
    let errors = total
        .m2
        .iter()
        .map(|&s| (s / (n - 1.0) / n).max(0.0).sqrt())
        .collect();
    Ok(HermiteExpansion {
        coeffs: total.mean,
        max_order: p_max,
        estimator_error: errors,
    })
}

/// Monte-Carlo estimate of a single `H(h, k)`.
pub fn mc_inner<F>(h: F, k: usize, samples: usize, stream: &RngStream) -> Result<McEstimate>
where
    F: Fn(f64) -> f64 + Sync,
{
    if samples < 1000 {
        return Err(Error::invalid(format!(
            "mc_inner needs at least 1000 samples, got {samples}"
        )));
    }
    let exp = mc_expansion(&h, k, samples, stream)?;
    Ok(McEstimate {
        estimate: exp.coeffs[k],
        std_error: exp.estimator_error[k],
    })
}

/// How Hermite coefficients of a non-polynomial function are estimated.
#[derive(Debug, Clone)]
pub enum Estimator {
    Quadrature { nodes: usize },
    MonteCarlo { samples: usize, stream: RngStream },
}

impl Estimator {
    pub fn expansion<F>(&self, h: F, p_max: usize) -> Result<HermiteExpansion>
    where
        F: Fn(f64) -> f64 + Sync,
    {
        match self {
            Estimator::Quadrature { nodes } => quadrature_expansion(h, p_max, *nodes),
            Estimator::MonteCarlo { samples, stream } => mc_expansion(h, p_max, *samples, stream),
        }
    }
}

/// Coefficients `H(h, 0..=max_order)` with per-coefficient standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteExpansion {
    pub coeffs: Vec<f64>,
    pub max_order: usize,
    /// Zero for exact quadrature.
    pub estimator_error: Vec<f64>,
}

impl HermiteExpansion {
    pub fn exact(coeffs: Vec<f64>) -> Self {
        let max_order = coeffs.len().saturating_sub(1);
        let estimator_error = vec![0.0; coeffs.len()];
        Self {
            coeffs,
            max_order,
            estimator_error,
        }
    }

    pub fn estimate(&self, p: usize) -> McEstimate {
        McEstimate {
            estimate: self.coeffs[p],
            std_error: self.estimator_error[p],
        }
    }

    /// Whether coefficient `p` is distinguishable from zero: more than
    /// [`MC_SIGNIFICANCE`] standard errors for sampled estimates, above
    /// [`QUADRATURE_ZERO_TOL`] for exact ones.
    pub fn is_significant(&self, p: usize) -> bool {
        let err = self.estimator_error[p];
        if err > 0.0 {
            self.coeffs[p].abs() > MC_SIGNIFICANCE * err
        } else {
            self.coeffs[p].abs() > QUADRATURE_ZERO_TOL
        }
    }

    /// Smallest `p >= 1` whose coefficient is significant.
    pub fn first_significant(&self) -> Option<usize> {
        (1..=self.max_order).find(|&p| self.is_significant(p))
    }
}

/// Polynomial link function `g(z) = sum_k c_k He_k(z) / sqrt(k!)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkFunction {
    coeffs: Vec<f64>,
}

impl LinkFunction {
    /// Coefficients in the orthonormal basis, used as given. Trailing
    /// coefficients at or below the zero tolerance are dropped.
    pub fn from_orthonormal(coeffs: &[f64]) -> Result<Self> {
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("link coefficients must be finite"));
        }
        let degree = coeffs
            .iter()
            .rposition(|c| c.abs() > QUADRATURE_ZERO_TOL)
            .ok_or_else(|| Error::invalid("link function is identically zero"))?;
        if degree > MAX_ORDER {
            return Err(Error::invalid(format!(
                "link degree {degree} exceeds the supported maximum {MAX_ORDER}"
            )));
        }
        Ok(Self {
            coeffs: coeffs[..=degree].to_vec(),
        })
    }

    /// Drop the constant mode and rescale to unit Gaussian variance.
    pub fn normalized(coeffs: &[f64]) -> Result<Self> {
        let mut c = coeffs.to_vec();
        if let Some(c0) = c.first_mut() {
            *c0 = 0.0;
        }
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > QUADRATURE_ZERO_TOL) {
            return Err(Error::invalid(
                "link function has no non-constant Hermite mode",
            ));
        }
        // already unit norm: keep the bits so spec strings round-trip
        if (norm - 1.0).abs() > 1e-14 {
            c.iter_mut().for_each(|x| *x /= norm);
        }
        Self::from_orthonormal(&c)
    }

    /// `He_k / sqrt(k!)`.
    pub fn hermite_mode(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("He_0 cannot be normalized to mean zero"));
        }
        let mut c = vec![0.0; k + 1];
        c[k] = 1.0;
        Self::from_orthonormal(&c)
    }

    /// Parse `heK` (a single normalized mode) or `coeffs:c0,c1,...`
    /// (orthonormal coefficients, normalized on load).
    pub fn parse(spec: &str) -> Result<Self> {
        let s = spec.trim();
        if let Some(k) = s.strip_prefix("he") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::invalid(format!("bad link preset `{s}`")))?;
            return Self::hermite_mode(k);
        }
        if let Some(list) = s.strip_prefix("coeffs:") {
            let coeffs = list
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid(format!("bad link coefficient list `{list}`: {e}")))?;
            return Self::normalized(&coeffs);
        }
        Err(Error::invalid(format!(
            "unknown link spec `{s}` (expected heK or coeffs:...)"
        )))
    }

    /// Canonical text form that [`LinkFunction::parse`] reads back.
    pub fn to_spec(&self) -> String {
        let list: Vec<String> = self.coeffs.iter().map(|c| format!("{c:?}")).collect();
        format!("coeffs:{}", list.join(","))
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// `H(g, k)` in the non-normalized convention.
    pub fn hermite_coeff(&self, k: usize) -> f64 {
        self.coeffs.get(k).map_or(0.0, |c| c * factorial(k).sqrt())
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        let var: f64 = self.coeffs.iter().map(|c| c * c).sum();
        self.coeffs[0].abs() <= tol && (var - 1.0).abs() <= tol
    }

    pub fn is_even(&self, tol: f64) -> bool {
        (1..self.coeffs.len())
            .step_by(2)
            .all(|k| self.hermite_coeff(k).abs() < tol)
    }

    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        let mut prev = 1.0;
        let mut cur = z;
        let mut acc = self.coeffs[0];
        if self.coeffs.len() > 1 {
            acc += self.coeffs[1] * z;
        }
        for n in 1..self.coeffs.len().saturating_sub(1) {
            let nf = n as f64;
            let next = (z * cur - nf.sqrt() * prev) / (nf + 1.0).sqrt();
            prev = cur;
            cur = next;
            acc += self.coeffs[n + 1] * cur;
        }
        acc
    }
}

/// Smallest `i >= 1` with `|H(g, i)| > tol`, by exact quadrature.
pub fn information_exponent(g: &LinkFunction, tol: f64) -> Result<usize> {
    let deg = g.degree();
    for i in 1..=deg {
        let nodes = (deg + i) / 2 + 2;
        let h = gauss_hermite_inner(|z| g.eval(z), i, nodes)?;
        if h.abs() > tol {
            return Ok(i);
        }
    }
    Err(Error::numerical(format!(
        "no Hermite coefficient of order 1..={deg} exceeds {tol}"
    )))
}

/// Generative exponent of a polynomial link: 2 when every odd-order
/// coefficient is below `tol` (an even function), 1 otherwise.
pub fn generative_exponent(g: &LinkFunction, tol: f64) -> u8 {
    if g.is_even(tol) {
        2
    } else {
        1
    }
}

/// Gate scale `rho`, gate bias `b` and label-noise level `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatingConstants {
    pub rho: f64,
    pub b: f64,
    pub tau: f64,
}

impl Default for GatingConstants {
    fn default() -> Self {
        Self {
            rho: 2.0,
            b: -4.0,
            tau: 0.1,
        }
    }
}

impl GatingConstants {
    pub fn new(rho: f64, b: f64, tau: f64) -> Result<Self> {
        let gc = Self { rho, b, tau };
        gc.validate()?;
        Ok(gc)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            errs.push(format!(
                "gating.rho must be positive and finite, got {}",
                self.rho
            ));
        }
        if !self.b.is_finite() {
            errs.push(format!("gating.b must be finite, got {}", self.b));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            errs.push(format!(
                "data.tau must be nonnegative and finite, got {}",
                self.tau
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// Gate value for a token carrying label `y`: `sigmoid(y/rho + b)`.
    #[inline]
    pub fn gate(&self, y: f64) -> f64 {
        sigmoid(y / self.rho + self.b)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `k`-th derivative of the logistic sigmoid, `k <= 3`, in closed form.
pub fn sigmoid_derivative(k: usize, z: f64) -> Result<f64> {
    let s = sigmoid(z);
    let ds = s * sigmoid(-z);
    match k {
        0 => Ok(s),
        1 => Ok(ds),
        2 => Ok(ds * (1.0 - 2.0 * s)),
        3 => Ok(ds * (1.0 - 6.0 * s + 6.0 * s * s)),
        _ => Err(Error::invalid(format!(
            "sigmoid derivative order {k} not supported (0..=3)"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundPoint {
    pub z: f64,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsReport {
    pub k: usize,
    pub points: Vec<BoundPoint>,
    pub holds: bool,
}

/// Checks `e^z / 2 <= sigmoid^(k)(z) <= 2 e^z` on a grid with `z < -k - 2`.
pub fn sigmoid_derivative_bounds_check(k: usize, z_grid: &[f64]) -> Result<BoundsReport> {
    if k > 3 {
        return Err(Error::invalid(format!(
            "derivative order {k} outside 0..=3"
        )));
    }
    let limit = -(k as f64) - 2.0;
    let bad: Vec<String> = z_grid
        .iter()
        .filter(|&&z| !(z < limit))
        .map(|z| format!("grid point z = {z} violates z < {limit} for k = {k}"))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }
    let points: Vec<BoundPoint> = z_grid
        .iter()
        .map(|&z| {
            let value = sigmoid_derivative(k, z).expect("k checked above");
            let lower = z.exp() / 2.0;
            let upper = 2.0 * z.exp();
            BoundPoint {
                z,
                value,
                lower,
                upper,
                holds: lower <= value && value <= upper,
            }
        })
        .collect();
    let holds = points.iter().all(|p| p.holds);
    Ok(BoundsReport { k, points, holds })
}

/// `z -> g(z) * sigmoid(g(z)/rho + b)`: the label reweighting performed by
/// the gate, without noise.
pub fn gated_link(g: &LinkFunction, gc: GatingConstants) -> impl Fn(f64) -> f64 + Sync + '_ {
    move |z| {
        let y = g.eval(z);
        y * gc.gate(y)
    }
}

/// The noise-averaged gated label
/// `A(z) = 1/2 [ (rho gb + tau) s(gb + tau/rho + b) + (rho gb - tau) s(gb - tau/rho + b) ]`
/// where `gb = g/rho`, or `0` when `truncation` is set and `|g/rho|` exceeds it.
pub fn gated_label_transform(
    g: &LinkFunction,
    gc: GatingConstants,
    truncation: Option<f64>,
) -> impl Fn(f64) -> f64 + Sync + '_ {
    move |z| {
        let mut gb = g.eval(z) / gc.rho;
        if let Some(t) = truncation {
            if gb.abs() > t {
                gb = 0.0;
            }
        }
        let shift = gc.tau / gc.rho;
        0.5 * ((gc.rho * gb + gc.tau) * sigmoid(gb + shift + gc.b)
            + (gc.rho * gb - gc.tau) * sigmoid(gb - shift + gc.b))
    }
}

/// Hermite coefficients `a_p = H(A, p)` of [`gated_label_transform`].
pub fn a_coeffs(
    g: &LinkFunction,
    gc: GatingConstants,
    truncation: Option<f64>,
    p_max: usize,
    estimator: &Estimator,
) -> Result<HermiteExpansion> {
    gc.validate()?;
    if p_max < 2 {
        return Err(Error::invalid(format!(
            "a_coeffs needs p_max >= 2, got {p_max}"
        )));
    }
    estimator.expansion(gated_label_transform(g, gc, truncation), p_max)
}
