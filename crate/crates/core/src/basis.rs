//! Boundary-respecting parametrizations of the classical trajectory `z(τ)`
//! and the positive matrix path `R(τ)`.
//!
//! All evaluation happens in normalized time `τ = t/T`. Derivatives returned
//! by `eval` are τ-derivatives; `eval_time` applies the `1/T` factor per order.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matops::{inv_quartic_root, is_diagonal, positivity_margin, SymMatrix};

/// One scalar function of normalized time.
///
/// `Quintic` and `QuinticMidpoint` carry inhomogeneous boundary data; the sine
/// kinds vanish at both ends together with their first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarBasis {
    /// Lowest-degree polynomial from `start` to `end` with flat ends.
    Quintic { start: f64, end: f64 },
    /// Sextic that additionally passes through `mid` at `τ = 1/2`.
    QuinticMidpoint { start: f64, end: f64, mid: f64 },
    /// `sin(πk₂τ) − (k₂/k₁) sin(πk₁τ)` with `k = 1 + 2ω`.
    Sine { w1: i64, w2: i64 },
    /// Three-sine combination that also vanishes at `τ = 1/2`. Odd frequencies only.
    SineMidpoint { w1: i64, w2: i64, w3: i64 },
    /// Square of the `Sine` member; non-negative everywhere.
    SineSquared { w1: i64, w2: i64 },
}

fn poly(coeffs: &[f64], tau: f64, order: u8) -> f64 {
    // coeffs[k] multiplies τ^k
    let mut acc = 0.0;
    for (k, &c) in coeffs.iter().enumerate().rev() {
        let factor = match order {
            0 => 1.0,
            1 => k as f64,
            2 => (k * k.saturating_sub(1)) as f64,
            _ => unreachable!(),
        };
        let power = k as i32 - order as i32;
        if power >= 0 && factor != 0.0 {
            acc += c * factor * tau.powi(power);
        }
    }
    acc
}

fn sin_deriv(k: f64, tau: f64, order: u8) -> f64 {
    let w = PI * k;
    match order {
        0 => (w * tau).sin(),
        1 => w * (w * tau).cos(),
        2 => -w * w * (w * tau).sin(),
        _ => unreachable!(),
    }
}

fn midpoint_weights(w1: i64, w2: i64, w3: i64) -> (f64, f64) {
    let s = |w: i64| (PI * w as f64 / 2.0).sin();
    let (s1, s2, s3) = (s(w1), s(w2), s(w3));
    let (f1, f2, f3) = (w1 as f64, w2 as f64, w3 as f64);
    let den = f1 * s2 - f2 * s1;
    ((f2 * s3 - f3 * s2) / den, (-f1 * s3 + f3 * s1) / den)
}

impl ScalarBasis {
    pub fn sine(w1: i64, w2: i64) -> Result<Self> {
        let b = ScalarBasis::Sine { w1, w2 };
        b.validate()?;
        Ok(b)
    }

    pub fn sine_midpoint(w1: i64, w2: i64, w3: i64) -> Result<Self> {
        let b = ScalarBasis::SineMidpoint { w1, w2, w3 };
        b.validate()?;
        Ok(b)
    }

    pub fn sine_squared(w1: i64, w2: i64) -> Result<Self> {
        let b = ScalarBasis::SineSquared { w1, w2 };
        b.validate()?;
        Ok(b)
    }

    /// Default homogeneous family: `(ω₁, ω₂) = (i, i+1)` for `i = 0..n`, so the
    /// lowest member mixes `sin(πτ)` and `sin(3πτ)`.
    pub fn sine_family(n: usize) -> Vec<Self> {
        (0..n as i64).map(|i| ScalarBasis::Sine { w1: i, w2: i + 1 }).collect()
    }

    /// Homogeneous family that also vanishes at the midpoint: `(1, 3, 2i+3)`.
    pub fn sine_midpoint_family(n: usize) -> Vec<Self> {
        (1..=n as i64)
            .map(|i| ScalarBasis::SineMidpoint {
                w1: 1,
                w2: 3,
                w3: 2 * i + 3,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScalarBasis::Quintic { start, end } => {
                if !(start.is_finite() && end.is_finite()) {
                    return Err(Error::InvalidFrequency("non-finite boundary value".into()));
                }
            }
            ScalarBasis::QuinticMidpoint { start, end, mid } => {
                if !(start.is_finite() && end.is_finite() && mid.is_finite()) {
                    return Err(Error::InvalidFrequency("non-finite boundary value".into()));
                }
            }
            ScalarBasis::Sine { w1, w2 } | ScalarBasis::SineSquared { w1, w2 } => {
                if w1 == w2 {
                    return Err(Error::InvalidFrequency(format!(
                        "sine member with w1 == w2 == {w1} is identically zero"
                    )));
                }
            }
            ScalarBasis::SineMidpoint { w1, w2, w3 } => {
                if [w1, w2, w3].iter().any(|w| *w <= 0 || w % 2 == 0) {
                    return Err(Error::InvalidFrequency(format!(
                        "midpoint sine frequencies must be odd and positive, got ({w1}, {w2}, {w3})"
                    )));
                }
                if w1 == w2 {
                    return Err(Error::InvalidFrequency("midpoint sine needs w1 != w2".into()));
                }
                let s = |w: i64| (PI * w as f64 / 2.0).sin();
                let den = w1 as f64 * s(w2) - w2 as f64 * s(w1);
                if den.abs() < 1e-12 {
                    return Err(Error::InvalidFrequency("vanishing midpoint denominator".into()));
                }
            }
        }
        Ok(())
    }

    /// τ-derivative of the given order (0, 1 or 2). Assumes a validated basis.
    pub fn value(&self, tau: f64, order: u8) -> f64 {
        assert!(order <= 2, "derivative order {order} not supported");
        match *self {
            ScalarBasis::Quintic { start, end } => {
                let d = end - start;
                poly(&[start, 0.0, 0.0, 10.0 * d, -15.0 * d, 6.0 * d], tau, order)
            }
            ScalarBasis::QuinticMidpoint { start, end, mid } => poly(
                &[
                    start,
                    0.0,
                    0.0,
                    2.0 * (-11.0 * end - 21.0 * start + 32.0 * mid),
                    81.0 * end + 111.0 * start - 192.0 * mid,
                    2.0 * (-45.0 * end - 51.0 * start + 96.0 * mid),
                    32.0 * (end + start - 2.0 * mid),
                ],
                tau,
                order,
            ),
            ScalarBasis::Sine { w1, w2 } => {
                let k1 = (1 + 2 * w1) as f64;
                let k2 = (1 + 2 * w2) as f64;
                sin_deriv(k2, tau, order) - k2 / k1 * sin_deriv(k1, tau, order)
            }
            ScalarBasis::SineMidpoint { w1, w2, w3 } => {
                let (c1, c2) = midpoint_weights(w1, w2, w3);
                c1 * sin_deriv(w1 as f64, tau, order)
                    + c2 * sin_deriv(w2 as f64, tau, order)
                    + sin_deriv(w3 as f64, tau, order)
            }
            ScalarBasis::SineSquared { w1, w2 } => {
                let g = ScalarBasis::Sine { w1, w2 };
                let g0 = g.value(tau, 0);
                match order {
                    0 => g0 * g0,
                    1 => 2.0 * g0 * g.value(tau, 1),
                    _ => {
                        let g1 = g.value(tau, 1);
                        2.0 * (g1 * g1 + g0 * g.value(tau, 2))
                    }
                }
            }
        }
    }

    /// Values and first two τ-derivatives at once.
    pub fn jet(&self, tau: f64) -> [f64; 3] {
        [self.value(tau, 0), self.value(tau, 1), self.value(tau, 2)]
    }

    pub fn is_homogeneous(&self) -> bool {
        !matches!(
            self,
            ScalarBasis::Quintic { .. } | ScalarBasis::QuinticMidpoint { .. }
        )
    }
}

/// Validating evaluation entry point.
pub fn eval_scalar(basis: &ScalarBasis, tau: f64, order: u8) -> Result<f64> {
    basis.validate()?;
    if order > 2 {
        return Err(Error::Unsupported(format!("derivative order {order}")));
    }
    Ok(basis.value(tau, order))
}

fn time_scale(order: u8, duration: f64) -> f64 {
    duration.powi(-(order as i32))
}

/// `z(τ) = z₀(τ) + Σ a_{k,i} z_i(τ)`, one coefficient set per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPath {
    base: Vec<ScalarBasis>,
    family: Vec<ScalarBasis>,
    coeffs: Vec<Vec<f64>>,
}

impl TrajectoryPath {
    pub fn new(base: Vec<ScalarBasis>, family: Vec<ScalarBasis>) -> Result<Self> {
        for b in &base {
            b.validate()?;
        }
        for f in &family {
            f.validate()?;
            if !f.is_homogeneous() {
                return Err(Error::Unsupported(
                    "trajectory family members must satisfy homogeneous boundary conditions".into(),
                ));
            }
        }
        let coeffs = vec![vec![0.0; family.len()]; base.len()];
        Ok(Self {
            base,
            family,
            coeffs,
        })
    }

    /// Quintic transport from `c0` to `ct` with `n` sine functions per component.
    pub fn transport(c0: &DVector<f64>, ct: &DVector<f64>, n: usize) -> Result<Self> {
        check_len(c0.len(), ct.len())?;
        let base = c0
            .iter()
            .zip(ct.iter())
            .map(|(&start, &end)| ScalarBasis::Quintic { start, end })
            .collect();
        Self::new(base, ScalarBasis::sine_family(n))
    }

    /// Transport constrained through `mid` at `τ = 1/2`.
    pub fn transport_via(
        c0: &DVector<f64>,
        ct: &DVector<f64>,
        mid: &DVector<f64>,
        n: usize,
    ) -> Result<Self> {
        check_len(c0.len(), ct.len())?;
        check_len(c0.len(), mid.len())?;
        let base = (0..c0.len())
            .map(|k| ScalarBasis::QuinticMidpoint {
                start: c0[k],
                end: ct[k],
                mid: mid[k],
            })
            .collect();
        Self::new(base, ScalarBasis::sine_midpoint_family(n))
    }

    pub fn dim(&self) -> usize {
        self.base.len()
    }

    pub fn family_len(&self) -> usize {
        self.family.len()
    }

    pub fn num_coefficients(&self) -> usize {
        self.dim() * self.family.len()
    }

    pub fn base(&self) -> &[ScalarBasis] {
        &self.base
    }

    pub fn family(&self) -> &[ScalarBasis] {
        &self.family
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.coeffs.iter().flatten().copied().collect()
    }

    /// Sets coefficients from a flat slice laid out component-major.
    pub fn set_coefficients(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_coefficients() {
            return Err(Error::Decode {
                expected: self.num_coefficients(),
                found: flat.len(),
            });
        }
        let n = self.family.len();
        for (k, row) in self.coeffs.iter_mut().enumerate() {
            row.copy_from_slice(&flat[k * n..(k + 1) * n]);
        }
        Ok(())
    }

    pub fn with_coefficients(mut self, flat: &[f64]) -> Result<Self> {
        self.set_coefficients(flat)?;
        Ok(self)
    }

    /// τ-derivative of order 0, 1 or 2.
    pub fn eval(&self, tau: f64, order: u8) -> DVector<f64> {
        let fam: Vec<f64> = self.family.iter().map(|f| f.value(tau, order)).collect();
        DVector::from_iterator(
            self.dim(),
            self.base.iter().zip(&self.coeffs).map(|(b, a)| {
                b.value(tau, order) + a.iter().zip(&fam).map(|(c, g)| c * g).sum::<f64>()
            }),
        )
    }

    /// Physical-time derivative: `d^k z/dt^k = T^{-k} d^k z/dτ^k`.
    pub fn eval_time(&self, tau: f64, order: u8, duration: f64) -> DVector<f64> {
        self.eval(tau, order) * time_scale(order, duration)
    }
}

/// Public spec-style entry point; see [`TrajectoryPath::eval_time`].
pub fn eval_trajectory(path: &TrajectoryPath, tau: f64, order: u8, duration: f64) -> DVector<f64> {
    path.eval_time(tau, order, duration)
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            found: b,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RMode {
    /// Only the diagonal entries vary.
    #[default]
    Diagonal,
    /// Independent series in every symmetric entry.
    Full,
    /// `R_i = L_i L_iᵀ` with lower-triangular `L_i`; non-negative coefficients keep `R` positive.
    TriangularFactor,
}

/// `R(τ) = R₀(τ) + Σ b_i R_i(τ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RMatrixPath {
    mode: RMode,
    base: Vec<ScalarBasis>,
    family: Vec<ScalarBasis>,
    coeffs: Vec<f64>,
    /// Constant off-diagonal part of `R₀`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    offset: Option<SymMatrix>,
}

impl RMatrixPath {
    /// Builds the path between `M0^{-1/4}` and `MT^{-1/4}` with `n` functions per
    /// degree of freedom. Boundary curvatures must be diagonal.
    pub fn new(m0: &SymMatrix, mt: &SymMatrix, mode: RMode, n: usize) -> Result<Self> {
        check_len(m0.nrows(), mt.nrows())?;
        for m in [m0, mt] {
            if !is_diagonal(m, 1e-14 * m.norm().max(1.0)) {
                return Err(Error::Unsupported(
                    "matrix path base requires diagonal boundary curvatures".into(),
                ));
            }
        }
        let r0 = inv_quartic_root(m0)?;
        let rt = inv_quartic_root(mt)?;
        let base = (0..m0.nrows())
            .map(|k| ScalarBasis::Quintic {
                start: r0[(k, k)],
                end: rt[(k, k)],
            })
            .collect();
        Self::from_parts(base, mode, n)
    }

    /// Path with explicit diagonal base functions.
    pub fn from_parts(base: Vec<ScalarBasis>, mode: RMode, n: usize) -> Result<Self> {
        for b in &base {
            b.validate()?;
        }
        let d = base.len();
        let family = match mode {
            RMode::Diagonal | RMode::Full => ScalarBasis::sine_family(n),
            RMode::TriangularFactor => {
                let mut fam = Vec::with_capacity(n * d * (d + 1) / 2);
                for i in 0..n as i64 {
                    for (e, (k, l)) in lower_entries(d).into_iter().enumerate() {
                        let w1 = i + 1 + e as i64;
                        fam.push(if k == l {
                            ScalarBasis::SineSquared { w1, w2: w1 + 1 }
                        } else {
                            ScalarBasis::Sine { w1, w2: w1 + 1 }
                        });
                    }
                }
                fam
            }
        };
        let count = match mode {
            RMode::Diagonal => d * n,
            RMode::Full => d * (d + 1) / 2 * n,
            RMode::TriangularFactor => n,
        };
        Ok(Self {
            mode,
            base,
            family,
            coeffs: vec![0.0; count],
            offset: None,
        })
    }

    /// Time-independent path `R(τ) ≡ r` without free coefficients.
    pub fn constant(r: &SymMatrix) -> Result<Self> {
        let margin = positivity_margin(r);
        if !(margin > 0.0) {
            return Err(Error::NonPositiveMatrix { min_eigenvalue: margin });
        }
        let d = r.nrows();
        let base = (0..d)
            .map(|k| ScalarBasis::Quintic {
                start: r[(k, k)],
                end: r[(k, k)],
            })
            .collect();
        let mut path = Self::from_parts(base, RMode::Full, 0)?;
        let mut off = r.clone();
        off.fill_diagonal(0.0);
        if off.iter().any(|&v| v != 0.0) {
            path.offset = Some(off);
        }
        Ok(path)
    }

    pub fn dim(&self) -> usize {
        self.base.len()
    }

    pub fn mode(&self) -> RMode {
        self.mode
    }

    /// Functions per degree of freedom.
    pub fn functions(&self) -> usize {
        match self.mode {
            RMode::Diagonal | RMode::Full => self.family.len(),
            RMode::TriangularFactor => self.coeffs.len(),
        }
    }

    pub fn num_coefficients(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn base(&self) -> &[ScalarBasis] {
        &self.base
    }

    pub fn set_coefficients(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.coeffs.len() {
            return Err(Error::Decode {
                expected: self.coeffs.len(),
                found: flat.len(),
            });
        }
        self.coeffs.copy_from_slice(flat);
        Ok(())
    }

    pub fn with_coefficients(mut self, flat: &[f64]) -> Result<Self> {
        self.set_coefficients(flat)?;
        Ok(self)
    }

    /// τ-derivative of order 0, 1 or 2; symmetric by construction.
    pub fn eval(&self, tau: f64, order: u8) -> SymMatrix {
        let d = self.dim();
        let mut r = DMatrix::from_diagonal(&DVector::from_iterator(
            d,
            self.base.iter().map(|b| b.value(tau, order)),
        ));
        if let (0, Some(off)) = (order, &self.offset) {
            r += off;
        }
        match self.mode {
            RMode::Diagonal => {
                let n = self.family.len();
                let fam: Vec<f64> = self.family.iter().map(|f| f.value(tau, order)).collect();
                for k in 0..d {
                    r[(k, k)] += dot(&self.coeffs[k * n..(k + 1) * n], &fam);
                }
            }
            RMode::Full => {
                let n = self.family.len();
                let fam: Vec<f64> = self.family.iter().map(|f| f.value(tau, order)).collect();
                for (e, (k, l)) in upper_entries(d).into_iter().enumerate() {
                    let v = dot(&self.coeffs[e * n..(e + 1) * n], &fam);
                    r[(k, l)] += v;
                    if k != l {
                        r[(l, k)] += v;
                    }
                }
            }
            RMode::TriangularFactor => {
                let entries = lower_entries(d);
                let per = entries.len();
                for (i, &b) in self.coeffs.iter().enumerate() {
                    if b == 0.0 {
                        continue;
                    }
                    let mut l = [DMatrix::zeros(d, d), DMatrix::zeros(d, d), DMatrix::zeros(d, d)];
                    for (e, &(row, col)) in entries.iter().enumerate() {
                        let jet = self.family[i * per + e].jet(tau);
                        for o in 0..3 {
                            l[o][(row, col)] = jet[o];
                        }
                    }
                    let term = match order {
                        0 => &l[0] * l[0].transpose(),
                        1 => &l[1] * l[0].transpose() + &l[0] * l[1].transpose(),
                        _ => {
                            &l[2] * l[0].transpose()
                                + (&l[1] * l[1].transpose()) * 2.0
                                + &l[0] * l[2].transpose()
                        }
                    };
                    r += term * b;
                }
            }
        }
        r
    }

    pub fn eval_time(&self, tau: f64, order: u8, duration: f64) -> SymMatrix {
        self.eval(tau, order) * time_scale(order, duration)
    }
}

pub fn eval_rpath(path: &RMatrixPath, tau: f64, order: u8, duration: f64) -> SymMatrix {
    path.eval_time(tau, order, duration)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Upper-triangle entries `(k, l)`, `k ≤ l`, row-major.
pub fn upper_entries(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|k| (k..d).map(move |l| (k, l))).collect()
}

/// Lower-triangle entries `(k, l)`, `k ≥ l`, row-major.
pub fn lower_entries(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|k| (0..=k).map(move |l| (k, l))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositivityReport {
    pub min_margin: f64,
    pub tau_at_min: f64,
    pub accepted: bool,
}

/// Minimum eigenvalue of `R(τ_k)` over `n` uniform samples of `[0, 1]`.
pub fn scan_positivity(path: &RMatrixPath, n: usize, floor: f64) -> PositivityReport {
    let n = n.max(2);
    let mut min_margin = f64::INFINITY;
    let mut tau_at_min = 0.0;
    for k in 0..n {
        let tau = k as f64 / (n - 1) as f64;
        let m = positivity_margin(&path.eval(tau, 0));
        if m < min_margin {
            min_margin = m;
            tau_at_min = tau;
        }
    }
    PositivityReport {
        min_margin,
        tau_at_min,
        accepted: min_margin > floor,
    }
}
