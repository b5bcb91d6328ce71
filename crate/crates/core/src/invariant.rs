//! Inverse engineering of the trap from the invariant parameters.
//!
//! Given `R` with its first two time derivatives, the curvature follows from
//! three linear solves taken in order: `J` from the anticommutator equation
//! with `R⁻²`, then the complex operator `A`, then `M` from the
//! anticommutator equation with `R²`. The force follows from the trajectory.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::basis::{scan_positivity, RMatrixPath, TrajectoryPath};
use crate::error::{Error, Result};
use crate::matops::{
    anticommutator, commutator, gen_commutator, inv_quartic_root, symmetrize, to_complex,
    ComplexMatrix, SpdEigen, SymMatrix,
};

/// Relative tolerance on the imaginary part of the curvature right-hand side.
pub const IMAG_TOL: f64 = 1e-9;
/// Default tolerance for the commutativity boundary conditions.
pub const BOUNDARY_TOL: f64 = 1e-8;
/// Default number of protocol samples.
pub const DEFAULT_GRID: usize = 2048;

/// Boundary data of a transport problem: trap centers and curvatures at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub c0: DVector<f64>,
    pub ct: DVector<f64>,
    pub m0: SymMatrix,
    pub mt: SymMatrix,
    /// Point the trajectory must pass through at `τ = 1/2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub midpoint: Option<DVector<f64>>,
}

impl BoundarySpec {
    pub fn new(c0: DVector<f64>, ct: DVector<f64>, m0: SymMatrix, mt: SymMatrix) -> Result<Self> {
        let d = c0.len();
        for n in [ct.len(), m0.nrows(), m0.ncols(), mt.nrows(), mt.ncols()] {
            if n != d {
                return Err(Error::DimensionMismatch { expected: d, found: n });
            }
        }
        SpdEigen::new(&m0)?;
        SpdEigen::new(&mt)?;
        Ok(Self {
            c0,
            ct,
            m0,
            mt,
            midpoint: None,
        })
    }

    pub fn with_midpoint(mut self, mid: DVector<f64>) -> Result<Self> {
        if mid.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: mid.len(),
            });
        }
        self.midpoint = Some(mid);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.c0.len()
    }
}

/// Solves `{J, R⁻²} = [Ṙ, R⁻¹] + [R, R⁻²]_Ṙ`.
///
/// The right-hand side is antisymmetric, and so is `J`.
pub fn compute_j(r: &SymMatrix, rdot: &SymMatrix) -> Result<DMatrix<f64>> {
    let eig = SpdEigen::new(r)?;
    Ok(j_from_eigen(&eig, r, rdot))
}

fn j_from_eigen(eig: &SpdEigen, r: &SymMatrix, rdot: &SymMatrix) -> DMatrix<f64> {
    let rinv = eig.pow(-1.0);
    let rinv2 = &rinv * &rinv;
    let rhs = commutator(rdot, &rinv) + r * rdot * &rinv2 - &rinv2 * rdot * r;
    eig.sylvester_with(|l| l.powi(-2), &rhs)
}

/// `A = iR⁻² + ½[R⁻¹, Ṙ] + ½R⁻¹JR⁻¹`.
pub fn compute_a(r: &SymMatrix, rdot: &SymMatrix, j: &DMatrix<f64>) -> Result<ComplexMatrix> {
    let eig = SpdEigen::new(r)?;
    Ok(a_from_eigen(&eig, rdot, j))
}

fn a_from_eigen(eig: &SpdEigen, rdot: &SymMatrix, j: &DMatrix<f64>) -> ComplexMatrix {
    let rinv = eig.pow(-1.0);
    let re = (commutator(&rinv, rdot) + &rinv * j * &rinv) * 0.5;
    let im = &rinv * &rinv;
    ComplexMatrix::from_fn(re.nrows(), re.ncols(), |i, k| {
        Complex64::new(re[(i, k)], im[(i, k)])
    })
}

/// Solves `{R², M} = 2[Ṙ, R]_A − {R̈, R} − 2RA²R` for real symmetric `M`.
pub fn compute_m(
    r: &SymMatrix,
    rdot: &SymMatrix,
    rddot: &SymMatrix,
    a: &ComplexMatrix,
) -> Result<SymMatrix> {
    let eig = SpdEigen::new(r)?;
    m_from_eigen(&eig, r, rdot, rddot, a)
}

fn m_from_eigen(
    eig: &SpdEigen,
    r: &SymMatrix,
    rdot: &SymMatrix,
    rddot: &SymMatrix,
    a: &ComplexMatrix,
) -> Result<SymMatrix> {
    let rc = to_complex(r);
    let two = Complex64::new(2.0, 0.0);
    let rhs = gen_commutator(rdot, r, a)? * two
        - to_complex(&anticommutator(rddot, r))
        - &rc * a * a * &rc * two;
    let re = rhs.map(|z| z.re);
    let im = rhs.map(|z| z.im);
    let relative = im.norm() / re.norm().max(1.0);
    if !(relative <= IMAG_TOL) {
        return Err(Error::ImaginaryResidual { relative });
    }
    Ok(symmetrize(&eig.sylvester_with(|l| l * l, &re)))
}

/// Curvature from `(R, Ṙ, R̈)` given in physical time.
pub fn curvature_from_jet(r: &SymMatrix, rdot: &SymMatrix, rddot: &SymMatrix) -> Result<SymMatrix> {
    let eig = SpdEigen::new(r)?;
    let j = j_from_eigen(&eig, r, rdot);
    let a = a_from_eigen(&eig, rdot, &j);
    m_from_eigen(&eig, r, rdot, rddot, &a)
}

/// `M(τ)` for the path, using analytic `Ṙ, R̈` scaled to physical time.
pub fn curvature_at(rpath: &RMatrixPath, tau: f64, duration: f64) -> Result<SymMatrix> {
    curvature_from_jet(
        &rpath.eval_time(tau, 0, duration),
        &rpath.eval_time(tau, 1, duration),
        &rpath.eval_time(tau, 2, duration),
    )
}

/// `F = m(z̈ + Mz)`.
pub fn force_from_traj(
    m: &SymMatrix,
    z: &DVector<f64>,
    zddot: &DVector<f64>,
    mass: f64,
) -> Result<DVector<f64>> {
    if m.nrows() != z.len() || zddot.len() != z.len() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            found: if zddot.len() != z.len() { zddot.len() } else { z.len() },
        });
    }
    Ok((zddot + m * z) * mass)
}

/// Trap center `C = M⁻¹F/m`, `None` when `M` is singular.
pub fn trap_center(m: &SymMatrix, force: &DVector<f64>, mass: f64) -> Option<DVector<f64>> {
    m.clone().lu().solve(force).map(|c| c / mass)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryViolation {
    pub condition: String,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundaryReport {
    pub violations: Vec<BoundaryViolation>,
}

impl BoundaryReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// Sum of squared deviations beyond tolerance.
    pub fn penalty(&self) -> f64 {
        self.violations.iter().map(|v| v.deviation * v.deviation).sum()
    }

    fn check(&mut self, condition: impl Into<String>, deviation: f64, tol: f64) {
        if !(deviation <= tol) {
            self.violations.push(BoundaryViolation {
                condition: condition.into(),
                deviation,
            });
        }
    }
}

/// Checks the commutativity conditions at both ends (and the optional midpoint).
pub fn check_boundary(
    traj: &TrajectoryPath,
    rpath: &RMatrixPath,
    spec: &BoundarySpec,
    duration: f64,
    tol: f64,
) -> BoundaryReport {
    let mut rep = BoundaryReport::default();
    if traj.dim() != spec.dim() || rpath.dim() != spec.dim() {
        rep.check("dimension", f64::INFINITY, tol);
        return rep;
    }
    let ends = [(0.0, "0", &spec.c0, &spec.m0), (1.0, "T", &spec.ct, &spec.mt)];
    for (tau, label, c, m) in ends {
        rep.check(format!("z({label}) = C({label})"), (traj.eval(tau, 0) - c).norm(), tol);
        rep.check(format!("dz/dt({label}) = 0"), traj.eval_time(tau, 1, duration).norm(), tol);
        rep.check(format!("d2z/dt2({label}) = 0"), traj.eval_time(tau, 2, duration).norm(), tol);
        match inv_quartic_root(m) {
            Ok(target) => rep.check(
                format!("R({label}) = M({label})^-1/4"),
                (rpath.eval(tau, 0) - target).norm(),
                tol,
            ),
            Err(_) => rep.check(format!("M({label}) positive"), f64::INFINITY, tol),
        }
        rep.check(format!("dR/dt({label}) = 0"), rpath.eval_time(tau, 1, duration).norm(), tol);
        rep.check(format!("d2R/dt2({label}) = 0"), rpath.eval_time(tau, 2, duration).norm(), tol);
    }
    if let Some(mid) = &spec.midpoint {
        rep.check("z(T/2) = midpoint", (traj.eval(0.5, 0) - mid).norm(), tol);
    }
    rep
}

/// One time slice of the control Hamiltonian.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSample {
    pub t: f64,
    pub m: SymMatrix,
    pub f: DVector<f64>,
    pub c: DVector<f64>,
    pub z: DVector<f64>,
}

/// Uniformly sampled `(M, F, C)` over `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub samples: Vec<ProtocolSample>,
    pub duration: f64,
    pub mass: f64,
}

impl Protocol {
    pub fn new(samples: Vec<ProtocolSample>, mass: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Parse("protocol needs at least two samples".into()));
        }
        let d = samples[0].z.len();
        for w in samples.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::Parse(format!(
                    "sample times must increase strictly ({} then {})",
                    w[0].t, w[1].t
                )));
            }
        }
        for s in &samples {
            if s.m.nrows() != d || s.f.len() != d || s.c.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: s.m.nrows(),
                });
            }
        }
        let duration = samples.last().unwrap().t - samples[0].t;
        Ok(Self {
            samples,
            duration,
            mass,
        })
    }

    pub fn dim(&self) -> usize {
        self.samples[0].z.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Largest |eigenvalue| of M/m over the samples, as an angular frequency.
    pub fn max_frequency(&self) -> f64 {
        self.samples
            .iter()
            .flat_map(|s| s.m.clone().symmetric_eigen().eigenvalues.iter().map(|v| v.abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
            .sqrt()
            / self.mass.sqrt()
    }

    pub fn start_time(&self) -> f64 {
        self.samples[0].t
    }

    /// Linear interpolation of `(M, F)` at time `t`, clamped to the sampled range.
    pub fn interpolate(&self, t: f64) -> (SymMatrix, DVector<f64>) {
        let n = self.samples.len();
        let t0 = self.samples[0].t;
        let uniform = self.duration / (n - 1) as f64;
        let mut k = (((t - t0) / uniform).floor().max(0.0) as usize).min(n - 2);
        // non-uniform grids from CSV input
        while k + 1 < n - 1 && self.samples[k + 1].t < t {
            k += 1;
        }
        while k > 0 && self.samples[k].t > t {
            k -= 1;
        }
        let (a, b) = (&self.samples[k], &self.samples[k + 1]);
        let w = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        (&a.m * (1.0 - w) + &b.m * w, &a.f * (1.0 - w) + &b.f * w)
    }

    /// Keeps samples with `t ≤ t_end`.
    pub fn truncated(&self, t_end: f64) -> Result<Self> {
        Protocol::new(
            self.samples.iter().filter(|s| s.t <= t_end).cloned().collect(),
            self.mass,
        )
    }
}

/// Uniform grid of `n` points over `[0, 1]`.
pub fn unit_grid(n: usize) -> impl Iterator<Item = f64> + Clone {
    let n = n.max(2);
    (0..n).map(move |k| k as f64 / (n - 1) as f64)
}

/// Samples the inverse-engineered Hamiltonian on `n` uniform points.
///
/// The paths are checked against `spec` first; failures abort the build.
pub fn build_protocol(
    traj: &TrajectoryPath,
    rpath: &RMatrixPath,
    spec: &BoundarySpec,
    duration: f64,
    n: usize,
    mass: f64,
) -> Result<Protocol> {
    let report = check_boundary(traj, rpath, spec, duration, BOUNDARY_TOL);
    if !report.passed() {
        let first = &report.violations[0];
        return Err(Error::BoundaryViolation(format!(
            "{} (deviation {:e})",
            first.condition, first.deviation
        )));
    }
    let pos = scan_positivity(rpath, n, 0.0);
    if !pos.accepted {
        return Err(Error::PositivityViolation {
            tau: pos.tau_at_min,
            margin: pos.min_margin,
        });
    }
    sample_protocol(traj, rpath, duration, n, mass)
}

/// Samples without boundary or positivity pre-checks.
pub fn sample_protocol(
    traj: &TrajectoryPath,
    rpath: &RMatrixPath,
    duration: f64,
    n: usize,
    mass: f64,
) -> Result<Protocol> {
    let samples = unit_grid(n)
        .map(|tau| {
            let m = curvature_at(rpath, tau, duration)?;
            let z = traj.eval(tau, 0);
            let zdd = traj.eval_time(tau, 2, duration);
            let f = force_from_traj(&m, &z, &zdd, mass)?;
            let c = trap_center(&m, &f, mass)
                .unwrap_or_else(|| DVector::from_element(z.len(), f64::NAN));
            Ok(ProtocolSample {
                t: tau * duration,
                m,
                f,
                c,
                z,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Protocol::new(samples, mass)
}

/// Header for the protocol CSV: `t, M_ij (upper triangle), F_k, C_k, z_k`.
pub fn protocol_csv_header(d: usize) -> String {
    let mut cols = vec!["t".to_string()];
    for i in 0..d {
        for j in i..d {
            cols.push(format!("M_{}{}", i + 1, j + 1));
        }
    }
    for prefix in ["F", "C", "z"] {
        cols.extend((1..=d).map(|k| format!("{prefix}_{k}")));
    }
    cols.join(",")
}

/// Full-precision (17 significant digits) CSV rendering.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn protocol_to_csv(p: &Protocol) -> String {
    let d = p.dim();
    let mut out = protocol_csv_header(d);
    out.push('\n');
    for s in &p.samples {
        let mut row = vec![fmt_f64(s.t)];
        for i in 0..d {
            for j in i..d {
                row.push(fmt_f64(s.m[(i, j)]));
            }
        }
        row.extend(s.f.iter().map(|&v| fmt_f64(v)));
        row.extend(s.c.iter().map(|&v| fmt_f64(v)));
        row.extend(s.z.iter().map(|&v| fmt_f64(v)));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parses a protocol written by [`protocol_to_csv`]. The mass is not stored in the file.
pub fn protocol_from_csv(text: &str, mass: f64) -> Result<Protocol> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty protocol file".into()))?;
    let ncols = header.split(',').count();
    // 1 + d(d+1)/2 + 3d columns
    let d = (1..=16)
        .find(|&d| 1 + d * (d + 1) / 2 + 3 * d == ncols)
        .ok_or_else(|| Error::Parse(format!("cannot infer dimension from {ncols} columns")))?;
    if header.split(',').map(str::trim).collect::<Vec<_>>().join(",") != protocol_csv_header(d) {
        return Err(Error::Parse(format!("unexpected header `{header}`")));
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 2)))
            })
            .collect::<Result<_>>()?;
        if vals.len() != ncols {
            return Err(Error::Parse(format!(
                "row {} has {} columns, expected {ncols}",
                lineno + 2,
                vals.len()
            )));
        }
        let mut m = DMatrix::zeros(d, d);
        let mut idx = 1;
        for i in 0..d {
            for j in i..d {
                m[(i, j)] = vals[idx];
                m[(j, i)] = vals[idx];
                idx += 1;
            }
        }
        let take = |start: usize| DVector::from_row_slice(&vals[start..start + d]);
        samples.push(ProtocolSample {
            t: vals[0],
            m,
            f: take(idx),
            c: take(idx + d),
            z: take(idx + 2 * d),
        });
    }
    Protocol::new(samples, mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{RMode, ScalarBasis};
    use crate::matops::spd_power;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn scalar(v: f64) -> SymMatrix {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn j_vanishes_for_commuting_inputs() {
        let r = dmatrix![1.0, 0.0; 0.0, 2.0];
        let rd = dmatrix![0.3, 0.0; 0.0, -0.7];
        assert!(compute_j(&r, &rd).unwrap().norm() < 1e-15);
        let r = dmatrix![1.0, 0.4; 0.4, 2.0];
        assert!(compute_j(&r, &DMatrix::zeros(2, 2)).unwrap().norm() < 1e-15);
    }

    #[test]
    fn j_satisfies_its_equation() {
        let r = dmatrix![1.2, 0.3; 0.3, 0.8];
        let rd = dmatrix![0.1, -0.5; -0.5, 0.4];
        let j = compute_j(&r, &rd).unwrap();
        let rinv = r.clone().try_inverse().unwrap();
        let rinv2 = &rinv * &rinv;
        let rhs = commutator(&rd, &rinv) + &r * &rd * &rinv2 - &rinv2 * &rd * &r;
        assert!((anticommutator(&j, &rinv2) - rhs).norm() < 1e-10);
        assert!((&j + j.transpose()).norm() < 1e-12, "J is antisymmetric");
    }

    #[test]
    fn a_structure() {
        let id = DMatrix::identity(2, 2);
        let a = compute_a(&id, &DMatrix::zeros(2, 2), &DMatrix::zeros(2, 2)).unwrap();
        assert!((a - to_complex(&id) * Complex64::i()).norm() < 1e-15);

        let r = dmatrix![2.0, 0.0; 0.0, 0.5];
        let rd = dmatrix![0.3, 0.0; 0.0, 0.1];
        let a = compute_a(&r, &rd, &DMatrix::zeros(2, 2)).unwrap();
        assert!(a.map(|z| z.re).norm() < 1e-15);

        let r = dmatrix![1.2, 0.3; 0.3, 0.8];
        let rd = dmatrix![0.1, -0.5; -0.5, 0.4];
        let j = compute_j(&r, &rd).unwrap();
        let a = compute_a(&r, &rd, &j).unwrap();
        let rinv2 = r.clone().try_inverse().unwrap().pow(2);
        assert!((a.map(|z| z.im) - rinv2).norm() < 1e-13);
    }

    #[test]
    fn constant_r_gives_inverse_fourth_power() {
        let r = dmatrix![1.1, 0.2, 0.0; 0.2, 0.7, -0.1; 0.0, -0.1, 0.9];
        let z = DMatrix::zeros(3, 3);
        let m = curvature_from_jet(&r, &z, &z).unwrap();
        let expect = spd_power(&r, -4.0).unwrap();
        assert!((m - expect).norm() < 1e-10);
    }

    #[test]
    fn scalar_chain_is_ermakov() {
        let (b, bd, bdd) = (0.8, 0.37, -1.3);
        let m = curvature_from_jet(&scalar(b), &scalar(bd), &scalar(bdd)).unwrap();
        assert!((m[(0, 0)] - (-bdd / b + b.powi(-4))).abs() < 1e-13);
    }

    #[test]
    fn inconsistent_a_trips_imaginary_check() {
        let r = dmatrix![1.0, 0.2; 0.2, 1.5];
        let rd = dmatrix![0.0, 1.0; 1.0, 0.0];
        let eig = SpdEigen::new(&r).unwrap();
        // A built without J does not cancel
        let a = a_from_eigen(&eig, &rd, &DMatrix::zeros(2, 2));
        let err = compute_m(&r, &rd, &DMatrix::zeros(2, 2), &a).unwrap_err();
        assert!(matches!(err, Error::ImaginaryResidual { .. }));
    }

    #[test]
    fn curvature_along_1d_quintic_matches_ermakov() {
        let w0: f64 = 1.3;
        let path = RMatrixPath::from_parts(
            vec![ScalarBasis::Quintic {
                start: w0.powf(-0.5),
                end: (2.0 * w0).powf(-0.5),
            }],
            RMode::Diagonal,
            0,
        )
        .unwrap();
        let t = 2.5;
        for tau in unit_grid(33) {
            let b = path.eval(tau, 0)[(0, 0)];
            let bdd = path.eval_time(tau, 2, t)[(0, 0)];
            let m = curvature_at(&path, tau, t).unwrap()[(0, 0)];
            assert!((m - (-bdd / b + b.powi(-4))).abs() < 1e-10);
        }
        assert!((curvature_at(&path, 0.0, t).unwrap()[(0, 0)] - w0 * w0).abs() < 1e-12);
        assert!((curvature_at(&path, 1.0, t).unwrap()[(0, 0)] - 4.0 * w0 * w0).abs() < 1e-9);
    }

    #[test]
    fn generic_3d_sample_cancels_imaginary_part() {
        let m0 = dmatrix![1.0, 0.0, 0.0; 0.0, 25.0, 0.0; 0.0, 0.0, 25.0];
        let mt = dmatrix![25.0, 0.0, 0.0; 0.0, 1.0, 0.0; 0.0, 0.0, 25.0];
        let p = RMatrixPath::new(&m0, &mt, RMode::Full, 3).unwrap();
        let c: Vec<f64> = (0..18).map(|i| 0.02 * ((i as f64) * 1.7).sin()).collect();
        let p = p.with_coefficients(&c).unwrap();
        for tau in unit_grid(50) {
            let m = curvature_at(&p, tau, 10.0).unwrap();
            assert!((&m - m.transpose()).norm() < 1e-12);
        }
    }

    #[test]
    fn force_and_center() {
        let m = dmatrix![2.0, 0.5; 0.5, 3.0];
        let z = dvector![0.3, -1.0];
        let f = force_from_traj(&m, &z, &DVector::zeros(2), 1.5).unwrap();
        assert!((trap_center(&m, &f, 1.5).unwrap() - &z).norm() < 1e-14);
        let zdd = dvector![0.7, 0.2];
        let f = force_from_traj(&m, &DVector::zeros(2), &zdd, 2.0).unwrap();
        assert!((f - &zdd * 2.0).norm() < 1e-15);
        let f = force_from_traj(&m, &z, &zdd, 1.0).unwrap();
        let expect = &z + m.clone().try_inverse().unwrap() * &zdd;
        assert!((trap_center(&m, &f, 1.0).unwrap() - expect).norm() < 1e-14);
        assert!(force_from_traj(&m, &dvector![1.0], &zdd, 1.0).is_err());
    }

    fn corner_like() -> (BoundarySpec, TrajectoryPath, RMatrixPath) {
        let m0 = dmatrix![1.0, 0.0; 0.0, 4.0];
        let mt = dmatrix![4.0, 0.0; 0.0, 1.0];
        let spec = BoundarySpec::new(dvector![0.0, 1.0], dvector![1.0, 0.0], m0.clone(), mt.clone()).unwrap();
        let traj = TrajectoryPath::transport(&spec.c0, &spec.ct, 2).unwrap();
        let r = RMatrixPath::new(&m0, &mt, RMode::Diagonal, 2).unwrap();
        (spec, traj, r)
    }

    #[test]
    fn boundary_report_passes_and_flags() {
        let (spec, traj, r) = corner_like();
        assert!(check_boundary(&traj, &r, &spec, 5.0, BOUNDARY_TOL).passed());

        // trajectory that starts away from the initial trap center
        let shifted = TrajectoryPath::transport(&dvector![0.1, 1.0], &spec.ct, 2).unwrap();
        let rep = check_boundary(&shifted, &r, &spec, 5.0, BOUNDARY_TOL);
        assert_eq!(rep.violations.len(), 1);
        assert_eq!(rep.violations[0].condition, "z(0) = C(0)");
        assert!((rep.violations[0].deviation - 0.1).abs() < 1e-15);

        let off = RMatrixPath::from_parts(
            vec![
                ScalarBasis::Quintic { start: 1.0 + 1e-3, end: 0.5f64.sqrt() },
                ScalarBasis::Quintic { start: 0.5f64.sqrt(), end: 1.0 },
            ],
            RMode::Diagonal,
            0,
        )
        .unwrap();
        let rep = check_boundary(&traj, &off, &spec, 5.0, BOUNDARY_TOL);
        assert_eq!(rep.violations.len(), 1);
        assert_eq!(rep.violations[0].condition, "R(0) = M(0)^-1/4");
        assert!(matches!(
            build_protocol(&traj, &off, &spec, 5.0, 64, 1.0),
            Err(Error::BoundaryViolation(_))
        ));
    }

    #[test]
    fn static_protocol_is_constant() {
        let m0 = dmatrix![2.0, 0.0; 0.0, 3.0];
        let c = dvector![0.4, -0.2];
        let spec = BoundarySpec::new(c.clone(), c.clone(), m0.clone(), m0.clone()).unwrap();
        let traj = TrajectoryPath::transport(&c, &c, 3).unwrap();
        let r = RMatrixPath::new(&m0, &m0, RMode::Full, 3).unwrap();
        let p = build_protocol(&traj, &r, &spec, 4.0, 65, 1.3).unwrap();
        for s in &p.samples {
            assert!((&s.m - &m0).norm() < 1e-12);
            assert!((&s.f - &m0 * &c * 1.3).norm() < 1e-12);
            assert!((&s.c - &c).norm() < 1e-12);
        }
    }

    #[test]
    fn transport_1d_constant_frequency() {
        let w = 2.0;
        let m0 = scalar(w * w);
        let spec = BoundarySpec::new(dvector![0.0], dvector![3.0], m0.clone(), m0.clone()).unwrap();
        let traj = TrajectoryPath::transport(&spec.c0, &spec.ct, 0).unwrap();
        let r = RMatrixPath::new(&m0, &m0, RMode::Diagonal, 0).unwrap();
        let t = 1.5;
        let p = build_protocol(&traj, &r, &spec, t, 101, 1.0).unwrap();
        for s in &p.samples {
            let tau = s.t / t;
            let z = 3.0 * (10.0 * tau.powi(3) - 15.0 * tau.powi(4) + 6.0 * tau.powi(5));
            let zdd = 3.0 * (60.0 * tau - 180.0 * tau.powi(2) + 120.0 * tau.powi(3)) / (t * t);
            assert!((s.m[(0, 0)] - w * w).abs() < 1e-12);
            assert!((s.f[0] - (zdd + w * w * z)).abs() < 1e-10);
        }
    }

    #[test]
    fn csv_round_trip() {
        let (spec, traj, r) = corner_like();
        let p = build_protocol(&traj, &r, &spec, 5.0, 17, 1.0).unwrap();
        let text = protocol_to_csv(&p);
        assert!(text.starts_with("t,M_11,M_12,M_22,F_1,F_2,C_1,C_2,z_1,z_2\n"));
        let back = protocol_from_csv(&text, 1.0).unwrap();
        assert_eq!(back, p);
        assert!(protocol_from_csv("t,x\n1,2\n", 1.0).is_err());
        assert!(protocol_from_csv("", 1.0).is_err());
    }

    #[test]
    fn interpolation_hits_samples_and_midpoints() {
        let (spec, traj, r) = corner_like();
        let p = build_protocol(&traj, &r, &spec, 5.0, 11, 1.0).unwrap();
        for s in &p.samples {
            let (m, f) = p.interpolate(s.t);
            assert!((m - &s.m).norm() < 1e-12);
            assert!((f - &s.f).norm() < 1e-12);
        }
        let (a, b) = (&p.samples[3], &p.samples[4]);
        let (m, _) = p.interpolate(0.5 * (a.t + b.t));
        assert!((m - (&a.m + &b.m) * 0.5).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn constant_path_round_trip(v in prop::collection::vec(-1.0f64..1.0, 9), d in 2usize..4) {
            let g = DMatrix::from_fn(d, d, |i, j| v[i * 3 + j]);
            let m0 = &g * g.transpose() + DMatrix::identity(d, d) * 0.3;
            let r = inv_quartic_root(&m0).unwrap();
            let z = DMatrix::zeros(d, d);
            let m = curvature_from_jet(&r, &z, &z).unwrap();
            prop_assert!((m - &m0).norm() < 1e-9 * m0.norm().max(1.0));
        }
    }
}
