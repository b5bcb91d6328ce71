//! First- and second-moment dynamics of Gaussian states under quadratic
//! Hamiltonians (`ħ = 1`).
//!
//! Phase-space ordering is `(x₁..x_d, p₁..p_d)`. Covariances use the doubled
//! convention: the vacuum of a unit oscillator has covariance `I`, and pure
//! states have `det(cov) = 1`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::invariant::{fmt_f64, Protocol};
use crate::matops::{symmetrize, SpdEigen, SymMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: SymMatrix,
}

impl GaussianState {
    pub fn dim(&self) -> usize {
        self.mean.len() / 2
    }

    pub fn position_mean(&self) -> DVector<f64> {
        self.mean.rows(0, self.dim()).into_owned()
    }

    /// Physical standard deviation of position `k`: `sqrt(cov_kk / 2)`.
    pub fn sigma_x(&self, k: usize) -> f64 {
        (self.cov[(k, k)] / 2.0).sqrt()
    }

    pub fn purity_det(&self) -> f64 {
        self.cov.determinant()
    }

    /// Smallest eigenvalue of the Hermitian matrix `cov + iΩ`; `≥ 0` for physical states.
    pub fn uncertainty_margin(&self) -> f64 {
        let n = self.cov.nrows();
        let d = n / 2;
        let h = DMatrix::from_fn(n, n, |i, j| {
            let omega = if i < d && j == i + d {
                1.0
            } else if i >= d && j + d == i {
                -1.0
            } else {
                0.0
            };
            Complex64::new(self.cov[(i, j)], omega)
        });
        // real embedding [[Re, -Im], [Im, Re]] has the same spectrum, doubled
        let re = h.map(|z| z.re);
        let im = h.map(|z| z.im);
        let mut big = DMatrix::zeros(2 * n, 2 * n);
        big.view_mut((0, 0), (n, n)).copy_from(&re);
        big.view_mut((n, n), (n, n)).copy_from(&re);
        big.view_mut((0, n), (n, n)).copy_from(&(-&im));
        big.view_mut((n, 0), (n, n)).copy_from(&im);
        SymmetricEigen::new(symmetrize(&big))
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Ground state of `p²/2m + ½m(x−C)ᵀM(x−C)`.
pub fn ground_state(m: &SymMatrix, c: &DVector<f64>, mass: f64) -> Result<GaussianState> {
    let d = c.len();
    if m.nrows() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: m.nrows(),
        });
    }
    let eig = SpdEigen::new(m)?;
    let mut cov = DMatrix::zeros(2 * d, 2 * d);
    cov.view_mut((0, 0), (d, d)).copy_from(&(eig.pow(-0.5) / mass));
    cov.view_mut((d, d), (d, d)).copy_from(&(eig.pow(0.5) * mass));
    let mut mean = DVector::zeros(2 * d);
    mean.rows_mut(0, d).copy_from(c);
    Ok(GaussianState { mean, cov })
}

/// Time-sampled output of [`propagate`].
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<GaussianState>,
}

impl StateTrajectory {
    pub fn last(&self) -> &GaussianState {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn max_purity_drift(&self) -> f64 {
        self.states
            .iter()
            .map(|s| (s.purity_det() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_uncertainty_margin(&self) -> f64 {
        self.states
            .iter()
            .map(GaussianState::uncertainty_margin)
            .fold(f64::INFINITY, f64::min)
    }
}

struct Deriv {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn rhs(state_mean: &DVector<f64>, cov: &DMatrix<f64>, m: &SymMatrix, f: &DVector<f64>, mass: f64) -> Deriv {
    let d = m.nrows();
    let x = state_mean.rows(0, d);
    let p = state_mean.rows(d, d);
    let mut dmean = DVector::zeros(2 * d);
    dmean.rows_mut(0, d).copy_from(&(p / mass));
    dmean.rows_mut(d, d).copy_from(&(f - m * x * mass));
    let mut s = DMatrix::zeros(2 * d, 2 * d);
    s.view_mut((0, d), (d, d)).fill_with_identity();
    s.view_mut((0, d), (d, d)).scale_mut(1.0 / mass);
    s.view_mut((d, 0), (d, d)).copy_from(&(m * (-mass)));
    let sc = &s * cov;
    let dcov = &sc + sc.transpose();
    Deriv { mean: dmean, cov: dcov }
}

/// Integrates the moment equations with classic RK4 over `steps` uniform steps.
///
/// `M` and `F` are linearly interpolated between protocol samples; the
/// returned trajectory includes both `t = 0` and `t = T`.
pub fn propagate(state: &GaussianState, protocol: &Protocol, steps: usize) -> Result<StateTrajectory> {
    if steps + 1 < protocol.len() {
        return Err(Error::GridTooCoarse {
            steps,
            samples: protocol.len(),
        });
    }
    if state.dim() != protocol.dim() {
        return Err(Error::DimensionMismatch {
            expected: protocol.dim(),
            found: state.dim(),
        });
    }
    let mass = protocol.mass;
    let t0 = protocol.start_time();
    let h = protocol.duration / steps as f64;
    let mut mean = state.mean.clone();
    let mut cov = state.cov.clone();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(t0);
    states.push(state.clone());
    let (mut m_lo, mut f_lo) = protocol.interpolate(t0);
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let (m_mid, f_mid) = protocol.interpolate(t + 0.5 * h);
        let (m_hi, f_hi) = protocol.interpolate(t + h);
        let k1 = rhs(&mean, &cov, &m_lo, &f_lo, mass);
        let k2 = rhs(&(&mean + &k1.mean * (0.5 * h)), &(&cov + &k1.cov * (0.5 * h)), &m_mid, &f_mid, mass);
        let k3 = rhs(&(&mean + &k2.mean * (0.5 * h)), &(&cov + &k2.cov * (0.5 * h)), &m_mid, &f_mid, mass);
        let k4 = rhs(&(&mean + &k3.mean * h), &(&cov + &k3.cov * h), &m_hi, &f_hi, mass);
        mean += (k1.mean + k2.mean * 2.0 + k3.mean * 2.0 + k4.mean) * (h / 6.0);
        cov += (k1.cov + k2.cov * 2.0 + k3.cov * 2.0 + k4.cov) * (h / 6.0);
        cov = symmetrize(&cov);
        times.push(t + h);
        states.push(GaussianState {
            mean: mean.clone(),
            cov: cov.clone(),
        });
        m_lo = m_hi;
        f_lo = f_hi;
    }
    Ok(StateTrajectory { times, states })
}

/// `F = 2^d / sqrt(det(Σ₁+Σ₂)) · exp(−δᵀ(Σ₁+Σ₂)⁻¹δ)`.
///
/// Equals the squared overlap `|⟨ψ₁|ψ₂⟩|²` for pure states.
pub fn fidelity(s1: &GaussianState, s2: &GaussianState) -> Result<f64> {
    if s1.mean.len() != s2.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: s1.mean.len(),
            found: s2.mean.len(),
        });
    }
    let d = s1.dim() as i32;
    let sum = &s1.cov + &s2.cov;
    let det = sum.determinant();
    if !(det > 0.0) {
        return Err(Error::SingularSum);
    }
    let delta = &s1.mean - &s2.mean;
    let sol = sum.clone().cholesky().ok_or(Error::SingularSum)?.solve(&delta);
    Ok(2f64.powi(d) / det.sqrt() * (-delta.dot(&sol)).exp())
}

/// Excitation quanta relative to the ground state of the final trap.
#[derive(Debug, Clone, PartialEq)]
pub struct PhononReport {
    pub total: f64,
    pub per_mode: Vec<f64>,
    pub frequencies: Vec<f64>,
}

/// Mean phonon number in the normal modes of `m_final` centered at `c_final`.
pub fn phonon_number(
    state: &GaussianState,
    m_final: &SymMatrix,
    c_final: &DVector<f64>,
    mass: f64,
) -> Result<PhononReport> {
    let d = state.dim();
    if m_final.nrows() != d || c_final.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: m_final.nrows(),
        });
    }
    let eig = SpdEigen::new(m_final)?;
    let u = &eig.vectors;
    let mut rot = DMatrix::zeros(2 * d, 2 * d);
    rot.view_mut((0, 0), (d, d)).copy_from(&u.transpose());
    rot.view_mut((d, d), (d, d)).copy_from(&u.transpose());
    let mut shifted = state.mean.clone();
    for k in 0..d {
        shifted[k] -= c_final[k];
    }
    let mean = &rot * shifted;
    let cov = &rot * &state.cov * rot.transpose();
    let mut per_mode = Vec::with_capacity(d);
    let mut frequencies = Vec::with_capacity(d);
    for k in 0..d {
        let w = eig.values[k].sqrt();
        let x2 = cov[(k, k)] / 2.0 + mean[k] * mean[k];
        let p2 = cov[(k + d, k + d)] / 2.0 + mean[k + d] * mean[k + d];
        let energy = p2 / (2.0 * mass) + 0.5 * mass * w * w * x2;
        per_mode.push((energy - 0.5 * w) / w);
        frequencies.push(w);
    }
    Ok(PhononReport {
        total: per_mode.iter().sum(),
        per_mode,
        frequencies,
    })
}

/// State-trajectory CSV: `t, mean_*, cov upper triangle, sigma_x_*, fidelity_to_target`.
pub fn state_trajectory_csv(traj: &StateTrajectory, target: &GaussianState) -> Result<String> {
    let n = target.mean.len();
    let d = n / 2;
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|k| format!("mean_{k}")));
    for i in 0..n {
        for j in i..n {
            cols.push(format!("cov_{}_{}", i + 1, j + 1));
        }
    }
    cols.extend((1..=d).map(|k| format!("sigma_x_{k}")));
    cols.push("fidelity_to_target".into());
    let mut out = cols.join(",");
    out.push('\n');
    for (t, s) in traj.times.iter().zip(&traj.states) {
        let mut row = vec![fmt_f64(*t)];
        row.extend(s.mean.iter().map(|&v| fmt_f64(v)));
        for i in 0..n {
            for j in i..n {
                row.push(fmt_f64(s.cov[(i, j)]));
            }
        }
        row.extend((0..d).map(|k| fmt_f64(s.sigma_x(k))));
        row.push(fmt_f64(fidelity(s, target)?));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::invariant::ProtocolSample;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn static_protocol(m: SymMatrix, c: DVector<f64>, duration: f64, n: usize, mass: f64) -> Protocol {
        let f = &m * &c * mass;
        let samples = (0..n)
            .map(|k| ProtocolSample {
                t: duration * k as f64 / (n - 1) as f64,
                m: m.clone(),
                f: f.clone(),
                c: c.clone(),
                z: c.clone(),
            })
            .collect();
        Protocol::new(samples, mass).unwrap()
    }

    fn scalar(v: f64) -> SymMatrix {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn vacuum_and_textbook_width() {
        let g = ground_state(&DMatrix::identity(2, 2), &DVector::zeros(2), 1.0).unwrap();
        assert!((g.cov - DMatrix::identity(4, 4)).norm() < 1e-15);
        let (m, w) = (2.0, 3.0);
        let g = ground_state(&scalar(w * w), &dvector![0.0], m).unwrap();
        assert!((g.sigma_x(0).powi(2) - 1.0 / (2.0 * m * w)).abs() < 1e-15);
        assert!((g.cov[(0, 0)] - 1.0 / (m * w)).abs() < 1e-15);
    }

    #[test]
    fn ground_states_are_pure_and_saturate_uncertainty() {
        let m = dmatrix![2.0, 0.7, 0.1; 0.7, 5.0, -0.3; 0.1, -0.3, 1.0];
        let g = ground_state(&m, &dvector![1.0, 2.0, 3.0], 1.7).unwrap();
        assert!((g.purity_det() - 1.0).abs() < 1e-12);
        assert!(g.uncertainty_margin().abs() < 1e-10);
        assert!(ground_state(&dmatrix![1.0, 0.0; 0.0, -1.0], &DVector::zeros(2), 1.0).is_err());
    }

    #[test]
    fn fidelity_closed_forms() {
        let vac = ground_state(&scalar(1.0), &dvector![0.0], 1.0).unwrap();
        assert!((fidelity(&vac, &vac).unwrap() - 1.0).abs() < 1e-15);
        for dx in [0.1, 0.5, 1.3] {
            let moved = ground_state(&scalar(1.0), &dvector![dx], 1.0).unwrap();
            assert!((fidelity(&vac, &moved).unwrap() - (-dx * dx / 2.0f64).exp()).abs() < 1e-12);
        }
        let (w1, w2) = (0.7, 2.9);
        let a = ground_state(&scalar(w1 * w1), &dvector![0.0], 1.0).unwrap();
        let b = ground_state(&scalar(w2 * w2), &dvector![0.0], 1.0).unwrap();
        let expect = 2.0 * (w1 * w2).sqrt() / (w1 + w2);
        assert!((fidelity(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn fidelity_singular_sum() {
        let s = GaussianState {
            mean: DVector::zeros(2),
            cov: DMatrix::zeros(2, 2),
        };
        assert_eq!(fidelity(&s, &s).unwrap_err(), Error::SingularSum);
    }

    #[test]
    fn static_ground_state_is_stationary() {
        let m = dmatrix![2.0, 0.3; 0.3, 1.0];
        let c = dvector![0.5, -0.25];
        let p = static_protocol(m.clone(), c.clone(), 7.0, 200, 1.0);
        let g = ground_state(&m, &c, 1.0).unwrap();
        let tr = propagate(&g, &p, 400).unwrap();
        assert_eq!(tr.states.len(), 401);
        assert!((tr.times[400] - 7.0).abs() < 1e-12);
        for s in &tr.states {
            assert!((&s.mean - &g.mean).norm() < 1e-10);
            assert!((&s.cov - &g.cov).norm() < 1e-10);
        }
    }

    #[test]
    fn free_particle_drifts() {
        let p = static_protocol(DMatrix::zeros(1, 1), dvector![0.0], 3.0, 10, 2.0);
        let s = GaussianState {
            mean: dvector![1.0, 0.8],
            cov: DMatrix::identity(2, 2),
        };
        let tr = propagate(&s, &p, 30).unwrap();
        for (t, st) in tr.times.iter().zip(&tr.states) {
            assert!((st.mean[0] - (1.0 + 0.8 * t / 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn displaced_oscillator_returns_after_period() {
        let w = 1.7;
        let period = 2.0 * PI / w;
        let p = static_protocol(scalar(w * w), dvector![0.0], period, 2, 1.0);
        let mut s = ground_state(&scalar(w * w), &dvector![0.0], 1.0).unwrap();
        s.mean[0] = 0.3;
        let tr = propagate(&s, &p, 4000).unwrap();
        assert!((tr.last().mean[0] - 0.3).abs() < 1e-8);
        assert!(tr.last().mean[1].abs() < 1e-8);
    }

    #[test]
    fn too_coarse_grid() {
        let p = static_protocol(scalar(1.0), dvector![0.0], 1.0, 10, 1.0);
        let g = ground_state(&scalar(1.0), &dvector![0.0], 1.0).unwrap();
        assert!(matches!(propagate(&g, &p, 5), Err(Error::GridTooCoarse { .. })));
        assert!(propagate(&g, &p, 9).is_ok());
    }

    #[test]
    fn phonon_closed_forms() {
        let m = dmatrix![3.0, 0.5; 0.5, 2.0];
        let c = dvector![1.0, -1.0];
        let g = ground_state(&m, &c, 1.3).unwrap();
        assert!(phonon_number(&g, &m, &c, 1.3).unwrap().total.abs() < 1e-10);

        let (mass, w, dx) = (1.5, 2.0, 0.4);
        let mut s = ground_state(&scalar(w * w), &dvector![0.0], mass).unwrap();
        s.mean[0] = dx;
        let n = phonon_number(&s, &scalar(w * w), &dvector![0.0], mass).unwrap();
        assert!((n.total - mass * w * dx * dx / 2.0).abs() < 1e-12);

        let r: f64 = 0.6;
        let sq = GaussianState {
            mean: dvector![0.0, 0.0],
            cov: dmatrix![(-2.0 * r).exp() / (mass * w), 0.0; 0.0, mass * w * (2.0 * r).exp()],
        };
        let n = phonon_number(&sq, &scalar(w * w), &dvector![0.0], mass).unwrap();
        assert!((n.total - r.sinh().powi(2)).abs() < 1e-12);
    }

    #[test]
    fn rk4_halving_is_stable() {
        // breathing oscillator: frequency jump, compare 1000 vs 2000 steps
        let n = 201;
        let samples = (0..n)
            .map(|k| {
                let t = k as f64 / (n - 1) as f64 * 4.0;
                let w2 = 1.0 + 0.5 * (t * 1.3).sin().powi(2);
                ProtocolSample {
                    t,
                    m: scalar(w2),
                    f: dvector![0.2 * t],
                    c: dvector![0.2 * t / w2],
                    z: dvector![0.0],
                }
            })
            .collect();
        let p = Protocol::new(samples, 1.0).unwrap();
        let g = ground_state(&scalar(1.0), &dvector![0.0], 1.0).unwrap();
        let a = propagate(&g, &p, 1000).unwrap();
        let b = propagate(&g, &p, 2000).unwrap();
        let fa = fidelity(a.last(), &g).unwrap();
        let fb = fidelity(b.last(), &g).unwrap();
        assert!((fa - fb).abs() < 1e-8);
        assert!(b.max_purity_drift() < 1e-8);
        assert!(b.min_uncertainty_margin() > -1e-8);
    }

    proptest! {
        #[test]
        fn fidelity_symmetric_and_bounded(v in prop::collection::vec(-1.0f64..1.0, 12)) {
            let mk = |o: usize| {
                let g = DMatrix::from_fn(2, 2, |i, j| v[o + 2 * i + j]);
                &g * g.transpose() + DMatrix::identity(2, 2) * 0.2
            };
            let a = ground_state(&mk(0), &dvector![v[8], v[9]], 1.0).unwrap();
            let b = ground_state(&mk(4), &dvector![v[10], v[11]], 1.0).unwrap();
            let fab = fidelity(&a, &b).unwrap();
            let fba = fidelity(&b, &a).unwrap();
            prop_assert!((fab - fba).abs() < 1e-12);
            prop_assert!(fab <= 1.0 + 1e-12 && fab > 0.0);
            prop_assert!((fidelity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
