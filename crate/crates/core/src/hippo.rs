//! HiPPO state/input operators for the LegS, LagT and FouT bases, their
//! diagonal-plus-low-rank (DPLR) split, and reconstruction of the input
//! history from a coefficient state.
//!
//! All three operators are used in their time-invariant form
//! `h'(t) = A h(t) + B x(t)`:
//!
//! * LegS: Legendre polynomials under the exponentially warped measure
//!   `e^{-τ}` on lags `τ ≥ 0`; the basis functions are
//!   `√(2n+1) P_n(2e^{-τ} - 1)`.
//! * LagT: Laguerre functions `L_n(τ) e^{-τ/2}` on lags `τ ≥ 0`.
//! * FouT: the sliding unit window `[t-1, t]` with interleaved
//!   `(sin, cos)` pairs of frequencies `0..N/2`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Relative Frobenius tolerance for the DPLR reconstruction.
pub const DPLR_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    #[serde(rename = "legs")]
    LegS,
    #[serde(rename = "lagt")]
    LagT,
    #[serde(rename = "fout")]
    FouT,
}

impl Basis {
    pub const ALL: [Basis; 3] = [Basis::LegS, Basis::LagT, Basis::FouT];

    pub fn name(self) -> &'static str {
        match self {
            Basis::LegS => "legs",
            Basis::LagT => "lagt",
            Basis::FouT => "fout",
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Basis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "legs" => Ok(Basis::LegS),
            "lagt" => Ok(Basis::LagT),
            "fout" => Ok(Basis::FouT),
            other => Err(config(format!("unknown basis '{other}' (expected legs, lagt or fout)"))),
        }
    }
}

/// Real `(A, B)` pair of the coefficient ODE for one basis and order.
#[derive(Clone, Debug)]
pub struct HippoOperator {
    pub basis: Basis,
    pub order: usize,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Closed-form HiPPO matrices.
pub fn build_operator(basis: Basis, order: usize) -> Result<HippoOperator> {
    if order == 0 {
        return Err(config("operator order must be at least 1"));
    }
    let n = order;
    let (a, b) = match basis {
        Basis::LegS => {
            let r = |k: usize| ((2 * k + 1) as f64).sqrt();
            let a = DMatrix::from_fn(n, n, |i, j| {
                if i > j {
                    -r(i) * r(j)
                } else if i == j {
                    -((i + 1) as f64)
                } else {
                    0.0
                }
            });
            (a, DVector::from_fn(n, |i, _| r(i)))
        }
        Basis::LagT => {
            let a = DMatrix::from_fn(n, n, |i, j| {
                if i > j {
                    -1.0
                } else if i == j {
                    -0.5
                } else {
                    0.0
                }
            });
            (a, DVector::from_element(n, 1.0))
        }
        Basis::FouT => {
            if n % 2 != 0 {
                return Err(config(format!("FouT order must be even (sine/cosine pairs), got {n}")));
            }
            let e = fourier_endpoint(n);
            let mut a = -&e * e.transpose();
            for k in 1..n / 2 {
                let w = 2.0 * std::f64::consts::PI * k as f64;
                let (s, c) = (2 * k, 2 * k + 1);
                a[(c, s)] += w;
                a[(s, c)] -= w;
            }
            (a, e)
        }
    };
    Ok(HippoOperator { basis, order, a, b })
}

/// Values of the FouT basis functions at the window endpoint.
fn fourier_endpoint(n: usize) -> DVector<f64> {
    DVector::from_fn(n, |i, _| match (i % 2, i / 2) {
        (0, _) => 0.0,
        (_, 0) => 1.0,
        _ => std::f64::consts::SQRT_2,
    })
}

/// Rank-one factor `P` such that `A + P Pᵀ` is normal.
pub fn low_rank_factor(basis: Basis, order: usize) -> DVector<f64> {
    match basis {
        Basis::LegS => DVector::from_fn(order, |i, _| (i as f64 + 0.5).sqrt()),
        Basis::LagT => DVector::from_element(order, 0.5f64.sqrt()),
        Basis::FouT => fourier_endpoint(order),
    }
}

/// `A = V (diag(Λ) − P P*) V*` with `V` unitary.
///
/// `p` and `b` are expressed in the eigenbasis of the normal part.
#[derive(Clone, Debug)]
pub struct DplrForm {
    pub lambda: DVector<Complex64>,
    pub p: DVector<Complex64>,
    pub b: DVector<Complex64>,
    pub c_basis_change: DMatrix<Complex64>,
}

impl DplrForm {
    pub fn order(&self) -> usize {
        self.lambda.len()
    }

    /// `diag(Λ) − P P*` in eigen-coordinates.
    pub fn eigen_operator(&self) -> DMatrix<Complex64> {
        let mut m = -&self.p * self.p.adjoint();
        for (i, l) in self.lambda.iter().enumerate() {
            m[(i, i)] += l;
        }
        m
    }

    /// Dense operator mapped back to the original coordinates.
    pub fn reconstruct(&self) -> DMatrix<Complex64> {
        let v = &self.c_basis_change;
        v * self.eigen_operator() * v.adjoint()
    }
}

fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

fn rel_frobenius(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
    let scale = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / scale
}

/// Split a HiPPO operator into normal-plus-rank-one form and diagonalize the
/// normal part in a unitary basis.
pub fn dplr_decompose(op: &HippoOperator) -> Result<DplrForm> {
    let n = op.order;
    let p_real = low_rank_factor(op.basis, n);
    let normal = &op.a + &p_real * p_real.transpose();

    let commutator = &normal * normal.transpose() - normal.transpose() * &normal;
    let normality = commutator.norm() / normal.norm_squared().max(f64::MIN_POSITIVE);
    if normality > 1e-10 {
        return Err(Error::Numerical {
            what: format!("{} N={n}: A + PPᵀ is not normal", op.basis),
            residual: normality,
        });
    }

    // The skew part carries the spectrum's imaginary axis; i·S is Hermitian.
    let skew = (&normal - normal.transpose()) * 0.5;
    let herm = skew.map(|x| Complex64::new(0.0, x));
    let eig = nalgebra::SymmetricEigen::new(herm);
    let v = eig.eigenvectors;

    let normal_c = to_complex(&normal);
    let lambda = DVector::from_fn(n, |k, _| {
        let col = v.column(k);
        (col.adjoint() * &normal_c * col)[(0, 0)]
    });

    let p_c = p_real.map(|x| Complex64::new(x, 0.0));
    let b_c = op.b.map(|x| Complex64::new(x, 0.0));
    let form = DplrForm {
        lambda,
        p: v.adjoint() * p_c,
        b: v.adjoint() * b_c,
        c_basis_change: v,
    };

    let residual = rel_frobenius(&form.reconstruct(), &to_complex(&op.a));
    if !(residual <= DPLR_TOLERANCE) {
        return Err(Error::Numerical {
            what: format!("{} N={n}: DPLR reconstruction", op.basis),
            residual,
        });
    }
    Ok(form)
}

/// Coefficient vector of one channel after `time_index` steps of size `dt`.
#[derive(Clone, Debug)]
pub struct CoefficientState {
    pub h: DVector<Complex64>,
    pub time_index: usize,
    pub dt: f64,
}

impl CoefficientState {
    pub fn zeros(order: usize, dt: f64) -> Self {
        Self {
            h: DVector::zeros(order),
            time_index: 0,
            dt,
        }
    }

    pub fn time(&self) -> f64 {
        self.time_index as f64 * self.dt
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Legendre polynomials `P_0..P_{n-1}` at `x` by the three-term recurrence.
pub fn legendre(n: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let (mut prev, mut cur) = (0.0, 1.0);
    for k in 0..n {
        out.push(cur);
        let next = ((2 * k + 1) as f64 * x * cur - k as f64 * prev) / (k + 1) as f64;
        prev = cur;
        cur = next;
    }
    out
}

/// Laguerre polynomials `L_0..L_{n-1}` at `x`.
pub fn laguerre(n: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let (mut prev, mut cur) = (0.0, 1.0);
    for k in 0..n {
        out.push(cur);
        let next = ((2 * k + 1) as f64 - x) * cur - k as f64 * prev;
        let next = next / (k + 1) as f64;
        prev = cur;
        cur = next;
    }
    out
}

/// Reconstruction functions of the basis at lag `tau` (time before the
/// current instant): `x(t - τ) ≈ Σ h_n ψ_n(τ)`.
pub fn basis_functions(basis: Basis, order: usize, tau: f64) -> Result<Vec<f64>> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("lag {tau} lies in the future")));
    }
    match basis {
        Basis::LegS => {
            let z = (-tau).exp();
            Ok(legendre(order, 2.0 * z - 1.0)
                .into_iter()
                .enumerate()
                .map(|(n, p)| ((2 * n + 1) as f64).sqrt() * p)
                .collect())
        }
        Basis::LagT => {
            let w = (-0.5 * tau).exp();
            Ok(laguerre(order, tau).into_iter().map(|l| l * w).collect())
        }
        Basis::FouT => {
            if tau > 1.0 {
                return Err(Error::Domain(format!("lag {tau} outside the unit FouT window")));
            }
            if order % 2 != 0 {
                return Err(config("FouT order must be even"));
            }
            let u = 1.0 - tau;
            let mut out = Vec::with_capacity(order);
            for k in 0..order / 2 {
                let w = 2.0 * std::f64::consts::PI * k as f64 * u;
                let amp = std::f64::consts::SQRT_2;
                out.push(amp * w.sin());
                out.push(if k == 0 { 1.0 } else { amp * w.cos() });
            }
            Ok(out)
        }
    }
}

/// Measure weight under which the reconstruction functions are orthonormal.
pub fn measure_weight(basis: Basis, tau: f64) -> f64 {
    match basis {
        Basis::LegS => (-tau).exp(),
        Basis::LagT => 1.0,
        Basis::FouT => {
            if (0.0..=1.0).contains(&tau) {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Evaluate `Σ h_n ψ_n(t − s)` at absolute times `s` (real part of the state).
pub fn reconstruct_signal(state: &CoefficientState, basis: Basis, t: f64, sample_points: &[f64]) -> Result<Vec<f64>> {
    let order = state.h.len();
    sample_points
        .iter()
        .map(|&s| {
            let psi = basis_functions(basis, order, t - s)?;
            Ok(psi.iter().zip(state.h.iter()).map(|(p, h)| p * h.re).sum())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn max_real_eig(a: &DMatrix<f64>) -> f64 {
        a.complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn legs_order_two_closed_form() {
        let op = build_operator(Basis::LegS, 2).unwrap();
        let s3 = 3f64.sqrt();
        assert_relative_eq!(op.a, DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -s3, -2.0]));
        assert_relative_eq!(op.b, DVector::from_vec(vec![1.0, s3]));
    }

    #[test]
    fn legs_order_one() {
        let op = build_operator(Basis::LegS, 1).unwrap();
        assert_eq!(op.a[(0, 0)], -1.0);
        assert_eq!(op.b[0], 1.0);
    }

    #[test]
    fn invalid_orders_rejected() {
        assert!(matches!(build_operator(Basis::LegS, 0), Err(Error::Config(_))));
        assert!(matches!(build_operator(Basis::FouT, 3), Err(Error::Config(_))));
        assert!(matches!(build_operator(Basis::FouT, 1), Err(Error::Config(_))));
        assert!(build_operator(Basis::LagT, 1).is_ok());
    }

    #[test]
    fn spectra_are_stable() {
        for basis in Basis::ALL {
            for n in [2, 4, 8, 64] {
                let op = build_operator(basis, n).unwrap();
                assert!(max_real_eig(&op.a) <= 1e-9, "{basis} N={n}");
                assert!(op.b.norm() > 0.0);
            }
        }
    }

    #[test]
    fn legs_two_dplr_matches_hand_values() {
        let op = build_operator(Basis::LegS, 2).unwrap();
        let p = low_rank_factor(Basis::LegS, 2);
        assert_relative_eq!(p[0], 0.7071068, epsilon = 1e-7);
        assert_relative_eq!(p[1], 1.2247449, epsilon = 1e-7);
        let normal = &op.a + &p * p.transpose();
        let h = 0.8660254;
        assert_relative_eq!(
            normal,
            DMatrix::from_row_slice(2, 2, &[-0.5, h, -h, -0.5]),
            epsilon = 1e-7
        );
        let form = dplr_decompose(&op).unwrap();
        let mut eigs: Vec<_> = form.lambda.iter().copied().collect();
        eigs.sort_by(|a, b| a.im.partial_cmp(&b.im).unwrap());
        assert_relative_eq!(eigs[0].re, -0.5, epsilon = 1e-12);
        assert_relative_eq!(eigs[0].im, -h, epsilon = 1e-7);
        assert_relative_eq!(eigs[1].im, h, epsilon = 1e-7);
    }

    #[test]
    fn dplr_reconstruction_and_stability() {
        for basis in Basis::ALL {
            for n in [2, 8, 32, 64] {
                let op = build_operator(basis, n).unwrap();
                let form = dplr_decompose(&op).unwrap();
                let err = rel_frobenius(&form.reconstruct(), &to_complex(&op.a));
                assert!(err < 1e-8, "{basis} N={n}: {err}");
                assert!(form.lambda.iter().all(|l| l.re <= 1e-12));
                let v = &form.c_basis_change;
                let unitary = (v.adjoint() * v - DMatrix::identity(n, n)).norm();
                assert!(unitary < 1e-10);
            }
        }
    }

    #[test]
    fn reconstruction_of_zero_state_is_zero() {
        let state = CoefficientState::zeros(8, 1e-3);
        let out = reconstruct_signal(&state, Basis::LegS, 1.0, &[0.0, 0.5, 1.0]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruction_outside_support_is_a_domain_error() {
        let state = CoefficientState::zeros(4, 1e-3);
        assert!(matches!(
            reconstruct_signal(&state, Basis::LegS, 1.0, &[1.5]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            reconstruct_signal(&state, Basis::FouT, 3.0, &[1.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn basis_parses_case_insensitively() {
        assert_eq!("LegS".parse::<Basis>().unwrap(), Basis::LegS);
        assert!("legt".parse::<Basis>().is_err());
    }

    /// Projection of the input history checked against direct quadrature.
    mod projection {
        use super::*;
        use crate::discretize::bilinear;

        /// Composite Simpson rule on `[0, t]` with an even number of panels.
        fn simpson(f: impl Fn(f64) -> f64, t: f64, panels: usize) -> f64 {
            let h = t / panels as f64;
            let mut acc = f(0.0) + f(t);
            for i in 1..panels {
                acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        }

        /// `c_n = ∫ x(t − τ) ψ_n(τ) ω(τ) dτ` over the observed past.
        fn projected(basis: Basis, order: usize, x: &dyn Fn(f64) -> f64, t: f64) -> Vec<f64> {
            let window = if basis == Basis::FouT { t.min(1.0) } else { t };
            (0..order)
                .map(|n| {
                    simpson(
                        |tau| x(t - tau) * basis_functions(basis, order, tau).unwrap()[n] * measure_weight(basis, tau),
                        window,
                        20_000,
                    )
                })
                .collect()
        }

        fn recurrent(basis: Basis, order: usize, x: &dyn Fn(f64) -> f64, t: f64, dt: f64) -> CoefficientState {
            let dop = bilinear(&build_operator(basis, order).unwrap(), dt).unwrap();
            let steps = (t / dt).round() as usize;
            // Bilinear steps integrate the trapezoid of neighbouring samples, so the
            // midpoint sample is the matching input.
            let inputs: Vec<f64> = (0..steps).map(|k| x((k as f64 + 0.5) * dt)).collect();
            let mut state = CoefficientState::zeros(order, dt);
            dop.run(&mut state, &inputs);
            state
        }

        fn signal(s: f64) -> f64 {
            1.0 + (2.0 * s).sin() + 0.5 * (5.0 * s + 0.3).cos() + 0.2 * s
        }

        #[test]
        fn legs_recurrence_matches_quadrature() {
            let (order, t) = (16, 3.0);
            let oracle = projected(Basis::LegS, order, &signal, t);
            let state = recurrent(Basis::LegS, order, &signal, t, 1e-4);
            for n in 0..=8 {
                let rel = (state.h[n].re - oracle[n]).abs() / oracle[n].abs();
                assert!(
                    rel < 1e-2,
                    "degree {n}: recurrence {} vs quadrature {} ({rel:.2e})",
                    state.h[n].re,
                    oracle[n]
                );
            }
        }

        #[test]
        fn lagt_recurrence_matches_quadrature() {
            let (order, t) = (12, 4.0);
            let oracle = projected(Basis::LagT, order, &signal, t);
            let state = recurrent(Basis::LagT, order, &signal, t, 1e-4);
            for n in 0..=8 {
                let rel = (state.h[n].re - oracle[n]).abs() / oracle[n].abs();
                assert!(
                    rel < 1e-2,
                    "degree {n}: recurrence {} vs quadrature {} ({rel:.2e})",
                    state.h[n].re,
                    oracle[n]
                );
            }
        }

        /// The Fourier operator only approximates the sliding-window projection
        /// (the window edge is handled by a rank-one correction), so check the
        /// leading coefficients loosely.
        #[test]
        fn fout_recurrence_tracks_windowed_projection() {
            let (order, t) = (16, 2.0);
            let oracle = projected(Basis::FouT, order, &signal, t);
            let state = recurrent(Basis::FouT, order, &signal, t, 1e-4);
            let scale = oracle.iter().map(|c| c * c).sum::<f64>().sqrt();
            let err = (0..order)
                .map(|n| (state.h[n].re - oracle[n]).powi(2))
                .sum::<f64>()
                .sqrt();
            // Measured 0.205 at this order and horizon.
            assert!(err < 0.25 * scale, "{}", err / scale);
        }

        /// Relative L2 error of the reconstruction against the true history over
        /// `(0, t]`, under the basis measure.
        fn reconstruction_error(order: usize, x: &dyn Fn(f64) -> f64, t: f64) -> f64 {
            let state = recurrent(Basis::LegS, order, x, t, 1e-4);
            let grid: Vec<f64> = (1..=2000).map(|i| t * i as f64 / 2000.0).collect();
            let rec = reconstruct_signal(&state, Basis::LegS, t, &grid).unwrap();
            let (mut num, mut den) = (0.0, 0.0);
            for (s, r) in grid.iter().zip(rec) {
                let w = measure_weight(Basis::LegS, t - s);
                num += w * (r - x(*s)).powi(2);
                den += w * x(*s).powi(2);
            }
            (num / den).sqrt()
        }

        #[test]
        fn constant_input_reconstructs() {
            // The input switches on at s = 0, and that step is part of the
            // projected history. Run long enough for it to sit in the measure's tail.
            let err = reconstruction_error(8, &|_| 1.0, 8.0);
            assert!(err < 0.02, "{err}");
        }

        #[test]
        fn band_limited_sinusoid_reconstructs() {
            let err = reconstruction_error(64, &|s| (3.0 * s).sin() + 0.5 * (7.0 * s).cos(), 2.0);
            assert!(err < 0.05, "{err}");
        }
    }
}
