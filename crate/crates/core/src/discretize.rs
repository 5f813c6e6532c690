//! Discretization of the coefficient ODE and the continuous/discrete memory
//! kernels `K(τ) = e^{τA}B` and `K̄_j = Ā^j B̄`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expm::expm;
use crate::hippo::{Basis, CoefficientState, DplrForm, HippoOperator};

/// Dense continuous-time system `h' = A h + B x` with complex entries.
#[derive(Clone, Debug)]
pub struct StateSpace {
    pub a: DMatrix<Complex64>,
    pub b: DVector<Complex64>,
}

impl StateSpace {
    pub fn order(&self) -> usize {
        self.b.len()
    }

    fn is_real(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|z| z.im == 0.0)
    }
}

/// Anything that can be viewed as a dense continuous system.
pub trait AsStateSpace {
    fn state_space(&self) -> StateSpace;
}

impl AsStateSpace for StateSpace {
    fn state_space(&self) -> StateSpace {
        self.clone()
    }
}

impl AsStateSpace for HippoOperator {
    fn state_space(&self) -> StateSpace {
        StateSpace {
            a: self.a.map(|x| Complex64::new(x, 0.0)),
            b: self.b.map(|x| Complex64::new(x, 0.0)),
        }
    }
}

impl AsStateSpace for DplrForm {
    /// The system in eigen-coordinates, where the state actually lives.
    fn state_space(&self) -> StateSpace {
        StateSpace {
            a: self.eigen_operator(),
            b: self.b.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    pub a_bar: DMatrix<Complex64>,
    pub b_bar: DVector<Complex64>,
    pub dt: f64,
}

impl DiscreteOperator {
    pub fn order(&self) -> usize {
        self.b_bar.len()
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a_bar)
    }

    /// Advance a coefficient state through `inputs`, one sample per step.
    pub fn run(&self, state: &mut CoefficientState, inputs: &[f64]) {
        for &x in inputs {
            state.h = &self.a_bar * &state.h + &self.b_bar * Complex64::new(x, 0.0);
            state.time_index += 1;
        }
    }
}

pub fn spectral_radius(m: &DMatrix<Complex64>) -> f64 {
    let eig = m
        .clone()
        .schur()
        .eigenvalues()
        .expect("complex Schur form is triangular");
    eig.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("step size must be positive, got {dt}")))
    }
}

fn one_norm(m: &DMatrix<Complex64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Bilinear (Tustin) discretization:
/// `Ā = (I − Δt/2·A)⁻¹(I + Δt/2·A)`, `B̄ = (I − Δt/2·A)⁻¹ Δt B`.
pub fn bilinear<S: AsStateSpace + ?Sized>(sys: &S, dt: f64) -> Result<DiscreteOperator> {
    check_dt(dt)?;
    let ss = sys.state_space();
    let n = ss.order();
    let half = Complex64::new(dt / 2.0, 0.0);
    let ident = DMatrix::<Complex64>::identity(n, n);
    let resolvent = &ident - &ss.a * half;
    let lu = resolvent.clone().lu();
    let pivot = lu.u().diagonal().iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
    let inv = lu.try_inverse().ok_or(Error::SingularResolvent { dt, pivot })?;
    let cond = one_norm(&resolvent) * one_norm(&inv);
    if !(cond < 1e14) {
        return Err(Error::SingularResolvent { dt, pivot });
    }
    let a_bar = &inv * (&ident + &ss.a * half);
    let b_bar = &inv * &ss.b * Complex64::new(dt, 0.0);
    Ok(DiscreteOperator { a_bar, b_bar, dt })
}

/// Zero-order hold: `Ā = e^{ΔtA}`, `B̄ = A⁻¹(e^{ΔtA} − I)B`.
///
/// Falls back to the block exponential of `[[A, B], [0, 0]]` when `A` is
/// singular or badly conditioned.
pub fn zoh<S: AsStateSpace + ?Sized>(sys: &S, dt: f64) -> Result<DiscreteOperator> {
    check_dt(dt)?;
    let ss = sys.state_space();
    let n = ss.order();
    let scaled = &ss.a * Complex64::new(dt, 0.0);
    let a_bar = expm(&scaled)?;
    let ident = DMatrix::<Complex64>::identity(n, n);

    let closed_form = ss.a.clone().try_inverse().and_then(|inv| {
        let cond = one_norm(&ss.a) * one_norm(&inv);
        (cond < 1e10).then(|| inv * (&a_bar - &ident) * &ss.b)
    });
    let b_bar = match closed_form {
        Some(b) => b,
        None => {
            let mut aug = DMatrix::<Complex64>::zeros(n + 1, n + 1);
            aug.view_mut((0, 0), (n, n)).copy_from(&scaled);
            aug.view_mut((0, n), (n, 1))
                .copy_from(&(&ss.b * Complex64::new(dt, 0.0)));
            let e = expm(&aug)?;
            e.view((0, n), (n, 1)).into_owned().column(0).into_owned()
        }
    };
    if b_bar.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numerical {
            what: "zero-order hold input map is not finite".into(),
            residual: f64::NAN,
        });
    }
    Ok(DiscreteOperator { a_bar, b_bar, dt })
}

/// `K(τ) = e^{τA} B` for every `τ` in the grid (real arithmetic when the
/// system is real).
pub fn continuous_kernel<S: AsStateSpace + ?Sized>(sys: &S, tau_grid: &[f64]) -> Result<Vec<DVector<Complex64>>> {
    let ss = sys.state_space();
    if let Some(&bad) = tau_grid.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::Domain(format!("kernel lag {bad} is negative")));
    }
    if ss.is_real() {
        let a = ss.a.map(|z| z.re);
        let b = ss.b.map(|z| z.re);
        tau_grid
            .iter()
            .map(|&tau| Ok((expm(&(&a * tau))? * &b).map(|x| Complex64::new(x, 0.0))))
            .collect()
    } else {
        tau_grid
            .iter()
            .map(|&tau| Ok(expm(&(&ss.a * Complex64::new(tau, 0.0)))? * &ss.b))
            .collect()
    }
}

/// `K̄_j = Ā^j B̄` for `j = 0..steps` by repeated application of `Ā`.
pub fn discrete_kernel(dop: &DiscreteOperator, steps: usize) -> Vec<DVector<Complex64>> {
    let mut out = Vec::with_capacity(steps);
    let mut v = dop.b_bar.clone();
    for j in 0..steps {
        if j > 0 {
            v = &dop.a_bar * &v;
        }
        out.push(v.clone());
    }
    out
}

/// Euclidean norm of `K̄_j` ordered from the oldest lag `L−1` down to lag 0,
/// i.e. aligned with presentation positions `0..L`.
pub fn theoretical_weight_curve(dop: &DiscreteOperator, len: usize) -> Vec<f64> {
    let mut weights: Vec<f64> = discrete_kernel(dop, len).iter().map(|k| k.norm()).collect();
    weights.reverse();
    weights
}

pub const FIG_DTS: [f64; 4] = [0.001, 0.01, 0.1, 1.0];
pub const FIG_DEGREES: [usize; 6] = [2, 3, 8, 15, 32, 63];
pub const FIG_STEPS: usize = 256;

#[derive(Clone, Debug, Serialize)]
pub struct KernelRow {
    pub j: usize,
    pub degree: usize,
    pub k_continuous: f64,
    pub k_discrete: f64,
}

/// Continuous and discrete kernels of one step size on the grid `τ = jΔt`.
#[derive(Clone, Debug)]
pub struct KernelSweep {
    pub dt: f64,
    pub continuous: Vec<DVector<Complex64>>,
    pub discrete: Vec<DVector<Complex64>>,
}

impl KernelSweep {
    pub fn compute<S: AsStateSpace + ?Sized>(sys: &S, dt: f64, steps: usize) -> Result<Self> {
        let dop = bilinear(sys, dt)?;
        let taus: Vec<f64> = (0..steps).map(|j| j as f64 * dt).collect();
        Ok(Self {
            dt,
            continuous: continuous_kernel(sys, &taus)?,
            discrete: discrete_kernel(&dop, steps),
        })
    }

    /// Largest relative difference between `K̄_j / Δt` and `K(jΔt)` over the
    /// grid, measured on the selected entries in the Euclidean norm.
    ///
    /// `B̄` carries a factor `Δt`, so the discrete kernel is compared per unit
    /// time.
    pub fn max_relative_discrepancy(&self, degrees: &[usize]) -> f64 {
        self.continuous
            .iter()
            .zip(&self.discrete)
            .map(|(k, kd)| {
                let (mut num, mut den) = (0.0, 0.0);
                for &n in degrees {
                    num += (kd[n] / self.dt - k[n]).norm_sqr();
                    den += k[n].norm_sqr();
                }
                if den == 0.0 {
                    if num == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    (num / den).sqrt()
                }
            })
            .fold(0.0, f64::max)
    }

    /// Raw components for the selected degrees, natural lag order.
    pub fn rows(&self, degrees: &[usize]) -> Vec<KernelRow> {
        let mut rows = Vec::with_capacity(self.continuous.len() * degrees.len());
        for (j, (k, kd)) in self.continuous.iter().zip(&self.discrete).enumerate() {
            for &n in degrees {
                rows.push(KernelRow {
                    j,
                    degree: n,
                    k_continuous: k[n].re,
                    k_discrete: kd[n].re,
                });
            }
        }
        rows
    }
}

/// Output of the kernel-discrepancy sweep.
#[derive(Clone, Debug)]
pub struct KernelTable {
    pub basis: Basis,
    pub order: usize,
    pub steps: usize,
    pub degrees: Vec<usize>,
    pub sweeps: Vec<KernelSweep>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiscrepancySummary {
    pub basis: Basis,
    pub order: usize,
    pub steps: usize,
    pub degrees: Vec<usize>,
    pub dt: Vec<f64>,
    pub max_relative_discrepancy: Vec<f64>,
}

impl KernelTable {
    pub fn summary(&self) -> DiscrepancySummary {
        DiscrepancySummary {
            basis: self.basis,
            order: self.order,
            steps: self.steps,
            degrees: self.degrees.clone(),
            dt: self.sweeps.iter().map(|s| s.dt).collect(),
            max_relative_discrepancy: self
                .sweeps
                .iter()
                .map(|s| s.max_relative_discrepancy(&self.degrees))
                .collect(),
        }
    }
}

/// Continuous vs. discrete kernels for each step size. Step sizes are sorted
/// ascending.
pub fn kernel_discrepancy_report(
    op: &HippoOperator,
    dt_list: &[f64],
    steps: usize,
    degrees: &[usize],
) -> Result<KernelTable> {
    if steps == 0 {
        return Err(Error::Config("kernel sweep needs at least one step".into()));
    }
    if let Some(&d) = degrees.iter().find(|&&d| d >= op.order) {
        return Err(Error::Config(format!("degree {d} out of range for order {}", op.order)));
    }
    let mut dts = dt_list.to_vec();
    dts.sort_by(|a, b| a.total_cmp(b));
    let sweeps = dts
        .iter()
        .map(|&dt| KernelSweep::compute(op, dt, steps))
        .collect::<Result<Vec<_>>>()?;
    Ok(KernelTable {
        basis: op.basis,
        order: op.order,
        steps,
        degrees: degrees.to_vec(),
        sweeps,
    })
}
