//! The trainable S4 layer.
//!
//! Every channel `m` runs the bilinear discretization of the shared DPLR
//! operator `A = diag(Λ) − P Pᴴ` with its own step `Δt_m = exp(log_dt_m)`,
//! input vector `B_m` and readout `C_m`:
//!
//! ```text
//! h_j = Ā_m h_{j−1} + B̄_m x_j,    y_j = Re(C_m · h_j) + x_j
//! ```
//!
//! Two equivalent evaluation routes are provided. The scan route runs the
//! dense recurrence and caches every state; the convolution route
//! materializes the kernel `k_j = Re(C_m · Ā_m^j B̄_m)` with the Woodbury
//! form of the resolvent, which costs `O(N)` per step, and convolves.
//! Training uses the convolution route; the scan route is its oracle.
//!
//! Gradients with respect to complex parameters are stored as
//! `∂L/∂Re z + i ∂L/∂Im z`.

use ndarray::{linalg::general_mat_mul, s, Array2, Array3, ArrayView2, ArrayView3};
use num_complex::Complex;

use crate::cplx::{self, c, C};
use crate::error::{Error, Result};
use crate::hippo::DplrForm;
use crate::params::{Parameters, TensorView, TensorViewMut};
use crate::real::Real;

/// Real part of every trainable eigenvalue is kept at or below this value.
pub const LAMBDA_RE_MAX: f64 = -1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Trainable {
    pub lambda: bool,
    pub p: bool,
    pub b: bool,
    pub log_dt: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self {
            lambda: true,
            p: true,
            b: true,
            log_dt: true,
        }
    }
}

impl Trainable {
    /// A/B frozen at their HiPPO initialization; only Δt shapes dynamics.
    pub fn frozen_ab() -> Self {
        Self {
            lambda: false,
            p: false,
            b: false,
            log_dt: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SsmLayerParams<T: Real> {
    pub order: usize,
    pub channels: usize,
    /// Shared eigenvalues Λ (N).
    pub lambda: Vec<C<T>>,
    /// Shared low-rank factor P (N).
    pub p: Vec<C<T>>,
    /// Per-channel input vectors, row-major H×N.
    pub b: Vec<C<T>>,
    /// Per-channel readouts, row-major H×N.
    pub c: Vec<C<T>>,
    pub log_dt: Vec<T>,
    pub residual: bool,
    pub trainable: Trainable,
}

fn zero<T: Real>() -> C<T> {
    Complex::new(T::zero(), T::zero())
}

fn to_c<T: Real>(z: num_complex::Complex64) -> C<T> {
    Complex::new(T::of(z.re), T::of(z.im))
}

/// Dense bilinear operator of one channel.
#[derive(Clone, Debug)]
pub struct DenseChannel<T: Real> {
    pub dt: T,
    /// `(I − Δt/2·A)⁻¹`, row-major.
    pub resolvent: Vec<C<T>>,
    pub a_bar: Vec<C<T>>,
    pub b_bar: Vec<C<T>>,
}

/// Woodbury form of the resolvent `R = (D + Δt/2·P Pᴴ)⁻¹`,
/// `D = I − Δt/2·diag(Λ)`: `R v = d∘v − γ q (Pᴴ(d∘v))` with `d = D⁻¹·1`,
/// `q = d∘P`, `γ = (Δt/2) / (1 + (Δt/2) Pᴴ q)`.
#[derive(Clone, Debug)]
struct WoodburyChannel<T: Real> {
    dt: T,
    d: Vec<C<T>>,
    q: Vec<C<T>>,
    gamma: C<T>,
}

impl<T: Real> WoodburyChannel<T> {
    fn new(lambda: &[C<T>], p: &[C<T>], dt: T) -> Result<Self> {
        let half = dt * T::of(0.5);
        let mut d = Vec::with_capacity(lambda.len());
        for l in lambda {
            let den = c::<T>(T::one()) - l * half;
            if !(den.norm() > T::epsilon()) {
                return Err(Error::SingularResolvent {
                    dt: dt.f64(),
                    pivot: den.norm().f64(),
                });
            }
            d.push(den.inv());
        }
        let q: Vec<C<T>> = d.iter().zip(p).map(|(d, p)| d * p).collect();
        let phq: C<T> = p.iter().zip(&q).map(|(p, q)| p.conj() * q).sum();
        let den = c::<T>(T::one()) + phq * half;
        if !(den.norm() > T::epsilon()) {
            return Err(Error::SingularResolvent {
                dt: dt.f64(),
                pivot: den.norm().f64(),
            });
        }
        Ok(Self {
            dt,
            d,
            q,
            gamma: c::<T>(half) / den,
        })
    }

    /// `out = R v`.
    fn resolve(&self, p: &[C<T>], v: &[C<T>], out: &mut [C<T>]) {
        let mut s = zero::<T>();
        for ((o, d), (v, p)) in out.iter_mut().zip(&self.d).zip(v.iter().zip(p)) {
            *o = d * v;
            s += p.conj() * *o;
        }
        let g = self.gamma * s;
        for (o, q) in out.iter_mut().zip(&self.q) {
            *o -= g * q;
        }
    }

    /// `out = Rᴴ w`.
    fn resolve_adjoint(&self, p: &[C<T>], w: &[C<T>], out: &mut [C<T>]) {
        let s: C<T> = self.q.iter().zip(w).map(|(q, w)| q.conj() * w).sum();
        let g = self.gamma.conj() * s;
        for ((o, d), (w, p)) in out.iter_mut().zip(&self.d).zip(w.iter().zip(p)) {
            *o = d.conj() * (w - g * p);
        }
    }
}

/// Per-channel kernel vectors `v_j = Ā^j B̄` kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T: Real> {
    x: Array3<T>,
    /// Real kernels, channels × length.
    kernels: Array2<T>,
    /// Row-major channels × length × N.
    states: Vec<C<T>>,
    ops: Vec<WoodburyChannel<T>>,
}

/// Stored per-step states for the dense scan's reverse pass.
#[derive(Clone, Debug)]
pub struct ScanCache<T: Real> {
    x: Array3<T>,
    /// Row-major batch × length × channels × N.
    states: Vec<C<T>>,
    ops: Vec<DenseChannel<T>>,
}

impl<T: Real> ScanCache<T> {
    pub fn len(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn first_non_finite<T: Real>(y: &Array3<T>) -> Option<usize> {
    let len = y.shape()[1];
    (0..len).find(|&t| y.slice(s![.., t, ..]).iter().any(|v| !v.is_finite()))
}

impl<T: Real> SsmLayerParams<T> {
    /// Build a layer from a DPLR form with per-channel step sizes and
    /// readouts. Every channel starts from the same `B`.
    pub fn from_dplr(form: &DplrForm, log_dt: Vec<T>, c: Vec<C<T>>, trainable: Trainable) -> Self {
        let order = form.order();
        let channels = log_dt.len();
        assert_eq!(c.len(), channels * order, "C must be channels × order");
        let b_row: Vec<C<T>> = form.b.iter().map(|&z| to_c(z)).collect();
        Self {
            order,
            channels,
            lambda: form.lambda.iter().map(|&z| to_c(z)).collect(),
            p: form.p.iter().map(|&z| to_c(z)).collect(),
            b: (0..channels).flat_map(|_| b_row.iter().copied()).collect(),
            c,
            log_dt,
            residual: true,
            trainable,
        }
    }

    pub fn dt(&self, channel: usize) -> T {
        self.log_dt[channel].exp()
    }

    fn b_row(&self, m: usize) -> &[C<T>] {
        &self.b[m * self.order..(m + 1) * self.order]
    }

    fn c_row(&self, m: usize) -> &[C<T>] {
        &self.c[m * self.order..(m + 1) * self.order]
    }

    /// Dense `A = diag(Λ) − P Pᴴ`, row-major.
    pub fn dense_a(&self) -> Vec<C<T>> {
        let n = self.order;
        let mut a = vec![zero::<T>(); n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = -(self.p[i] * self.p[j].conj());
            }
            a[i * n + i] += self.lambda[i];
        }
        a
    }

    /// Dense bilinear discretization of channel `m`.
    pub fn dense_channel(&self, m: usize) -> Result<DenseChannel<T>> {
        let n = self.order;
        let dt = self.dt(m);
        let half = dt * T::of(0.5);
        let a = self.dense_a();
        let mut resolvent_m = a.iter().map(|z| -(z * half)).collect::<Vec<_>>();
        for i in 0..n {
            resolvent_m[i * n + i] += c::<T>(T::one());
        }
        let r = cplx::inverse(&resolvent_m, n).map_err(|pivot| Error::SingularResolvent {
            dt: dt.f64(),
            pivot: pivot.f64(),
        })?;
        let mut a_bar: Vec<C<T>> = r.iter().map(|z| z * T::of(2.0)).collect();
        for i in 0..n {
            a_bar[i * n + i] -= c::<T>(T::one());
        }
        let mut b_bar = vec![zero::<T>(); n];
        cplx::matvec(&r, self.b_row(m), &mut b_bar);
        b_bar.iter_mut().for_each(|z| *z = *z * dt);
        Ok(DenseChannel {
            dt,
            resolvent: r,
            a_bar,
            b_bar,
        })
    }

    fn check_input(&self, x: &ArrayView3<T>) -> Result<()> {
        let sh = x.shape();
        if sh[2] != self.channels {
            return Err(Error::Contract(format!(
                "input has {} channels, layer has {}",
                sh[2], self.channels
            )));
        }
        if sh[1] == 0 {
            return Err(Error::Contract("empty sequence".into()));
        }
        Ok(())
    }

    /// Recurrent evaluation with every state cached.
    pub fn forward_scan(&self, x: ArrayView3<T>) -> Result<(Array3<T>, ScanCache<T>)> {
        self.check_input(&x)?;
        let (batch, len, h) = x.dim();
        let n = self.order;
        let ops = (0..h).map(|m| self.dense_channel(m)).collect::<Result<Vec<_>>>()?;
        let mut y = Array3::<T>::zeros((batch, len, h));
        let mut states = vec![zero::<T>(); batch * len * h * n];
        let mut next = vec![zero::<T>(); n];
        for b in 0..batch {
            for (m, op) in ops.iter().enumerate() {
                let cm = self.c_row(m);
                for t in 0..len {
                    let xt = x[[b, t, m]];
                    let base = ((b * len + t) * h + m) * n;
                    if t == 0 {
                        for (o, bb) in next.iter_mut().zip(&op.b_bar) {
                            *o = bb * xt;
                        }
                    } else {
                        let prev = ((b * len + t - 1) * h + m) * n;
                        cplx::matvec(&op.a_bar, &states[prev..prev + n], &mut next);
                        for (o, bb) in next.iter_mut().zip(&op.b_bar) {
                            *o += bb * xt;
                        }
                    }
                    states[base..base + n].copy_from_slice(&next);
                    let out: C<T> = cm.iter().zip(&next).map(|(c, h)| c * h).sum();
                    y[[b, t, m]] = out.re + if self.residual { xt } else { T::zero() };
                }
            }
        }
        if let Some(step) = first_non_finite(&y) {
            return Err(Error::Divergence {
                step,
                what: "non-finite SSM output".into(),
            });
        }
        Ok((
            y,
            ScanCache {
                x: x.to_owned(),
                states,
                ops,
            },
        ))
    }

    /// Exact reverse pass through the dense recurrence.
    ///
    /// Returns parameter gradients (frozen groups zeroed) and `dL/dx`.
    pub fn backward_scan(&self, cache: &ScanCache<T>, dy: ArrayView3<T>) -> Result<(Self, Array3<T>)> {
        let (batch, len, h) = cache.x.dim();
        if dy.dim() != (batch, len, h) || cache.ops.len() != self.channels {
            return Err(Error::Contract("scan cache does not match upstream gradient".into()));
        }
        let n = self.order;
        let mut grads = self.zeros_like();
        let mut dx = Array3::<T>::zeros((batch, len, h));
        let mut g_abar = vec![vec![zero::<T>(); n * n]; h];
        let mut g_bbar = vec![vec![zero::<T>(); n]; h];
        let mut gh = vec![zero::<T>(); n];
        let mut carry = vec![zero::<T>(); n];

        for b in 0..batch {
            for (m, op) in cache.ops.iter().enumerate() {
                let cm = self.c_row(m);
                carry.iter_mut().for_each(|z| *z = zero());
                for t in (0..len).rev() {
                    let g = dy[[b, t, m]];
                    let base = ((b * len + t) * h + m) * n;
                    let state = &cache.states[base..base + n];
                    for ((gh, cc), carry) in gh.iter_mut().zip(cm).zip(&carry) {
                        *gh = cc.conj() * g + carry;
                    }
                    for (gc, s) in grads.c[m * n..(m + 1) * n].iter_mut().zip(state) {
                        *gc += s.conj() * g;
                    }
                    let xt = cache.x[[b, t, m]];
                    let mut gx: T = op.b_bar.iter().zip(&gh).map(|(bb, g)| (bb.conj() * g).re).sum();
                    if self.residual {
                        gx += g;
                    }
                    dx[[b, t, m]] = gx;
                    for (gb, g) in g_bbar[m].iter_mut().zip(&gh) {
                        *gb += g * xt;
                    }
                    if t > 0 {
                        let prev = ((b * len + t - 1) * h + m) * n;
                        let hp = &cache.states[prev..prev + n];
                        let ga = &mut g_abar[m];
                        for i in 0..n {
                            for j in 0..n {
                                ga[i * n + j] += gh[i] * hp[j].conj();
                            }
                        }
                    }
                    cplx::matvec_adjoint(&op.a_bar, &gh, &mut carry);
                }
            }
        }

        let a = self.dense_a();
        for (m, op) in cache.ops.iter().enumerate() {
            let dt = op.dt;
            // Ā = 2R − I, B̄ = Δt R b.
            let b_row = self.b_row(m).to_vec();
            let mut g_r: Vec<C<T>> = g_abar[m].iter().map(|z| z * T::of(2.0)).collect();
            for i in 0..n {
                for j in 0..n {
                    g_r[i * n + j] += g_bbar[m][i] * b_row[j].conj() * dt;
                }
            }
            let mut gb = vec![zero::<T>(); n];
            cplx::matvec_adjoint(&op.resolvent, &g_bbar[m], &mut gb);
            for (dst, g) in grads.b[m * n..(m + 1) * n].iter_mut().zip(&gb) {
                *dst += g * dt;
            }
            let mut rb = vec![zero::<T>(); n];
            cplx::matvec(&op.resolvent, &b_row, &mut rb);
            let mut g_dt: T = rb.iter().zip(&g_bbar[m]).map(|(r, g)| (r.conj() * g).re).sum();

            // R = M⁻¹ ⇒ ḡ_M = −Rᴴ ḡ_R Rᴴ, with M = I − Δt/2·A.
            let r_h = cplx::adjoint(&op.resolvent, n);
            let g_m: Vec<C<T>> = cplx::matmul(&cplx::matmul(&r_h, &g_r, n), &r_h, n)
                .into_iter()
                .map(|z| -z)
                .collect();
            let inner: T = g_m.iter().zip(&a).map(|(g, a)| (g.conj() * a).re).sum();
            g_dt -= inner * T::of(0.5);
            grads.log_dt[m] += g_dt * dt;

            let half = dt * T::of(0.5);
            let g_a: Vec<C<T>> = g_m.iter().map(|z| -(z * half)).collect();
            for i in 0..n {
                grads.lambda[i] += g_a[i * n + i];
            }
            // ḡ_P = −(ḡ_A + ḡ_Aᴴ) P
            for i in 0..n {
                let mut acc = zero::<T>();
                for j in 0..n {
                    acc += (g_a[i * n + j] + g_a[j * n + i].conj()) * self.p[j];
                }
                grads.p[i] -= acc;
            }
        }
        grads.mask_frozen();
        Ok((grads, dx))
    }

    fn woodbury(&self) -> Result<Vec<WoodburyChannel<T>>> {
        (0..self.channels)
            .map(|m| WoodburyChannel::new(&self.lambda, &self.p, self.dt(m)))
            .collect()
    }

    /// Kernel vectors `v_j = Ā^j B̄` (channels × len × N) and their real
    /// readouts `Re(C·v_j)`.
    fn kernel_states(&self, ops: &[WoodburyChannel<T>], len: usize) -> (Array2<T>, Vec<C<T>>) {
        let n = self.order;
        let mut kernels = Array2::<T>::zeros((self.channels, len));
        let mut states = vec![zero::<T>(); self.channels * len * n];
        let mut tmp = vec![zero::<T>(); n];
        for (m, op) in ops.iter().enumerate() {
            let cm = self.c_row(m);
            let block = &mut states[m * len * n..(m + 1) * len * n];
            op.resolve(&self.p, self.b_row(m), &mut tmp);
            for (dst, z) in block[..n].iter_mut().zip(&tmp) {
                *dst = z * op.dt;
            }
            for j in 1..len {
                let (head, tail) = block.split_at_mut(j * n);
                let prev = &head[(j - 1) * n..];
                op.resolve(&self.p, prev, &mut tmp);
                for ((dst, r), v) in tail[..n].iter_mut().zip(&tmp).zip(prev) {
                    *dst = r * T::of(2.0) - v;
                }
            }
            for j in 0..len {
                let v = &block[j * n..(j + 1) * n];
                kernels[[m, j]] = cm.iter().zip(v).map(|(c, v)| (c * v).re).sum();
            }
        }
        (kernels, states)
    }

    /// Real convolution kernels `k_j = Re(C·Ā^j B̄)`, channels × len.
    pub fn kernels(&self, len: usize) -> Result<Array2<T>> {
        let ops = self.woodbury()?;
        Ok(self.kernel_states(&ops, len).0)
    }

    /// Causal convolution with the materialized kernels, plus the residual.
    pub fn forward_conv(&self, x: ArrayView3<T>) -> Result<Array3<T>> {
        Ok(self.forward_conv_cached(x)?.0)
    }

    pub fn forward_conv_cached(&self, x: ArrayView3<T>) -> Result<(Array3<T>, ConvCache<T>)> {
        self.check_input(&x)?;
        let (batch, len, h) = x.dim();
        let ops = self.woodbury()?;
        let (kernels, states) = self.kernel_states(&ops, len);
        let mut y = if self.residual {
            x.to_owned()
        } else {
            Array3::zeros((batch, len, h))
        };
        let mut toeplitz = Array2::<T>::zeros((len, len));
        for m in 0..h {
            fill_toeplitz(&mut toeplitz, kernels.row(m).as_slice().expect("contiguous"));
            let xm = x.slice(s![.., .., m]);
            let mut ym = y.slice_mut(s![.., .., m]);
            // y[b, t] += Σ_s x[b, s] k[t − s]
            general_mat_mul(T::one(), &xm, &toeplitz.t(), T::one(), &mut ym);
        }
        if let Some(step) = first_non_finite(&y) {
            return Err(Error::Divergence {
                step,
                what: "non-finite SSM output".into(),
            });
        }
        Ok((
            y,
            ConvCache {
                x: x.to_owned(),
                kernels,
                states,
                ops,
            },
        ))
    }

    /// Reverse pass of the convolution route; gradients match
    /// [`backward_scan`](Self::backward_scan) exactly in exact arithmetic.
    pub fn backward_conv(&self, cache: &ConvCache<T>, dy: ArrayView3<T>) -> Result<(Self, Array3<T>)> {
        let (batch, len, h) = cache.x.dim();
        if dy.dim() != (batch, len, h) || cache.kernels.dim() != (h, len) {
            return Err(Error::Contract("conv cache does not match upstream gradient".into()));
        }
        let n = self.order;
        let mut grads = self.zeros_like();
        let mut dx = if self.residual {
            dy.to_owned()
        } else {
            Array3::zeros((batch, len, h))
        };
        let mut toeplitz = Array2::<T>::zeros((len, len));
        let mut corr = Array2::<T>::zeros((len, len));
        let mut gk = vec![T::zero(); len];

        for m in 0..h {
            fill_toeplitz(&mut toeplitz, cache.kernels.row(m).as_slice().expect("contiguous"));
            let dym = dy.slice(s![.., .., m]);
            let mut dxm = dx.slice_mut(s![.., .., m]);
            general_mat_mul(T::one(), &dym, &toeplitz, T::one(), &mut dxm);

            // corr[s, t] = Σ_b x[b, s] dy[b, t]; ḡk_j sums the j-th diagonal.
            let xm = cache.x.slice(s![.., .., m]);
            general_mat_mul(T::one(), &xm.t(), &dym, T::zero(), &mut corr);
            for (j, g) in gk.iter_mut().enumerate() {
                *g = (0..len - j).map(|s| corr[[s, s + j]]).sum();
            }
            self.kernel_backward(
                m,
                &cache.ops[m],
                &cache.states[m * len * n..(m + 1) * len * n],
                &gk,
                &mut grads,
            );
        }
        grads.mask_frozen();
        Ok((grads, dx))
    }

    /// Chain `dL/dk_j` through `k_j = Re(C·v_j)`, `v_j = Ā v_{j−1}`,
    /// `v_0 = Δt R b` and the bilinear map into every parameter group.
    fn kernel_backward(&self, m: usize, op: &WoodburyChannel<T>, states: &[C<T>], gk: &[T], grads: &mut Self) {
        let n = self.order;
        let len = gk.len();
        let dt = op.dt;
        let half = dt * T::of(0.5);
        let cm = self.c_row(m).to_vec();
        let v = |j: usize| &states[j * n..(j + 1) * n];

        for (j, &g) in gk.iter().enumerate() {
            for (gc, vj) in grads.c[m * n..(m + 1) * n].iter_mut().zip(v(j)) {
                *gc += vj.conj() * g;
            }
        }

        let mut g_dt = T::zero();
        let mut g_lambda = vec![zero::<T>(); n];
        let mut g_p = vec![zero::<T>(); n];
        let mut alpha = vec![zero::<T>(); n];
        let mut beta = vec![zero::<T>(); n];
        let mut rh_w = vec![zero::<T>(); n];

        // Accumulate the contribution of one rank-one term αβᴴ of −ḡ_M.
        let rank_one = |alpha: &[C<T>], beta: &[C<T>], g_dt: &mut T, g_lambda: &mut [C<T>], g_p: &mut [C<T>]| {
            let a_p: C<T> = alpha.iter().zip(&self.p).map(|(a, p)| a.conj() * p).sum();
            let b_p: C<T> = beta.iter().zip(&self.p).map(|(b, p)| b.conj() * p).sum();
            let b_hp: C<T> = self.p.iter().zip(beta).map(|(p, b)| p.conj() * b).sum();
            // αᴴ A β = Σ conj(α) Λ β − (αᴴP)(Pᴴβ)
            let mut quad: C<T> = alpha
                .iter()
                .zip(&self.lambda)
                .zip(beta)
                .map(|((a, l), b)| a.conj() * l * b)
                .sum();
            quad -= a_p * b_hp;
            *g_dt += quad.re * T::of(0.5);
            for i in 0..n {
                g_lambda[i] += alpha[i] * beta[i].conj() * half;
                g_p[i] -= (alpha[i] * b_p + beta[i] * a_p) * half;
            }
        };

        // w_{L−1} = ḡ_{v_{L−1}}; w_j = ḡ_{v_j} + Āᴴ w_{j+1}.
        let mut w: Vec<C<T>> = cm.iter().map(|cc| cc.conj() * gk[len - 1]).collect();
        for j in (1..len).rev() {
            op.resolve_adjoint(&self.p, &w, &mut rh_w);
            // term 2 w_j v_{j−1}ᴴ of ḡ_R: α = 2Rᴴw_j, β = R v_{j−1} = (v_j + v_{j−1})/2
            for i in 0..n {
                alpha[i] = rh_w[i] * T::of(2.0);
                beta[i] = (v(j)[i] + v(j - 1)[i]) * T::of(0.5);
            }
            rank_one(&alpha, &beta, &mut g_dt, &mut g_lambda, &mut g_p);
            for i in 0..n {
                w[i] = cm[i].conj() * gk[j - 1] + rh_w[i] * T::of(2.0) - w[i];
            }
        }

        // v_0 = Δt R b: ḡ_b = Δt Rᴴ w_0, explicit ∂/∂Δt = Re⟨R b, w_0⟩.
        op.resolve_adjoint(&self.p, &w, &mut rh_w);
        let rb: Vec<C<T>> = v(0).iter().map(|z| z / dt).collect();
        g_dt += rb.iter().zip(&w).map(|(r, w)| (r.conj() * w).re).sum::<T>();
        for i in 0..n {
            alpha[i] = rh_w[i] * dt;
            beta[i] = rb[i];
        }
        for (dst, a) in grads.b[m * n..(m + 1) * n].iter_mut().zip(&alpha) {
            *dst += a;
        }
        rank_one(&alpha, &beta, &mut g_dt, &mut g_lambda, &mut g_p);

        grads.log_dt[m] += g_dt * dt;
        for i in 0..n {
            grads.lambda[i] += g_lambda[i];
            grads.p[i] += g_p[i];
        }
    }

    /// Clamp `Re(λ) ≤ −1e-4` when Λ is trainable.
    pub fn clamp_stability(&mut self) {
        if self.trainable.lambda {
            let max = T::of(LAMBDA_RE_MAX);
            for l in &mut self.lambda {
                if l.re > max {
                    l.re = max;
                }
            }
        }
    }

    /// Largest spectral radius of the dense discretized operators over
    /// channels, computed in double precision.
    pub fn max_spectral_radius(&self) -> Result<f64> {
        let mut worst = 0f64;
        for m in 0..self.channels {
            let op = self.dense_channel(m)?;
            let n = self.order;
            let mat = nalgebra::DMatrix::from_fn(n, n, |i, j| {
                let z = op.a_bar[i * n + j];
                num_complex::Complex64::new(z.re.f64(), z.im.f64())
            });
            worst = worst.max(crate::discretize::spectral_radius(&mat));
        }
        Ok(worst)
    }
}

/// Lower-triangular Toeplitz matrix with `t[i, j] = k[i − j]`.
fn fill_toeplitz<T: Real>(t: &mut Array2<T>, k: &[T]) {
    let len = k.len();
    for i in 0..len {
        for j in 0..len {
            t[[i, j]] = if i >= j { k[i - j] } else { T::zero() };
        }
    }
}

/// Convolve one channel's input with an explicit kernel (reference helper).
pub fn causal_convolve<T: Real>(x: ArrayView2<T>, k: &[T]) -> Array2<T> {
    let (batch, len) = x.dim();
    let mut y = Array2::zeros((batch, len));
    for b in 0..batch {
        for t in 0..len {
            y[[b, t]] = (0..=t).map(|j| k[j] * x[[b, t - j]]).sum();
        }
    }
    y
}

impl<T: Real> Parameters<T> for SsmLayerParams<T> {
    fn tensors(&self) -> Vec<TensorView<'_, T>> {
        let (n, h) = (self.order, self.channels);
        let tr = self.trainable;
        vec![
            TensorView {
                name: "lambda".into(),
                shape: vec![n, 2],
                data: bytemuck::cast_slice(&self.lambda),
                trainable: tr.lambda,
            },
            TensorView {
                name: "p".into(),
                shape: vec![n, 2],
                data: bytemuck::cast_slice(&self.p),
                trainable: tr.p,
            },
            TensorView {
                name: "b".into(),
                shape: vec![h, n, 2],
                data: bytemuck::cast_slice(&self.b),
                trainable: tr.b,
            },
            TensorView {
                name: "c".into(),
                shape: vec![h, n, 2],
                data: bytemuck::cast_slice(&self.c),
                trainable: true,
            },
            TensorView {
                name: "log_dt".into(),
                shape: vec![h],
                data: &self.log_dt,
                trainable: tr.log_dt,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_, T>> {
        let tr = self.trainable;
        vec![
            TensorViewMut {
                name: "lambda".into(),
                data: bytemuck::cast_slice_mut(&mut self.lambda),
                trainable: tr.lambda,
            },
            TensorViewMut {
                name: "p".into(),
                data: bytemuck::cast_slice_mut(&mut self.p),
                trainable: tr.p,
            },
            TensorViewMut {
                name: "b".into(),
                data: bytemuck::cast_slice_mut(&mut self.b),
                trainable: tr.b,
            },
            TensorViewMut {
                name: "c".into(),
                data: bytemuck::cast_slice_mut(&mut self.c),
                trainable: true,
            },
            TensorViewMut {
                name: "log_dt".into(),
                data: &mut self.log_dt,
                trainable: tr.log_dt,
            },
        ]
    }
}
