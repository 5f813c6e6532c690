//! Single-layer LSTM baseline with batched full backpropagation through time.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Parameters, TensorView, TensorViewMut};
use crate::real::Real;

/// Gate blocks are laid out `[input, forget, cell, output]` along the
/// `4·hidden` axis.
#[derive(Clone, Debug)]
pub struct LstmParams<T: Real> {
    pub w_x: Array2<T>,
    pub w_h: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Clone, Debug)]
pub struct LstmCache<T: Real> {
    x: Array3<T>,
    /// Post-activation gates, `[T, B, 4H]`.
    gates: Array3<T>,
    /// Cell states, `[T, B, H]`.
    cells: Array3<T>,
    /// Hidden states, `[T, B, H]`.
    hidden: Array3<T>,
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> LstmParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Array2::zeros((input, 4 * hidden)),
            w_h: Array2::zeros((hidden, 4 * hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    /// Uniform(−1/√hidden, 1/√hidden) for every weight and bias.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut draw =
            |shape: (usize, usize)| Array2::from_shape_simple_fn(shape, || T::of(rng.random_range(-bound..bound)));
        let w_x = draw((input, 4 * hidden));
        let w_h = draw((hidden, 4 * hidden));
        let bias = draw((1, 4 * hidden)).index_axis_move(Axis(0), 0);
        Self { w_x, w_h, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.nrows()
    }

    /// Zero initial state; returns hidden states `[B, T, H]`.
    pub fn forward(&self, x: ArrayView3<T>) -> Result<(Array3<T>, LstmCache<T>)> {
        let (batch, len, input) = x.dim();
        if input != self.input_dim() {
            return Err(Error::Contract(format!(
                "LSTM input has width {input}, expected {}",
                self.input_dim()
            )));
        }
        let hd = self.hidden_dim();
        let xs = x.as_standard_layout();
        let flat = xs
            .view()
            .into_shape_with_order((batch * len, input))
            .expect("standard layout");
        let mut pre_x = Array2::<T>::zeros((batch * len, 4 * hd));
        general_mat_mul(T::one(), &flat, &self.w_x, T::zero(), &mut pre_x);
        let pre_x = pre_x.into_shape_with_order((batch, len, 4 * hd)).expect("contiguous");

        let mut gates = Array3::<T>::zeros((len, batch, 4 * hd));
        let mut cells = Array3::<T>::zeros((len, batch, hd));
        let mut hidden = Array3::<T>::zeros((len, batch, hd));
        let mut z = Array2::<T>::zeros((batch, 4 * hd));
        for t in 0..len {
            z.assign(&pre_x.slice(s![.., t, ..]));
            z += &self.bias;
            if t > 0 {
                general_mat_mul(
                    T::one(),
                    &hidden.index_axis(Axis(0), t - 1),
                    &self.w_h,
                    T::one(),
                    &mut z,
                );
            }
            for b in 0..batch {
                for k in 0..hd {
                    let i = sigmoid(z[[b, k]]);
                    let f = sigmoid(z[[b, hd + k]]);
                    let g = z[[b, 2 * hd + k]].tanh();
                    let o = sigmoid(z[[b, 3 * hd + k]]);
                    let c_prev = if t > 0 { cells[[t - 1, b, k]] } else { T::zero() };
                    let c = f * c_prev + i * g;
                    gates[[t, b, k]] = i;
                    gates[[t, b, hd + k]] = f;
                    gates[[t, b, 2 * hd + k]] = g;
                    gates[[t, b, 3 * hd + k]] = o;
                    cells[[t, b, k]] = c;
                    hidden[[t, b, k]] = o * c.tanh();
                }
            }
            if hidden.index_axis(Axis(0), t).iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    step: t,
                    what: "non-finite LSTM state".into(),
                });
            }
        }
        let y = hidden.view().permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
        Ok((
            y,
            LstmCache {
                x: x.to_owned(),
                gates,
                cells,
                hidden,
            },
        ))
    }

    pub fn backward(&self, cache: &LstmCache<T>, dy: ArrayView3<T>) -> Result<(Self, Array3<T>)> {
        let (batch, len, input) = cache.x.dim();
        let hd = self.hidden_dim();
        if dy.dim() != (batch, len, hd) {
            return Err(Error::Contract("LSTM cache does not match upstream gradient".into()));
        }
        let mut grads = Self::zeros(input, hd);
        let mut dz_all = Array3::<T>::zeros((batch, len, 4 * hd));
        let mut dz = Array2::<T>::zeros((batch, 4 * hd));
        let mut dh_next = Array2::<T>::zeros((batch, hd));
        let mut dc_next = Array2::<T>::zeros((batch, hd));
        let one = T::one();
        for t in (0..len).rev() {
            for b in 0..batch {
                for k in 0..hd {
                    let i = cache.gates[[t, b, k]];
                    let f = cache.gates[[t, b, hd + k]];
                    let g = cache.gates[[t, b, 2 * hd + k]];
                    let o = cache.gates[[t, b, 3 * hd + k]];
                    let c = cache.cells[[t, b, k]];
                    let c_prev = if t > 0 { cache.cells[[t - 1, b, k]] } else { T::zero() };
                    let tc = c.tanh();
                    let dh = dy[[b, t, k]] + dh_next[[b, k]];
                    let dc = dh * o * (one - tc * tc) + dc_next[[b, k]];
                    dz[[b, k]] = dc * g * i * (one - i);
                    dz[[b, hd + k]] = dc * c_prev * f * (one - f);
                    dz[[b, 2 * hd + k]] = dc * i * (one - g * g);
                    dz[[b, 3 * hd + k]] = dh * tc * o * (one - o);
                    dc_next[[b, k]] = dc * f;
                }
            }
            dz_all.slice_mut(s![.., t, ..]).assign(&dz);
            if t > 0 {
                let h_prev = cache.hidden.index_axis(Axis(0), t - 1);
                general_mat_mul(one, &h_prev.t(), &dz, one, &mut grads.w_h);
                general_mat_mul(one, &dz, &self.w_h.t(), T::zero(), &mut dh_next);
            }
        }
        let flat_dz = dz_all
            .view()
            .into_shape_with_order((batch * len, 4 * hd))
            .expect("contiguous");
        let xs = cache.x.as_standard_layout();
        let flat_x = xs
            .view()
            .into_shape_with_order((batch * len, input))
            .expect("standard layout");
        general_mat_mul(one, &flat_x.t(), &flat_dz, T::zero(), &mut grads.w_x);
        grads.bias = flat_dz.sum_axis(Axis(0));
        let mut dx = Array2::<T>::zeros((batch * len, input));
        general_mat_mul(one, &flat_dz, &self.w_x.t(), T::zero(), &mut dx);
        let dx = dx.into_shape_with_order((batch, len, input)).expect("contiguous");
        Ok((grads, dx))
    }
}

impl<T: Real> Parameters<T> for LstmParams<T> {
    fn tensors(&self) -> Vec<TensorView<'_, T>> {
        vec![
            TensorView {
                name: "w_x".into(),
                shape: self.w_x.shape().to_vec(),
                data: self.w_x.as_slice().expect("standard layout"),
                trainable: true,
            },
            TensorView {
                name: "w_h".into(),
                shape: self.w_h.shape().to_vec(),
                data: self.w_h.as_slice().expect("standard layout"),
                trainable: true,
            },
            TensorView {
                name: "bias".into(),
                shape: self.bias.shape().to_vec(),
                data: self.bias.as_slice().expect("standard layout"),
                trainable: true,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_, T>> {
        vec![
            TensorViewMut {
                name: "w_x".into(),
                data: self.w_x.as_slice_mut().expect("standard layout"),
                trainable: true,
            },
            TensorViewMut {
                name: "w_h".into(),
                data: self.w_h.as_slice_mut().expect("standard layout"),
                trainable: true,
            },
            TensorViewMut {
                name: "bias".into(),
                data: self.bias.as_slice_mut().expect("standard layout"),
                trainable: true,
            },
        ]
    }
}
