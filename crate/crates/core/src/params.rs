//! Named flat views over trainable tensors, shared by the optimizer,
//! gradient clipping and the checkpoint writer.

use crate::real::Real;

pub struct TensorView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
    pub trainable: bool,
}

pub struct TensorViewMut<'a, T> {
    pub name: String,
    pub data: &'a mut [T],
    pub trainable: bool,
}

/// A parameter container. `tensors` and `tensors_mut` must enumerate the
/// same tensors in the same order; gradient buffers use the same type.
pub trait Parameters<T: Real>: Clone {
    fn tensors(&self) -> Vec<TensorView<'_, T>>;
    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_, T>>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(T::zero());
        }
        z
    }

    /// Zero every tensor that is not trainable.
    fn mask_frozen(&mut self) {
        for t in self.tensors_mut() {
            if !t.trainable {
                t.data.fill(T::zero());
            }
        }
    }

    /// Global L2 norm over trainable tensors, accumulated in double.
    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .filter(|t| t.trainable)
            .flat_map(|t| t.data.iter())
            .map(|x| {
                let v = x.f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    fn add_assign(&mut self, other: &Self) {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            dst.data.iter_mut().zip(src.data).for_each(|(a, b)| *a += *b);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

pub(crate) fn prefixed<'a, T>(prefix: &str, views: Vec<TensorView<'a, T>>) -> Vec<TensorView<'a, T>> {
    views
        .into_iter()
        .map(|mut v| {
            v.name = format!("{prefix}.{}", v.name);
            v
        })
        .collect()
}

pub(crate) fn prefixed_mut<'a, T>(prefix: &str, views: Vec<TensorViewMut<'a, T>>) -> Vec<TensorViewMut<'a, T>> {
    views
        .into_iter()
        .map(|mut v| {
            v.name = format!("{prefix}.{}", v.name);
            v
        })
        .collect()
}
