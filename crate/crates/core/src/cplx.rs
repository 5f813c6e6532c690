//! Small dense complex helpers for the per-channel operators (row-major,
//! generic over the layer precision).

use num_complex::Complex;

use crate::real::Real;

pub type C<T> = Complex<T>;

#[inline]
pub fn c<T: Real>(re: T) -> C<T> {
    Complex::new(re, T::zero())
}

/// `out = M v` for a row-major `n×n` matrix.
pub fn matvec<T: Real>(m: &[C<T>], v: &[C<T>], out: &mut [C<T>]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * n..(i + 1) * n];
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// `out = Mᴴ v` for a row-major `n×n` matrix.
pub fn matvec_adjoint<T: Real>(m: &[C<T>], v: &[C<T>], out: &mut [C<T>]) {
    let n = v.len();
    out.iter_mut().for_each(|o| *o = C::new(T::zero(), T::zero()));
    for (i, vi) in v.iter().enumerate() {
        let row = &m[i * n..(i + 1) * n];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a.conj() * vi;
        }
    }
}

/// Row-major product of two `n×n` matrices.
pub fn matmul<T: Real>(a: &[C<T>], b: &[C<T>], n: usize) -> Vec<C<T>> {
    let mut out = vec![C::new(T::zero(), T::zero()); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            let brow = &b[k * n..(k + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    out
}

pub fn adjoint<T: Real>(a: &[C<T>], n: usize) -> Vec<C<T>> {
    let mut out = a.to_vec();
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = a[i * n + j].conj();
        }
    }
    out
}

/// Gauss–Jordan inverse with partial pivoting. Returns the smallest pivot
/// magnitude on failure.
pub fn inverse<T: Real>(m: &[C<T>], n: usize) -> Result<Vec<C<T>>, T> {
    let mut a = m.to_vec();
    let mut inv = vec![C::new(T::zero(), T::zero()); n * n];
    for i in 0..n {
        inv[i * n + i] = C::new(T::one(), T::zero());
    }
    for col in 0..n {
        let (piv, mag) = (col..n)
            .map(|r| (r, a[r * n + col].norm()))
            .fold((col, T::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(mag > T::epsilon() * T::of(16.0)) {
            return Err(mag);
        }
        if piv != col {
            for j in 0..n {
                a.swap(piv * n + j, col * n + j);
                inv.swap(piv * n + j, col * n + j);
            }
        }
        let scale = a[col * n + col].inv();
        for j in 0..n {
            a[col * n + j] *= scale;
            inv[col * n + j] *= scale;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f.norm_sqr() == T::zero() {
                continue;
            }
            for j in 0..n {
                let (ac, ic) = (a[col * n + j], inv[col * n + j]);
                a[r * n + j] -= f * ac;
                inv[r * n + j] -= f * ic;
            }
        }
    }
    Ok(inv)
}
