//! Matrix exponential by scaling and squaring with a degree-13 Padé
//! approximant (Higham 2005).

use nalgebra::{ComplexField, DMatrix, RealField};

use crate::error::{Error, Result};

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Largest 1-norm for which the unscaled [13/13] approximant is accurate to
/// double precision.
const THETA13: f64 = 5.371920351148152;

fn one_norm<T: ComplexField>(m: &DMatrix<T>) -> f64
where
    T::RealField: Into<f64>,
{
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|x| x.clone().modulus().into()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `e^{M}` for a square matrix of real or complex double entries.
pub fn expm<T>(m: &DMatrix<T>) -> Result<DMatrix<T>>
where
    T: ComplexField + Copy,
    T::RealField: Into<f64> + RealField,
{
    assert!(m.is_square(), "expm needs a square matrix");
    let n = m.nrows();
    if n == 0 {
        return Ok(m.clone());
    }
    let norm = one_norm(m);
    if !norm.is_finite() {
        return Err(Error::Numerical {
            what: "expm input is not finite".into(),
            residual: norm,
        });
    }
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let scale = T::from_real(nalgebra::convert(2f64.powi(-squarings)));
    let a = m * scale;

    let c = |k: usize| T::from_real(nalgebra::convert(PADE13[k]));
    let ident = DMatrix::<T>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let u_inner = &a6 * (&a6 * c(13) + &a4 * c(11) + &a2 * c(9)) + &a6 * c(7) + &a4 * c(5) + &a2 * c(3) + &ident * c(1);
    let u = &a * u_inner;
    let v = &a6 * (&a6 * c(12) + &a4 * c(10) + &a2 * c(8)) + &a6 * c(6) + &a4 * c(4) + &a2 * c(2) + &ident * c(0);

    let lu = (&v - &u).lu();
    let mut r = lu.solve(&(&v + &u)).ok_or_else(|| Error::Numerical {
        what: "singular Padé denominator".into(),
        residual: norm,
    })?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|x| !Into::<f64>::into(x.modulus()).is_finite()) {
        return Err(Error::Numerical {
            what: "matrix exponential overflowed".into(),
            residual: norm,
        });
    }
    Ok(r)
}
