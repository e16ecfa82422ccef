//! Dense complex matrix exponential by Pade-13 scaling and squaring.
//!
//! Sizes here stay near `2 dim + 6 <= 200`, where the dense route is both
//! cheaper and more accurate than time stepping; it also propagates linear
//! invariants (the Gauss constraints) exactly.

use nalgebra::DMatrix;
use num_complex::Complex64;

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

fn one_norm(m: &DMatrix<Complex64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(a)` for a square complex matrix.
pub fn expm(a: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm requires a square matrix");
    let theta13 = 5.371920351148152;
    let norm = one_norm(a);
    let s = if norm > theta13 {
        ((norm / theta13).log2().ceil() as i32).max(0)
    } else {
        0
    };
    let scaled = a.scale(2f64.powi(-s));

    let id = DMatrix::<Complex64>::identity(n, n);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let b = PADE13;
    let u_inner = a6.scale(b[13]) + a4.scale(b[11]) + a2.scale(b[9]);
    let u = &scaled
        * (&a6 * u_inner + a6.scale(b[7]) + a4.scale(b[5]) + a2.scale(b[3]) + id.scale(b[1]));
    let v_inner = a6.scale(b[12]) + a4.scale(b[10]) + a2.scale(b[8]);
    let v = &a6 * v_inner + a6.scale(b[6]) + a4.scale(b[4]) + a2.scale(b[2]) + id.scale(b[0]);

    let lhs = &v - &u;
    let rhs = &v + &u;
    let mut x = lhs
        .lu()
        .solve(&rhs)
        .expect("Pade denominator must be invertible");
    for _ in 0..s {
        x = &x * &x;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exp_of_diagonal() {
        let mut m = DMatrix::<Complex64>::zeros(3, 3);
        m[(0, 0)] = Complex64::new(-1.0, 0.0);
        m[(1, 1)] = Complex64::new(0.5, 2.0);
        m[(2, 2)] = Complex64::new(0.0, -7.0);
        let e = expm(&m);
        for i in 0..3 {
            let expect = m[(i, i)].exp();
            assert_relative_eq!(e[(i, i)].re, expect.re, epsilon = 1e-13);
            assert_relative_eq!(e[(i, i)].im, expect.im, epsilon = 1e-13);
        }
        assert!(e[(0, 1)].norm() < 1e-14);
    }

    #[test]
    fn exp_of_rotation_block() {
        // exp of [[0, -w], [w, 0]] is a rotation by w.
        let w = 3.7f64;
        let mut m = DMatrix::<Complex64>::zeros(2, 2);
        m[(0, 1)] = Complex64::new(-w, 0.0);
        m[(1, 0)] = Complex64::new(w, 0.0);
        let e = expm(&m);
        assert_relative_eq!(e[(0, 0)].re, w.cos(), epsilon = 1e-12);
        assert_relative_eq!(e[(1, 0)].re, w.sin(), epsilon = 1e-12);
    }

    #[test]
    fn semigroup_property_under_squaring() {
        // exp(2A) = exp(A)^2 with a norm large enough to force scaling.
        let n = 12;
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        let mut seed = 1u64;
        for i in 0..n {
            for j in 0..n {
                seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let x = ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
                seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let y = ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
                m[(i, j)] = Complex64::new(2.0 * x, 2.0 * y);
            }
        }
        let e1 = expm(&m);
        let e2 = expm(&m.scale(2.0));
        let diff = (&e1 * &e1 - &e2).norm() / e2.norm();
        assert!(diff < 1e-11, "semigroup deviation {diff}");
    }
}
