//! Dense row-major matrix kernels shared by conv, linear, and attention.
//!
//! Everything is expressed through one accumulating NN product plus explicit
//! transposes. The i-k-j loop order keeps the inner loop as independent
//! elementwise multiply-adds over contiguous rows, which the compiler
//! vectorizes without any reassociation of float sums.

use super::Scalar;

/// `c[m,n] += a[m,k] · b[k,n]`, all row-major.
pub fn matmul_nn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Fresh `a[m,k] · b[k,n]`.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_nn_acc(a, b, &mut c, m, k, n);
    c
}

/// Row-major transpose of an `rows × cols` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_by_hand() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![5.0f64, 6.0, 7.0, 8.0];
        let c = matmul_nn(&a, &b, 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_round_trips() {
        let a: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let t = transpose(&a, 3, 4);
        let back = transpose(&t, 4, 3);
        assert_eq!(a, back);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[1], 4.0);
        assert_eq!(t[4 * 3 - 1], 11.0);
    }
}
