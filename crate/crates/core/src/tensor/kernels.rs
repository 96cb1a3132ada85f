//! Dense inner loops shared by the convolution and fully-connected layers.
//!
//! All matrices are row-major slices; dimensions are passed explicitly.

use super::Scalar;

/// Defines `$name`, which runs `$imp` compiled for AVX2 when the CPU has it.
/// Without FMA contraction every lane performs the same IEEE operations in
/// the same order, so both paths give bitwise identical results.
macro_rules! multiversion {
    ($(#[$m:meta])* $name:ident => $imp:ident($($p:ident: $t:ty),*)) => {
        $(#[$m])*
        pub fn $name<T: Scalar>($($p: $t),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide<T: Scalar>($($p: $t),*) {
                    $imp($($p),*)
                }
                if wide_available() {
                    // SAFETY: wide_available checked for AVX2.
                    return unsafe { wide($($p),*) };
                }
            }
            $imp($($p),*)
        }
    };
}

#[cfg(target_arch = "x86_64")]
fn wide_available() -> bool {
    #[cfg(test)]
    if tests::PORTABLE_ONLY.with(|f| f.get()) {
        return false;
    }
    std::is_x86_feature_detected!("avx2")
}

// Register tile of the outer-product kernel: MR rows by NR columns of `out`.
const MR: usize = 4;
const NR: usize = 16;
// Partial sums per dot product.
const LANES: usize = 16;

/// `out[r, j] += sum_q a(r, q) * b[q, j]` with `q` ascending for every
/// element, whatever the tiling.
#[inline(always)]
fn gemm_acc<T: Scalar>(out: &mut [T], a: impl Fn(usize, usize) -> T, b: &[T], rows: usize, inner: usize, n: usize) {
    let full_r = rows / MR * MR;
    let full_j = n / NR * NR;
    for j0 in (0..full_j).step_by(NR) {
        for r0 in (0..full_r).step_by(MR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(r0 + r) * n + j0..][..NR]);
            }
            for q in 0..inner {
                let bv: [T; NR] = b[q * n + j0..][..NR].try_into().expect("NR columns");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a(r0 + r, q);
                    for (o, &v) in row.iter_mut().zip(&bv) {
                        *o += av * v;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(r0 + r) * n + j0..][..NR].copy_from_slice(row);
            }
        }
    }
    // edges: leftover columns of the tiled rows, then leftover rows
    let edge = |out: &mut [T], r: usize, j0: usize| {
        if j0 == n {
            return;
        }
        let out_row = &mut out[r * n + j0..(r + 1) * n];
        for q in 0..inner {
            axpy(out_row, a(r, q), &b[q * n + j0..(q + 1) * n]);
        }
    };
    for r in 0..full_r {
        edge(out, r, full_j);
    }
    for r in full_r..rows {
        edge(out, r, 0);
    }
}

multiversion!(
    /// `out[m x n] += a[m x k] * b[k x n]`
    matmul_acc => matmul_acc_impl(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize)
);

#[inline(always)]
fn matmul_acc_impl<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    gemm_acc(out, |i, p| a[i * k + p], b, m, k, n);
}

multiversion!(
    /// `out[m x k] += a[m x n] * b[k x n]^T`
    matmul_bt_acc => matmul_bt_acc_impl(out: &mut [T], a: &[T], b: &[T], m: usize, n: usize, k: usize)
);

#[inline(always)]
fn matmul_bt_acc_impl<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(out.len(), m * k);
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let (full_m, full_k) = (m / 2 * 2, k / 2 * 2);
    for i in (0..full_m).step_by(2) {
        let (a0, a1) = (&a[i * n..(i + 1) * n], &a[(i + 1) * n..(i + 2) * n]);
        for p in (0..full_k).step_by(2) {
            let (b0, b1) = (&b[p * n..(p + 1) * n], &b[(p + 1) * n..(p + 2) * n]);
            let [d00, d01, d10, d11] = dot2x2(a0, a1, b0, b1);
            out[i * k + p] += d00;
            out[i * k + p + 1] += d01;
            out[(i + 1) * k + p] += d10;
            out[(i + 1) * k + p + 1] += d11;
        }
    }
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let first = if i < full_m { full_k } else { 0 };
        for p in first..k {
            out[i * k + p] += dot(a_row, &b[p * n..(p + 1) * n]);
        }
    }
}

multiversion!(
    /// `out[k x n] += a[m x k]^T * b[m x n]`
    matmul_at_acc => matmul_at_acc_impl(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize)
);

#[inline(always)]
fn matmul_at_acc_impl<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    gemm_acc(out, |p, i| a[i * k + p], b, k, m, n);
}

#[inline(always)]
fn axpy<T: Scalar>(out: &mut [T], alpha: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Fixed pairwise reduction of the partial sums, then the tail.
#[inline(always)]
fn reduce<T: Scalar>(mut acc: [T; LANES], tail: T) -> T {
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0] + tail
}

#[inline(always)]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Independent partial sums let the compiler vectorize without
    // reassociating floats itself, and hide the add latency.
    let mut acc = [T::zero(); LANES];
    let split = a.len() / LANES * LANES;
    for (ca, cb) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        tail += *x * *y;
    }
    reduce(acc, tail)
}

/// The four dot products of `a0, a1` with `b0, b1`, each bitwise equal to [`dot`].
#[inline(always)]
fn dot2x2<T: Scalar>(a0: &[T], a1: &[T], b0: &[T], b1: &[T]) -> [T; 4] {
    let mut acc = [[T::zero(); LANES]; 4];
    let split = a0.len() / LANES * LANES;
    for c in (0..split).step_by(LANES) {
        let x0: &[T; LANES] = a0[c..c + LANES].try_into().expect("lanes");
        let x1: &[T; LANES] = a1[c..c + LANES].try_into().expect("lanes");
        let y0: &[T; LANES] = b0[c..c + LANES].try_into().expect("lanes");
        let y1: &[T; LANES] = b1[c..c + LANES].try_into().expect("lanes");
        for l in 0..LANES {
            acc[0][l] += x0[l] * y0[l];
            acc[1][l] += x0[l] * y1[l];
            acc[2][l] += x1[l] * y0[l];
            acc[3][l] += x1[l] * y1[l];
        }
    }
    let mut tail = [T::zero(); 4];
    for j in split..a0.len() {
        tail[0] += a0[j] * b0[j];
        tail[1] += a0[j] * b1[j];
        tail[2] += a1[j] * b0[j];
        tail[3] += a1[j] * b1[j];
    }
    [
        reduce(acc[0], tail[0]),
        reduce(acc[1], tail[1]),
        reduce(acc[2], tail[2]),
        reduce(acc[3], tail[3]),
    ]
}

#[cfg(test)]
pub(super) mod tests {
    use super::*;
    use std::cell::Cell;

    thread_local! {
        pub(super) static PORTABLE_ONLY: Cell<bool> = const { Cell::new(false) };
    }

    #[test]
    fn wide_and_portable_paths_agree_bitwise() {
        let (m, k, n) = (9, 131, 257);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 101) as f32 - 50.0) / 7.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 53 % 97) as f32 - 48.0) / 11.0).collect();
        let bt: Vec<f32> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let run = |portable: bool| {
            PORTABLE_ONLY.with(|f| f.set(portable));
            let mut o1 = vec![0.5f32; m * n];
            matmul_acc(&mut o1, &a, &b, m, k, n);
            let mut o2 = vec![0.5f32; m * n];
            matmul_bt_acc(&mut o2, &a, &bt, m, k, n);
            let mut o3 = vec![0.5f32; m * k];
            matmul_at_acc(&mut o3, &b[..n * m], &b, n, m, k);
            PORTABLE_ONLY.with(|f| f.set(false));
            [o1, o2, o3].map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        for (m, k, n) in [(3, 4, 5), (5, 150, 300), (2, 7, 33)] {
            check_shapes(m, k, n);
        }
    }

    fn check_shapes(m: usize, k: usize, n: usize) {
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, &a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((out[i * n + j] - want).abs() < 1e-9);
            }
        }
        // a * (b^T)^T through the bt variant
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut out2 = vec![0.0; m * n];
        matmul_bt_acc(&mut out2, &a, &bt, m, k, n);
        for (x, y) in out.iter().zip(&out2) {
            assert!((x - y).abs() < 1e-9);
        }
        // a^T path: (a^T)^T * b
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut out3 = vec![0.0; m * n];
        matmul_at_acc(&mut out3, &at, &b, k, m, n);
        for (x, y) in out.iter().zip(&out3) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
