//! Orthonormal DCT-II along the temporal axis and replicate padding.
//!
//! The transform is the direct `O(T²)` matrix product. `M[k][t] =
//! s_k · cos(π (2t + 1) k / 2T)` with `s_0 = √(1/T)` and `s_k = √(2/T)`, so
//! `M` is orthogonal and the inverse is `Mᵀ`.

use std::f64::consts::PI;

/// `T × T` orthonormal DCT-II matrix, row `k` is basis function `k`.
pub fn dct_matrix(len: usize) -> Vec<f64> {
    let mut m = vec![0.0; len * len];
    if len == 0 {
        return m;
    }
    let n = len as f64;
    for k in 0..len {
        let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for t in 0..len {
            m[k * len + t] = s * (PI * (2 * t + 1) as f64 * k as f64 / (2.0 * n)).cos();
        }
    }
    m
}

/// DCT coefficients of one sequence.
pub fn dct(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = dct_matrix(n);
    (0..n)
        .map(|k| m[k * n..(k + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Inverse of [`dct`].
pub fn idct(coeffs: &[f64]) -> Vec<f64> {
    let n = coeffs.len();
    let m = dct_matrix(n);
    (0..n)
        .map(|t| (0..n).map(|k| m[k * n + t] * coeffs[k]).sum())
        .collect()
}

/// Applies [`dct`] to each contiguous length-`len` row of `data`.
pub fn dct_rows(data: &[f64], len: usize) -> Vec<f64> {
    transform_rows(data, len, false)
}

/// Applies [`idct`] to each contiguous length-`len` row of `data`.
pub fn idct_rows(data: &[f64], len: usize) -> Vec<f64> {
    transform_rows(data, len, true)
}

fn transform_rows(data: &[f64], len: usize, inverse: bool) -> Vec<f64> {
    assert!(len > 0 && data.len() % len == 0, "row length must divide the data");
    let m = dct_matrix(len);
    let mut out = vec![0.0; data.len()];
    for (row, dst) in data.chunks(len).zip(out.chunks_mut(len)) {
        for (i, d) in dst.iter_mut().enumerate() {
            *d = (0..len)
                .map(|j| if inverse { m[j * len + i] } else { m[i * len + j] } * row[j])
                .sum();
        }
    }
    out
}

/// Repeats the last element `extra` times. An empty input stays empty.
pub fn replicate_pad(past: &[f64], extra: usize) -> Vec<f64> {
    let mut out = past.to_vec();
    if let Some(&last) = past.last() {
        out.extend(std::iter::repeat_n(last, extra));
    }
    out
}
