//! Small dense helpers on row-major slices.
//!
//! State dimensions here are tiny (a handful of coordinates), so everything works on
//! caller-owned buffers instead of allocating matrix types inside inner loops.

/// `out = A x` for a row-major `rows × cols` matrix.
pub fn matvec(a: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        out[i] = row.iter().zip(x).map(|(r, v)| r * v).sum();
    }
}

/// `out += s · A x`.
pub fn matvec_acc(a: &[f64], rows: usize, cols: usize, x: &[f64], s: f64, out: &mut [f64]) {
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        let v: f64 = row.iter().zip(x).map(|(r, v)| r * v).sum();
        out[i] += s * v;
    }
}

/// `out = Aᵀ x` for a row-major `rows × cols` matrix (so `out` has `cols` entries).
pub fn matvec_t(a: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    out[..cols].iter_mut().for_each(|o| *o = 0.0);
    for i in 0..rows {
        for j in 0..cols {
            out[j] += a[i * cols + j] * x[i];
        }
    }
}

/// `out = A B` with `A: n × m`, `B: m × p`.
pub fn matmul(a: &[f64], n: usize, m: usize, b: &[f64], p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), m * p);
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for l in 0..m {
                s += a[i * m + l] * b[l * p + j];
            }
            out[i * p + j] = s;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Frobenius norm, `‖A‖² = tr(A A*)`.
pub fn frobenius(a: &[f64]) -> f64 {
    norm(a)
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    out
}

/// Antisymmetric part `(M − Mᵀ)/2`. The result satisfies `P + Pᵀ = 0` exactly in
/// floating point because `b − a` is computed as the exact negation of `a − b`.
pub fn skew_part(m: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[i * n + j] - m[j * n + i]);
            out[i * n + j] = v;
            out[j * n + i] = -v;
        }
    }
    out
}

/// Largest entry of `|A + Aᵀ|`.
pub fn skew_defect(a: &[f64], n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((a[i * n + j] + a[j * n + i]).abs());
        }
    }
    worst
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
///
/// The argument is scaled so that its 1-norm is at most ½; eighteen Taylor terms then
/// leave a remainder below `2⁻¹⁸/18! ≈ 6·10⁻²²`, well under the 10⁻¹² target after squaring.
pub fn expm(a: &[f64], n: usize) -> Vec<f64> {
    let norm1 = (0..n).map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm1 * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();
    let mut result = identity(n);
    let mut term = identity(n);
    let mut tmp = vec![0.0; n * n];
    for k in 1..=18 {
        matmul(&term, n, n, &scaled, n, &mut tmp);
        let inv_k = 1.0 / k as f64;
        for (t, v) in term.iter_mut().zip(&tmp) {
            *t = v * inv_k;
        }
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
        }
    }
    for _ in 0..squarings {
        matmul(&result, n, n, &result.clone(), n, &mut tmp);
        result.copy_from_slice(&tmp);
    }
    result
}

/// `exp(A)` for skew-symmetric `A`, using closed forms in dimensions 1–3 and
/// [`expm`] otherwise.
pub fn expm_skew(a: &[f64], n: usize, out: &mut [f64]) {
    match n {
        1 => out[0] = 1.0,
        2 => {
            let w = a[1];
            let (s, c) = w.sin_cos();
            out.copy_from_slice(&[c, s, -s, c]);
        }
        3 => {
            // A = [[0, -w3, w2], [w3, 0, -w1], [-w2, w1, 0]] (Rodrigues).
            let w = [a[7], a[2], a[3]];
            let theta = norm(&w);
            let (s_coef, c_coef) = if theta < 1e-4 {
                let t2 = theta * theta;
                (1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0)
            } else {
                (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
            };
            let mut a2 = [0.0; 9];
            matmul(a, 3, 3, a, 3, &mut a2);
            for i in 0..3 {
                for j in 0..3 {
                    let id = if i == j { 1.0 } else { 0.0 };
                    out[i * 3 + j] = id + s_coef * a[i * 3 + j] + c_coef * a2[i * 3 + j];
                }
            }
        }
        _ => out.copy_from_slice(&expm(a, n)),
    }
}

/// `‖QᵀQ − I‖_max`, used to check rotation validity.
pub fn orthogonality_defect(q: &[f64], n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..n {
                s += q[l * n + i] * q[l * n + j];
            }
            let id = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((s - id).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn expm_of_zero_is_identity() {
        assert_eq!(expm(&[0.0; 4], 2), identity(2));
    }

    #[test]
    fn expm_matches_scalar_exponential() {
        let e = expm(&[2.5], 1);
        assert_relative_eq!(e[0], 2.5f64.exp(), max_relative = 1e-13);
    }

    #[test]
    fn expm_of_diagonal() {
        let e = expm(&[1.0, 0.0, 0.0, -3.0], 2);
        assert_relative_eq!(e[0], 1.0f64.exp(), max_relative = 1e-13);
        assert_relative_eq!(e[3], (-3.0f64).exp(), max_relative = 1e-12);
        assert_eq!(e[1], 0.0);
    }

    #[test]
    fn skew_part_is_exactly_antisymmetric() {
        let m = [0.3, 1.7, -0.2, 4.1, 2.0, 0.9, -1.1, 0.123456789, 5.0];
        let p = skew_part(&m, 3);
        assert_eq!(skew_defect(&p, 3), 0.0);
    }

    fn skew3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0..3.0f64, 3).prop_map(|w| vec![0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0])
    }

    proptest! {
        #[test]
        fn closed_form_rotation_2d_matches_series(w in -6.0..6.0f64) {
            let a = [0.0, w, -w, 0.0];
            let mut closed = [0.0; 4];
            expm_skew(&a, 2, &mut closed);
            let series = expm(&a, 2);
            for (c, s) in closed.iter().zip(&series) {
                prop_assert!((c - s).abs() < 1e-12);
            }
        }

        #[test]
        fn rodrigues_matches_series(a in skew3()) {
            let mut closed = [0.0; 9];
            expm_skew(&a, 3, &mut closed);
            let series = expm(&a, 3);
            for (c, s) in closed.iter().zip(&series) {
                prop_assert!((c - s).abs() < 1e-12);
            }
            prop_assert!(orthogonality_defect(&closed, 3) < 1e-12);
        }

        #[test]
        fn skew_exponential_is_orthogonal(vals in prop::collection::vec(-2.0..2.0f64, 16)) {
            let p = skew_part(&vals, 4);
            let mut q = vec![0.0; 16];
            expm_skew(&p, 4, &mut q);
            prop_assert!(orthogonality_defect(&q, 4) < 1e-10);
        }
    }
}
