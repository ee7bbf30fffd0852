//! Dense linear algebra and elementwise primitives.
//!
//! Vectors are plain `[f64]` slices. Every reduction sums left to right in
//! index order, so results are bit-reproducible across runs and thread
//! counts.

use crate::error::{shape, Error, Result};

/// Norms below this are treated as zero by [`cossim`].
pub const ZERO_NORM_THRESHOLD: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(shape(format!("matrix dimensions must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure("non-finite matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Stacks equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape(format!("row {i} has length {}, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(shape(format!(
                "matvec: {}x{} matrix against vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`, accumulated row by row.
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(shape(format!(
                "transposed matvec: {}x{} matrix against vector of length {}",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }

    /// Adds `scale · a bᵀ` in place.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            for (w, &bc) in self.row_mut(r).iter_mut().zip(b) {
                *w += s * bc;
            }
        }
    }
}

/// Standard matrix product with a fixed `i, j, k` loop order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape(format!(
            "matmul: {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`.
pub fn cossim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape(format!("cossim: lengths {} and {}", a.len(), b.len())));
    }
    let na = norm(a);
    let nb = norm(b);
    if na < ZERO_NORM_THRESHOLD || nb < ZERO_NORM_THRESHOLD {
        return Err(Error::ZeroNorm);
    }
    // Product of norms is commutative in IEEE arithmetic, so the result is
    // exactly symmetric.
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity together with its gradients with respect to `a` and `b`.
pub fn cossim_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(shape(format!("cossim: lengths {} and {}", a.len(), b.len())));
    }
    let na = norm(a);
    let nb = norm(b);
    if na < ZERO_NORM_THRESHOLD || nb < ZERO_NORM_THRESHOLD {
        return Err(Error::ZeroNorm);
    }
    let inv = 1.0 / (na * nb);
    let c = dot(a, b) * inv;
    let ga = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi * inv - c * ai / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| ai * inv - c * bi / (nb * nb))
        .collect();
    Ok((c, ga, gb))
}

fn log_sum_exp_parts(logits: &[f64]) -> (f64, f64) {
    // Returns (max, ln Σ exp(z - max)); the arg-max term contributes exactly
    // one, so the remainder goes through ln_1p for small-probability accuracy.
    let (arg, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) });
    let mut rest = 0.0;
    for (i, &z) in logits.iter().enumerate() {
        if i != arg {
            rest += (z - max).exp();
        }
    }
    (max, rest.ln_1p())
}

/// Softmax probabilities with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let (max, lse) = log_sum_exp_parts(logits);
    logits.iter().map(|&z| (z - max - lse).exp()).collect()
}

/// Cross-entropy against a class index, with gradient w.r.t. the logits.
pub fn softmax_ce(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(shape(format!("target {target} out of range for {} logits", logits.len())));
    }
    let (max, lse) = log_sum_exp_parts(logits);
    let loss = lse - (logits[target] - max);
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - max - lse).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Cross-entropy `-Σ tᵢ log pᵢ` against a soft target.
pub fn softmax_ce_soft(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if target.len() != logits.len() {
        return Err(shape(format!(
            "soft target of length {} for {} logits",
            target.len(),
            logits.len()
        )));
    }
    let (max, lse) = log_sum_exp_parts(logits);
    let mut loss = 0.0;
    let mut mass = 0.0;
    for (&z, &t) in logits.iter().zip(target) {
        if t != 0.0 {
            loss += t * (lse - (z - max));
        }
        mass += t;
    }
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| (z - max - lse).exp() * mass - t)
        .collect();
    Ok((loss, grad))
}

/// One-hot encoding.
pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let m = b[0].len();
        let inner = b.len();
        let mut out = vec![vec![0.0; m]; n];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for k in 0..inner {
                    s += a[i][k] * b[k][j];
                }
                *cell = s;
            }
        }
        out
    }

    #[test]
    fn cossim_examples() {
        assert_eq!(cossim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cossim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = cossim(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        // 32 / (sqrt(14) * sqrt(77))
        let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.9746318).abs() < 1e-6);
    }

    #[test]
    fn cossim_rejects_zero_and_mismatched() {
        assert!(matches!(cossim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
        assert!(matches!(cossim(&[1e-13, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
        assert!(matches!(cossim(&[1.0], &[1.0, 0.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn cossim_symmetry_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(cossim(&a, &b).unwrap(), cossim(&b, &a).unwrap());
            let c: f64 = rng.random_range(0.01..100.0);
            let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
            assert!((cossim(&a, &scaled).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cossim_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..20 {
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, ga, gb) = cossim_with_grad(&a, &b).unwrap();
            for i in 0..5 {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[i] += h;
                am[i] -= h;
                let fd = (cossim(&ap, &b).unwrap() - cossim(&am, &b).unwrap()) / (2.0 * h);
                assert!((fd - ga[i]).abs() < 1e-7);
                let mut bp = b.clone();
                let mut bm = b.clone();
                bp[i] += h;
                bm[i] -= h;
                let fd = (cossim(&a, &bp).unwrap() - cossim(&a, &bm).unwrap()) / (2.0 * h);
                assert!((fd - gb[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu(&[0.0; 4]), vec![0.0; 4]);
        assert_eq!(relu(&[0.3, -0.7]), vec![0.3, 0.0]);
    }

    #[test]
    fn matmul_examples() {
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        let a = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
        assert!(matches!(matmul(&a, &a), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(n, k, m) in &[(3, 4, 2), (1, 1, 1), (5, 7, 3), (8, 2, 9)] {
            let a: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let b: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let expected = naive_matmul(&a, &b);
            let got = matmul(&Matrix::from_rows(&a).unwrap(), &Matrix::from_rows(&b).unwrap()).unwrap();
            for i in 0..n {
                for j in 0..m {
                    assert_eq!(got.get(i, j).to_bits(), expected[i][j].to_bits());
                }
            }
        }
    }

    #[test]
    fn softmax_ce_examples() {
        let (loss, grad) = softmax_ce(&[0.0, 0.0], 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((grad[0] + 0.5).abs() < 1e-15 && (grad[1] - 0.5).abs() < 1e-15);
        // ln(1 + e^-20)
        let (loss, _) = softmax_ce(&[10.0, -10.0], 0).unwrap();
        assert!((loss - (-20.0f64).exp().ln_1p()).abs() < 1e-24);
        assert!((loss - 2.06e-9).abs() < 0.01e-9);
    }

    #[test]
    fn soft_target_with_one_hot_matches_hard() {
        let logits = [0.3, -1.2, 2.5, 0.0];
        let (lh, gh) = softmax_ce(&logits, 2).unwrap();
        let (ls, gs) = softmax_ce_soft(&logits, &one_hot(2, 4)).unwrap();
        assert!((lh - ls).abs() < 1e-15);
        for (a, b) in gh.iter().zip(&gs) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ce_soft_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        for _ in 0..100 {
            let n = rng.random_range(2..8);
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = t.iter().sum();
            t.iter_mut().for_each(|v| *v /= s);
            let (_, g) = softmax_ce_soft(&logits, &t).unwrap();
            for i in 0..n {
                let mut p = logits.clone();
                let mut m = logits.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (softmax_ce_soft(&p, &t).unwrap().0 - softmax_ce_soft(&m, &t).unwrap().0) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(rel < 1e-6, "rel err {rel}");
            }
        }
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.5]), 0);
    }
}
