//! Plain-slice numeric kernels shared by the graph ops and the eager
//! tensor functions.

use crate::real::Real;
use crate::tensor::{BoolMatrix, Tensor, TensorError};

/// `a[m×k] · b[k×n]`.
pub fn mm_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn mm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn mm_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// Matrix product of two 2-D tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(TensorError::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    Tensor::matrix(m, n, mm_nn(a.data(), b.data(), m, k, n))
}

/// Softmax of each row restricted to the visible (`true`) entries.
///
/// Masked entries come out as exactly zero. A row with no visible entry
/// yields all zeros instead of NaN, so attention over an empty context
/// contributes a zero vector.
pub fn masked_softmax<T: Real>(x: &Tensor<T>, mask: &BoolMatrix) -> Result<Tensor<T>, TensorError> {
    if x.rows() != mask.rows() || x.cols() != mask.cols() {
        return Err(TensorError::Dimension {
            op: "masked_softmax",
            lhs: x.shape().to_vec(),
            rhs: vec![mask.rows(), mask.cols()],
        });
    }
    let cols = x.cols();
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..x.rows() {
        let xr = x.row(r);
        let mr = mask.row(r);
        let max = xr
            .iter()
            .zip(mr)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            continue;
        }
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut total = T::zero();
        for c in 0..cols {
            if mr[c] {
                let e = (xr[c] - max).exp();
                o[c] = e;
                total = total + e;
            }
        }
        for v in o.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) struct LayerNormForward<T> {
    pub out: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Real>(
    x: &Tensor<T>,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> LayerNormForward<T> {
    let cols = x.cols();
    let n = T::of(cols as f64);
    let mut xhat = Vec::with_capacity(x.numel());
    let mut inv_std = Vec::with_capacity(x.rows());
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for c in 0..cols {
            let h = (row[c] - mean) * inv;
            xhat.push(h);
            out.push(h * gain[c] + bias[c]);
        }
    }
    LayerNormForward {
        out: Tensor::new(x.shape().to_vec(), out).expect("same shape"),
        xhat,
        inv_std,
    }
}

pub(crate) struct LayerNormBackward<T> {
    pub dx: Vec<T>,
    pub dgain: Vec<T>,
    pub dbias: Vec<T>,
}

pub(crate) fn layer_norm_backward<T: Real>(
    g: &[T],
    xhat: &[T],
    inv_std: &[T],
    gain: &[T],
    cols: usize,
) -> LayerNormBackward<T> {
    let rows = inv_std.len();
    let n = T::of(cols as f64);
    let mut dx = vec![T::zero(); g.len()];
    let mut dgain = vec![T::zero(); cols];
    let mut dbias = vec![T::zero(); cols];
    for r in 0..rows {
        let gr = &g[r * cols..(r + 1) * cols];
        let hr = &xhat[r * cols..(r + 1) * cols];
        let mut sum_d = T::zero();
        let mut sum_dh = T::zero();
        for c in 0..cols {
            let d = gr[c] * gain[c];
            sum_d = sum_d + d;
            sum_dh = sum_dh + d * hr[c];
            dgain[c] = dgain[c] + gr[c] * hr[c];
            dbias[c] = dbias[c] + gr[c];
        }
        let scale = inv_std[r] / n;
        for c in 0..cols {
            let d = gr[c] * gain[c];
            dx[r * cols + c] = scale * (n * d - sum_d - hr[c] * sum_dh);
        }
    }
    LayerNormBackward { dx, dgain, dbias }
}

/// Per-row normalization to zero mean and unit (biased) variance followed
/// by an affine map.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    if gain.numel() != x.cols() || bias.numel() != x.cols() {
        return Err(TensorError::Dimension {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    Ok(layer_norm_forward(x, gain.data(), bias.data(), eps).out)
}

#[inline]
pub fn huber<T: Real>(r: T, delta: T) -> T {
    let a = r.abs();
    if a < delta {
        r * r / (delta + delta)
    } else {
        a - delta / T::of(2.0)
    }
}

#[inline]
pub fn huber_grad<T: Real>(r: T, delta: T) -> T {
    if r.abs() < delta {
        r / delta
    } else {
        r.signum()
    }
}

/// Row softmax probabilities and the summed negative log-likelihood of
/// `labels`.
pub(crate) fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> (Vec<T>, T) {
    let mut probs = Vec::with_capacity(logits.numel());
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        total = total + (log_z - row[label]);
        probs.extend(row.iter().map(|&v| (v - log_z).exp()));
    }
    (probs, total)
}

pub(crate) fn column_sums<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
        let row = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let col = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = (random(&mut rng, 20), random(&mut rng, 12));
        let got = matmul(
            &Tensor::matrix(5, 4, a.clone()).unwrap(),
            &Tensor::matrix(4, 3, b.clone()).unwrap(),
        )
        .unwrap();
        let want = naive_matmul(&a, &b, 5, 4, 3);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_variants_agree_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, k, n) = (3, 5, 4);
        let a = random(&mut rng, m * k);
        let b = random(&mut rng, k * n);
        let want = naive_matmul(&a, &b, m, k, n);
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        for (x, y) in mm_nt(&a, &bt, m, k, n).iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in mm_tn(&at, &b, k, m, n).iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err();
        assert_eq!(
            err,
            TensorError::Dimension {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn softmax_examples() {
        let all = BoolMatrix::filled(1, 3, true);
        let s = masked_softmax(&Tensor::matrix(1, 3, vec![0.0f64, 0.0, 0.0]).unwrap(), &all).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let m = BoolMatrix::from_bits(&["011"]);
        let s = masked_softmax(&Tensor::matrix(1, 3, vec![10.0, 0.0, 0.0]).unwrap(), &m).unwrap();
        assert_eq!(s.data(), &[0.0, 0.5, 0.5]);

        let m = BoolMatrix::from_bits(&["101"]);
        let s = masked_softmax(&Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), &m).unwrap();
        let e2 = 2.0f64.exp();
        assert!((s.data()[0] - 1.0 / (1.0 + e2)).abs() < 1e-15);
        assert_eq!(s.data()[1], 0.0);
        assert!((s.data()[2] - e2 / (1.0 + e2)).abs() < 1e-15);
        assert!((s.data()[0] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let m = BoolMatrix::from_bits(&["000", "110"]);
        let x = Tensor::<f32>::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 5.0]).unwrap();
        let s = masked_softmax(&x, &m).unwrap();
        assert_eq!(&s.data()[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(s.data()[5], 0.0);
        assert!((s.data()[3] + s.data()[4] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::<f64>::full(&[3], 1.0);
        let zero = Tensor::<f64>::zeros(&[3]);
        let flat = Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(layer_norm(&flat, &one, &zero, 1e-5).unwrap().data(), &[0.0; 3]);

        let two = Tensor::matrix(1, 2, vec![-1.0f64, 1.0]).unwrap();
        let y = layer_norm(&two, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-10 && (y.data()[1] - 1.0).abs() < 1e-10);

        let eps = 1e-5;
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let y = layer_norm(&x, &Tensor::full(&[3], 2.0), &Tensor::full(&[3], 1.0), eps).unwrap();
        let std = (2.0f64 / 3.0 + eps).sqrt();
        for (i, &v) in y.data().iter().enumerate() {
            let want = 2.0 * (i as f64 + 1.0 - 2.0) / std + 1.0;
            assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        }
    }

    #[test]
    fn huber_knee_is_continuous() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(-2.0, 1.0), 1.5);
        assert_eq!(huber_grad(0.5, 1.0), 0.5);
        assert_eq!(huber_grad(-3.0, 1.0), -1.0);
    }
}
