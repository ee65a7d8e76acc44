//! Dense tensors and the pure (non-differentiable) numeric kernels.
//!
//! Row-major storage. The differentiable versions of these kernels live on
//! the tape in [`crate::autodiff`]; the functions here are the plain-array
//! forms used by no-grad forwards, analysis code and test oracles.

use crate::error::{CoreError, Result};
use crate::num::{Scalar, KL_LOG_FLOOR};
use crate::rng::CounterRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Dimension {
                context: format!("tensor of {} elements", data.len()),
                left: shape.clone(),
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Seeded normal init, scale * N(0, 1) per element.
    pub fn randn(shape: Vec<usize>, scale: f64, rng: &mut CounterRng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::of(rng.normal() * scale)).collect();
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(CoreError::NonFinite(context.to_string()))
        }
    }
}

fn check_same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, context: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::Dimension {
            context: context.to_string(),
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

// ── Raw matmul kernels (shared by forward and backward passes) ──────

/// C[m,n] += A[m,k] · B[k,n]
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * n + j] += s;
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Standard matrix product of two 2-D tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
        return Err(CoreError::Dimension {
            context: "matmul".to_string(),
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(vec![m, n]);
    matmul_acc(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

// ── Softmax ─────────────────────────────────────────────────────────

/// Row-wise softmax of `logits + mask`, where mask entries are 0 or -inf.
///
/// Max-subtraction stabilized. Masked entries come out exactly 0. A row with
/// every entry masked returns all zeros instead of erroring; callers exclude
/// such rows downstream.
pub fn softmax_rows_with_additive_mask<T: Scalar>(
    logits: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_same_shape(logits, mask, "softmax_rows_with_additive_mask")?;
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(vec![rows, cols]);
    for i in 0..rows {
        let lrow = logits.row(i);
        let mrow = mask.row(i);
        let orow = &mut out.data_mut()[i * cols..(i + 1) * cols];
        softmax_row_masked(lrow, |j| mrow[j] != T::zero(), orow);
    }
    Ok(out)
}

/// One softmax row with a predicate marking blocked columns.
pub fn softmax_row_masked<T: Scalar, F: Fn(usize) -> bool>(logits: &[T], blocked: F, out: &mut [T]) {
    let mut max = T::neg_infinity();
    for (j, &l) in logits.iter().enumerate() {
        if !blocked(j) && l > max {
            max = l;
        }
    }
    if max == T::neg_infinity() {
        // fully masked row
        for o in out.iter_mut() {
            *o = T::zero();
        }
        return;
    }
    let mut sum = T::zero();
    for (j, &l) in logits.iter().enumerate() {
        if blocked(j) {
            out[j] = T::zero();
        } else {
            let e = (l - max).exp();
            out[j] = e;
            sum += e;
        }
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Plain row-wise softmax (no masking).
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(vec![rows, cols]);
    for i in 0..rows {
        let lrow = logits.row(i);
        let orow = &mut out.data_mut()[i * cols..(i + 1) * cols];
        softmax_row_masked(lrow, |_| false, orow);
    }
    out
}

// ── KL divergence kernels ───────────────────────────────────────────

/// Σ p·(ln(p+ε) − ln(q+ε)) over one row, with the 0·log(0/q) = 0 convention.
///
/// The ε floor (1e-12) keeps logarithms finite, which also covers the
/// q = 0, p > 0 case that would otherwise be undefined. Clamped at 0 so the
/// floor cannot produce a microscopically negative divergence.
pub fn reverse_kl_row<T: Scalar>(p: &[T], q: &[T]) -> T {
    let eps = T::of(KL_LOG_FLOOR);
    let mut s = T::zero();
    for (&pv, &qv) in p.iter().zip(q) {
        if pv > T::zero() {
            s += pv * ((pv + eps).ln() - (qv + eps).ln());
        }
    }
    if s < T::zero() {
        T::zero()
    } else {
        s
    }
}

/// Row-wise reverse KL divergence KL(p_row ‖ q_row) of two [rows × V]
/// probability tensors. Returns a length-`rows` vector.
pub fn reverse_kl_rows<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(p, q, "reverse_kl_rows")?;
    let rows = p.rows();
    let mut out = Tensor::zeros(vec![rows]);
    for i in 0..rows {
        out.data_mut()[i] = reverse_kl_row(p.row(i), q.row(i));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]),
            Err(CoreError::Dimension { .. })
        ));
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = t(2, 2, &[3.0, 4.0, 5.0, 6.0]);
        let c = matmul(&i2, &b).unwrap();
        assert_eq!(c.data(), b.data());
    }

    #[test]
    fn matmul_by_hand() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let a = t(1, 2, &[1.0, 2.0]);
        let b = t(2, 1, &[3.0, 4.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = CounterRng::new(11, 0);
        let a = Tensor::<f64>::randn(vec![4, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![4, 4], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        // independent naive oracle
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.at(i, p) * b.at(p, j);
                }
                assert!((c.at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = t(1, 2, &[1.0, 2.0]);
        let b = t(3, 1, &[1.0, 2.0, 3.0]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 1]"), "{msg}");
    }

    #[test]
    fn softmax_uniform() {
        let l = t(1, 3, &[0.0, 0.0, 0.0]);
        let m = t(1, 3, &[0.0, 0.0, 0.0]);
        let s = softmax_rows_with_additive_mask(&l, &m).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_survivor() {
        let l = t(1, 2, &[5.0, 1.0]);
        let m = t(1, 2, &[0.0, f64::NEG_INFINITY]);
        let s = softmax_rows_with_additive_mask(&l, &m).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_partial_mask_matches_pair_sigmoid() {
        // logits [1,2,3], mask [0,0,-inf] -> softmax over (1,2):
        // e^1/(e^1+e^2) = 1/(1+e) computed to full f64 precision.
        let l = t(1, 3, &[1.0, 2.0, 3.0]);
        let m = t(1, 3, &[0.0, 0.0, f64::NEG_INFINITY]);
        let s = softmax_rows_with_additive_mask(&l, &m).unwrap();
        let expect0 = 1.0 / (1.0 + 1.0f64.exp());
        let expect1 = 1.0f64.exp() / (1.0 + 1.0f64.exp());
        assert!((s.at(0, 0) - expect0).abs() < 1e-12);
        assert!((s.at(0, 1) - expect1).abs() < 1e-12);
        assert_eq!(s.at(0, 2), 0.0);
        assert!((s.at(0, 0) - 0.26894).abs() < 1e-5);
        assert!((s.at(0, 1) - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_all_masked_row_is_zero() {
        let l = t(1, 3, &[1.0, 2.0, 3.0]);
        let m = Tensor::full(vec![1, 3], f64::NEG_INFINITY);
        let s = softmax_rows_with_additive_mask(&l, &m).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = CounterRng::new(5, 0);
        for _ in 0..100 {
            let l = Tensor::<f64>::randn(vec![3, 8], 3.0, &mut rng);
            let mut mask = Tensor::zeros(vec![3, 8]);
            for v in mask.data_mut().iter_mut() {
                if rng.uniform() < 0.4 {
                    *v = f64::NEG_INFINITY;
                }
            }
            let s = softmax_rows_with_additive_mask(&l, &mask).unwrap();
            for i in 0..3 {
                let any_open = (0..8).any(|j| mask.at(i, j) == 0.0);
                let sum: f64 = s.row(i).iter().sum();
                if any_open {
                    assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
                } else {
                    assert_eq!(sum, 0.0);
                }
                for j in 0..8 {
                    if mask.at(i, j) != 0.0 {
                        assert_eq!(s.at(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn reverse_kl_identical_is_zero() {
        let p = t(1, 2, &[0.5, 0.5]);
        let r = reverse_kl_rows(&p, &p).unwrap();
        assert!(r.data()[0].abs() < 1e-12);
    }

    #[test]
    fn reverse_kl_hand_values() {
        // p=[1,0], q=[0.5,0.5] -> log 2
        let p = t(1, 2, &[1.0, 0.0]);
        let q = t(1, 2, &[0.5, 0.5]);
        let r = reverse_kl_rows(&p, &q).unwrap();
        assert!((r.data()[0] - std::f64::consts::LN_2).abs() < 1e-9);

        // p=[0.25,0.75], q=[0.75,0.25] -> 0.25 ln(1/3) + 0.75 ln 3
        let p = t(1, 2, &[0.25, 0.75]);
        let q = t(1, 2, &[0.75, 0.25]);
        let r = reverse_kl_rows(&p, &q).unwrap();
        let expect = 0.25 * (1.0f64 / 3.0).ln() + 0.75 * 3.0f64.ln();
        assert!((r.data()[0] - expect).abs() < 1e-9);
        assert!((r.data()[0] - 0.5493).abs() < 1e-4);
    }

    #[test]
    fn reverse_kl_nonnegative_on_random_distributions() {
        let mut rng = CounterRng::new(17, 0);
        for _ in 0..500 {
            let mk = |rng: &mut CounterRng| {
                let mut v: Vec<f64> = (0..6).map(|_| rng.uniform() + 1e-3).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                Tensor::matrix(1, 6, v).unwrap()
            };
            let p = mk(&mut rng);
            let q = mk(&mut rng);
            let r = reverse_kl_rows(&p, &q).unwrap();
            assert!(r.data()[0] >= 0.0);
        }
    }
}
