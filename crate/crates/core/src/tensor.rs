//! Dense rank-N f32 tensor kernel with bit-reproducible semantics.
//!
//! Every operation uses a fixed accumulation order (no reassociation) and
//! 64-bit accumulators inside matmul and softmax row sums, so identical
//! inputs produce identical bits across runs and platforms. Values are
//! immutable after construction and safe to share across threads.

use crate::error::{Error, Result};

pub mod format;
pub mod rng;

pub use rng::{seeded_normal, SeededRng};

/// Dense row-major rank-N array of finite f32 values.
///
/// Invariants: `data.len() == product(shape)` and every element is finite.
/// Constructors and arithmetic ops enforce both.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, validating shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        if product(&shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape: shape.clone(),
                reason: format!("data length {} != product of dims", data.len()),
            });
        }
        let t = Tensor { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = product(&shape);
        Tensor::new(shape, vec![0.0; n])
    }

    /// 2-D constructor used heavily in tests.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    /// Element accessor for 2-D tensors.
    pub fn at(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.cols() + j]
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Matrix product with exact row-major semantics: for each output
    /// element the k-sum runs left to right in an f64 accumulator.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0f32; m * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            // (i,k,j) loop order: per output element the partial sums still
            // arrive in ascending k, identical to the naive (i,j,k) order.
            for kk in 0..k {
                let a = self.data[i * k + kk] as f64;
                let brow = &other.data[kk * n..(kk + 1) * n];
                for (av, b) in acc.iter_mut().zip(brow) {
                    *av += a * (*b as f64);
                }
            }
            for j in 0..n {
                out[i * n + j] = acc[j] as f32;
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        t.ensure_finite("matmul")?;
        Ok(t)
    }

    /// Row-wise softmax with per-row max subtraction and an f64 row sum.
    /// Each output row sums to 1 within 1e-6; all entries lie in (0, 1].
    pub fn softmax_rows(&self) -> Tensor {
        debug_assert_eq!(self.rank(), 2);
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mut max = f32::NEG_INFINITY;
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                let e = crate::detmath::exp((v - max) as f64);
                out[i * n + j] = e as f32;
                sum += e;
            }
            let inv = 1.0 / sum;
            for j in 0..n {
                out[i * n + j] = ((out[i * n + j] as f64) * inv) as f32;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.ensure_finite("add")?;
        Ok(t)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.ensure_finite("mul")?;
        Ok(t)
    }

    /// Multiplies every element by a finite scalar.
    pub fn scale(&self, s: f32) -> Result<Tensor> {
        if !s.is_finite() {
            return Err(Error::NonFinite("scale factor"));
        }
        let data = self.data.iter().map(|a| a * s).collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.ensure_finite("scale")?;
        Ok(t)
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: self.shape.clone(),
                reason: "expects rank 2".into(),
            });
        }
        let (m, n) = (self.rows(), self.cols());
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Reinterprets the data with a new shape of equal volume.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) || product(&shape) != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("volume must stay {}", self.data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Concatenates tensors along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| {
            Error::input("concat requires at least one tensor")
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: first.shape.clone(),
                reason: format!("axis {axis} out of range"),
            });
        }
        for p in parts {
            if p.rank() != rank
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();

        // outer = product of dims before axis, inner = product after.
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(product(&shape));
        for o in 0..outer {
            for p in parts {
                let span = p.shape[axis] * inner;
                let start = o * span;
                data.extend_from_slice(&p.data[start..start + span]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| {
            Error::input("stack requires at least one tensor")
        })?;
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
        }
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(parts.len());
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(parts.len() * first.len());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape, data })
    }

    /// Copies the `i`-th slice along the leading axis (rank drops by one).
    pub fn index_axis0(&self, i: usize) -> Result<Tensor> {
        if self.rank() < 2 || i >= self.shape[0] {
            return Err(Error::InvalidShape {
                op: "index_axis0",
                shape: self.shape.clone(),
                reason: format!("index {i} out of range"),
            });
        }
        let span = self.len() / self.shape[0];
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * span..(i + 1) * span].to_vec(),
        })
    }

    /// Extracts columns `[start, start+width)` of a 2-D tensor.
    pub fn col_block(&self, start: usize, width: usize) -> Result<Tensor> {
        if self.rank() != 2 || start + width > self.cols() {
            return Err(Error::InvalidShape {
                op: "col_block",
                shape: self.shape.clone(),
                reason: format!("columns [{start}, {}) out of range", start + width),
            });
        }
        let (m, n) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + start..i * n + start + width]);
        }
        Ok(Tensor {
            shape: vec![m, width],
            data,
        })
    }

    /// Scales each row of a 2-D tensor to unit L2 norm. Zero rows are left
    /// unchanged so the output stays finite.
    pub fn row_l2_normalize(&self) -> Tensor {
        debug_assert_eq!(self.rank(), 2);
        let (m, n) = (self.rows(), self.cols());
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mut sq = 0.0f64;
            for &v in row {
                sq += (v as f64) * (v as f64);
            }
            let inv = if sq > 0.0 { 1.0 / sq.sqrt() } else { 1.0 };
            for (j, &v) in row.iter().enumerate() {
                data[i * n + j] = ((v as f64) * inv) as f32;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn new_rejects_zero_dim() {
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let id = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let x = t2(2, 2, &[3.0, -1.5, 2.25, 7.0]);
        assert_eq!(id.matmul(&x).unwrap(), x);
        assert_eq!(x.matmul(&id).unwrap(), x);
    }

    #[test]
    fn matmul_dot_product() {
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(2, 1, &[3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data()[0], 11.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_matches_naive_reference_bit_exact() {
        // Independent oracle: naive (i,j,k) triple loop with f64 accumulator.
        let mut rng = SeededRng::new(41);
        let a = seeded_normal(&[7, 5], &mut rng).unwrap();
        let b = seeded_normal(&[5, 3], &mut rng).unwrap();
        let c = a.matmul(&b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for k in 0..5 {
                    acc += (a.at(i, k) as f64) * (b.at(k, j) as f64);
                }
                let expect = acc as f32;
                assert_eq!(c.at(i, j).to_bits(), expect.to_bits(), "({i},{j})");
            }
        }
    }

    #[test]
    fn softmax_symmetry() {
        let s = t2(1, 2, &[0.0, 0.0]).softmax_rows();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_extreme_magnitudes_stay_finite() {
        let s = t2(1, 2, &[1000.0, 0.0]).softmax_rows();
        assert!(s.data()[0] > 0.999_999);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-6);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_closed_form() {
        // High-precision oracle computed with f64 exp directly.
        let s = t2(1, 3, &[1.0, 2.0, 3.0]).softmax_rows();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, want) in s.data().iter().zip(e.iter().map(|v| v / z)) {
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
        // Frozen values for the record.
        assert!((s.data()[0] - 0.090_030_57).abs() < 1e-6);
        assert!((s.data()[1] - 0.244_728_47).abs() < 1e-6);
        assert!((s.data()[2] - 0.665_240_96).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_fuzzed() {
        let mut rng = SeededRng::new(9);
        for case in 0..1000 {
            let rows = 1 + (rng.next_u64() % 4) as usize;
            let cols = 1 + (rng.next_u64() % 9) as usize;
            let mag = if case % 3 == 0 { 1e4 } else { 1.0 };
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| rng.next_normal() * mag)
                .collect();
            let s = Tensor::matrix(rows, cols, data).unwrap().softmax_rows();
            for i in 0..rows {
                let sum: f32 = s.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "case {case} row {i}: {sum}");
                // Entries land in [0,1]; extreme-magnitude logits may
                // underflow to +0 after max subtraction.
                assert!(s.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
                if mag == 1.0 {
                    assert!(s.row(i).iter().all(|&v| v > 0.0));
                }
            }
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = SeededRng::new(11);
        let x = seeded_normal(&[4, 6], &mut rng).unwrap();
        let shifted = x.add(&Tensor::new(vec![4, 6], vec![3.25; 24]).unwrap()).unwrap();
        let a = x.softmax_rows();
        let b = shifted.softmax_rows();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn add_mul_scale_basics() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let zero = Tensor::zeros(vec![2, 2]).unwrap();
        assert_eq!(a.add(&zero).unwrap(), a);
        let ones = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
        assert_eq!(a.mul(&ones).unwrap(), a);
        assert_eq!(a.scale(1.0).unwrap(), a);
        assert_eq!(a.scale(0.0).unwrap(), zero);
        assert_eq!(
            a.scale(2.0).unwrap().data(),
            &[2.0, 4.0, 6.0, 8.0]
        );
        assert!(a.add(&t2(1, 2, &[0.0, 0.0])).is_err());
        assert!(a.scale(f32::NAN).is_err());
    }

    #[test]
    fn transpose_involution() {
        let a = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let tt = a.transpose().unwrap().transpose().unwrap();
        assert_eq!(tt, a);
        assert_eq!(a.transpose().unwrap().at(2, 1), 6.0);
    }

    #[test]
    fn reshape_preserves_data() {
        let a = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = a.reshape(vec![3, 2]).unwrap();
        assert_eq!(r.data(), a.data());
        assert!(a.reshape(vec![4, 2]).is_err());
    }

    #[test]
    fn concat_axis0_and_axis1() {
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(1, 2, &[3.0, 4.0]);
        let v = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(v.shape(), &[2, 2]);
        assert_eq!(v.data(), &[1.0, 2.0, 3.0, 4.0]);
        let h = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(h.shape(), &[1, 4]);
        assert_eq!(h.data(), &[1.0, 2.0, 3.0, 4.0]);
        let c = t2(2, 2, &[0.0; 4]);
        assert!(Tensor::concat(&[&a, &c], 1).is_err());
    }

    #[test]
    fn stack_and_index_axis0_roundtrip() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.index_axis0(0).unwrap(), a);
        assert_eq!(s.index_axis0(1).unwrap(), b);
    }

    #[test]
    fn col_block_splits_columns() {
        let a = t2(2, 4, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let left = a.col_block(0, 2).unwrap();
        let right = a.col_block(2, 2).unwrap();
        assert_eq!(left.data(), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(right.data(), &[3.0, 4.0, 7.0, 8.0]);
        let merged = Tensor::concat(&[&left, &right], 1).unwrap();
        assert_eq!(merged, a);
    }

    #[test]
    fn row_l2_normalize_units_and_zero_row() {
        let a = t2(2, 2, &[3.0, 4.0, 0.0, 0.0]);
        let n = a.row_l2_normalize();
        assert!((n.at(0, 0) - 0.6).abs() < 1e-6);
        assert!((n.at(0, 1) - 0.8).abs() < 1e-6);
        assert_eq!(n.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn ops_bit_reproducible() {
        let run = || {
            let mut rng = SeededRng::new(1234);
            let a = seeded_normal(&[6, 5], &mut rng).unwrap();
            let b = seeded_normal(&[5, 4], &mut rng).unwrap();
            let c = a.matmul(&b).unwrap().softmax_rows();
            c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
