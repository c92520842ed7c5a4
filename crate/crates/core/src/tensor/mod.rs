//! Dense tensors, a recording tape for reverse-mode differentiation, and the
//! optimizer used by every training stage.

mod checkpoint;
mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FateError, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use optim::{cosine_lr, AdamConfig, AdamState, OptimizerState, SgdConfig};
pub use params::{GradMap, Param, ParamStore};
pub use tape::{Part, Tape, Var};

/// Probability floor applied inside `log` by [`cross_entropy`].
pub const PROB_EPS: f64 = 1e-12;

/// Floating-point element type; implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits the element type")
    }

    fn from_usize_(n: usize) -> Self {
        Self::from_usize(n).expect("count fits the element type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(FateError::Shape(format!("dimensions must be positive: {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(FateError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::new`] for callers that already guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![F::zero(); n])
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: F) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FateError::Shape("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), data.iter().map(|&x| F::lit(x)).collect())
    }

    /// Zero-mean Gaussian entries with standard deviation `std`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::lit(z * std)
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::lit(rng.gen_range(-bound..=bound))).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading dimension for matrices; 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[..self.shape.len() - 1].iter().product()
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dim")
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(FateError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| G::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(G::nan))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Little-endian bytes of the values at their native width.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for x in &self.data {
            if std::mem::size_of::<F>() == 4 {
                out.extend_from_slice(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            } else {
                out.extend_from_slice(&x.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        out
    }

    pub fn argmax_row(&self, i: usize) -> usize {
        argmax(self.row(i))
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<F: PartialOrd + Copy>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of a matrix (a vector is treated as one row).
pub fn softmax_rows<F: Real>(t: &Tensor<F>) -> Result<Tensor<F>> {
    if !t.is_finite() {
        return Err(FateError::NonFinite { op: "softmax_rows" });
    }
    let cols = t.cols();
    let mut out = t.data.clone();
    for row in out.chunks_mut(cols) {
        kernels::softmax_in_place(row);
    }
    Ok(Tensor::from_parts(t.shape.clone(), out))
}

/// `-log(predicted[argmax(target)])` with the probability floored at [`PROB_EPS`].
pub fn cross_entropy<F: Real>(target: &[F], predicted: &[F]) -> Result<F> {
    if target.len() != predicted.len() || target.is_empty() {
        return Err(FateError::Shape(format!(
            "target length {} vs predicted length {}",
            target.len(),
            predicted.len()
        )));
    }
    let p = predicted[argmax(target)].max(F::lit(PROB_EPS));
    Ok(-p.ln())
}

/// One-hot row vector.
pub fn one_hot<F: Real>(index: usize, classes: usize) -> Vec<F> {
    let mut v = vec![F::zero(); classes];
    v[index] = F::one();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let t = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
        assert_eq!(softmax_rows(&t).unwrap().data(), &[0.5, 0.5]);

        let t = Tensor::<f64>::from_f64(&[1, 2], &[2f64.ln(), 0.0]).unwrap();
        let s = softmax_rows(&t).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-12);

        let t = Tensor::<f32>::from_f64(&[1, 2], &[1000.0, 0.0]).unwrap();
        let s = softmax_rows(&t).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::<f32>::new(vec![2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_rows(&t), Err(FateError::NonFinite { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0f64, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        let u = cross_entropy(&[1.0f64, 0.0], &[0.5, 0.5]).unwrap();
        assert!((u - 2f64.ln()).abs() < 1e-12);
        let v = cross_entropy(&[0.0f64, 1.0], &[0.25, 0.75]).unwrap();
        assert!((v - 0.2876820724517809).abs() < 1e-12);
        // zero probability at the target is clamped, not infinite
        let z = cross_entropy(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap();
        assert!((z - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn tensor_shape_contract() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
        let t = Tensor::<f32>::zeros(&[4, 3]);
        assert_eq!((t.rows(), t.cols()), (4, 3));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..24), cols in 1usize..6) {
            let rows = v.len() / cols;
            proptest::prop_assume!(rows >= 1);
            let t = Tensor::<f64>::new(vec![rows, cols], v[..rows * cols].to_vec()).unwrap();
            let s = softmax_rows(&t).unwrap();
            for r in 0..rows {
                let sum: f64 = s.row(r).iter().sum();
                proptest::prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn cross_entropy_zero_iff_certain(p in 0.0f64..1.0) {
            let ce = cross_entropy(&[1.0, 0.0], &[p, 1.0 - p]).unwrap();
            proptest::prop_assert!(ce >= 0.0);
            proptest::prop_assert_eq!(ce == 0.0, p == 1.0);
        }
    }
}
