//! Dense tensors, a reverse-mode differentiation graph and an Adam optimizer.
//!
//! Values live in [`Tensor`], an immutable-by-convention row-major array. A
//! [`Graph`] records operations on [`Var`] handles and replays them backwards
//! in [`Graph::backward`]. Graphs are single-threaded; tensors are plain data
//! and can be shared freely across threads.

mod graph;
pub(crate) mod kernels;
mod optim;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamConfig, LrSchedule, OptimizerState};

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

/// Element type tag, also used as the on-disk dtype byte in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Floating point element type usable in a [`Graph`].
pub trait Scalar: Float + FromPrimitive + Default + Debug + Send + Sync + 'static {
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    /// Elementwise `exp` in place.
    fn exp_slice(xs: &mut [Self]) {
        for v in xs {
            *v = v.exp();
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path $(, $exp:path)?) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;
$(
            fn exp_slice(xs: &mut [Self]) {
                $exp(xs)
            }
)?

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in c[..m * n].iter_mut() {
                        *v = *v * beta;
                    }
                    return;
                }
                let max_a = (m as isize - 1) * rsa + (k as isize - 1) * csa;
                let max_b = (k as isize - 1) * rsb + (n as isize - 1) * csb;
                assert!((max_a as usize) < a.len() && (max_b as usize) < b.len());
                // SAFETY: the bounds of every strided access were checked above and
                // `c` is a dense row-major m×n block.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm, kernels::exp_f32);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

/// Row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(dim_err(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Bilinear resize of a `C×H×W` tensor (align-corners off).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let &[c, h, w] = self.shape.as_slice() else {
            return Err(dim_err(format!("resize expects C×H×W, got {:?}", self.shape)));
        };
        if out_h == 0 || out_w == 0 {
            return Err(dim_err("resize target must be positive"));
        }
        let ys = kernels::axis_taps::<T>(h, out_h);
        let xs = kernels::axis_taps::<T>(w, out_w);
        Ok(Self { shape: vec![c, out_h, out_w], data: kernels::resize_forward(&self.data, c, h, w, &ys, &xs) })
    }
}
