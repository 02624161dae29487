//! Dense tensors, a recording tape for reverse-mode differentiation, the
//! layer catalog used by the classifier and detector, and the two
//! optimizers.
//!
//! Everything is generic over [`Real`] so that the same kernels train in
//! `f32` and are verified against finite differences in `f64`.

pub mod batch;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use batch::accumulate_batch;
pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{Gradients, Mode, Tape, Var};
pub use layers::{LayerSpec, Stack};
pub use optim::{Algorithm, OptimizerState};
pub use params::{ParamId, ParamStore};

/// Floating point element type of tensors.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + FromStr
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits in float type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Row-major n-dimensional array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must list positive dimensions"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Value at a row-major multi-index.
    pub fn at(&self, index: &[usize]) -> F {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} produced a non-finite value")))
        }
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = F::zero()),
            None => self.grad = Some(vec![F::zero(); self.data.len()]),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
            grad: None,
        }
    }

    pub fn min_max(&self) -> (F, F) {
        self.data.iter().fold((F::infinity(), F::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }
}

/// Grayscale image helpers on `H x W x 1` tensors.
impl<F: Real> Tensor<F> {
    pub fn image(height: usize, width: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![height, width, 1], data)
    }

    pub fn height(&self) -> usize {
        self.shape[0]
    }

    pub fn width(&self) -> usize {
        self.shape[1]
    }

    /// Bilinear resize of an `H x W x C` tensor with edge clamping.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if self.shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "resize expects H x W x C, got {:?}",
                self.shape
            )));
        }
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        if h == out_h && w == out_w {
            return Ok(Tensor::new(self.shape.clone(), self.data.clone())?);
        }
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        let mut out = vec![F::zero(); out_h * out_w * c];
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = F::lit(fy - y0 as f64);
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = F::lit(fx - x0 as f64);
                for ch in 0..c {
                    let p = |y: usize, x: usize| self.data[(y * w + x) * c + ch];
                    let top = p(y0, x0) * (F::one() - wx) + p(y0, x1) * wx;
                    let bot = p(y1, x0) * (F::one() - wx) + p(y1, x1) * wx;
                    out[(oy * out_w + ox) * c + ch] = top * (F::one() - wy) + bot * wy;
                }
            }
        }
        Tensor::new(vec![out_h, out_w, c], out)
    }
}
