//! Minimal 3D CNN engine: tensors, a residual patch classifier with
//! hand-written reverse mode, BCE loss, Adam, training, checkpoints and
//! finite-difference gradient checks.

mod checkpoint;
mod gradcheck;
pub mod layers;
mod model;
mod optim;
pub mod scalar;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, grad_check_with, GradCheck};
pub use model::{Mode, Model, ModelConfig, DEFAULT_PARAMETER_COUNT};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use train::{
    bce_loss, predict, predict_patches, train, EpochStats, History, StopRule, TrainConfig,
    TrainOutcome,
};

use crate::error::{Error, Result};

/// Dense row-major array with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.len() > 5 {
            return Err(Error::Shape(format!("rank {} exceeds 5", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    /// Trainable parameter: gradient buffer allocated and zeroed.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Self {
        let n = data.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Self {
            shape,
            data,
            grad: Some(vec![T::zero(); n]),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> &[T] {
        self.grad.as_deref().unwrap_or(&[])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of(v.f64())).collect()),
        }
    }
}
