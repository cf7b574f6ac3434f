//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are created from
//! plain [`Tensor`] values; every primitive applied through the graph appends
//! one node to the tape, and [`Graph::backward`] walks the tape in exact
//! reverse order.

mod conv;
mod gradcheck;
mod graph;
mod param;

pub use conv::ConvAttrs;
pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use graph::{Attrs, Graph, Primitive, Var};
pub use param::{ParamId, ParamStore, Parameter};

use crate::error::{shape_err, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return shape_err("tensor", format!("zero dimension in {shape:?}"));
        }
        if numel != data.len() {
            return shape_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Dimensions of a 4-d `(n, c, h, w)` tensor.
    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            s => shape_err(op, format!("expected (n, c, h, w), got {s:?}")),
        }
    }
}
