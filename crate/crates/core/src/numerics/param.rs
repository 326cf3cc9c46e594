use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// A named learnable tensor together with its gradient and AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    pub adam_m: Matrix<T>,
    pub adam_v: Matrix<T>,
    pub step_count: u64,
}

impl<T: Scalar> ParamBlock<T> {
    pub fn new(name: impl Into<String>, value: Matrix<T>) -> Self {
        let (r, c) = value.shape();
        ParamBlock {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> ParamBlock<U> {
        ParamBlock {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
            adam_m: self.adam_m.cast(),
            adam_v: self.adam_v.cast(),
            step_count: self.step_count,
        }
    }
}

/// Anything that owns learnable parameter blocks.
pub trait Parameterized<T: Scalar> {
    fn blocks(&self) -> Vec<&ParamBlock<T>>;

    /// Mutable access. Implementations mark outstanding tapes as stale.
    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock<T>>;

    fn zero_grad(&mut self) {
        for b in self.blocks_mut() {
            b.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }
}
