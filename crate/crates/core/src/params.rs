//! Flat views over named model parameters.

use ndarray::{Array, ArrayBase, DataMut, Dimension};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMeta {
    pub name: String,
    pub kind: ParamKind,
    pub len: usize,
}

/// Per-tensor gradients aligned with [`Parameterized::param_meta`].
pub type Gradients = Vec<Vec<f64>>;

/// A model whose trainable state is a list of named flat tensors.
///
/// All three methods must enumerate tensors in the same order.
pub trait Parameterized {
    fn param_meta(&self) -> Vec<ParamMeta>;
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn snapshot(&self) -> Vec<Vec<f64>> {
        self.param_slices().into_iter().map(<[f64]>::to_vec).collect()
    }

    fn restore(&mut self, snapshot: &[Vec<f64>]) {
        for (dst, src) in self.param_slices_mut().into_iter().zip(snapshot) {
            dst.copy_from_slice(src);
        }
    }
}

pub(crate) fn flat<S, D>(a: &ArrayBase<S, D>) -> &[f64]
where
    S: ndarray::Data<Elem = f64>,
    D: Dimension,
{
    a.as_slice().expect("parameter tensors must be in standard layout")
}

pub(crate) fn flat_mut<S, D>(a: &mut ArrayBase<S, D>) -> &mut [f64]
where
    S: DataMut<Elem = f64>,
    D: Dimension,
{
    a.as_slice_mut().expect("parameter tensors must be in standard layout")
}

/// Re-lay a tensor out in row-major order. Matrix products may return
/// column-major results, which would misalign flat gradients with weights.
pub(crate) fn standardize<D: Dimension>(a: &mut Array<f64, D>) {
    if !a.is_standard_layout() {
        *a = a.as_standard_layout().into_owned();
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
