//! Minimal reverse-mode autodiff: tensors, a recording tape, AdamW and a
//! binary checkpoint format for named parameters.

mod checkpoint;
mod graph;
mod optim;
mod tensor;

use std::collections::HashMap;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use graph::{Conv3dSpec, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("duplicate parameter {0}")]
    DuplicateParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<usize, NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParameter(name.to_string()));
        }
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), self.names.len() - 1);
        Ok(self.names.len() - 1)
    }

    pub fn slot(&self, name: &str) -> Result<usize, NnError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, NnError> {
        Ok(&self.tensors[self.slot(name)?])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensor(&self, slot: usize) -> &Tensor<T> {
        &self.tensors[slot]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        &mut self.tensors[slot]
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts parameter `name` on the tape.
    pub fn var(&self, g: &mut Graph<T>, name: &str) -> Result<Var, NnError> {
        let slot = self.slot(name)?;
        Ok(g.param(slot, self.tensors[slot].clone()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
    /// Coordinates skipped because a perturbation moved some ReLU across its
    /// kink, where the finite difference is not a derivative estimate.
    pub skipped: usize,
}

/// Relative error used by [`check_gradients`].
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks every parameter coordinate (or every `stride`-th one) of `store`
/// against central differences with step `eps`. `loss` must be a
/// deterministic function of the parameters.
pub fn check_gradients<F>(store: &ParamStore<f64>, eps: f64, stride: usize, mut loss: F) -> Result<GradCheck, NnError>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var, NnError>,
{
    let mut g = Graph::new();
    let l = loss(store, &mut g)?;
    g.backward(l)?;
    let analytic = g.param_grads(&store.shapes());
    let base_pattern = g.relu_pattern();

    let mut probe = store.clone();
    let mut eval = |p: &ParamStore<f64>| -> Result<(f64, Vec<bool>), NnError> {
        let mut g = Graph::new();
        let l = loss(p, &mut g)?;
        Ok((g.value(l).item(), g.relu_pattern()))
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
        skipped: 0,
    };
    let mut counter = 0usize;
    for slot in 0..store.len() {
        for i in 0..store.tensor(slot).len() {
            counter += 1;
            if (counter - 1) % stride.max(1) != 0 {
                continue;
            }
            let orig = store.tensor(slot).data()[i];
            probe.tensor_mut(slot).data_mut()[i] = orig + eps;
            let (plus, pat_plus) = eval(&probe)?;
            probe.tensor_mut(slot).data_mut()[i] = orig - eps;
            let (minus, pat_minus) = eval(&probe)?;
            probe.tensor_mut(slot).data_mut()[i] = orig;
            if pat_plus != base_pattern || pat_minus != base_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(analytic[slot].data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{i}]", store.names()[slot]);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
