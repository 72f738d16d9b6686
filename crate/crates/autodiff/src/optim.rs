use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::{AutodiffError, OptimError};

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Register every tensor as a gradient-receiving leaf of `g`.
    pub fn attach(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Copy current values into previously attached leaves.
    pub fn sync_into(&self, g: &mut Graph, vars: &[Var]) -> Result<(), AutodiffError> {
        for (t, v) in self.tensors.iter().zip(vars) {
            g.leaf_data_mut(*v)?.copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Gradients of previously attached leaves after a backprop.
    pub fn grads_from(&self, g: &Graph, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|v| g.grad(*v)).collect()
    }
}

/// SGD with classical momentum. Weight decay is folded into the gradient:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * theta
/// theta <- theta - lr * v
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocities: Vec<Tensor>,
}

impl SgdState {
    /// Zero velocities shaped like `params`.
    pub fn new(params: &ParamSet, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocities: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocities
    }

    /// Restore saved velocities; shapes must match the current buffers.
    pub fn set_velocities(&mut self, v: Vec<Tensor>) -> Result<(), OptimError> {
        if v.len() != self.velocities.len() {
            return Err(OptimError::CountMismatch {
                expected: self.velocities.len(),
                got: v.len(),
            });
        }
        for (i, (old, new)) in self.velocities.iter().zip(&v).enumerate() {
            if old.shape() != new.shape() {
                return Err(OptimError::ShapeMismatch {
                    param: format!("#{i}"),
                    expected: old.shape().to_vec(),
                    got: new.shape().to_vec(),
                });
            }
        }
        self.velocities = v;
        Ok(())
    }
}

/// One in-place update of every parameter. All gradients are validated
/// before anything is written, so a rejected step leaves `params` and
/// `state` untouched.
pub fn sgd_step(params: &mut ParamSet, grads: &[Tensor], state: &mut SgdState) -> Result<(), OptimError> {
    if grads.len() != params.len() || state.velocities.len() != params.len() {
        return Err(OptimError::CountMismatch {
            expected: params.len(),
            got: grads.len().min(state.velocities.len()),
        });
    }
    for ((name, p), (g, v)) in params.iter().zip(grads.iter().zip(&state.velocities)) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(OptimError::ShapeMismatch {
                param: name.to_string(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(OptimError::NonFiniteGradient { param: name.to_string() });
        }
    }
    let (lr, m, wd) = (state.lr, state.momentum, state.weight_decay);
    for ((p, g), v) in params
        .tensors
        .iter_mut()
        .zip(grads)
        .zip(state.velocities.iter_mut())
    {
        for ((theta, &grad), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vel = m * *vel + grad + wd * *theta;
            *theta -= lr * *vel;
        }
    }
    Ok(())
}

/// Global L2 norm of a gradient list.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescale `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before rescaling.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if n > max_norm && n.is_finite() {
        let s = max_norm / n;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    n
}
