//! Layer helpers shared by the detector and both discriminators.

use bridge_autodiff::{Graph, ParamSet, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// He-normal standard deviation for a layer followed by leaky ReLU.
pub(crate) fn he_std(fan_in: usize, alpha: f64) -> f64 {
    (2.0 / ((1.0 + alpha * alpha) * fan_in as f64)).sqrt()
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Append `<name>.w` and `<name>.b` for a conv layer.
pub(crate) fn push_conv(ps: &mut ParamSet, name: &str, spec: ConvSpec, std: f64, bias: f64, rng: &mut ChaCha8Rng) {
    ps.push(
        format!("{name}.w"),
        normal_tensor(&[spec.c_out, spec.c_in, spec.k, spec.k], std, rng),
    );
    ps.push(format!("{name}.b"), Tensor::filled(&[spec.c_out], bias));
}

/// Run `specs` in order over `x`; every layer but the last (unless
/// `activate_last`) is followed by leaky ReLU. `vars` holds `w, b` pairs.
pub(crate) fn conv_stack(
    g: &mut Graph,
    mut x: Var,
    vars: &[Var],
    specs: &[ConvSpec],
    alpha: f64,
    activate_last: bool,
) -> Result<Var, CoreError> {
    debug_assert_eq!(vars.len(), 2 * specs.len());
    for (i, s) in specs.iter().enumerate() {
        x = g.conv2d(x, vars[2 * i], Some(vars[2 * i + 1]), s.stride, s.pad)?;
        if i + 1 < specs.len() || activate_last {
            x = g.leaky_relu(x, alpha)?;
        }
    }
    Ok(x)
}

/// Check that `params` has exactly the conv tensors `specs` implies.
pub(crate) fn check_conv_params(params: &[Tensor], specs: &[ConvSpec], what: &str) -> Result<(), CoreError> {
    if params.len() != 2 * specs.len() {
        return Err(CoreError::Checkpoint(format!(
            "{what}: expected {} tensors, found {}",
            2 * specs.len(),
            params.len()
        )));
    }
    for (i, s) in specs.iter().enumerate() {
        let (w, b) = (&params[2 * i], &params[2 * i + 1]);
        if w.shape() != [s.c_out, s.c_in, s.k, s.k] || b.shape() != [s.c_out] {
            return Err(CoreError::Checkpoint(format!(
                "{what}: layer {i} has shapes {:?}/{:?}, expected {:?}/{:?}",
                w.shape(),
                b.shape(),
                [s.c_out, s.c_in, s.k, s.k],
                [s.c_out]
            )));
        }
    }
    Ok(())
}
