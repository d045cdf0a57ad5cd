//! Small layer helpers over the tape: affine maps and layer norm with
//! learnable gain and bias.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

/// Affine map `x @ w + b` with `w: [in, out]`, `b: [out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn bind(bound: &Bound, name: &str) -> Self {
        Self {
            w: bound.var(&format!("{name}.w")),
            b: bound.var(&format!("{name}.b")),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add_broadcast(y, self.b)
    }
}

/// Xavier-uniform weight, zero bias.
pub fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    store.insert(format!("{name}.w"), Tensor::new(&[fan_in, fan_out], w).expect("linear shape"));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

/// Zero weight and bias (output heads that must start as the identity
/// refinement).
pub fn init_linear_zero(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.gamma"), Tensor::ones(&[dim]));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
}

pub fn layer_norm(tape: &mut Tape, bound: &Bound, name: &str, x: Var, eps: f64) -> Result<Var> {
    let y = tape.layer_norm_lastdim(x, eps)?;
    let y = tape.mul_broadcast(y, bound.var(&format!("{name}.gamma")))?;
    tape.add_broadcast(y, bound.var(&format!("{name}.beta")))
}
