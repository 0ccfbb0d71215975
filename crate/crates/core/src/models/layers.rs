use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Integer-state generator for weight synthesis. Floats are built from the top
/// 53 bits of each draw, so the sequence is identical on every platform.
pub struct WeightRng(ChaCha8Rng);

impl WeightRng {
    pub fn new(seed: u64) -> Self {
        WeightRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform(&mut self, bound: f64) -> f64 {
        let unit = (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        (2.0 * unit - 1.0) * bound
    }

    /// Uniform in `±1/√fan_in`.
    pub fn tensor(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.scaled(shape, fan_in, 1.0)
    }

    /// Uniform in `±gain/√fan_in`.
    pub fn scaled(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
        let bound = gain / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| self.uniform(bound))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn init(
        rng: &mut WeightRng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self::init_scaled(rng, c_in, c_out, kernel, stride, padding, 1.0)
    }

    /// As [`Conv::init`] with weights and bias drawn from `±gain/√fan_in`.
    pub fn init_scaled(
        rng: &mut WeightRng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Conv {
            weight: rng.scaled(&[c_out, c_in, kernel, kernel], fan_in, gain),
            bias: rng.scaled(&[c_out], fan_in, gain),
            stride,
            padding,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let w = tape.constant(&self.weight);
        let b = tape.constant(&self.bias);
        x.conv2d(&w, Some(&b), self.stride, self.padding)
    }
}

/// `y = x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(rng: &mut WeightRng, inputs: usize, outputs: usize) -> Self {
        Self::init_scaled(rng, inputs, outputs, 1.0, 1.0)
    }

    /// Weights from `±gain/√inputs`, bias from `±bias_gain/√inputs`.
    pub fn init_scaled(
        rng: &mut WeightRng,
        inputs: usize,
        outputs: usize,
        gain: f64,
        bias_gain: f64,
    ) -> Self {
        Linear {
            weight: rng.scaled(&[inputs, outputs], inputs, gain),
            bias: rng.scaled(&[1, outputs], inputs, bias_gain),
        }
    }

    /// `x` is flattened to one row.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let row = x.reshape(&[1, x.len()])?;
        let w = tape.constant(&self.weight);
        let b = tape.constant(&self.bias);
        row.matmul(&w)?.add(&b)
    }
}
