//! Small layer helpers shared by the learned modules.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::tensor::{Init, ParamId, ParameterStore, Result, Tape, Var};

/// Affine map `x·W + b` over the last axis of `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(store, name, fan_in, fan_out, Init::Glorot { fan_in, fan_out }, rng)
    }

    /// Like [`Linear::new`] with an explicit weight initializer.
    pub fn with_init<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.init(&format!("{name}.weight"), &[fan_in, fan_out], init, rng)?;
        let bias = Some(store.init(&format!("{name}.bias"), &[fan_out], Init::Zeros, rng)?);
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// Glorot-initialized `x·W` with no bias term.
    pub fn without_bias<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.init(&format!("{name}.weight"), &[fan_in, fan_out], Init::Glorot { fan_in, fan_out }, rng)?;
        Ok(Self {
            weight,
            bias: None,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let rows = shape[..shape.len().saturating_sub(1)].iter().product::<usize>();
        let flat = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, &[rows, self.fan_in])?
        };
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            y = tape.add(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out: Vec<usize> = shape;
        *out.last_mut().unwrap() = self.fan_out;
        tape.reshape(y, &out)
    }
}
