//! Small parameterized building blocks recorded onto a [`Tape`].

use rand::Rng;

use crate::numerics::{ParamId, ParamStore, Real, Tape, Var};
use crate::Result;

/// Affine map over the last axis: `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), &[d_in, d_out], d_in, d_out, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[d_out]);
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_broadcast(h, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add_full(format!("{name}.gain"), &[width], 1.0),
            bias: store.add_zeros(format!("{name}.bias"), &[width]),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Position-wise feed-forward sublayer: one hidden layer of width
/// `4 · d_model` with a GELU nonlinearity.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
}

impl FeedForward {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Self {
        FeedForward {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_model, 4 * d_model, rng),
            out: Linear::new(store, &format!("{name}.out"), 4 * d_model, d_model, rng),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.gelu(h);
        self.out.forward(tape, h)
    }
}

/// Repeats a parameter of shape `[rows, d]` along a new leading batch axis:
/// `[batch, rows, d]`.
pub fn tile_param<F: Real>(tape: &mut Tape<F>, id: ParamId, batch: usize) -> Result<Var> {
    let p = tape.param(id);
    let shape = tape.shape(p).to_vec();
    let flat = tape.reshape(p, &[1, shape.iter().product()])?;
    let tiled = tape.select_rows(flat, &vec![0; batch])?;
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(&shape);
    tape.reshape(tiled, &out_shape)
}
