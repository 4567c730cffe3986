use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Fully connected layer `x·W + b` with `W: d_in×d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let weight = ps.add_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        let bias = ps.add_full(format!("{name}.bias"), &[d_out], 0.0);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.d_in {
            return Err(Error::dim("linear", g.shape(x), &[self.d_in, self.d_out]));
        }
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, b)
    }
}

/// Two-layer head `FC_b(ReLU(FC_a(x)))` producing one score per row, returned as a `[T]` vector.
#[derive(Clone, Debug)]
pub struct ScoreHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl ScoreHead {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let half = (d / 2).max(1);
        Self {
            hidden: Linear::new(ps, &format!("{name}.hidden"), d, half, rng),
            out: Linear::new(ps, &format!("{name}.out"), half, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let rows = g.shape(x)[0];
        let h = self.hidden.forward(g, ps, x)?;
        let h = g.relu(h);
        let s = self.out.forward(g, ps, h)?;
        g.reshape(s, &[rows])
    }
}

/// Learned affine parameters of a layer normalization.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, eps: f64) -> Self {
        Self {
            gain: ps.add_full(format!("{name}.gain"), &[d], 1.0),
            bias: ps.add_full(format!("{name}.bias"), &[d], 0.0),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}
