use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// `x · Wᵀ (+ b)` with `W: out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let k = 1.0 / (input_dim as f64).sqrt();
        let weight = store.add(format!("{prefix}.weight"), Tensor::uniform(&[output_dim, input_dim], k, rng), true)?;
        let bias = if with_bias {
            Some(store.add(format!("{prefix}.bias"), Tensor::uniform(&[output_dim], k, rng), true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            input_dim,
            output_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul_nt(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}
