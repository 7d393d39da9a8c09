use rand::Rng;

use crate::error::Result;
use crate::numerics::{softmax, Graph, ParamId, ParamStore, Tensor, Var};

/// Attention pooling: `e_t = h_t · w`, `α = softmax(e)`, `R = Σ α_t h_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub weight: ParamId,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let k = 1.0 / (dim as f64).sqrt();
        let weight = store.add(format!("{prefix}.weight"), Tensor::uniform(&[dim], k, rng), true)?;
        Ok(Self { weight, dim })
    }

    /// Pools `hiddens: n × d` into a `1 × d` row.
    pub fn pool(&self, g: &mut Graph<'_>, hiddens: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let scores = g.matmul_nt(w, hiddens)?;
        let alpha = g.softmax(scores);
        g.matmul(alpha, hiddens)
    }
}

/// Plain-value attention pooling of the rows of `hiddens`.
pub fn attention_pool(hiddens: &Tensor, w: &[f64]) -> Vec<f64> {
    let scores: Vec<f64> = (0..hiddens.rows())
        .map(|t| hiddens.row_slice(t).iter().zip(w).map(|(h, w)| h * w).sum())
        .collect();
    let alpha = softmax(&scores);
    let mut out = vec![0.0; hiddens.cols()];
    for (t, a) in alpha.iter().enumerate() {
        for (o, h) in out.iter_mut().zip(hiddens.row_slice(t)) {
            *o += a * h;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[n, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_row_is_returned_unchanged() {
        let h = random(1, 4, 1);
        let out = attention_pool(&h, &[5.0, -2.0, 0.3, 9.0]);
        assert_eq!(out, h.row_slice(0));
    }

    #[test]
    fn zero_weight_gives_mean() {
        let h = random(5, 3, 2);
        let out = attention_pool(&h, &[0.0; 3]);
        for (c, v) in out.iter().enumerate() {
            let mean = (0..5).map(|r| h.get(r, c)).sum::<f64>() / 5.0;
            assert!((v - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicating_rows_leaves_pool_unchanged() {
        let h = random(4, 3, 3);
        let w = [0.4, -1.1, 2.0];
        let mut doubled = h.to_rows();
        doubled.extend(h.to_rows());
        let doubled = Tensor::from_rows(&doubled).unwrap();
        let a = attention_pool(&h, &w);
        let b = attention_pool(&doubled, &w);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_pool_matches_plain() {
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "att", 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let h = random(6, 3, 5);
        let mut g = Graph::new(&store);
        let hv = g.constant(h.clone());
        let r = att.pool(&mut g, hv).unwrap();
        let plain = attention_pool(&h, store.value(att.weight).data());
        for (x, y) in g.value(r).data().iter().zip(&plain) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
