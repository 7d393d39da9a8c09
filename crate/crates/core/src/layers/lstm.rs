use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Weights of one LSTM direction. Gate blocks are ordered input, forget,
/// cell candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

/// Stacked bidirectional LSTM. Row `t` of the output is the forward state at
/// `t` followed by the backward state at `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm {
    pub input_dim: usize,
    pub hidden: usize,
    /// Dropout applied to the outputs of every layer but the last.
    pub dropout: f64,
    pub layers: Vec<[LstmDirection; 2]>,
}

impl BiLstm {
    /// Weights uniform(−k, k) with `k = 1/sqrt(hidden)`; forget-gate bias 1.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        num_layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_layers == 0 || hidden == 0 || input_dim == 0 {
            return Err(Error::Config(format!(
                "BiLSTM needs positive sizes (input {input_dim}, hidden {hidden}, layers {num_layers})"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        let k = 1.0 / (hidden as f64).sqrt();
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let in_dim = if l == 0 { input_dim } else { 2 * hidden };
            let mut make = |dir: &str| -> Result<LstmDirection> {
                let name = format!("{prefix}.l{l}.{dir}");
                let w_ih = store.add(format!("{name}.w_ih"), Tensor::uniform(&[4 * hidden, in_dim], k, rng), true)?;
                let w_hh = store.add(format!("{name}.w_hh"), Tensor::uniform(&[4 * hidden, hidden], k, rng), true)?;
                let mut b = Tensor::uniform(&[4 * hidden], k, rng);
                b.data_mut()[hidden..2 * hidden].fill(1.0);
                let bias = store.add(format!("{name}.bias"), b, true)?;
                Ok(LstmDirection { w_ih, w_hh, bias })
            };
            let fwd = make("fwd")?;
            let bwd = make("bwd")?;
            layers.push([fwd, bwd]);
        }
        Ok(Self {
            input_dim,
            hidden,
            dropout,
            layers,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Encodes `x: n × input_dim` into `n × 2·hidden`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let in_cols = g.value(x).cols();
        if in_cols != self.input_dim {
            return Err(Error::Shape {
                op: "bilstm",
                left: vec![g.value(x).rows(), in_cols],
                right: vec![self.input_dim],
            });
        }
        let mut input = x;
        for (l, [fwd, bwd]) in self.layers.iter().enumerate() {
            let f = self.run(g, fwd, input, false)?;
            let b = self.run(g, bwd, input, true)?;
            input = g.concat_cols(&[f, b])?;
            if l + 1 < self.layers.len() {
                input = g.dropout(input, self.dropout)?;
            }
        }
        Ok(input)
    }

    fn run(&self, g: &mut Graph<'_>, dir: &LstmDirection, x: Var, reverse: bool) -> Result<Var> {
        let n = g.value(x).rows();
        let h = self.hidden;
        let w_ih = g.param(dir.w_ih);
        let w_hh = g.param(dir.w_hh);
        let bias = g.param(dir.bias);
        let pre = g.matmul_nt(x, w_ih)?;
        let pre = g.add_row(pre, bias)?;

        let mut outs: Vec<Option<Var>> = vec![None; n];
        let mut state: Option<(Var, Var)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..n).rev())
        } else {
            Box::new(0..n)
        };
        for t in order {
            let mut gates = g.slice_rows(pre, t, 1)?;
            if let Some((h_prev, _)) = state {
                let rec = g.matmul_nt(h_prev, w_hh)?;
                gates = g.add(gates, rec)?;
            }
            let sig = g.sigmoid(gates);
            let th = g.tanh(gates);
            let i = g.slice_cols(sig, 0, h)?;
            let f = g.slice_cols(sig, h, h)?;
            let cand = g.slice_cols(th, 2 * h, h)?;
            let o = g.slice_cols(sig, 3 * h, h)?;
            let mut c = g.mul(i, cand)?;
            if let Some((_, c_prev)) = state {
                let kept = g.mul(f, c_prev)?;
                c = g.add(kept, c)?;
            }
            let tc = g.tanh(c);
            let h_t = g.mul(o, tc)?;
            outs[t] = Some(h_t);
            state = Some((h_t, c));
        }
        let outs: Vec<Var> = outs.into_iter().map(|v| v.expect("every step visited")).collect();
        g.concat_rows(&outs)
    }
}

/// Runs `lstm` on plain inputs. `dropout_rng` enables training-mode dropout.
pub fn bilstm_forward(
    inputs: &Tensor,
    store: &ParamStore,
    lstm: &BiLstm,
    dropout_rng: Option<ChaCha8Rng>,
) -> Result<Tensor> {
    let mut g = Graph::new(store);
    g.set_dropout_rng(dropout_rng);
    let x = g.constant(inputs.clone());
    let y = lstm.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn make(input: usize, hidden: usize, layers: usize, seed: u64) -> (ParamStore, BiLstm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm = BiLstm::new(&mut store, "enc", input, hidden, layers, 0.3, &mut rng).unwrap();
        (store, lstm)
    }

    #[test]
    fn single_token_shape() {
        let (store, lstm) = make(3, 4, 2, 1);
        let x = Tensor::uniform(&[1, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let y = bilstm_forward(&x, &store, &lstm, None).unwrap();
        assert_eq!(y.shape(), &[1, 8]);
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let (mut store, lstm) = make(3, 4, 2, 1);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let x = Tensor::uniform(&[5, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let y = bilstm_forward(&x, &store, &lstm, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reversal_swaps_directions() {
        let (store, lstm) = make(3, 4, 1, 9);
        let x = Tensor::uniform(&[6, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let mut rows = x.to_rows();
        rows.reverse();
        let xr = Tensor::from_rows(&rows).unwrap();
        // Swapping the two directions' weights makes the reversed run mirror the original.
        let mut swapped = store.clone();
        let [f, b] = &lstm.layers[0];
        for (a, c) in [(f.w_ih, b.w_ih), (f.w_hh, b.w_hh), (f.bias, b.bias)] {
            let va = store.value(a).clone();
            let vc = store.value(c).clone();
            swapped.get_mut(a).value = vc;
            swapped.get_mut(c).value = va;
        }
        let y = bilstm_forward(&x, &store, &lstm, None).unwrap();
        let yr = bilstm_forward(&xr, &swapped, &lstm, None).unwrap();
        let n = 6;
        for t in 0..n {
            let orig = y.row_slice(n - 1 - t);
            let rev = yr.row_slice(t);
            for k in 0..4 {
                assert!((rev[k] - orig[4 + k]).abs() < 1e-12);
                assert!((rev[4 + k] - orig[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let (store, lstm) = make(3, 4, 1, 1);
        let x = Tensor::zeros(&[2, 5]);
        assert!(bilstm_forward(&x, &store, &lstm, None).is_err());
    }
}
