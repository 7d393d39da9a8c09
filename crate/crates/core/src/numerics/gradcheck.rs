use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Maximum number of coordinates probed per parameter tensor.
pub const MAX_COORDS_PER_TENSOR: usize = 200;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of `loss_fn` against central differences.
///
/// `loss_fn` must build the same scalar loss on every call. It is evaluated
/// twice up front; any disagreement (for instance, live dropout) is reported
/// as [`Error::NonDeterministic`]. For each trainable tensor at most
/// [`MAX_COORDS_PER_TENSOR`] coordinates are probed: up to half are drawn from
/// coordinates with a nonzero analytic gradient, the rest uniformly.
///
/// The relative error per coordinate is
/// `|analytic − numeric| / max(1e-6, |analytic| + |numeric|)`; the floor
/// keeps round-off on near-zero derivatives from dominating.
pub fn finite_diff_check<F>(mut loss_fn: F, params: &mut ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    let first = eval(&mut loss_fn, params)?;
    let second = eval(&mut loss_fn, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(first, second));
    }

    let mut grads = Gradients::new(params);
    {
        let mut g = Graph::new(params);
        let loss = loss_fn(&mut g)?;
        g.backward(loss, &mut grads)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coords_checked: 0,
    };
    let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let analytic = grads.dense(id, params);
        let coords = pick_coords(&analytic, &mut rng);
        for c in coords {
            let original = params.value(id).data()[c];
            params.get_mut(id).value.data_mut()[c] = original + h;
            let up = eval(&mut loss_fn, params)?;
            params.get_mut(id).value.data_mut()[c] = original - h;
            let down = eval(&mut loss_fn, params)?;
            params.get_mut(id).value.data_mut()[c] = original;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.get(id).name.clone(), c));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

fn eval<F>(loss_fn: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = loss_fn(&mut g)?;
    Ok(g.scalar(loss))
}

fn pick_coords(analytic: &[f64], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = analytic.len();
    if n <= MAX_COORDS_PER_TENSOR {
        return (0..n).collect();
    }
    let nonzero: Vec<usize> = (0..n).filter(|&i| analytic[i] != 0.0).collect();
    let half = MAX_COORDS_PER_TENSOR / 2;
    let mut picked: Vec<usize> = if nonzero.len() <= half {
        nonzero
    } else {
        sample(rng, nonzero.len(), half).into_iter().map(|i| nonzero[i]).collect()
    };
    let rest = MAX_COORDS_PER_TENSOR - picked.len();
    picked.extend(sample(rng, n, rest));
    picked.sort_unstable();
    picked.dedup();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_loss_is_exact() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row(vec![0.5, -1.5, 2.0]), true).unwrap();
        let report = finite_diff_check(
            |g| {
                let v = g.param(x);
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn live_dropout_is_rejected() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row(vec![1.0; 16]), true).unwrap();
        let mut seed = 0;
        let err = finite_diff_check(
            |g| {
                seed += 1;
                g.set_dropout_rng(Some(ChaCha8Rng::seed_from_u64(seed)));
                let v = g.param(x);
                let d = g.dropout(v, 0.5)?;
                Ok(g.sum(d))
            },
            &mut store,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic(..)));
    }
}
