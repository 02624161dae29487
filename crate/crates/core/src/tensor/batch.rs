//! Data-parallel minibatch gradients with an order-fixed reduction.

use rayon::prelude::*;

use super::graph::{Tape, Var};
use super::params::{ParamId, ParamStore};
use super::Real;
use crate::error::{Error, Result};

/// Runs `per_sample` for every item on the rayon pool, then writes the mean
/// of the per-item parameter gradients into `store`'s gradient slots.
///
/// Per-item results are summed in item order, so the outcome does not
/// depend on the number of worker threads. Returns the mean loss.
pub fn accumulate_batch<F, T, G>(store: &mut ParamStore<F>, items: &[T], per_sample: G) -> Result<F>
where
    F: Real,
    T: Sync,
    G: for<'s> Fn(&mut Tape<'s, F>, &'s ParamStore<F>, &T) -> Result<Var> + Sync,
{
    if items.is_empty() {
        return Err(Error::Input("empty minibatch".into()));
    }
    let shared: &ParamStore<F> = store;
    let results: Vec<(F, Vec<(ParamId, Vec<F>)>)> = items
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let loss = per_sample(&mut tape, shared, item)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value}")));
            }
            Ok((value, tape.backward(loss)?.into_params()))
        })
        .collect::<Result<_>>()?;

    let scale = F::one() / F::from_usize(items.len()).expect("batch size fits in a float");
    store.zero_grads();
    let mut total = F::zero();
    for (loss, grads) in &results {
        total += *loss;
        for (id, g) in grads {
            store.add_grad(*id, g, scale);
        }
    }
    Ok(total * scale)
}
