//! Central finite-difference verification of tape gradients.

use super::graph::{Tape, Var};
use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

/// Relative step: `h = STEP * (|w| + 1)`.
pub const STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    /// Parameter name, or `"input"`.
    pub name: String,
    pub max_relative_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() < self.tolerance
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| e.max_relative_error >= self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backward gradients of `fragment` (which maps the input node to a
/// scalar loss) against central differences, for every parameter in `store`
/// and for the input itself.
pub fn finite_difference_check<G>(
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    fragment: G,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    G: for<'s> Fn(&mut Tape<'s, f64>, &'s ParamStore<f64>, Var) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, input: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let loss = fragment(&mut tape, store, x)?;
        scalar(&tape, loss)
    };

    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let loss = fragment(&mut tape, store, x)?;
    scalar(&tape, loss)?;
    let grads = tape.backward(loss)?;

    let mut entries = Vec::new();
    let mut probe = store.clone();
    for id in store.ids() {
        let analytic = grads.param(id).map(<[f64]>::to_vec);
        let n = store.get(id).len();
        let mut worst = (0.0, 0);
        for i in 0..n {
            let w = store.get(id).data()[i];
            let h = STEP * (w.abs() + 1.0);
            probe.get_mut(id).data_mut()[i] = w + h;
            let plus = eval(&probe, input)?;
            probe.get_mut(id).data_mut()[i] = w - h;
            let minus = eval(&probe, input)?;
            probe.get_mut(id).data_mut()[i] = w;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            let err = relative_error(a, numeric);
            if err > worst.0 {
                worst = (err, i);
            }
        }
        entries.push(GradCheckEntry {
            name: store.name(id).to_string(),
            max_relative_error: worst.0,
            worst_index: worst.1,
        });
    }

    let analytic = grads.wrt(x).map(<[f64]>::to_vec);
    let mut probe_input = input.clone();
    let mut worst = (0.0, 0);
    for i in 0..input.len() {
        let v = input.data()[i];
        let h = STEP * (v.abs() + 1.0);
        probe_input.data_mut()[i] = v + h;
        let plus = eval(store, &probe_input)?;
        probe_input.data_mut()[i] = v - h;
        let minus = eval(store, &probe_input)?;
        probe_input.data_mut()[i] = v;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.as_ref().map_or(0.0, |g| g[i]);
        let err = relative_error(a, numeric);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    entries.push(GradCheckEntry {
        name: "input".into(),
        max_relative_error: worst.0,
        worst_index: worst.1,
    });

    Ok(GradCheckReport { tolerance, entries })
}

fn scalar(tape: &Tape<'_, f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Dimension(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::params::ParamKind;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Weight, Tensor::from_vec(vec![0.5, -1.5]));
        let ok = finite_difference_check(
            &store,
            &Tensor::from_vec(vec![2.0, 3.0]),
            |tape, store, x| {
                let wv = tape.param(store, w);
                let p = tape.mul(wv, x)?;
                let q = tape.mul(p, p)?;
                Ok(tape.sum(q))
            },
            1e-4,
        )
        .unwrap();
        assert!(ok.passed(), "{ok:?}");

        // A linearized node with a deliberately wrong local gradient.
        let bad = finite_difference_check(
            &store,
            &Tensor::from_vec(vec![2.0, 3.0]),
            |tape, store, x| {
                let wv = tape.param(store, w);
                let p = tape.mul(wv, x)?;
                let v: f64 = tape.value(p).data().iter().map(|a| a * a).sum();
                tape.linearized(p, v, vec![1.0, 1.0])
            },
            1e-4,
        )
        .unwrap();
        assert!(!bad.passed());
        assert!(bad.failures().count() >= 1);
    }
}
