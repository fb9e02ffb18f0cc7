//! Central finite-difference checks of tape gradients on parameter probes.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

fn eval(store: &ParamStore, loss: &dyn Fn(&Bound) -> Result<Var>) -> Result<f64> {
    let tape = Tape::new();
    let frozen = |_: &str| false;
    let b = Bound::new(&tape, store, &frozen);
    Ok(tape.item(loss(&b)?))
}

/// Compares the analytic gradient of `loss` with central differences of
/// step `eps` at `probes` random entries of the tensors picked by `select`.
pub fn check_gradients(
    store: &ParamStore,
    select: &dyn Fn(&str) -> bool,
    probes: usize,
    eps: f64,
    seed: u64,
    loss: &dyn Fn(&Bound) -> Result<Var>,
) -> Result<Vec<Probe>> {
    let tape = Tape::new();
    let b = Bound::new(&tape, store, select);
    let out = loss(&b)?;
    let grads = b.grads(&tape.backward(out));
    drop(b);
    let names: Vec<&str> = store.names().filter(|n| select(n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scratch = store.clone();
    let mut result = Vec::with_capacity(probes);
    for _ in 0..probes {
        let Some(&name) = names.choose(&mut rng) else { break };
        let numel = store.get(name).expect("listed").numel();
        let index = rng.random_range(0..numel);
        let analytic = grads.get(name).map(|g| g.data()[index]).unwrap_or(0.0);
        let orig = store.get(name).expect("listed").data()[index];
        let mut at = |v: f64| -> Result<f64> {
            scratch.get_mut(name).expect("listed").data_mut()[index] = v;
            eval(&scratch, loss)
        };
        let numeric = (at(orig + eps)? - at(orig - eps)?) / (2.0 * eps);
        at(orig)?;
        result.push(Probe { name: name.to_string(), index, analytic, numeric });
    }
    Ok(result)
}
