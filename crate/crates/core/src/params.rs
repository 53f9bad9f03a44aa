//! Named parameter storage, initialization, and the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Named `f64` matrices, ordered by name so that serialization and update
/// order are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.entries.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }
}

/// Uniform Xavier/Glorot initialization for a `rows`×`cols` weight.
pub fn xavier(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Small-scale normal-ish init for embedding tables and bias gates.
pub fn small_uniform(rng: &mut ChaCha12Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

/// Deterministic RNG stream for a named purpose.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Binds a [`ParamStore`] to a [`Tape`], interning each parameter as a leaf
/// at most once and remembering the mapping for gradient extraction.
pub struct TapeParams<'a> {
    store: &'a ParamStore,
    vars: BTreeMap<String, Var>,
}

impl<'a> TapeParams<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
        }
    }

    /// Tape leaf for `name`, interning on first use.
    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?.clone();
        let v = tape.leaf(value);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// All interned (name, var) pairs, in name order.
    pub fn interned(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Adam with per-parameter first/second moment state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update over `grads` (name → gradient). Parameters without a
    /// gradient this step are left untouched; their moments do not decay,
    /// which keeps updates identical whether or not a module participated.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.dim() != g.dim() {
                return Err(Error::Arity(format!(
                    "gradient shape {:?} does not match parameter '{name}' {:?}",
                    g.dim(),
                    p.dim()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            for ((pi, gi), (mi, vi)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment state access for checkpointing.
    pub fn moments(&self) -> (&BTreeMap<String, Array2<f64>>, &BTreeMap<String, Array2<f64>>) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: BTreeMap<String, Array2<f64>>, v: BTreeMap<String, Array2<f64>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", array![[1.0, -1.0]]);
        let mut opt = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), array![[1.0, -1.0]]);
        opt.apply(&mut store, &grads).unwrap();
        let w = store.get("w").unwrap();
        assert!(w[(0, 0)] < 1.0);
        assert!(w[(0, 1)] > -1.0);
    }

    #[test]
    fn seeded_rng_is_reproducible() {
        let mut a = seeded_rng(7, 3);
        let mut b = seeded_rng(7, 3);
        let xa: f64 = a.random();
        let xb: f64 = b.random();
        assert_eq!(xa, xb);
    }
}
