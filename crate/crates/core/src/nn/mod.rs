//! Minimal neural-network toolkit: named parameter storage, a reverse-mode
//! tape over 2-D arrays, Adam, and a finite-difference gradient checker.
//!
//! Arithmetic is `f64` throughout. Parameter values are kept exactly
//! representable as `f32` (initialisation and every optimiser update round
//! to `f32`), so a checkpoint of 32-bit floats reproduces a model bit for
//! bit while gradient checks still run at double precision.

mod adam;
pub mod gradcheck;
mod graph;

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

pub use adam::Adam;
pub use graph::{sigmoid, softplus, Graph, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

pub type ParamId = usize;

pub fn round_to_f32(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v as f32 as f64);
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; values are rounded to `f32`.
    ///
    /// Panics on a duplicate name: parameter layouts are fixed by code.
    pub fn add(&mut self, name: impl Into<String>, mut value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        round_to_f32(&mut value);
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Uniform in `[-bound, bound)`.
pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// Glorot-uniform weight for a `fan_in x fan_out` matrix.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, fan_in, fan_out, bound)
}

/// A dense layer `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, fan_in, fan_out));
        let b = bias.then(|| store.add(format!("{name}.b"), Array2::zeros((1, fan_out))));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// LSTM cell with a single fused `[x, h] -> 4*hidden` projection; gate
/// order is input, forget, cell, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmCell {
    pub proj: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let proj = Linear::new(store, rng, name, input + hidden, 4 * hidden, true);
        // Forget-gate bias of 1.
        if let Some(b) = proj.b {
            store
                .get_mut(b)
                .slice_mut(ndarray::s![.., hidden..2 * hidden])
                .fill(1.0);
        }
        LstmCell { proj, hidden }
    }

    /// Returns `(h, c)`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> (Var, Var) {
        let xh = g.concat_cols(&[x, h]);
        let z = self.proj.forward(g, xh);
        let n = self.hidden;
        let i = g.slice_cols(z, 0, n);
        let i = g.sigmoid(i);
        let f = g.slice_cols(z, n, n);
        let f = g.sigmoid(f);
        let u = g.slice_cols(z, 2 * n, n);
        let u = g.tanh(u);
        let o = g.slice_cols(z, 3 * n, n);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let iu = g.mul(i, u);
        let c_new = g.add(fc, iu);
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc);
        (h_new, c_new)
    }
}
