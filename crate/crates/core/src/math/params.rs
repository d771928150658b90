use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// A trainable tensor with an optional gradient buffer of identical shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Value {
    pub data: Matrix,
    #[serde(skip)]
    pub grad: Option<Matrix>,
}

impl Value {
    pub fn new(data: Matrix) -> Self {
        Value { data, grad: None }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.shape()
    }
}

/// Named parameter registry. Insertion order is stable and is the
/// serialization order.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "RawParamSet")]
pub struct ParamSet {
    pub rng_seed: u64,
    names: Vec<String>,
    values: Vec<Value>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct RawParamSet {
    rng_seed: u64,
    names: Vec<String>,
    values: Vec<Value>,
}

impl From<RawParamSet> for ParamSet {
    fn from(raw: RawParamSet) -> Self {
        let mut ps = ParamSet {
            rng_seed: raw.rng_seed,
            names: raw.names,
            values: raw.values,
            index: HashMap::new(),
        };
        ps.reindex();
        ps
    }
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamSet {
    pub fn new(rng_seed: u64) -> Self {
        ParamSet {
            rng_seed,
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn reindex(&mut self) {
        self.index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.data.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn insert(&mut self, name: &str, data: Matrix) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(Value::new(data));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.values[self.index_of(name)?].data)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        let i = self.index_of(name)?;
        Ok(&mut self.values[i].data)
    }

    pub fn value_at(&self, idx: usize) -> &Value {
        &self.values[idx]
    }

    pub fn grad(&self, name: &str) -> Result<Option<&Matrix>> {
        Ok(self.values[self.index_of(name)?].grad.as_ref())
    }

    pub(crate) fn add_grad(&mut self, idx: usize, g: &[f64]) {
        let v = &mut self.values[idx];
        let grad = v.grad.get_or_insert_with(|| Matrix::zeros(v.data.rows, v.data.cols));
        grad.data.iter_mut().zip(g).for_each(|(o, x)| *o += x);
    }

    pub fn zero_grads(&mut self) {
        for v in &mut self.values {
            v.grad = None;
        }
    }

    /// Flat view of every parameter entry in registration order.
    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.data.data.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|v| match &v.grad {
                Some(g) => g.data.clone(),
                None => vec![0.0; v.data.len()],
            })
            .collect()
    }

    pub fn entry_mut(&mut self, flat_idx: usize) -> &mut f64 {
        let mut k = flat_idx;
        for v in &mut self.values {
            if k < v.data.len() {
                return &mut v.data.data[k];
            }
            k -= v.data.len();
        }
        panic!("flat index {flat_idx} out of range");
    }

    pub fn scale_grads(&mut self, c: f64) {
        for v in &mut self.values {
            if let Some(g) = &mut v.grad {
                g.data.iter_mut().for_each(|x| *x *= c);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.values
            .iter()
            .filter_map(|v| v.grad.as_ref())
            .flat_map(|g| g.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.data.is_finite())
    }

    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(stream);
        rng
    }

    /// Registers `name.w` (`input × output`, Glorot-uniform) and `name.b` (zeros).
    pub fn add_dense(&mut self, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Result<()> {
        self.insert(&format!("{name}.w"), glorot(input, output, rng))?;
        self.insert(&format!("{name}.b"), Matrix::zeros(1, output))
    }

    /// Registers a dense layer whose weights and bias start at zero.
    pub fn add_dense_zero(&mut self, name: &str, input: usize, output: usize) -> Result<()> {
        self.insert(&format!("{name}.w"), Matrix::zeros(input, output))?;
        self.insert(&format!("{name}.b"), Matrix::zeros(1, output))
    }

    /// Registers the nine tensors of a gated recurrent cell.
    pub fn add_gru(&mut self, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<()> {
        for gate in ["z", "r", "h"] {
            self.insert(&format!("{name}.w{gate}"), glorot(input, hidden, rng))?;
            self.insert(&format!("{name}.u{gate}"), glorot(hidden, hidden, rng))?;
            self.insert(&format!("{name}.b{gate}"), Matrix::zeros(1, hidden))?;
        }
        Ok(())
    }

    pub fn add_embedding(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        self.insert(name, Matrix::from_vec(rows, cols, data))
    }
}

pub fn glorot(input: usize, output: usize, rng: &mut impl Rng) -> Matrix {
    let limit = (6.0 / (input + output) as f64).sqrt();
    let data = (0..input * output).map(|_| rng.random_range(-limit..limit)).collect();
    Matrix::from_vec(input, output, data)
}

/// Adaptive moment estimation with bias correction and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Takes one descent step along the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamSet) {
        if self.m.len() != params.values.len() {
            self.m = params.values.iter().map(|v| vec![0.0; v.data.len()]).collect();
            self.v = self.m.clone();
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let n = params.grad_norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, v) in params.values.iter_mut().enumerate() {
            let Some(g) = &v.grad else { continue };
            let (m, s) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..g.data.len() {
                let gj = g.data[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                s[j] = self.beta2 * s[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = s[j] / bc2;
                v.data.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        params.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new(0);
        ps.insert("a", Matrix::zeros(1, 1)).unwrap();
        assert!(ps.insert("a", Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::new(0);
        ps.insert("w", Matrix::row_vector(vec![3.0, -2.0])).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let w = ps.get("w").unwrap().data.clone();
            let idx = ps.index_of("w").unwrap();
            ps.add_grad(idx, &w);
            opt.step(&mut ps);
        }
        assert!(ps.get("w").unwrap().data.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn flat_entry_addresses_registration_order() {
        let mut ps = ParamSet::new(0);
        ps.insert("a", Matrix::row_vector(vec![1.0, 2.0])).unwrap();
        ps.insert("b", Matrix::row_vector(vec![3.0])).unwrap();
        *ps.entry_mut(2) = 7.0;
        assert_eq!(ps.flat(), vec![1.0, 2.0, 7.0]);
    }
}
