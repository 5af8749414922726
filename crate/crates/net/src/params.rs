//! Named parameter storage and initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Graph, ParamId, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (i, n.as_str(), t))
    }

    /// Group of a parameter: the name up to the first `.`.
    pub fn group(&self, id: ParamId) -> &str {
        group_of(&self.names[id])
    }

    /// Distinct groups in insertion order.
    pub fn groups(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for n in &self.names {
            let g = group_of(n);
            if !out.contains(&g) {
                out.push(g);
            }
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Parameter initializers. Values are drawn in `f64` so that `f32` and `f64`
/// models built from one seed agree up to rounding.
pub(crate) struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::lit(z * std)
            })
            .collect();
        Tensor::new(shape, data)
    }

    /// Normal truncated to two standard deviations.
    pub fn trunc_normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(self.rng);
                if z.abs() <= 2.0 {
                    break T::lit(z * std);
                }
            })
            .collect();
        Tensor::new(shape, data)
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::lit(self.rng.random_range(-bound..=bound))).collect())
    }
}

/// Maps parameter ids to graph nodes for one forward pass, inserting each
/// parameter at most once.
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
        }
    }

    pub fn bind(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        *self.vars[id].get_or_insert_with(|| g.param(id, self.store.get(id).clone()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-normal weights, zero bias.
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), init.normal(&[cout, cin, k, k], std));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let w = p.bind(g, self.w);
        let b = p.bind(g, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Fully connected layer with weights stored `[out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn add<T: Scalar>(store: &mut ParamStore<T>, name: &str, w: Tensor<T>, b: Tensor<T>) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), w),
            b: store.add(format!("{name}.bias"), b),
        }
    }

    /// `x [n, in] → [n, out]`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let w = p.bind(g, self.w);
        let b = p.bind(g, self.b);
        let y = g.matmul(x, w, false, true);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[dim], T::one())),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let gamma = p.bind(g, self.gamma);
        let beta = p.bind(g, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}
