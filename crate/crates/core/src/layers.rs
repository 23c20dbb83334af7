//! Named parameter storage and the three parameterised layer kinds.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, uniquely named model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let (idx, _) = self.entries.insert_full(name, value);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.values().cloned().collect()
    }

    /// Replaces every value, keeping names and order. Shapes must match.
    pub fn set_all(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::shape("params", format!("{} values for {} parameters", values.len(), self.len())));
        }
        for ((name, slot), v) in self.entries.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::shape(
                    "params",
                    format!("`{name}` is {:?}, got {:?}", slot.shape(), v.shape()),
                ));
            }
            *slot = v;
        }
        Ok(())
    }

    /// Puts every parameter on `g` as a leaf, in store order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .values()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Graph variables for the parameters of one [`ParamStore`], same order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables laid out in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients of every bound parameter, zeros where none flowed.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.grad(v)).collect()
    }
}

/// Uniform in `±sqrt(6 / fan_in)`.
pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape.to_vec(), bound, rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), he_uniform(&[d_in, d_out], d_in, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([d_out]))?;
        Ok(Linear { weight, bias, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.affine(x, p.var(self.weight), p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    /// Odd square kernel with "same" padding `k / 2`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let kernel = store.add(format!("{name}.kernel"), he_uniform(&[c_out, c_in, k, k], fan_in, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c_out]))?;
        Ok(Conv2dLayer {
            kernel,
            bias,
            stride,
            padding: k / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.kernel), Some(p.var(self.bias)), self.stride, self.padding)
    }
}

/// Bias-free, length-preserving 1-D convolution.
#[derive(Clone, Debug)]
pub struct Conv1dLayer {
    pub kernel: ParamId,
    pub size: usize,
}

impl Conv1dLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, k: usize, rng: &mut R) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::invalid(format!("{name}: 1-D kernel size {k} must be odd")));
        }
        let kernel = store.add(format!("{name}.kernel"), he_uniform(&[k], k, rng))?;
        Ok(Conv1dLayer { kernel, size: k })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv1d(x, p.var(self.kernel), (self.size - 1) / 2)
    }
}
