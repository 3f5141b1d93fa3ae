//! Named parameter tensors, their declarations and initialisers.

use std::collections::BTreeMap;

use rand::Rng;

use crate::tensor::{invalid, Real, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDecl {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample<F: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<F> {
        let uniform = |bound: f64, rng: &mut R| {
            Tensor::from_fn(&self.shape, |_| F::lit(rng.random_range(-bound..bound)))
        };
        match self.init {
            Init::KaimingUniform { fan_in } => uniform((6.0 / fan_in.max(1) as f64).sqrt(), rng),
            Init::XavierUniform { fan_in, fan_out } => {
                uniform((6.0 / (fan_in + fan_out).max(1) as f64).sqrt(), rng)
            }
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::full(&self.shape, F::one()),
        }
    }
}

/// Conv kernel `[out, in, k, k]` plus bias.
pub fn conv_decls(prefix: &str, c_in: usize, c_out: usize, k: usize) -> Vec<ParamDecl> {
    vec![
        ParamDecl::new(
            format!("{prefix}.weight"),
            &[c_out, c_in, k, k],
            Init::KaimingUniform { fan_in: c_in * k * k },
        ),
        ParamDecl::new(format!("{prefix}.bias"), &[c_out], Init::Zeros),
    ]
}

/// Dense `[d_in, d_out]` weight plus bias.
pub fn linear_decls(prefix: &str, d_in: usize, d_out: usize) -> Vec<ParamDecl> {
    vec![
        ParamDecl::new(
            format!("{prefix}.weight"),
            &[d_in, d_out],
            Init::KaimingUniform { fan_in: d_in },
        ),
        ParamDecl::new(format!("{prefix}.bias"), &[d_out], Init::Zeros),
    ]
}

/// Parameter tensors keyed by name; iteration is in sorted-name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Samples every declaration in order from `rng`.
    pub fn init<R: Rng + ?Sized>(decls: &[ParamDecl], rng: &mut R) -> Self {
        let tensors = decls
            .iter()
            .map(|d| (d.name.clone(), d.sample(rng)))
            .collect();
        Self { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records every tensor on `tape`; `trainable` picks which get gradients.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable(name))))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid("params", format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }
}
