use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::grdt::GrdtTensor;
use crate::tensor::{Element, Graph, Tensor, Var};

/// One learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// `U(-b, b)` with `b = sqrt(gain / fan_in)`.
    FanInUniform { fan_in: usize, gain: f64 },
}

/// Named learnable parameters in deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

/// Graph handles of a [`ParamStore`] bound for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds explicit graph variables to parameter names.
    pub fn from_vars<S: Into<String>>(vars: impl IntoIterator<Item = (S, Var)>) -> Self {
        Self {
            vars: vars.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// 64-bit FNV-1a, used to derive per-parameter seeds from names.
fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Adds a parameter. Its initial values depend only on `seed` and `name`,
    /// so adding or removing other parameters never changes them.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, decay: bool, seed: u64) {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Const(v) => Tensor::full(shape.to_vec(), T::cst(v)),
            Init::FanInUniform { fan_in, gain } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
                let b = (gain / fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape.to_vec(), |_| T::cst(rng.gen_range(-b..b)))
            }
        };
        self.insert(name, value, decay);
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, decay: bool) {
        self.entries.insert(name.to_string(), Param { value, decay });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| {
                let t = p.value.clone().with_requires_grad(trainable);
                (k.clone(), g.input(t))
            })
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            decay: p.decay,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn to_records(&self) -> Vec<(String, GrdtTensor)> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), GrdtTensor::from(&p.value)))
            .collect()
    }

    /// Overwrites values from named records; every parameter must be present
    /// with a matching shape.
    pub fn load_records(&mut self, records: &[(String, GrdtTensor)]) -> Result<()> {
        let map: BTreeMap<&str, &GrdtTensor> = records.iter().map(|(k, t)| (k.as_str(), t)).collect();
        for (name, p) in self.entries.iter_mut() {
            let t = map
                .get(name.as_str())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.shape != p.value.shape() {
                return Err(Error::dim("load parameter", p.value.shape(), &t.shape));
            }
            p.value = t.to_tensor();
        }
        Ok(())
    }
}
