use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{cast, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which part of a model a parameter belongs to, for parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Control,
    Basis,
}

impl ParamGroup {
    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Backbone => 0,
            ParamGroup::Control => 1,
            ParamGroup::Basis => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ParamGroup::Backbone),
            1 => Some(ParamGroup::Control),
            2 => Some(ParamGroup::Basis),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Arc<Tensor<T>>,
    /// Non-trainable entries are buffers such as batch-norm running statistics.
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Named, ordered parameter storage.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool, group: ParamGroup) {
        self.params.insert(
            name.into(),
            Param {
                value: Arc::new(value),
                trainable,
                group,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    /// Mutable access, copying the tensor first if a tape still shares it.
    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(Arc::make_mut(&mut p.value))
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!("`{name}` is {:?}, got {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Number of non-trainable scalars (running statistics).
    pub fn buffer_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| !p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn count_by_group(&self, group: ParamGroup, trainable: bool) -> usize {
        self.params
            .values()
            .filter(|p| p.group == group && p.trainable == trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Register every entry on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.param(name, Arc::clone(&p.value), p.trainable)))
            .collect();
        BoundParams { vars }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: Arc::new(p.value.cast()),
                            trainable: p.trainable,
                            group: p.group,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Parameters registered on a tape for one forward pass.
pub struct BoundParams<'t, T> {
    vars: HashMap<String, Var<'t, T>>,
}

impl<'t, T: Real> BoundParams<'t, T> {
    pub fn from_vars(vars: HashMap<String, Var<'t, T>>) -> Self {
        BoundParams { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }
}

/// Normal samples truncated to two standard deviations.
pub fn truncated_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![cast(mean); n]
    } else {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..n)
            .map(|_| loop {
                let z: f64 = normal.sample(rng);
                if z.abs() <= 2.0 {
                    break cast(mean + std * z);
                }
            })
            .collect()
    };
    Tensor::from_parts(shape.to_vec(), data)
}

/// Fan-in scaled truncated normal for ReLU-family layers.
pub fn fan_in_init<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    // 0.8796 is the std of a unit normal truncated at two sigma
    let std = (2.0 / fan_in as f64).sqrt() / 0.879_625_7;
    truncated_normal(shape, 0.0, std, rng)
}
