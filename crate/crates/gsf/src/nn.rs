//! Named parameter stores, initialization, digests, and the Adam optimizer.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;

/// An ordered collection of named parameter arrays.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: IndexMap<String, ParamArray>,
}

/// Serializable array: shape + row-major data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamArray {
    pub fn from_array(a: &ArrayD<f64>) -> Self {
        ParamArray {
            shape: a.shape().to_vec(),
            data: a.iter().cloned().collect(),
        }
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .expect("corrupt parameter array")
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.params.insert(name.into(), ParamArray::from_array(&value));
    }

    pub fn get(&self, name: &str) -> Option<ArrayD<f64>> {
        self.params.get(name).map(|p| p.to_array())
    }

    pub fn set(&mut self, name: &str, value: &ArrayD<f64>) {
        let entry = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(entry.shape, value.shape(), "parameter shape changed");
        entry.data = value.iter().cloned().collect();
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamArray)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameter count across all arrays.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// SHA-256 over names, shapes, and little-endian element bytes, in sorted
    /// name order. Bit-identical arrays give identical digests.
    pub fn digest(&self) -> String {
        let mut names: Vec<&String> = self.params.keys().collect();
        names.sort();
        let mut hasher = Sha256::new();
        for name in names {
            let p = &self.params[name.as_str()];
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in &p.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                hasher.update(v.to_le_bytes());
            }
        }
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Digest restricted to a subset of names.
    pub fn digest_subset(&self, names: &HashSet<String>) -> String {
        let mut sub = ParamStore::new();
        for (k, v) in &self.params {
            if names.contains(k) {
                sub.params.insert(k.clone(), v.clone());
            }
        }
        sub.digest()
    }

    /// Bind every parameter as a tape variable: leaves for `trainable` names,
    /// constants otherwise. `trainable = None` binds everything as constants.
    pub fn bind(&self, trainable: Option<&HashSet<String>>) -> ParamVars {
        let mut map = IndexMap::new();
        for (name, p) in &self.params {
            let arr = p.to_array();
            let var = match trainable {
                Some(set) if set.contains(name) => Var::leaf(arr),
                _ => Var::constant(arr),
            };
            map.insert(name.clone(), var);
        }
        ParamVars { map }
    }
}

/// Tape bindings of a parameter store for one forward/backward pass.
pub struct ParamVars {
    map: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> &Var {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Standard-normal init scaled by 1/sqrt(fan_in).
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (1.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Adam with decoupled per-parameter moment state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: IndexMap<String, ParamArray>,
    v: IndexMap<String, ParamArray>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Apply one update. Only names present in `grads` are touched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &IndexMap<String, ArrayD<f64>>,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
            let mut p = store
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ParamArray::from_array(&zeros(g.shape())))
                .to_array();
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ParamArray::from_array(&zeros(g.shape())))
                .to_array();
            let m_new = &m * self.beta1 + g * (1.0 - self.beta1);
            let v_new = &v * self.beta2 + &g.mapv(|x| x * x) * (1.0 - self.beta2);
            let m_hat = &m_new / bc1;
            let v_hat = &v_new / bc2;
            let update = &m_hat / &v_hat.mapv(|x| x.sqrt() + self.eps);
            p = &p - &(update * self.lr);
            store.set(name, &p);
            self.m.insert(name.clone(), ParamArray::from_array(&m_new));
            self.v.insert(name.clone(), ParamArray::from_array(&v_new));
        }
        Ok(())
    }
}
