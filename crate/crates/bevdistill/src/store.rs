//! Named parameter storage, tape binding and optimizers.
//!
//! All trainable tensors live in a [`ParamStore`] keyed by name. At every
//! training step a [`Binder`] places them on a fresh tape (leaves with
//! gradients when training), forwards run against the bound `Var`s, and
//! the optimizer walks the bound names in deterministic order to apply
//! updates. Iteration is `BTreeMap`-ordered everywhere, which is what
//! makes whole training runs bit-reproducible.

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }
}

/// Binds store parameters onto a tape, once per name.
pub struct Binder<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    trainable: bool,
    overrides: BTreeMap<String, Var>,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, trainable: bool) -> Self {
        Binder {
            tape,
            store,
            trainable,
            overrides: BTreeMap::new(),
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// A binder whose named overrides take precedence over the store;
    /// everything else binds non-trainable. The gradient checker uses
    /// this to route its probe leaves into the regular forward code.
    pub fn with_overrides(
        tape: &'a Tape,
        store: &'a ParamStore,
        overrides: BTreeMap<String, Var>,
    ) -> Self {
        Binder {
            tape,
            store,
            trainable: false,
            overrides,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// The tape variable for a named parameter (bound lazily, cached).
    pub fn var(&self, name: &str) -> Var {
        if let Some(&v) = self.overrides.get(name) {
            return v;
        }
        if let Some(&v) = self.bound.borrow().get(name) {
            return v;
        }
        let tensor = self.store.get(name).clone();
        let leaf = if self.trainable {
            self.tape.leaf(tensor.with_grad())
        } else {
            self.tape.leaf(tensor)
        };
        self.bound.borrow_mut().insert(name.to_string(), leaf);
        leaf
    }

    /// Everything bound so far (overrides excluded), in name order.
    pub fn bound(&self) -> BTreeMap<String, Var> {
        self.bound.borrow().clone()
    }
}

/// Optimizer selection; stochastic gradient descent is the default, the
/// adaptive optimizer sits behind this config flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Plain SGD or Adam (β=0.9/0.999, ε=1e-8) over named parameters.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step_count: u64,
    slots: BTreeMap<String, AdamSlot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step_count: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Applies one update over the bound parameters that received
    /// gradients, in name order.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        bound: &BTreeMap<String, Var>,
        grads: &Gradients,
    ) {
        self.step_count += 1;
        for (name, &var) in bound {
            let Some(g) = grads.get(var) else { continue };
            let g = g.data().to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    let p = store.get_mut(name);
                    for (pv, gv) in p.data_mut().iter_mut().zip(&g) {
                        *pv -= self.lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    const B1: f64 = 0.9;
                    const B2: f64 = 0.999;
                    const EPS: f64 = 1e-8;
                    let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                    });
                    let t = self.step_count as f64;
                    let p = store.get_mut(name);
                    for i in 0..g.len() {
                        slot.m[i] = B1 * slot.m[i] + (1.0 - B1) * g[i];
                        slot.v[i] = B2 * slot.v[i] + (1.0 - B2) * g[i] * g[i];
                        let m_hat = slot.m[i] / (1.0 - B1.powf(t));
                        let v_hat = slot.v[i] / (1.0 - B2.powf(t));
                        p.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Uniform init in `±1/√fan_in`, the usual small-net default.
pub fn linear_init(rng: &mut impl rand::Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let k = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-k..k))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// Small nonzero bias init for layers feeding a ReLU: rows an upstream
/// ReLU clamps to zero would otherwise put the preactivation exactly on
/// the kink, where finite differences over the bias disagree with the
/// subgradient.
pub fn bias_init(rng: &mut impl rand::Rng, n: usize) -> Tensor {
    let data = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
    Tensor::new(vec![n], data)
}
