//! Named parameter storage and the Adam optimizer.

use super::{Graph, Var};
use ndarray::ArrayD;
use std::rc::Rc;

/// One named parameter tensor. Storage is shared with any live graphs via
/// `Rc`; the optimizer uses copy-on-write so stepping never invalidates a
/// graph built from an earlier version.
#[derive(Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Rc<ArrayD<f64>>,
}

/// Ordered collection of named parameters belonging to one model.
#[derive(Clone, Default)]
pub struct ParamGroup {
    entries: Vec<ParamEntry>,
}

impl ParamGroup {
    #[must_use]
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value: Rc::new(value),
        });
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    #[must_use]
    pub fn count_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    #[must_use]
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    #[must_use]
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index_of(name).map(|i| &*self.entries[i].value)
    }

    pub fn entry(&self, i: usize) -> &ParamEntry {
        &self.entries[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut ArrayD<f64> {
        Rc::make_mut(&mut self.entries[i].value)
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.entries[i].value = Rc::new(value);
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    /// Insert every entry into `g` in order and return the handles.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| g.param(Rc::clone(&e.value)))
            .collect()
    }

    /// Deep snapshot, detached from any shared storage.
    #[must_use]
    pub fn snapshot(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: Rc::new((*e.value).clone()),
                })
                .collect(),
        }
    }

    pub fn restore(&mut self, snapshot: &Self) {
        assert_eq!(self.len(), snapshot.len(), "snapshot shape mismatch");
        for (e, s) in self.entries.iter_mut().zip(snapshot.entries.iter()) {
            assert_eq!(e.name, s.name, "snapshot name mismatch");
            e.value = Rc::new((*s.value).clone());
        }
    }
}

/// Bind several groups in order; the returned handles align with
/// [`collect_grads`] and [`Adam::step`].
pub fn bind_groups(g: &mut Graph, groups: &[&ParamGroup]) -> Vec<Var> {
    let mut vars = Vec::new();
    for group in groups {
        vars.extend(group.bind(g));
    }
    vars
}

/// Gradients for bound parameters after `backward`, zeros where a parameter
/// was unreachable from the loss.
#[must_use]
pub fn collect_grads(g: &Graph, vars: &[Var]) -> Vec<ArrayD<f64>> {
    vars.iter()
        .map(|&v| match g.grad(v) {
            Some(gr) => gr.clone(),
            None => ArrayD::zeros(g.value(v).raw_dim()),
        })
        .collect()
}

/// Adam with bias correction. State is keyed by position in the flattened
/// group list, so the same optimizer must always see the same group layout.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    #[must_use]
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, groups: &mut [&mut ParamGroup], grads: &[ArrayD<f64>]) {
        let total: usize = groups.iter().map(|g| g.len()).sum();
        assert_eq!(total, grads.len(), "grad count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
            self.v = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let mut k = 0usize;
        for group in groups.iter_mut() {
            for i in 0..group.len() {
                let g = &grads[k];
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                assert_eq!(g.shape(), group.entry(i).value.shape(), "grad shape mismatch");
                ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
                    *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                });
                ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                    *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                });
                let target = group.value_mut(i);
                ndarray::Zip::from(target).and(&*m).and(&*v).for_each(|p, &mv, &vv| {
                    let mhat = mv / b1t;
                    let vhat = vv / b2t;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
                k += 1;
            }
        }
    }
}
