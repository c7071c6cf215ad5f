//! Named parameter storage with freeze groups.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Grads, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Parameter groups that the stage freeze schedules switch on and off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// The frozen language stream: embeddings, backbone, LM head and the
    /// native linear visual-input map.
    Stub,
    Adapter,
    Shallow,
    Deep,
    NgpHead,
    SkipVlm,
    SkipD,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Stub,
        Group::Adapter,
        Group::Shallow,
        Group::Deep,
        Group::NgpHead,
        Group::SkipVlm,
        Group::SkipD,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Stub => "stub",
            Group::Adapter => "adapter",
            Group::Shallow => "shallow",
            Group::Deep => "deep",
            Group::NgpHead => "ngp_head",
            Group::SkipVlm => "skip_vlm",
            Group::SkipD => "skip_d",
        }
    }

    pub fn from_name(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Matrix<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Matrix<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn zeros(&mut self, name: &str, group: Group, rows: usize, cols: usize) -> ParamId {
        self.add(name, group, Matrix::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: &str, group: Group, rows: usize, cols: usize) -> ParamId {
        self.add(name, group, Matrix::filled(rows, cols, T::one()))
    }

    pub fn normal<R: Rng>(
        &mut self,
        name: &str,
        group: Group,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::lit(v * std)
            })
            .collect();
        self.add(name, group, Matrix { rows, cols, data })
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn count(&self, group: Option<Group>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over the little-endian `f32` encoding of every parameter in
    /// `group`, in inventory order.
    pub fn checksum(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            for v in &p.value.data {
                h.update(v.as_f32().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Copies values for every parameter of `group` from `other`, matching by
    /// name.
    pub fn copy_group_from(&mut self, other: &ParamStore<T>, group: Group) -> Result<(), String> {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| format!("parameter {} missing from source", p.name))?;
            if src.value.shape() != p.value.shape() {
                return Err(format!("parameter {} has mismatched shape", p.name));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// Binds parameters onto a tape lazily, marking each as trainable or
/// constant according to its group.
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    trainable: Vec<Group>,
    vars: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: &[Group]) -> Self {
        Binder {
            store,
            trainable: trainable.to_vec(),
            vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn is_trainable(&self, group: Group) -> bool {
        self.trainable.contains(&group)
    }

    pub fn var(&mut self, tape: &mut Tape<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = self.store.param(id);
        let v = tape.leaf(p.value.clone(), self.trainable.contains(&p.group));
        self.vars[id.0] = Some(v);
        v
    }

    /// Collects gradients for all bound trainable parameters.
    pub fn gradients(&self, grads: &mut Grads<T>) -> Vec<(ParamId, Matrix<T>)> {
        let mut out = Vec::new();
        for (i, v) in self.vars.iter().enumerate() {
            let Some(v) = v else { continue };
            if !self.trainable.contains(&self.store.params[i].group) {
                continue;
            }
            if let Some(g) = grads.take(*v) {
                out.push((ParamId(i), g));
            }
        }
        out
    }
}

/// A taped forward context: the tape plus the parameter binder.
pub struct Ctx<'a, T> {
    pub tape: Tape<T>,
    pub binder: Binder<'a, T>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: &[Group]) -> Self {
        Ctx {
            tape: Tape::new(),
            binder: Binder::new(store, trainable),
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.binder.var(&mut self.tape, id)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        self.tape.value(v)
    }

    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let wv = self.p(w);
        let bv = b.map(|b| self.p(b));
        self.tape.linear(x, wv, bv)
    }

    /// Backpropagates from a scalar and returns trainable-parameter gradients.
    pub fn gradients(&self, loss: Var) -> Vec<(ParamId, Matrix<T>)> {
        let mut grads = self.tape.backward(loss);
        self.binder.gradients(&mut grads)
    }
}
